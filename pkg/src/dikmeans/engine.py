"""Vectorized two-stage landmark fitting over batches of (image, centroid) pairs.

A batch is B independent pairs sharing one TpsSystem and one FitConfig;
per-pair optimizer state lives in parallel arrays so refreshing thousands
of pairs costs a handful of BLAS calls per optimization step. The per-pair
operations in :mod:`dikmeans.optim` are thin wrappers over this module with
B = 1, which keeps the two code paths identical by construction.

Stage 1 fits the six affine parameters (2x2 matrix and shift, applied about
the frame center) against low-pass-filtered inputs; stage 2 fits all 2l
target coordinates against the unfiltered residual, clamped to a box around
the affine-stage landmark positions so a fit cannot wander into a warp that
changes the content class. Both stages keep the best iterate seen, and the
evaluation entry point never returns more than the loss at its warm start.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tps, warp

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

# Landmarks may move at most this many grid-cell widths from their
# affine-stage position during stage 2.
CLAMP_CELLS = 1.5

IDENTITY_AFFINE = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass
class PairState:
    """Optimizer state for B pairs, stored as parallel arrays."""

    target: np.ndarray      # (B, l, 2) current target landmarks
    affine: np.ndarray      # (B, 2, 3) stage-1 parameters [A | t]
    m_affine: np.ndarray    # (B, 2, 3) Adam first moment, affine block
    v_affine: np.ndarray    # (B, 2, 3) Adam second moment, affine block
    t_affine: np.ndarray    # (B,) step counts, affine block
    m_target: np.ndarray    # (B, l, 2) Adam first moment, landmark block
    v_target: np.ndarray    # (B, l, 2) Adam second moment, landmark block
    t_target: np.ndarray    # (B,) step counts, landmark block
    affine_done: np.ndarray  # (B,) bool, stage 1 ran (or was skipped) at least once
    last_loss: np.ndarray   # (B,) most recent best loss

    def __len__(self):
        return self.target.shape[0]


def fresh_state(n_pairs: int, source: np.ndarray) -> PairState:
    l = source.shape[0]
    return PairState(
        target=np.tile(source, (n_pairs, 1, 1)),
        affine=np.tile(IDENTITY_AFFINE, (n_pairs, 1, 1)),
        m_affine=np.zeros((n_pairs, 2, 3)),
        v_affine=np.zeros((n_pairs, 2, 3)),
        t_affine=np.zeros(n_pairs, dtype=np.int64),
        m_target=np.zeros((n_pairs, l, 2)),
        v_target=np.zeros((n_pairs, l, 2)),
        t_target=np.zeros(n_pairs, dtype=np.int64),
        affine_done=np.zeros(n_pairs, dtype=bool),
        last_loss=np.full(n_pairs, np.inf),
    )


def reset_pairs(state: PairState, idx, source: np.ndarray) -> None:
    """Return the selected pairs to the fresh identity state."""
    state.target[idx] = source
    state.affine[idx] = IDENTITY_AFFINE
    state.m_affine[idx] = 0.0
    state.v_affine[idx] = 0.0
    state.t_affine[idx] = 0
    state.m_target[idx] = 0.0
    state.v_target[idx] = 0.0
    state.t_target[idx] = 0
    state.affine_done[idx] = False
    state.last_loss[idx] = np.inf


def adam_core(params, grad, m, v, t, config):
    """One bias-corrected Adam step; t is the step index after increment."""
    b1 = config.adam_beta1
    b2 = config.adam_beta2
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * (grad * grad)
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    params = params - config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_epsilon)
    return params, m, v


def affine_targets(affine, source, center):
    """Landmarks produced by the stage-1 parameters, in displacement form.

    target = source + (A - I) (source - center) + shift, so the identity
    parameters reproduce the source grid bit-exactly.
    """
    a2 = affine[..., :2] - np.eye(2)
    shift = affine[..., 2]
    disp = np.einsum("...de,ie->...id", a2, source - center)
    return source + disp + shift[..., None, :]


def _apply_map(grid_map, disp):
    """grid_map @ disp over the batch, folded into a single GEMM."""
    b, l, _ = disp.shape
    out = grid_map @ disp.transpose(1, 0, 2).reshape(l, b * 2)
    return out.reshape(-1, b, 2).transpose(1, 0, 2)


def pair_losses(images_flat, centroids_flat, system, frame_shape, targets, want_grad=False):
    """Loss per pair (and gradient w.r.t. targets) at the given landmarks.

    images_flat / centroids_flat: (B, n) or broadcastable (1, n).
    targets: (B, l, 2).
    """
    grid_map = system.grid_map(frame_shape)
    grid = tps.frame_coords(frame_shape)
    coords = grid + _apply_map(grid_map, targets - system.source)
    loss, dcoords = warp._pair_residuals(images_flat, centroids_flat, coords, frame_shape, want_grad)
    if not want_grad:
        return loss, None
    grad = grid_map.T @ dcoords
    return loss, grad


def batch_warp(images_flat, system, frame_shape, targets):
    """Warped images, one per pair; (B, n) out."""
    grid_map = system.grid_map(frame_shape)
    grid = tps.frame_coords(frame_shape)
    coords = grid + _apply_map(grid_map, targets - system.source)
    return warp._sample(images_flat, coords, frame_shape)


def _best_update(best_loss, best_params, loss, params):
    better = loss < best_loss
    if np.any(better):
        best_loss[better] = loss[better]
        best_params[better] = params[better]


def run_affine_stage(blur_images, blur_centroids, system, frame_shape, state, config, idx=None):
    """Stage 1: Adam on the six affine parameters against the blurred residual.

    Keeps the best iterate (by blurred loss) among the initial parameters and
    every step taken; syncs state.target to the affine-mapped source grid.
    """
    if config.stage1_steps == 0:
        return
    if idx is None:
        idx = np.arange(len(state))
    if len(idx) == 0:
        return
    h, w = frame_shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    source = system.source
    src_c = source - center

    params = state.affine[idx]
    m = state.m_affine[idx]
    v = state.v_affine[idx]
    t = state.t_affine[idx]

    targets = affine_targets(params, source, center)
    loss, gt = pair_losses(blur_images, blur_centroids, system, frame_shape, targets, want_grad=True)
    best_loss = loss.copy()
    best_params = params.copy()
    for step in range(config.stage1_steps):
        g_mat = np.einsum("bid,ie->bde", gt, src_c)
        g_shift = gt.sum(axis=1)
        grad = np.concatenate([g_mat, g_shift[:, :, None]], axis=2)
        t = t + 1
        params, m, v = adam_core(params, grad, m, v, t[:, None, None], config)
        targets = affine_targets(params, source, center)
        last = step == config.stage1_steps - 1
        loss, gt = pair_losses(
            blur_images, blur_centroids, system, frame_shape, targets, want_grad=not last
        )
        _best_update(best_loss, best_params, loss, params)

    state.affine[idx] = best_params
    state.m_affine[idx] = m
    state.v_affine[idx] = v
    state.t_affine[idx] = t
    state.target[idx] = affine_targets(best_params, source, center)


def run_diffeo_stage(images_flat, centroids_flat, system, frame_shape, state, config, idx=None):
    """Stage 2: Adam on the full target landmarks against the unfiltered residual.

    Landmarks are clamped to CLAMP_CELLS grid-cell widths around the
    affine-stage positions. Keeps the best iterate including the starting
    point, and records it in state.target / state.last_loss, so this also
    serves as a plain evaluation when stage2_steps is 0.
    """
    if idx is None:
        idx = np.arange(len(state))
    if len(idx) == 0:
        return
    h, w = frame_shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    source = system.source

    params = state.target[idx]
    if config.stage2_steps == 0:
        loss, _ = pair_losses(images_flat, centroids_flat, system, frame_shape, params)
        state.last_loss[idx] = loss
        return

    cell = tps.grid_cell(frame_shape, system.n_landmarks)
    anchor = affine_targets(state.affine[idx], source, center)
    slack = CLAMP_CELLS * np.array(cell)
    lo = anchor - slack
    hi = anchor + slack

    m = state.m_target[idx]
    v = state.v_target[idx]
    t = state.t_target[idx]

    loss, gt = pair_losses(images_flat, centroids_flat, system, frame_shape, params, want_grad=True)
    best_loss = loss.copy()
    best_params = params.copy()
    for step in range(config.stage2_steps):
        t = t + 1
        params, m, v = adam_core(params, gt, m, v, t[:, None, None], config)
        np.clip(params, lo, hi, out=params)
        last = step == config.stage2_steps - 1
        loss, gt = pair_losses(
            images_flat, centroids_flat, system, frame_shape, params, want_grad=not last
        )
        _best_update(best_loss, best_params, loss, params)

    state.target[idx] = best_params
    state.m_target[idx] = m
    state.v_target[idx] = v
    state.t_target[idx] = t
    state.last_loss[idx] = best_loss


def run_evaluate(
    images_flat,
    centroids_flat,
    system,
    frame_shape,
    state,
    config,
    idx=None,
    blur_images=None,
    blur_centroids=None,
):
    """Warm-started two-stage evaluation of the warp distances for a batch.

    Runs stage 1 for pairs that still need it (first visit, or every visit
    when config.affine_every_epoch is set), then stage 2 for everything,
    then reverts any pair whose best loss came out above the loss at its
    warm-start landmarks. Returns the distances and updates state in place.
    """
    if idx is None:
        idx = np.arange(len(state))
    warm_targets = state.target[idx].copy()
    warm_loss, _ = pair_losses(images_flat, centroids_flat, system, frame_shape, warm_targets)

    if config.stage1_steps > 0:
        needs = ~state.affine_done[idx] if not config.affine_every_epoch else np.ones(len(idx), dtype=bool)
        if np.any(needs):
            if blur_images is None:
                raise ValueError("stage 1 is active but no blurred inputs were supplied")
            sub = idx[needs]
            run_affine_stage(
                blur_images[needs], blur_centroids[needs], system, frame_shape, state, config, sub
            )
    state.affine_done[idx] = True

    run_diffeo_stage(images_flat, centroids_flat, system, frame_shape, state, config, idx)

    worse = state.last_loss[idx] > warm_loss
    if np.any(worse):
        sub = idx[worse]
        state.target[sub] = warm_targets[worse]
        state.last_loss[sub] = warm_loss[worse]
    return state.last_loss[idx].copy()
