"""Per-pair two-stage fitting of warp landmarks to a centroid.

The distance between a sample and a centroid is the best squared residual
of a landmark warp of the sample, found by Adam. Stage 1 searches the six
affine parameters on low-pass-filtered inputs; stage 2 refines all target
landmarks on the raw residual. A WarpFit persists across epochs so each
evaluation warm-starts from the previous optimum, and the returned value
never exceeds the loss at the warm-start landmarks.

These functions delegate to :mod:`dikmeans.engine` with a batch of one, so
they share every numerical detail with the vectorized clustering path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import engine, tps, warp


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters of the two-stage landmark optimization.

    learning_rate defaults inside the cross-validation grid
    (1e-4 ... 5e-2); stage budgets are per evaluation call. When
    affine_every_epoch is False the affine stage runs only on the first
    evaluation of a pair and later calls warm-start from stage 2 alone.
    """

    learning_rate: float = 1e-2
    stage1_steps: int = 25
    stage2_steps: int = 10
    blur_sigma: float = 2.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    affine_every_epoch: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.blur_sigma <= 0:
            raise ValueError("blur_sigma must be positive")
        for beta in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < beta < 1.0:
                raise ValueError("Adam betas must lie in (0, 1)")


@dataclass
class WarpFit:
    """Mutable optimization state for one (sample, centroid) pair."""

    target: np.ndarray        # (l, 2) current target landmarks
    affine: np.ndarray        # (2, 3) stage-1 parameters [A | t]
    m_affine: np.ndarray
    v_affine: np.ndarray
    t_affine: int
    m_target: np.ndarray
    v_target: np.ndarray
    t_target: int
    affine_done: bool
    last_loss: float


def fresh_fit(system: tps.TpsSystem) -> WarpFit:
    """Identity warm start: target on the source grid, zero moments."""
    l = system.n_landmarks
    return WarpFit(
        target=system.source.copy(),
        affine=engine.IDENTITY_AFFINE.copy(),
        m_affine=np.zeros((2, 3)),
        v_affine=np.zeros((2, 3)),
        t_affine=0,
        m_target=np.zeros((l, 2)),
        v_target=np.zeros((l, 2)),
        t_target=0,
        affine_done=False,
        last_loss=np.inf,
    )


def adam_step(params, grad, moments, step_count, config: FitConfig):
    """Standard bias-corrected Adam update on one parameter block.

    moments is the (m, v) pair; step_count is the 1-based index of this
    step (i.e. already incremented). Returns (params, (m, v)).
    """
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape:
        raise ValueError("params and grad must have the same shape")
    if step_count < 1:
        raise ValueError("step_count must be >= 1 after increment")
    m, v = moments
    params, m, v = engine.adam_core(params, grad, m, v, step_count, config)
    return params, (m, v)


def _as_state(fit: WarpFit) -> engine.PairState:
    return engine.PairState(
        target=fit.target[None].copy(),
        affine=fit.affine[None].copy(),
        m_affine=fit.m_affine[None].copy(),
        v_affine=fit.v_affine[None].copy(),
        t_affine=np.array([fit.t_affine], dtype=np.int64),
        m_target=fit.m_target[None].copy(),
        v_target=fit.v_target[None].copy(),
        t_target=np.array([fit.t_target], dtype=np.int64),
        affine_done=np.array([fit.affine_done]),
        last_loss=np.array([float(fit.last_loss)]),
    )


def _writeback(fit: WarpFit, state: engine.PairState) -> None:
    fit.target = state.target[0]
    fit.affine = state.affine[0]
    fit.m_affine = state.m_affine[0]
    fit.v_affine = state.v_affine[0]
    fit.t_affine = int(state.t_affine[0])
    fit.m_target = state.m_target[0]
    fit.v_target = state.v_target[0]
    fit.t_target = int(state.t_target[0])
    fit.affine_done = bool(state.affine_done[0])
    fit.last_loss = float(state.last_loss[0])


def fit_affine_stage(image, centroid, system, fit: WarpFit, config: FitConfig) -> WarpFit:
    """Run the affine stage for one pair on blurred inputs; best iterate kept."""
    image = np.asarray(image, dtype=float)
    centroid = np.asarray(centroid, dtype=float)
    state = _as_state(fit)
    blur_img = warp.low_pass(image, config.blur_sigma).reshape(1, -1)
    blur_cen = warp.low_pass(centroid, config.blur_sigma).reshape(1, -1)
    engine.run_affine_stage(blur_img, blur_cen, system, image.shape, state, config)
    _writeback(fit, state)
    return fit


def fit_diffeo_stage(image, centroid, system, fit: WarpFit, config: FitConfig) -> WarpFit:
    """Refine all target landmarks for one pair on the raw residual."""
    image = np.asarray(image, dtype=float)
    centroid = np.asarray(centroid, dtype=float)
    state = _as_state(fit)
    engine.run_diffeo_stage(
        image.reshape(1, -1), centroid.reshape(1, -1), system, image.shape, state, config
    )
    _writeback(fit, state)
    return fit


def evaluate_distance(image, centroid, system, fit: WarpFit, config: FitConfig) -> float:
    """Warm-started two-stage distance; updates the fit in place.

    Never returns more than the loss at the warm-start landmarks, so the
    cached distance of a pair is non-increasing across calls against a
    fixed centroid.
    """
    image = np.asarray(image, dtype=float)
    centroid = np.asarray(centroid, dtype=float)
    state = _as_state(fit)
    blur_img = blur_cen = None
    if config.stage1_steps > 0 and (config.affine_every_epoch or not fit.affine_done):
        blur_img = warp.low_pass(image, config.blur_sigma).reshape(1, -1)
        blur_cen = warp.low_pass(centroid, config.blur_sigma).reshape(1, -1)
    dist = engine.run_evaluate(
        image.reshape(1, -1),
        centroid.reshape(1, -1),
        system,
        image.shape,
        state,
        config,
        blur_images=blur_img,
        blur_centroids=blur_cen,
    )
    _writeback(fit, state)
    return float(dist[0])
