"""The deformation-invariant K-means loop.

Seeding is plain D^2-weighted K-means++ under the Euclidean distance;
assignment minimizes the warm-started warp residual against every centroid;
the centroid update is the unit-norm projection of the mean of the members'
warped images, which is the exact constrained minimizer for fixed fits and
assignments. Together with best-iterate fitting this makes the recorded
distortion non-increasing from epoch to epoch.

Pair fits live in one struct-of-arrays bank (row-major pair index i * K + k)
so a full refresh is a few vectorized passes; work is split into fixed-size
chunks that can be farmed out to threads without changing any result except
floating-point summation order, and a single-threaded run is bit-reproducible.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import engine, metrics, optim, tps, warp
from .errors import InsufficientData

# Pairs per vectorized engine call; bounds peak memory, not results.
CHUNK_PAIRS = 2048


@dataclass
class ClusterState:
    """Everything the loop carries between epochs."""

    centroids: np.ndarray          # (K, H, W), each unit Euclidean norm
    assignments: np.ndarray        # (N,) cluster indices
    bank: engine.PairState         # N*K pair fits, row-major (i * K + k)
    distances: np.ndarray          # (N, K) cached losses from the last assignment
    epoch: int
    distortion_history: list = field(default_factory=list)
    change_history: list = field(default_factory=list)
    system: tps.TpsSystem = None
    kind: metrics.MetricKind = metrics.MetricKind.DEFORMATION_INVARIANT
    config: optim.FitConfig = None

    @property
    def n_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_samples(self) -> int:
        return self.assignments.shape[0]

    def fit(self, i: int, k: int) -> optim.WarpFit:
        """Snapshot of the fit for pair (sample i, centroid k)."""
        p = i * self.n_clusters + k
        b = self.bank
        return optim.WarpFit(
            target=b.target[p].copy(),
            affine=b.affine[p].copy(),
            m_affine=b.m_affine[p].copy(),
            v_affine=b.v_affine[p].copy(),
            t_affine=int(b.t_affine[p]),
            m_target=b.m_target[p].copy(),
            v_target=b.v_target[p].copy(),
            t_target=int(b.t_target[p]),
            affine_done=bool(b.affine_done[p]),
            last_loss=float(b.last_loss[p]),
        )

    def put_fit(self, i: int, k: int, fit: optim.WarpFit) -> None:
        p = i * self.n_clusters + k
        b = self.bank
        b.target[p] = fit.target
        b.affine[p] = fit.affine
        b.m_affine[p] = fit.m_affine
        b.v_affine[p] = fit.v_affine
        b.t_affine[p] = fit.t_affine
        b.m_target[p] = fit.m_target
        b.v_target[p] = fit.v_target
        b.t_target[p] = fit.t_target
        b.affine_done[p] = fit.affine_done
        b.last_loss[p] = fit.last_loss


def kmeanspp_init(images, k: int, rng_seed) -> np.ndarray:
    """D^2-weighted seeding under the Euclidean distance.

    Returns copies of k dataset images. Deterministic for a given seed;
    also accepts a numpy Generator in place of the seed.
    """
    images = np.asarray(images, dtype=float)
    n = images.shape[0]
    if n < k:
        raise InsufficientData(f"{n} samples for {k} clusters")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    flat = images.reshape(n, -1)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    diff = flat - flat[chosen[0]]
    d2 = np.einsum("nd,nd->n", diff, diff)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        else:
            # all remaining mass is zero (duplicates); fall back to uniform
            # over the not-yet-chosen images so k = n yields a permutation
            free = np.flatnonzero(~taken)
            idx = int(free[rng.integers(len(free))])
        chosen[j] = idx
        taken[idx] = True
        diff = flat - flat[idx]
        d2 = np.minimum(d2, np.einsum("nd,nd->n", diff, diff))
    return images[chosen].copy()


def _chunks(order, size):
    for start in range(0, len(order), size):
        yield order[start : start + size]


def _refresh_pairs(flat_images, flat_centroids, system, frame_shape, bank, kind, config, groups, threads):
    """Re-evaluate the listed pairs (absolute bank indices), updating the bank."""
    k = flat_centroids.shape[0]
    cfg = metrics.effective_config(kind, config)

    if kind is metrics.MetricKind.EUCLIDEAN:
        def euclid_chunk(pairs):
            diff = flat_images[pairs // k] - flat_centroids[pairs % k]
            bank.last_loss[pairs] = np.einsum("bn,bn->b", diff, diff)

        for group in groups:
            for chunk in _chunks(group, CHUNK_PAIRS):
                euclid_chunk(chunk)
        return

    blur_images = blur_centroids = None
    if cfg.stage1_steps > 0 and (cfg.affine_every_epoch or not bank.affine_done.all()):
        blur_images = np.stack(
            [warp.low_pass(im.reshape(frame_shape), cfg.blur_sigma).ravel() for im in flat_images]
        )
        blur_centroids = np.stack(
            [warp.low_pass(c.reshape(frame_shape), cfg.blur_sigma).ravel() for c in flat_centroids]
        )

    system.grid_map(frame_shape)  # build once before any thread fan-out

    def run_chunk(pairs):
        img_idx = pairs // k
        cen_idx = pairs % k
        engine.run_evaluate(
            flat_images[img_idx],
            flat_centroids[cen_idx],
            system,
            frame_shape,
            bank,
            cfg,
            idx=pairs,
            blur_images=None if blur_images is None else blur_images[img_idx],
            blur_centroids=None if blur_centroids is None else blur_centroids[cen_idx],
        )

    for group in groups:
        chunks = list(_chunks(group, CHUNK_PAIRS))
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(run_chunk, chunks))
        else:
            for chunk in chunks:
                run_chunk(chunk)


def assign(state: ClusterState, images, kind=None, config=None, *, groups=None, threads=1):
    """Refresh every (sample, centroid) fit and reassign samples.

    Stores the full N x K distance matrix in state.distances and sets
    assignments to the per-row argmin (ties to the lowest cluster index).
    """
    images = np.asarray(images, dtype=float)
    kind = state.kind if kind is None else kind
    config = state.config if config is None else config
    n = images.shape[0]
    k = state.n_clusters
    frame_shape = images.shape[1:]
    if groups is None:
        groups = [np.arange(n * k)]
    _refresh_pairs(
        images.reshape(n, -1),
        state.centroids.reshape(k, -1),
        state.system,
        frame_shape,
        state.bank,
        kind,
        config,
        groups,
        threads,
    )
    state.distances = state.bank.last_loss.reshape(n, k).copy()
    state.assignments = np.argmin(state.distances, axis=1)
    return state


def update_centroids(state: ClusterState, images, system=None, *, threads=1):
    """Unit-normalized mean of each cluster's warped members.

    For fixed fits and assignments this is the exact minimizer of the
    within-cluster residual over unit-norm centroids. Empty clusters are
    reseeded to the sample currently farthest from its assigned centroid,
    and that column's fits return to the fresh identity state.
    """
    images = np.asarray(images, dtype=float)
    system = state.system if system is None else system
    n = images.shape[0]
    k = state.n_clusters
    frame_shape = images.shape[1:]
    flat = images.reshape(n, -1)
    empties = []
    for c in range(k):
        members = np.flatnonzero(state.assignments == c)
        if len(members) == 0:
            empties.append(c)
            continue
        acc = np.zeros(flat.shape[1])
        for chunk in _chunks(members, CHUNK_PAIRS):
            targets = state.bank.target[chunk * k + c]
            acc += engine.batch_warp(flat[chunk], system, frame_shape, targets).sum(axis=0)
        mean = acc / len(members)
        norm = np.linalg.norm(mean)
        if norm > 0:
            state.centroids[c] = (mean / norm).reshape(frame_shape)

    if empties:
        assigned_d = state.distances[np.arange(n), state.assignments]
        order = np.argsort(-assigned_d)
        used = 0
        for c in empties:
            i = int(order[used])
            used += 1
            state.centroids[c] = images[i].copy()
            engine.reset_pairs(state.bank, np.arange(n) * k + c, system.source)
    return state


def train(
    images,
    k: int,
    kind: metrics.MetricKind,
    config: optim.FitConfig,
    rng_seed,
    *,
    n_landmarks: int = 16,
    max_epochs: int = 150,
    min_change: float = 1e-3,
    batch_size=None,
    threads: int = 1,
    norm: str = "l1",
    regularization: float = 0.0,
) -> ClusterState:
    """Full training loop: seed, then alternate assignment and centroid updates.

    Stops after max_epochs or once the fraction of changed assignments
    drops below min_change. distortion_history holds the summed assigned
    distances recorded at each assignment pass; with warm starts it is
    non-increasing. max_epochs = 0 performs the seeding plus one
    assignment pass and no centroid update.
    """
    images = np.asarray(images, dtype=float)
    n = images.shape[0]
    if n < k:
        raise InsufficientData(f"{n} samples for {k} clusters")
    frame_shape = images.shape[1:]
    rng = np.random.default_rng(rng_seed)
    system = tps.shared_system(frame_shape, n_landmarks, regularization, norm)
    centroids = kmeanspp_init(images, k, rng)
    state = ClusterState(
        centroids=centroids,
        assignments=np.zeros(n, dtype=np.int64),
        bank=engine.fresh_state(n * k, system.source),
        distances=np.zeros((n, k)),
        epoch=0,
        system=system,
        kind=kind,
        config=config,
    )

    def one_assignment():
        groups = _epoch_groups(n, k, batch_size, rng)
        assign(state, images, kind, config, groups=groups, threads=threads)
        distortion = float(state.distances[np.arange(n), state.assignments].sum())
        state.distortion_history.append(distortion)

    if max_epochs == 0:
        one_assignment()
        state.change_history.append(1.0)
        return state

    prev = None
    for epoch in range(max_epochs):
        one_assignment()
        state.epoch = epoch + 1
        frac = 1.0 if prev is None else float(np.mean(state.assignments != prev))
        state.change_history.append(frac)
        prev = state.assignments.copy()
        if epoch > 0 and frac < min_change:
            break
        update_centroids(state, images, system, threads=threads)
    return state


def _epoch_groups(n, k, batch_size, rng):
    """Shuffled sample mini-batches, expanded to pair indices.

    Grouping controls the order in which fits are refreshed within an
    epoch (and peak memory); pairs are independent, so it does not change
    results. Assignment and centroid updates always use the full epoch.
    """
    if not batch_size or batch_size >= n:
        return [np.arange(n * k)]
    order = rng.permutation(n)
    groups = []
    for start in range(0, n, batch_size):
        samples = order[start : start + batch_size]
        groups.append((samples[:, None] * k + np.arange(k)[None, :]).ravel())
    return groups


def test_assignment_details(state: ClusterState, test_images, kind=None, config=None, *, threads=1):
    """Fresh-fit assignment of held-out samples against frozen centroids.

    Returns (assignments, distances, bank); the bank holds the fitted
    landmarks, which downstream export uses for warped representations.
    """
    test_images = np.asarray(test_images, dtype=float)
    kind = state.kind if kind is None else kind
    config = state.config if config is None else config
    m = test_images.shape[0]
    k = state.n_clusters
    frame_shape = test_images.shape[1:]
    bank = engine.fresh_state(m * k, state.system.source)
    _refresh_pairs(
        test_images.reshape(m, -1),
        state.centroids.reshape(k, -1),
        state.system,
        frame_shape,
        bank,
        kind,
        config,
        [np.arange(m * k)],
        threads,
    )
    distances = bank.last_loss.reshape(m, k).copy()
    return np.argmin(distances, axis=1), distances, bank


def assign_test(state: ClusterState, test_images, kind=None, config=None, *, threads=1) -> np.ndarray:
    """Two-stage fresh-fit assignment of test samples; centroids untouched."""
    assignments, _, _ = test_assignment_details(state, test_images, kind, config, threads=threads)
    return assignments
