"""Thin-plate-spline systems: assembly, solving and coordinate mapping.

A warp of the plane is parametrized by moving a fixed set of source
landmarks to target positions; the spline interpolates that correspondence
with an affine part plus a radial kernel expansion. All coordinates are
(row, col) pixel units with the origin at the top-left pixel center, and
landmark sets are (l, 2) float arrays in row-major grid order. The radial
distance feeding the kernel uses the L1 norm by default; an L2 variant is
available for sensitivity checks.

Because the bordered system matrix depends only on the source landmarks,
its inverse is computed once per configuration and reused for every target
set (see :func:`shared_system` and :func:`factorization_count`).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, SingularSystem

# Condition estimates above this raise SingularSystem: the placement is
# degenerate for practical purposes even if the inverse formally exists.
CONDITION_LIMIT = 1e12


def kernel(r):
    """Radial kernel r^2 * log(r^2), continuously extended to 0 at r = 0."""
    arr = np.asarray(r, dtype=float)
    out = np.zeros_like(arr)
    pos = arr > 0
    rp = arr[pos]
    out[pos] = rp * rp * np.log(rp * rp)
    if out.ndim == 0:
        return float(out)
    return out


def _radial(diff, norm):
    if norm == "l1":
        return np.abs(diff).sum(axis=-1)
    if norm == "l2":
        return np.sqrt((diff * diff).sum(axis=-1))
    raise ValueError(f"unknown norm {norm!r}; expected 'l1' or 'l2'")


def grid_landmarks(frame_shape, n_landmarks):
    """Uniform sqrt(l) x sqrt(l) landmark grid inset half a cell from the frame.

    Row-major order: the landmark at grid row a, grid column b has index
    a * side + b.
    """
    side = math.isqrt(n_landmarks)
    if side * side != n_landmarks or n_landmarks < 4:
        raise ValueError(f"landmark count must be a perfect square >= 4, got {n_landmarks}")
    h, w = frame_shape
    cell_u = h / side
    cell_v = w / side
    us = (np.arange(side) + 0.5) * cell_u
    vs = (np.arange(side) + 0.5) * cell_v
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def grid_cell(frame_shape, n_landmarks):
    """(cell_u, cell_v) spacing of the uniform landmark grid on a frame."""
    side = math.isqrt(n_landmarks)
    h, w = frame_shape
    return h / side, w / side


def frame_coords(frame_shape):
    """All pixel-center coordinates of a frame, row-major, as an (H*W, 2) array."""
    h, w = frame_shape
    uu, vv = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


@dataclass(frozen=True)
class TpsParams:
    """Solved spline coefficients for one target landmark set.

    affine:  (3, 2) array; rows are the constant, u and v coefficients of
             the affine part, one column per output dimension.
    weights: (l, 2) kernel weights, one column per output dimension. The
             bottom rows of the system force sum(w) = sum(w*u) = sum(w*v) = 0.
    """

    affine: np.ndarray
    weights: np.ndarray


class TpsSystem:
    """Precomputed interpolation system for one set of source landmarks.

    Immutable after construction and safe to share read-only between
    workers; the only mutable members are internal caches guarded by a lock.
    """

    def __init__(self, source, l_inverse, regularization, norm, frame_shape=None):
        self.source = source
        self.l_inverse = l_inverse
        self.regularization = regularization
        self.norm = norm
        self.frame_shape = frame_shape
        self._grid_maps = {}
        self._lock = threading.Lock()

    @property
    def n_landmarks(self):
        return self.source.shape[0]

    def grid_map(self, frame_shape):
        """Cached target-to-coordinates matrix for a full pixel grid."""
        key = tuple(frame_shape)
        with self._lock:
            m = self._grid_maps.get(key)
            if m is None:
                m = target_map(self, frame_coords(frame_shape))
                self._grid_maps[key] = m
        return m


def _assemble(source, regularization, norm):
    l = source.shape[0]
    diff = source[:, None, :] - source[None, :, :]
    k = kernel(_radial(diff, norm))
    if regularization:
        k = k + regularization * np.eye(l)
    p = np.concatenate([np.ones((l, 1)), source], axis=1)
    full = np.zeros((l + 3, l + 3))
    full[:l, :l] = k
    full[:l, l:] = p
    full[l:, :l] = p.T
    return full


def build_system(source, regularization=0.0, norm="l1", frame_shape=None):
    """Assemble and invert the bordered landmark system.

    Raises SingularSystem when the landmark placement is degenerate
    (collinear points, coincident points, or anything with a condition
    estimate above CONDITION_LIMIT).
    """
    source = np.ascontiguousarray(source, dtype=float)
    if source.ndim != 2 or source.shape[1] != 2:
        raise DimensionMismatch(f"source landmarks must be (l, 2), got {source.shape}")
    if source.shape[0] < 3:
        raise SingularSystem("need at least 3 landmarks")
    if regularization < 0:
        raise ValueError("regularization must be non-negative")
    full = _assemble(source, regularization, norm)
    if not np.isfinite(full).all():
        raise SingularSystem("non-finite entries in the landmark system")
    cond = np.linalg.cond(full)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise SingularSystem(f"landmark system condition estimate {cond:.3e} exceeds {CONDITION_LIMIT:.0e}")
    l_inverse = np.linalg.inv(full)
    global _factorizations
    with _cache_lock:
        _factorizations += 1
    return TpsSystem(source, l_inverse, regularization, norm, frame_shape)


def solve(system: TpsSystem, target) -> TpsParams:
    """Coefficients mapping the system's source landmarks onto a target set."""
    target = np.asarray(target, dtype=float)
    if target.shape != system.source.shape:
        raise DimensionMismatch(
            f"target shape {target.shape} does not match source {system.source.shape}"
        )
    l = system.n_landmarks
    rhs = np.concatenate([target, np.zeros((3, 2))], axis=0)
    coeff = system.l_inverse @ rhs
    return TpsParams(affine=coeff[l:], weights=coeff[:l])


def _basis(system: TpsSystem, coords):
    """Per-coordinate basis row [U(dist to each source), 1, u, v]."""
    diff = coords[:, None, :] - system.source[None, :, :]
    u = kernel(_radial(diff, system.norm))
    return np.concatenate([u, np.ones((coords.shape[0], 1)), coords], axis=1)


def map_coords(params: TpsParams, system: TpsSystem, coords):
    """Map plane coordinates through the fitted spline; (n, 2) in, (n, 2) out."""
    coords = np.asarray(coords, dtype=float)
    squeeze = coords.ndim == 1
    coords = np.atleast_2d(coords)
    basis = _basis(system, coords)
    out = basis @ np.concatenate([params.weights, params.affine], axis=0)
    return out[0] if squeeze else out


def target_map(system: TpsSystem, coords):
    """Matrix M with map_coords(solve(system, t), system, coords) == M @ t.

    solve and map_coords are both linear in the target landmarks, so the
    composite is one constant (n, l) matrix per coordinate set; it applies
    to the u and v columns of a target independently.
    """
    coords = np.asarray(coords, dtype=float)
    basis = _basis(system, coords)
    return basis @ system.l_inverse[:, : system.n_landmarks]


def coord_jacobian(system: TpsSystem, coords):
    """Dense (2n, 2l) Jacobian of mapped coordinates w.r.t. the flattened target.

    Flattening is row-major over (l, 2) landmark arrays, i.e.
    (u1, v1, u2, v2, ...); mapped outputs flatten the same way.
    """
    m = target_map(system, coords)
    return np.kron(m, np.eye(2))


# One inversion per distinct configuration: the cache below is what the
# pipeline uses, and the counter lets tests assert the inversion count.
_system_cache: dict = {}
_factorizations = 0
_cache_lock = threading.Lock()


def shared_system(frame_shape, n_landmarks, regularization=0.0, norm="l1") -> TpsSystem:
    """Process-wide system cache keyed by (frame shape, l, regularization, norm)."""
    key = (tuple(frame_shape), int(n_landmarks), float(regularization), norm)
    with _cache_lock:
        system = _system_cache.get(key)
    if system is None:
        source = grid_landmarks(frame_shape, n_landmarks)
        system = build_system(source, regularization, norm, frame_shape=tuple(frame_shape))
        with _cache_lock:
            system = _system_cache.setdefault(key, system)
    return system


def factorization_count() -> int:
    """Number of system inversions performed since the last reset."""
    return _factorizations


def reset_factorizations() -> None:
    """Clear the system cache and zero the inversion counter (test hook)."""
    global _factorizations
    with _cache_lock:
        _system_cache.clear()
        _factorizations = 0
