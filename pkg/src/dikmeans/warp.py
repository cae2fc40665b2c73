"""Warp rendering by bilinear resampling, with exact landmark gradients.

Images are (H, W) float64 arrays; the pipeline keeps them at unit Euclidean
norm but nothing here renormalizes. Sampling outside the frame contributes
zero (the four-neighbour blend drops out-of-range corners), so total
intensity can only shrink when a warp pushes content off the frame.

Warps are rendered in displacement form: the sampling position of an output
pixel is its own coordinate plus the spline response to the landmark
displacement (target - source). The two formulations agree to the accuracy
of the system inverse, and the displacement form makes the identity warp
exact at machine precision, which downstream zero-distance contracts rely on.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import convolve1d

from . import tps
from .errors import DimensionMismatch

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _sample(flat_images, coords, frame_shape, want_grad=False):
    """Bilinear values (and d/du, d/dv) at fractional coordinates.

    flat_images: (B, H*W) or (1, H*W), broadcast against coords (B, n, 2).
    Returns (B, n) values, plus two (B, n) gradient arrays when asked.
    The derivative at a cell boundary is the right-continuous one (the cell
    the point belongs to under floor). Out-of-frame corners contribute zero.

    Dispatches to a compiled kernel when numba is available; the numpy path
    below is the reference implementation and computes identical values.
    """
    if _HAVE_NUMBA:
        h, w = frame_shape
        pool = np.ascontiguousarray(flat_images).ravel()
        stride = 0 if flat_images.shape[0] == 1 else h * w
        u = np.ascontiguousarray(coords[..., 0])
        v = np.ascontiguousarray(coords[..., 1])
        value = np.empty_like(u)
        if want_grad:
            gu = np.empty_like(u)
            gv = np.empty_like(u)
            _bilinear_kernel_grad(pool, stride, u, v, h, w, value, gu, gv)
            return value, gu, gv
        _bilinear_kernel(pool, stride, u, v, h, w, value)
        return value
    return _sample_numpy(flat_images, coords, frame_shape, want_grad)


def _sample_numpy(flat_images, coords, frame_shape, want_grad=False):
    h, w = frame_shape
    n = h * w
    u = coords[..., 0]
    v = coords[..., 1]
    i0f = np.floor(u)
    j0f = np.floor(v)
    du = u - i0f
    dv = v - j0f
    i0 = i0f.astype(np.int32)
    j0 = j0f.astype(np.int32)
    i1 = i0 + 1
    j1 = j0 + 1

    # Gather through clamped indices; masks zero the out-of-frame corners.
    mu0 = ((i0 >= 0) & (i0 < h)).astype(float)
    mu1 = ((i1 >= 0) & (i1 < h)).astype(float)
    mv0 = ((j0 >= 0) & (j0 < w)).astype(float)
    mv1 = ((j1 >= 0) & (j1 < w)).astype(float)
    i0c = np.clip(i0, 0, h - 1)
    i1c = np.clip(i1, 0, h - 1)
    j0c = np.clip(j0, 0, w - 1)
    j1c = np.clip(j1, 0, w - 1)

    pool = np.ascontiguousarray(flat_images).ravel()
    if flat_images.shape[0] == 1:
        base = 0
    else:
        itype = np.int32 if flat_images.size < 2**31 else np.int64
        base = (np.arange(flat_images.shape[0], dtype=itype) * n)[:, None]
    row0 = base + i0c * w
    row1 = base + i1c * w
    p00 = pool[row0 + j0c] * (mu0 * mv0)
    p01 = pool[row0 + j1c] * (mu0 * mv1)
    p10 = pool[row1 + j0c] * (mu1 * mv0)
    p11 = pool[row1 + j1c] * (mu1 * mv1)

    r0 = p00 + (p01 - p00) * dv
    r1 = p10 + (p11 - p10) * dv
    value = r0 + (r1 - r0) * du
    if not want_grad:
        return value
    gu = r1 - r0
    gv = (p01 - p00) + ((p11 - p10) - (p01 - p00)) * du
    return value, gu, gv


def _pair_residuals(flat_images, flat_centroids, coords, frame_shape, want_grad=False):
    """Fused per-pair squared residual (and scaled coordinate gradient).

    Returns (loss, dcoords) where loss[b] = sum_p (warp_b(p) - centroid_b(p))^2
    and dcoords[b, p] = 2 * residual * (d value / d coord); dcoords is None
    without want_grad. Matches the unfused _sample route mathematically; the
    loss reduction order differs from einsum at the last ulp.
    """
    h, w = frame_shape
    nb = coords.shape[0]
    if _HAVE_NUMBA:
        pool = np.ascontiguousarray(flat_images).ravel()
        stride = 0 if flat_images.shape[0] == 1 else h * w
        cpool = np.ascontiguousarray(flat_centroids).ravel()
        cstride = 0 if flat_centroids.shape[0] == 1 else h * w
        coords = np.ascontiguousarray(coords)
        loss = np.empty(nb)
        if want_grad:
            dc = np.empty_like(coords)
            _warp_loss_grad_kernel(pool, stride, cpool, cstride, coords, h, w, loss, dc)
            return loss, dc
        _warp_loss_kernel(pool, stride, cpool, cstride, coords, h, w, loss)
        return loss, None
    if want_grad:
        value, gu, gv = _sample(flat_images, coords, frame_shape, want_grad=True)
    else:
        value = _sample(flat_images, coords, frame_shape)
    resid = value - flat_centroids
    loss = np.einsum("bn,bn->b", resid, resid)
    if not want_grad:
        return loss, None
    dc = np.stack([gu, gv], axis=-1) * (2.0 * resid)[..., None]
    return loss, dc


if _HAVE_NUMBA:

    @_njit(cache=True, nogil=True)
    def _bilinear_corners(pool, off, i0, j0, h, w):
        p00 = p01 = p10 = p11 = 0.0
        i1 = i0 + 1
        j1 = j0 + 1
        row_ok0 = 0 <= i0 < h
        row_ok1 = 0 <= i1 < h
        col_ok0 = 0 <= j0 < w
        col_ok1 = 0 <= j1 < w
        if row_ok0:
            if col_ok0:
                p00 = pool[off + i0 * w + j0]
            if col_ok1:
                p01 = pool[off + i0 * w + j1]
        if row_ok1:
            if col_ok0:
                p10 = pool[off + i1 * w + j0]
            if col_ok1:
                p11 = pool[off + i1 * w + j1]
        return p00, p01, p10, p11

    @_njit(cache=True, nogil=True)
    def _bilinear_kernel(pool, stride, u, v, h, w, value):
        nb, n = u.shape
        for b in range(nb):
            off = b * stride
            for p in range(n):
                uf = np.floor(u[b, p])
                vf = np.floor(v[b, p])
                du = u[b, p] - uf
                dv = v[b, p] - vf
                p00, p01, p10, p11 = _bilinear_corners(pool, off, int(uf), int(vf), h, w)
                r0 = p00 + (p01 - p00) * dv
                r1 = p10 + (p11 - p10) * dv
                value[b, p] = r0 + (r1 - r0) * du

    @_njit(cache=True, nogil=True)
    def _bilinear_kernel_grad(pool, stride, u, v, h, w, value, gu, gv):
        nb, n = u.shape
        for b in range(nb):
            off = b * stride
            for p in range(n):
                uf = np.floor(u[b, p])
                vf = np.floor(v[b, p])
                du = u[b, p] - uf
                dv = v[b, p] - vf
                p00, p01, p10, p11 = _bilinear_corners(pool, off, int(uf), int(vf), h, w)
                r0 = p00 + (p01 - p00) * dv
                r1 = p10 + (p11 - p10) * dv
                value[b, p] = r0 + (r1 - r0) * du
                gu[b, p] = r1 - r0
                gv[b, p] = (p01 - p00) + ((p11 - p10) - (p01 - p00)) * du

    @_njit(cache=True, nogil=True)
    def _warp_loss_kernel(pool, stride, cpool, cstride, coords, h, w, loss):
        nb, n, _ = coords.shape
        for b in range(nb):
            off = b * stride
            coff = b * cstride
            acc = 0.0
            for p in range(n):
                uf = np.floor(coords[b, p, 0])
                vf = np.floor(coords[b, p, 1])
                du = coords[b, p, 0] - uf
                dv = coords[b, p, 1] - vf
                p00, p01, p10, p11 = _bilinear_corners(pool, off, int(uf), int(vf), h, w)
                r0 = p00 + (p01 - p00) * dv
                r1 = p10 + (p11 - p10) * dv
                resid = r0 + (r1 - r0) * du - cpool[coff + p]
                acc += resid * resid
            loss[b] = acc

    @_njit(cache=True, nogil=True)
    def _warp_loss_grad_kernel(pool, stride, cpool, cstride, coords, h, w, loss, dc):
        nb, n, _ = coords.shape
        for b in range(nb):
            off = b * stride
            coff = b * cstride
            acc = 0.0
            for p in range(n):
                uf = np.floor(coords[b, p, 0])
                vf = np.floor(coords[b, p, 1])
                du = coords[b, p, 0] - uf
                dv = coords[b, p, 1] - vf
                p00, p01, p10, p11 = _bilinear_corners(pool, off, int(uf), int(vf), h, w)
                r0 = p00 + (p01 - p00) * dv
                r1 = p10 + (p11 - p10) * dv
                resid = r0 + (r1 - r0) * du - cpool[coff + p]
                acc += resid * resid
                two_r = 2.0 * resid
                dc[b, p, 0] = (r1 - r0) * two_r
                dc[b, p, 1] = ((p01 - p00) + ((p11 - p10) - (p01 - p00)) * du) * two_r
            loss[b] = acc


def bilinear_sample(image, coord) -> float:
    """Blend of the four integer-grid neighbours at one coordinate.

    Coordinates outside [0, H-1] x [0, W-1] fade to zero (zero padding).
    """
    image = np.asarray(image, dtype=float)
    c = np.asarray(coord, dtype=float).reshape(1, 1, 2)
    out = _sample(image.reshape(1, -1), c, image.shape)
    return float(out[0, 0])


def warp_coords(system: tps.TpsSystem, frame_shape, target):
    """Sampling coordinates of every output pixel for one target landmark set."""
    grid = tps.frame_coords(frame_shape)
    m = system.grid_map(frame_shape)
    return grid + m @ (target - system.source)


def _check_warp_args(image, system, target):
    if target.shape != system.source.shape:
        raise DimensionMismatch(
            f"target shape {target.shape} does not match source {system.source.shape}"
        )
    if system.frame_shape is not None and tuple(system.frame_shape) != image.shape:
        raise DimensionMismatch(
            f"system was built for frame {system.frame_shape}, image is {image.shape}"
        )


def warp_image(image, system: tps.TpsSystem, target):
    """Render the spline warp of an image over its own pixel grid.

    Output pixel (k, l) is the bilinear sample of the input at the mapped
    position of (k, l). The output is not renormalized.
    """
    image = np.asarray(image, dtype=float)
    target = np.asarray(target, dtype=float)
    _check_warp_args(image, system, target)
    coords = warp_coords(system, image.shape, target)
    out = _sample(image.reshape(1, -1), coords[None], image.shape)
    return out.reshape(image.shape)


def warp_loss_and_grad(image, centroid, system: tps.TpsSystem, target):
    """Squared residual against a centroid and its exact landmark gradient.

    loss = || warp(image, target) - centroid ||^2. The gradient chains the
    residual, the piecewise-linear bilinear derivative and the constant
    target-to-coordinates map; it is returned flattened row-major over the
    (l, 2) landmark array, i.e. (u1, v1, u2, v2, ...).
    """
    image = np.asarray(image, dtype=float)
    centroid = np.asarray(centroid, dtype=float)
    target = np.asarray(target, dtype=float)
    if centroid.shape != image.shape:
        raise DimensionMismatch(f"centroid shape {centroid.shape} != image shape {image.shape}")
    _check_warp_args(image, system, target)
    m = system.grid_map(image.shape)
    coords = tps.frame_coords(image.shape) + m @ (target - system.source)
    value, gu, gv = _sample(image.reshape(1, -1), coords[None], image.shape, want_grad=True)
    resid = value[0] - centroid.ravel()
    loss = float(resid @ resid)
    dcoords = np.stack([gu[0], gv[0]], axis=-1) * (2.0 * resid)[:, None]
    grad = m.T @ dcoords
    return loss, grad.ravel()


def gaussian_kernel(sigma: float):
    """Unit-sum truncated Gaussian with radius ceil(4 * sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = math.ceil(4.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def low_pass(image, sigma: float):
    """Separable truncated-Gaussian blur, renormalized to unit Euclidean norm.

    Edges replicate the nearest pixel so constant images stay constant.
    """
    image = np.asarray(image, dtype=float)
    k = gaussian_kernel(sigma)
    out = convolve1d(image, k, axis=0, mode="nearest")
    out = convolve1d(out, k, axis=1, mode="nearest")
    norm = np.linalg.norm(out)
    return out / norm if norm > 0 else out
