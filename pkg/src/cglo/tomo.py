"""Parallel-beam CT physics on square pixel grids.

The forward projector is ray-driven: every (angle, detector bin) ray is sampled
at ``ray_step`` pixel intervals and the image is bilinearly interpolated at the
samples.  The projector is materialized as a sparse matrix, so the adjoint is
its exact transpose and ``<A x, y> == <x, A^T y>`` holds to rounding.

Coordinates: pixel ``(row, col)`` has its center at
``X = (col - (n-1)/2) * pixel_spacing`` and ``Y = ((n-1)/2 - row) * pixel_spacing``.
Detector bin ``j`` sits at offset ``p_j = (j - (n_det-1)/2) * detector_spacing``
along ``(cos phi, sin phi)``; rays travel along ``(-sin phi, cos phi)``.

All operations are pure; the sparse matrices are cached per
``(geometry, angles, size)`` and matrix products are single-threaded scipy
kernels, so results are bit-stable across runs.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument

__all__ = [
    "AngleSet",
    "Geometry",
    "uniform_angles",
    "projection_matrix",
    "radon_forward",
    "radon_adjoint",
    "ramp_filter",
    "filter_profiles",
    "fbp",
    "apply_poisson_noise",
    "pad_profiles",
]


@dataclass(frozen=True)
class AngleSet:
    """Strictly increasing viewing angles in radians, all in ``[0, pi)``."""

    angles: tuple[float, ...]

    def __post_init__(self):
        a = tuple(float(v) for v in self.angles)
        object.__setattr__(self, "angles", a)
        arr = np.asarray(a)
        if not np.all(np.isfinite(arr)):
            raise InvalidArgument("angles must be finite")
        if arr.size and (arr.min() < 0.0 or arr.max() >= math.pi):
            raise InvalidArgument("angles must lie in [0, pi)")
        if np.any(np.diff(arr) <= 0):
            raise InvalidArgument("angles must be strictly increasing")

    def __len__(self) -> int:
        return len(self.angles)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.angles, dtype=np.float64)

    def index_in(self, other: "AngleSet", atol: float = 1e-9) -> np.ndarray:
        """Row indices of these angles inside ``other``; raises if not a subset."""
        full = other.array
        idx = []
        for a in self.angles:
            hits = np.flatnonzero(np.abs(full - a) <= atol)
            if hits.size == 0:
                raise InvalidArgument(f"angle {a!r} is not part of the full angle set")
            idx.append(int(hits[0]))
        return np.asarray(idx, dtype=np.intp)

    def subset(self, indices) -> "AngleSet":
        return AngleSet(tuple(self.angles[i] for i in sorted(indices)))


def uniform_angles(n: int, span: float = math.pi) -> AngleSet:
    """``n`` equispaced angles ``k * span / n`` for ``k = 0..n-1``."""
    if n < 1:
        raise InvalidArgument(f"need at least one angle, got n={n}")
    return AngleSet(tuple(k * span / n for k in range(n)))


@dataclass(frozen=True)
class Geometry:
    n_detectors: int
    detector_spacing: float = 1.0
    pixel_spacing: float = 1.0
    ray_step: float = 0.5

    def __post_init__(self):
        if self.n_detectors < 1:
            raise InvalidArgument("n_detectors must be positive")
        if self.detector_spacing <= 0 or self.pixel_spacing <= 0:
            raise InvalidArgument("spacings must be positive")
        if not 0.0 < self.ray_step <= 1.0:
            raise InvalidArgument("ray_step must lie in (0, 1]")

    @classmethod
    def for_size(cls, size: int, detector_spacing: float = 1.0,
                 pixel_spacing: float = 1.0, ray_step: float = 0.5) -> "Geometry":
        """Smallest detector that covers the image diagonal."""
        ratio = detector_spacing / pixel_spacing
        n_det = int(math.ceil(size * math.sqrt(2.0) / ratio - 1e-9))
        return cls(n_det, detector_spacing, pixel_spacing, ray_step)

    def check(self, size: int) -> None:
        if size < 2:
            raise InvalidArgument(f"image size must be >= 2, got {size}")
        ratio = self.detector_spacing / self.pixel_spacing
        if self.n_detectors < size * math.sqrt(2.0) / ratio - 1e-9:
            raise InvalidArgument(
                f"{self.n_detectors} detector bins do not cover the diagonal of a "
                f"{size}x{size} image")


# Bound on (rays x samples) materialized at once while building the matrix.
_CHUNK = 1 << 21


@functools.lru_cache(maxsize=32)
def projection_matrix(g: Geometry, angles: AngleSet, size: int) -> sp.csr_matrix:
    """Sparse ``(n_angles * n_det, size * size)`` matrix of the forward projector."""
    g.check(size)
    n, nd = size, g.n_detectors
    ps = g.pixel_spacing
    step = g.ray_step * ps
    radius = (n / 2.0) * math.sqrt(2.0) * ps + ps
    n_samples = 2 * int(math.ceil(radius / step)) + 1
    s = (np.arange(n_samples) - (n_samples - 1) / 2.0) * step
    p = (np.arange(nd) - (nd - 1) / 2.0) * g.detector_spacing
    half = (n - 1) / 2.0

    per_angle = nd * n_samples
    chunk = max(1, _CHUNK // per_angle)
    blocks = []
    phis = angles.array
    for start in range(0, len(phis), chunk):
        phi = phis[start:start + chunk]
        c, si = np.cos(phi)[:, None, None], np.sin(phi)[:, None, None]
        X = p[None, :, None] * c - s[None, None, :] * si
        Y = p[None, :, None] * si + s[None, None, :] * c
        col = X / ps + half
        row = half - Y / ps
        c0 = np.floor(col)
        r0 = np.floor(row)
        fc = col - c0
        fr = row - r0
        c0 = c0.astype(np.int64)
        r0 = r0.astype(np.int64)
        ray = (np.arange(len(phi))[:, None, None] * nd
               + np.arange(nd)[None, :, None]) + np.zeros((1, 1, n_samples), np.int64)
        rows, cols, vals = [], [], []
        for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                          (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n) & (w > 0)
            rows.append(ray[ok])
            cols.append((rr * n + cc)[ok])
            vals.append(w[ok] * step)
        block = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(phi) * nd, n * n)).tocsr()
        block.sum_duplicates()
        blocks.append(block)
    A = sp.vstack(blocks, format="csr")
    A.sort_indices()
    return A


def _as_batch(a: np.ndarray, ndim: int):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == ndim:
        return a[None], True
    if a.ndim == ndim + 1:
        return a, False
    raise InvalidArgument(f"expected a {ndim}-D array or a batch of them, got shape {a.shape}")


def radon_forward(x: np.ndarray, g: Geometry, angles: AngleSet) -> np.ndarray:
    """Line integrals of ``x`` (``(n, n)`` or ``(B, n, n)``) -> ``(n_angles, n_det)``."""
    xb, single = _as_batch(x, 2)
    if xb.shape[1] != xb.shape[2]:
        raise InvalidArgument(f"image must be square, got {xb.shape[1:]}")
    n = xb.shape[1]
    A = projection_matrix(g, angles, n)
    y = (A @ xb.reshape(len(xb), -1).T).T.reshape(len(xb), len(angles), g.n_detectors)
    return y[0] if single else y


def radon_adjoint(y: np.ndarray, g: Geometry, angles: AngleSet, size: int) -> np.ndarray:
    """Exact transpose of :func:`radon_forward`."""
    yb, single = _as_batch(y, 2)
    if yb.shape[1:] != (len(angles), g.n_detectors):
        raise InvalidArgument(
            f"sinogram shape {yb.shape[1:]} does not match "
            f"({len(angles)}, {g.n_detectors})")
    A = projection_matrix(g, angles, size)
    x = (A.T @ yb.reshape(len(yb), -1).T).T.reshape(len(yb), size, size)
    return x[0] if single else x


def ramp_filter(n_detectors: int, spacing: float = 1.0, window: str = "ram-lak") -> np.ndarray:
    """Frequency response of the ramp filter on the zero-padded detector axis.

    The response is the DFT of the band-limited spatial ramp kernel, which
    matches ``|nu|`` away from DC without the DC offset of sampling ``|nu|``
    directly.  Padded length is the next power of two >= ``2 * n_detectors``.
    """
    n_pad = 1 << int(math.ceil(math.log2(max(2 * n_detectors, 2))))
    k = np.concatenate([np.arange(0, n_pad // 2), np.arange(-n_pad // 2, 0)])
    h = np.zeros(n_pad)
    h[0] = 1.0 / (4.0 * spacing ** 2)
    odd = k % 2 == 1
    h[odd] = -1.0 / (math.pi * k[odd] * spacing) ** 2
    H = np.real(np.fft.fft(h)) * spacing
    if window == "hann":
        f = np.fft.fftfreq(n_pad, d=spacing)
        H = H * 0.5 * (1.0 + np.cos(math.pi * f / f.max()))
    elif window != "ram-lak":
        raise InvalidArgument(f"unknown filter {window!r}; use 'ram-lak' or 'hann'")
    return H


def filter_profiles(y: np.ndarray, g: Geometry, window: str = "ram-lak") -> np.ndarray:
    """Ramp-filter every profile (last axis) of ``y``."""
    y = np.asarray(y, dtype=np.float64)
    H = ramp_filter(g.n_detectors, g.detector_spacing, window)
    spec = np.fft.fft(y, n=H.size, axis=-1) * H
    return np.real(np.fft.ifft(spec, axis=-1))[..., :g.n_detectors]


def fbp(y: np.ndarray, g: Geometry, angles: AngleSet, size: int,
        filter: str = "ram-lak") -> np.ndarray:
    """Filtered back-projection through the exact adjoint, scaled by ``pi / n_angles``."""
    if len(angles) == 0:
        raise InvalidArgument("fbp needs at least one angle")
    q = filter_profiles(y, g, filter)
    # A^T spreads pixel_spacing**2 / detector_spacing per unit backprojected value.
    scale = math.pi / len(angles) * g.detector_spacing / g.pixel_spacing ** 2
    return radon_adjoint(q, g, angles, size) * scale


def apply_poisson_noise(y: np.ndarray, photons_i0: float, seed: int) -> np.ndarray:
    """Shot noise on line integrals: ``-ln(max(N, 1) / I0)``, ``N ~ Poisson(I0 e^-y)``."""
    y = np.asarray(y, dtype=np.float64)
    if photons_i0 < 1:
        raise InvalidArgument(f"photons_i0 must be >= 1, got {photons_i0}")
    if np.any(y < 0):
        raise InvalidArgument("sinogram has negative line integrals")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(photons_i0 * np.exp(-y))
    return -np.log(np.maximum(counts, 1) / photons_i0)


def pad_profiles(y_e: np.ndarray, angles_e: AngleSet, angles_full: AngleSet) -> np.ndarray:
    """Embed rows measured on ``angles_e`` into a zero sinogram on ``angles_full``."""
    y_e = np.asarray(y_e, dtype=np.float64)
    if y_e.shape[-2] != len(angles_e):
        raise InvalidArgument(
            f"sinogram has {y_e.shape[-2]} rows but {len(angles_e)} angles were given")
    idx = angles_e.index_in(angles_full)
    out = np.zeros(y_e.shape[:-2] + (len(angles_full), y_e.shape[-1]))
    out[..., idx, :] = y_e
    return out
