"""Synthetic slices, image-stack ingestion, scan splits and sinogram augmentation.

Phantoms are sums of constant-density ellipses on ``[-1, 1]^2`` rasterized with
supersampling, so edges carry partial-volume values like real reconstructed
slices.  Scans stack cross-sections of random ellipsoids, which makes adjacent
slices correlated and vertical interpolation of their sinograms meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import IngestionError, InvalidArgument

__all__ = [
    "SliceStack",
    "DatasetSplit",
    "rasterize_ellipses",
    "shepp_logan",
    "generate_phantom",
    "generate_scan",
    "load_image_stack",
    "split_by_scan",
    "augment_sinograms_vertical",
]

# Axial distance between consecutive slices, in the phantom's normalized units.
SLICE_SPACING = 0.08


@dataclass
class SliceStack:
    slices: list[np.ndarray]
    scan_id: str
    spacing_tag: str | None = None

    def __post_init__(self):
        if not self.slices:
            raise InvalidArgument(f"scan {self.scan_id!r} has no slices")
        shape = self.slices[0].shape
        if any(s.shape != shape for s in self.slices):
            raise InvalidArgument(f"scan {self.scan_id!r} mixes slice sizes")

    @property
    def size(self) -> int:
        return self.slices[0].shape[0]

    def __len__(self) -> int:
        return len(self.slices)

    def as_array(self) -> np.ndarray:
        return np.stack(self.slices)


@dataclass
class DatasetSplit:
    train: list[SliceStack] = field(default_factory=list)
    test: list[SliceStack] = field(default_factory=list)

    def __post_init__(self):
        overlap = {s.scan_id for s in self.train} & {s.scan_id for s in self.test}
        if overlap:
            raise InvalidArgument(f"scans in both train and test: {sorted(overlap)}")


def rasterize_ellipses(ellipses, size: int, supersample: int = 4) -> np.ndarray:
    """Sum of ellipses ``(intensity, a, b, x0, y0, angle)`` on a ``size`` grid.

    Each pixel is the mean over ``supersample**2`` sub-pixel samples.
    """
    ss = supersample
    t = (np.arange(size * ss) + 0.5) / (size * ss) * 2.0 - 1.0
    X, Y = np.meshgrid(t, -t)
    img = np.zeros_like(X)
    for rho, a, b, x0, y0, ang in ellipses:
        c, s = math.cos(ang), math.sin(ang)
        u = (X - x0) * c + (Y - y0) * s
        v = -(X - x0) * s + (Y - y0) * c
        img += rho * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    return img.reshape(size, ss, size, ss).mean(axis=(1, 3))


# Modified Shepp-Logan (Toft) ellipses; the skull ring is 1.0, soft tissue 0.2.
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, math.radians(-18)),
    (-0.2, 0.16, 0.41, -0.22, 0.0, math.radians(18)),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]


def shepp_logan(size: int, edge_sigma: float = 0.0) -> np.ndarray:
    """Modified Shepp-Logan phantom; ``edge_sigma`` (pixels) band-limits the edges."""
    img = rasterize_ellipses(_SHEPP_LOGAN, size)
    if edge_sigma > 0:
        img = ndimage.gaussian_filter(img, edge_sigma, mode="constant")
    return np.clip(img, 0.0, 1.0)


def _random_ellipse_params(rng: np.random.Generator, n_ellipses: int):
    body = dict(
        rho=rng.uniform(0.3, 0.5),
        a=rng.uniform(0.6, 0.85), b=rng.uniform(0.5, 0.8),
        x0=rng.uniform(-0.05, 0.05), y0=rng.uniform(-0.05, 0.05),
        ang=rng.uniform(-0.3, 0.3),
    )
    inner = []
    for _ in range(n_ellipses - 1):
        r = math.sqrt(rng.uniform(0.0, 1.0)) * 0.55
        t = rng.uniform(0.0, 2 * math.pi)
        inner.append(dict(
            rho=rng.choice([-1.0, 1.0]) * rng.uniform(0.1, 0.5),
            a=rng.uniform(0.05, 0.3), b=rng.uniform(0.05, 0.3),
            x0=body["x0"] + body["a"] * r * math.cos(t),
            y0=body["y0"] + body["b"] * r * math.sin(t),
            ang=rng.uniform(0.0, math.pi),
        ))
    return body, inner


def _as_tuple(e, scale=1.0):
    return (e["rho"], e["a"] * scale, e["b"] * scale, e["x0"], e["y0"], e["ang"])


def generate_phantom(seed: int, size: int, n_ellipses: int = 6) -> np.ndarray:
    """Body ellipse plus ``n_ellipses - 1`` random interior ellipses, clamped to [0, 1]."""
    if size < 16:
        raise InvalidArgument(f"phantom size must be >= 16, got {size}")
    if n_ellipses < 1:
        raise InvalidArgument("n_ellipses must be >= 1")
    rng = np.random.default_rng(seed)
    body, inner = _random_ellipse_params(rng, n_ellipses)
    img = rasterize_ellipses([_as_tuple(body)] + [_as_tuple(e) for e in inner], size)
    return np.clip(img, 0.0, 1.0)


def generate_scan(seed: int, size: int, n_slices: int, n_ellipses: int = 6,
                  scan_id: str | None = None) -> SliceStack:
    """Stack of axial cross-sections through random ellipsoids.

    Every interior ellipse is the section of an ellipsoid with its own axial
    center and half-height; its in-plane axes shrink as ``sqrt(1 - dz^2/h^2)``
    and its center drifts linearly with depth.  The body tapers slowly.
    """
    if n_slices < 2:
        raise InvalidArgument(f"a scan needs at least 2 slices, got {n_slices}")
    if size < 16:
        raise InvalidArgument(f"phantom size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    body, inner = _random_ellipse_params(rng, n_ellipses)
    extent = (n_slices - 1) * SLICE_SPACING
    for e in inner:
        e["zc"] = rng.uniform(-0.2, extent + 0.2)
        e["h"] = rng.uniform(0.25, 0.8)
        e["dx"] = rng.uniform(-0.15, 0.15)
        e["dy"] = rng.uniform(-0.15, 0.15)
    taper = rng.uniform(-0.05, 0.05)
    slices = []
    for k in range(n_slices):
        z = k * SLICE_SPACING
        ells = [_as_tuple(body, 1.0 + taper * z)]
        for e in inner:
            dz = z - e["zc"]
            if abs(dz) >= e["h"]:
                continue
            scale = math.sqrt(1.0 - (dz / e["h"]) ** 2)
            ells.append((e["rho"], e["a"] * scale, e["b"] * scale,
                         e["x0"] + e["dx"] * dz, e["y0"] + e["dy"] * dz, e["ang"]))
        slices.append(np.clip(rasterize_ellipses(ells, size), 0.0, 1.0))
    return SliceStack(slices, scan_id if scan_id is not None else f"scan{seed}")


def _read_slice(path: Path) -> np.ndarray:
    from . import io as ctio

    try:
        if path.suffix.lower() == ".png":
            return ctio.read_png(path)
        return ctio.read_image(path)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one error type
        raise IngestionError(f"cannot read slice file {path}: {exc}") from exc


def load_image_stack(path, normalize: bool = True, scan_id: str | None = None) -> SliceStack:
    """Read PNG/CTI1 slices from a directory, lexicographic order = axial order.

    With ``normalize`` the whole stack is min-max scaled to [0, 1].
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir()
                   if p.is_file() and p.suffix.lower() in (".png", ".cti"))
    if not files:
        raise IngestionError(f"no PNG or CTI1 slices in {root}")
    slices = []
    for f in files:
        img = _read_slice(f)
        if img.ndim != 2:
            raise IngestionError(f"{f} is not a single-channel image")
        if slices and img.shape != slices[0].shape:
            raise IngestionError(
                f"{f} has shape {img.shape}, expected {slices[0].shape}")
        slices.append(img)
    if normalize:
        stack = np.stack(slices).astype(np.float64)
        lo, hi = stack.min(), stack.max()
        stack = (stack - lo) / (hi - lo) if hi > lo else np.zeros_like(stack)
        slices = list(stack)
    return SliceStack(slices, scan_id or root.name)


def split_by_scan(stacks: list[SliceStack], train_fraction: float, seed: int) -> DatasetSplit:
    """Shuffle whole scans and give ``round(fraction * N)`` of them to training."""
    if len(stacks) < 2:
        raise InvalidArgument("need at least two scans to split")
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgument(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = int(math.floor(train_fraction * len(stacks) + 0.5))
    if n_train < 1 or n_train > len(stacks) - 1:
        raise InvalidArgument(
            f"fraction {train_fraction} of {len(stacks)} scans leaves a side empty")
    order = np.random.default_rng(seed).permutation(len(stacks))
    train = [stacks[i] for i in sorted(order[:n_train])]
    test = [stacks[i] for i in sorted(order[n_train:])]
    return DatasetSplit(train, test)


def augment_sinograms_vertical(sinos, factor: int):
    """Insert ``factor - 1`` linear interpolants between neighbouring sinograms.

    Returns ``(augmented, original_mask)`` with ``(n - 1) * factor + 1`` entries.
    """
    sinos = [np.asarray(s, dtype=np.float64) for s in sinos]
    if len(sinos) < 2:
        raise InvalidArgument("vertical augmentation needs at least two sinograms")
    if factor < 1:
        raise InvalidArgument(f"factor must be >= 1, got {factor}")
    shape = sinos[0].shape
    for i, s in enumerate(sinos):
        if s.shape != shape:
            raise InvalidArgument(f"sinogram {i} has shape {s.shape}, expected {shape}")
    out, mask = [sinos[0]], [True]
    for a, b in zip(sinos[:-1], sinos[1:]):
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        for k in range(1, factor):
            w = k / factor
            out.append(np.clip((1.0 - w) * a + w * b, lo, hi))
            mask.append(False)
        out.append(b)
        mask.append(True)
    return out, mask
