"""
Water and lipid nuisance removal: HSVD band filtering, lipid ring masks and
L2 lipid-subspace suppression.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.linalg import hankel

from mrsi.errors import DataError, DimensionMismatchError, NonFiniteError
from mrsi.pipeline.core import CoilKSpaceSeries, ComplexVolume, GridSpec, ImageTimeSeries

log = logging.getLogger("mrsi.nuisance")

RANK_TOLERANCE = 1e-10


@dataclass(frozen=True)
class HsvdComponent:
    amplitude: complex
    frequency: float
    damping: float

    def __post_init__(self):
        if not (np.isfinite(self.amplitude) and np.isfinite(self.frequency) and np.isfinite(self.damping)):
            raise NonFiniteError("HSVD component is not finite")
        if self.damping < 0:
            raise DataError(f"HSVD component damping must be >= 0, got {self.damping}")

    def signal(self, n_time: int, dwell: float) -> np.ndarray:
        t = np.arange(n_time) * dwell
        return self.amplitude * np.exp((2j * np.pi * self.frequency - self.damping) * t)


def _poles(fid: np.ndarray, order: int) -> np.ndarray:
    n = fid.shape[0]
    rows = n // 2
    h = hankel(fid[:rows], fid[rows - 1 :])
    u, s, _ = np.linalg.svd(h, full_matrices=False)
    rank = int(np.sum(s > RANK_TOLERANCE * s[0]))
    k = min(order, rank)
    uk = u[:, :k]
    z = np.linalg.eigvals(np.linalg.pinv(uk[:-1]) @ uk[1:])
    mag = np.abs(z)
    # growing poles are clamped onto the unit circle
    return np.where(mag > 1.0, z / np.where(mag > 0, mag, 1.0), z)


def hsvd_decompose(fid: np.ndarray, order: int, dwell: float) -> List[HsvdComponent]:
    """Fit a sum of damped complex exponentials to one FID."""
    fid = np.asarray(fid, dtype=np.complex128).reshape(-1)
    n = fid.shape[0]
    if order < 1 or order >= n / 2:
        raise DataError(f"HSVD order must satisfy 1 <= order < n_time/2 = {n / 2}, got {order}")
    if not np.all(np.isfinite(fid)):
        raise NonFiniteError("FID contains non-finite values")
    if not np.any(fid):
        return []
    z = _poles(fid, order)
    vander = z[None, :] ** np.arange(n)[:, None]
    amps, *_ = np.linalg.lstsq(vander, fid, rcond=None)
    comps = []
    for a, zk in zip(amps, z):
        mag = abs(zk)
        damping = 0.0 if mag >= 1.0 else -np.log(mag) / dwell if mag > 0 else np.inf
        if not np.isfinite(damping):
            continue
        comps.append(HsvdComponent(complex(a), float(np.angle(zk) / (2 * np.pi * dwell)), float(damping)))
    return comps


def _in_band(c: HsvdComponent, band: Tuple[float, float]) -> bool:
    return band[0] <= c.frequency <= band[1]


def remove_band(fid: np.ndarray, band: Tuple[float, float], order: int, dwell: float) -> np.ndarray:
    comps = hsvd_decompose(fid, order, dwell)
    out = np.array(fid, dtype=np.complex128)
    for c in comps:
        if _in_band(c, band):
            out -= c.signal(out.shape[0], dwell)
    return out


def _check_band(band: Sequence[float]) -> Tuple[float, float]:
    lo, hi = float(band[0]), float(band[1])
    if lo > hi:
        raise DataError(f"band lower edge {lo} exceeds upper edge {hi}")
    return lo, hi


def _remove_rows(rows: np.ndarray, band: Tuple[float, float], order: int, dwell: float) -> np.ndarray:
    out = np.array(rows, dtype=np.complex128)
    for i in np.flatnonzero(np.any(rows != 0, axis=1)):
        out[i] = remove_band(rows[i], band, order, dwell)
    return out


def water_remove(series: ImageTimeSeries, band_hz: Sequence[float] = (-150.0, 150.0), order: int = 16) -> ImageTimeSeries:
    """Subtract every HSVD component inside band_hz, voxel by voxel."""
    band = _check_band(band_hz)
    g = series.grid
    rows = series.data.reshape(-1, g.n_time)
    out = _remove_rows(rows, band, order, g.dwell)
    log.info("water removal: band [%.1f, %.1f] Hz, order %d, %d voxels", band[0], band[1], order, rows.shape[0])
    return ImageTimeSeries(g, out.reshape(series.data.shape))


def water_remove_samples(
    kspace: CoilKSpaceSeries, band_hz: Sequence[float] = (-150.0, 150.0), order: int = 16
) -> CoilKSpaceSeries:
    """Band removal on every (coil, sample) FID of non-Cartesian data."""
    band = _check_band(band_hz)
    g = kspace.grid
    rows = kspace.data.reshape(-1, g.n_time)
    out = _remove_rows(rows, band, order, g.dwell)
    return CoilKSpaceSeries(g, kspace.coords, out.reshape(kspace.data.shape))


@dataclass(frozen=True, eq=False)
class LipidMask:
    grid: GridSpec
    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool, copy=True)
        if m.shape != self.grid.shape:
            raise DimensionMismatchError(f"lipid mask has shape {m.shape}, expected {self.grid.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def n_voxels(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def empty(cls, grid: GridSpec) -> "LipidMask":
        return cls(grid, np.zeros(grid.shape, dtype=bool))


IN_PLANE = np.zeros((3, 3, 3), dtype=bool)
IN_PLANE[:, :, 1] = True


def lipid_mask_estimate(vol: ComplexVolume, threshold: float = 0.1, erosion: int = 1) -> LipidMask:
    """Object mask minus its in-plane erosion by `erosion` voxels."""
    mag = np.abs(vol.data)
    peak = float(mag.max()) if mag.size else 0.0
    obj = mag > threshold * peak if peak > 0 else np.zeros(mag.shape, dtype=bool)
    if not obj.any():
        raise DataError("lipid mask estimate: object mask is empty")
    inner = ndimage.binary_erosion(obj, structure=IN_PLANE, iterations=int(erosion)) if erosion > 0 else obj
    ring = obj & ~inner
    log.debug("lipid ring: %d voxels of %d object voxels", int(ring.sum()), int(obj.sum()))
    return LipidMask(vol.grid.with_(n_time=1), ring)


def lipid_l2_suppress(series: ImageTimeSeries, mask: LipidMask, beta: float) -> ImageTimeSeries:
    """x = (I + beta L L^H)^-1 y per voxel, applied in the orthonormal lipid subspace."""
    if beta < 0:
        raise DataError(f"beta must be >= 0, got {beta}")
    if mask.grid.shape != series.grid.shape:
        raise DimensionMismatchError(f"mask grid {mask.grid.shape} does not match series grid {series.grid.shape}")
    if mask.n_voxels == 0:
        raise DataError("lipid suppression needs a non-empty mask")
    if beta == 0:
        return series
    T = series.grid.n_time
    y = series.data.reshape(-1, T)
    lip = series.data[mask.mask].T  # (T, n_mask)
    q, s, _ = np.linalg.svd(lip, full_matrices=False)
    keep = s > 1e-12 * s[0] if s.size and s[0] > 0 else np.zeros(s.shape, dtype=bool)
    q, s = q[:, keep], s[keep]
    shrink = beta * s**2 / (1.0 + beta * s**2)
    coef = (y @ np.conj(q)) * shrink
    x = y - coef @ q.T
    return ImageTimeSeries(series.grid, x.reshape(series.data.shape))


def low_rank_denoise(series: ImageTimeSeries, rank: int) -> ImageTimeSeries:
    g = series.grid
    if rank < 1:
        raise DataError(f"rank must be >= 1, got {rank}")
    m = series.data.reshape(-1, g.n_time)
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    k = min(rank, s.size)
    return ImageTimeSeries(g, ((u[:, :k] * s[:k]) @ vh[:k]).reshape(series.data.shape))


def spectrum_axis(n_time: int, dwell: float) -> np.ndarray:
    return np.fft.fftshift(np.fft.fftfreq(n_time, dwell))


def metabolite_map(series: ImageTimeSeries, band_hz: Sequence[float]) -> np.ndarray:
    """Magnitude spectrum integrated over band_hz, per voxel."""
    lo, hi = _check_band(band_hz)
    g = series.grid
    spec = np.fft.fftshift(np.fft.fft(series.data, axis=-1, norm="ortho"), axes=-1)
    f = spectrum_axis(g.n_time, g.dwell)
    sel = (f >= lo) & (f <= hi)
    if not sel.any():
        raise DataError(f"band [{lo}, {hi}] Hz holds no spectral bin")
    return np.sum(np.abs(spec[..., sel]), axis=-1)
