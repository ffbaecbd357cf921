"""
Physics operators of the MRSI forward model: non-uniform Fourier encoding,
coil sensitivities, B0 frequency shift and sample weighting.

The NUFT is exact along kz (partitions sit on Cartesian planes) and uses
Kaiser-Bessel gridding on a 2x oversampled grid in-plane. Forward and adjoint
share one interpolation matrix per partition, so the adjoint is exact.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import i0

from mrsi.errors import DataError, DimensionMismatchError, NonFiniteError
from mrsi.pipeline.core import (
    CoilKSpaceSeries,
    ComplexVolume,
    GriddedKSpace,
    GridSpec,
    ImageTimeSeries,
    ifft3c,
)
from mrsi.pipeline.trajectory import SampleWeights, Trajectory

if TYPE_CHECKING:
    from mrsi.pipeline.tgv import LipidComponent, LowRankFactors

log = logging.getLogger("mrsi.encoding")

KB_WIDTH = 4
OVERSAMPLING = 2.0
POWER_ITERATIONS = 20


def kb_beta(width: float = KB_WIDTH, alpha: float = OVERSAMPLING) -> float:
    return math.pi * math.sqrt(width**2 / alpha**2 * (alpha - 0.5) ** 2 - 0.8)


def kb_kernel(w: np.ndarray, width: float, beta: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    arg = np.clip(1.0 - (2.0 * w / width) ** 2, 0.0, None)
    return np.where(np.abs(w) < width / 2, i0(beta * np.sqrt(arg)), 0.0)


def kb_deapodization(t: np.ndarray, width: float, beta: float) -> np.ndarray:
    """Continuous Fourier transform of the kernel at image position t (oversampled-grid units)."""
    z = beta**2 - (math.pi * width * np.asarray(t, dtype=np.float64)) ** 2
    s = np.sqrt(np.abs(z))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(z > 0, np.sinh(s) / s, np.sin(s) / s)
    return width * np.where(s == 0, 1.0, out)


def _cfft(a: np.ndarray, axes) -> np.ndarray:
    return sfft.fftshift(sfft.fftn(sfft.ifftshift(a, axes=axes), axes=axes), axes=axes)


def _cifft(a: np.ndarray, axes) -> np.ndarray:
    return sfft.fftshift(sfft.ifftn(sfft.ifftshift(a, axes=axes), axes=axes, norm="forward"), axes=axes)


def same_space(a: GridSpec, b: GridSpec) -> bool:
    return a.shape == b.shape and np.allclose(a.fov, b.fov, rtol=1e-12, atol=0)


class NufftOperator:
    """Non-uniform Fourier encoding s_j = sum_r x(r) exp(-i 2 pi k_j . r) for one sample set."""

    def __init__(self, grid: GridSpec, coords: np.ndarray, width: int = KB_WIDTH, oversampling: float = OVERSAMPLING):
        self.grid = grid
        self.width = width
        self.beta = kb_beta(width, oversampling)
        self.n_samples = coords.shape[0]
        self.os_shape = tuple(int(round(oversampling * n)) for n in (grid.nx, grid.ny))
        self._offset = tuple(g // 2 - n // 2 for g, n in zip(self.os_shape, (grid.nx, grid.ny)))
        deapod = [
            kb_deapodization((np.arange(n) - n // 2) / g, width, self.beta)
            for n, g in zip((grid.nx, grid.ny), self.os_shape)
        ]
        self._deapod = np.outer(deapod[0], deapod[1])
        parts = grid.partition_of(coords[:, 2]) if self.n_samples else np.zeros(0, dtype=np.int64)
        self._parts = []
        for p in np.unique(parts):
            sel = np.flatnonzero(parts == p)
            self._parts.append((int(p), sel, self._interp_matrix(coords[sel, :2])))

    def _interp_matrix(self, kxy: np.ndarray) -> sp.csr_matrix:
        gx, gy = self.os_shape
        W = self.width
        u = kxy[:, 0] * self.grid.fov_x * gx / self.grid.nx
        v = kxy[:, 1] * self.grid.fov_y * gy / self.grid.ny
        offs = np.arange(W + 1)
        mx = np.ceil(u - W / 2)[:, None] + offs
        my = np.ceil(v - W / 2)[:, None] + offs
        wx = kb_kernel(u[:, None] - mx, W, self.beta)
        wy = kb_kernel(v[:, None] - my, W, self.beta)
        ix = (mx.astype(np.int64) + gx // 2) % gx
        iy = (my.astype(np.int64) + gy // 2) % gy
        m = len(u)
        rows = np.repeat(np.arange(m), (W + 1) ** 2)
        cols = (ix[:, :, None] * gy + iy[:, None, :]).reshape(-1)
        vals = (wx[:, :, None] * wy[:, None, :]).reshape(-1)
        mat = sp.csr_matrix((vals, (rows, cols)), shape=(m, gx * gy))
        mat.eliminate_zeros()
        return mat

    def forward(self, images: np.ndarray) -> np.ndarray:
        """(..., nx, ny, nz) -> (..., M)"""
        images = np.asarray(images)
        if images.shape[-3:] != self.grid.shape:
            raise DimensionMismatchError(f"image shape {images.shape[-3:]} does not match grid {self.grid.shape}")
        lead = images.shape[:-3]
        x = images.reshape((-1,) + self.grid.shape)
        out = np.zeros((x.shape[0], self.n_samples), dtype=np.complex128)
        if not self._parts:
            return out.reshape(lead + (self.n_samples,))
        zk = _cfft(x, axes=(-1,))
        gx, gy = self.os_shape
        ox, oy = self._offset
        nx, ny = self.grid.nx, self.grid.ny
        for p, sel, mat in self._parts:
            pad = np.zeros((x.shape[0], gx, gy), dtype=np.complex128)
            pad[:, ox : ox + nx, oy : oy + ny] = zk[..., p] / self._deapod
            grid_k = _cfft(pad, axes=(-2, -1)).reshape(x.shape[0], -1)
            out[:, sel] = (mat @ grid_k.T).T
        return out.reshape(lead + (self.n_samples,))

    def adjoint(self, samples: np.ndarray) -> np.ndarray:
        """(..., M) -> (..., nx, ny, nz)"""
        samples = np.asarray(samples)
        if samples.shape[-1] != self.n_samples:
            raise DimensionMismatchError(f"{samples.shape[-1]} samples supplied, trajectory has {self.n_samples}")
        lead = samples.shape[:-1]
        s = samples.reshape(-1, self.n_samples)
        zk = np.zeros((s.shape[0],) + self.grid.shape, dtype=np.complex128)
        gx, gy = self.os_shape
        ox, oy = self._offset
        nx, ny = self.grid.nx, self.grid.ny
        for p, sel, mat in self._parts:
            grid_k = (mat.T @ s[:, sel].T).T.reshape(s.shape[0], gx, gy)
            img = _cifft(grid_k, axes=(-2, -1))[:, ox : ox + nx, oy : oy + ny]
            zk[..., p] = img / self._deapod
        return _cifft(zk, axes=(-1,)).reshape(lead + self.grid.shape)


@lru_cache(maxsize=16)
def operator_for(traj: Trajectory) -> NufftOperator:
    return NufftOperator(traj.grid, traj.coords)


def _check_traj(grid: GridSpec, traj: Trajectory) -> None:
    if not same_space(grid, traj.grid):
        raise DimensionMismatchError(f"volume grid {grid.shape} does not match trajectory grid {traj.grid.shape}")


def _check_dcf(traj: Trajectory, dcf: Optional[SampleWeights]) -> np.ndarray:
    if dcf is None:
        return np.ones(traj.n_samples)
    if len(dcf) != traj.n_samples:
        raise DimensionMismatchError(f"dcf has {len(dcf)} weights, trajectory has {traj.n_samples} samples")
    return dcf.values


def nuft_forward(vol: ComplexVolume, traj: Trajectory) -> np.ndarray:
    _check_traj(vol.grid, traj)
    return operator_for(traj).forward(vol.data)


def inuft_adjoint(samples: np.ndarray, traj: Trajectory, dcf: Optional[SampleWeights] = None) -> ComplexVolume:
    samples = np.asarray(samples)
    if samples.shape != (traj.n_samples,):
        raise DimensionMismatchError(f"samples have shape {samples.shape}, trajectory has {traj.n_samples} samples")
    w = _check_dcf(traj, dcf)
    return ComplexVolume(traj.grid, operator_for(traj).adjoint(samples * w))


def inuft_scale(grid: GridSpec) -> float:
    """Maps Voronoi-area-weighted adjoint output back to image amplitude."""
    dx, dy, _ = grid.voxel_size
    return dx * dy / grid.nz


def inuft(samples: np.ndarray, traj: Trajectory, dcf: SampleWeights) -> ComplexVolume:
    vol = inuft_adjoint(samples, traj, dcf)
    return ComplexVolume(vol.grid, vol.data * inuft_scale(traj.grid))


@dataclass(frozen=True, eq=False)
class SensitivityMaps:
    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.complex128, copy=True)
        if arr.ndim != 4 or arr.shape[1:] != self.grid.shape:
            raise DimensionMismatchError(f"sensitivity maps have shape {arr.shape}, expected (coil,) + {self.grid.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("sensitivity maps contain non-finite values")
        norm = np.sum(np.abs(arr) ** 2, axis=0)
        if np.any((norm > 1e-12) & (np.abs(norm - 1.0) > 1e-6)):
            raise DataError("sensitivity maps are not normalized per voxel")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n_coils(self) -> int:
        return self.data.shape[0]

    @property
    def support(self) -> np.ndarray:
        return np.sum(np.abs(self.data) ** 2, axis=0) > 0.5

    @classmethod
    def normalized(cls, grid: GridSpec, raw: np.ndarray, support: Optional[np.ndarray] = None) -> "SensitivityMaps":
        raw = np.asarray(raw, dtype=np.complex128)
        norm = np.sqrt(np.sum(np.abs(raw) ** 2, axis=0))
        keep = norm > 0 if support is None else (norm > 0) & support
        out = np.where(keep, raw / np.where(norm > 0, norm, 1.0), 0)
        return cls(grid, out)

    @classmethod
    def identity(cls, grid: GridSpec) -> "SensitivityMaps":
        return cls(grid, np.ones((1,) + grid.shape))


@dataclass(frozen=True, eq=False)
class B0Map:
    grid: GridSpec
    df: np.ndarray

    def __post_init__(self):
        arr = np.array(self.df, dtype=np.float64, copy=True)
        if arr.shape != self.grid.shape:
            raise DimensionMismatchError(f"B0 map has shape {arr.shape}, expected {self.grid.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("B0 map contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "df", arr)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "B0Map":
        return cls(grid, np.zeros(grid.shape))


def _maps_for(arr: np.ndarray, maps: SensitivityMaps) -> np.ndarray:
    m = maps.data
    return m.reshape(m.shape + (1,) * (arr.ndim - m.ndim))


def combine_array(coil_arr: np.ndarray, maps: SensitivityMaps) -> np.ndarray:
    """(C, x, y, z, ...) -> (x, y, z, ...)"""
    if coil_arr.shape[0] != maps.n_coils or coil_arr.shape[1:4] != maps.grid.shape:
        raise DimensionMismatchError(
            f"coil images have shape {coil_arr.shape}, maps have {maps.data.shape}"
        )
    return np.sum(np.conj(_maps_for(coil_arr, maps)) * coil_arr, axis=0)


def expand_array(arr: np.ndarray, maps: SensitivityMaps) -> np.ndarray:
    """(x, y, z, ...) -> (C, x, y, z, ...)"""
    if arr.shape[:3] != maps.grid.shape:
        raise DimensionMismatchError(f"image shape {arr.shape[:3]} does not match maps grid {maps.grid.shape}")
    return _maps_for(arr[None], maps) * arr[None]


def coil_combine(coil_vols: Union[np.ndarray, Sequence[ComplexVolume]], maps: SensitivityMaps) -> ComplexVolume:
    if not isinstance(coil_vols, np.ndarray):
        coil_vols = np.stack([v.data for v in coil_vols])
    return ComplexVolume(maps.grid, combine_array(coil_vols, maps))


def coil_expand(vol: ComplexVolume, maps: SensitivityMaps) -> np.ndarray:
    return expand_array(vol.data, maps)


def b0_phase(b0: B0Map, dwell: float, n_time: int, direction: int) -> np.ndarray:
    n = np.arange(n_time)
    return np.exp(direction * 2j * np.pi * b0.df[..., None] * n * dwell)


def b0_apply(series: ImageTimeSeries, b0: B0Map, direction: int) -> ImageTimeSeries:
    if direction not in (-1, 1):
        raise DataError(f"direction must be +1 or -1, got {direction}")
    if series.grid.shape != b0.grid.shape:
        raise DimensionMismatchError(f"series grid {series.grid.shape} does not match B0 grid {b0.grid.shape}")
    g = series.grid
    return ImageTimeSeries(g, series.data * b0_phase(b0, g.dwell, g.n_time, direction))


def b0_estimate(series: ImageTimeSeries, n_fit: int = 10, threshold: float = 0.05) -> B0Map:
    """Phasor-product frequency estimate over the first n_fit points of a water-dominated series."""
    g = series.grid
    if n_fit < 2:
        raise DataError(f"n_fit must be at least 2, got {n_fit}")
    if n_fit > g.n_time:
        raise DataError(f"n_fit={n_fit} exceeds the {g.n_time} available timepoints")
    x = series.data[..., :n_fit]
    prod = np.sum(x[..., 1:] * np.conj(x[..., :-1]), axis=-1)
    df = np.angle(prod) / (2 * np.pi * g.dwell)
    mag = np.abs(series.data[..., 0])
    peak = float(mag.max()) if mag.size else 0.0
    df = np.where((mag > threshold * peak) & (peak > 0), df, 0.0)
    return B0Map(g.with_(n_time=1), df)


def espirit_eigen(
    calib: GriddedKSpace, grid: GridSpec, kernel: Sequence[int] = (6, 6, 3), tau_sv: float = 0.01
) -> Tuple[np.ndarray, np.ndarray]:
    """Dominant eigenvector (C, x, y, z) and eigenvalue (x, y, z) of the calibration operator."""
    kernel = tuple(int(k) for k in kernel)
    C = calib.n_coils
    cs = calib.data.shape[1:]
    if any(c < k for c, k in zip(cs, kernel)):
        raise DataError(f"calibration region {cs} is smaller than kernel {kernel}")
    if any(c > n for c, n in zip(cs, grid.shape)):
        raise DataError(f"calibration region {cs} exceeds image grid {grid.shape}")
    if not np.allclose(calib.grid.fov, grid.fov):
        raise DimensionMismatchError("calibration and image grids must share the field of view")
    patches = sliding_window_view(calib.data, kernel, axis=(1, 2, 3))
    rows = np.moveaxis(patches, 0, 3).reshape(-1, C * int(np.prod(kernel)))
    _, s, vh = np.linalg.svd(rows, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        raise DataError("degenerate calibration data (rank 0)")
    n_ker = int(np.sum(s >= tau_sv * s[0]))
    log.debug("ESPIRiT: kept %d of %d kernels", n_ker, s.size)
    kernels = vh[:n_ker].reshape((n_ker, C) + kernel)
    pad = [(0, 0), (0, 0)] + [((n - k) // 2, n - k - (n - k) // 2) for n, k in zip(grid.shape, kernel)]
    g = ifft3c(np.pad(kernels, pad)) * math.sqrt(grid.n_voxels / np.prod(kernel))
    # per voxel: M(r) = [g_1 .. g_n] (C x n_ker), operator M M^H
    m = np.moveaxis(g, (0, 1), (-1, -2))
    gram = m @ np.conj(np.swapaxes(m, -1, -2))
    vals, vecs = np.linalg.eigh(gram)
    lead = vecs[..., :, -1]
    anchor = np.exp(-1j * np.angle(lead[..., :1]))
    return np.moveaxis(lead * anchor, -1, 0), vals[..., -1]


def espirit_maps(
    calib: GriddedKSpace,
    grid: GridSpec,
    kernel: Sequence[int] = (6, 6, 3),
    tau_sv: float = 0.01,
    tau_eig: float = 0.9,
) -> SensitivityMaps:
    vecs, vals = espirit_eigen(calib, grid, kernel, tau_sv)
    keep = vals >= tau_eig
    log.info("ESPIRiT: %d of %d voxels above eigenvalue threshold %.2f", int(keep.sum()), keep.size, tau_eig)
    return SensitivityMaps.normalized(grid, np.where(keep, vecs, 0))


@dataclass(frozen=True, eq=False)
class EncodingOperator:
    """W F C B for one trajectory; W defaults to unit weights and B to zero offset."""

    traj: Trajectory
    maps: SensitivityMaps
    b0: Optional[B0Map] = None
    weights: Optional[SampleWeights] = None
    dcf: Optional[SampleWeights] = None

    def __post_init__(self):
        _check_traj(self.maps.grid, self.traj)
        if self.b0 is not None and self.b0.grid.shape != self.maps.grid.shape:
            raise DimensionMismatchError("B0 map grid does not match sensitivity maps")
        _check_dcf(self.traj, self.weights)
        _check_dcf(self.traj, self.dcf)

    @property
    def grid(self) -> GridSpec:
        return self.maps.grid

    @property
    def nufft(self) -> NufftOperator:
        return operator_for(self.traj)

    @property
    def w(self) -> np.ndarray:
        return _check_dcf(self.traj, self.weights)

    def _phase(self, times: np.ndarray) -> Optional[np.ndarray]:
        if self.b0 is None:
            return None
        n = np.asarray(times)[:, None, None, None]
        return np.exp(2j * np.pi * self.b0.df[None] * n * self.traj.grid.dwell)

    def forward_volumes(self, vols: np.ndarray, times: Optional[np.ndarray] = None) -> np.ndarray:
        """(B, x, y, z) at timepoints `times` -> (B, C, M)"""
        vols = np.asarray(vols, dtype=np.complex128)
        ph = self._phase(np.zeros(len(vols), dtype=np.int64) if times is None else times)
        if ph is not None:
            vols = vols * ph
        coil = self.maps.data[None] * vols[:, None]
        return self.nufft.forward(coil) * self.w

    def adjoint_volumes(self, samples: np.ndarray, times: Optional[np.ndarray] = None) -> np.ndarray:
        """(B, C, M) -> (B, x, y, z)"""
        coil = self.nufft.adjoint(np.asarray(samples) * self.w)
        vols = np.sum(np.conj(self.maps.data)[None] * coil, axis=1)
        ph = self._phase(np.zeros(len(vols), dtype=np.int64) if times is None else times)
        return vols if ph is None else vols * np.conj(ph)

    def forward(self, series: np.ndarray) -> np.ndarray:
        """(x, y, z, T) -> (C, M, T)"""
        T = series.shape[-1]
        out = self.forward_volumes(np.moveaxis(series, -1, 0), np.arange(T))
        return np.moveaxis(out, 0, -1)

    def adjoint(self, samples: np.ndarray) -> np.ndarray:
        """(C, M, T) -> (x, y, z, T)"""
        T = samples.shape[-1]
        out = self.adjoint_volumes(np.moveaxis(samples, -1, 0), np.arange(T))
        return np.moveaxis(out, 0, -1)

    def norm_squared(self, iterations: int = POWER_ITERATIONS, seed: int = 0) -> float:
        """Power-iteration estimate of ||W F C||^2 (B is unitary and drops out)."""
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(self.grid.shape) + 1j * rng.standard_normal(self.grid.shape)
        x /= np.linalg.norm(x)
        lam = 0.0
        for _ in range(iterations):
            y = self.adjoint_volumes(self.forward_volumes(x[None]))[0]
            lam = float(np.linalg.norm(y))
            if lam == 0.0:
                return 0.0
            x = y / lam
        return lam


def encode_forward(
    x: Union[ImageTimeSeries, Tuple["LowRankFactors", "LipidComponent"]],
    maps: SensitivityMaps,
    b0: Optional[B0Map],
    traj: Trajectory,
    hamming: Optional[SampleWeights] = None,
) -> CoilKSpaceSeries:
    """Apply B (simulate direction), coil expansion, NUFT per timepoint and W."""
    if isinstance(x, ImageTimeSeries):
        data = x.data
    else:
        factors, lipid = x
        data = factors.to_series(maps.grid, lipid)
    op = EncodingOperator(traj, maps, b0, hamming)
    if data.shape[:3] != maps.grid.shape:
        raise DimensionMismatchError(f"series shape {data.shape} does not match maps grid {maps.grid.shape}")
    grid = maps.grid.with_(n_time=data.shape[-1], n_coils=maps.n_coils)
    return CoilKSpaceSeries(grid, traj.coords, op.forward(data))


def encode_adjoint(
    kspace: CoilKSpaceSeries, maps: SensitivityMaps, b0: Optional[B0Map], traj: Trajectory,
    hamming: Optional[SampleWeights] = None,
) -> ImageTimeSeries:
    op = EncodingOperator(traj, maps, b0, hamming)
    return ImageTimeSeries(maps.grid.with_(n_time=kspace.grid.n_time), op.adjoint(kspace.data))


def inuft_baseline(
    kspace: CoilKSpaceSeries,
    traj: Trajectory,
    dcf: SampleWeights,
    maps: SensitivityMaps,
    b0: Optional[B0Map] = None,
) -> ImageTimeSeries:
    """Density-compensated iNUFT per coil and timepoint, coil combination, B0 correction."""
    if kspace.n_samples != traj.n_samples:
        raise DimensionMismatchError(f"k-space has {kspace.n_samples} samples, trajectory has {traj.n_samples}")
    if kspace.data.shape[0] != maps.n_coils:
        raise DimensionMismatchError(f"k-space has {kspace.data.shape[0]} coils, maps have {maps.n_coils}")
    w = _check_dcf(traj, dcf)
    coil = operator_for(traj).adjoint(np.moveaxis(kspace.data, -1, 1) * w) * inuft_scale(traj.grid)
    # coil: (C, T, x, y, z)
    combined = np.moveaxis(np.sum(np.conj(maps.data)[:, None] * coil, axis=0), 0, -1)
    series = ImageTimeSeries(maps.grid.with_(n_time=kspace.grid.n_time), combined)
    return series if b0 is None else b0_apply(series, b0, -1)
