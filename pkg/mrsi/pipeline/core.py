"""
Domain types and centered Fourier transforms shared by every pipeline stage.

Conventions:
- image voxel i sits at r = (i - n//2) * fov/n (DC voxel at the array center)
- k-space cell m sits at k = (m - n//2) / fov in cycles/mm
- fft3_centered is orthonormal, so its inverse is its adjoint
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np
import scipy.fft as sfft
from pydantic import BaseModel, ConfigDict, Field

from mrsi.errors import DataError, DimensionMismatchError, NonFiniteError

SPATIAL_AXES = (-3, -2, -1)


class GridSpec(BaseModel):
    """Image grid, spectral sampling and coil count of one experiment."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    nx: int = Field(ge=1)
    ny: int = Field(ge=1)
    nz: int = Field(ge=1)
    fov_x: float = Field(gt=0)
    fov_y: float = Field(gt=0)
    fov_z: float = Field(gt=0)
    dwell: float = Field(gt=0)
    n_time: int = Field(default=1, ge=1)
    n_coils: int = Field(default=1, ge=1)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def fov(self) -> Tuple[float, float, float]:
        return (self.fov_x, self.fov_y, self.fov_z)

    @property
    def voxel_size(self) -> Tuple[float, float, float]:
        return (self.fov_x / self.nx, self.fov_y / self.ny, self.fov_z / self.nz)

    @property
    def kmax(self) -> Tuple[float, float, float]:
        return (self.nx / (2 * self.fov_x), self.ny / (2 * self.fov_y), self.nz / (2 * self.fov_z))

    @property
    def dk(self) -> Tuple[float, float, float]:
        return (1.0 / self.fov_x, 1.0 / self.fov_y, 1.0 / self.fov_z)

    @property
    def kmax_xy(self) -> float:
        return min(self.kmax[0], self.kmax[1])

    @property
    def dk_xy(self) -> float:
        return max(self.dk[0], self.dk[1])

    def with_(self, **changes) -> "GridSpec":
        return self.model_copy(update=changes)

    def partition_kz(self) -> np.ndarray:
        """kz of every partition plane, in partition-index order."""
        return (np.arange(self.nz) - self.nz // 2) / self.fov_z

    def partition_of(self, kz: np.ndarray) -> np.ndarray:
        idx = np.rint(np.asarray(kz) * self.fov_z).astype(np.int64) + self.nz // 2
        return idx

    def voxel_coords(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Centered voxel positions in mm along x, y, z."""
        return tuple(
            (np.arange(n) - n // 2) * d for n, d in zip(self.shape, self.voxel_size)
        )  # type: ignore[return-value]


def _frozen(data, name: str, dtype=np.complex128) -> np.ndarray:
    arr = np.array(data, dtype=dtype, copy=True)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def _expect_shape(arr: np.ndarray, shape: Sequence[int], name: str) -> None:
    if tuple(arr.shape) != tuple(shape):
        raise DimensionMismatchError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")


@dataclass(frozen=True, eq=False)
class ComplexVolume:
    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.data, "volume")
        _expect_shape(arr, self.grid.shape, "volume")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True, eq=False)
class ImageTimeSeries:
    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.data, "series")
        _expect_shape(arr, self.grid.shape + (self.grid.n_time,), "series")
        object.__setattr__(self, "data", arr)

    def timepoint(self, t: int) -> ComplexVolume:
        return ComplexVolume(self.grid, self.data[..., t])

    @classmethod
    def from_volume(cls, vol: ComplexVolume) -> "ImageTimeSeries":
        return cls(vol.grid.with_(n_time=1), vol.data[..., None])


@dataclass(frozen=True, eq=False)
class CoilKSpaceSeries:
    """Non-Cartesian samples indexed by (coil, sample, time)."""

    grid: GridSpec
    coords: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        coords = _frozen(self.coords, "sample coordinates", dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise DimensionMismatchError(f"sample coordinates have shape {coords.shape}, expected (M, 3)")
        check_sample_coords(self.grid, coords)
        arr = _frozen(self.data, "k-space samples")
        _expect_shape(arr, (self.grid.n_coils, coords.shape[0], self.grid.n_time), "k-space samples")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "data", arr)

    @property
    def n_samples(self) -> int:
        return self.coords.shape[0]

    def timepoint(self, t: int) -> "CoilKSpaceSeries":
        return CoilKSpaceSeries(self.grid.with_(n_time=1), self.coords, self.data[..., t : t + 1])


@dataclass(frozen=True, eq=False)
class GriddedKSpace:
    """Cartesian k-space per coil, DC at the array center."""

    grid: GridSpec
    data: np.ndarray
    n_coils: int = field(init=False)

    def __post_init__(self):
        arr = _frozen(self.data, "gridded k-space")
        if arr.ndim != 4:
            raise DimensionMismatchError(f"gridded k-space has {arr.ndim} dims, expected (coil, x, y, z)")
        _expect_shape(arr, (arr.shape[0],) + self.grid.shape, "gridded k-space")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "n_coils", arr.shape[0])


def check_sample_coords(grid: GridSpec, coords: np.ndarray, tol: float = 1e-9) -> None:
    kmx, kmy, _ = grid.kmax
    if coords.size == 0:
        return
    if np.any(np.abs(coords[:, 0]) > kmx * (1 + tol) + tol) or np.any(
        np.abs(coords[:, 1]) > kmy * (1 + tol) + tol
    ):
        raise DataError("sample coordinates exceed the in-plane k-space extent")
    planes = coords[:, 2] * grid.fov_z
    if np.any(np.abs(planes - np.rint(planes)) > 1e-6):
        raise DataError("kz coordinates must lie on partition planes")
    idx = grid.partition_of(coords[:, 2])
    if np.any(idx < 0) or np.any(idx >= grid.nz):
        raise DataError("kz coordinates fall outside the partition stack")


def fft3c(arr: np.ndarray, axes=SPATIAL_AXES) -> np.ndarray:
    return sfft.fftshift(sfft.fftn(sfft.ifftshift(arr, axes=axes), axes=axes, norm="ortho"), axes=axes)


def ifft3c(arr: np.ndarray, axes=SPATIAL_AXES) -> np.ndarray:
    return sfft.fftshift(sfft.ifftn(sfft.ifftshift(arr, axes=axes), axes=axes, norm="ortho"), axes=axes)


def fft3_centered(vol: ComplexVolume) -> GriddedKSpace:
    return GriddedKSpace(vol.grid, fft3c(vol.data)[None])


def ifft3_centered(k: GriddedKSpace, coil: int = 0) -> ComplexVolume:
    if k.data.shape[1:] != k.grid.shape:
        raise DimensionMismatchError(f"spectrum shape {k.data.shape[1:]} does not match grid {k.grid.shape}")
    return ComplexVolume(k.grid, ifft3c(k.data[coil]))


ArrayLike = Union[ComplexVolume, ImageTimeSeries, np.ndarray]


def _payload(obj: ArrayLike) -> np.ndarray:
    return obj.data if isinstance(obj, (ComplexVolume, ImageTimeSeries)) else np.asarray(obj)


def _rescaled(obj: ArrayLike, factor: float) -> ArrayLike:
    if isinstance(obj, (ComplexVolume, ImageTimeSeries)):
        return type(obj)(obj.grid, obj.data * factor)
    return np.asarray(obj) * factor


@dataclass(frozen=True, eq=False)
class NormalizedSample:
    input: ArrayLike
    companions: Tuple[ArrayLike, ...]
    scale: float


def normalize_unit(input: ArrayLike, companions: Sequence[ArrayLike] = ()) -> NormalizedSample:
    """Divide the input and every companion by max|input|."""
    peak = float(np.max(np.abs(_payload(input)))) if _payload(input).size else 0.0
    if not np.isfinite(peak):
        raise NonFiniteError("normalization input contains non-finite values")
    if peak <= 0.0:
        raise DataError("cannot normalize an all-zero input")
    inv = 1.0 / peak
    return NormalizedSample(
        input=_rescaled(input, inv),
        companions=tuple(_rescaled(c, inv) for c in companions),
        scale=peak,
    )
