"""
Derenzo-style resolution phantom, FID synthesis and acquisition simulation.

Tubes sit in five 72-degree sectors. Each sector holds one diameter d in a
triangular lattice of rows with 1, 2, 3 tubes, pitch 2d, apex pointing at the
container center.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from mrsi.errors import DataError
from mrsi.pipeline.core import CoilKSpaceSeries, ComplexVolume, GriddedKSpace, GridSpec, ImageTimeSeries, fft3c
from mrsi.pipeline.encoding import B0Map, SensitivityMaps, encode_forward
from mrsi.pipeline.trajectory import Trajectory

log = logging.getLogger("mrsi.phantom")

APEX_MARGIN_MM = 5.0


class FidModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    amplitude: float = 1.0
    frequency: float = 0.0
    t2: float = Field(default=0.08, gt=0)


class TubeSet(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    diameter: float = Field(gt=0)
    count: int = Field(default=6, ge=1)
    spacing_factor: float = Field(default=2.0, ge=1)
    sector_angle: float = 0.0

    @model_validator(mode="after")
    def _triangular(self):
        rows = _rows_for(self.count)
        if rows * (rows + 1) // 2 != self.count:
            raise ValueError(f"tube count {self.count} does not fill a triangular lattice")
        return self

    @property
    def pitch(self) -> float:
        return self.spacing_factor * self.diameter


def _rows_for(count: int) -> int:
    return int(round((math.sqrt(8 * count + 1) - 1) / 2))


class PhantomSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    container_diameter: float = Field(default=133.3, gt=0)
    tube_sets: List[TubeSet] = Field(default_factory=list)

    @model_validator(mode="after")
    def _contained(self):
        r = self.container_diameter / 2
        for x, y, d in self.tubes():
            if math.hypot(x, y) + d / 2 > r + 1e-9:
                raise ValueError(f"{d} mm tube at ({x:.2f}, {y:.2f}) leaves the {self.container_diameter} mm container")
        return self

    def tube_centers(self, ts: TubeSet) -> np.ndarray:
        th = math.radians(ts.sector_angle)
        radial = np.array([math.cos(th), math.sin(th)])
        lateral = np.array([-math.sin(th), math.cos(th)])
        r0 = APEX_MARGIN_MM + 1.5 * ts.diameter
        out = []
        for row in range(_rows_for(ts.count)):
            rho = r0 + row * ts.pitch * math.sqrt(3) / 2
            for j in range(row + 1):
                out.append(rho * radial + (j - row / 2) * ts.pitch * lateral)
        return np.array(out)

    def tubes(self) -> List[Tuple[float, float, float]]:
        return [(float(x), float(y), ts.diameter) for ts in self.tube_sets for x, y in self.tube_centers(ts)]

    def tube_set(self, diameter: float) -> TubeSet:
        for ts in self.tube_sets:
            if abs(ts.diameter - diameter) < 1e-9:
                return ts
        raise DataError(f"phantom has no {diameter} mm tube set")


def default_derenzo() -> PhantomSpec:
    diameters = (2.0, 4.0, 6.0, 8.0, 10.0)
    return PhantomSpec(
        container_diameter=133.3,
        tube_sets=[TubeSet(diameter=d, count=6, spacing_factor=2.0, sector_angle=90.0 + 72.0 * i)
                   for i, d in enumerate(diameters)],
    )


def _fine_coords(grid: GridSpec, supersample: int) -> Tuple[np.ndarray, np.ndarray]:
    axes = []
    for n, d in zip((grid.nx, grid.ny), grid.voxel_size[:2]):
        centers = (np.arange(n) - n // 2) * d
        sub = (np.arange(supersample) + 0.5) / supersample * d - d / 2
        axes.append((centers[:, None] + sub[None, :]).reshape(-1))
    return np.meshgrid(axes[0], axes[1], indexing="ij")


def _area_fraction(inside: np.ndarray, grid: GridSpec, supersample: int) -> np.ndarray:
    s = supersample
    frac = inside.reshape(grid.nx, s, grid.ny, s).mean(axis=(1, 3))
    return np.repeat(frac[:, :, None], grid.nz, axis=2)


def rasterize(spec: PhantomSpec, grid: GridSpec, supersample: int = 4) -> ComplexVolume:
    """Fraction of each voxel inside any tube; tubes run the full z extent, so the z subgrid is uniform."""
    if supersample < 1:
        raise DataError(f"supersample must be >= 1, got {supersample}")
    fx, fy = _fine_coords(grid, supersample)
    inside = np.zeros(fx.shape, dtype=bool)
    for x, y, d in spec.tubes():
        inside |= (fx - x) ** 2 + (fy - y) ** 2 <= (d / 2) ** 2
    return ComplexVolume(grid.with_(n_time=1), _area_fraction(inside, grid, supersample))


def lipid_ring_volume(spec: PhantomSpec, grid: GridSpec, thickness: float = 6.0, supersample: int = 4) -> ComplexVolume:
    """Skull-like shell just outside the container wall."""
    fx, fy = _fine_coords(grid, supersample)
    r = np.hypot(fx, fy)
    rc = spec.container_diameter / 2
    inside = (r > rc) & (r <= rc + thickness)
    return ComplexVolume(grid.with_(n_time=1), _area_fraction(inside, grid, supersample))


def container_support(spec: PhantomSpec, grid: GridSpec) -> np.ndarray:
    x, y, _ = grid.voxel_coords()
    r = np.hypot(x[:, None], y[None, :])
    return np.repeat((r <= spec.container_diameter / 2)[:, :, None], grid.nz, axis=2)


def fid_signal(fid: Union[FidModel, Sequence[FidModel]], n_time: int, dwell: float) -> np.ndarray:
    models = [fid] if isinstance(fid, FidModel) else list(fid)
    t = np.arange(n_time) * dwell
    out = np.zeros(n_time, dtype=np.complex128)
    for f in models:
        out += f.amplitude * np.exp(2j * np.pi * f.frequency * t) * np.exp(-t / f.t2)
    return out


def synthesize_series(vol: ComplexVolume, fid: Union[FidModel, Sequence[FidModel]], grid: GridSpec) -> ImageTimeSeries:
    if vol.grid.shape != grid.shape:
        raise DataError(f"volume grid {vol.grid.shape} does not match series grid {grid.shape}")
    sig = fid_signal(fid, grid.n_time, grid.dwell)
    return ImageTimeSeries(grid, vol.data[..., None] * sig)


def simulate_acquisition(
    series: ImageTimeSeries,
    traj: Trajectory,
    maps: SensitivityMaps,
    b0: Optional[B0Map],
    noise_sigma: float,
    seed: int,
) -> CoilKSpaceSeries:
    """F C B(+1) applied to the series, plus complex Gaussian noise of sigma per component."""
    if noise_sigma < 0:
        raise DataError(f"noise_sigma must be >= 0, got {noise_sigma}")
    clean = encode_forward(series, maps, b0, traj)
    if noise_sigma == 0:
        return clean
    rng = np.random.default_rng(seed)
    shape = clean.data.shape
    noise = noise_sigma * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return CoilKSpaceSeries(clean.grid, clean.coords, clean.data + noise)


def sigma_for_snr(kspace: CoilKSpaceSeries, snr_db: float) -> float:
    """Per-component sigma giving the requested ratio of signal RMS to noise RMS."""
    rms = float(np.sqrt(np.mean(np.abs(kspace.data) ** 2)))
    return rms / (10 ** (snr_db / 20)) / math.sqrt(2)


def _normalized_coords(grid: GridSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, y, z = grid.voxel_coords()
    xs = x / (grid.fov_x / 2)
    ys = y / (grid.fov_y / 2)
    zs = z / (grid.fov_z / 2)
    return np.meshgrid(xs, ys, zs, indexing="ij")


def smooth_coil_maps(grid: GridSpec, n_coils: int, seed: int = 0) -> SensitivityMaps:
    """Low-order polynomial magnitude and phase per coil, normalized per voxel."""
    if n_coils < 1:
        raise DataError(f"n_coils must be >= 1, got {n_coils}")
    rng = np.random.default_rng(seed)
    X, Y, Z = _normalized_coords(grid)
    raw = np.empty((n_coils,) + grid.shape, dtype=np.complex128)
    for c in range(n_coils):
        phi = 2 * np.pi * c / n_coils
        mag = 1.0 + 0.5 * (math.cos(phi) * X + math.sin(phi) * Y) + 0.1 * X * Y
        a, b, off = rng.uniform(-0.5, 0.5, size=3)
        phase = np.pi * (a * X + b * Y + 0.1 * Z) + 2 * np.pi * off
        raw[c] = mag * np.exp(1j * phase)
    return SensitivityMaps.normalized(grid.with_(n_time=1, n_coils=n_coils), raw)


def smooth_b0_map(grid: GridSpec, max_hz: float, support: Optional[np.ndarray] = None) -> B0Map:
    """Linear-plus-quadratic offset scaled to max_hz on the support, zero outside."""
    X, Y, Z = _normalized_coords(grid)
    df = 0.6 * X - 0.3 * Y + 0.4 * (X**2 + Y**2) + 0.2 * Z
    sup = np.ones(grid.shape, dtype=bool) if support is None else support
    peak = float(np.max(np.abs(df[sup]))) if sup.any() else 0.0
    scaled = np.where(sup, df * (max_hz / peak if peak > 0 else 0.0), 0.0)
    return B0Map(grid.with_(n_time=1), scaled)


def calibration_kspace(
    volume: ComplexVolume, maps: SensitivityMaps, calib_shape: Sequence[int] = (22, 22, 11)
) -> GriddedKSpace:
    """Cartesian low-resolution multi-coil k-space center of one image."""
    g = volume.grid
    full = fft3c(maps.data * volume.data[None])
    crop = tuple(min(int(c), n) for c, n in zip(calib_shape, g.shape))
    sl = tuple(slice(n // 2 - c // 2, n // 2 - c // 2 + c) for c, n in zip(crop, g.shape))
    low = g.with_(nx=crop[0], ny=crop[1], nz=crop[2], n_coils=maps.n_coils, n_time=1)
    return GriddedKSpace(low, full[(slice(None),) + sl])


class PhantomConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    spec: PhantomSpec = Field(default_factory=default_derenzo)
    supersample: int = Field(default=4, ge=1)
    water: FidModel = FidModel(amplitude=1.0, frequency=0.0, t2=0.08)
    metabolite: FidModel = FidModel(amplitude=0.05, frequency=-500.0, t2=0.1)
    residual_water: FidModel = FidModel(amplitude=0.2, frequency=0.0, t2=0.08)
    lipid: FidModel = FidModel(amplitude=0.5, frequency=-1000.0, t2=0.02)
    lipid_thickness: float = Field(default=6.0, gt=0)
    snr_db: Optional[float] = 30.0
    b0_max_hz: float = Field(default=20.0, ge=0)
    coil_seed: int = 0


@dataclass(frozen=True, eq=False)
class Experiment:
    phantom: ComplexVolume
    lipid_ring: ComplexVolume
    maps: SensitivityMaps
    b0: B0Map
    calib: GriddedKSpace
    water_truth: ImageTimeSeries
    metabolite_truth: ImageTimeSeries
    water: CoilKSpaceSeries
    metabolite: CoilKSpaceSeries
    noise_sigma: float


def simulate_experiment(
    cfg: PhantomConfig,
    grid: GridSpec,
    traj: Trajectory,
    seed: int,
    calib_shape: Sequence[int] = (22, 22, 11),
) -> Experiment:
    """Water and metabolite acquisitions sharing coil maps and B0, with independent noise."""
    vol = rasterize(cfg.spec, grid, cfg.supersample)
    ring = lipid_ring_volume(cfg.spec, grid, cfg.lipid_thickness, cfg.supersample)
    support = container_support(cfg.spec, grid)
    maps = smooth_coil_maps(grid, grid.n_coils, cfg.coil_seed)
    b0 = smooth_b0_map(grid, cfg.b0_max_hz, support)
    calib = calibration_kspace(vol, maps, calib_shape)

    water_truth = synthesize_series(vol, cfg.water, grid)
    metab_truth = synthesize_series(vol, cfg.metabolite, grid)
    metab_full = ImageTimeSeries(
        grid,
        synthesize_series(vol, [cfg.metabolite, cfg.residual_water], grid).data
        + synthesize_series(ring, cfg.lipid, grid).data,
    )
    clean_water = simulate_acquisition(water_truth, traj, maps, b0, 0.0, seed)
    sigma = 0.0 if cfg.snr_db is None else sigma_for_snr(clean_water, cfg.snr_db)
    ss = np.random.SeedSequence(seed).spawn(2)
    water = simulate_acquisition(water_truth, traj, maps, b0, sigma, int(ss[0].generate_state(1)[0]))
    metab = simulate_acquisition(metab_full, traj, maps, b0, sigma, int(ss[1].generate_state(1)[0]))
    log.info("simulated %d samples x %d coils x %d timepoints, noise sigma %.4g",
             traj.n_samples, grid.n_coils, grid.n_time, sigma)
    return Experiment(vol, ring, maps, b0, calib, water_truth, metab_truth, water, metab, sigma)


def sector_modulation(image: np.ndarray, spec: PhantomSpec, grid: GridSpec, diameter: float) -> float:
    """Mean peak-to-valley modulation between adjacent tubes of one sector, (peak - valley) / peak."""
    img = np.abs(np.asarray(image))
    if img.ndim == 3:
        img = img.mean(axis=2)
    if img.shape != (grid.nx, grid.ny):
        raise DataError(f"image shape {img.shape} does not match grid {(grid.nx, grid.ny)}")
    ts = spec.tube_set(diameter)
    centers = spec.tube_centers(ts)
    dx, dy, _ = grid.voxel_size

    def sample(pts: np.ndarray) -> np.ndarray:
        idx = np.stack([pts[:, 0] / dx + grid.nx // 2, pts[:, 1] / dy + grid.ny // 2])
        return ndimage.map_coordinates(img, idx, order=1, mode="nearest")

    pairs = [(i, j) for i in range(len(centers)) for j in range(i + 1, len(centers))
             if abs(np.linalg.norm(centers[i] - centers[j]) - ts.pitch) < 1e-6]
    a = np.array([centers[i] for i, _ in pairs])
    b = np.array([centers[j] for _, j in pairs])
    peak = 0.5 * (sample(a) + sample(b))
    valley = sample(0.5 * (a + b))
    with np.errstate(divide="ignore", invalid="ignore"):
        mod = np.where(peak > 0, (peak - valley) / peak, 0.0)
    return float(np.mean(mod))
