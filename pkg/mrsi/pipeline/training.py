"""
Training of the joint-space network on (fully sampled k-space, water image) pairs.

Every step draws a pair, augments it, undersamples it at a random acceleration
with every center-crossing circle kept, normalizes it to unit peak magnitude
and takes one Adam step on the MSE + (1 - SSIM) loss.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage

from mrsi.errors import DataError, DimensionMismatchError, NonFiniteError
from mrsi.pipeline import metrics as m
from mrsi.pipeline.core import CoilKSpaceSeries, ComplexVolume, GridSpec, normalize_unit
from mrsi.pipeline.encoding import EncodingOperator, SensitivityMaps
from mrsi.pipeline.interlacer import InterlacerModel, gridding_input, mse_ssim_loss, to_tensor
from mrsi.pipeline.tgv import TgvConfig, water_reconstruct_per_timepoint
from mrsi.pipeline.trajectory import SampleWeights, Trajectory, select_circles, undersample_indices, voronoi_dcf

log = logging.getLogger("mrsi.training")


class AugmentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    enabled: bool = True
    phase: bool = True
    rotation_rad: float = Field(0.3, ge=0)
    translation_mm: float = Field(20.0, ge=0)
    scale: float = Field(0.2, ge=0, lt=1)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(1e-5, gt=0)
    epochs: int = Field(500, ge=1)
    steps_per_epoch: Optional[int] = Field(None, ge=1)  # None: one pass over the dataset
    af_range: Tuple[float, float] = (1.0, 6.0)
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    dtype: str = Field("float32", pattern="^(float32|float64)$")
    timepoints: Optional[List[int]] = None  # None: every timepoint
    augment: AugmentConfig = AugmentConfig()

    @model_validator(mode="after")
    def _af_order(self):
        lo, hi = self.af_range
        if lo < 1 or hi < lo:
            raise ValueError(f"af_range must satisfy 1 <= lo <= hi, got {self.af_range}")
        return self

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass(frozen=True, eq=False)
class TrainingPair:
    k_fs: CoilKSpaceSeries  # one timepoint, full trajectory
    x_gt: ComplexVolume
    source: str = ""


def seed_everything(seed: int, threads: int = 1) -> None:
    torch.manual_seed(int(seed))
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)


def build_training_pairs(
    kspace: CoilKSpaceSeries,
    traj: Trajectory,
    maps: SensitivityMaps,
    tgv: TgvConfig,
    timepoints: Optional[Sequence[int]] = None,
    source: str = "",
) -> List[TrainingPair]:
    """Ground truth per timepoint from the fully sampled water data."""
    if kspace.n_samples != traj.n_samples:
        raise DimensionMismatchError(f"k-space has {kspace.n_samples} samples, trajectory has {traj.n_samples}")
    ops = EncodingOperator(traj, maps)
    ts = range(kspace.grid.n_time) if timepoints is None else timepoints
    pairs = []
    for t in ts:
        s_t = kspace.timepoint(int(t))
        x_gt = water_reconstruct_per_timepoint(s_t, ops, tgv)
        pairs.append(TrainingPair(s_t, x_gt, f"{source}t{int(t)}"))
    log.info("built %d training pairs", len(pairs))
    return pairs


@dataclass(frozen=True)
class AugmentParams:
    phase: float = 0.0
    angle: float = 0.0
    shift_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def is_identity(self) -> bool:
        return self.phase == 0 and self.angle == 0 and not any(self.shift_mm) and self.scale == 1


def draw_augmentation(rng: np.random.Generator, cfg: AugmentConfig) -> AugmentParams:
    return AugmentParams(
        phase=float(rng.uniform(0, 2 * np.pi)) if cfg.phase else 0.0,
        angle=float(rng.uniform(-cfg.rotation_rad, cfg.rotation_rad)),
        shift_mm=tuple(float(v) for v in rng.uniform(-cfg.translation_mm, cfg.translation_mm, size=3)),
        scale=float(rng.uniform(1 - cfg.scale, 1 + cfg.scale)),
    )


def transform_volume(data: np.ndarray, grid: GridSpec, p: AugmentParams) -> np.ndarray:
    """Rotate about z, scale and shift in mm, trilinear with zero fill, then apply the global phase."""
    if p.angle == 0 and not any(p.shift_mm) and p.scale == 1:
        out = np.array(data, dtype=np.complex128)
    else:
        d = np.asarray(grid.voxel_size)
        c = np.array([n // 2 for n in grid.shape], dtype=np.float64)
        cs, sn = math.cos(p.angle), math.sin(p.angle)
        # output -> input in mm: R^T (q - shift) / scale
        a = np.array([[cs, sn, 0.0], [-sn, cs, 0.0], [0.0, 0.0, 1.0]]) / p.scale
        mat = (a * d[None, :]) / d[:, None]
        offset = c - mat @ c - (a @ np.asarray(p.shift_mm)) / d
        kw = dict(matrix=mat, offset=offset, order=1, mode="constant", cval=0.0)
        out = ndimage.affine_transform(data.real, **kw) + 1j * ndimage.affine_transform(data.imag, **kw)
    return out * np.exp(1j * p.phase) if p.phase else out


def augment(
    pair: TrainingPair, seed: int, cfg: AugmentConfig, traj: Trajectory, maps: SensitivityMaps
) -> TrainingPair:
    """Same spatial transform on target and input; the input keeps its noise residual."""
    params = draw_augmentation(np.random.default_rng(int(seed)), cfg)
    return apply_augmentation(pair, params, traj, maps)


def apply_augmentation(
    pair: TrainingPair, params: AugmentParams, traj: Trajectory, maps: SensitivityMaps
) -> TrainingPair:
    if params.is_identity():
        return pair
    grid = pair.x_gt.grid
    ops = EncodingOperator(traj, maps)
    x_new = transform_volume(pair.x_gt.data, grid, params)
    residual = pair.k_fs.data - ops.forward(pair.x_gt.data[..., None])
    k_new = ops.forward(x_new[..., None]) + residual * np.exp(1j * params.phase)
    return TrainingPair(
        CoilKSpaceSeries(pair.k_fs.grid, pair.k_fs.coords, k_new),
        ComplexVolume(grid, x_new),
        pair.source,
    )


def feasible_af(traj: Trajectory, af: float) -> float:
    n_center = traj.n_center_crossing()
    if n_center == 0:
        return max(1.0, af)
    return float(min(max(af, 1.0), len(traj.circles) / n_center))


class _DcfCache:
    def __init__(self, traj: Trajectory):
        self.traj = traj
        self._cache: Dict[Tuple[int, ...], Tuple[Trajectory, SampleWeights]] = {}

    def get(self, kept: np.ndarray) -> Tuple[Trajectory, SampleWeights]:
        key = tuple(int(i) for i in kept)
        if key not in self._cache:
            sub = select_circles(self.traj, kept)
            self._cache[key] = (sub, voronoi_dcf(sub))
        return self._cache[key]


@dataclass
class TrainResult:
    model: InterlacerModel
    loss_trace: List[float]
    steps: int


def train(
    model: InterlacerModel,
    dataset: Sequence[TrainingPair],
    cfg: TrainConfig,
    traj: Trajectory,
    ssim_kwargs: Optional[dict] = None,
) -> TrainResult:
    if not dataset:
        raise DataError("training needs at least one pair")
    if not traj.circles:
        raise DataError("training needs a circle trajectory to undersample")
    rng = np.random.default_rng(cfg.seed)
    dtype = cfg.torch_dtype
    model.to(dtype)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
    dcfs = _DcfCache(traj)
    maps = model.maps
    steps_per_epoch = cfg.steps_per_epoch or len(dataset)
    trace: List[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            pair = dataset[int(rng.integers(len(dataset)))]
            if cfg.augment.enabled:
                pair = augment(pair, int(rng.integers(2**31)), cfg.augment, traj, maps)
            af = feasible_af(traj, float(rng.uniform(*cfg.af_range)))
            kept = undersample_indices(traj, af, int(rng.integers(2**31)))
            sub, dcf = dcfs.get(kept)
            samples = pair.k_fs.data[:, traj.sample_indices(kept), 0]
            x1, k1 = gridding_input(samples, sub, dcf, maps)
            norm = normalize_unit(x1, (k1.data, pair.x_gt))
            k1n, gtn = norm.companions
            pred = model(to_tensor(norm.input.data, dtype)[None], to_tensor(k1n, dtype)[None])
            loss = mse_ssim_loss(pred, to_tensor(gtn.data, dtype)[None], **(ssim_kwargs or {}))
            value = float(loss)
            if not math.isfinite(value):
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch} step {step} (pair {pair.source!r}, af {af:.3f})"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            m.training_steps_total.inc()
            total += value
            step += 1
        trace.append(total / steps_per_epoch)
        m.training_loss_last.set(trace[-1])
        log.debug("epoch %d: mean loss %.6g", epoch, trace[-1])
    log.info("trained %d steps over %d epochs, final loss %.6g", step, cfg.epochs, trace[-1])
    return TrainResult(model, trace, step)


def write_loss_csv(path, trace: Sequence[float]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
