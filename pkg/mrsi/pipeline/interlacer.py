"""
Joint image/k-space network for single-timepoint water reconstruction.

Complex tensors are carried as concatenated real and imaginary channels:
images as (B, 2, X, Y, Z), multi-coil spectra as (B, 2C, X, Y, Z). Each layer
mixes the two streams through the coil maps, convolves both branches and adds
the result back to its inputs; a final residual convolution on the k-space
stream precedes the inverse FFT and coil combination.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import fastjsonschema
import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from torch import nn

from mrsi.errors import (
    DataError,
    DimensionMismatchError,
    FormatVersionError,
    MissingArtifactError,
    NonFiniteError,
    TruncatedPayloadError,
)
from mrsi.pipeline.core import CoilKSpaceSeries, ComplexVolume, GriddedKSpace, GridSpec, fft3c
from mrsi.pipeline.encoding import SensitivityMaps, combine_array, inuft
from mrsi.pipeline.trajectory import SampleWeights, Trajectory
from mrsi.utils.jcs import write_canonical

log = logging.getLogger("mrsi.interlacer")

KERNEL = 3
CHECKPOINT_VERSION = 1
MAG_EPS = 1e-12
SPATIAL = (-3, -2, -1)

_SCHEMA = Path(__file__).resolve().parent.parent / "schemas" / "types" / "model_checkpoint.v1.schema.json"
with open(_SCHEMA) as f:
    _validate_checkpoint = fastjsonschema.compile(json.load(f))


class InterlacerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_layers: int = Field(10, ge=1)
    image_features: Tuple[int, ...] = (2, 64, 2)
    kspace_filters: Optional[int] = Field(None, ge=1)  # None: two per coil
    bn_momentum: float = Field(0.1, gt=0, le=1)
    init: Literal["default", "zero"] = "default"

    @field_validator("image_features")
    @classmethod
    def _ends_complex(cls, v):
        if not v or v[-1] != 2 or any(c < 1 for c in v):
            raise ValueError("image_features must be positive and end with 2 (real, imag)")
        return v


def complex_dtype(dtype: torch.dtype) -> torch.dtype:
    return torch.complex128 if dtype == torch.float64 else torch.complex64


def to_tensor(arr: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.array(arr, dtype=np.complex128, order="C")).to(complex_dtype(dtype))


def to_channels(z: torch.Tensor) -> torch.Tensor:
    """(B, C, ...) complex -> (B, 2C, ...) real."""
    return torch.cat([z.real, z.imag], dim=1)


def from_channels(t: torch.Tensor, n: int) -> torch.Tensor:
    return torch.complex(t[:, :n], t[:, n:])


def fft3c_t(z: torch.Tensor) -> torch.Tensor:
    return torch.fft.fftshift(torch.fft.fftn(torch.fft.ifftshift(z, dim=SPATIAL), dim=SPATIAL, norm="ortho"), dim=SPATIAL)


def ifft3c_t(z: torch.Tensor) -> torch.Tensor:
    return torch.fft.fftshift(torch.fft.ifftn(torch.fft.ifftshift(z, dim=SPATIAL), dim=SPATIAL, norm="ortho"), dim=SPATIAL)


def mix(
    x: torch.Tensor,
    k: torch.Tensor,
    alpha: Union[float, torch.Tensor],
    beta: Union[float, torch.Tensor],
    maps: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Convex exchange between x (B, X, Y, Z) and k (B, C, X, Y, Z) through coil maps (C, X, Y, Z)."""
    k_from_x = fft3c_t(maps[None] * x[:, None])
    x_from_k = torch.sum(torch.conj(maps)[None] * ifft3c_t(k), dim=1)
    return beta * x + (1 - beta) * x_from_k, alpha * k_from_x + (1 - alpha) * k


class ThreePiece(nn.Module):
    """Identity on [-tau, tau], learnable slopes a (below) and b (above)."""

    def __init__(self, channels: int):
        super().__init__()
        self.a = nn.Parameter(torch.ones(channels))
        self.b = nn.Parameter(torch.ones(channels))
        self.t = nn.Parameter(torch.full((channels,), math.log(math.e - 1.0)))  # softplus(t) = 1

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        shape = (1, -1) + (1,) * (v.ndim - 2)
        tau = F.softplus(self.t).view(shape)
        a, b = self.a.view(shape), self.b.view(shape)
        inner = torch.maximum(torch.minimum(v, tau), -tau)
        return inner + b * F.relu(v - tau) - a * F.relu(-v - tau)


class ConvBlock(nn.Module):
    """conv -> BatchNorm -> activation"""

    def __init__(self, c_in: int, c_out: int, act: nn.Module, momentum: float):
        super().__init__()
        self.conv = nn.Conv3d(c_in, c_out, KERNEL, padding=KERNEL // 2)
        self.norm = nn.BatchNorm3d(c_out, momentum=momentum)
        self.act = act

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(v)))


class InterlacerLayer(nn.Module):
    def __init__(self, n_coils: int, cfg: InterlacerConfig):
        super().__init__()
        self.n_coils = n_coils
        kf = cfg.kspace_filters or 2 * n_coils
        # mixing weights are sigmoid(alpha), sigmoid(beta)
        self.alpha = nn.Parameter(torch.zeros(()))
        self.beta = nn.Parameter(torch.zeros(()))
        self.kspace = ConvBlock(2 * n_coils, kf, ThreePiece(kf), cfg.bn_momentum)
        self.kproj = nn.Conv3d(kf, 2 * n_coils, KERNEL, padding=KERNEL // 2) if kf != 2 * n_coils else None
        blocks, c_in = [], 2
        for c_out in cfg.image_features:
            blocks.append(ConvBlock(c_in, c_out, nn.ReLU(), cfg.bn_momentum))
            c_in = c_out
        self.image = nn.Sequential(*blocks)

    def increments(self, x: torch.Tensor, k: torch.Tensor, maps: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x_mix, k_mix = mix(x, k, torch.sigmoid(self.alpha), torch.sigmoid(self.beta), maps)
        dk = self.kspace(to_channels(k_mix))
        if self.kproj is not None:
            dk = self.kproj(dk)
        dx = self.image(to_channels(x_mix[:, None]))
        return from_channels(dx, 1)[:, 0], from_channels(dk, self.n_coils)

    def forward(self, x, k, maps):
        dx, dk = self.increments(x, k, maps)
        return residual_add(x, k, dx, dk)


def layer_forward(layer: InterlacerLayer, x: torch.Tensor, k: torch.Tensor, maps: torch.Tensor):
    return layer.increments(x, k, maps)


def residual_add(x, k, dx, dk):
    return x + dx, k + dk


class InterlacerModel(nn.Module):
    def __init__(self, cfg: InterlacerConfig, maps: SensitivityMaps):
        super().__init__()
        self.cfg = cfg
        self.n_coils = maps.n_coils
        self.layers = nn.ModuleList(InterlacerLayer(self.n_coils, cfg) for _ in range(cfg.n_layers))
        self.final = nn.Conv3d(2 * self.n_coils, 2 * self.n_coils, KERNEL, padding=KERNEL // 2)
        self.bind_maps(maps)
        if cfg.init == "zero":
            self.zero_increments_()

    @property
    def kspace_filters(self) -> int:
        return self.cfg.kspace_filters or 2 * self.n_coils

    def bind_maps(self, maps: SensitivityMaps) -> None:
        if maps.n_coils != self.n_coils:
            raise DimensionMismatchError(f"model has {self.n_coils} coils, maps have {maps.n_coils}")
        self.maps = maps
        self._maps = to_tensor(maps.data, torch.float64)

    def maps_tensor(self, like: torch.Tensor) -> torch.Tensor:
        return self._maps.to(like.dtype if like.is_complex() else complex_dtype(like.dtype))

    @torch.no_grad()
    def zero_increments_(self) -> "InterlacerModel":
        for mod in self.modules():
            if isinstance(mod, nn.Conv3d):
                mod.weight.zero_()
                mod.bias.zero_()
        return self

    def forward(self, x1: torch.Tensor, k1: torch.Tensor) -> torch.Tensor:
        """x1 (B, X, Y, Z), k1 (B, C, X, Y, Z), both complex; returns the combined image (B, X, Y, Z)."""
        maps = self.maps_tensor(x1)
        x, k = x1, k1
        for i, layer in enumerate(self.layers):
            x, k = layer(x, k, maps)
            if not (torch.isfinite(x).all() and torch.isfinite(k).all()):
                raise NonFiniteError(f"non-finite activations after layer {i}")
        k = k + from_channels(self.final(to_channels(k)), self.n_coils)
        return torch.sum(torch.conj(maps)[None] * ifft3c_t(k), dim=1)


def gridding_input(
    s_t: Union[CoilKSpaceSeries, np.ndarray], traj: Trajectory, dcf: SampleWeights, maps: SensitivityMaps
) -> Tuple[ComplexVolume, GriddedKSpace]:
    """iNUFT per coil; returns the coil-combined image and the per-coil Cartesian spectra."""
    if isinstance(s_t, CoilKSpaceSeries):
        if s_t.grid.n_time != 1:
            raise DataError(f"gridding input takes one timepoint, got {s_t.grid.n_time}")
        samples = s_t.data[..., 0]
    else:
        samples = np.asarray(s_t)
    if samples.ndim != 2 or samples.shape[0] != maps.n_coils:
        raise DimensionMismatchError(f"samples have shape {samples.shape}, expected ({maps.n_coils}, M)")
    coil = np.stack([inuft(samples[c], traj, dcf).data for c in range(maps.n_coils)])
    return ComplexVolume(maps.grid, combine_array(coil, maps)), GriddedKSpace(maps.grid, fft3c(coil))


def network_forward(
    model: InterlacerModel,
    s_t: Union[CoilKSpaceSeries, np.ndarray],
    traj: Trajectory,
    dcf: SampleWeights,
    normalize: bool = True,
) -> ComplexVolume:
    """Predict one volume; inputs are scaled to unit peak magnitude and the output scaled back."""
    x1, k1 = gridding_input(s_t, traj, dcf, model.maps)
    peak = float(np.max(np.abs(x1.data))) if normalize else 1.0
    if peak <= 0:
        return ComplexVolume(x1.grid, np.zeros(x1.grid.shape))
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        pred = model(to_tensor(x1.data / peak, dtype)[None], to_tensor(k1.data / peak, dtype)[None])[0]
    out = pred.to(torch.complex128).numpy() * peak
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("network prediction is not finite")
    return ComplexVolume(x1.grid, out)


def magnitude(z: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(z.real**2 + z.imag**2 + MAG_EPS)


def gaussian_window(window: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    r = window // 2
    g = torch.exp(-0.5 * (torch.arange(-r, r + 1, dtype=dtype) / sigma) ** 2)
    return g / g.sum()


def _blur(img: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Separable in-plane Gaussian with edge replication; img is (B, X, Y, Z)."""
    r = g.numel() // 2
    for dim in (1, 2):
        n = img.shape[dim]
        idx = torch.clamp(torch.arange(-r, n + r, device=img.device), 0, n - 1)
        padded = img.index_select(dim, idx)
        img = torch.movedim((torch.movedim(padded, dim, -1).unfold(-1, g.numel(), 1) * g).sum(-1), -1, dim)
    return img


def ssim_torch(
    a: torch.Tensor,
    b: torch.Tensor,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> torch.Tensor:
    """Mean SSIM of real (B, X, Y, Z) images, slice-wise in-plane."""
    g = gaussian_window(window, sigma, a.dtype).to(a.device)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _blur(a, g), _blur(b, g)
    s_aa = _blur(a * a, g) - mu_a**2
    s_bb = _blur(b * b, g) - mu_b**2
    s_ab = _blur(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return (num / den).mean()


def mse_ssim_loss(pred: torch.Tensor, gt: torch.Tensor, **ssim_kwargs) -> torch.Tensor:
    """mean|pred - gt|^2 + (1 - SSIM(|pred|, |gt|)) on complex (B, X, Y, Z) tensors."""
    if pred.shape != gt.shape:
        raise DimensionMismatchError(f"prediction {tuple(pred.shape)} vs target {tuple(gt.shape)}")
    mse = torch.mean(torch.abs(pred - gt) ** 2)
    return mse + (1.0 - ssim_torch(magnitude(pred), magnitude(gt), **ssim_kwargs))


def backward(model: nn.Module, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of loss for every named parameter."""
    if loss.grad_fn is None:
        raise DataError("loss has no recorded forward pass")
    model.zero_grad(set_to_none=True)
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


@dataclass(frozen=True)
class GradientProbe:
    name: str
    index: int
    analytic: float
    numeric: float

    def ok(self, rtol: float = 1e-3, atol: float = 1e-8) -> bool:
        err = abs(self.analytic - self.numeric)
        return err <= atol or err <= rtol * max(abs(self.analytic), abs(self.numeric))


def gradient_check(
    model: InterlacerModel,
    x1: torch.Tensor,
    k1: torch.Tensor,
    gt: torch.Tensor,
    h: float = 1e-6,
    probes: Optional[int] = None,
    seed: int = 0,
) -> List[GradientProbe]:
    """Central differences on every entry of every parameter tensor.

    With `probes`, only that many random entries per tensor are checked.
    """
    gen = torch.Generator().manual_seed(seed)

    def value() -> float:
        return float(mse_ssim_loss(model(x1, k1), gt))

    grads = backward(model, mse_ssim_loss(model(x1, k1), gt))
    out = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            if probes is None:
                picks = range(flat.numel())
            else:
                picks = torch.randperm(flat.numel(), generator=gen)[:probes].tolist()
            for i in picks:
                orig = float(flat[i])
                flat[i] = orig + h
                up = value()
                flat[i] = orig - h
                down = value()
                flat[i] = orig
                out.append(GradientProbe(name, i, float(grads[name].view(-1)[i]), (up - down) / (2 * h)))
    return out


def _checkpoint_tensors(model: InterlacerModel) -> List[Tuple[str, torch.Tensor]]:
    """Parameters, then floating-point buffers (BatchNorm running statistics)."""
    items = list(model.named_parameters())
    items += [(n, b) for n, b in model.named_buffers() if b.is_floating_point()]
    return items


def save_checkpoint(model: InterlacerModel, path, train: Optional[dict] = None) -> None:
    root = Path(path)
    os.makedirs(root, exist_ok=True)
    tensors, offset, chunks = [], 0, []
    for name, t in _checkpoint_tensors(model):
        arr = t.detach().to(torch.float64).numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    (root / "weights.bin").write_bytes(b"".join(chunks))
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": {
            "n_layers": model.cfg.n_layers,
            "n_coils": model.n_coils,
            "image_features": list(model.cfg.image_features),
            "kspace_filters": model.kspace_filters,
            "bn_momentum": model.cfg.bn_momentum,
        },
        "grid": model.maps.grid.model_dump(),
        "tensors": tensors,
        "train": train or {},
    }
    write_canonical(root / "model.json", meta)
    log.info("checkpoint written to %s (%d tensors, %d bytes)", root, len(tensors), offset)


def load_checkpoint(path, maps: SensitivityMaps) -> InterlacerModel:
    root = Path(path)
    meta_path, bin_path = root / "model.json", root / "weights.bin"
    if not meta_path.is_file() or not bin_path.is_file():
        raise MissingArtifactError(f"no checkpoint at {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if not isinstance(meta, dict) or meta.get("format_version") != CHECKPOINT_VERSION:
        raise FormatVersionError(f"{meta_path}: unsupported format_version")
    try:
        _validate_checkpoint(meta)
    except fastjsonschema.JsonSchemaException as e:
        raise DataError(f"{meta_path}: {e.message}") from e
    arch = meta["architecture"]
    try:
        grid = GridSpec(**meta["grid"])
        cfg = InterlacerConfig(
            n_layers=arch["n_layers"],
            image_features=tuple(arch["image_features"]),
            kspace_filters=arch["kspace_filters"],
            bn_momentum=arch.get("bn_momentum", 0.1),
        )
    except ValidationError as e:
        raise DataError(f"{meta_path}: {e.errors()[0]['msg']}") from e
    if arch["n_coils"] != maps.n_coils or grid.shape != maps.grid.shape:
        raise DimensionMismatchError(
            f"checkpoint expects {arch['n_coils']} coils on {grid.shape}, maps have {maps.n_coils} on {maps.grid.shape}"
        )
    model = InterlacerModel(cfg, maps)
    raw = bin_path.read_bytes()
    targets = dict(_checkpoint_tensors(model))
    with torch.no_grad():
        for entry in meta["tensors"]:
            name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
            if name not in targets:
                raise DataError(f"{meta_path}: unknown tensor {name}")
            if tuple(targets[name].shape) != shape:
                raise DimensionMismatchError(f"{name}: checkpoint shape {shape}, model {tuple(targets[name].shape)}")
            n = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * n > len(raw):
                raise TruncatedPayloadError(f"{bin_path}: tensor {name} runs past the end of the file")
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(shape)
            targets[name].copy_(torch.from_numpy(arr.copy()))
    return model
