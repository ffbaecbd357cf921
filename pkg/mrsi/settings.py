import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from mrsi.errors import ConfigError
from mrsi.pipeline.core import GridSpec
from mrsi.pipeline.interlacer import InterlacerConfig
from mrsi.pipeline.phantom import PhantomConfig
from mrsi.pipeline.tgv import TgvConfig
from mrsi.pipeline.training import TrainConfig

TOY_CONFIG = Path(__file__).resolve().parent / "configs" / "toy.json"


def _getenv(*names, default=None):
    for n in names:
        val = os.getenv(n)
        if val not in (None, ""):
            return val
    return default


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class TrajectoryConfig(_Section):
    radius_fraction: float = Field(0.125, gt=0, le=0.5)  # circle radius / kmax
    afs: List[float] = [1.0, 2.0, 3.0, 4.0, 5.0]

    @field_validator("afs")
    @classmethod
    def _afs(cls, v):
        if not v or any(a < 1 for a in v):
            raise ValueError("afs must be a non-empty list of values >= 1")
        return v


class EspiritConfig(_Section):
    kernel: Tuple[int, int, int] = (6, 6, 3)
    calib_shape: Tuple[int, int, int] = (22, 22, 11)
    tau_sv: float = Field(0.01, gt=0, lt=1)
    tau_eig: float = Field(0.9, ge=0, le=1)


class NuisanceConfig(_Section):
    hsvd_order: int = Field(16, ge=1)
    band_hz: Tuple[float, float] = (-150.0, 150.0)
    lipid_threshold: float = Field(0.1, gt=0, lt=1)
    erosion: int = Field(1, ge=0)
    beta: float = Field(1.0, ge=0)  # L2 lipid suppression weight
    b0_n_fit: int = Field(10, ge=2)


class MetricsConfig(_Section):
    ssim_window: int = Field(11, ge=1)
    ssim_sigma: float = Field(1.5, gt=0)
    k1: float = Field(0.01, gt=0)
    k2: float = Field(0.03, gt=0)
    metabolite_band_hz: Tuple[float, float] = (-600.0, -400.0)
    tube_diameters: List[float] = [2.0, 4.0]

    def ssim_kwargs(self) -> Dict[str, float]:
        return {"window": self.ssim_window, "sigma": self.ssim_sigma, "k1": self.k1, "k2": self.k2}


class PipelineConfig(_Section):
    grid: GridSpec
    trajectory: TrajectoryConfig = TrajectoryConfig()
    phantom: PhantomConfig = PhantomConfig()
    espirit: EspiritConfig = EspiritConfig()
    nuisance: NuisanceConfig = NuisanceConfig()
    tgv: TgvConfig = TgvConfig()
    interlacer: InterlacerConfig = InterlacerConfig()
    train: TrainConfig = TrainConfig()
    metrics: MetricsConfig = MetricsConfig()
    seed: int = 0
    output_dir: str = "out"


def _field_path(err: dict) -> str:
    return ".".join(str(p) for p in err.get("loc", ())) or "<root>"


def load_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Read a JSON experiment config; `overrides` replace top-level keys (seed, output_dir)."""
    p = Path(path) if path else TOY_CONFIG
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {p}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(f"{p}: {_field_path(first)}: {first['msg']}") from e


class Settings(BaseModel):
    log_level: Literal["error", "info", "debug"] = "info"
    threads: int = Field(1, ge=1)
    otlp_endpoint: Optional[str] = None


def load_settings(threads: Optional[int] = None) -> Settings:
    load_dotenv(override=False)
    level = _getenv("MRSI_LOG", default="info").lower()
    try:
        return Settings(
            log_level=level,
            threads=threads if threads is not None else int(_getenv("MRSI_THREADS", default="1")),
            otlp_endpoint=_getenv("OTEL_EXPORTER_OTLP_ENDPOINT"),
        )
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid environment settings: {e}") from e
