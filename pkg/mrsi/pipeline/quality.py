"""
Image agreement metrics: NRMSE, SSIM, Pearson correlation and Bland-Altman.

Complex inputs are scored on magnitudes. SSIM is evaluated slice by slice
in-plane and averaged.
"""
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from mrsi.errors import DataError, DimensionMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(pred, ref):
    a, b = np.asarray(pred), np.asarray(ref)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    if np.iscomplexobj(a) or np.iscomplexobj(b):
        a, b = np.abs(a), np.abs(b)
    return a.astype(np.float64), b.astype(np.float64)


def nrmse(pred, ref) -> float:
    a, b = _pair(pred, ref)
    denom = float(np.linalg.norm(b))
    if denom == 0:
        raise DataError("nrmse: reference has zero norm")
    return float(np.linalg.norm(a - b)) / denom


def _gaussian(img: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    sig = (sigma, sigma) + (0.0,) * (img.ndim - 2)
    return ndimage.gaussian_filter(img, sig, mode="nearest", truncate=radius / sigma)


def ssim_map(pred, ref, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 1.0) -> np.ndarray:
    x, y = _pair(pred, ref)
    if x.ndim < 2:
        raise DimensionMismatchError(f"ssim needs at least 2-D images, got {x.ndim}-D")
    radius = window // 2
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _gaussian(x, sigma, radius), _gaussian(y, sigma, radius)
    sxx = _gaussian(x * x, sigma, radius) - mx * mx
    syy = _gaussian(y * y, sigma, radius) - my * my
    sxy = _gaussian(x * y, sigma, radius) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(pred, ref, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 1.0) -> float:
    return float(np.mean(ssim_map(pred, ref, window, sigma, k1, k2, data_range)))


def pearson_cc(a, b) -> float:
    x, y = _pair(a, b)
    x, y = x.reshape(-1), y.reshape(-1)
    if x.size < 2:
        raise DataError("pearson_cc needs at least two values")
    dx, dy = x - x.mean(), y - y.mean()
    vx, vy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if vx == 0 or vy == 0:
        raise DataError("pearson_cc: zero variance input")
    return float(np.clip(np.dot(dx, dy) / np.sqrt(vx * vy), -1.0, 1.0))


class BlandAltman(NamedTuple):
    bias: float
    loa_low: float
    loa_high: float


def bland_altman(a, b) -> BlandAltman:
    x, y = _pair(a, b)
    d = (x - y).reshape(-1)
    if d.size < 2:
        raise DataError("bland_altman needs at least two pairs")
    bias = float(d.mean())
    half = 1.96 * float(d.std(ddof=1))
    return BlandAltman(bias, bias - half, bias + half)


@dataclass
class ScoreRow:
    method: str
    af: float
    nrmse: float
    ssim: float
    cc: float
    bias: float
    loa_low: float
    loa_high: float

    def as_dict(self) -> dict:
        return asdict(self)


def score(method: str, af: float, pred, ref, ssim_kwargs: Optional[dict] = None) -> ScoreRow:
    """All four metrics of pred against ref; both are scaled by max|ref| first."""
    a, b = _pair(pred, ref)
    peak = float(b.max()) if b.size else 0.0
    if peak <= 0:
        raise DataError("score: reference is all zero")
    a, b = a / peak, b / peak
    ba = bland_altman(a, b)
    return ScoreRow(method, float(af), nrmse(a, b), ssim(a, b, **(ssim_kwargs or {})),
                    pearson_cc(a, b), ba.bias, ba.loa_low, ba.loa_high)
