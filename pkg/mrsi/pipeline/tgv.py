"""
TGV-regularized reconstruction.

`tgv2_solve` runs Chambolle-Pock on

    min_{u,w} 1/2 ||u - y||^2 + lam * (alpha1 ||grad u - w||_1 + alpha0 ||E w||_1)

where E is the symmetrized gradient of the vector field w. It keeps the best
primal iterate, so the reported energy never increases.

`tgv_er_solve` fits s ~ W F C B (U V + L) with TGV on every spatial component
of U by alternating a proximal-gradient U step, an exact least-squares V step
and a masked gradient L step. Every block update is accepted only when the
objective does not increase.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from mrsi.errors import DataError, DimensionMismatchError, DivergenceError, NonFiniteError
from mrsi.pipeline import metrics as m
from mrsi.pipeline.core import CoilKSpaceSeries, ComplexVolume, GridSpec
from mrsi.pipeline.encoding import EncodingOperator, inuft_baseline
from mrsi.pipeline.nuisance import LipidMask
from mrsi.pipeline.trajectory import SampleWeights

log = logging.getLogger("mrsi.tgv")

NORM_SAFETY = 1.1
W_ITERS = 200


class TgvConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    lam: float = Field(default=3e-4, ge=0, alias="lambda")
    rank: int = Field(default=40, ge=1)
    outer_iters: int = Field(default=30, ge=1)
    pd_iters: int = Field(default=50, ge=1)
    alpha1: float = Field(default=1.0, gt=0)
    alpha0: float = Field(default=2.0, gt=0)
    power_iters: int = Field(default=20, ge=1)
    u_step: Optional[float] = Field(default=None, gt=0)
    l_step: Optional[float] = Field(default=None, gt=0)
    backtracks: int = Field(default=6, ge=0)
    divergence_patience: int = Field(default=3, ge=1)
    rel_tol: float = Field(default=1e-8, ge=0)


# finite differences, Neumann boundary


def _d(u: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(u)
    src, dst = np.moveaxis(u, axis, 0), np.moveaxis(out, axis, 0)
    dst[:-1] = src[1:] - src[:-1]
    return out


def _dt(p: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(p)
    src, dst = np.moveaxis(p, axis, 0), np.moveaxis(out, axis, 0)
    if src.shape[0] > 1:
        dst[:-1] -= src[:-1]
        dst[1:] += src[:-1]
    return out


def grad(u: np.ndarray) -> np.ndarray:
    return np.stack([_d(u, a) for a in range(u.ndim)])


def grad_adj(p: np.ndarray) -> np.ndarray:
    return sum(_dt(p[a], a) for a in range(p.shape[0]))


def sym_grad(w: np.ndarray) -> np.ndarray:
    n = w.shape[0]
    jac = np.stack([np.stack([_d(w[a], b) for b in range(n)]) for a in range(n)])
    return 0.5 * (jac + np.swapaxes(jac, 0, 1))


def sym_grad_adj(q: np.ndarray) -> np.ndarray:
    n = q.shape[0]
    sym = 0.5 * (q + np.swapaxes(q, 0, 1))
    return np.stack([sum(_dt(sym[a, b], b) for b in range(n)) for a in range(n)])


def _pointwise_norm(v: np.ndarray, n_lead: int) -> np.ndarray:
    return np.sqrt(np.sum(v**2, axis=tuple(range(n_lead))))


def _project(v: np.ndarray, radius: float, n_lead: int) -> np.ndarray:
    scale = np.maximum(1.0, _pointwise_norm(v, n_lead) / radius)
    return v / scale


def _tgv_term(u: np.ndarray, w: np.ndarray, alpha1: float, alpha0: float) -> float:
    return alpha1 * float(np.sum(_pointwise_norm(grad(u) - w, 1))) + alpha0 * float(
        np.sum(_pointwise_norm(sym_grad(w), 2))
    )


def tgv_aux_field(u: np.ndarray, alpha1: float, alpha0: float, iters: int = W_ITERS) -> np.ndarray:
    """Primal-dual minimization of alpha1 |grad u - w|_1 + alpha0 |E w|_1 over w alone.

    Starts at w = 0 and returns the best iterate, so the value never exceeds alpha1 TV(u).
    """
    g = grad(u)
    w = np.zeros_like(g)
    best_w, best = w, _tgv_term(u, w, alpha1, alpha0)
    if best == 0.0:
        return best_w
    step = 1.0 / (NORM_SAFETY * tgv_operator_norm(u.shape))
    p = np.zeros_like(g)
    q = np.zeros((u.ndim,) + g.shape)
    wb = w
    for _ in range(iters):
        p = _project(p + step * (g - wb), alpha1, 1)
        q = _project(q + step * sym_grad(wb), alpha0, 2)
        w_old = w
        w = w + step * (p - sym_grad_adj(q))
        wb = 2 * w - w_old
        value = _tgv_term(u, w, alpha1, alpha0)
        if value < best:
            best, best_w = value, w.copy()
    return best_w


def tgv_value_real(u: np.ndarray, w: Optional[np.ndarray], alpha1: float, alpha0: float) -> float:
    """TGV term at a given w; with w=None, w is minimized out."""
    if w is None:
        w = tgv_aux_field(u, alpha1, alpha0)
    return _tgv_term(u, w, alpha1, alpha0)


def tgv_value(u: np.ndarray, w: Optional[np.ndarray], alpha1: float, alpha0: float) -> float:
    """TGV term of u; complex volumes carry w as (2, 3, ...). w=None minimizes over w."""
    if np.iscomplexobj(u):
        wr = None if w is None else w[0]
        wi = None if w is None else w[1]
        return tgv_value_real(u.real, wr, alpha1, alpha0) + tgv_value_real(u.imag, wi, alpha1, alpha0)
    return tgv_value_real(u, w, alpha1, alpha0)


@lru_cache(maxsize=32)
def tgv_operator_norm(shape: Tuple[int, ...], iterations: int = 20) -> float:
    """Power-iteration estimate of ||K|| for K(u, w) = (grad u - w, E w)."""
    rng = np.random.default_rng(0)
    u = rng.standard_normal(shape)
    w = rng.standard_normal((len(shape),) + shape)
    est = 0.0
    for _ in range(iterations):
        p, q = grad(u) - w, sym_grad(w)
        u, w = grad_adj(p), -p + sym_grad_adj(q)
        est = math.sqrt(float(np.sum(u**2) + np.sum(w**2)))
        if est == 0.0:
            break
        u, w = u / est, w / est
    return math.sqrt(est)


@dataclass
class TgvResult:
    u: np.ndarray
    w: np.ndarray
    energy_trace: List[float] = field(default_factory=list)

    @property
    def energy(self) -> float:
        return self.energy_trace[-1] if self.energy_trace else 0.0


def _energy(u, w, y, lam, a1, a0) -> float:
    return 0.5 * float(np.sum((u - y) ** 2)) + lam * tgv_value_real(u, w, a1, a0)


def _tgv_real(y, lam, iters, a1, a0, u0=None, w0=None) -> TgvResult:
    shape = y.shape
    u = np.array(y if u0 is None else u0, dtype=np.float64)
    w = np.zeros((y.ndim,) + shape) if w0 is None else np.array(w0, dtype=np.float64)
    if lam == 0:
        return TgvResult(np.array(y, dtype=np.float64), np.zeros_like(w), [0.0])
    best_e = _energy(u, w, y, lam, a1, a0)
    best_u, best_w = u.copy(), w.copy()
    trace = [best_e]
    step = 1.0 / (NORM_SAFETY * tgv_operator_norm(shape))
    p = np.zeros_like(w)
    q = np.zeros((y.ndim,) + w.shape)
    ub, wb = u.copy(), w.copy()
    for _ in range(iters):
        p = _project(p + step * (grad(ub) - wb), lam * a1, 1)
        q = _project(q + step * sym_grad(wb), lam * a0, 2)
        u_old, w_old = u, w
        u = (u - step * grad_adj(p) + step * y) / (1.0 + step)
        w = w + step * (p - sym_grad_adj(q))
        ub, wb = 2 * u - u_old, 2 * w - w_old
        e = _energy(u, w, y, lam, a1, a0)
        if e < best_e:
            best_e, best_u, best_w = e, u.copy(), w.copy()
        trace.append(best_e)
    return TgvResult(best_u, best_w, trace)


def tgv2_solve(
    y: np.ndarray,
    lam: float,
    pd_iters: int = 50,
    alpha1: float = 1.0,
    alpha0: float = 2.0,
    u0: Optional[np.ndarray] = None,
    w0: Optional[np.ndarray] = None,
) -> TgvResult:
    """TGV denoising of a real or complex 3-D array; complex parts are solved independently."""
    if lam < 0:
        raise DataError(f"lambda must be >= 0, got {lam}")
    y = np.asarray(y)
    if y.ndim != 3:
        raise DimensionMismatchError(f"TGV expects a 3-D volume, got shape {y.shape}")
    if not np.iscomplexobj(y):
        return _tgv_real(y, lam, pd_iters, alpha1, alpha0, u0, w0)
    parts = []
    for i, part in enumerate((np.real, np.imag)):
        parts.append(
            _tgv_real(
                part(y), lam, pd_iters, alpha1, alpha0,
                None if u0 is None else part(u0),
                None if w0 is None else w0[i],
            )
        )
    re, im = parts
    trace = [a + b for a, b in zip(re.energy_trace, im.energy_trace)]
    return TgvResult(re.u + 1j * im.u, np.stack([re.w, im.w]), trace)


def tgv2_denoise(
    vol: Union[ComplexVolume, np.ndarray], lam: float, pd_iters: int = 50, alpha1: float = 1.0, alpha0: float = 2.0
) -> Union[ComplexVolume, np.ndarray]:
    if isinstance(vol, ComplexVolume):
        return ComplexVolume(vol.grid, tgv2_solve(vol.data, lam, pd_iters, alpha1, alpha0).u)
    return tgv2_solve(vol, lam, pd_iters, alpha1, alpha0).u


@dataclass(frozen=True, eq=False)
class LowRankFactors:
    """U (voxels, K), V (K, T) and, when produced by the solver, the TGV field w (K, 2, 3, x, y, z)."""

    U: np.ndarray
    V: np.ndarray
    w: Optional[np.ndarray] = None

    def __post_init__(self):
        U = np.array(self.U, dtype=np.complex128)
        V = np.array(self.V, dtype=np.complex128)
        if U.ndim != 2 or V.ndim != 2 or U.shape[1] != V.shape[0]:
            raise DimensionMismatchError(f"factor shapes {U.shape} and {V.shape} are inconsistent")
        if U.shape[1] > min(U.shape[0], V.shape[1]):
            raise DataError(f"rank {U.shape[1]} exceeds min(voxels, time) = {min(U.shape[0], V.shape[1])}")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            raise NonFiniteError("low-rank factors contain non-finite values")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "V", V)
        if self.w is not None:
            w = np.asarray(self.w, dtype=np.float64)
            if w.ndim != 6 or w.shape[:3] != (U.shape[1], 2, 3) or int(np.prod(w.shape[3:])) != U.shape[0]:
                raise DimensionMismatchError(f"TGV field shape {w.shape} does not match rank {U.shape[1]}")
            object.__setattr__(self, "w", w)

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def to_series(self, grid: GridSpec, lipid: Optional["LipidComponent"] = None) -> np.ndarray:
        x = self.U @ self.V
        if lipid is not None:
            x = x + lipid.data
        return x.reshape(grid.shape + (self.V.shape[1],))


@dataclass(frozen=True, eq=False)
class LipidComponent:
    mask: LipidMask
    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=np.complex128)
        if d.ndim != 2 or d.shape[0] != self.mask.grid.n_voxels:
            raise DimensionMismatchError(f"lipid component has shape {d.shape}, expected (voxels, T)")
        if np.any(d[~self.mask.mask.reshape(-1)] != 0):
            raise DataError("lipid component has support outside the lipid mask")
        object.__setattr__(self, "data", d)

    @classmethod
    def zeros(cls, mask: LipidMask, n_time: int) -> "LipidComponent":
        return cls(mask, np.zeros((mask.grid.n_voxels, n_time), dtype=np.complex128))


def _series(U, V, L, shape) -> np.ndarray:
    return (U @ V + L).reshape(shape)


def _samples(s: Union[CoilKSpaceSeries, np.ndarray]) -> np.ndarray:
    return s.data if isinstance(s, CoilKSpaceSeries) else np.asarray(s)


def objective_value(
    s: Union[CoilKSpaceSeries, np.ndarray],
    U: np.ndarray,
    V: np.ndarray,
    L: Optional[Union[LipidComponent, np.ndarray]],
    ops: EncodingOperator,
    cfg: TgvConfig,
    w: Optional[np.ndarray] = None,
) -> float:
    """||W (s - F C B (U V + L))||^2 + lam * sum_c TGV(U_c; w_c).

    Pass the solver's `LowRankFactors.w` to evaluate exactly what was minimized; without it
    each w_c is minimized out.
    """
    data = _samples(s)
    T = data.shape[-1]
    Lm = np.zeros((ops.grid.n_voxels, T)) if L is None else L.data if isinstance(L, LipidComponent) else L
    if U.shape[0] != ops.grid.n_voxels or V.shape[1] != T or Lm.shape != (ops.grid.n_voxels, T):
        raise DimensionMismatchError(
            f"factors U{U.shape} V{V.shape} L{Lm.shape} do not match {ops.grid.n_voxels} voxels x {T} timepoints"
        )
    resid = data * ops.w[:, None] - ops.forward(_series(U, V, Lm, ops.grid.shape + (T,)))
    value = float(np.sum(np.abs(resid) ** 2))
    if cfg.lam > 0:
        for c in range(U.shape[1]):
            uc = U[:, c].reshape(ops.grid.shape)
            value += cfg.lam * tgv_value(uc, None if w is None else w[c], cfg.alpha1, cfg.alpha0)
    return value


@dataclass
class TgvErResult:
    factors: LowRankFactors
    lipid: LipidComponent
    w: np.ndarray
    trace: List[float]
    scale: float
    u_step: float
    l_step: float


def _init_scale(s: CoilKSpaceSeries, ops: EncodingOperator) -> Tuple[np.ndarray, float]:
    dcf = ops.dcf if ops.dcf is not None else SampleWeights.ones(ops.traj.n_samples)
    x0 = inuft_baseline(s, ops.traj, dcf, ops.maps, ops.b0).data
    peak = float(np.max(np.abs(x0))) if x0.size else 0.0
    return x0, peak if peak > 0 else 1.0


class _Problem:
    """TGV-ER problem on data divided by `scale`, with lam divided by `scale` to match."""

    def __init__(self, ws: np.ndarray, ops: EncodingOperator, cfg: TgvConfig, workers: int, lam: float):
        self.ws = ws
        self.lam = lam
        self.ops = ops
        self.cfg = cfg
        self.shape = ops.grid.shape
        self.T = ws.shape[-1]
        self.workers = workers

    def residual(self, U, V, L) -> np.ndarray:
        return self.ws - self.ops.forward(_series(U, V, L, self.shape + (self.T,)))

    def objective(self, U, V, L, w) -> float:
        value = float(np.sum(np.abs(self.residual(U, V, L)) ** 2))
        if self.lam > 0:
            for c in range(U.shape[1]):
                value += self.lam * tgv_value(U[:, c].reshape(self.shape), w[c], self.cfg.alpha1, self.cfg.alpha0)
        return value

    def prox_columns(self, Y, U, w, lam_tau):
        if lam_tau == 0:
            return Y.copy(), w
        cfg = self.cfg

        def one(c):
            res = tgv2_solve(
                Y[:, c].reshape(self.shape), lam_tau, cfg.pd_iters, cfg.alpha1, cfg.alpha0,
                u0=U[:, c].reshape(self.shape), w0=w[c],
            )
            return res.u.reshape(-1), res.w

        cols = range(Y.shape[1])
        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                out = list(pool.map(one, cols))
        else:
            out = [one(c) for c in cols]
        return np.stack([o[0] for o in out], axis=1), np.stack([o[1] for o in out])

    def v_update(self, U, L) -> np.ndarray:
        K = U.shape[1]
        vols = np.moveaxis(U.reshape(self.shape + (K,)), -1, 0)
        target = self.ws - self.ops.forward(L.reshape(self.shape + (self.T,)))
        if self.ops.b0 is None:
            au = self.ops.forward_volumes(vols).reshape(K, -1).T
            sol, *_ = np.linalg.lstsq(au, target.reshape(-1, self.T), rcond=None)
            return sol
        V = np.zeros((K, self.T), dtype=np.complex128)
        for t in range(self.T):
            au = self.ops.forward_volumes(vols, np.full(K, t)).reshape(K, -1).T
            V[:, t], *_ = np.linalg.lstsq(au, target[..., t].reshape(-1), rcond=None)
        return V


def tgv_er_solve(
    s: CoilKSpaceSeries,
    ops: EncodingOperator,
    mask: LipidMask,
    cfg: TgvConfig,
    workers: int = 1,
) -> TgvErResult:
    T = s.grid.n_time
    n_vox = ops.grid.n_voxels
    K = cfg.rank
    if s.data.shape[:2] != (ops.maps.n_coils, ops.traj.n_samples):
        raise DimensionMismatchError(
            f"k-space shape {s.data.shape} does not match {ops.maps.n_coils} coils x {ops.traj.n_samples} samples"
        )
    if mask.grid.shape != ops.grid.shape:
        raise DimensionMismatchError("lipid mask grid does not match the encoding grid")
    if K > min(n_vox, T):
        raise DataError(f"rank K={K} exceeds min(voxels, timepoints) = {min(n_vox, T)}")

    x0, scale = _init_scale(s, ops)
    ws = s.data * ops.w[:, None] / scale
    u_, sv, vh = np.linalg.svd(x0.reshape(n_vox, T) / scale, full_matrices=False)
    U = u_[:, :K] * sv[:K]
    V = vh[:K].copy()
    L = np.zeros((n_vox, T), dtype=np.complex128)
    lmask = mask.mask.reshape(-1)
    w = np.zeros((K, 2, 3) + ops.grid.shape)

    norm2 = NORM_SAFETY * ops.norm_squared(cfg.power_iters)
    if norm2 == 0.0:
        raise DataError("encoding operator is identically zero")
    l_step = cfg.l_step or 1.0 / (2.0 * norm2)
    prob = _Problem(ws, ops, cfg, workers, cfg.lam / scale)
    obj = prob.objective(U, V, L, w)
    # objectives are reported in data units
    trace = [obj * scale**2]
    increases = 0
    u_step = cfg.u_step or 0.0
    log.info(
        "TGV-ER: K=%d lambda=%.3g, %d outer iterations, initial objective %.6g", K, cfg.lam, cfg.outer_iters, trace[0]
    )

    for it in range(cfg.outer_iters):
        prev = obj
        # U: proximal gradient, warm-started at the current iterate
        vnorm2 = float(np.linalg.norm(V, 2) ** 2)
        if vnorm2 > 0:
            tau = cfg.u_step or 1.0 / (2.0 * norm2 * vnorm2)
            g = prob.ops.adjoint(prob.residual(U, V, L)).reshape(n_vox, T) @ np.conj(V).T
            for _ in range(cfg.backtracks + 1):
                Un, wn = prob.prox_columns(U + 2.0 * tau * g, U, w, prob.lam * tau)
                cand = prob.objective(Un, V, L, wn)
                if cand <= obj:
                    U, w, obj = Un, wn, cand
                    break
                tau *= 0.5
            u_step = tau
        # V: exact least squares per timepoint
        Vn = prob.v_update(U, L)
        cand = prob.objective(U, Vn, L, w)
        if cand <= obj:
            V, obj = Vn, cand
        # L: masked gradient step
        if lmask.any():
            tau_l = l_step
            g = prob.ops.adjoint(prob.residual(U, V, L)).reshape(n_vox, T)
            for _ in range(cfg.backtracks + 1):
                Ln = np.where(lmask[:, None], L + 2.0 * tau_l * g, 0)
                cand = prob.objective(U, V, Ln, w)
                if cand <= obj:
                    L, obj = Ln, cand
                    break
                tau_l *= 0.5
        if not np.isfinite(obj):
            raise NonFiniteError(f"TGV-ER objective became non-finite at outer iteration {it}")
        trace.append(obj * scale**2)
        m.solver_iterations_total.labels(solver="tgv_er").inc()
        if obj > prev * (1 + cfg.rel_tol):
            increases += 1
            if increases >= cfg.divergence_patience:
                m.solver_divergence_total.labels(solver="tgv_er").inc()
                raise DivergenceError(
                    f"TGV-ER objective increased for {increases} consecutive iterations "
                    f"(u_step={u_step:.3g}, l_step={l_step:.3g}, "
                    f"objective {prev * scale**2:.6g} -> {obj * scale**2:.6g})"
                )
        else:
            increases = 0
        log.debug("TGV-ER iteration %d: objective %.8g", it, trace[-1])

    factors = LowRankFactors(U * scale, V, w * scale)
    lipid = LipidComponent(mask, L * scale)
    return TgvErResult(factors, lipid, w * scale, trace, scale, u_step, l_step)


def tgv_er_reconstruct(
    s: CoilKSpaceSeries, ops: EncodingOperator, mask: LipidMask, cfg: TgvConfig
) -> Tuple[LowRankFactors, LipidComponent]:
    """Factors (carrying their TGV field w) and the lipid component."""
    res = tgv_er_solve(s, ops, mask, cfg)
    return res.factors, res.lipid


def water_reconstruct_per_timepoint(s_t: CoilKSpaceSeries, ops: EncodingOperator, cfg: TgvConfig) -> ComplexVolume:
    """min_x ||W (s_t - F C x)||^2 + lam TGV(x), one timepoint."""
    if s_t.grid.n_time != 1:
        raise DimensionMismatchError(f"expected a single timepoint, got {s_t.grid.n_time}")
    op = EncodingOperator(ops.traj, ops.maps, None, ops.weights, ops.dcf)
    x0, scale = _init_scale(s_t, op)
    ws = s_t.data[..., 0] * op.w / scale
    x = x0[..., 0] / scale
    lam = cfg.lam / scale
    w = np.zeros((2, 3) + op.grid.shape)
    if not np.any(ws):
        return ComplexVolume(op.grid, np.zeros(op.grid.shape))
    norm2 = NORM_SAFETY * op.norm_squared(cfg.power_iters)
    if norm2 == 0.0:
        raise DataError("encoding operator is identically zero")

    def objective(x_, w_):
        r = ws - op.forward_volumes(x_[None])[0]
        value = float(np.sum(np.abs(r) ** 2))
        return value + lam * tgv_value(x_, w_, cfg.alpha1, cfg.alpha0) if lam > 0 else value

    obj = objective(x, w)
    for _ in range(cfg.outer_iters):
        tau = cfg.u_step or 1.0 / (2.0 * norm2)
        g = op.adjoint_volumes((ws - op.forward_volumes(x[None])[0])[None])[0]
        for _ in range(cfg.backtracks + 1):
            y = x + 2.0 * tau * g
            if lam > 0:
                res = tgv2_solve(y, lam * tau, cfg.pd_iters, cfg.alpha1, cfg.alpha0, u0=x, w0=w)
                xn, wn = res.u, res.w
            else:
                xn, wn = y, w
            cand = objective(xn, wn)
            if cand <= obj:
                x, w, obj = xn, wn, cand
                break
            tau *= 0.5
        m.solver_iterations_total.labels(solver="water").inc()
    return ComplexVolume(op.grid, x * scale)


def write_trace_csv(path, trace: List[float]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["iteration", "objective"])
        for i, v in enumerate(trace):
            out.writerow([i, repr(float(v))])
