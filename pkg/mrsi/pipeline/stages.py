"""
Pipeline stages behind the CLI commands.

Each stage reads its upstream artifacts from the output directory, fails with a
MissingArtifactError when one is absent, and writes its own dataset directory:

    trajectory/      full trajectory, undersampling.json
    simulated/       k-space, truth series, coil maps, B0, calibration region
    preprocessed/    ESPIRiT maps, B0 estimate, lipid mask, water-removed k-space
    model/           network checkpoint and loss trace
    recon_tgv/afN/   TGV-ER and iNUFT reconstructions
    recon_net/afN/   network reconstruction
    metrics/         metrics.csv, resolution.json, metabolite maps
    report/          PGM slices, metrics.csv, summary.md, manifest.json
    timings/         per-command step timings and a Prometheus snapshot
"""
import csv
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter
from typing import Dict, List, Tuple

import numpy as np
from prometheus_client import REGISTRY, write_to_textfile

from mrsi.errors import MissingArtifactError
from mrsi.pipeline import metrics as m
from mrsi.pipeline.core import CoilKSpaceSeries, ComplexVolume, GriddedKSpace, GridSpec, ImageTimeSeries
from mrsi.pipeline.encoding import (
    B0Map,
    EncodingOperator,
    SensitivityMaps,
    b0_apply,
    b0_estimate,
    espirit_maps,
    inuft_baseline,
)
from mrsi.pipeline.interlacer import InterlacerModel, load_checkpoint, network_forward, save_checkpoint
from mrsi.pipeline.nuisance import (
    LipidMask,
    lipid_l2_suppress,
    lipid_mask_estimate,
    low_rank_denoise,
    metabolite_map,
    water_remove_samples,
)
from mrsi.pipeline.phantom import PhantomSpec, sector_modulation, simulate_experiment
from mrsi.pipeline.quality import ScoreRow, score
from mrsi.pipeline.report import read_metrics_csv, summary_markdown, write_manifest, write_metrics_csv, write_slices
from mrsi.pipeline.storage import Dataset, DatasetStore
from mrsi.pipeline.tgv import tgv_er_solve, write_trace_csv
from mrsi.pipeline.training import build_training_pairs, seed_everything, train, write_loss_csv
from mrsi.pipeline.trajectory import (
    Trajectory,
    generate_eccentric,
    hamming_weights,
    load_trajectory,
    save_trajectory,
    select_circles,
    undersample_indices,
    voronoi_dcf,
)
from mrsi.settings import PipelineConfig, Settings
from mrsi.utils.tracing import stage

log = logging.getLogger("mrsi.stages")

TRAJECTORY = "trajectory"
SIMULATED = "simulated"
PREPROCESSED = "preprocessed"
MODEL = "model"
RECON_TGV = "recon_tgv"
RECON_NET = "recon_net"
METRICS = "metrics"
REPORT = "report"
TIMINGS = "timings"
UNDERSAMPLING = "undersampling.json"


def af_label(af: float) -> str:
    return "af" + f"{af:g}".replace(".", "p")


class StepTimer:
    """Wall-clock per step, traced and counted, flushed to timings/<command>.csv."""

    def __init__(self, command: str, out: Path):
        self.command = command
        self.out = Path(out)
        self.rows: List[Tuple[str, float]] = []

    @contextmanager
    def step(self, name: str):
        t0 = perf_counter()
        ok = False
        with stage(name) as span:
            span.set_attribute("command", self.command)
            try:
                yield span
                ok = True
            finally:
                dt = perf_counter() - t0
                self.rows.append((name, dt))
                m.observe_stage(name, dt, ok)

    def write(self) -> Path:
        d = self.out / TIMINGS
        d.mkdir(parents=True, exist_ok=True)
        p = d / f"{self.command}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "seconds"])
            for name, dt in self.rows:
                w.writerow([name, f"{dt:.6f}"])
        write_to_textfile(str(d / "metrics.prom"), REGISTRY)
        return p


@dataclass
class StageContext:
    cfg: PipelineConfig
    settings: Settings
    out: Path
    timer: StepTimer
    _cache: Dict[str, object] = field(default_factory=dict)

    @property
    def grid(self) -> GridSpec:
        return self.cfg.grid

    @property
    def image_grid(self) -> GridSpec:
        return self.cfg.grid.with_(n_time=1)

    def store(self, *parts: str) -> DatasetStore:
        return DatasetStore(self.out.joinpath(*parts))

    def trajectory(self) -> Trajectory:
        if "traj" not in self._cache:
            self._cache["traj"] = load_trajectory(self.out / TRAJECTORY)
        return self._cache["traj"]  # type: ignore[return-value]

    def kept(self, af: float) -> np.ndarray:
        doc = self.store(TRAJECTORY).read_json(UNDERSAMPLING)
        key = af_label(af)
        if key not in doc["kept"]:
            raise MissingArtifactError(f"no undersampling pattern for AF {af:g}; rerun gen-traj")
        return np.asarray(doc["kept"][key], dtype=np.int64)

    def subsample(self, af: float, data: np.ndarray) -> Tuple[Trajectory, CoilKSpaceSeries]:
        traj = self.trajectory()
        kept = self.kept(af)
        sub = select_circles(traj, kept, af)
        return sub, CoilKSpaceSeries(self.grid, sub.coords, data[:, traj.sample_indices(kept)])

    def preprocessed(self) -> Tuple[SensitivityMaps, B0Map, LipidMask, np.ndarray]:
        ds = self.store(PREPROCESSED).load(["maps", "b0", "lipid_mask", "metabolite_ws"])
        g = self.image_grid
        maps = SensitivityMaps(g, ds.get("maps"))
        return maps, B0Map(g, ds.get("b0")), LipidMask(g, ds.get("lipid_mask")), ds.get("metabolite_ws")


def _undersampling_seed(seed: int, af: float) -> int:
    return int(np.random.SeedSequence([int(seed), int(round(af * 1000))]).generate_state(1)[0])


def gen_traj(ctx: StageContext) -> Trajectory:
    with ctx.timer.step("generate"):
        traj = generate_eccentric(ctx.grid, ctx.cfg.trajectory.radius_fraction, ctx.cfg.seed)
    with ctx.timer.step("undersample"):
        kept = {
            af_label(af): undersample_indices(traj, af, _undersampling_seed(ctx.cfg.seed, af)).tolist()
            for af in ctx.cfg.trajectory.afs
        }
    save_trajectory(ctx.out / TRAJECTORY, traj)
    ctx.store(TRAJECTORY).write_json(UNDERSAMPLING, {"seed": ctx.cfg.seed, "kept": kept})
    m.trajectory_samples_total.labels(kind="full").inc(traj.n_samples)
    log.info("trajectory: %d circles, %d samples, %d cross the center",
             len(traj.circles), traj.n_samples, traj.n_center_crossing())
    return traj


def simulate(ctx: StageContext) -> None:
    traj = ctx.trajectory()
    calib_shape = ctx.cfg.espirit.calib_shape
    with ctx.timer.step("simulate"):
        exp = simulate_experiment(ctx.cfg.phantom, ctx.grid, traj, ctx.cfg.seed + 1, calib_shape)
    ds = Dataset(ctx.grid, attrs={"noise_sigma": exp.noise_sigma, "calib_shape": list(exp.calib.data.shape[1:])})
    ds.add("water_k", exp.water.data, ("coil", "sample", "time"))
    ds.add("metabolite_k", exp.metabolite.data, ("coil", "sample", "time"))
    ds.add("water_truth", exp.water_truth.data, ("x", "y", "z", "time"))
    ds.add("metabolite_truth", exp.metabolite_truth.data, ("x", "y", "z", "time"))
    ds.add("phantom", exp.phantom.data.real, ("x", "y", "z"))
    ds.add("lipid_ring", exp.lipid_ring.data.real, ("x", "y", "z"))
    ds.add("maps_true", exp.maps.data, ("coil", "x", "y", "z"))
    ds.add("b0_true", exp.b0.df, ("x", "y", "z"))
    ds.add("calib", exp.calib.data, ("coil", "cx", "cy", "cz"))
    store = ctx.store(SIMULATED)
    store.save(ds)
    store.write_json("phantom.json", ctx.cfg.phantom.spec.model_dump())


def preprocess(ctx: StageContext) -> None:
    traj = ctx.trajectory()
    sim = ctx.store(SIMULATED).load(["water_k", "metabolite_k", "calib"])
    g1 = ctx.image_grid
    nz_cfg = ctx.cfg.nuisance
    es = ctx.cfg.espirit
    calib = sim.get("calib")
    cgrid = g1.with_(nx=calib.shape[1], ny=calib.shape[2], nz=calib.shape[3])
    with ctx.timer.step("dcf"):
        dcf = voronoi_dcf(traj)
    with ctx.timer.step("espirit"):
        maps = espirit_maps(GriddedKSpace(cgrid, calib), g1, es.kernel, es.tau_sv, es.tau_eig)
    with ctx.timer.step("b0"):
        water = CoilKSpaceSeries(ctx.grid, traj.coords, sim.get("water_k"))
        b0 = b0_estimate(inuft_baseline(water, traj, dcf, maps), nz_cfg.b0_n_fit)
    with ctx.timer.step("water_removal"):
        metab = CoilKSpaceSeries(ctx.grid, traj.coords, sim.get("metabolite_k"))
        metab_ws = water_remove_samples(metab, nz_cfg.band_hz, nz_cfg.hsvd_order)
    with ctx.timer.step("lipid_mask"):
        img = inuft_baseline(metab_ws, traj, dcf, maps, b0).data
        rms = np.sqrt(np.mean(np.abs(img) ** 2, axis=-1))
        mask = lipid_mask_estimate(ComplexVolume(g1, rms), nz_cfg.lipid_threshold, nz_cfg.erosion)
    ds = Dataset(ctx.grid, attrs={"lipid_voxels": mask.n_voxels})
    ds.add("maps", maps.data, ("coil", "x", "y", "z"))
    ds.add("b0", b0.df, ("x", "y", "z"))
    ds.add("lipid_mask", mask.mask, ("x", "y", "z"))
    ds.add("metabolite_ws", metab_ws.data, ("coil", "sample", "time"))
    ctx.store(PREPROCESSED).save(ds)


def recon_tgv(ctx: StageContext) -> None:
    maps, b0, mask, metab_ws = ctx.preprocessed()
    for af in ctx.cfg.trajectory.afs:
        sub, s = ctx.subsample(af, metab_ws)
        dcf = voronoi_dcf(sub)
        label = af_label(af)
        with ctx.timer.step(f"inuft_{label}"):
            baseline = inuft_baseline(s, sub, dcf, maps, b0)
        ops = EncodingOperator(sub, maps, b0, hamming_weights(sub), dcf)
        with ctx.timer.step(f"tgv_er_{label}"):
            res = tgv_er_solve(s, ops, mask, ctx.cfg.tgv, workers=ctx.settings.threads)
        ds = Dataset(ctx.grid, attrs={"af": af, "rank": res.factors.rank, "u_step": res.u_step})
        ds.add("metabolite", res.factors.to_series(ctx.grid), ("x", "y", "z", "time"))
        ds.add("baseline", baseline.data, ("x", "y", "z", "time"))
        ds.add("lipid", res.lipid.data.reshape(ctx.grid.shape + (ctx.grid.n_time,)), ("x", "y", "z", "time"))
        store = ctx.store(RECON_TGV, label)
        store.save(ds)
        write_trace_csv(store.path / "trace.csv", res.trace)


def train_net(ctx: StageContext) -> InterlacerModel:
    traj = ctx.trajectory()
    maps, _, _, _ = ctx.preprocessed()
    sim = ctx.store(SIMULATED).load(["water_k"])
    water = CoilKSpaceSeries(ctx.grid, traj.coords, sim.get("water_k"))
    tc = ctx.cfg.train
    seed_everything(ctx.cfg.seed + tc.seed, ctx.settings.threads)
    with ctx.timer.step("training_pairs"):
        pairs = build_training_pairs(water, traj, maps, ctx.cfg.tgv, tc.timepoints, source="water/")
    model = InterlacerModel(ctx.cfg.interlacer, maps)
    with ctx.timer.step("train"):
        result = train(model, pairs, tc, traj, ctx.cfg.metrics.ssim_kwargs())
    save_checkpoint(result.model, ctx.out / MODEL, train=tc.model_dump(mode="json"))
    write_loss_csv(ctx.out / MODEL / "loss.csv", result.loss_trace)
    return result.model


def recon_net(ctx: StageContext) -> None:
    maps, b0, mask, metab_ws = ctx.preprocessed()
    seed_everything(ctx.cfg.seed, ctx.settings.threads)
    model = load_checkpoint(ctx.out / MODEL, maps)
    beta = ctx.cfg.nuisance.beta
    for af in ctx.cfg.trajectory.afs:
        sub, s = ctx.subsample(af, metab_ws)
        dcf = voronoi_dcf(sub)
        label = af_label(af)
        with ctx.timer.step(f"interlacer_{label}"):
            vols = []
            for t in range(ctx.grid.n_time):
                t0 = perf_counter()
                vols.append(network_forward(model, s.data[..., t], sub, dcf).data)
                m.inference_seconds.observe(perf_counter() - t0)
            series = b0_apply(ImageTimeSeries(ctx.grid, np.stack(vols, axis=-1)), b0, -1)
        with ctx.timer.step(f"postprocess_{label}"):
            if mask.n_voxels and beta > 0:
                series = lipid_l2_suppress(series, mask, beta)
            series = low_rank_denoise(series, min(ctx.cfg.tgv.rank, ctx.grid.n_time))
        ds = Dataset(ctx.grid, attrs={"af": af})
        ds.add("metabolite", series.data, ("x", "y", "z", "time"))
        ctx.store(RECON_NET, af_label(af)).save(ds)


METHODS = (("inuft", RECON_TGV, "baseline"), ("tgv_er", RECON_TGV, "metabolite"), ("interlacer", RECON_NET, "metabolite"))


def score_all(ctx: StageContext) -> List[ScoreRow]:
    band = ctx.cfg.metrics.metabolite_band_hz
    kw = ctx.cfg.metrics.ssim_kwargs()
    truth = ctx.store(SIMULATED).load(["metabolite_truth"]).get("metabolite_truth")
    truth_map = metabolite_map(ImageTimeSeries(ctx.grid, truth), band)
    spec = PhantomSpec.model_validate(ctx.store(SIMULATED).read_json("phantom.json"))
    maps_ds = Dataset(ctx.image_grid)
    maps_ds.add("truth", truth_map, ("x", "y", "z"))
    rows: List[ScoreRow] = []
    resolution: Dict[str, Dict[str, float]] = {}
    with ctx.timer.step("score"):
        for af in ctx.cfg.trajectory.afs:
            label = af_label(af)
            est = {}
            for method, where, name in METHODS:
                series = ctx.store(where, label).load([name]).get(name)
                est[method] = metabolite_map(ImageTimeSeries(ctx.grid, series), band)
                rows.append(score(method, af, est[method], truth_map, kw))
                maps_ds.add(f"{method}_{label}", est[method], ("x", "y", "z"))
                if af == 1:
                    resolution[method] = {
                        f"{d:g}mm": sector_modulation(est[method], spec, ctx.grid, d)
                        for d in ctx.cfg.metrics.tube_diameters
                    }
            rows.append(score("tgv_er_vs_interlacer", af, est["tgv_er"], est["interlacer"], kw))
        resolution["truth"] = {
            f"{d:g}mm": sector_modulation(truth_map, spec, ctx.grid, d) for d in ctx.cfg.metrics.tube_diameters
        }
    store = ctx.store(METRICS)
    store.save(maps_ds)
    write_metrics_csv(store.path / "metrics.csv", rows)
    store.write_json("resolution.json", resolution)
    return rows


def _timing_seconds(out: Path, command: str, prefix: str) -> float:
    p = out / TIMINGS / f"{command}.csv"
    if not p.is_file():
        return float("nan")
    with open(p, newline="") as fh:
        return sum(float(r["seconds"]) for r in csv.DictReader(fh) if r["step"].startswith(prefix))


def report(ctx: StageContext) -> Dict[str, str]:
    store = ctx.store(METRICS)
    rows = read_metrics_csv(store.path / "metrics.csv")
    resolution = store.read_json("resolution.json")
    maps_ds = store.load()
    out = ctx.out / REPORT
    out.mkdir(parents=True, exist_ok=True)
    with ctx.timer.step("render"):
        truth = maps_ds.get("truth")
        peak = float(np.max(np.abs(truth)))
        for name in sorted(maps_ds.arrays):
            write_slices(out, name, maps_ds.get(name), peak)
        write_metrics_csv(out / "metrics.csv", rows)
        extra = {
            f"sector modulation {meth}": ", ".join(f"{k} {v:.3f}" for k, v in sorted(vals.items()))
            for meth, vals in sorted(resolution.items())
        }
        (out / "summary.md").write_text(summary_markdown(rows, extra), encoding="utf-8")
    tgv_s = _timing_seconds(ctx.out, "recon-tgv", "tgv_er_")
    net_s = _timing_seconds(ctx.out, "recon-net", "interlacer_")
    speed = ctx.out / TIMINGS / "speed.csv"
    speed.parent.mkdir(parents=True, exist_ok=True)
    with open(speed, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tgv_er_seconds", "interlacer_seconds", "ratio"])
        w.writerow([f"{tgv_s:.6f}", f"{net_s:.6f}", f"{tgv_s / net_s:.3f}" if net_s > 0 else "nan"])
    log.info("reconstruction wall-clock: TGV-ER %.3f s, network %.3f s", tgv_s, net_s)
    return write_manifest(ctx.out)


STAGES = {
    "gen-traj": gen_traj,
    "simulate": simulate,
    "preprocess": preprocess,
    "recon-tgv": recon_tgv,
    "train": train_net,
    "recon-net": recon_net,
    "metrics": score_all,
    "report": report,
}
