"""
ECCENTRIC circle trajectories over a spherical stack of kz partitions.

Each partition is filled with circles of a fixed radius whose centers are drawn
uniformly in the disc that keeps the circle inside the partition's k-space extent.
Circles are appended until every Cartesian cell center in the partition disc lies
within one k-space cell (1/fov) of a sample.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import QhullError, Voronoi, cKDTree

from mrsi.errors import DataError, NumericalError
from mrsi.pipeline.core import GridSpec
from mrsi.pipeline.storage import Dataset, DatasetStore

log = logging.getLogger("mrsi.trajectory")

MAX_CIRCLES_PER_PARTITION = 100_000


@dataclass(frozen=True)
class EccentricCircle:
    partition_index: int
    center: Tuple[float, float]
    radius: float
    n_points: int
    crosses_center: bool

    def __post_init__(self):
        if not self.radius > 0:
            raise DataError(f"circle radius must be positive, got {self.radius}")
        if self.n_points < 1:
            raise DataError(f"circle needs at least one point, got {self.n_points}")
        if self.crosses_center != (math.hypot(*self.center) <= self.radius):
            raise DataError("crosses_center flag disagrees with |center| <= radius")

    @classmethod
    def make(cls, partition_index: int, center, radius: float, fov: float) -> "EccentricCircle":
        cx, cy = float(center[0]), float(center[1])
        rho = math.hypot(cx, cy)
        n_points = max(1, math.ceil(2 * math.pi * (rho + radius) * fov))
        return cls(partition_index, (cx, cy), float(radius), n_points, rho <= radius)

    def points(self) -> np.ndarray:
        """Samples uniformly spaced in angle, starting at the point nearest the origin."""
        cx, cy = self.center
        phase0 = math.atan2(-cy, -cx) if (cx or cy) else 0.0
        theta = phase0 + 2 * np.pi * np.arange(self.n_points) / self.n_points
        return np.stack([cx + self.radius * np.cos(theta), cy + self.radius * np.sin(theta)], axis=1)

    def to_json(self) -> dict:
        return {
            "partition": self.partition_index,
            "center": [self.center[0], self.center[1]],
            "radius": self.radius,
            "n_points": self.n_points,
            "crosses_center": self.crosses_center,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EccentricCircle":
        return cls(int(d["partition"]), (float(d["center"][0]), float(d["center"][1])),
                   float(d["radius"]), int(d["n_points"]), bool(d["crosses_center"]))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Circle trajectory, or an explicit point set when `circles` is empty."""

    grid: GridSpec
    circles: Tuple[EccentricCircle, ...]
    af_nominal: float = 1.0
    seed: int = 0
    explicit_coords: Optional[np.ndarray] = None

    @property
    def is_cartesian(self) -> bool:
        return self.explicit_coords is not None

    @cached_property
    def coords(self) -> np.ndarray:
        if self.explicit_coords is not None:
            out = np.array(self.explicit_coords, dtype=np.float64)
        elif not self.circles:
            out = np.zeros((0, 3))
        else:
            kz = self.grid.partition_kz()
            blocks = []
            for c in self.circles:
                pts = c.points()
                blocks.append(np.column_stack([pts, np.full(len(pts), kz[c.partition_index])]))
            out = np.concatenate(blocks, axis=0)
        out.setflags(write=False)
        return out

    @property
    def n_samples(self) -> int:
        return self.coords.shape[0]

    @cached_property
    def sample_partition(self) -> np.ndarray:
        return self.grid.partition_of(self.coords[:, 2])

    @cached_property
    def circle_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([c.n_points for c in self.circles])]).astype(np.int64)

    def sample_indices(self, circle_indices: Sequence[int]) -> np.ndarray:
        off = self.circle_offsets
        parts = [np.arange(off[i], off[i + 1]) for i in circle_indices]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def n_center_crossing(self) -> int:
        return sum(1 for c in self.circles if c.crosses_center)


@dataclass(frozen=True, eq=False)
class SampleWeights:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise NumericalError("sample weights contain non-finite values")
        if np.any(v < 0):
            raise DataError("sample weights must be non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __mul__(self, other: "SampleWeights") -> "SampleWeights":
        return SampleWeights(self.values * other.values)

    def subset(self, idx: np.ndarray) -> "SampleWeights":
        return SampleWeights(self.values[idx])

    @classmethod
    def ones(cls, n: int) -> "SampleWeights":
        return cls(np.ones(n))


def partition_radius(grid: GridSpec, p: int) -> float:
    """In-plane k-space radius of partition p on the spherical stack."""
    kz = grid.partition_kz()[p]
    kz_max = grid.kmax[2]
    r = grid.kmax_xy * math.sqrt(max(0.0, 1.0 - (kz / kz_max) ** 2))
    return max(r, grid.dk_xy / 2)


def disc_cell_centers(grid: GridSpec, radius: float) -> np.ndarray:
    kx = (np.arange(grid.nx) - grid.nx // 2) / grid.fov_x
    ky = (np.arange(grid.ny) - grid.ny // 2) / grid.fov_y
    gx, gy = np.meshgrid(kx, ky, indexing="ij")
    cells = np.column_stack([gx.ravel(), gy.ravel()])
    return cells[np.hypot(cells[:, 0], cells[:, 1]) < radius * (1 - 1e-12)]


def _uniform_in_disc(rng: np.random.Generator, rho: float) -> Tuple[float, float]:
    r = rho * math.sqrt(rng.uniform())
    a = rng.uniform(0.0, 2 * math.pi)
    return (r * math.cos(a), r * math.sin(a))


def _fill_partition(grid: GridSpec, p: int, R: float, rng: np.random.Generator) -> list:
    kp = partition_radius(grid, p)
    fov = max(grid.fov_x, grid.fov_y)
    if kp - R <= 0:
        r = min(R, kp)
        log.debug("partition %d: radius %.4g too large for disc %.4g, single circle", p, R, kp)
        return [EccentricCircle.make(p, (0.0, 0.0), r, fov)]
    dk = grid.dk_xy
    # First circle passes through the partition origin.
    d = min(R, kp - R) * (1 - 1e-12)
    a = rng.uniform(0.0, 2 * math.pi)
    circles = [EccentricCircle.make(p, (d * math.cos(a), d * math.sin(a)), R, fov)]
    cells = disc_cell_centers(grid, kp)
    if len(cells) == 0:
        return circles
    gap, _ = cKDTree(circles[0].points()).query(cells)
    while gap.max() >= dk:
        if len(circles) >= MAX_CIRCLES_PER_PARTITION:
            raise NumericalError(f"partition {p}: coverage not reached after {len(circles)} circles")
        circ = EccentricCircle.make(p, _uniform_in_disc(rng, kp - R), R, fov)
        dist, _ = cKDTree(circ.points()).query(cells)
        gap = np.minimum(gap, dist)
        circles.append(circ)
    return circles


def generate_eccentric(grid: GridSpec, radius_fraction: float, seed: int) -> Trajectory:
    if not 0 < radius_fraction <= 0.5:
        raise DataError(f"radius_fraction must lie in (0, 0.5], got {radius_fraction}")
    R = radius_fraction * grid.kmax_xy
    circles = []
    for p in range(grid.nz):
        rng = np.random.default_rng([int(seed), p])
        circles.extend(_fill_partition(grid, p, R, rng))
    traj = Trajectory(grid, tuple(circles), 1.0, int(seed))
    log.info("generated %d circles, %d samples, radius %.5f cycles/mm", len(circles), traj.n_samples, R)
    return traj


def cartesian_trajectory(grid: GridSpec) -> Trajectory:
    """Every Cartesian cell center of every partition, as an explicit point set."""
    kx = (np.arange(grid.nx) - grid.nx // 2) / grid.fov_x
    ky = (np.arange(grid.ny) - grid.ny // 2) / grid.fov_y
    kz = grid.partition_kz()
    gz, gx, gy = np.meshgrid(kz, kx, ky, indexing="ij")
    coords = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    return Trajectory(grid, (), 1.0, 0, coords)


def undersample_indices(traj: Trajectory, af: float, seed: int) -> np.ndarray:
    n_total = len(traj.circles)
    if n_total == 0:
        raise DataError("only circle trajectories can be undersampled")
    center = [i for i, c in enumerate(traj.circles) if c.crosses_center]
    others = np.array([i for i, c in enumerate(traj.circles) if not c.crosses_center], dtype=np.int64)
    if not center:
        raise DataError("no center-crossing circle to keep")
    af_max = n_total / len(center)
    keep = int(math.floor(n_total / af + 0.5)) if af >= 1 else -1
    if af < 1 or keep < len(center):
        raise DataError(
            f"af={af} is infeasible: {len(center)} of {n_total} circles cross the center, "
            f"feasible AF range is [1, {af_max:.4g}]"
        )
    rng = np.random.default_rng(int(seed))
    chosen = rng.choice(others, size=keep - len(center), replace=False) if len(others) else others
    return np.sort(np.concatenate([np.asarray(center, dtype=np.int64), chosen.astype(np.int64)]))


def select_circles(traj: Trajectory, indices: Sequence[int], af: float = 1.0, seed: Optional[int] = None) -> Trajectory:
    return Trajectory(
        traj.grid,
        tuple(traj.circles[i] for i in indices),
        traj.af_nominal * af,
        traj.seed if seed is None else int(seed),
    )


def undersample(traj: Trajectory, af: float, seed: int) -> Trajectory:
    kept = undersample_indices(traj, af, seed)
    return select_circles(traj, kept, af, seed)


def clip_radius(grid: GridSpec, p: int) -> float:
    """Radius of the disc Voronoi cells of partition p are clipped to."""
    return partition_radius(grid, p) + grid.dk_xy / 2


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of a convex polygon against a CCW convex polygon."""
    out = subject
    nxt = np.roll(clip, -1, axis=0)
    for j in range(len(clip)):
        if len(out) == 0:
            break
        a, e = clip[j], nxt[j] - clip[j]
        side = e[0] * (out[:, 1] - a[1]) - e[1] * (out[:, 0] - a[0])
        if np.all(side >= 0):
            continue
        kept = []
        for i in range(len(out)):
            cur, prev, sc, sp = out[i], out[i - 1], side[i], side[i - 1]
            if sc >= 0:
                if sp < 0:
                    kept.append(prev + (sp / (sp - sc)) * (cur - prev))
                kept.append(cur)
            elif sp >= 0:
                kept.append(prev + (sp / (sp - sc)) * (cur - prev))
        out = np.array(kept).reshape(-1, 2)
    return out


def _edge_disc_area(a: np.ndarray, b: np.ndarray, r: float) -> float:
    """Signed area of triangle (0, a, b) intersected with the disc |k| <= r."""
    d = b - a
    qa = float(d @ d)
    if qa == 0.0:
        return 0.0
    qb = float(a @ d)
    qc = float(a @ a) - r * r
    ts = [0.0]
    disc = qb * qb - qa * qc
    if disc > 0:
        root = math.sqrt(disc)
        ts += [t for t in ((-qb - root) / qa, (-qb + root) / qa) if 0.0 < t < 1.0]
    ts.append(1.0)
    area = 0.0
    for t0, t1 in zip(ts[:-1], ts[1:]):
        p, q = a + t0 * d, a + t1 * d
        cross = float(p[0] * q[1] - p[1] * q[0])
        mid = a + 0.5 * (t0 + t1) * d
        if float(mid @ mid) <= r * r:
            area += 0.5 * cross
        else:
            area += 0.5 * r * r * math.atan2(cross, float(p @ q))
    return area


def disc_polygon_area(poly: np.ndarray, r: float) -> float:
    """Exact area of a polygon intersected with the origin-centered disc of radius r."""
    if len(poly) < 3:
        return 0.0
    nxt = np.roll(poly, -1, axis=0)
    return abs(sum(_edge_disc_area(poly[i], nxt[i], r) for i in range(len(poly))))


def _partition_weights(
    pts: np.ndarray, box: Optional[np.ndarray] = None, radius: Optional[float] = None
) -> np.ndarray:
    """Cell areas clipped to a box polygon, or to the disc of `radius` when no box is given."""
    clip_area = polygon_area(box) if box is not None else math.pi * radius**2
    keys = np.round(pts, 12)
    sites, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if len(sites) == 1:
        return np.full(len(pts), clip_area / len(pts))
    bound = float(np.max(np.linalg.norm(box, axis=1))) if box is not None else radius
    extent = max(bound, float(np.max(np.linalg.norm(sites, axis=1))))
    guard_theta = np.pi / 8 + 2 * np.pi * np.arange(8) / 8
    guards = 10 * extent * np.column_stack([np.cos(guard_theta), np.sin(guard_theta)])
    try:
        vor = Voronoi(np.vstack([sites, guards]))
    except QhullError as e:
        raise NumericalError(f"Voronoi tessellation failed: {e}") from e
    areas = np.empty(len(sites))
    for i, site in enumerate(sites):
        region = vor.regions[vor.point_region[i]]
        if not region or -1 in region:
            raise NumericalError("unbounded Voronoi cell inside the guard ring")
        cell = vor.vertices[region]
        order = np.argsort(np.arctan2(cell[:, 1] - site[1], cell[:, 0] - site[0]))
        cell = cell[order]
        if box is not None:
            areas[i] = polygon_area(_clip_convex(cell, box))
        elif np.all(np.linalg.norm(cell, axis=1) <= radius):
            areas[i] = polygon_area(cell)
        else:
            areas[i] = disc_polygon_area(cell, radius)
    return areas[inverse] / counts[inverse]


def voronoi_dcf(traj: Trajectory) -> SampleWeights:
    """Voronoi cell areas per partition, clipped to the partition's sampling support."""
    grid = traj.grid
    coords = traj.coords
    w = np.zeros(traj.n_samples)
    parts = traj.sample_partition
    for p in np.unique(parts):
        sel = np.flatnonzero(parts == p)
        pts = coords[sel, :2]
        if traj.is_cartesian:
            hx, hy = grid.dk[0] / 2, grid.dk[1] / 2
            x0, x1 = pts[:, 0].min() - hx, pts[:, 0].max() + hx
            y0, y1 = pts[:, 1].min() - hy, pts[:, 1].max() + hy
            box = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
            w[sel] = _partition_weights(pts, box=box)
        else:
            w[sel] = _partition_weights(pts, radius=clip_radius(grid, int(p)))
    return SampleWeights(w)


def hamming_weights(traj: Trajectory) -> SampleWeights:
    kmax = np.asarray(traj.grid.kmax)
    rho = np.linalg.norm(traj.coords / kmax, axis=1)
    w = np.where(rho < 1.0, 0.54 + 0.46 * np.cos(np.pi * np.minimum(rho, 1.0)), 0.08)
    return SampleWeights(w)


def save_trajectory(path, traj: Trajectory) -> None:
    store = DatasetStore(path)
    ds = Dataset(grid=traj.grid, attrs={"af_nominal": traj.af_nominal, "seed": traj.seed})
    ds.add("coords", traj.coords.astype(np.float32), ("sample", "k"))
    store.save(ds)
    store.write_json(
        "circles.json",
        {
            "kind": "cartesian" if traj.is_cartesian else "eccentric",
            "af_nominal": traj.af_nominal,
            "seed": traj.seed,
            "circles": [c.to_json() for c in traj.circles],
        },
    )


def load_trajectory(path) -> Trajectory:
    store = DatasetStore(path)
    ds = store.load(names=())
    doc = store.read_json("circles.json")
    if doc.get("kind") == "cartesian":
        return cartesian_trajectory(ds.grid)
    circles = tuple(EccentricCircle.from_json(c) for c in doc["circles"])
    return Trajectory(ds.grid, circles, float(doc["af_nominal"]), int(doc["seed"]))
