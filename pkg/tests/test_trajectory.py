import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from mrsi.errors import DataError
from mrsi.pipeline.core import GridSpec
from mrsi.pipeline.trajectory import (
    EccentricCircle,
    Trajectory,
    cartesian_trajectory,
    clip_radius,
    disc_cell_centers,
    disc_polygon_area,
    generate_eccentric,
    hamming_weights,
    load_trajectory,
    partition_radius,
    save_trajectory,
    select_circles,
    undersample,
    undersample_indices,
    voronoi_dcf,
)


def synthetic(n_center, n_other, grid=None):
    """Circles on one partition: n_center through the origin, n_other that miss it."""
    grid = grid or GridSpec(nx=32, ny=32, nz=1, fov_x=160.0, fov_y=160.0, fov_z=10.0, dwell=1e-3)
    R = 0.01
    circles = [EccentricCircle.make(0, (0.5 * R, 0.0), R, 160.0) for _ in range(n_center)]
    circles += [EccentricCircle.make(0, (2 * R, 0.0), R, 160.0) for _ in range(n_other)]
    return Trajectory(grid, tuple(circles))


class TestGenerateEccentric:
    """Circle placement and coverage"""

    def test_radius_from_fraction(self):
        g = GridSpec(nx=64, ny=64, nz=1, fov_x=220.0, fov_y=220.0, fov_z=10.0, dwell=1 / 2326)
        traj = generate_eccentric(g, 1 / 8, seed=0)
        assert traj.circles[0].radius == pytest.approx(64 / (2 * 220) / 8)

    def test_degenerate_grid_single_center_circle(self):
        g = GridSpec(nx=2, ny=2, nz=1, fov_x=20.0, fov_y=20.0, fov_z=10.0, dwell=1e-3)
        traj = generate_eccentric(g, 0.5, seed=0)
        assert len(traj.circles) == 1
        assert traj.circles[0].crosses_center

    def test_coverage_full_sampling(self):
        g = GridSpec(nx=16, ny=16, nz=1, fov_x=160.0, fov_y=160.0, fov_z=10.0, dwell=1e-3)
        traj = generate_eccentric(g, 0.125, seed=5)
        cells = disc_cell_centers(g, partition_radius(g, 0))
        gap, _ = cKDTree(traj.coords[:, :2]).query(cells)
        assert gap.max() < g.dk_xy

    def test_invariants_per_circle(self, traj16):
        g = traj16.grid
        for c in traj16.circles:
            assert c.crosses_center == (math.hypot(*c.center) <= c.radius)
            assert math.hypot(*c.center) + c.radius <= partition_radius(g, c.partition_index) + 1e-9
            assert c.n_points == max(1, math.ceil(2 * math.pi * (math.hypot(*c.center) + c.radius) * g.fov_x))
        for p in range(g.nz):
            assert any(c.crosses_center for c in traj16.circles if c.partition_index == p)

    def test_samples_inside_extent(self, traj16):
        g = traj16.grid
        assert np.all(np.abs(traj16.coords[:, 0]) <= g.kmax[0] + 1e-12)
        np.testing.assert_allclose(traj16.coords[:, 2] * g.fov_z, np.rint(traj16.coords[:, 2] * g.fov_z), atol=1e-9)

    def test_center_crossing_circle_samples_origin(self, traj16):
        c = next(c for c in traj16.circles if c.crosses_center and c.center != (0.0, 0.0))
        first = c.points()[0]
        assert np.hypot(*first) == pytest.approx(c.radius - math.hypot(*c.center), abs=1e-12)

    def test_deterministic(self, grid16):
        a = generate_eccentric(grid16, 0.25, seed=9)
        b = generate_eccentric(grid16, 0.25, seed=9)
        np.testing.assert_array_equal(a.coords, b.coords)
        c = generate_eccentric(grid16, 0.25, seed=10)
        assert a.coords.shape != c.coords.shape or not np.array_equal(a.coords, c.coords)

    def test_radius_fraction_range(self, grid16):
        with pytest.raises(DataError):
            generate_eccentric(grid16, 0.6, seed=0)

    def test_inconsistent_center_flag_rejected(self):
        with pytest.raises(DataError):
            EccentricCircle(0, (0.0, 0.0), 0.01, 8, False)


class TestUndersample:
    """Center-crossing circles always survive"""

    def test_counting_rule(self):
        traj = synthetic(20, 100)
        kept = undersample_indices(traj, 2.0, seed=0)
        assert len(kept) == 60
        assert set(range(20)) <= set(kept.tolist())

    def test_af_one_is_identity(self, traj16):
        kept = undersample_indices(traj16, 1.0, seed=3)
        np.testing.assert_array_equal(kept, np.arange(len(traj16.circles)))
        sub = select_circles(traj16, kept)
        np.testing.assert_array_equal(sub.coords, traj16.coords)

    def test_exhaustive_af_law(self):
        g = GridSpec(nx=32, ny=32, nz=8, fov_x=160.0, fov_y=160.0, fov_z=40.0, dwell=1e-3)
        traj = generate_eccentric(g, 0.125, seed=2)
        n = len(traj.circles)
        center = {i for i, c in enumerate(traj.circles) if c.crosses_center}
        for af in (1, 2, 3, 4, 5, 6):
            if n / af + 0.5 < len(center):
                continue
            kept = undersample_indices(traj, af, seed=af)
            assert len(kept) == math.floor(n / af + 0.5)
            assert center <= set(kept.tolist())

    def test_infeasible_af_names_range(self):
        traj = synthetic(20, 10)
        with pytest.raises(DataError, match="feasible AF range"):
            undersample_indices(traj, 2.0, seed=0)
        with pytest.raises(DataError):
            undersample_indices(traj, 0.5, seed=0)

    def test_deterministic_given_seed(self):
        traj = synthetic(5, 50)
        np.testing.assert_array_equal(undersample_indices(traj, 3, 11), undersample_indices(traj, 3, 11))

    def test_undersample_records_af(self):
        sub = undersample(synthetic(5, 50), 2.0, seed=1)
        assert sub.af_nominal == 2.0
        assert len(sub.circles) == 28

    def test_cartesian_cannot_be_undersampled(self, grid8):
        with pytest.raises(DataError):
            undersample_indices(cartesian_trajectory(grid8), 2.0, seed=0)

    def test_no_center_crossing_circle(self):
        with pytest.raises(DataError, match="no center-crossing circle"):
            undersample_indices(synthetic(0, 10), 2.0, seed=0)


class TestVoronoiDcf:
    """Cell-area density compensation"""

    def test_disc_polygon_area_exact(self):
        inside = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
        assert disc_polygon_area(inside, 1.0) == pytest.approx(1.0, rel=1e-12)
        covering = 4 * inside
        assert disc_polygon_area(covering, 1.0) == pytest.approx(math.pi, rel=1e-12)
        quadrant = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]])
        assert disc_polygon_area(quadrant, 1.0) == pytest.approx(math.pi / 4, rel=1e-12)
        upper = np.array([[-2.0, 0.0], [2.0, 0.0], [2.0, 2.0], [-2.0, 2.0]])
        assert disc_polygon_area(upper, 1.0) == pytest.approx(math.pi / 2, rel=1e-12)
        chord = np.array([[0.5, -2.0], [2.0, -2.0], [2.0, 2.0], [0.5, 2.0]])
        segment = math.acos(0.5) - 0.5 * math.sqrt(0.75)
        assert disc_polygon_area(chord, 1.0) == pytest.approx(segment, rel=1e-12)

    def test_cartesian_interior_weight(self):
        g = GridSpec(nx=8, ny=8, nz=1, fov_x=80.0, fov_y=80.0, fov_z=10.0, dwell=1e-3)
        traj = cartesian_trajectory(g)
        w = voronoi_dcf(traj).values.reshape(8, 8)
        np.testing.assert_allclose(w, (1 / 80.0) ** 2, rtol=1e-9, atol=0)

    def test_single_circle_symmetric(self):
        g = GridSpec(nx=16, ny=16, nz=1, fov_x=160.0, fov_y=160.0, fov_z=10.0, dwell=1e-3)
        c = EccentricCircle(0, (0.0, 0.0), 0.02, 8, True)
        w = voronoi_dcf(Trajectory(g, (c,))).values
        area = math.pi * clip_radius(g, 0) ** 2
        np.testing.assert_allclose(w, area / 8, rtol=1e-9)

    def test_partition_sums_to_disc_area(self, traj16):
        g = traj16.grid
        w = voronoi_dcf(traj16).values
        for p in range(g.nz):
            sel = traj16.sample_partition == p
            r = partition_radius(g, p) + g.dk_xy / 2
            assert w[sel].sum() == pytest.approx(math.pi * r**2, rel=1e-6)
        assert np.all(w > 0)

    def test_coincident_points_split(self):
        g = GridSpec(nx=16, ny=16, nz=1, fov_x=160.0, fov_y=160.0, fov_z=10.0, dwell=1e-3)
        pts = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.02, 0.0, 0.0], [-0.02, 0.0, 0.0], [0.0, 0.02, 0.0]])
        with_dup = Trajectory(g, (), explicit_coords=pts)
        w = voronoi_dcf(with_dup).values
        assert w[0] == pytest.approx(w[1])

    def test_all_coincident_uniform(self):
        g = GridSpec(nx=16, ny=16, nz=1, fov_x=160.0, fov_y=160.0, fov_z=10.0, dwell=1e-3)
        c = EccentricCircle(0, (0.0, 0.0), 0.02, 1, True)
        w = voronoi_dcf(Trajectory(g, (c, c))).values
        area = math.pi * clip_radius(g, 0) ** 2
        np.testing.assert_allclose(w, area / 2)


class TestHamming:
    def test_endpoints(self):
        g = GridSpec(nx=8, ny=8, nz=1, fov_x=80.0, fov_y=80.0, fov_z=10.0, dwell=1e-3)
        kmax = g.kmax[0]
        pts = np.array([[0.0, 0.0, 0.0], [kmax / 2, 0.0, 0.0], [kmax, 0.0, 0.0]])
        w = hamming_weights(Trajectory(g, (), explicit_coords=pts)).values
        np.testing.assert_allclose(w, [1.0, 0.54, 0.08], atol=1e-12)

    def test_range(self, traj16):
        w = hamming_weights(traj16).values
        assert w.min() >= 0.08 - 1e-12 and w.max() <= 1.0


class TestPersistence:
    def test_save_load(self, tmp_path, traj16):
        save_trajectory(tmp_path, traj16)
        back = load_trajectory(tmp_path)
        assert back.circles == traj16.circles
        np.testing.assert_array_equal(back.coords, traj16.coords)
        assert (tmp_path / "circles.json").is_file()
        assert (tmp_path / "coords.bin").is_file()
