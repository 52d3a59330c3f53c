"""Level-set kernel: ray casting, morphology, advection, sampling."""
import numpy as np
import pytest

import oracles
from conftest import H, random_blob_scene, unit, unit_sphere_points
from millforge import primitives as prim
from millforge.errors import EmptyShapeError
from millforge.grid import GridSpec
from millforge.levelset import LevelSet


class TestRaycast:
    def test_sphere_axis_hit(self, sphere10):
        hit = sphere10.raycast((30, 0, 0), (-1, 0, 0), 0.0)
        assert hit is not None
        assert np.linalg.norm(hit - np.array([10, 0, 0])) <= H

    def test_offset_isosurface_hit(self, sphere10):
        hit = sphere10.raycast((30, 0, 0), (-1, 0, 0), 3.0)
        assert hit is not None
        assert np.linalg.norm(hit - np.array([13, 0, 0])) <= H

    def test_miss(self, sphere10):
        assert sphere10.raycast((30, 20, 0), (-1, 0, 0), 0.0) is None

    def test_start_outside_pointing_away(self, sphere10):
        assert sphere10.raycast((30, 0, 0), (1, 0, 0), 0.0) is None

    def test_max_dist_limits_hit(self, sphere10):
        assert sphere10.raycast((30, 0, 0), (-1, 0, 0), 0.0, max_dist=10.0) is None
        assert sphere10.raycast((30, 0, 0), (-1, 0, 0), 0.0, max_dist=25.0) is not None

    def test_rejects_non_unit_direction(self, sphere10):
        with pytest.raises(ValueError):
            sphere10.raycast((30, 0, 0), (-2, 0, 0), 0.0)

    def test_rejects_iso_outside_band(self, sphere10):
        with pytest.raises(ValueError):
            sphere10.raycast((30, 0, 0), (-1, 0, 0), sphere10.band_width + 1.0)

    def test_dense_march_agreement(self, rng):
        grid = GridSpec.from_bounds((-16, -16, -16), (16, 16, 16), H)
        scenes = [random_blob_scene(grid, s) for s in range(3)]
        for i in range(200):
            ls = scenes[i % 3]
            start = rng.uniform(-15.5, 15.5, 3)
            d = unit(rng.normal(size=3))
            iso = float(rng.uniform(0.0, 2.0))
            hit = ls.raycast(start, d, iso)
            t_ref = oracles.dense_ray_march(ls, start, d, iso)
            assert (hit is None) == (t_ref is None)
            if hit is not None:
                assert abs(np.linalg.norm(hit - start) - t_ref) <= H


class TestOffset:
    def test_sphere_grows_by_offset(self, sphere10):
        grown = sphere10.offset(3.0)
        pts = 13.0 * unit_sphere_points(200)
        assert np.abs(grown.sample(pts)).max() <= H

    def test_zero_offset_is_identity(self, sphere10):
        same = sphere10.offset(0.0)
        np.testing.assert_array_equal(same.values, sphere10.values)

    def test_rounded_box_corner(self):
        # expected corner standoff computed from the analytic SDF of a
        # rounded box: offsetting a box by o puts the diagonal corner at
        # half_extent * sqrt(3) + o from the center
        grid = GridSpec.from_bounds((-17, -17, -17), (17, 17, 17), H)
        ls = LevelSet.from_sdf(grid, prim.box(grid, (0, 0, 0), (10, 10, 10)),
                               band_width=3.0)
        grown = ls.offset(2.0)
        d = unit((1, 1, 1))
        hit = grown.raycast(np.array([13.0, 13.0, 13.0]), -d, 0.0)
        assert hit is not None
        expected = 10.0 * np.sqrt(3.0) + 2.0
        assert abs(np.linalg.norm(hit) - expected) <= 1.5 * H

    def test_round_trip_on_convex_shape(self, sphere10):
        back = sphere10.offset(1.5).offset(-1.5)
        pts = 10.0 * unit_sphere_points(300)
        assert np.abs(back.sample(pts)).max() <= 0.5 * H

    def test_rejects_offset_beyond_band(self, sphere10):
        with pytest.raises(ValueError):
            sphere10.offset(sphere10.band_width + 1.0)


class TestAdvect:
    def test_uniform_erosion(self, sphere10):
        speed = np.full(sphere10.grid.dims, -1.0)
        shrunk = sphere10.advect(speed, 2.0)
        pts = 8.0 * unit_sphere_points(200)
        assert np.abs(shrunk.sample(pts)).max() <= 1.5 * H

    def test_zero_speed_is_identity(self, sphere10):
        same = sphere10.advect(np.zeros(sphere10.grid.dims), 5.0)
        np.testing.assert_array_equal(same.values, sphere10.values)

    def test_erosion_volume_matches_exact_sphere(self, sphere10):
        # at t = 2 the frozen-area first-order formula overshoots; the
        # measured-volume oracle is the exact eroded sphere
        speed = np.full(sphere10.grid.dims, -1.0)
        shrunk = sphere10.advect(speed, 2.0)
        exact = 4.0 / 3.0 * np.pi * 8.0 ** 3
        assert abs(shrunk.volume() - exact) <= 0.10 * exact

    def test_first_order_volume_identity(self, sphere10):
        # volume(advect(ls, v, eps)) - volume(ls) = eps * surface integral of v
        samples = sphere10.sample_boundary()
        v = -(1.0 + 0.5 * np.sin(samples.positions[:, 2]))
        band = sphere10.extend_normal(samples, v)
        eps = 0.2
        moved = sphere10.advect(band, eps)
        dv = moved.volume() - sphere10.volume()
        predicted = eps * v.sum() * H * H
        assert abs(dv - predicted) <= 0.10 * abs(predicted)

    def test_every_sample_moves_inward_by_ct(self, sphere10):
        c, t = 0.8, 1.0
        speed = np.full(sphere10.grid.dims, -c)
        shrunk = sphere10.advect(speed, t)
        radii = np.linalg.norm(shrunk.sample_boundary().positions, axis=1)
        assert np.abs(radii - (10.0 - c * t)).max() <= 1.5 * H

    def test_rejects_non_finite_speed(self, sphere10):
        speed = np.zeros(sphere10.grid.dims)
        speed[3, 3, 3] = np.nan
        with pytest.raises(ValueError):
            sphere10.advect(speed, 1.0)


def _cavity_shape():
    grid = GridSpec.from_bounds((-10, -10, -10), (10, 10, 10), H)
    block = prim.box_from_bounds(grid, (-6, -6, -6), (6, 6, 6))
    cavity = prim.sphere(grid, (0, 0, 0), 2.0)
    channel = prim.cylinder(grid, (0, 0, 0), (0, 0, 7), 1.0)
    shape = prim.subtract(prim.subtract(block, cavity), channel)
    return LevelSet.from_sdf(grid, shape, band_width=3.5)


class TestClose:
    def test_fills_cavity_and_channel(self):
        ls = _cavity_shape()
        probes = np.array([[0, 0, 0], [0.7, 0, 0], [0, 0, 3.0], [0, 0, 5.0]])
        assert (ls.sample(probes) > 0).all()  # cavity/channel are void
        closed = ls.close(3.0)
        assert (closed.sample(probes) < 0).all()
        assert oracles.point_membership(closed, probes).all()

    def test_identity_on_convex_shape(self, sphere10):
        closed = sphere10.close(3.0)
        pts = 10.0 * unit_sphere_points(200)
        assert np.abs(closed.sample(pts)).max() <= 1.5 * H

    def test_identity_when_radius_below_feature_size(self, sphere10):
        closed = sphere10.close(1.2 * H)
        pts = 10.0 * unit_sphere_points(200)
        assert np.abs(closed.sample(pts)).max() <= 1.5 * H

    def test_idempotent(self):
        once = _cavity_shape().close(3.0)
        twice = once.close(3.0)
        near = np.abs(once.values) <= H
        assert np.abs(twice.values[near] - once.values[near]).max() <= 0.5 * H

    def test_rejects_bad_radius(self, sphere10):
        with pytest.raises(ValueError):
            sphere10.close(0.0)
        with pytest.raises(ValueError):
            sphere10.close(sphere10.band_width + 1.0)


class TestRedistance:
    def test_exact_sphere_zero_set_fixed(self):
        grid = GridSpec.from_bounds((-16, -16, -16), (16, 16, 16), H)
        exact = LevelSet.from_sdf(grid, prim.sphere(grid, (0, 0, 0), 10.0),
                                  band_width=4.0, redistance=False)
        again = exact.redistance()
        # the zero set is pinned by the sign-change nodes; swept values a
        # node away keep first-order accuracy
        phi = exact.values
        crossing = np.zeros(phi.shape, dtype=bool)
        for axis in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(None, -1)
            hi[axis] = slice(1, None)
            flip = phi[tuple(lo)] * phi[tuple(hi)] < 0
            crossing[tuple(lo)] |= flip
            crossing[tuple(hi)] |= flip
        drift = np.abs(again.values - phi)
        assert drift[crossing].max() <= 0.01 * H
        assert drift[np.abs(phi) <= H].max() <= 0.05 * H

    def test_scaled_field_recovers_distances(self, sphere10):
        doubled = LevelSet(sphere10.grid, 2.0 * sphere10.values,
                           sphere10.band_width).redistance()
        pts = 10.0 * unit_sphere_points(300)
        assert np.abs(doubled.sample(pts)).max() <= 0.25 * H

    def test_gradient_norms_after_varying_advect(self):
        # default-width band; the outermost layer is excluded because the
        # central difference there straddles the clamp
        grid = GridSpec.from_bounds((-16, -16, -16), (16, 16, 16), H)
        ls = LevelSet.from_sdf(grid, prim.sphere(grid, (0, 0, 0), 10.0))
        samples = ls.sample_boundary()
        v = -(1.0 + 0.5 * np.sin(samples.positions[:, 2]))
        moved = ls.advect(ls.extend_normal(samples, v), 0.2)
        gx, gy, gz = np.gradient(moved.values, H)
        norms = np.sqrt(gx ** 2 + gy ** 2 + gz ** 2)
        mask = np.abs(moved.values) < moved.band_width - H
        assert norms[mask].min() >= 0.95
        assert norms[mask].max() <= 1.05

    def test_empty_shape_raises(self):
        grid = GridSpec.from_bounds((-4, -4, -4), (4, 4, 4), 1.0)
        with pytest.raises(EmptyShapeError):
            LevelSet(grid, np.ones(grid.dims), 3.0).redistance()


class TestBoundarySampling:
    def test_samples_on_sphere_surface(self, sphere10):
        s = sphere10.sample_boundary()
        radii = np.linalg.norm(s.positions, axis=1)
        assert np.abs(radii - 10.0).max() <= 0.25

    def test_normals_point_outward(self, sphere10):
        s = sphere10.sample_boundary()
        assert (np.einsum("ij,ij->i", s.positions, s.normals) > 0).all()
        assert np.abs(np.linalg.norm(s.normals, axis=1) - 1.0).max() <= 1e-6

    def test_sample_count_matches_footprint(self, sphere10):
        n = len(sphere10.sample_boundary())
        expected = 4.0 * np.pi * 10.0 ** 2 / H ** 2
        assert 0.7 * expected <= n <= 1.3 * expected


class TestExtendNormal:
    def test_constant_extends_constant(self, sphere10):
        s = sphere10.sample_boundary()
        field = sphere10.extend_normal(s, np.full(len(s), 3.25))
        band = sphere10.band_mask()
        assert np.allclose(field[band], 3.25)

    def test_north_pole_value(self, sphere10):
        s = sphere10.sample_boundary()
        field = sphere10.extend_normal(s, s.positions[:, 2])
        val = float(field[sphere10.grid.dims[0] // 2,
                          sphere10.grid.dims[1] // 2,
                          int(round((12.0 + 16.0) / H))])
        assert abs(val - 10.0) <= 2.0 * H

    def test_matches_nearest_sample(self, sphere10, rng):
        s = sphere10.sample_boundary()
        values = rng.normal(size=len(s))
        field = sphere10.extend_normal(s, values)
        idx = np.argwhere(sphere10.band_mask())
        pick = idx[rng.choice(idx.shape[0], size=200, replace=False)]
        pos = sphere10.grid.bbox_min + pick * H
        grads = sphere10.sample_normal(pos)
        proj = pos - sphere10.sample(pos)[:, None] * grads
        d2 = np.sum((proj[:, None, :] - s.positions[None, :, :]) ** 2, axis=2)
        nearest = values[np.argmin(d2, axis=1)]
        got = field[tuple(pick.T)]
        assert np.array_equal(got, nearest)

    def test_normal_derivative_vanishes(self, sphere10):
        s = sphere10.sample_boundary()
        values = s.positions[:, 2]  # smooth boundary data
        field = sphere10.extend_normal(s, values)
        idx = np.argwhere(np.abs(sphere10.values) < 1.0)
        pos = sphere10.grid.bbox_min + idx * H
        n = sphere10.sample_normal(pos)
        from millforge.grid import sample_field
        ahead = sample_field(field, sphere10.grid, pos + H * n)
        here = sample_field(field, sphere10.grid, pos)
        deriv = np.abs(ahead - here) / H
        bound = 0.1 * (values.max() - values.min()) / H
        assert deriv.max() <= bound

    def test_rejects_non_finite_values(self, sphere10):
        s = sphere10.sample_boundary()
        bad = np.zeros(len(s))
        bad[0] = np.inf
        with pytest.raises(ValueError):
            sphere10.extend_normal(s, bad)


class TestBooleansAndVolume:
    def test_union_contained_sphere(self, sphere10):
        small = LevelSet.from_sdf(sphere10.grid,
                                  prim.sphere(sphere10.grid, (0, 0, 0), 5.0),
                                  band_width=4.0)
        merged = sphere10.union(small)
        pts = 10.0 * unit_sphere_points(200)
        assert np.abs(merged.sample(pts)).max() <= 1.5 * H

    def test_union_rejects_grid_mismatch(self, sphere10):
        other_grid = GridSpec.from_bounds((-8, -8, -8), (8, 8, 8), H)
        other = LevelSet.from_sdf(other_grid, prim.sphere(other_grid, (0, 0, 0), 5.0))
        with pytest.raises(ValueError):
            sphere10.union(other)

    def test_sphere_volume(self, sphere10):
        exact = 4.0 / 3.0 * np.pi * 10.0 ** 3
        assert abs(sphere10.volume() - exact) <= 0.05 * exact

    def test_mirror_symmetrizes(self):
        grid = GridSpec.from_bounds((-12, -12, -12), (12, 12, 12), H)
        blob = LevelSet.from_sdf(grid, prim.sphere(grid, (4.0, 1.0, -2.0), 5.0),
                                 band_width=3.0)
        sym = blob.mirror(0, 0.0)
        flipped = sym.values[::-1, :, :]
        near = np.abs(sym.values) <= H
        assert np.abs(sym.values[near] - flipped[near]).max() <= H

    def test_mirror_rejects_off_grid_plane(self, sphere10):
        with pytest.raises(ValueError):
            sphere10.mirror(0, 0.3 * H)


class TestBandDiscipline:
    def test_signed_distance_after_op_chain(self, sphere10):
        ls = sphere10.offset(1.0).close(1.5)
        speed = np.full(ls.grid.dims, -0.5)
        ls = ls.advect(speed, 1.0).redistance()
        gx, gy, gz = np.gradient(ls.values, H)
        norms = np.sqrt(gx ** 2 + gy ** 2 + gz ** 2)
        mask = np.abs(ls.values) < ls.band_width - H
        assert np.abs(norms[mask] - 1.0).max() <= 0.05

    def test_ensure_band_widens(self, sphere10):
        wide = sphere10.ensure_band(6.0)
        assert wide.band_width == 6.0
        assert np.abs(wide.values).max() <= 6.0 + 1e-9
        pts = 10.0 * unit_sphere_points(100)
        assert np.abs(wide.sample(pts)).max() <= 0.25 * H
