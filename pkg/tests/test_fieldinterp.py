import numpy as np
import pytest
from hypothesis import given, strategies as st

from hydrolink.errors import ConfigurationError, GeometryError, OutOfBoundsError, UndefinedReferenceError
from hydrolink.fieldinterp import (CORNERS, InterpMode, bilinear_weights, corner_gamma,
                                   interpolate_field, interpolate_map, msd_interp,
                                   plane_receiver_delay, plane_receiver_interp,
                                   plane_source_adjust, spherical_receiver_delay,
                                   spherical_receiver_interp, spherical_source_adjust)
from hydrolink.geoacoustics import ArrivalSet, Environment, Position, compute_arrivals, image_arrays
from hydrolink.gridmap import GridMapSet, GridSpec, build_gridmap

C = 1500.0
ENV = Environment(200.0, C)
# corner -> (sign of range offset, sign of depth offset) for a receiver inside the cell
OFFSET_SIGN = {(1, 1): (1, 1), (1, 2): (1, -1), (2, 2): (-1, -1), (2, 1): (-1, 1)}


@pytest.fixture(scope="module")
def gmap():
    return build_gridmap(ENV, 17.0, GridSpec(0, 20, 0.5, 5, 30, 0.5), 6, on_degenerate="skip")


def single(delay, thd=0.0, thi=0.0):
    return ArrivalSet([delay], [1.0], [thd], [thi])


class TestReceiverInterp:
    def test_on_grid_point(self, gmap):
        f = plane_receiver_interp(gmap, (10.0, 12.0))
        np.testing.assert_array_equal(f.weights, [1, 0, 0, 0])
        assert f.arrivals == gmap[20, 14]

    def test_on_grid_point_spherical(self, gmap):
        f = spherical_receiver_interp(gmap, (10.0, 12.0))
        np.testing.assert_array_equal(f.arrivals.delay, gmap[20, 14].delay)

    def test_cell_centre_weights(self, gmap):
        f = plane_receiver_interp(gmap, (10.25, 12.25))
        np.testing.assert_allclose(f.weights, 0.25, rtol=0, atol=1e-12)
        assert len(f.arrivals) == 4 * 13

    def test_plane_horizontal_step(self):
        assert plane_receiver_delay(0.0, 0.0, 0.5, 0.0, C) == pytest.approx(3.3333333e-4, rel=1e-7)

    def test_spherical_zero_offset(self):
        for corner in CORNERS:
            assert spherical_receiver_delay(0.01, 0.3, 0.0, 0.0, C, corner) == 0.01

    def test_spherical_collinear(self):
        # horizontal direct path, receiver 0.5 m further along the ray
        assert spherical_receiver_delay(10.0 / C, 0.0, 0.5, 0.0, C, (1, 1)) == pytest.approx(
            10.0 / C + 0.5 / C, abs=1e-15)

    def test_corner_gamma_collinear_is_pi(self):
        assert corner_gamma(0.0, 0.0, (1, 1)) == pytest.approx(np.pi)

    def test_out_of_bounds(self, gmap):
        with pytest.raises(OutOfBoundsError):
            plane_receiver_interp(gmap, (25.0, 10.0))
        with pytest.raises(OutOfBoundsError):
            spherical_receiver_interp(gmap, (5.0, 31.0))

    def test_spherical_exact_every_path(self, rng):
        """Each corner's adjusted delay equals the image-source delay at the receiver."""
        zs = 17.0
        for _ in range(200):
            i0, j0 = rng.uniform(1, 49), rng.uniform(5, 39)
            r0, z0 = np.floor(i0 * 2) / 2, np.floor(j0 * 2) / 2
            r, z = r0 + rng.uniform(0, 0.5), z0 + rng.uniform(0, 0.5)
            truth = image_arrays(ENV, zs, r, z, 6)[0]
            for corner in CORNERS:
                cr = r0 if corner[0] == 1 else r0 + 0.5
                cz = z0 if corner[1] == 1 else z0 + 0.5
                d, _, _, inc, *_ = image_arrays(ENV, zs, cr, cz, 6)
                got = spherical_receiver_delay(d, inc, abs(r - cr), abs(z - cz), C, corner)
                np.testing.assert_allclose(got, truth, rtol=0, atol=1e-9)

    def test_batch_matches_scalar(self, gmap, rng):
        r = rng.uniform(1, 19, 20)
        z = rng.uniform(6, 29, 20)
        batch = interpolate_map(gmap, r, z, 0.0, "spherical")
        for n in range(20):
            f = spherical_receiver_interp(gmap, (r[n], z[n]))
            assert batch.arrival_set(n) == f.arrivals


class TestSourceAdjust:
    def test_plane_identity(self):
        s = single(0.02, 0.4, 0.4)
        assert plane_source_adjust(s, 0.0, C) is s

    def test_plane_horizontal_departure(self):
        s = single(0.02, 0.0, 0.0)
        assert plane_source_adjust(s, 0.7, C).delay[0] == 0.02

    def test_plane_thirty_degrees(self):
        # deeper source, upward ray: the path gets longer
        s = single(0.02, np.radians(30), np.radians(30))
        got = plane_source_adjust(s, 0.5, C).delay[0] - 0.02
        assert got == pytest.approx(0.5 * 0.5 / 1500, rel=1e-9)
        assert got == pytest.approx(1.6667e-4, rel=1e-4)

    def test_spherical_identity(self):
        s = single(0.02, 0.4, 0.4)
        out = spherical_source_adjust(s, 0.0, C)
        assert out.delay[0] == 0.02 and out.incident_angle[0] == 0.4

    @pytest.mark.parametrize("literal", [False, True])
    def test_vertical_ray_raised_source(self, literal):
        # receiver 10 m straight above the source; raising the source 0.5 m shortens the path
        src, rcv = Position(0, 0, 30), Position(0, 0, 20)
        arr = compute_arrivals(ENV, src, rcv, 0)
        assert arr.departure_angle[0] == pytest.approx(np.pi / 2)
        out = spherical_source_adjust(arr, -0.5, C, literal=literal)
        assert out.delay[0] * C == pytest.approx(9.5, abs=1e-9)

    def test_direct_paths_exact(self, rng):
        for _ in range(1000):
            zs, r, z = rng.uniform(15, 20), rng.uniform(1, 50), rng.uniform(5, 40)
            dD = rng.uniform(-0.5, 0.5)
            arr = compute_arrivals(ENV, Position(0, 0, zs), Position(r, 0, z), 0)
            out = spherical_source_adjust(arr, dD, C)
            truth = compute_arrivals(ENV, Position(0, 0, zs + dD), Position(r, 0, z), 0)
            assert abs(out.delay[0] - truth.delay[0]) < 1e-9

    def test_bounced_paths_exact_delay_and_angle(self, rng):
        for _ in range(200):
            zs, r, z = rng.uniform(15, 20), rng.uniform(1, 50), rng.uniform(5, 40)
            dD = rng.uniform(-0.5, 0.5)
            d, _, thd, thi, *_ = image_arrays(ENV, zs, r, z, 6)
            arr = ArrivalSet(d, np.ones_like(d), thd, thi, sort=False)
            out = spherical_source_adjust(arr, dD, C, sort=False)
            truth = image_arrays(ENV, zs + dD, r, z, 6)
            np.testing.assert_allclose(out.delay, truth[0], rtol=0, atol=1e-9)
            np.testing.assert_allclose(out.incident_angle, truth[3], rtol=0, atol=1e-9)

    def test_ray_crossing_horizontal(self):
        # source and receiver at nearly equal depth; the move flips the ray's tilt
        src, rcv = Position(0, 0, 18.25), Position(10.08, 0, 18.09)
        arr = compute_arrivals(ENV, src, rcv, 0)
        out = spherical_source_adjust(arr, -0.493, C)
        truth = compute_arrivals(ENV, Position(0, 0, 18.25 - 0.493), rcv, 0)
        assert np.sign(out.incident_angle[0]) == -np.sign(arr.incident_angle[0])
        assert out.incident_angle[0] == pytest.approx(truth.incident_angle[0], abs=1e-12)

    def test_moved_past_image_receiver(self):
        with pytest.raises(GeometryError):
            spherical_source_adjust(single(0.2 / C, 0.1, 0.1), 0.3, C)


class TestInterpolateField:
    def test_on_map_depth_and_grid_point(self, gmap):
        f = interpolate_field(gmap, Position(3, 4, 17.0), Position(3 + 6.0, 4 + 8.0, 12.0))
        assert f.arrivals == gmap[20, 14]
        assert f.source_offset == 0.0

    def test_uses_nearest_map(self):
        spec = GridSpec(0, 10, 0.5, 5, 30, 0.5, (15, 16))
        maps = GridMapSet.build(ENV, spec, 2, on_degenerate="skip")
        f = interpolate_field(maps, Position(0, 0, 15.8), Position(7, 0, 20), "spherical")
        assert f.source_offset == pytest.approx(-0.2)
        truth = compute_arrivals(ENV, Position(0, 0, 15.8), Position(7, 0, 20), 2)
        np.testing.assert_allclose(f.arrivals.delay[0], truth.delay[0], atol=1e-9)

    def test_empty_set(self):
        with pytest.raises(ConfigurationError):
            interpolate_field(GridMapSet(), Position(0, 0, 1), Position(1, 0, 1))

    def test_mode_parse(self):
        assert InterpMode.parse("Plane") is InterpMode.PLANE
        with pytest.raises(ConfigurationError):
            InterpMode.parse("cubic")


class TestMsdInterp:
    def test_identical(self):
        h = np.array([1, 0.5j, -0.2])
        assert msd_interp(h, h) == -300.0

    def test_zero_estimate(self):
        h = np.array([1, 0.5j, -0.2])
        assert msd_interp(np.zeros(3), h) == pytest.approx(0.0, abs=1e-12)

    def test_half(self):
        h = np.array([1, 0.5j, -0.2])
        assert msd_interp(0.5 * h, h) == pytest.approx(-6.0206, abs=1e-4)

    def test_zero_reference(self):
        with pytest.raises(UndefinedReferenceError):
            msd_interp(np.ones(3), np.zeros(3))


class TestProperties:
    @given(st.floats(0, 1), st.floats(0, 1))
    def test_partition_of_unity(self, w1, w2):
        w = bilinear_weights(w1, w2)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(w >= 0)

    @given(st.floats(-1.4, 1.4), st.floats(0.01, 0.5), st.floats(0.01, 0.5))
    def test_plane_error_shrinks_with_range(self, theta, dx, dz):
        errs = []
        for d1 in (10.0, 1000.0):
            tau = d1 / C
            plane = plane_receiver_delay(tau, theta, dx, -dz, C)
            exact = spherical_receiver_delay(tau, theta, dx, dz, C, (1, 2))
            errs.append(abs(plane - exact))
        assert errs[1] < errs[0] or errs[0] == 0

    @given(st.floats(-1.4, 1.4), st.floats(0, 0.5), st.floats(0, 0.5),
           st.sampled_from(CORNERS), st.floats(1000, 5000))
    def test_far_field_mode_agreement(self, theta, dx, dz, corner, d1):
        sr, sz = OFFSET_SIGN[corner]
        tau = d1 / C
        plane = plane_receiver_delay(tau, theta, sr * dx, sz * dz, C)
        exact = spherical_receiver_delay(tau, theta, dx, dz, C, corner)
        # the gap is second order in the offset across the ray
        assert abs(plane - exact) <= (dx * dx + dz * dz) / (2 * d1 * C) * 1.01 + 1e-15
