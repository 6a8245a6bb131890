import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hydrolink.errors import DegenerateGeometryError, DomainError
from hydrolink.geoacoustics import (Arrival, ArrivalSet, Environment, Position, compute_arrivals,
                                    image_arrays, image_path_lengths)

# hand-evaluated image geometry (mpmath, 30 digits)
SURFACE_PATH_M = 1000.199980003999000279916
SURFACE_DELAY_S = 0.6667999866693326668532773


class TestEnvironment:
    def test_defaults(self):
        env = Environment()
        assert env.surface_reflection == -1
        assert env.bottom_reflection == 0.5

    @pytest.mark.parametrize("kw", [{"water_depth": 0}, {"sound_speed": -1},
                                    {"bottom_reflection": 1.5}])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(DomainError):
            Environment(**kw)


class TestComputeArrivals:
    def test_direct_only(self, deep_env):
        arr = compute_arrivals(deep_env, Position(0, 0, 10), Position(1000, 0, 10), 0)
        assert len(arr) == 1
        a = arr[0]
        assert a.delay == pytest.approx(0.6666667, abs=1e-7)
        assert abs(a.amplitude) == pytest.approx(1e-3, rel=1e-12)
        assert a.departure_angle == 0 and a.incident_angle == 0

    def test_first_surface_bounce(self, deep_env):
        arr = compute_arrivals(deep_env, Position(0, 0, 10), Position(1000, 0, 10), 1)
        surf = [a for a in arr if a.surface_bounces == 1]
        assert len(surf) == 1
        s = surf[0]
        assert s.delay * 1500 == pytest.approx(SURFACE_PATH_M, abs=1e-9)
        assert s.delay == pytest.approx(SURFACE_DELAY_S, abs=1e-12)
        assert s.amplitude.real == pytest.approx(-1 / SURFACE_PATH_M, rel=1e-12)
        assert s.amplitude.real == pytest.approx(-9.998e-4, abs=1e-7)
        assert s.departure_angle == pytest.approx(math.atan(20 / 1000), abs=1e-15)
        # arrives travelling downward
        assert s.incident_angle == pytest.approx(-math.atan(20 / 1000), abs=1e-15)

    def test_count_and_order(self, deep_env):
        arr = compute_arrivals(deep_env, Position(0, 0, 30), Position(50, 0, 60), 6)
        assert len(arr) == 13
        assert np.all(np.diff(arr.delay) >= 0)
        assert np.all(np.abs(arr.surface_bounces.astype(int) - arr.bottom_bounces) <= 1)

    def test_coincident_points(self, deep_env):
        with pytest.raises(DegenerateGeometryError):
            compute_arrivals(deep_env, Position(1, 2, 10), Position(1, 2, 10))

    @pytest.mark.parametrize("depth", [-0.1, 100.5])
    def test_depth_outside_waveguide(self, deep_env, depth):
        with pytest.raises(DomainError):
            compute_arrivals(deep_env, Position(0, 0, depth), Position(10, 0, 10))

    def test_negative_bounces(self, deep_env):
        with pytest.raises(DomainError):
            compute_arrivals(deep_env, Position(0, 0, 5), Position(10, 0, 10), -1)

    def test_reflection_coefficients(self):
        env = Environment(50, 1500, surface_reflection=-0.9, bottom_reflection=0.3 + 0.1j)
        arr = compute_arrivals(env, Position(0, 0, 10), Position(100, 0, 20), 4)
        lengths = arr.delay * 1500
        coeff = (-0.9) ** arr.surface_bounces.astype(int) * (0.3 + 0.1j) ** arr.bottom_bounces.astype(int)
        np.testing.assert_allclose(arr.amplitude, coeff / lengths, rtol=1e-12)

    def test_vectorized_kernel_matches(self, deep_env):
        delay, amp, *_ = image_arrays(deep_env, 10.0, np.array([5.0, 50.0]), np.array([20.0, 70.0]))
        for k, (r, z) in enumerate([(5.0, 20.0), (50.0, 70.0)]):
            ref = compute_arrivals(deep_env, Position(0, 0, 10), Position(r, 0, z))
            np.testing.assert_array_equal(np.sort(delay[k]), ref.delay)


positions = st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 100))


class TestProperties:
    @given(positions, positions, st.integers(0, 6))
    def test_reciprocity(self, a, b, nb):
        env = Environment(100.0, 1500.0)
        pa, pb = Position(*a), Position(*b)
        if pa.horizontal_distance(pb) < 1e-6 and abs(pa.depth - pb.depth) < 1e-6:
            return
        fwd = compute_arrivals(env, pa, pb, nb)
        rev = compute_arrivals(env, pb, pa, nb)
        np.testing.assert_allclose(fwd.delay, rev.delay, rtol=0, atol=1e-12)
        np.testing.assert_allclose(np.sort(np.abs(fwd.amplitude)), np.sort(np.abs(rev.amplitude)),
                                   rtol=1e-12)
        # the reversed path departs along minus the forward incident direction;
        # compare as multisets since distinct images can share delay and bounces
        def table(d, ns, nb_, td, ti):
            rows = np.stack([np.round(d, 9), ns, nb_, td, ti], axis=1)
            return rows[np.lexsort((np.round(td, 6), nb_, ns, rows[:, 0]))]

        a_tab = table(fwd.delay, fwd.surface_bounces, fwd.bottom_bounces,
                      fwd.departure_angle, fwd.incident_angle)
        b_tab = table(rev.delay, rev.surface_bounces, rev.bottom_bounces,
                      -rev.incident_angle, -rev.departure_angle)
        np.testing.assert_allclose(a_tab, b_tab, rtol=0, atol=1e-9)

    @given(positions, positions, st.integers(0, 6))
    def test_delay_matches_image_length(self, a, b, nb):
        env = Environment(100.0, 1500.0)
        pa, pb = Position(*a), Position(*b)
        if pa.horizontal_distance(pb) < 1e-6 and abs(pa.depth - pb.depth) < 1e-6:
            return
        arr = compute_arrivals(env, pa, pb, nb)
        lengths = np.sort(list(image_path_lengths(env, pa, pb, nb).values()))
        np.testing.assert_allclose(arr.delay * env.sound_speed, lengths, rtol=0, atol=1e-9)

    @given(positions, positions, st.integers(0, 5))
    def test_monotone_enrichment(self, a, b, n):
        env = Environment(100.0, 1500.0)
        pa, pb = Position(*a), Position(*b)
        if pa.horizontal_distance(pb) < 1e-6 and abs(pa.depth - pb.depth) < 1e-6:
            return
        small = set(compute_arrivals(env, pa, pb, n))
        big = set(compute_arrivals(env, pa, pb, n + 1))
        assert small <= big


class TestArrivalSet:
    def test_sorted_on_construction(self):
        s = ArrivalSet([3.0, 1.0, 2.0], [3, 1, 2], [0, 0, 0], [0, 0, 0])
        np.testing.assert_array_equal(s.delay, [1, 2, 3])
        np.testing.assert_array_equal(s.amplitude, [1, 2, 3])

    def test_iteration_and_roundtrip(self):
        arrs = [Arrival(0.1, 1 + 1j, 0.2, -0.2, 1, 0), Arrival(0.05, 0.5, 0.0, 0.0, 0, 0)]
        s = ArrivalSet.from_arrivals(arrs)
        assert list(s) == sorted(arrs, key=lambda a: a.delay)

    def test_column_length_mismatch(self):
        with pytest.raises(ValueError):
            ArrivalSet([1.0, 2.0], [1.0], [0.0, 0.0], [0.0, 0.0])

    def test_concatenate_empty(self):
        assert len(ArrivalSet.concatenate([])) == 0
