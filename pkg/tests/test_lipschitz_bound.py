import numpy as np
import pytest

from src.Tools.exceptions import AssumptionViolated, BadWidths, EmptyRing, TooFewPoints
from src.lipschitz_bound import (
    Interval,
    Ring,
    audit_bound,
    bound_nonlinearity_lipschitz,
    compute_bounds,
    estimate_lipschitz,
    make_intervals,
    ring_indices,
    ring_random_points,
    ring_sobol_points,
    sample_ellipsoid_surface,
)
from src.system_model import DataSet, NonlinearityOracle, grid_points

CUBIC = NonlinearityOracle(fn=lambda x: -x ** 3, n=1)


def motivating_data():
    xs = grid_points(-2.0, 2.0, 0.02, 1)
    return DataSet(xs, CUBIC(xs))


class TestIntervals:
    def test_descending_schedule(self):
        intervals = make_intervals(1.0, 0.1, count=8, start=1)
        assert len(intervals) == 8
        assert intervals[0].to_list() == pytest.approx([0.8, 0.9])
        assert intervals[-1].to_list() == pytest.approx([0.1, 0.2])

    def test_single_width(self):
        (interval,) = make_intervals(1.0, 0.1)
        assert interval.to_list() == pytest.approx([0.9, 1.0])

    def test_width_list(self):
        intervals = make_intervals(1.0, [0.1, 0.2])
        assert [iv.to_list() for iv in intervals] == [pytest.approx([0.9, 1.0]), pytest.approx([0.7, 0.9])]

    def test_bad_widths(self):
        with pytest.raises(BadWidths):
            make_intervals(1.0, 2.0)
        with pytest.raises(BadWidths):
            make_intervals(1.0, [0.6, 0.6])
        with pytest.raises(BadWidths):
            Interval(0.5, 0.5)

    def test_halving_keeps_upper_end(self):
        half = Interval(0.9, 1.0).halved()
        assert half.to_list() == pytest.approx([0.95, 1.0])
        assert Interval(0.9, 1.0).contains(half)


class TestRing:
    def test_membership_without_dilation(self):
        ring = Ring(np.eye(2), Interval(0.81, 1.0), 0.0)
        assert ring.contains([0.95, 0.0])
        assert not ring.contains([0.5, 0.0])

    def test_dilation(self):
        ring = Ring(np.eye(2), Interval(0.81, 1.0), 0.15)
        assert ring.contains([1.1, 0.0])
        assert ring.distance([1.1, 0.0]) == pytest.approx(0.1)
        assert not ring.contains([1.2, 0.0])

    def test_batch_membership_matches_pointwise(self):
        P = np.array([[0.7651, 0.2162], [0.2162, 0.6481]])
        ring = Ring(P, Interval(0.9, 1.0), 0.15)
        X = np.random.default_rng(0).uniform(-2, 2, size=(400, 2))
        np.testing.assert_array_equal(ring.members(X), [ring.contains(x) for x in X])

    def test_ring_indices(self):
        data = DataSet([[0.95, 0.0], [0.5, 0.0], [5.0, 5.0]], np.zeros((3, 2)))
        ring = Ring(np.eye(2), Interval(0.81, 1.0), 0.0)
        np.testing.assert_array_equal(ring_indices(data, ring), [0])
        far = DataSet([[5.0, 5.0]], [[0.0, 0.0]])
        assert ring_indices(far, ring).size == 0


class TestSampling:
    def test_ring_points_lie_in_band(self):
        P = np.array([[2.0, 0.3], [0.3, 1.0]])
        interval = Interval(0.5, 0.8)
        for X in (ring_sobol_points(P, interval, 256), ring_random_points(P, interval, 256)):
            levels = np.einsum("ij,jk,ik->i", X, P, X)
            assert np.all(levels >= 0.5 - 1e-12) and np.all(levels <= 0.8 + 1e-12)

    def test_surface_points(self):
        P = np.diag([4.0, 1.0])
        X = sample_ellipsoid_surface(P, 2.0, 128)
        np.testing.assert_allclose(np.einsum("ij,jk,ik->i", X, P, X), 2.0)
        one_d = sample_ellipsoid_surface(np.array([[0.25]]), 4.0, 10)
        np.testing.assert_allclose(np.sort(one_d.ravel()), [-4.0, 4.0])


class TestLipschitzEstimate:
    def test_pairwise_slopes(self):
        data = DataSet([[0.0], [1.0], [2.0]], [[0.0], [1.0], [2.0]])
        assert estimate_lipschitz(data, np.eye(1)) == pytest.approx(6.0)

    def test_constant_form(self):
        xs = np.array([[1.0], [2.0], [4.0]])
        assert estimate_lipschitz(DataSet(xs, 1.0 / xs), np.eye(1)) == pytest.approx(0.0)

    def test_single_point(self):
        with pytest.raises(TooFewPoints):
            estimate_lipschitz(DataSet([[1.0]], [[1.0]]), np.eye(1))


class TestQuadraticBound:
    def test_zero_nonlinearity(self):
        xs = grid_points(-1.2, 1.2, 0.01, 1)
        data = DataSet(xs, np.zeros_like(xs))
        bound = bound_nonlinearity_lipschitz(data, np.eye(1), Interval(0.81, 1.0), 0.01, L=0.0)
        assert abs(bound.Q[0, 0]) <= 1e-5
        assert bound.kind == "lipschitz"
        assert bound.report["L_estimated"] is False

    def test_bound_holds_on_ring(self):
        P = np.array([[0.25]])
        bound = bound_nonlinearity_lipschitz(motivating_data(), P, Interval(0.9, 1.0), 0.01, L=8.2)
        assert bound.report["min_block_eig"] >= -1e-7
        assert audit_bound(bound, P, CUBIC, samples=512) <= 1e-6

    def test_chunked_bound_dominates_every_stage(self):
        P = np.array([[0.25]])
        bound = bound_nonlinearity_lipschitz(motivating_data(), P, Interval(0.9, 1.0), 0.01, L=8.2, chunk_size=4)
        assert bound.report["chunks"] > 1
        assert bound.report["chain_min_eig"] >= -1e-6
        assert audit_bound(bound, P, CUBIC, samples=512) <= 1e-6

    def test_estimated_lipschitz_warns(self):
        bound = bound_nonlinearity_lipschitz(motivating_data(), np.array([[0.25]]), Interval(0.9, 1.0), 0.01)
        assert bound.report["L_estimated"] is True
        assert bound.warnings and "L̂" in bound.warnings[0]

    def test_empty_ring(self):
        data = DataSet([[0.1], [0.2]], [[0.0], [0.0]])
        with pytest.raises(EmptyRing):
            bound_nonlinearity_lipschitz(data, np.eye(1), Interval(0.81, 1.0), 0.01, L=1.0)

    def test_sparse_data_violates_covering(self):
        data = DataSet([[0.9], [-0.9]], [[0.0], [0.0]])
        with pytest.raises(AssumptionViolated) as info:
            bound_nonlinearity_lipschitz(data, np.eye(1), Interval(0.81, 1.0), 0.01, L=1.0)
        assert info.value.radius > 0.01

    def test_compute_bounds_collects_failures(self):
        good, bad = Interval(0.9, 1.0), Interval(0.8, 0.9)
        data = motivating_data()

        def provider(interval):
            if interval == bad:
                raise EmptyRing("无数据")
            return bound_nonlinearity_lipschitz(data, np.array([[0.25]]), interval, 0.01, L=8.2)

        bounds, failures = compute_bounds(provider, [good, bad], use_threads=False)
        assert set(bounds) == {good}
        assert "EmptyRing" in failures[bad]

    def test_compute_bounds_does_not_hide_programming_errors(self):
        def provider(interval):
            raise TypeError("bad call")

        with pytest.raises(TypeError):
            compute_bounds(provider, [Interval(0.9, 1.0)], use_threads=False)
