import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from difflab.covariance import make_tables
from difflab.errors import DomainError
from difflab.process import (
    AxisScheduleSet, ConstantMatrix, CosineSchedule, ExponentialRateSchedule, ProcessSpec, RotationPlusDecay,
    TimeGrid, exponential_schedule, planar_rotation, plain_vanilla_spec,
)
from difflab.samplers import (
    ReverseConfig, chain_times, ddim_chain, ddim_step, ei_chain, ei_step, ensemble_moments,
    exact_backward_path, fixed_epsilon, forward_em, paddim_step, probability_flow_integrate,
    reverse_sde_sample,
)
from difflab.score import ScoreModel

from oracles import ROTATION_NOISE, plain_backward

pytestmark = pytest.mark.filterwarnings("ignore:alpha\\(T\\)")


def plain(d=1, n=4096):
    spec = plain_vanilla_spec(exponential_schedule(1.0, 5.0), d, 5.0)
    return spec, TimeGrid.uniform(5.0, n, include=[0.5, 1.0, 2.0])


@pytest.fixture(scope="module")
def plain_tables():
    spec, grid = plain()
    return spec, grid, make_tables(spec, grid)


@pytest.fixture(scope="module")
def rotation_tables():
    spec = ProcessSpec(2, 2.0, RotationPlusDecay([1.0, 2.0], 0.0, 0.3), ConstantMatrix(ROTATION_NOISE))
    grid = TimeGrid.uniform(2.0, 1024)
    return spec, grid, make_tables(spec, grid)


def within_3se(mom, mean, var):
    return (abs(mom["mean"][0] - mean) <= 3 * mom["se_mean"][0]
            and abs(mom["cov"][0, 0] - var) <= 3 * mom["se_cov"][0, 0])


class TestForward:
    def test_moments_at_t1(self, plain_tables):
        spec, grid, _ = plain_tables
        batch = forward_em(spec, np.array([2.0]), grid, seed=1, n_paths=20000, record_times=[1.0])
        assert within_3se(ensemble_moments(batch.at(1.0)), 2 * math.exp(-0.5), 1 - math.exp(-1))

    def test_seed_determinism_and_thread_independence(self, plain_tables, monkeypatch):
        spec, grid, _ = plain_tables
        monkeypatch.setenv("DIFFLAB_THREADS", "1")
        a = forward_em(spec, np.array([2.0]), grid, seed=5, n_paths=9000, record_times=[0.5])
        monkeypatch.setenv("DIFFLAB_THREADS", "4")
        b = forward_em(spec, np.array([2.0]), grid, seed=5, n_paths=9000, record_times=[0.5])
        c = forward_em(spec, np.array([2.0]), grid, seed=6, n_paths=9000, record_times=[0.5])
        assert np.array_equal(a.paths, b.paths)
        assert not np.array_equal(a.paths, c.paths)

    def test_rows_layout(self, plain_tables):
        spec, grid, _ = plain_tables
        batch = forward_em(spec, np.array([2.0]), grid, seed=0, n_paths=3, record_times=[0.0, 0.5])
        rows = batch.rows()
        assert rows.shape == (6, 3)
        np.testing.assert_array_equal(rows[:, 0], [0, 0, 1, 1, 2, 2])
        np.testing.assert_array_equal(rows[:2, 2], [2.0, batch.paths[0, 1, 0]])

    def test_off_grid_record_time(self, plain_tables):
        spec, grid, _ = plain_tables
        with pytest.raises(DomainError):
            forward_em(spec, np.array([2.0]), grid, seed=0, n_paths=2, record_times=[0.123456])


class TestBackwardPath:
    def test_closed_form_value(self, plain_tables):
        _, _, tables = plain_tables
        x = exact_backward_path(tables, np.array([2.0]), np.array([0.3]), 1.0)
        assert x[0] == pytest.approx(plain_backward(2.0, 0.3, 1.0, 5.0), rel=1e-14)
        assert x[0] == pytest.approx(1.4524, abs=5e-5)

    def test_endpoints(self, plain_tables):
        _, _, tables = plain_tables
        x0, xT = np.array([2.0]), np.array([0.3])
        assert exact_backward_path(tables, x0, xT, 0.0)[0] == 2.0
        end = exact_backward_path(tables, x0, xT, 5.0)[0]
        assert end == pytest.approx(0.3 + math.exp(-2.5) * 2.0, rel=1e-14)
        assert abs(end - 0.3) <= math.exp(-2.5) * 2.0 * (1 + 1e-12)
        assert exact_backward_path(tables, x0, xT, 5.0, pin_endpoint=True)[0] == pytest.approx(0.3, rel=1e-14)

    def test_probability_flow_reproduces_path(self, plain_tables):
        spec, _, tables = plain_tables
        x0, xT = np.array([2.0]), np.array([0.3])
        start = exact_backward_path(tables, x0, xT, 5.0)
        end = probability_flow_integrate(spec, tables, ScoreModel.single(x0, tables), start, 5.0, 1.0, 10000)
        assert abs(end[0] - exact_backward_path(tables, x0, xT, 1.0)[0]) < 1e-6

    def test_probability_flow_general_process(self, rotation_tables):
        spec, _, tables = rotation_tables
        x0, xT = np.array([1.0, -0.5]), np.array([0.4, 0.2])
        start = exact_backward_path(tables, x0, xT, 2.0)
        end = probability_flow_integrate(spec, tables, ScoreModel.single(x0, tables), start, 2.0, 0.5, 2000)
        assert np.abs(end - exact_backward_path(tables, x0, xT, 0.5)).max() < 1e-6

    def test_mixture_flow_lands_on_a_data_point(self):
        spec = plain_vanilla_spec(exponential_schedule(1.0, 5.0), 1, 5.0)
        tables = make_tables(spec, TimeGrid.uniform(5.0, 512))
        pts = np.array([[-1.5], [1.5]])
        model = ScoreModel.mixture(pts, tables)
        starts = np.array([[-1.0], [-0.5], [-0.05], [0.05], [0.5], [1.0]])
        dists = []
        for t_min in (5e-4, 5e-5):
            end = probability_flow_integrate(spec, tables, model, starts, 5.0, t_min, 500, t_min=t_min,
                                             spacing="geometric")
            np.testing.assert_array_equal(np.sign(end[:, 0]), np.sign(starts[:, 0]))
            dist = np.min(np.abs(end - pts.T), axis=1)
            # leftover noise is sqrt(1 - alpha(t_min)) times an O(1) effective eps
            assert dist.max() <= 2.0 * math.sqrt(1.0 - math.exp(-t_min))
            dists.append(dist)
        assert np.all(dists[0] / dists[1] > 2.5)


class TestReverseSDE:
    @pytest.mark.parametrize("lam", [1.0, 2.0])
    def test_marginal_at_t1(self, plain_tables, lam):
        spec, grid, tables = plain_tables
        x0 = np.array([2.0])
        rng = np.random.default_rng(int(lam))
        n = 20000
        xT = math.exp(-2.5) * 2.0 + math.sqrt(1 - math.exp(-5.0)) * rng.standard_normal((n, 1))
        batch = reverse_sde_sample(spec, tables, ReverseConfig(lam, ScoreModel.single(x0, tables)), xT, grid,
                                   seed=3, record_times=[1.0], t_stop=1.0)
        assert within_3se(ensemble_moments(batch.at(1.0)), 2 * math.exp(-0.5), 1 - math.exp(-1))

    def test_negative_lambda_rejected(self, plain_tables):
        with pytest.raises(Exception):
            ReverseConfig(-1.0, None)

    def test_generic_score_callable_matches_affine(self, rotation_tables):
        spec, grid, tables = rotation_tables
        model = ScoreModel.single([1.0, 0.0], tables)
        xT = np.random.default_rng(0).standard_normal((50, 2))
        a = reverse_sde_sample(spec, tables, ReverseConfig(1.0, model), xT, grid, seed=2, t_stop=1.0)
        b = reverse_sde_sample(spec, tables, ReverseConfig(1.0, lambda x, t: model(x, t)), xT, grid,
                               seed=2, t_stop=1.0)
        assert np.abs(a.paths - b.paths).max() < 1e-10


class TestExponentialIntegrator:
    def test_single_step_exact_on_general_process(self, rotation_tables):
        _, grid, tables = rotation_tables
        rng = np.random.default_rng(4)
        for _ in range(10):
            x0, xT = rng.standard_normal(2), rng.standard_normal(2)
            t = grid.times[rng.integers(0, len(grid) - 1)]
            eps = fixed_epsilon(tables, x0, xT)
            start = exact_backward_path(tables, x0, xT, 2.0)
            out = ei_step(tables, start, 2.0, t, eps)
            assert np.abs(out - exact_backward_path(tables, x0, xT, t)).max() < 1e-10

    def test_literal_ordering_differs_when_noncommuting(self, rotation_tables):
        _, _, tables = rotation_tables
        x, eps = np.array([0.3, -0.2]), np.array([1.0, 0.5])
        a = ei_step(tables, x, 2.0, 0.5, eps)
        b = ei_step(tables, x, 2.0, 0.5, eps, ordering="literal")
        assert np.abs(a - b).max() > 1e-4

    def test_literal_ordering_same_for_scalar(self, plain_tables):
        _, _, tables = plain_tables
        a = ei_step(tables, np.array([0.3]), 5.0, 1.0, np.array([0.7]))
        b = ei_step(tables, np.array([0.3]), 5.0, 1.0, np.array([0.7]), ordering="literal")
        assert a[0] == pytest.approx(b[0], rel=1e-14)

    def test_state_dependent_chain_recovers_x0(self, plain_tables):
        _, grid, tables = plain_tables
        x0, xT = np.array([2.0]), np.array([0.3])
        start = exact_backward_path(tables, x0, xT, 5.0)
        states = ei_chain(tables, start, chain_times(grid, 50), "state-dependent", score=ScoreModel.single(x0, tables))
        assert abs(states[-1, 0] - 2.0) < 1e-4

    def test_off_grid_rejected_without_interpolate(self, rotation_tables):
        _, _, tables = rotation_tables
        with pytest.raises(DomainError):
            ei_step(tables, np.zeros(2), 2.0, 0.3333, np.zeros(2))


class TestDDIM:
    def test_chain_reaches_data(self):
        spec, grid = plain()
        tables = make_tables(spec, grid)
        times = chain_times(grid, 50)
        alphas = np.exp(-times)
        assert alphas[0] == pytest.approx(math.exp(-5.0))
        states = ddim_chain(alphas, np.array([0.3]), "from-xT")
        assert abs(states[-1, 0]) < 1e-6
        for t, x in zip(times, states):
            assert abs(x[0] - exact_backward_path(tables, np.zeros(1), np.array([0.3]), t)[0]) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(-3, 3), st.floats(-3, 3))
    def test_matches_ei_by_substitution(self, t1, t2, x, e):
        tables = _plain_tables()
        t_s, t_p = max(t1, t2), min(t1, t2)
        a_s, a_p = math.exp(-t_s), math.exp(-t_p)
        dd = ddim_step(a_s, a_p, np.array([x]), np.array([e]))
        ei = ei_step(tables, np.array([x]), t_s, t_p, np.array([e]), interpolate=True)
        # sqrt(1 - alpha) loses ~eps_mach / sqrt(1 - alpha) to cancellation near t = 0
        tol = 1e-12 + (1e-15 * abs(e) / math.sqrt(-math.expm1(-t_s)) if t_s > 0 else 0.0)
        assert abs(dd[0] - ei[0]) <= tol

    def test_rejects_bad_alpha(self):
        with pytest.raises(DomainError):
            ddim_step(0.0, 0.5, 1.0, 1.0)


class TestPaDDIM:
    schedules = (ExponentialRateSchedule(0.1, 20.0, 1.0), CosineSchedule(1.0))

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 6.3), st.floats(0.01, 1.0), st.floats(0.0, 1.0),
           arrays(np.float64, (2,), elements=st.floats(-3, 3)), arrays(np.float64, (2,), elements=st.floats(-3, 3)))
    def test_identical_schedules_reduce_to_ddim(self, theta, t1, frac, x, e):
        s = self.schedules[0]
        t_s, t_p = t1, t1 * frac
        axes = AxisScheduleSet(planar_rotation(theta), (s, s))
        out = paddim_step(axes, t_s, t_p, x, e)
        ref = ddim_step(float(s.alpha(t_s)), float(s.alpha(t_p)), x, e)
        assert np.abs(out - ref).max() <= 1e-12 * (1 + np.abs(ref).max())

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 6.3), st.floats(0.01, 1.0), st.floats(0.0, 1.0),
           arrays(np.float64, (2,), elements=st.floats(-3, 3)), arrays(np.float64, (2,), elements=st.floats(-3, 3)))
    def test_rotation_equivariance(self, theta, t1, frac, x, e):
        R = planar_rotation(theta)
        coord = AxisScheduleSet(np.eye(2), self.schedules)
        rotated = AxisScheduleSet(R.T, self.schedules)
        a = paddim_step(rotated, t1, t1 * frac, x, e)
        b = R @ paddim_step(coord, t1, t1 * frac, R.T @ x, R.T @ e)
        assert np.abs(a - b).max() <= 1e-12 * (1 + np.abs(a).max())

    def test_coordinate_axes_are_independent(self):
        coord = AxisScheduleSet(np.eye(2), self.schedules)
        x, e = np.array([0.4, -1.0]), np.array([0.2, 0.9])
        out = paddim_step(coord, 0.8, 0.3, x, e)
        for m, s in enumerate(self.schedules):
            assert out[m] == pytest.approx(ddim_step(float(s.alpha(0.8)), float(s.alpha(0.3)), x[m], e[m]), abs=1e-15)

    def test_partial_axes_use_default(self):
        s = self.schedules[0]
        axes = AxisScheduleSet(np.array([[0.6, 0.8]]), (s,), default_schedule=s)
        x, e = np.array([0.4, -1.0]), np.array([0.2, 0.9])
        ref = ddim_step(float(s.alpha(0.8)), float(s.alpha(0.3)), x, e)
        np.testing.assert_allclose(paddim_step(axes, 0.8, 0.3, x, e), ref, atol=1e-14)


_CACHE = {}


def _plain_tables():
    if "t" not in _CACHE:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            spec, grid = plain(n=64)
            _CACHE["t"] = make_tables(spec, grid)
    return _CACHE["t"]
