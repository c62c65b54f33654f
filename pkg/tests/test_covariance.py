import math

import numpy as np
import pytest

from difflab.covariance import (
    CovarianceTrack, fokker_planck_residual, make_tables, sigma_by_ode, sigma_by_quadrature,
    sigma_ddim_closed_form, v_factor, v_identity_residual,
)
from difflab.errors import ContractError, NumericalError
from difflab.evolution import build_evolution
from difflab.process import (
    ConstantMatrix, DiagonalSchedule, ExponentialRateSchedule, ProcessSpec, RotationPlusDecay, TimeGrid,
    ddim_spec, exponential_schedule, plain_vanilla_spec,
)

from oracles import ROTATION_NOISE, ROTATION_SIGMA, euler_maruyama, rotation_drift

pytestmark = pytest.mark.filterwarnings("ignore:alpha\\(T\\)")


def rotation_spec():
    return ProcessSpec(2, 2.0, RotationPlusDecay([1.0, 2.0], 0.0, 0.3), ConstantMatrix(ROTATION_NOISE))


def diagonal_ddim():
    noise = DiagonalSchedule([ExponentialRateSchedule(0.1, 20.0, 1.0), exponential_schedule(3.0, 1.0)], "noise")
    return ddim_spec(noise, 1.0)


@pytest.fixture(scope="module")
def rotation_tables():
    spec = rotation_spec()
    grid = TimeGrid.uniform(2.0, 1024)
    return spec, grid, build_evolution(spec, grid)


class TestPlainVanilla:
    def setup_method(self):
        self.spec = plain_vanilla_spec(exponential_schedule(1.0, 5.0), 1, 5.0)
        self.grid = TimeGrid.uniform(5.0, 1000)
        self.tables = make_tables(self.spec, self.grid)

    def test_sigma_closed_form(self):
        assert self.tables.Sigma(1.0)[0, 0] == pytest.approx(0.6321205588285577, rel=1e-14)
        assert self.tables.Sigma(2.0)[0, 0] == pytest.approx(0.8646647167633873, rel=1e-14)

    def test_v_value(self):
        # sqrt(1 - e^{-1}) = 0.79506009...
        assert self.tables.V(1.0)[0, 0] == pytest.approx(0.7950600976, abs=1e-10)

    def test_ode_v_matches_closed_form(self):
        evo = build_evolution(self.spec, self.grid)
        track = sigma_by_quadrature(evo, self.spec)
        ode = v_factor(self.spec, evo, track, method="ode")
        closed = v_factor(self.spec, evo, track, method="closed-form")
        assert np.abs(ode.V - closed.V).max() < 1e-7

    def test_quadrature_matches_closed_form(self):
        evo = build_evolution(self.spec, self.grid)
        q = sigma_by_quadrature(evo, self.spec)
        np.testing.assert_allclose(q.Sigma[:, 0, 0], 1 - np.exp(-self.grid.times), atol=1e-10)


def test_isotropic_ode_per_axis():
    spec = ProcessSpec(3, 1.0, ConstantMatrix(-0.5 * np.eye(3)), ConstantMatrix(np.eye(3)))
    grid = TimeGrid.uniform(1.0, 200)
    for track in (sigma_by_ode(spec, grid), sigma_by_quadrature(build_evolution(spec, grid), spec)):
        np.testing.assert_allclose(track.Sigma[grid.index_of(0.5)], 0.3934693402873666 * np.eye(3), atol=1e-10)


class TestRotation:
    def test_frozen_sigma(self):
        spec = rotation_spec()
        grid = TimeGrid.uniform(2.0, 4096)
        q = sigma_by_quadrature(build_evolution(spec, grid), spec)
        for t, S in ROTATION_SIGMA.items():
            assert np.linalg.norm(q.Sigma[grid.index_of(t)] - S) < 1e-8

    def test_quadrature_agrees_with_ode(self, rotation_tables):
        spec, grid, evo = rotation_tables
        q = sigma_by_quadrature(evo, spec)
        o = sigma_by_ode(spec, grid)
        assert np.linalg.norm(q.Sigma - o.Sigma, axis=(1, 2)).max() < 1e-6

    def test_endpoint_correction_helps(self, rotation_tables):
        spec, grid, evo = rotation_tables
        ref = ROTATION_SIGMA[2.0]
        plain = sigma_by_quadrature(evo, spec, rule="trapezoid").Sigma[-1]
        corrected = sigma_by_quadrature(evo, spec).Sigma[-1]
        assert np.linalg.norm(corrected - ref) < 0.1 * np.linalg.norm(plain - ref)

    def test_monte_carlo_covariance(self):
        rng = np.random.default_rng(2024)
        x = euler_maruyama(rotation_drift, lambda t: ROTATION_NOISE, np.zeros(2), 1.0, 400, 100000, rng)
        emp = np.cov(x, rowvar=False)
        ref = ROTATION_SIGMA[1.0]
        assert np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 5e-2

    def test_v_factor(self, rotation_tables):
        spec, grid, evo = rotation_tables
        track = v_factor(spec, evo, sigma_by_quadrature(evo, spec))
        track.check()
        assert np.array_equal(track.V[0], np.zeros((2, 2)))
        gap = np.linalg.norm(track.V @ np.swapaxes(track.V, 1, 2) - track.Sigma, axis=(1, 2))
        assert gap.max() <= 1e-6
        assert v_identity_residual(spec, evo, track) < 1e-5

    def test_ddim_closed_form_rejected(self, rotation_tables):
        with pytest.raises(ContractError):
            sigma_ddim_closed_form(rotation_tables[2])


class TestDiagonalDDIM:
    def test_three_routes_agree(self):
        spec = diagonal_ddim()
        grid = TimeGrid.uniform(1.0, 2048)
        evo = build_evolution(spec, grid)
        closed = sigma_ddim_closed_form(evo).Sigma
        assert np.linalg.norm(sigma_by_quadrature(evo, spec).Sigma - closed, axis=(1, 2)).max() < 1e-8
        assert np.linalg.norm(sigma_by_ode(spec, grid).Sigma - closed, axis=(1, 2)).max() < 1e-8

    def test_v_identity(self):
        spec = diagonal_ddim()
        grid = TimeGrid.uniform(1.0, 2048)
        evo = build_evolution(spec, grid)
        track = v_factor(spec, evo, sigma_ddim_closed_form(evo))
        assert v_identity_residual(spec, evo, track) < 1e-6


class TestTrackChecks:
    def test_asymmetric_sigma_flagged(self):
        grid = TimeGrid.uniform(1.0, 2)
        S = np.zeros((3, 2, 2))
        S[1] = [[1.0, 0.1], [0.0, 1.0]]
        with pytest.raises(NumericalError) as exc:
            CovarianceTrack(grid, S, "test").check()
        assert exc.value.time == 0.5

    def test_negative_eigenvalue_flagged(self):
        grid = TimeGrid.uniform(1.0, 2)
        S = np.zeros((3, 1, 1))
        S[2] = -1e-6
        with pytest.raises(NumericalError):
            CovarianceTrack(grid, S, "test").check()

    def test_csv_columns(self, tmp_path, rotation_tables):
        spec, grid, evo = rotation_tables
        track = v_factor(spec, evo, sigma_by_quadrature(evo, spec))
        track.to_csv(tmp_path / "s.csv")
        head = (tmp_path / "s.csv").read_text().splitlines()[0]
        assert head == "t,Sigma_00,Sigma_01,Sigma_10,Sigma_11,V_00,V_01,V_10,V_11"


class TestTablesOffGrid:
    def test_sigma_and_v_between_nodes(self, rotation_tables):
        spec, grid, _ = rotation_tables
        coarse = make_tables(spec, grid)
        fine = make_tables(spec, TimeGrid.uniform(2.0, 4096, include=[0.3001, 0.0004]))
        for t in (0.3001, 0.0004):
            assert np.linalg.norm(coarse.Sigma(t) - fine.Sigma(t)) < 1e-8
            V = coarse.V(t)
            assert np.linalg.norm(V @ V.T - fine.Sigma(t)) < 1e-7


class TestFokkerPlanck:
    def test_plain_vanilla_residual(self):
        spec = plain_vanilla_spec(exponential_schedule(1.0, 5.0), 1, 5.0)
        probes = np.linspace(-3, 3, 25)[:, None]
        assert fokker_planck_residual(spec, np.array([2.0]), 1.0, probes, h=1e-3) <= 1e-4

    def test_rotation_residual_quarters(self):
        spec = rotation_spec()
        probes = np.stack(np.meshgrid(np.linspace(-1, 1.5, 5), np.linspace(-1, 0.5, 5)), -1).reshape(-1, 2)
        r = [fokker_planck_residual(spec, np.array([1.0, -0.5]), 0.5, probes, h) for h in (1e-2, 5e-3, 2.5e-3)]
        for a, b in zip(r, r[1:]):
            assert 3.5 < a / b < 4.5

    def test_frozen_process_stays_put(self):
        spec = ProcessSpec(1, 1.0, ConstantMatrix([[0.0]]), ConstantMatrix([[0.0]]))
        assert fokker_planck_residual(spec, np.array([0.0]), 0.5, np.array([[0.3]]), sigma0=np.eye(1)) == 0.0
