import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudshape import (AlphaField, BetaProfile, DetectorCircle, DetectorLine, GraphCloud, PolarCloud,
                        add_noise)
from cloudshape.jacobian import LinearizedSystem, StateVector, assemble_graph, curvature_penalty, forward
from cloudshape.solver import (GaugeError, SingularSystemError, SolverConfig, fix_gauge, gn_step,
                               initial_graph_state, initial_polar_state, reconstruct, shape_pins,
                               write_history)

from .conftest import MISR_ANGLES, ex4_heights, polar11_angles

LIMB = BetaProfile(0.3 + 0.7 * np.sin(np.pi * np.arange(11) / 10))


def window():
    return DetectorLine(3.0, 0.05, 60, 140, MISR_ANGLES)


def flat_constant():
    return StateVector(GraphCloud(0.0, 10.0, 0.0, np.full(51, 2.5)), AlphaField.constant(1.0, 50),
                       BetaProfile.sine(10))


def unseen_and_bc(system):
    norms = np.linalg.norm(system.A, axis=0)
    pins = np.union1d(system.pinned, shape_pins(system.state, "dirichlet"))
    return np.union1d(pins, np.flatnonzero(norms == 0))


@pytest.fixture(scope="module")
def ex4_problem():
    cloud = GraphCloud(0.0, 10.0, 0.0, ex4_heights())
    truth = StateVector(cloud, AlphaField.constant(1.0, 50), BetaProfile.sine(10))
    det = DetectorLine.covering(cloud, 6.0, 0.05, MISR_ANGLES)
    data = forward(truth, det)
    init = initial_graph_state(0.0, 10.0, 0.0, 51, height=float(ex4_heights().mean()),
                               ends=(cloud.heights[0], cloud.heights[-1]), beta=LIMB)
    return truth, data, init


@pytest.fixture(scope="module")
def ex4_result(ex4_problem):
    truth, data, init = ex4_problem
    return reconstruct(data, init, SolverConfig(max_iter=60))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"reg_weight": -1}, {"max_iter": 0}, {"tol_step": 0},
                                    {"tol_resid": -1e-3}, {"damping": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


class TestGnStep:
    def synthetic(self, m=80, seed=0):
        state = StateVector(GraphCloud(0.0, 1.0, 0.0, np.ones(4)), AlphaField.constant(1.0, 3),
                            BetaProfile.sine(2))
        n = state.pack().size
        Q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((m, n)))
        x = np.random.default_rng(seed + 1).standard_normal(n)
        B = np.zeros((2, n))
        B[:, state.layout()["shape"]] = curvature_penalty(4)
        gauge = np.array([state.layout()["beta"].start + 1])
        return LinearizedSystem(Q, Q @ x, state.layout(), B, np.arange(m), state, None, gauge), x

    def test_zero_residual(self, ex4_problem):
        truth, data, _ = ex4_problem
        sys = assemble_graph(truth, data.detector, data=data)
        assert not sys.rhs.any()
        np.testing.assert_array_equal(gn_step(sys, SolverConfig(reg_weight=1e-4)), 0.0)

    def test_orthogonal_columns(self):
        sys, x = self.synthetic()
        step = gn_step(sys, SolverConfig(reg_weight=0.0), pinned=[])
        np.testing.assert_allclose(step, x, atol=1e-12)

    def test_pinned_entries_are_zero(self):
        sys, x = self.synthetic()
        step = gn_step(sys, SolverConfig(reg_weight=0.0), pinned=[0, 5])
        assert step[0] == 0.0 and step[5] == 0.0

    def test_default_pins(self):
        sys, x = self.synthetic()
        step = gn_step(sys, SolverConfig(reg_weight=0.0))
        lay = sys.state.layout()
        assert step[lay["beta"].start + 1] == 0.0
        assert step[lay["shape"].start] == 0.0 and step[lay["shape"].stop - 1] == 0.0

    def test_flat_constant_needs_the_penalty(self):
        sys = assemble_graph(flat_constant(), window())
        sys.rhs = 1e-3 * np.random.default_rng(0).standard_normal(sys.rhs.size)
        pins = unseen_and_bc(sys)
        with pytest.raises(SingularSystemError) as err:
            gn_step(sys, SolverConfig(reg_weight=0.0), pinned=pins)
        assert err.value.report is not None
        assert err.value.report.rank_deficiency >= 1
        step = gn_step(sys, SolverConfig(reg_weight=1e-4), pinned=pins)
        assert np.all(np.isfinite(step))
        lay = sys.state.layout()
        # the step stays on the scale of the residual
        assert np.abs(step[lay["shape"]]).max() <= 10 * np.abs(sys.rhs).max()

    def test_explicit_weight(self):
        sys, x = self.synthetic()
        # penalty only pulls the shape block
        step = gn_step(sys, SolverConfig(), pinned=[], weight=1e6)
        lay = sys.state.layout()
        h = step[lay["shape"]]
        np.testing.assert_allclose(curvature_penalty(4) @ h, 0.0, atol=1e-4)


class TestFixGauge:
    def state(self):
        return StateVector(GraphCloud(0.0, 10.0, 0.0, ex4_heights()),
                           AlphaField(np.linspace(0.5, 1.5, 50), 0.7, 0.8), BetaProfile.sine(10))

    def test_identity(self):
        v = self.state()
        w = fix_gauge(v)
        np.testing.assert_array_equal(w.pack(), v.pack())

    def test_undo_scaling(self):
        v = self.state()
        w = fix_gauge(StateVector(v.cloud, v.alpha.scaled(2.0), v.beta.scaled(0.5)))
        np.testing.assert_array_equal(w.alpha.as_vector(), v.alpha.as_vector())
        np.testing.assert_array_equal(w.beta.knots, v.beta.knots)

    def test_bad_reference(self):
        v = self.state()
        knots = v.beta.knots.copy()
        knots[5] = 0.0
        with pytest.raises(GaugeError):
            fix_gauge(StateVector(v.cloud, v.alpha, BetaProfile(knots, "none")))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
    def test_measurements_unchanged(self, seed, c):
        rng = np.random.default_rng(seed)
        v = self.state()
        v = StateVector(v.cloud, AlphaField(rng.uniform(0.2, 2, 50), rng.uniform(0.2, 2), rng.uniform(0.2, 2)),
                        BetaProfile(c * rng.uniform(0.1, 1.0, 11), "none"))
        det = DetectorLine(6.0, 0.1, -60, 160, MISR_ANGLES)
        a = forward(v, det).values
        b = forward(fix_gauge(v), det).values
        np.testing.assert_allclose(b, a, rtol=1e-15 * 8, atol=1e-15 * np.abs(a).max())
        assert fix_gauge(v).beta.nadir_value == pytest.approx(1.0, abs=1e-15)

    def test_unit_integral(self):
        v = self.state()
        w = fix_gauge(v, "unit-integral")
        assert w.beta.integral == pytest.approx(1.0, abs=1e-14)


class TestReconstruct:
    def test_fixed_point(self, ex4_problem):
        truth, data, _ = ex4_problem
        res = reconstruct(data, truth)
        assert res.converged and res.iterations == 0
        assert res.status == "fixed point"
        np.testing.assert_array_equal(res.state.pack(), truth.pack())

    def test_example4_converges(self, ex4_problem, ex4_result):
        truth, _, _ = ex4_problem
        assert ex4_result.converged
        assert ex4_result.iterations <= 30
        rec = fix_gauge(ex4_result.state)
        h = truth.cloud.heights
        assert np.abs(rec.cloud.heights - h).max() / np.abs(h).max() <= 0.02
        assert np.abs(rec.alpha.segment_values - 1.0).max() <= 0.02

    def test_history_monotone(self, ex4_result):
        resid = [h["resid"] for h in ex4_result.history]
        assert len(resid) <= 60
        assert all(b < a for a, b in zip(resid, resid[1:]))
        assert all(h["cond_estimate"] >= 1 for h in ex4_result.history)

    def test_dirichlet_nodes_fixed(self, ex4_problem, ex4_result):
        _, _, init = ex4_problem
        h = ex4_result.state.cloud.heights
        assert h[0] == init.cloud.heights[0]
        assert h[-1] == init.cloud.heights[-1]

    def test_gauge_neutral(self, ex4_problem, ex4_result):
        _, data, init = ex4_problem
        other = StateVector(init.cloud, init.alpha.scaled(2.0), init.beta.scaled(0.5))
        res = reconstruct(data, other, SolverConfig(max_iter=60))
        a = fix_gauge(res.state).pack()
        b = fix_gauge(ex4_result.state).pack()
        assert np.linalg.norm(a - b) / np.linalg.norm(b) <= 1e-6

    def test_final_diagnostics(self, ex4_result):
        rep = ex4_result.diagnostics
        assert rep is not None and rep.rank_deficiency == 0

    def test_max_iter_reported(self, ex4_problem):
        _, data, init = ex4_problem
        res = reconstruct(data, init, SolverConfig(max_iter=1))
        assert res.iterations == 1
        assert not res.converged and res.status == "max_iter reached"

    def test_stagnation_reported(self, ex4_problem):
        # noisy data: once at the least-squares optimum no step lowers the misfit
        truth, data, _ = ex4_problem
        noisy = add_noise(data, 0.01, 3)
        first = reconstruct(noisy, truth, SolverConfig(max_iter=40))
        again = reconstruct(noisy, first.state, SolverConfig(max_iter=5))
        assert again.iterations == 1
        assert not again.converged and again.status == "stagnated"
        assert again.history[0]["step"] == 0.0
        np.testing.assert_array_equal(again.state.pack(), first.state.pack())

    def test_write_history(self, tmp_path, ex4_result):
        path = tmp_path / "history.csv"
        write_history(ex4_result, path)
        rows = list(csv.DictReader(path.open()))
        assert list(rows[0]) == ["iter", "resid", "step", "cond_estimate"]
        assert len(rows) == ex4_result.iterations
        assert float(rows[-1]["resid"]) == ex4_result.history[-1]["resid"]

    def test_mode_mismatch(self, ex4_problem):
        truth, data, _ = ex4_problem
        with pytest.raises(ValueError):
            reconstruct(data, truth, mode="polar")

    def test_speed_only_for_graphs(self):
        v = initial_polar_state(30, 3.0)
        det = DetectorCircle(8.0, 60, polar11_angles())
        with pytest.raises(ValueError):
            reconstruct(forward(v, det), v, with_speed=True)

    def test_flat_constant_speed_is_flagged(self):
        v = flat_constant()
        det = window()
        data = forward(StateVector(v.cloud.stretched(1 / 0.8), v.alpha, v.beta, 0.8), det)
        start = StateVector(v.cloud.stretched(1 / 0.8), v.alpha, v.beta, 1.0)
        res = reconstruct(data, start, with_speed=True)
        assert res.diagnostics.speed_inseparable

    def test_polar_circle_round_trip(self):
        th = 2 * np.pi * np.arange(60) / 60
        truth = StateVector(PolarCloud(3 + 0.2 * np.cos(2 * th)),
                            AlphaField(1 + 0.2 * np.sin(th), None, None), BetaProfile.sine(10))
        det = DetectorCircle(8.0, 240, polar11_angles())
        data = forward(truth, det)
        init = StateVector(PolarCloud(3 + 0.19 * np.cos(2 * th)), truth.alpha, truth.beta)
        res = reconstruct(data, init, SolverConfig(bc="none", max_iter=20))
        assert res.converged
        rec = fix_gauge(res.state)
        assert np.abs(rec.cloud.radii - truth.cloud.radii).max() <= 1e-6


class TestShapePins:
    def test_dirichlet(self):
        v = flat_constant()
        np.testing.assert_array_equal(shape_pins(v, "dirichlet"), [v.layout()["shape"].start,
                                                                   v.layout()["shape"].stop - 1])

    def test_polar_index(self):
        v = initial_polar_state(20, 2.0)
        assert shape_pins(v, 3)[0] == v.layout()["shape"].start + 3
        with pytest.raises(ValueError):
            shape_pins(v, "dirichlet")
        with pytest.raises(ValueError):
            shape_pins(v, 20)
        assert shape_pins(v, "none").size == 0
