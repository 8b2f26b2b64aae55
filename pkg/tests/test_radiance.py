import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudshape import AlphaField, BetaProfile, DomainError, GraphCloud, PolarCloud, SunModel, solar_alpha
from cloudshape.radiance import beta_eval, beta_slope, emission


class TestBetaProfile:
    def test_sine_knots(self):
        b = BetaProfile.sine(10)
        assert b.P == 10
        np.testing.assert_allclose(b.knots, np.sin(np.pi * np.arange(11) / 10), atol=1e-15)
        assert b.nadir_value == 1.0

    def test_normalization_enforced(self):
        with pytest.raises(ValueError):
            BetaProfile(np.array([0.0, 2.0, 0.0]), "nadir")
        with pytest.raises(ValueError):
            BetaProfile(np.array([0.0, -1.0, 0.0]), "none")
        with pytest.raises(ValueError):
            BetaProfile(np.array([0.0, 1.0, 0.0]), "sideways")

    def test_unit_integral(self):
        b = BetaProfile.from_function(np.sin, 20, "unit-integral")
        assert b.integral == pytest.approx(1.0, abs=1e-12)
        # trapezoid rule on the knots is the exact integral of the interpolant
        fine = np.linspace(0, np.pi, 200001)
        assert np.trapezoid(beta_eval(b, fine), fine) == pytest.approx(1.0, abs=1e-9)

    def test_gauge_scaling_round_trip(self):
        b = BetaProfile.sine(10)
        back = b.scaled(3.0).normalized()
        np.testing.assert_allclose(back.knots, b.knots, rtol=1e-15)


class TestBetaEval:
    def test_nadir_knot(self):
        assert beta_eval(BetaProfile.sine(10), np.pi / 2) == 1.0

    def test_zero_at_horizon(self):
        assert beta_eval(BetaProfile.sine(10), 0.0) == 0.0

    def test_between_knots(self):
        b = BetaProfile.sine(10)
        a0, a1 = 3 * np.pi / 10, 4 * np.pi / 10
        w = (np.pi / 3 - a0) / (a1 - a0)
        expect = (1 - w) * np.sin(a0) + w * np.sin(a1)
        got = beta_eval(b, np.pi / 3)
        assert got == pytest.approx(expect, abs=1e-15)
        assert 0 < np.sin(np.pi / 3) - got < (np.pi / 10) ** 2

    @pytest.mark.parametrize("angle", [-1e-9, np.pi + 1e-9, np.nan])
    def test_domain(self, angle):
        with pytest.raises(DomainError):
            beta_eval(BetaProfile.sine(10), angle)

    def test_second_order_convergence(self):
        fine = np.linspace(0, np.pi, 20001)
        errs = [np.abs(beta_eval(BetaProfile.sine(P), fine) - np.sin(fine)).max()
                for P in (10, 20, 40, 80)]
        rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        np.testing.assert_allclose(rates, 2.0, atol=0.05)
        # max interpolation error of a function with |f''| <= 1
        for P, e in zip((10, 20, 40, 80), errs):
            assert e <= (np.pi / P) ** 2 / 8 + 1e-15


class TestBetaSlope:
    def test_first_segment(self):
        s = beta_slope(BetaProfile.sine(10), np.pi / 20)
        assert s == pytest.approx(np.sin(np.pi / 10) / (np.pi / 10), rel=1e-14)
        assert s == pytest.approx(0.98363, abs=5e-6)

    def test_symmetry(self):
        b = BetaProfile.sine(10)
        for m in range(5):
            a = (m + 0.5) * np.pi / 10
            assert beta_slope(b, np.pi - a) == pytest.approx(-beta_slope(b, a), abs=1e-14)

    def test_constant(self):
        b = BetaProfile(np.ones(7))
        np.testing.assert_array_equal(beta_slope(b, np.linspace(0, np.pi, 50)), 0.0)

    def test_left_tie_break(self):
        b = BetaProfile.sine(10)
        k = 3 * np.pi / 10
        left = (np.sin(k) - np.sin(2 * np.pi / 10)) / (np.pi / 10)
        assert beta_slope(b, k) == pytest.approx(left, rel=1e-13)


class TestEmission:
    # knots every pi/12 contain pi/4, pi/3 and pi/2, so the profile is exactly sin there
    sine12 = BetaProfile.sine(12)

    def test_nadir(self):
        assert emission(2.0, BetaProfile.sine(10), 0.0, np.pi / 2) == 2.0

    def test_oblique_flat(self):
        assert emission(1.5, self.sine12, 0.0, np.pi / 3) == pytest.approx(1.5 * np.sin(np.pi / 3), rel=1e-14)
        assert emission(1.5, self.sine12, 0.0, np.pi / 3) == pytest.approx(1.29904, abs=5e-6)

    def test_tilted_surface(self):
        assert emission(1.0, self.sine12, 1.0, np.pi / 2) == pytest.approx(np.sin(np.pi / 4), rel=1e-14)

    def test_incoming_direction_rejected(self):
        with pytest.raises(DomainError):
            emission(1.0, self.sine12, 10.0, 0.05)

    @settings(max_examples=200)
    @given(st.floats(0.01, 10), st.floats(0.01, 100), st.floats(-3, 3), st.floats(0.05, np.pi - 0.05))
    def test_gauge(self, a, c, slope, phi):
        if not 0 < phi - np.arctan(slope) < np.pi:
            return
        b = BetaProfile.sine(10)
        u = emission(a, b, slope, phi)
        v = emission(c * a, b.scaled(1 / c), slope, phi)
        assert v == pytest.approx(u, rel=1e-14, abs=1e-300)


class TestAlphaField:
    def test_layout(self):
        a = AlphaField(np.array([1.0, 2.0]), 0.5, 0.7)
        np.testing.assert_array_equal(a.as_vector(), [1.0, 2.0, 0.5, 0.7])
        assert a.from_vector([3.0, 4.0, 5.0, 6.0]).alpha_R == 6.0
        assert not AlphaField(np.ones(3)).has_sides

    def test_invalid(self):
        with pytest.raises(ValueError):
            AlphaField(np.array([1.0, -0.1]), 1.0, 1.0)
        with pytest.raises(ValueError):
            AlphaField(np.array([1.0]), 1.0, None)


class TestSolarAlpha:
    def flat(self):
        return GraphCloud(0.0, 10.0, 0.0, np.full(11, 2.0))

    def test_flat_low_sun(self):
        a = solar_alpha(self.flat(), SunModel(np.pi / 6, 0.2))
        np.testing.assert_allclose(a.segment_values, 0.5, atol=1e-15)

    def test_overhead_flat(self):
        a = solar_alpha(self.flat(), SunModel(np.pi / 2, 0.2))
        np.testing.assert_allclose(a.segment_values, 1.0, atol=1e-15)

    def test_faces_away(self):
        a = solar_alpha(self.flat(), SunModel(np.pi / 6, 0.2))
        # the left wall faces -x while the sun is in the +x half plane
        assert a.alpha_L == 0.2
        assert a.alpha_R == pytest.approx(np.cos(np.pi / 6), rel=1e-14)

    def test_mirror(self):
        a = solar_alpha(self.flat(), SunModel(np.pi / 6, 0.2, mirror=True))
        assert a.alpha_R == 0.2
        assert a.alpha_L == pytest.approx(np.cos(np.pi / 6), rel=1e-14)

    def test_self_shadowing(self):
        x = np.linspace(0.0, 10.0, 41)
        h = 1.0 + 3.0 * np.exp(-((x - 2.5) / 1.0) ** 2) + 3.0 * np.exp(-((x - 7.5) / 1.0) ** 2)
        cloud = GraphCloud(0.0, 10.0, 0.0, h)
        sun = SunModel(np.radians(10.0), 0.2)
        a = solar_alpha(cloud, sun).segment_values
        nu = cloud.boundary().normals[:40]
        lit_facing = nu @ sun.direction >= 0.2
        # some segments face the sun yet sit in the shadow of the right peak
        assert np.any(lit_facing & (a == 0.2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.05, np.pi - 0.05), st.floats(0.0, 1.0))
    def test_range(self, seed, elev, rho):
        rng = np.random.default_rng(seed)
        if rng.random() < 0.5:
            cloud = GraphCloud(0.0, 5.0, 0.0, 2 + rng.uniform(-1, 1, 12))
            vals = solar_alpha(cloud, SunModel(elev, rho)).as_vector()
        else:
            th = 2 * np.pi * np.arange(30) / 30
            cloud = PolarCloud(2 + 0.5 * np.cos(3 * th + rng.uniform(0, 6)))
            vals = solar_alpha(cloud, SunModel(elev, rho)).as_vector()
        assert np.all(vals >= rho - 1e-15) and np.all(vals <= 1 + 1e-15)

    def test_sun_model_validation(self):
        with pytest.raises(ValueError):
            SunModel(0.0)
        with pytest.raises(ValueError):
            SunModel(1.0, 1.5)
