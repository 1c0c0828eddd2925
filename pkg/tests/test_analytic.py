"""Spectra, closed-form probabilities, and the exact one-photon scattering
matrix.

Frozen reference numbers were produced by two independent routes before the
module was written: a non-Hermitian eigendecomposition of the cascaded
single-excitation problem with closed-form time integrals, and a dense
trapezoid spectral average.  Both agreed to nine digits.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from photonswitch.analytic import (
    FitReport,
    ScatteringProbabilities,
    SpectrumPoint,
    atom_cavity_transmission,
    averaged_atom_spectrum,
    empty_cavity_transmission,
    exponential_source_scattering,
    fit_spectrum,
    gaussian_source_scattering,
    gaussian_spectral_sigma,
    read_spectrum_csv,
    reflection_probability,
    single_photon_scattering,
    transmission_probability,
    write_spectrum_csv,
)
from photonswitch.model import (
    AtomLevel,
    GDistribution,
    InvalidParameterError,
    SystemParams,
    critical_coupling_kex,
)

# --- frozen reference values -------------------------------------------------
EMPTY_T0_H1 = 0.35356908507135837
EMPTY_T0_H0 = 0.3549117247623356
ATOM_T0_CRITICAL = 0.8869334078116596  # g=27, kappa_ex=sqrt(kappa_i^2+h^2)

# closed forms at the default operating point
PR_IDEAL = 0.422526930
PT_IDEAL = 0.002945888
# same formulas with the cooperativity pinned to exactly 2.2
GAMMA_C22 = 243.0 / (37.6 * 2.2)
PR_C22 = 0.4226536782746229
PT_C22 = 0.002956479944559014

# leaky-source averages, h=0 (eigendecomposition method)
EXP_OFF_KS030 = (0.416017211, 0.009709887)  # (reflect, transmit), parasitics off
EXP_OFF_KS0003 = (0.422461096, 0.003013623)
EXP_ON_KS030_GMINUS = (0.401070726, 0.030123800)
EXP_ON_KS030_GPLUS = (0.016042829, 0.346822198)

# Gaussian-pulse averages, fixed g, parasitics on, h=0 (trapezoid method)
GAUSS50_GMINUS = (0.397228803, 0.025481324)
GAUSS50_GPLUS = (0.015889152, 0.347712414)
GAUSS15_GMINUS = (0.319961020, 0.078937101)
SIGMA_NU_50NS = 3.7478125025855515

# (g^2 + g_pi^2) / (g^2 + g_pi^2 + g_minus^2) with the 1/5, 1/7 ratios
TOGGLE_GIVEN_R = 1250.0 / 1299.0


def flat_params(**overrides) -> SystemParams:
    """Defaults with backscatter off; matches the trajectory Hamiltonian."""
    base = dict(h=0.0)
    base.update(overrides)
    return SystemParams(**base)


class TestEmptyCavity:
    def test_overcoupled_resonance(self):
        assert empty_cavity_transmission(0.0, 7.6, 30.0, 1.0) == pytest.approx(
            EMPTY_T0_H1, abs=1e-12)
        assert empty_cavity_transmission(0.0, 7.6, 30.0, 1.0) == pytest.approx(
            0.354, abs=5e-4)
        assert empty_cavity_transmission(0.0, 7.6, 30.0, 0.0) == pytest.approx(
            EMPTY_T0_H0, abs=1e-12)

    def test_critical_coupling_kills_transmission(self):
        kex = critical_coupling_kex(7.6, 1.0)
        assert empty_cavity_transmission(0.0, 7.6, kex, 1.0) < 1e-10

    def test_far_detuned_limit(self):
        assert empty_cavity_transmission(1e8, 7.6, 30.0, 1.0) == pytest.approx(
            1.0, abs=1e-5)
        assert empty_cavity_transmission(-1e8, 7.6, 30.0, 1.0) == pytest.approx(
            1.0, abs=1e-5)

    @given(delta=st.floats(min_value=0, max_value=500),
           h=st.floats(min_value=0, max_value=10))
    def test_even_in_detuning(self, delta, h):
        plus = empty_cavity_transmission(delta, 7.6, 30.0, h)
        minus = empty_cavity_transmission(-delta, 7.6, 30.0, h)
        assert plus == pytest.approx(minus, rel=1e-12, abs=1e-15)

    def test_unique_zero_of_resonant_transmission(self):
        crit = critical_coupling_kex(7.6, 1.0)
        assert empty_cavity_transmission(0.0, 7.6, crit, 1.0) < 1e-20
        for kex in (crit - 2.0, crit - 0.5, crit + 0.5, crit + 2.0, 30.0):
            assert empty_cavity_transmission(0.0, 7.6, kex, 1.0) > 1e-4

    def test_vectorized_matches_scalar(self):
        grid = np.linspace(-40, 40, 17)
        vec = empty_cavity_transmission(grid, 7.6, 30.0, 1.0)
        assert vec == pytest.approx(
            [empty_cavity_transmission(d, 7.6, 30.0, 1.0) for d in grid])


class TestAtomSpectrum:
    def params_critical(self) -> SystemParams:
        kex = critical_coupling_kex(7.6, 1.0)
        return SystemParams(g=27.0, g_minus=0.0, g_pi=0.0, kappa_ex=kex)

    def test_decoupled_atom_reduces_to_empty_cavity(self):
        p = SystemParams()
        grid = np.linspace(-60, 60, 41)
        atom = atom_cavity_transmission(grid, 0.0, p)
        empty = empty_cavity_transmission(grid, p.kappa_i, p.kappa_ex, p.h)
        np.testing.assert_allclose(atom, empty, rtol=1e-12)

    def test_central_transparency_at_critical_coupling(self):
        t0 = atom_cavity_transmission(0.0, 27.0, self.params_critical())
        assert t0 == pytest.approx(ATOM_T0_CRITICAL, abs=1e-12)
        assert t0 > 0.5

    def test_minima_near_plus_minus_g(self):
        g = 200.0
        grid = np.linspace(-260, 260, 26001)
        t = atom_cavity_transmission(grid, g, self.params_critical())
        left = grid[grid < 0][np.argmin(t[grid < 0])]
        right = grid[grid > 0][np.argmin(t[grid > 0])]
        assert left == pytest.approx(-g, abs=2.0)
        assert right == pytest.approx(g, abs=2.0)

    @given(delta=st.floats(min_value=0, max_value=300))
    def test_even_in_detuning(self, delta):
        p = self.params_critical()
        assert atom_cavity_transmission(delta, 27.0, p) == pytest.approx(
            atom_cavity_transmission(-delta, 27.0, p), rel=1e-12, abs=1e-15)


class TestAveragedSpectrum:
    GRID = np.linspace(-60.0, 60.0, 121)

    def test_degenerate_spread_is_pointwise(self):
        p = SystemParams()
        pts = averaged_atom_spectrum(self.GRID, GDistribution(27.0, 0.0), p, 50)
        direct = atom_cavity_transmission(self.GRID, 27.0, p)
        assert [q.transmission for q in pts] == pytest.approx(list(direct), abs=1e-12)

    def test_deterministic_given_seed(self):
        p = SystemParams()
        a = averaged_atom_spectrum(self.GRID, GDistribution(), p, 200, seed=5)
        b = averaged_atom_spectrum(self.GRID, GDistribution(), p, 200, seed=5)
        assert [q.transmission for q in a] == [q.transmission for q in b]

    @staticmethod
    def _lobe_width(grid, trans):
        """Full width at half depth of the negative-detuning lobe."""
        mask = grid < 0
        sub_g, sub_t = grid[mask], trans[mask]
        bottom = sub_t.min()
        level = (1.0 + bottom) / 2.0
        below = sub_g[sub_t < level]
        return below.max() - below.min()

    def test_coupling_spread_broadens_lobes(self):
        kex = critical_coupling_kex(7.6, 1.0)
        p = SystemParams(g=27.0, g_minus=0.0, g_pi=0.0, kappa_ex=kex)
        sharp = np.array([q.transmission for q in averaged_atom_spectrum(
            self.GRID, GDistribution(27.0, 0.0), p, 1)])
        spread = np.array([q.transmission for q in averaged_atom_spectrum(
            self.GRID, GDistribution(27.0, 10.0), p, 3000, seed=2)])
        assert self._lobe_width(self.GRID, spread) > self._lobe_width(self.GRID, sharp)

    def test_central_point_insensitive_to_spread(self):
        kex = critical_coupling_kex(7.6, 1.0)
        p = SystemParams(g=27.0, g_minus=0.0, g_pi=0.0, kappa_ex=kex)
        sharp = atom_cavity_transmission(0.0, 27.0, p)
        pts = averaged_atom_spectrum([0.0], GDistribution(27.0, 10.0), p, 3000, seed=3)
        assert pts[0].transmission == pytest.approx(sharp, abs=0.1)

    def test_transmissions_stay_in_unit_interval(self):
        pts = averaged_atom_spectrum(self.GRID, GDistribution(), SystemParams(), 500)
        assert all(0.0 <= q.transmission <= 1.0 for q in pts)


class TestClosedFormProbabilities:
    def test_operating_point(self):
        p = SystemParams()
        assert reflection_probability(p) == pytest.approx(PR_IDEAL, abs=1e-8)
        assert transmission_probability(p) == pytest.approx(PT_IDEAL, abs=1e-8)

    def test_quoted_values_at_pinned_cooperativity(self):
        # the headline numbers are stated for C = 2.2 exactly
        p = SystemParams(gamma=GAMMA_C22)
        assert reflection_probability(p) == pytest.approx(PR_C22, abs=1e-12)
        assert transmission_probability(p) == pytest.approx(PT_C22, abs=1e-12)
        # four significant digits
        assert reflection_probability(p) == pytest.approx(0.4226, abs=1e-4)
        assert transmission_probability(p) == pytest.approx(0.00296, abs=5e-6)

    def test_no_atom_limits(self):
        p = SystemParams(g=0.0, g_minus=0.0, g_pi=0.0)
        assert reflection_probability(p) == 0.0
        q = SystemParams(g=0.0, g_minus=0.0, g_pi=0.0, kappa_i=7.6, kappa_ex=7.6)
        assert transmission_probability(q) == 0.0

    def test_strong_coupling_limits(self):
        p = SystemParams(g=1e7, kappa_i=0.0, kappa_ex=30.0)
        assert reflection_probability(p) == pytest.approx(1.0, abs=1e-9)
        q = SystemParams(g=1e7)
        assert transmission_probability(q) == pytest.approx(
            (q.kappa_i / q.kappa) ** 2, rel=1e-9)

    @given(g=st.floats(min_value=0, max_value=100),
           kappa_i=st.floats(min_value=0.1, max_value=100),
           kappa_ex=st.floats(min_value=0.1, max_value=100),
           gamma=st.floats(min_value=0.1, max_value=20))
    def test_budget_never_exceeds_unity(self, g, kappa_i, kappa_ex, gamma):
        p = SystemParams(g=g, g_minus=0.0, g_pi=0.0, kappa_i=kappa_i,
                         kappa_ex=kappa_ex, gamma=gamma)
        assert reflection_probability(p) + transmission_probability(p) <= 1.0 + 1e-12


class TestSinglePhotonScattering:
    @given(delta=st.floats(min_value=-200, max_value=200),
           h=st.floats(min_value=0, max_value=5))
    @settings(max_examples=60)
    def test_unitarity(self, delta, h):
        p = SystemParams(h=h)
        out = single_photon_scattering(delta, p, AtomLevel.G_MINUS)
        assert out.total == pytest.approx(1.0, abs=1e-10)

    def test_decoupled_matches_empty_cavity_formula(self):
        p = SystemParams(g=0.0, g_minus=0.0, g_pi=0.0, h=1.0)
        for delta in (-31.0, 0.0, 4.5, 88.0):
            out = single_photon_scattering(delta, p)
            expected = empty_cavity_transmission(delta, p.kappa_i, p.kappa_ex, p.h)
            assert out.p_transmit == pytest.approx(expected, abs=1e-12)
            # with backscatter the photon can return without touching the atom
            assert out.reflect[int(AtomLevel.G_MINUS)] == out.p_reflect

    def test_resonant_matches_closed_forms(self):
        p = flat_params(g_minus=0.0, g_pi=0.0)
        out = single_photon_scattering(0.0, p)
        assert out.p_reflect == pytest.approx(reflection_probability(p), abs=1e-12)
        assert out.p_transmit == pytest.approx(transmission_probability(p), abs=1e-12)

    def test_uncoupled_state_cannot_reflect(self):
        p = flat_params(g_minus=0.0, g_pi=0.0)
        out = single_photon_scattering(0.0, p, AtomLevel.G_PLUS)
        assert out.p_reflect == 0.0
        assert out.transmit[int(AtomLevel.G_MINUS)] == 0.0
        assert out.transmit[int(AtomLevel.G_ZERO)] == 0.0

    def test_left_right_symmetry(self):
        p = flat_params()
        fwd = single_photon_scattering(3.7, p, AtomLevel.G_MINUS, forward=True)
        bwd = single_photon_scattering(3.7, p, AtomLevel.G_PLUS, forward=False)
        np.testing.assert_allclose(fwd.transmit, bwd.transmit[::-1], atol=1e-14)
        np.testing.assert_allclose(fwd.reflect, bwd.reflect[::-1], atol=1e-14)

    def test_excited_initial_rejected(self):
        with pytest.raises(InvalidParameterError):
            single_photon_scattering(0.0, SystemParams(), AtomLevel.EXCITED)


class TestExponentialSourceScattering:
    def test_frozen_values_parasitics_off(self):
        p = flat_params(g_minus=0.0, g_pi=0.0, kappa_s=0.30)
        out = exponential_source_scattering(p)
        assert out.p_reflect == pytest.approx(EXP_OFF_KS030[0], abs=1e-8)
        assert out.p_transmit == pytest.approx(EXP_OFF_KS030[1], abs=1e-8)
        assert out.total == pytest.approx(1.0, abs=1e-9)

    def test_narrowband_limit_recovers_closed_forms(self):
        p = flat_params(g_minus=0.0, g_pi=0.0, kappa_s=0.003)
        out = exponential_source_scattering(p)
        assert out.p_reflect == pytest.approx(EXP_OFF_KS0003[0], abs=1e-8)
        assert out.p_transmit == pytest.approx(EXP_OFF_KS0003[1], abs=1e-8)
        assert out.p_reflect == pytest.approx(reflection_probability(p), abs=1e-4)
        assert out.p_transmit == pytest.approx(transmission_probability(p), abs=1e-4)

    def test_frozen_values_parasitics_on(self):
        p = flat_params(kappa_s=0.30)
        fwd = exponential_source_scattering(p, AtomLevel.G_MINUS)
        assert fwd.p_reflect == pytest.approx(EXP_ON_KS030_GMINUS[0], abs=1e-8)
        assert fwd.p_transmit == pytest.approx(EXP_ON_KS030_GMINUS[1], abs=1e-8)
        blocked = exponential_source_scattering(p, AtomLevel.G_PLUS)
        assert blocked.p_reflect == pytest.approx(EXP_ON_KS030_GPLUS[0], abs=1e-8)
        assert blocked.p_transmit == pytest.approx(EXP_ON_KS030_GPLUS[1], abs=1e-8)

    def test_toggle_given_reflection_is_coupling_ratio(self):
        out = exponential_source_scattering(flat_params(), AtomLevel.G_MINUS)
        assert out.toggle_given_reflection == pytest.approx(TOGGLE_GIVEN_R, abs=1e-9)


class TestGaussianSourceScattering:
    def test_spectral_width_convention(self):
        assert gaussian_spectral_sigma(50.0) == pytest.approx(SIGMA_NU_50NS, rel=1e-12)

    def test_frozen_values(self):
        p = flat_params()
        g50 = gaussian_source_scattering(p, 50.0, AtomLevel.G_MINUS)
        assert g50.p_reflect == pytest.approx(GAUSS50_GMINUS[0], abs=1e-7)
        assert g50.p_transmit == pytest.approx(GAUSS50_GMINUS[1], abs=1e-7)
        g50b = gaussian_source_scattering(p, 50.0, AtomLevel.G_PLUS)
        assert g50b.p_reflect == pytest.approx(GAUSS50_GPLUS[0], abs=1e-7)
        assert g50b.p_transmit == pytest.approx(GAUSS50_GPLUS[1], abs=1e-7)
        g15 = gaussian_source_scattering(p, 15.0, AtomLevel.G_MINUS)
        assert g15.p_reflect == pytest.approx(GAUSS15_GMINUS[0], abs=1e-7)
        assert g15.p_transmit == pytest.approx(GAUSS15_GMINUS[1], abs=1e-7)

    def test_toggle_given_reflection_is_coupling_ratio(self):
        out = gaussian_source_scattering(flat_params(), 50.0, AtomLevel.G_MINUS)
        assert out.toggle_given_reflection == pytest.approx(TOGGLE_GIVEN_R, abs=1e-9)

    def test_shorter_pulse_scatters_worse(self):
        p = flat_params()
        long = gaussian_source_scattering(p, 50.0).normalized_reflection
        short = gaussian_source_scattering(p, 15.0).normalized_reflection
        assert short < long


class TestSpectrumFileAndFit:
    def test_round_trip(self, tmp_path):
        pts = [SpectrumPoint(-1.5, 0.25), SpectrumPoint(0.0, 0.0),
               SpectrumPoint(2.25, 1.0)]
        path = tmp_path / "spec.csv"
        write_spectrum_csv(pts, path)
        assert read_spectrum_csv(path) == pts

    def test_header_is_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("detuning,transmission\n0,0.5\n")
        with pytest.raises(InvalidParameterError, match="header"):
            read_spectrum_csv(path)

    def test_fit_recovers_generating_parameters(self):
        kex = critical_coupling_kex(7.6, 1.0)
        p = SystemParams(g=27.0, g_minus=0.0, g_pi=0.0, kappa_ex=kex)
        grid = np.linspace(-60, 60, 121)
        pts = [SpectrumPoint(float(d), float(atom_cavity_transmission(d, 27.0, p)))
               for d in grid]
        report = fit_spectrum(pts, SystemParams(kappa_ex=kex, kappa_i=6.0, h=0.5))
        assert report.values["g"] == pytest.approx(27.0, abs=1e-3)
        assert report.values["kappa_i"] == pytest.approx(7.6, abs=1e-3)
        assert report.values["h"] == pytest.approx(1.0, abs=1e-2)

    def test_report_text_is_flat_json_lines(self):
        report = FitReport(values={"g": 27.0}, stderrs={"g": 0.5})
        text = report.as_text()
        assert '"g": 27.0' in text and '"stderr": 0.5' in text

    def test_spectrum_point_range_check(self):
        with pytest.raises(InvalidParameterError):
            SpectrumPoint(0.0, 1.5)
