"""Domain types, closed parameter forms, and the key=value config format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from photonswitch.model import (
    DEFAULT_G,
    PARAM_KEYS,
    AtomLevel,
    ConfigError,
    GDistribution,
    InvalidParameterError,
    SwitchState,
    SystemParams,
    cooperativity,
    critical_coupling_kex,
    format_keyvalue,
    params_from_mapping,
    parasitic_couplings,
    parse_keyvalue,
    switch_state_of,
)

# Frozen by evaluating the defining formulas directly:
#   C = g^2 / ((kappa_i + kappa_ex) * gamma)
#   critical kex = sqrt(kappa_i^2 + h^2)
C_DEFAULT = 243.0 / (37.6 * 2.94)  # = 2.198219713417282
C_CRITICAL_PROBE = 27.0**2 / ((7.6 + 7.67) * 2.94)  # = 16.23832244096067
KEX_CRITICAL = 7.665507158694719


class TestEnums:
    def test_level_order_is_fixed(self):
        assert [lv.value for lv in AtomLevel] == [0, 1, 2, 3]
        assert AtomLevel.G_MINUS < AtomLevel.G_ZERO < AtomLevel.G_PLUS < AtomLevel.EXCITED

    def test_switch_state_round_trip(self):
        for state in SwitchState:
            assert switch_state_of(state.atom_level) is state

    def test_toggle_swaps_reflecting_states(self):
        assert SwitchState.REFLECT_RIGHTWARD.toggled() is SwitchState.REFLECT_LEFTWARD
        assert SwitchState.REFLECT_LEFTWARD.toggled() is SwitchState.REFLECT_RIGHTWARD
        assert SwitchState.INERT.toggled() is SwitchState.INERT

    def test_excited_has_no_switch_state(self):
        with pytest.raises(InvalidParameterError):
            switch_state_of(AtomLevel.EXCITED)


class TestSystemParams:
    def test_defaults(self):
        p = SystemParams()
        assert p.g == pytest.approx(27.0 / math.sqrt(3.0))
        assert p.g_minus == pytest.approx(p.g / 5.0)
        assert p.g_pi == pytest.approx(p.g / 7.0)
        assert p.kappa == pytest.approx(37.6)
        assert p.kappa_s == pytest.approx(p.kappa_ex / 100.0)

    def test_negative_rate_rejected(self):
        with pytest.raises(InvalidParameterError):
            SystemParams(kappa_i=-1.0)

    def test_parasitic_bounded_by_g(self):
        with pytest.raises(InvalidParameterError):
            SystemParams(g=1.0, g_minus=2.0, g_pi=0.1)
        with pytest.raises(InvalidParameterError):
            SystemParams(g=1.0, g_minus=0.1, g_pi=2.0)

    def test_with_coupling_rescales_legs_and_parasitics(self):
        p = SystemParams().with_coupling(27.0)
        assert p.g == pytest.approx(DEFAULT_G)
        assert p.g_minus == pytest.approx(DEFAULT_G / 5.0)
        assert p.g_pi == pytest.approx(DEFAULT_G / 7.0)
        # loss rates untouched
        assert p.kappa_i == 7.6 and p.kappa_ex == 30.0


class TestCooperativity:
    def test_experiment_value(self):
        assert cooperativity(SystemParams()) == pytest.approx(C_DEFAULT, abs=1e-12)
        assert cooperativity(SystemParams()) == pytest.approx(2.20, abs=0.005)

    def test_zero_coupling(self):
        assert cooperativity(SystemParams(g=0, g_minus=0, g_pi=0)) == 0.0

    def test_critical_coupling_probe(self):
        p = SystemParams(g=27.0, kappa_i=7.6, kappa_ex=7.67, gamma=2.94)
        assert cooperativity(p) == pytest.approx(C_CRITICAL_PROBE, abs=1e-9)
        assert cooperativity(p) == pytest.approx(16.2, abs=0.05)

    def test_zero_denominator_is_an_error(self):
        with pytest.raises(InvalidParameterError):
            cooperativity(SystemParams(kappa_i=0.0, kappa_ex=0.0))
        with pytest.raises(InvalidParameterError):
            cooperativity(SystemParams(gamma=0.0))

    @given(scale=st.floats(min_value=1e-3, max_value=1e3))
    def test_invariant_under_uniform_rate_scaling(self, scale):
        base = SystemParams(g=12.0, g_minus=0.0, g_pi=0.0, kappa_i=5.0,
                            kappa_ex=20.0, gamma=3.0)
        scaled = SystemParams(g=12.0 * scale, g_minus=0.0, g_pi=0.0,
                              kappa_i=5.0 * scale, kappa_ex=20.0 * scale,
                              gamma=3.0 * scale)
        assert cooperativity(scaled) == pytest.approx(cooperativity(base), rel=1e-9)


class TestCriticalCoupling:
    def test_experiment_value(self):
        assert critical_coupling_kex(7.6, 1.0) == pytest.approx(KEX_CRITICAL, abs=1e-12)
        assert critical_coupling_kex(7.6, 1.0) == pytest.approx(7.666, abs=1e-3)

    def test_no_backscatter_limit(self):
        assert critical_coupling_kex(7.6, 0.0) == 7.6

    def test_degenerate_limit(self):
        assert critical_coupling_kex(0.0, 1.0) == 1.0

    @given(kappa_i=st.floats(min_value=0, max_value=1e3),
           h=st.floats(min_value=0, max_value=1e3))
    def test_dominates_both_arguments(self, kappa_i, h):
        value = critical_coupling_kex(kappa_i, h)
        assert value >= max(kappa_i, h) - 1e-12
        if h == 0:
            assert value == kappa_i


class TestParasiticCouplings:
    def test_experiment_values(self):
        gm, gp = parasitic_couplings(15.59)
        assert gm == pytest.approx(3.118, abs=1e-9)
        assert gp == pytest.approx(2.227, abs=5e-4)

    def test_cycling_values(self):
        assert parasitic_couplings(27.0) == (
            pytest.approx(5.4), pytest.approx(3.857142857142857))

    def test_zero(self):
        assert parasitic_couplings(0.0) == (0.0, 0.0)

    @given(g=st.floats(min_value=1e-6, max_value=1e6))
    def test_missing_overlap_is_four_percent(self, g):
        gm, _ = parasitic_couplings(g)
        assert (gm / g) ** 2 == pytest.approx(0.04, rel=1e-12)


class TestGDistribution:
    def test_rejection_keeps_samples_nonnegative(self):
        dist = GDistribution(mean_g=2.0, sigma_g=10.0)  # heavy negative tail
        rng = np.random.default_rng(7)
        samples = dist.sample(rng, size=20_000)
        assert (samples >= 0.0).all()

    def test_moments_at_default(self):
        dist = GDistribution()
        rng = np.random.default_rng(11)
        samples = dist.sample(rng, size=200_000)
        # rejection at 0 barely distorts a N(27, 10) draw
        assert samples.mean() == pytest.approx(27.0, abs=0.15)
        assert samples.std() == pytest.approx(10.0, abs=0.15)

    def test_scalar_draw_deterministic(self):
        a = GDistribution().sample(np.random.default_rng(3))
        b = GDistribution().sample(np.random.default_rng(3))
        assert a == b

    def test_negative_sigma_rejected(self):
        with pytest.raises(InvalidParameterError):
            GDistribution(sigma_g=-1.0)


class TestKeyValueConfig:
    def test_parse_basic(self):
        text = "g = 15.6\n# comment line\nkappa_i = 7.6  # trailing\n\nh=1\n"
        assert parse_keyvalue(text) == {"g": "15.6", "kappa_i": "7.6", "h": "1"}

    def test_params_round_trip(self):
        p = SystemParams(g=20.0, g_minus=4.0, g_pi=3.0, kappa_i=5.0,
                         kappa_ex=25.0, h=0.5, gamma=3.0, kappa_s=0.25)
        text = format_keyvalue({k: getattr(p, k) for k in PARAM_KEYS})
        assert params_from_mapping(parse_keyvalue(text)) == p

    def test_unknown_key_is_an_error(self):
        with pytest.raises(ConfigError, match="unknown"):
            params_from_mapping({"g": "15", "coupling_g": "15"})

    def test_malformed_line_reports_lineno(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_keyvalue("g = 1\nnonsense\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_keyvalue("g = 1\ng = 2\n")

    def test_non_numeric_value_rejected(self):
        with pytest.raises(ConfigError, match="number"):
            params_from_mapping({"g": "fast"})

    @given(st.dictionaries(st.sampled_from(PARAM_KEYS),
                           st.floats(min_value=0.001, max_value=50.0),
                           max_size=4))
    @settings(max_examples=50)
    def test_partial_mappings_fall_back_to_defaults(self, mapping):
        # keep invariants satisfiable: never push parasitics above g
        mapping.pop("g_minus", None)
        mapping.pop("g_pi", None)
        mapping["g"] = mapping.get("g", 15.0) + 10.0
        p = params_from_mapping({k: repr(v) for k, v in mapping.items()})
        for key, value in mapping.items():
            assert getattr(p, key) == pytest.approx(value)
