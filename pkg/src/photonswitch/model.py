"""Shared domain types, unit conventions, and parameter-level closed forms.

Unit convention
---------------
Every rate in this package is a frequency ``nu = omega / 2pi`` in MHz (a
half-width), and every time is in ns.  Dynamical phases therefore evolve as
``omega = 2pi * 1e-3 * nu`` rad/ns, and a Lindblad operator ``sqrt(2*nu) x``
produces jumps at ``2 * nu * OMEGA_PER_MHZ * <x'x>`` per ns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Mapping

import numpy as np

# rad/ns produced by a 1 MHz rate
OMEGA_PER_MHZ = 2.0e-3 * math.pi

# Dipole projection of each lambda leg relative to the cycling transition:
# the F=1 -> F'=0 matrix elements are 1/sqrt(3) of the maximal coupling.
LAMBDA_PROJECTION = 1.0 / math.sqrt(3.0)

DEFAULT_G = 27.0 * LAMBDA_PROJECTION


class InvalidParameterError(ValueError):
    """A physical parameter is outside its allowed range."""


class ConfigError(ValueError):
    """A configuration file or mapping is malformed."""


class AtomLevel(IntEnum):
    """The four atomic levels: three F=1 ground sublevels and F'=0.

    The integer values fix the basis ordering used everywhere.
    """

    G_MINUS = 0  # m_F = -1
    G_ZERO = 1  # m_F = 0
    G_PLUS = 2  # m_F = +1
    EXCITED = 3  # F' = 0, m = 0


GROUND_LEVELS = (AtomLevel.G_MINUS, AtomLevel.G_ZERO, AtomLevel.G_PLUS)


class SwitchState(Enum):
    """Router state encoded in the atomic ground sublevel."""

    REFLECT_RIGHTWARD = "reflect_rightward"  # atom in m_F = -1
    REFLECT_LEFTWARD = "reflect_leftward"  # atom in m_F = +1
    INERT = "inert"  # atom in m_F = 0, barely interacting

    @property
    def atom_level(self) -> AtomLevel:
        return _STATE_TO_LEVEL[self]

    def toggled(self) -> "SwitchState":
        """State after one reflection event.

        A reflection swaps the two reflecting states; the inert state is
        unaffected because it scatters no photon.
        """
        if self is SwitchState.REFLECT_RIGHTWARD:
            return SwitchState.REFLECT_LEFTWARD
        if self is SwitchState.REFLECT_LEFTWARD:
            return SwitchState.REFLECT_RIGHTWARD
        return self


_STATE_TO_LEVEL = {
    SwitchState.REFLECT_RIGHTWARD: AtomLevel.G_MINUS,
    SwitchState.REFLECT_LEFTWARD: AtomLevel.G_PLUS,
    SwitchState.INERT: AtomLevel.G_ZERO,
}

_LEVEL_TO_STATE = {level: state for state, level in _STATE_TO_LEVEL.items()}


def switch_state_of(level: AtomLevel) -> SwitchState:
    """Map a ground sublevel to its router state."""
    try:
        return _LEVEL_TO_STATE[AtomLevel(level)]
    except KeyError:
        raise InvalidParameterError(
            f"{AtomLevel(level).name} is not a ground sublevel"
        ) from None


@dataclass(frozen=True)
class SystemParams:
    """Coupled atom-resonator-fiber rates, all in MHz (half-widths).

    Attributes:
        g: dominant coupling, forward mode to the m_F=-1 <-> F'=0 leg
            (equal in magnitude to the backward-mode coupling of the
            mirror leg).
        g_minus: parasitic coupling of each mode to the wrong-helicity leg.
        g_pi: parasitic coupling of each mode to the pi leg (m_F=0).
        kappa_i: intrinsic resonator loss half-width.
        kappa_ex: fiber coupling half-width.
        h: coupling between the counter-propagating resonator modes.
        gamma: free-space atomic emission half-width.
        kappa_s: inverse temporal width of the source pulse.
    """

    g: float = DEFAULT_G
    g_minus: float = DEFAULT_G / 5.0
    g_pi: float = DEFAULT_G / 7.0
    kappa_i: float = 7.6
    kappa_ex: float = 30.0
    h: float = 1.0
    gamma: float = 2.94
    kappa_s: float = 0.30

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise InvalidParameterError(f"{f.name} must be >= 0, got {value!r}")
        if self.g_minus > self.g:
            raise InvalidParameterError(
                f"g_minus={self.g_minus} exceeds g={self.g}"
            )
        if self.g_pi > self.g:
            raise InvalidParameterError(f"g_pi={self.g_pi} exceeds g={self.g}")

    @property
    def kappa(self) -> float:
        """Total resonator half-width kappa_i + kappa_ex."""
        return self.kappa_i + self.kappa_ex

    def without_parasitics(self) -> "SystemParams":
        return replace(self, g_minus=0.0, g_pi=0.0)

    def with_coupling(self, g_max: float) -> "SystemParams":
        """Rescale couplings for a sampled maximal (cycling) coupling.

        The lambda legs receive ``g_max / sqrt(3)`` and the parasitic
        couplings keep their fixed ratios to the leg coupling.
        """
        g = g_max * LAMBDA_PROJECTION
        g_minus, g_pi = parasitic_couplings(g)
        return replace(self, g=g, g_minus=g_minus, g_pi=g_pi)


@dataclass(frozen=True)
class GDistribution:
    """Gaussian spread of the maximal coupling over atom positions.

    Negative draws are unphysical and are rejected and redrawn.
    """

    mean_g: float = 27.0
    sigma_g: float = 10.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.mean_g) or self.mean_g < 0:
            raise InvalidParameterError(f"mean_g must be >= 0, got {self.mean_g!r}")
        if not math.isfinite(self.sigma_g) or self.sigma_g < 0:
            raise InvalidParameterError(f"sigma_g must be >= 0, got {self.sigma_g!r}")

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Draw couplings, rejecting negatives.

        Returns a float when ``size`` is None, else an ndarray of shape
        ``(size,)``.
        """
        if size is None:
            while True:
                value = rng.normal(self.mean_g, self.sigma_g)
                if value >= 0.0:
                    return float(value)
        out = rng.normal(self.mean_g, self.sigma_g, size=size)
        bad = out < 0.0
        while bad.any():
            out[bad] = rng.normal(self.mean_g, self.sigma_g, size=int(bad.sum()))
            bad = out < 0.0
        return out


def cooperativity(params: SystemParams) -> float:
    """Single-atom cooperativity g^2 / ((kappa_i + kappa_ex) * gamma).

    Uses the dominant coupling only; parasitic couplings never enter.
    """
    denom = (params.kappa_i + params.kappa_ex) * params.gamma
    if denom <= 0.0:
        raise InvalidParameterError(
            "cooperativity undefined: (kappa_i + kappa_ex) * gamma must be > 0"
        )
    return params.g**2 / denom


def critical_coupling_kex(kappa_i: float, h: float) -> float:
    """Fiber coupling at which the on-resonance empty-cavity transmission
    vanishes: sqrt(kappa_i^2 + h^2)."""
    if kappa_i < 0 or h < 0:
        raise InvalidParameterError("kappa_i and h must be >= 0")
    return math.hypot(kappa_i, h)


def parasitic_couplings(g: float) -> tuple[float, float]:
    """Residual couplings (g_minus, g_pi) = (g/5, g/7) from imperfect
    polarization overlap; (g_minus/g)^2 = 4% missing overlap."""
    if g < 0:
        raise InvalidParameterError("g must be >= 0")
    return (g / 5.0, g / 7.0)


# --- flat key=value configuration -------------------------------------------

def parse_keyvalue(text: str) -> dict[str, str]:
    """Parse a flat ``name = value`` configuration text.

    One assignment per line; ``#`` starts a comment; blank lines are
    skipped.  Duplicate keys are an error.  Values are returned verbatim
    (stripped); interpretation is up to the consumer.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'name = value', got {raw!r}")
        name, _, value = line.partition("=")
        name = name.strip()
        value = value.strip()
        if not name:
            raise ConfigError(f"line {lineno}: empty key")
        if name in out:
            raise ConfigError(f"line {lineno}: duplicate key {name!r}")
        out[name] = value
    return out


def read_keyvalue(path: str | Path) -> dict[str, str]:
    return parse_keyvalue(Path(path).read_text(encoding="utf-8"))


def format_keyvalue(mapping: Mapping[str, object]) -> str:
    """Render a mapping back to the flat configuration syntax."""
    lines = [f"{key} = {value}" for key, value in mapping.items()]
    return "\n".join(lines) + ("\n" if lines else "")


PARAM_KEYS = tuple(f.name for f in fields(SystemParams))


def params_from_mapping(
    mapping: Mapping[str, object],
    *,
    defaults: SystemParams | None = None,
) -> SystemParams:
    """Build SystemParams from a flat mapping.

    Unknown keys are an error, not a warning.  Missing keys fall back to
    ``defaults`` (or the package defaults).
    """
    unknown = sorted(set(mapping) - set(PARAM_KEYS))
    if unknown:
        raise ConfigError(f"unknown parameter keys: {', '.join(unknown)}")
    base = defaults if defaults is not None else SystemParams()
    updates = {}
    for key, value in mapping.items():
        try:
            updates[key] = float(value)  # type: ignore[arg-type]
        except (TypeError, ValueError):
            raise ConfigError(f"key {key!r}: expected a number, got {value!r}") from None
    return replace(base, **updates)


def load_params(path: str | Path, *, defaults: SystemParams | None = None) -> SystemParams:
    """Load SystemParams from a key=value file."""
    return params_from_mapping(read_keyvalue(path), defaults=defaults)
