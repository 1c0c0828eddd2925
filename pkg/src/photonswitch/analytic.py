"""Closed-form steady-state spectra and single-photon scattering formulas.

Two layers live here:

* textbook closed forms for the coupled-mode transmission spectrum and the
  ideal reflection/transmission probabilities (monochromatic limit), and
* the exact one-photon scattering matrix of the full level scheme, averaged
  over the source spectrum.  The trajectory engine is validated against the
  latter, which stays exact at finite source bandwidth where the closed
  forms no longer apply.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import curve_fit

from photonswitch.model import (
    OMEGA_PER_MHZ,
    AtomLevel,
    GDistribution,
    InvalidParameterError,
    SystemParams,
    cooperativity,
)

GROUND_DIM = 3
_MIRROR = {AtomLevel.G_MINUS: AtomLevel.G_PLUS, AtomLevel.G_PLUS: AtomLevel.G_MINUS}


@dataclass(frozen=True)
class SpectrumPoint:
    """One probe detuning and the transmitted power fraction."""

    detuning: float
    transmission: float

    def __post_init__(self) -> None:
        if not (-1e-12 <= self.transmission <= 1.0 + 1e-12):
            raise InvalidParameterError(
                f"transmission {self.transmission!r} outside [0, 1]"
            )


def _maybe_scalar(value, scalar_input: bool):
    return float(value) if scalar_input else value


def empty_cavity_transmission(detuning, kappa_i: float, kappa_ex: float, h: float):
    """Transmission past the bare resonator.

    Two degenerate counter-propagating modes damped at kappa = kappa_i +
    kappa_ex and mixed at rate h; the fiber drives one of them.

        T(delta) = |1 - 2 kappa_ex (i delta + kappa) / ((i delta + kappa)^2 + h^2)|^2

    Vanishes at delta = 0 exactly when kappa_ex = sqrt(kappa_i^2 + h^2).
    """
    if kappa_i + kappa_ex <= 0:
        raise InvalidParameterError("kappa_i + kappa_ex must be > 0")
    scalar = np.ndim(detuning) == 0
    delta = np.asarray(detuning, dtype=float)
    d = 1j * delta + (kappa_i + kappa_ex)
    t = 1.0 - 2.0 * kappa_ex * d / (d * d + h * h)
    return _maybe_scalar(np.abs(t) ** 2, scalar)


def atom_cavity_transmission(detuning, g: float, params: SystemParams):
    """Transmission with one atom coupled to the driven running mode.

    Probe-strength calibration: the atom sits on its strongest transition
    with the full coupling g and no parasitic terms.  The atomic
    polarization adds g^2/(gamma - i delta) to the mode response, the
    backward mode adds h^2/(kappa - i delta):

        t(delta) = 1 - 2 kappa_ex / ((kappa - i delta)
                                     + g^2/(gamma - i delta)
                                     + h^2/(kappa - i delta))

    Reduces to ``empty_cavity_transmission`` at g = 0 and develops two
    deep minima near delta = +-g once g >> kappa, gamma, h.
    """
    scalar = np.ndim(detuning) == 0
    delta = np.asarray(detuning, dtype=float)
    kd = params.kappa - 1j * delta
    gd = params.gamma - 1j * delta
    t = 1.0 - 2.0 * params.kappa_ex / (kd + g * g / gd + params.h * params.h / kd)
    return _maybe_scalar(np.abs(t) ** 2, scalar)


def averaged_atom_spectrum(
    detunings: Sequence[float],
    gdist: GDistribution,
    params: SystemParams,
    n_samples: int,
    seed: int = 0,
) -> list[SpectrumPoint]:
    """Monte Carlo average of the atom spectrum over the coupling spread."""
    if n_samples < 1:
        raise InvalidParameterError("n_samples must be >= 1")
    grid = np.asarray(detunings, dtype=float)
    if gdist.sigma_g == 0.0:
        mean = atom_cavity_transmission(grid, gdist.mean_g, params)
    else:
        rng = np.random.default_rng(seed)
        gs = gdist.sample(rng, size=n_samples)
        acc = np.zeros_like(grid)
        for g in gs:
            acc += atom_cavity_transmission(grid, float(g), params)
        mean = acc / n_samples
    mean = np.clip(mean, 0.0, 1.0)
    return [SpectrumPoint(float(d), float(t)) for d, t in zip(grid, mean)]


def reflection_probability(params: SystemParams) -> float:
    """Ideal monochromatic reflection probability.

    P_r = (kappa_ex/kappa)^2 * 4C^2/(1+2C)^2 for the two-level,
    perfect-polarization limit.
    """
    c = cooperativity(params)
    return (params.kappa_ex / params.kappa) ** 2 * 4.0 * c * c / (1.0 + 2.0 * c) ** 2


def transmission_probability(params: SystemParams) -> float:
    """Ideal monochromatic transmission probability.

    P_t = (kappa_i - kappa_ex/(1+2C))^2 / kappa^2.
    """
    c = cooperativity(params)
    return ((params.kappa_i - params.kappa_ex / (1.0 + 2.0 * c)) / params.kappa) ** 2


# --- exact one-photon scattering --------------------------------------------

@dataclass(frozen=True)
class ScatteringProbabilities:
    """Channel-resolved outcome probabilities for one incident photon.

    Arrays are indexed by the final ground sublevel (G_MINUS, G_ZERO,
    G_PLUS).  ``forward`` outputs exit the fiber on the far side of the
    resonator, ``backward`` outputs return toward the source.
    """

    initial_level: AtomLevel
    transmit: np.ndarray
    reflect: np.ndarray
    cavity_loss: np.ndarray
    emission: np.ndarray

    @property
    def p_transmit(self) -> float:
        return float(self.transmit.sum())

    @property
    def p_reflect(self) -> float:
        return float(self.reflect.sum())

    @property
    def p_loss(self) -> float:
        return float(self.cavity_loss.sum() + self.emission.sum())

    @property
    def total(self) -> float:
        return self.p_transmit + self.p_reflect + self.p_loss

    @property
    def normalized_reflection(self) -> float:
        return self.p_reflect / (self.p_reflect + self.p_transmit)

    def _mass_by_level(self, level: AtomLevel) -> float:
        j = int(level)
        return float(
            self.transmit[j] + self.reflect[j] + self.cavity_loss[j] + self.emission[j]
        )

    @property
    def toggle_probability(self) -> float:
        """Mass ending with the atom moved off its initial sublevel.

        Landing on the dark m_F=0 sublevel counts as a toggle here; it is
        available separately via ``dark_probability``.
        """
        mirror = _MIRROR.get(self.initial_level)
        if mirror is None:
            raise InvalidParameterError("toggle undefined for this initial level")
        return self._mass_by_level(mirror) + self.dark_probability

    @property
    def dark_probability(self) -> float:
        return self._mass_by_level(AtomLevel.G_ZERO)

    @property
    def toggle_given_reflection(self) -> float:
        mirror = _MIRROR[self.initial_level]
        return float(
            (self.reflect[int(mirror)] + self.reflect[int(AtomLevel.G_ZERO)])
            / self.p_reflect
        )

    @property
    def loss_after_toggle_fraction(self) -> float:
        """Fraction of loss events that still left the atom toggled."""
        mirror = _MIRROR[self.initial_level]
        lost = self.cavity_loss.sum() + self.emission.sum()
        lost_toggled = (
            self.cavity_loss[int(mirror)]
            + self.emission[int(mirror)]
            + self.cavity_loss[int(AtomLevel.G_ZERO)]
            + self.emission[int(AtomLevel.G_ZERO)]
        )
        return float(lost_toggled / lost)


def _couplings(params: SystemParams, forward: bool) -> tuple[np.ndarray, np.ndarray]:
    """Per-sublevel couplings (driven mode, counter mode).

    A forward photon carries sigma+ polarization in the resonator: its mode
    couples the m_F=-1 leg at g and leaks into the wrong-helicity and pi
    legs at g_minus and g_pi.  The counter mode mirrors the pattern.  A
    backward drive swaps the two arrays.
    """
    drive = np.array([params.g, params.g_pi, params.g_minus])
    counter = np.array([params.g_minus, params.g_pi, params.g])
    return (drive, counter) if forward else (counter, drive)


def single_photon_scattering(
    detuning,
    params: SystemParams,
    initial_level: AtomLevel = AtomLevel.G_MINUS,
    forward: bool = True,
) -> ScatteringProbabilities:
    """Exact monochromatic scattering probabilities at one detuning.

    Solves the driven single-excitation steady state of the full level
    scheme, including the parasitic couplings and the mode backscatter h,
    and reads off the output amplitudes per final ground sublevel.
    Scalar detuning only; arrays are handled by the averaging helpers.
    """
    if initial_level == AtomLevel.EXCITED:
        raise InvalidParameterError("initial level must be a ground sublevel")
    alpha, beta = _couplings(params, forward)
    j0 = int(initial_level)
    root_kex = math.sqrt(2.0 * params.kappa_ex)

    delta = np.atleast_1d(np.asarray(detuning, dtype=float))
    kd = params.kappa - 1j * delta  # shape (n,)
    gd = params.gamma - 1j * delta

    n = delta.size
    # unknowns per detuning: [E, A-, A0, A+, B-, B0, B+]
    m = np.zeros((n, 7, 7), dtype=complex)
    rhs = np.zeros((n, 7), dtype=complex)
    m[:, 0, 0] = gd
    for j in range(3):
        m[:, 0, 1 + j] = 1j * alpha[j]
        m[:, 0, 4 + j] = 1j * beta[j]
        m[:, 1 + j, 1 + j] = kd
        m[:, 1 + j, 0] = 1j * alpha[j]
        m[:, 1 + j, 4 + j] = 1j * params.h
        m[:, 4 + j, 4 + j] = kd
        m[:, 4 + j, 0] = 1j * beta[j]
        m[:, 4 + j, 1 + j] = 1j * params.h
    rhs[:, 1 + j0] = root_kex
    x = np.linalg.solve(m, rhs[..., None])[..., 0]

    e_amp = x[:, 0]
    a_amp = x[:, 1:4]
    b_amp = x[:, 4:7]
    t_amp = -root_kex * a_amp
    t_amp[:, j0] += 1.0
    r_amp = -root_kex * b_amp

    transmit = np.abs(t_amp) ** 2
    reflect = np.abs(r_amp) ** 2
    cavity = 2.0 * params.kappa_i * (np.abs(a_amp) ** 2 + np.abs(b_amp) ** 2)
    emission = np.repeat(
        (2.0 * params.gamma / 3.0) * np.abs(e_amp[:, None]) ** 2, 3, axis=1
    )

    if np.ndim(detuning) == 0:
        transmit, reflect = transmit[0], reflect[0]
        cavity, emission = cavity[0], emission[0]
    return ScatteringProbabilities(
        initial_level=initial_level,
        transmit=transmit,
        reflect=reflect,
        cavity_loss=cavity,
        emission=emission,
    )


def gaussian_spectral_sigma(fwhm_ns: float) -> float:
    """Spectral standard deviation (MHz) of a transform-limited pulse whose
    intensity envelope is Gaussian with the given FWHM in ns."""
    if fwhm_ns <= 0:
        raise InvalidParameterError("fwhm_ns must be > 0")
    sigma_t = fwhm_ns / math.sqrt(8.0 * math.log(2.0))
    return 1.0 / (2.0 * sigma_t * OMEGA_PER_MHZ)


def _average(params, initial_level, forward, deltas, weights) -> ScatteringProbabilities:
    probs = single_photon_scattering(deltas, params, initial_level, forward)
    w = weights[:, None]
    return ScatteringProbabilities(
        initial_level=initial_level,
        transmit=(probs.transmit * w).sum(axis=0),
        reflect=(probs.reflect * w).sum(axis=0),
        cavity_loss=(probs.cavity_loss * w).sum(axis=0),
        emission=(probs.emission * w).sum(axis=0),
    )


def exponential_source_scattering(
    params: SystemParams,
    initial_level: AtomLevel = AtomLevel.G_MINUS,
    forward: bool = True,
    n_nodes: int = 4000,
) -> ScatteringProbabilities:
    """Outcome probabilities for the leaky-source photon.

    The source mode empties at rate 2*kappa_s, so the photon spectrum is a
    Lorentzian of half-width kappa_s.  The average uses the substitution
    delta = kappa_s tan(theta), which maps the full real line onto a finite
    interval; Gauss-Legendre then resolves the integral to machine
    precision, heavy tails included.
    """
    if params.kappa_s <= 0:
        raise InvalidParameterError("kappa_s must be > 0 for a leaky source")
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    deltas = params.kappa_s * np.tan(0.5 * math.pi * x)
    weights = 0.5 * w
    return _average(params, initial_level, forward, deltas, weights)


def gaussian_source_scattering(
    params: SystemParams,
    fwhm_ns: float,
    initial_level: AtomLevel = AtomLevel.G_MINUS,
    forward: bool = True,
    n_nodes: int = 200,
) -> ScatteringProbabilities:
    """Outcome probabilities for a transform-limited Gaussian pulse."""
    sigma = gaussian_spectral_sigma(fwhm_ns)
    x, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    deltas = sigma * x
    weights = w / math.sqrt(2.0 * math.pi)
    return _average(params, initial_level, forward, deltas, weights)


# --- spectrum file format and fit --------------------------------------------

SPECTRUM_HEADER = ("detuning_mhz", "transmission")


def write_spectrum_csv(points: Iterable[SpectrumPoint], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SPECTRUM_HEADER)
        for p in points:
            writer.writerow([repr(p.detuning), repr(p.transmission)])


def read_spectrum_csv(path: str | Path) -> list[SpectrumPoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SPECTRUM_HEADER:
            raise InvalidParameterError(
                f"{path}: expected header {','.join(SPECTRUM_HEADER)}"
            )
        return [SpectrumPoint(float(row[0]), float(row[1])) for row in reader]


@dataclass(frozen=True)
class FitReport:
    values: dict[str, float]
    stderrs: dict[str, float]

    def as_text(self) -> str:
        lines = [
            json.dumps({param: round(self.values[param], 6),
                        "stderr": round(self.stderrs[param], 6)})
            for param in self.values
        ]
        return "\n".join(lines) + "\n"


def _initial_g(points: list[SpectrumPoint]) -> float:
    """Half the separation of the two transmission minima, one per side."""
    left = [p for p in points if p.detuning < 0]
    right = [p for p in points if p.detuning > 0]
    if not left or not right:
        return max(abs(p.detuning) for p in points) / 2.0
    lo = min(left, key=lambda p: p.transmission)
    hi = min(right, key=lambda p: p.transmission)
    return (hi.detuning - lo.detuning) / 2.0


def fit_spectrum(points: Sequence[SpectrumPoint], params: SystemParams) -> FitReport:
    """Least-squares fit of (g, kappa_i, h) to a measured spectrum.

    kappa_ex and gamma are held at their configured values; all three fitted
    parameters are constrained nonnegative.
    """
    pts = list(points)
    if len(pts) < 4:
        raise InvalidParameterError("need at least 4 spectrum points to fit")
    x = np.array([p.detuning for p in pts])
    y = np.array([p.transmission for p in pts])

    def model(delta, g, kappa_i, h):
        trial = SystemParams(
            g=g, g_minus=0.0, g_pi=0.0, kappa_i=kappa_i,
            kappa_ex=params.kappa_ex, h=h, gamma=params.gamma,
            kappa_s=params.kappa_s,
        )
        return atom_cavity_transmission(delta, g, trial)

    p0 = [max(_initial_g(pts), 1.0), max(params.kappa_i, 0.1), max(params.h, 0.01)]
    popt, pcov = curve_fit(
        model, x, y, p0=p0, bounds=([0.0, 0.0, 0.0], [np.inf, np.inf, np.inf]),
        maxfev=20000,
    )
    errs = np.sqrt(np.clip(np.diag(pcov), 0.0, np.inf))
    names = ("g", "kappa_i", "h")
    return FitReport(
        values={n: float(v) for n, v in zip(names, popt)},
        stderrs={n: float(e) for n, e in zip(names, errs)},
    )
