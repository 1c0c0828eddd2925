"""Monte Carlo wavefunction trajectories for the cascaded-source model.

The source photon lives in its own leaky mode and feeds the driven
resonator mode one way; the full non-Hermitian generator is block diagonal
in the total excitation number, so evolution between jumps is computed
exactly from the eigendecomposition of each sector block.  Jump times are
located by bisection on the squared-norm threshold, vectorized across a
whole ensemble of trajectories.

Conventions:

* Everything is expressed in the drive-relative frame: mode ``a`` is the
  one the source feeds, TRANSMIT exits on the drive side, REFLECT on the
  opposite side.  Reversing the physical drive direction only swaps the
  coupling vector seen by the two modes (``forward=False``).
* Randomness: every scattered photon consumes exactly three uniforms from
  its trajectory stream, in the order (norm threshold, channel selector,
  final-sublevel selector).  The scalar and ensemble code paths share this
  protocol, so trajectory ``i`` of an ensemble seeded with ``s`` reruns
  byte for byte as a single trajectory seeded with ``(s, i)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np

from photonswitch.model import (
    OMEGA_PER_MHZ,
    AtomLevel,
    GDistribution,
    InvalidParameterError,
    SystemParams,
)

MAX_DIMENSION = 65536
_NORM_TOL = 1e-9  # allowed upward norm drift before aborting
_EIG_TOL = 1e-8  # allowed eigenbasis reconstruction error


class DimensionError(ValueError):
    """Requested Hilbert space exceeds the guard limit."""


class IntegrationError(RuntimeError):
    """No-jump evolution violated a structural invariant."""


class JumpChannel(IntEnum):
    """Output channels of the cascaded input-output model."""

    TRANSMIT = 0  # sqrt(2 kappa_s) a_s + sqrt(2 kappa_ex) a
    REFLECT = 1  # sqrt(2 kappa_ex) b
    CAV_LOSS_A = 2  # sqrt(2 kappa_i) a
    CAV_LOSS_B = 3  # sqrt(2 kappa_i) b
    ATOM_EMIT_MINUS = 4  # sqrt(2 gamma / 3) |g_minus><e|
    ATOM_EMIT_ZERO = 5  # sqrt(2 gamma / 3) |g_zero><e|
    ATOM_EMIT_PLUS = 6  # sqrt(2 gamma / 3) |g_plus><e|


class Outcome(Enum):
    REFLECTION = "reflection"
    TRANSMISSION = "transmission"
    LOSS = "loss"


CHANNEL_OUTCOME: dict[JumpChannel, Outcome] = {
    JumpChannel.TRANSMIT: Outcome.TRANSMISSION,
    JumpChannel.REFLECT: Outcome.REFLECTION,
    JumpChannel.CAV_LOSS_A: Outcome.LOSS,
    JumpChannel.CAV_LOSS_B: Outcome.LOSS,
    JumpChannel.ATOM_EMIT_MINUS: Outcome.LOSS,
    JumpChannel.ATOM_EMIT_ZERO: Outcome.LOSS,
    JumpChannel.ATOM_EMIT_PLUS: Outcome.LOSS,
}

_OUTCOME_INDEX = {Outcome.REFLECTION: 0, Outcome.TRANSMISSION: 1, Outcome.LOSS: 2}
_CHANNEL_TO_OUTCOME = np.array(
    [_OUTCOME_INDEX[CHANNEL_OUTCOME[JumpChannel(k)]] for k in range(7)])
_GROUND = (AtomLevel.G_MINUS, AtomLevel.G_ZERO, AtomLevel.G_PLUS)


@dataclass(frozen=True)
class HilbertSpace:
    """Atom (4 levels) times three Fock ladders (driven, counter, source).

    The basis index is lexicographic over (atom, n_a, n_b, n_s) with the
    atom ordered by AtomLevel.
    """

    fock_cut_a: int = 1
    fock_cut_b: int = 1
    fock_cut_s: int = 2

    ATOM_DIM = 4

    def __post_init__(self) -> None:
        for name in ("fock_cut_a", "fock_cut_b", "fock_cut_s"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0")
        if self.dim > MAX_DIMENSION:
            raise DimensionError(
                f"Hilbert space dimension {self.dim} exceeds {MAX_DIMENSION}")

    @property
    def dim(self) -> int:
        return (self.ATOM_DIM * (self.fock_cut_a + 1) * (self.fock_cut_b + 1)
                * (self.fock_cut_s + 1))

    def index(self, atom: AtomLevel, n_a: int, n_b: int, n_s: int) -> int:
        if not (0 <= n_a <= self.fock_cut_a and 0 <= n_b <= self.fock_cut_b
                and 0 <= n_s <= self.fock_cut_s):
            raise InvalidParameterError(
                f"occupation ({n_a},{n_b},{n_s}) outside Fock cuts")
        idx = int(atom)
        idx = idx * (self.fock_cut_a + 1) + n_a
        idx = idx * (self.fock_cut_b + 1) + n_b
        idx = idx * (self.fock_cut_s + 1) + n_s
        return idx

    def unpack(self, index: int) -> tuple[AtomLevel, int, int, int]:
        if not 0 <= index < self.dim:
            raise InvalidParameterError(f"basis index {index} out of range")
        index, n_s = divmod(index, self.fock_cut_s + 1)
        index, n_b = divmod(index, self.fock_cut_b + 1)
        atom, n_a = divmod(index, self.fock_cut_a + 1)
        return AtomLevel(atom), n_a, n_b, n_s

    def excitations(self) -> np.ndarray:
        """Total excitation number per basis state (excited atom counts as
        one); the generator conserves this number."""
        out = np.empty(self.dim, dtype=int)
        for i in range(self.dim):
            atom, n_a, n_b, n_s = self.unpack(i)
            out[i] = n_a + n_b + n_s + (1 if atom == AtomLevel.EXCITED else 0)
        return out

    def sector(self, n: int) -> np.ndarray:
        return np.nonzero(self.excitations() == n)[0]


@dataclass
class QuantumState:
    """Amplitude vector over a HilbertSpace basis at a given time."""

    amplitudes: np.ndarray
    time: float = 0.0

    def __post_init__(self) -> None:
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.norm_squared > 1.0 + 1e-9:
            raise InvalidParameterError(
                f"state norm^2 {self.norm_squared} exceeds 1")

    @property
    def norm_squared(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)


@dataclass(frozen=True)
class TrajectoryRecord:
    """Jump history of one scattered source input."""

    jumps: tuple[tuple[float, JumpChannel], ...]
    final_atom: AtomLevel
    seed: object

    def __post_init__(self) -> None:
        times = [t for t, _ in self.jumps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidParameterError("jump times must be strictly increasing")

    def debug_lines(self) -> str:
        return "".join(f"{t:.6f} {ch.name}\n" for t, ch in self.jumps)


# --- operator construction ----------------------------------------------------

def _destroy(cut: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1.0, cut + 1)), k=1)


def _embed(space: HilbertSpace, atom: np.ndarray | None = None,
           a: np.ndarray | None = None, b: np.ndarray | None = None,
           s: np.ndarray | None = None) -> np.ndarray:
    def pick(op, size):
        return op if op is not None else np.eye(size)

    return np.kron(
        pick(atom, space.ATOM_DIM),
        np.kron(pick(a, space.fock_cut_a + 1),
                np.kron(pick(b, space.fock_cut_b + 1),
                        pick(s, space.fock_cut_s + 1))))


def _atom_proj(bra: AtomLevel, ket: AtomLevel) -> np.ndarray:
    op = np.zeros((HilbertSpace.ATOM_DIM, HilbertSpace.ATOM_DIM))
    op[int(bra), int(ket)] = 1.0
    return op


def _mode_couplings(params: SystemParams, forward: bool) -> tuple[np.ndarray, np.ndarray]:
    """Couplings of the (driven, counter) mode to the ground legs, ordered
    (G_MINUS, G_ZERO, G_PLUS)."""
    drive = np.array([params.g, params.g_pi, params.g_minus])
    counter = np.array([params.g_minus, params.g_pi, params.g])
    return (drive, counter) if forward else (counter, drive)


def _hamiltonian_nu(params: SystemParams, space: HilbertSpace,
                    forward: bool = True) -> np.ndarray:
    """Non-Hermitian generator in MHz units.

    Every decay channel is already folded into the anti-Hermitian part, so
    the squared norm of a propagated state is the no-jump probability.
    """
    a = _embed(space, a=_destroy(space.fock_cut_a))
    b = _embed(space, b=_destroy(space.fock_cut_b))
    s = _embed(space, s=_destroy(space.fock_cut_s))
    alpha, beta = _mode_couplings(params, forward)

    ham = np.zeros((space.dim, space.dim), dtype=complex)
    ham += -2j * math.sqrt(params.kappa_s * params.kappa_ex) * (a.conj().T @ s)
    for j, level in enumerate(_GROUND):
        lower = _embed(space, atom=_atom_proj(level, AtomLevel.EXCITED))
        ham += alpha[j] * (a.conj().T @ lower + lower.conj().T @ a)
        ham += beta[j] * (b.conj().T @ lower + lower.conj().T @ b)
    ham += -1j * params.kappa_s * (s.conj().T @ s)
    ham += -1j * params.gamma * _embed(
        space, atom=_atom_proj(AtomLevel.EXCITED, AtomLevel.EXCITED))
    ham += -1j * (params.kappa_i + params.kappa_ex) * (
        a.conj().T @ a + b.conj().T @ b)
    return ham


def build_effective_hamiltonian(params: SystemParams,
                                space: HilbertSpace) -> np.ndarray:
    """Non-Hermitian evolution generator in rad/ns: i d|psi>/dt = H |psi>."""
    return OMEGA_PER_MHZ * _hamiltonian_nu(params, space)


def collapse_operators(params: SystemParams,
                       space: HilbertSpace) -> dict[JumpChannel, np.ndarray]:
    """Jump operators in sqrt(MHz) units; the event rate of channel k is
    OMEGA_PER_MHZ * ||C_k psi||^2 per ns."""
    a = _embed(space, a=_destroy(space.fock_cut_a))
    b = _embed(space, b=_destroy(space.fock_cut_b))
    s = _embed(space, s=_destroy(space.fock_cut_s))
    root_ex = math.sqrt(2.0 * params.kappa_ex)
    ops = {
        JumpChannel.TRANSMIT: math.sqrt(2.0 * params.kappa_s) * s + root_ex * a,
        JumpChannel.REFLECT: root_ex * b,
        JumpChannel.CAV_LOSS_A: math.sqrt(2.0 * params.kappa_i) * a,
        JumpChannel.CAV_LOSS_B: math.sqrt(2.0 * params.kappa_i) * b,
    }
    emit = math.sqrt(2.0 * params.gamma / 3.0)
    for channel, level in (
        (JumpChannel.ATOM_EMIT_MINUS, AtomLevel.G_MINUS),
        (JumpChannel.ATOM_EMIT_ZERO, AtomLevel.G_ZERO),
        (JumpChannel.ATOM_EMIT_PLUS, AtomLevel.G_PLUS),
    ):
        ops[channel] = emit * _embed(
            space, atom=_atom_proj(level, AtomLevel.EXCITED))
    return ops


def propagate_no_jump(params: SystemParams, space: HilbertSpace,
                      state: QuantumState, dt: float) -> QuantumState:
    """Exact no-jump evolution of a full-space state by dt (ns)."""
    ham = build_effective_hamiltonian(params, space)
    lam, vecs = np.linalg.eig(-1j * ham)
    coeff = np.linalg.solve(vecs, state.amplitudes)
    amps = vecs @ (np.exp(lam * dt) * coeff)
    return QuantumState(amplitudes=amps, time=state.time + dt)


# --- source shapes -------------------------------------------------------------

@dataclass(frozen=True)
class ExponentialSource:
    """Literal leaky source: constant kappa_s, exponential emitted flux."""

    def segments(self, params: SystemParams) -> tuple[np.ndarray, np.ndarray]:
        if params.kappa_s <= 0:
            raise InvalidParameterError("kappa_s must be > 0 for a leaky source")
        return np.array([0.0]), np.array([params.kappa_s])


@dataclass(frozen=True)
class GaussianSource:
    """Source rate shaped so the emitted flux is Gaussian in time.

    kappa_s(t) follows the hazard rate of the target flux profile,
    piecewise constant on a dt grid; once all but ``tail_mass`` of the
    photon has left, the rate freezes so the remainder drains
    exponentially.
    """

    fwhm: float
    dt: float = 0.5
    rise_sigmas: float = 4.0
    tail_mass: float = 1e-7

    def __post_init__(self) -> None:
        if self.fwhm <= 0 or self.dt <= 0:
            raise InvalidParameterError("fwhm and dt must be > 0")

    @property
    def sigma_t(self) -> float:
        return self.fwhm / math.sqrt(8.0 * math.log(2.0))

    @property
    def center(self) -> float:
        return self.rise_sigmas * self.sigma_t

    def segments(self, params: SystemParams) -> tuple[np.ndarray, np.ndarray]:
        from scipy.stats import norm

        sig = self.sigma_t
        t_cap = self.center + sig * float(norm.isf(self.tail_mass))
        starts = np.arange(0.0, t_cap, self.dt)
        mids = starts + 0.5 * self.dt
        density = norm.pdf(mids, loc=self.center, scale=sig)
        survival = np.maximum(norm.sf(mids, loc=self.center, scale=sig),
                              self.tail_mass * 1e-3)
        kappa = np.maximum(density / survival / (2.0 * OMEGA_PER_MHZ), 1e-12)
        return starts, kappa


SourceShape = ExponentialSource | GaussianSource


# --- sector-restricted engine ---------------------------------------------------

class _SectorMaps:
    """Generator and collapse blocks restricted to excitation sectors.

    The kappa_s dependence stays explicit, h(k) = fixed - i k n_s
    - 2i sqrt(k kappa_ex) a^dag a_s, so any segment value can be assembled
    without rebuilding the full operator.
    """

    def __init__(self, params: SystemParams, space: HilbertSpace, n_max: int,
                 forward: bool):
        self.space = space
        self.n_max = n_max
        self.sectors = [space.sector(n) for n in range(n_max + 1)]
        a = _embed(space, a=_destroy(space.fock_cut_a))
        s = _embed(space, s=_destroy(space.fock_cut_s))
        self._fixed = _hamiltonian_nu(
            replace(params, kappa_s=0.0), space, forward)
        self._linear = -1j * (s.conj().T @ s)
        self._feed = -2j * math.sqrt(params.kappa_ex) * (a.conj().T @ s)
        base_ops = collapse_operators(params, space)
        self._fixed_ops = {
            ch: op for ch, op in base_ops.items() if ch != JumpChannel.TRANSMIT}
        self._transmit_cavity = math.sqrt(2.0 * params.kappa_ex) * a
        self._transmit_source = s

    def hamiltonian_nu(self, kappa_s: float) -> np.ndarray:
        return (self._fixed + kappa_s * self._linear
                + math.sqrt(kappa_s) * self._feed)

    def block(self, matrix: np.ndarray, n_out: int, n_in: int) -> np.ndarray:
        return matrix[np.ix_(self.sectors[n_out], self.sectors[n_in])]

    def channel_blocks(self, kappa_s: float, n: int) -> list[np.ndarray]:
        """Collapse blocks from sector n to n-1, in JumpChannel order."""
        transmit = (math.sqrt(2.0 * kappa_s) * self._transmit_source
                    + self._transmit_cavity)
        blocks = []
        for channel in JumpChannel:
            full = (transmit if channel == JumpChannel.TRANSMIT
                    else self._fixed_ops[channel])
            blocks.append(self.block(full, n - 1, n))
        return blocks


class _SegmentPropagator:
    """Eigendecomposition of one sector block for one kappa_s value."""

    __slots__ = ("lam", "vecs", "inv")

    def __init__(self, lam: np.ndarray, vecs: np.ndarray, inv: np.ndarray):
        self.lam = lam
        self.vecs = vecs
        self.inv = inv

    def evolve(self, psi: np.ndarray, dt) -> np.ndarray:
        """Propagate rows of psi by dt (scalar, or one value per row)."""
        coeff = psi @ self.inv.T
        dt_col = np.atleast_1d(np.asarray(dt, dtype=float))[:, None]
        return (coeff * np.exp(self.lam[None, :] * dt_col)) @ self.vecs.T


@lru_cache(maxsize=600)
def _engine_cached(params: SystemParams, space: HilbertSpace,
                   source: SourceShape, forward: bool, n_max: int):
    maps = _SectorMaps(params, space, n_max, forward)
    starts, kappas = source.segments(params)
    props: list[list[_SegmentPropagator]] = [[]]
    blocks: list[list[np.ndarray]] = [[]]
    for n in range(1, n_max + 1):
        # one stacked eig over all source segments instead of a per-segment loop
        hams = np.stack([maps.block(maps.hamiltonian_nu(float(k)), n, n)
                         for k in kappas])
        lam, vecs = np.linalg.eig(-1j * OMEGA_PER_MHZ * hams)
        inv = np.linalg.inv(vecs)
        resid = np.abs(vecs @ inv - np.eye(lam.shape[1])[None, :, :]).max()
        if resid > _EIG_TOL:
            raise IntegrationError(
                "sector generator is too close to defective to diagonalize")
        props.append([_SegmentPropagator(lam[s], vecs[s], inv[s])
                      for s in range(len(kappas))])
        blocks.append([
            np.concatenate(maps.channel_blocks(float(k), n), axis=0)
            for k in kappas])
    return maps, starts, props, blocks


def _segment_end(starts: np.ndarray, idx: int) -> float:
    return float(starts[idx + 1]) if idx + 1 < len(starts) else math.inf


# --- ensemble runner ------------------------------------------------------------

def _trajectory_uniforms(seed: tuple, n_photons: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return rng.random(3 * n_photons)


def _bisect_jump(prop: _SegmentPropagator, psi: np.ndarray, offsets: np.ndarray,
                 thresholds: np.ndarray) -> np.ndarray:
    """Solve norm^2(dt) = threshold per row by bisection on [0, offsets]."""
    lo = np.zeros_like(thresholds)
    hi = offsets.astype(float).copy()
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        norms = np.sum(np.abs(prop.evolve(psi, mid)) ** 2, axis=1)
        above = norms > thresholds
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.all(hi - lo <= 1e-12 * np.maximum(1.0, hi)):
            break
    return 0.5 * (lo + hi)


def _expand_bracket(prop: _SegmentPropagator, psi: np.ndarray,
                    thresholds: np.ndarray) -> np.ndarray:
    """Offsets where norm^2 has fallen below threshold (decaying segment)."""
    if float(np.max(prop.lam.real)) >= 0.0:
        raise IntegrationError("final segment is not strictly decaying")
    hi = np.ones_like(thresholds)
    for _ in range(200):
        norms = np.sum(np.abs(prop.evolve(psi, hi)) ** 2, axis=1)
        need = norms > thresholds
        if not need.any():
            return hi
        hi = np.where(need, hi * 2.0, hi)
    raise IntegrationError("failed to bracket the jump time")


def _run_ensemble(
    params: SystemParams,
    space: HilbertSpace,
    initial_atoms: np.ndarray,
    n_photons: int,
    uniforms: np.ndarray,
    source: SourceShape,
    forward: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scatter a batch; returns (jump_times, jump_channels, final_atoms),
    the first two with shape (batch, n_photons)."""
    if n_photons < 1:
        raise InvalidParameterError("need at least one source photon")
    if n_photons > space.fock_cut_s:
        raise InvalidParameterError("n_source_photons exceeds fock_cut_s")
    maps, starts, props, blocks = _engine_cached(
        params, space, source, forward, n_photons)

    batch = initial_atoms.shape[0]
    jump_times = np.zeros((batch, n_photons))
    jump_channels = np.zeros((batch, n_photons), dtype=int)

    sector = maps.sectors[n_photons]
    pos_of = {int(idx): k for k, idx in enumerate(sector)}
    psi = np.zeros((batch, sector.size), dtype=complex)
    for level in _GROUND:
        rows = np.nonzero(initial_atoms == int(level))[0]
        if rows.size:
            psi[rows, pos_of[space.index(level, 0, 0, n_photons)]] = 1.0

    t_now = np.zeros(batch)

    for round_idx in range(n_photons):
        n = n_photons - round_idx
        seg_props = props[n]
        seg_blocks = blocks[n]
        thresholds = np.minimum(uniforms[:, 3 * round_idx], 1.0 - 1e-15)

        seg_idx = np.minimum(
            np.searchsorted(starts, t_now, side="right") - 1,
            len(seg_props) - 1)
        times = t_now.copy()
        done = np.zeros(batch, dtype=bool)
        jump_t = np.zeros(batch)
        jump_seg = np.zeros(batch, dtype=int)
        state_at_jump = np.zeros_like(psi)

        while not done.all():
            active = np.nonzero(~done)[0]
            for s in np.unique(seg_idx[active]):
                rows = active[seg_idx[active] == s]
                prop = seg_props[s]
                seg_end = _segment_end(starts, s)
                sub = psi[rows]
                if math.isinf(seg_end):
                    hi = _expand_bracket(prop, sub, thresholds[rows])
                    off = _bisect_jump(prop, sub, hi, thresholds[rows])
                    state_at_jump[rows] = prop.evolve(sub, off)
                    jump_t[rows] = times[rows] + off
                    jump_seg[rows] = s
                    done[rows] = True
                    continue
                span = seg_end - times[rows]
                stepped = prop.evolve(sub, span)
                norms = np.sum(np.abs(stepped) ** 2, axis=1)
                before = np.sum(np.abs(sub) ** 2, axis=1)
                if np.any(norms > before + _NORM_TOL):
                    raise IntegrationError(
                        "squared norm increased during no-jump evolution")
                crossed = norms <= thresholds[rows]
                cross_rows = rows[crossed]
                if cross_rows.size:
                    off = _bisect_jump(prop, psi[cross_rows], span[crossed],
                                       thresholds[cross_rows])
                    state_at_jump[cross_rows] = prop.evolve(psi[cross_rows], off)
                    jump_t[cross_rows] = times[cross_rows] + off
                    jump_seg[cross_rows] = s
                    done[cross_rows] = True
                keep = rows[~crossed]
                psi[keep] = stepped[~crossed]
                times[keep] = seg_end
                seg_idx[keep] = s + 1

        selectors = uniforms[:, 3 * round_idx + 1]
        out_dim = maps.sectors[n - 1].size
        post = np.zeros((batch, out_dim), dtype=complex)
        channels = np.zeros(batch, dtype=int)
        for s in np.unique(jump_seg):
            rows = np.nonzero(jump_seg == s)[0]
            amps = (state_at_jump[rows] @ seg_blocks[s].T).reshape(
                rows.size, 7, out_dim)
            weights = np.sum(np.abs(amps) ** 2, axis=2)
            cum = np.cumsum(weights, axis=1)
            cum /= cum[:, -1:]
            choice = np.minimum(
                np.sum(cum < selectors[rows, None], axis=1), 6)
            channels[rows] = choice
            picked = amps[np.arange(rows.size), choice]
            norms = np.sqrt(np.sum(np.abs(picked) ** 2, axis=1))
            post[rows] = picked / norms[:, None]

        jump_times[:, round_idx] = jump_t
        jump_channels[:, round_idx] = channels
        psi = post
        t_now = jump_t

    sector0 = maps.sectors[0]
    level_of_pos = np.array([int(space.unpack(int(i))[0]) for i in sector0])
    probs = np.abs(psi) ** 2
    cum = np.cumsum(probs, axis=1)
    cum /= cum[:, -1:]
    draws = uniforms[:, 3 * n_photons - 1]
    pick = np.minimum(np.sum(cum < draws[:, None], axis=1), sector0.size - 1)
    return jump_times, jump_channels, level_of_pos[pick]


def _normalize_seed(seed) -> tuple:
    if isinstance(seed, tuple):
        return seed
    return (int(seed),)


def run_trajectory(
    params: SystemParams,
    space: HilbertSpace,
    initial_atom: AtomLevel,
    n_source_photons: int,
    seed,
    source: SourceShape | None = None,
    forward: bool = True,
) -> TrajectoryRecord:
    """Scatter a Fock-n source input off the atom and record every jump.

    Evolution between jumps is exact (eigendecomposition of the sector
    block); jump times are refined by bisection far below the ns scale.
    The trajectory ends when all n photons have jumped, at which point the
    register is exactly a ground sublevel with empty modes.
    """
    if initial_atom == AtomLevel.EXCITED:
        raise InvalidParameterError("initial atom must be a ground sublevel")
    src = source if source is not None else ExponentialSource()
    uniforms = _trajectory_uniforms(_normalize_seed(seed), n_source_photons)
    times, channels, finals = _run_ensemble(
        params, space, np.array([int(initial_atom)]), n_source_photons,
        uniforms[None, :], src, forward)
    jumps = tuple(
        (float(times[0, k]), JumpChannel(int(channels[0, k])))
        for k in range(n_source_photons))
    return TrajectoryRecord(jumps=jumps, final_atom=AtomLevel(int(finals[0])),
                            seed=seed)


# --- outcome tables -------------------------------------------------------------

@dataclass(frozen=True)
class OutcomeTable:
    """Counts and probabilities over output port and atomic toggle.

    Trajectories whose atom lands on the dark m_F=0 sublevel count as
    TOGGLE and are also reported separately in ``dark_counts``.
    """

    n_trajectories: int
    counts: Mapping[tuple[Outcome, bool], int]
    dark_counts: Mapping[Outcome, int]

    def __post_init__(self) -> None:
        if self.n_trajectories < 1:
            raise InvalidParameterError("n_trajectories must be >= 1")
        total = sum(self.counts.values())
        if total != self.n_trajectories:
            raise InvalidParameterError(
                f"counts sum {total} != n_trajectories {self.n_trajectories}")

    def probability(self, outcome: Outcome, toggled: bool) -> float:
        return self.counts.get((outcome, toggled), 0) / self.n_trajectories

    @property
    def probabilities(self) -> dict[tuple[Outcome, bool], float]:
        return {(outcome, toggled): self.probability(outcome, toggled)
                for outcome in Outcome for toggled in (True, False)}

    def outcome_probability(self, outcome: Outcome) -> float:
        return self.probability(outcome, True) + self.probability(outcome, False)

    @property
    def normalized_reflection(self) -> float:
        refl = self.outcome_probability(Outcome.REFLECTION)
        trans = self.outcome_probability(Outcome.TRANSMISSION)
        return refl / (refl + trans)

    @property
    def toggle_given_reflection(self) -> float:
        return (self.probability(Outcome.REFLECTION, True)
                / self.outcome_probability(Outcome.REFLECTION))

    @property
    def toggle_probability(self) -> float:
        return sum(p for (_, togg), p in self.probabilities.items() if togg)

    @property
    def dark_probability(self) -> float:
        return sum(self.dark_counts.values()) / self.n_trajectories

    def merge(self, other: "OutcomeTable") -> "OutcomeTable":
        counts = dict(self.counts)
        for key, value in other.counts.items():
            counts[key] = counts.get(key, 0) + value
        dark = dict(self.dark_counts)
        for key, value in other.dark_counts.items():
            dark[key] = dark.get(key, 0) + value
        return OutcomeTable(self.n_trajectories + other.n_trajectories,
                            counts, dark)


def _tabulate(initial_atoms: np.ndarray, channels: np.ndarray,
              final_atoms: np.ndarray) -> OutcomeTable:
    outcome_idx = _CHANNEL_TO_OUTCOME[channels]
    toggled = final_atoms != initial_atoms
    dark = ((final_atoms == int(AtomLevel.G_ZERO))
            & (initial_atoms != int(AtomLevel.G_ZERO)))
    codes = outcome_idx * 2 + (~toggled).astype(int)
    tallies = np.bincount(codes, minlength=6)
    outcomes = list(_OUTCOME_INDEX)
    counts = {}
    for o_idx, outcome in enumerate(outcomes):
        for t_idx, togg in ((0, True), (1, False)):
            c = int(tallies[o_idx * 2 + t_idx])
            if c:
                counts[(outcome, togg)] = c
    dark_tallies = np.bincount(outcome_idx[dark], minlength=3)
    dark_counts = {outcome: int(dark_tallies[o_idx])
                   for o_idx, outcome in enumerate(outcomes)
                   if dark_tallies[o_idx]}
    return OutcomeTable(initial_atoms.shape[0], counts, dark_counts)


def simulate_pulse_scattering(
    params: SystemParams,
    initial_atom: AtomLevel,
    n_traj: int,
    seed,
    *,
    space: HilbertSpace | None = None,
    source: SourceShape | None = None,
    g_dist: GDistribution | None = None,
    g_quantum: float = 0.25,
    forward: bool = True,
    first_traj: int = 0,
) -> OutcomeTable:
    """Single-photon scattering statistics over an ensemble.

    Trajectory i reruns exactly as ``run_trajectory(..., seed=(seed, i))``.
    With ``g_dist`` given, trajectory i draws its maximal coupling from
    ``SeedSequence((seed, 0x6D15, i))``, rounded to ``g_quantum`` MHz so
    propagators can be shared, and the parasitic couplings track the
    sampled value.  Every per-trajectory draw depends only on the global
    trajectory index, so an ensemble split into chunks via ``first_traj``
    and merged with :meth:`OutcomeTable.merge` equals the unsplit run.
    """
    if n_traj < 1:
        raise InvalidParameterError("n_traj must be >= 1")
    if first_traj < 0:
        raise InvalidParameterError("first_traj must be >= 0")
    sp = space if space is not None else HilbertSpace()
    src = source if source is not None else ExponentialSource()
    base = _normalize_seed(seed)

    indices = range(first_traj, first_traj + n_traj)
    uniforms = np.stack([
        _trajectory_uniforms(base + (i,), 1) for i in indices])
    initial = np.full(n_traj, int(initial_atom))

    if g_dist is None:
        _, channels, finals = _run_ensemble(
            params, sp, initial, 1, uniforms, src, forward)
        return _tabulate(initial, channels[:, 0], finals)

    drawn = np.array([
        g_dist.sample(np.random.default_rng(
            np.random.SeedSequence(base + (0x6D15, i))))
        for i in indices])
    quantized = np.round(drawn / g_quantum) * g_quantum
    channels = np.zeros(n_traj, dtype=int)
    finals = np.zeros(n_traj, dtype=int)
    for g_value in np.unique(quantized):
        rows = np.nonzero(quantized == g_value)[0]
        local = params.with_coupling(float(g_value))
        _, ch, fin = _run_ensemble(
            local, sp, initial[rows], 1, uniforms[rows], src, forward)
        channels[rows] = ch[:, 0]
        finals[rows] = fin
    return _tabulate(initial, channels, finals)


def probe_second_photon(
    params: SystemParams,
    seed,
    n_traj: int,
    *,
    space: HilbertSpace | None = None,
    forward: bool = True,
) -> float:
    """P(second photon reflects | first photon reflected) for a two-photon
    source input arriving on the reflecting sublevel.

    The first reflection toggles the atom with high probability, after
    which a second reflection needs the parasitic couplings, so the value
    collapses toward zero in the ideal system.
    """
    sp = space if space is not None else HilbertSpace()
    if sp.fock_cut_s < 2:
        raise InvalidParameterError(
            "fock_cut_s must be >= 2 for a two-photon probe")
    base = _normalize_seed(seed)
    uniforms = np.stack([
        _trajectory_uniforms(base + (i,), 2) for i in range(n_traj)])
    initial = np.full(n_traj, int(AtomLevel.G_MINUS))
    _, channels, _ = _run_ensemble(
        params, sp, initial, 2, uniforms, ExponentialSource(), forward)
    first = channels[:, 0] == int(JumpChannel.REFLECT)
    if not first.any():
        raise InvalidParameterError("no first-photon reflections in ensemble")
    second = channels[first, 1] == int(JumpChannel.REFLECT)
    return float(second.mean())


# --- fast single-photon sampler ---------------------------------------------------

class SinglePhotonSampler:
    """Precomputed single-photon scatterer for one coupling configuration.

    Builds, once, the no-jump state of each initial sublevel on a time
    grid; drawing a scattering event is then O(1): invert the norm
    threshold by interpolation, refine with one Newton step, and sample
    the channel and final sublevel from the exact collapse amplitudes at
    the jump time.  Used by the sequence emulator, where pulses arrive one
    at a time with the atom state chained between them.
    """

    _TAIL_FLOOR = 1e-15
    _SEG_POINTS = 8
    _TAIL_POINTS = 1500

    def __init__(self, params: SystemParams,
                 source: SourceShape | None = None,
                 space: HilbertSpace | None = None,
                 forward: bool = True):
        self.params = params
        self.source = source if source is not None else ExponentialSource()
        self.space = space if space is not None else HilbertSpace(
            fock_cut_a=1, fock_cut_b=1, fock_cut_s=1)
        maps, starts, props, blocks = _engine_cached(
            params, self.space, self.source, forward, 1)
        self._maps = maps
        self._starts = starts
        self._props = props[1]
        self._stacked = blocks[1]
        self._out_dim = maps.sectors[0].size
        self._level_of_pos = np.array(
            [int(self.space.unpack(int(i))[0]) for i in maps.sectors[0]])

        self._psi_starts: dict[int, np.ndarray] = {}
        self._grids: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for level in _GROUND:
            self._build_level(level)

    def _build_level(self, level: AtomLevel) -> None:
        space, maps = self.space, self._maps
        sector = maps.sectors[1]
        pos = {int(i): k for k, i in enumerate(sector)}
        psi0 = np.zeros(sector.size, dtype=complex)
        psi0[pos[space.index(level, 0, 0, 1)]] = 1.0

        seg_states = [psi0]
        t_pts: list[np.ndarray] = [np.array([0.0])]
        n_pts: list[np.ndarray] = [np.array([1.0])]
        psi = psi0
        for s, prop in enumerate(self._props):
            seg_end = _segment_end(self._starts, s)
            t0 = float(self._starts[s])
            if math.isinf(seg_end):
                norm0 = float(np.sum(np.abs(psi) ** 2))
                rate = -2.0 * float(np.max(prop.lam.real))
                span = max(
                    math.log(max(norm0, 1e-30) / self._TAIL_FLOOR) / rate, 1.0)
                offs = np.geomspace(1e-4, span, self._TAIL_POINTS)
            else:
                offs = np.linspace(0.0, seg_end - t0, self._SEG_POINTS,
                                   endpoint=False)[1:]
            states = prop.evolve(np.atleast_2d(psi), offs)
            t_pts.append(t0 + offs)
            n_pts.append(np.sum(np.abs(states) ** 2, axis=1))
            if not math.isinf(seg_end):
                psi = prop.evolve(np.atleast_2d(psi), seg_end - t0)[0]
                seg_states.append(psi)
                t_pts.append(np.array([seg_end]))
                n_pts.append(np.array([float(np.sum(np.abs(psi) ** 2))]))

        times = np.concatenate(t_pts)
        norms = np.concatenate(n_pts)
        order = np.argsort(times)
        times, norms = times[order], norms[order]
        norms = np.maximum(np.minimum.accumulate(norms), self._TAIL_FLOOR * 1e-3)
        self._psi_starts[int(level)] = np.stack(seg_states)
        # reversed so np.interp sees increasing x (log of the norm)
        self._grids[int(level)] = (np.log(norms[::-1]), times[::-1].copy())

    def _segment_of(self, t: np.ndarray) -> np.ndarray:
        return np.minimum(
            np.searchsorted(self._starts, t, side="right") - 1,
            len(self._props) - 1)

    def _states_at(self, level: int, t: np.ndarray) -> np.ndarray:
        seg = self._segment_of(t)
        psi = np.empty((t.size, self._maps.sectors[1].size), dtype=complex)
        for s in np.unique(seg):
            rows = np.nonzero(seg == s)[0]
            start = self._psi_starts[level][s]
            psi[rows] = self._props[s].evolve(
                np.broadcast_to(start, (rows.size, start.size)),
                t[rows] - float(self._starts[s]))
        return psi

    def sample(self, initial_level: AtomLevel, uniforms: np.ndarray,
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Scatter one photon per uniform triple.

        uniforms has shape (B, 3); returns (jump_times, channels,
        final_levels) arrays of length B, distributed identically to
        ``run_trajectory`` with one source photon.
        """
        uniforms = np.atleast_2d(np.asarray(uniforms, dtype=float))
        log_rev, t_rev = self._grids[int(initial_level)]
        u = np.minimum(uniforms[:, 0], 1.0 - 1e-15)
        t = np.interp(np.log(u), log_rev, t_rev)

        # one Newton step on norm^2(t) = u, then exact re-evaluation
        psi = self._states_at(int(initial_level), t)
        norm2 = np.sum(np.abs(psi) ** 2, axis=1)
        rate = np.maximum(self._decay_rates(t, psi), 1e-300)
        t = np.maximum(t + (norm2 - u) / rate, 0.0)
        psi = self._states_at(int(initial_level), t)

        seg = self._segment_of(t)
        channels = np.zeros(t.size, dtype=int)
        finals = np.zeros(t.size, dtype=int)
        for s in np.unique(seg):
            rows = np.nonzero(seg == s)[0]
            amps = (psi[rows] @ self._stacked[s].T).reshape(
                rows.size, 7, self._out_dim)
            weights = np.sum(np.abs(amps) ** 2, axis=2)
            cum = np.cumsum(weights, axis=1)
            cum /= cum[:, -1:]
            choice = np.minimum(
                np.sum(cum < uniforms[rows, 1][:, None], axis=1), 6)
            channels[rows] = choice
            picked = np.abs(amps[np.arange(rows.size), choice]) ** 2
            pcum = np.cumsum(picked, axis=1)
            pcum /= pcum[:, -1:]
            pick = np.minimum(
                np.sum(pcum < uniforms[rows, 2][:, None], axis=1),
                self._out_dim - 1)
            finals[rows] = self._level_of_pos[pick]
        return t, channels, finals

    def _decay_rates(self, t: np.ndarray, psi: np.ndarray) -> np.ndarray:
        """-d norm^2/dt (per ns) for each unnormalized state."""
        seg = self._segment_of(t)
        rates = np.empty(t.size)
        for s in np.unique(seg):
            rows = np.nonzero(seg == s)[0]
            amps = psi[rows] @ self._stacked[s].T
            rates[rows] = OMEGA_PER_MHZ * np.sum(np.abs(amps) ** 2, axis=1)
        return rates

    def joint_probabilities(self, initial_level: AtomLevel) -> np.ndarray:
        """Exact P(channel, final sublevel), shape (7, 3), from the closed
        form time integral of each collapse amplitude.  The table sums to
        1: the photon must leave through some channel."""
        maps = self._maps
        sector = maps.sectors[1]
        pos = {int(i): k for k, i in enumerate(sector)}
        psi = np.zeros(sector.size, dtype=complex)
        psi[pos[self.space.index(AtomLevel(initial_level), 0, 0, 1)]] = 1.0

        total = np.zeros(7 * self._out_dim)
        for s, prop in enumerate(self._props):
            span = _segment_end(self._starts, s) - float(self._starts[s])
            coeff = prop.inv @ psi
            amp = (self._stacked[s] @ prop.vecs) * coeff[None, :]
            lam_sum = prop.lam.conj()[:, None] + prop.lam[None, :]
            if math.isinf(span):
                integral = -1.0 / lam_sum
            else:
                integral = (np.exp(lam_sum * span) - 1.0) / lam_sum
            contrib = np.einsum("ki,ij,kj->k", amp.conj(), integral, amp)
            total += OMEGA_PER_MHZ * contrib.real
            if not math.isinf(span):
                psi = prop.evolve(np.atleast_2d(psi), span)[0]

        by_pos = total.reshape(7, self._out_dim)
        table = np.zeros((7, 3))
        for pos_idx, level in enumerate(self._level_of_pos):
            table[:, level] += by_pos[:, pos_idx]
        return table

    def channel_probabilities(self, initial_level: AtomLevel) -> np.ndarray:
        return self.joint_probabilities(initial_level).sum(axis=1)

    def channel_time_table(self, initial_level: AtomLevel,
                           points_per_segment: int = 6,
                           tail_points: int = 120,
                           ) -> tuple[np.ndarray, np.ndarray]:
        """Cumulative jump probability per channel on a time grid.

        Returns ``(times, cum)`` with ``cum`` of shape (7, K):
        ``cum[c, k]`` is the probability that the photon has left through
        channel ``c`` by ``times[k]``.  The last column agrees with
        ``channel_probabilities``; interpolating the inverse of one row
        draws a jump time conditioned on that channel.
        """
        maps = self._maps
        sector = maps.sectors[1]
        pos = {int(i): k for k, i in enumerate(sector)}
        psi = np.zeros(sector.size, dtype=complex)
        psi[pos[self.space.index(AtomLevel(initial_level), 0, 0, 1)]] = 1.0

        t_parts = [np.array([0.0])]
        c_parts = [np.zeros((7, 1))]
        base = np.zeros(7)
        for s, prop in enumerate(self._props):
            t0 = float(self._starts[s])
            span = _segment_end(self._starts, s) - t0
            if math.isinf(span):
                norm0 = float(np.sum(np.abs(psi) ** 2))
                rate = -2.0 * float(np.max(prop.lam.real))
                reach = max(
                    math.log(max(norm0, 1e-30) / self._TAIL_FLOOR) / rate, 1.0)
                offs = np.geomspace(reach * 1e-4, reach, tail_points)
            else:
                offs = np.linspace(0.0, span, points_per_segment + 1)[1:]
            coeff = prop.inv @ psi
            amp = (self._stacked[s] @ prop.vecs) * coeff[None, :]
            lam_sum = prop.lam.conj()[:, None] + prop.lam[None, :]
            integral = (np.exp(lam_sum[None, :, :] * offs[:, None, None])
                        - 1.0) / lam_sum[None, :, :]
            contrib = OMEGA_PER_MHZ * np.einsum(
                "ki,tij,kj->tk", amp.conj(), integral, amp).real
            per_ch = contrib.reshape(
                offs.size, 7, self._out_dim).sum(axis=2).T
            t_parts.append(t0 + offs)
            c_parts.append(base[:, None] + per_ch)
            if not math.isinf(span):
                base = base + per_ch[:, -1]
                psi = prop.evolve(np.atleast_2d(psi), span)[0]
        times = np.concatenate(t_parts)
        cum = np.concatenate(c_parts, axis=1)
        # enforce monotonicity against roundoff so inversion is safe
        cum = np.maximum.accumulate(cum, axis=1)
        return times, cum


# --- serialization ---------------------------------------------------------------

OUTCOME_CSV_HEADER = ("outcome", "toggle", "count", "probability")


def write_outcome_csv(table: OutcomeTable, path: str | Path) -> None:
    """Rows (outcome, toggle, count, probability); DARK rows repeat the
    m_F=0 subset already included in the TOGGLE rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(OUTCOME_CSV_HEADER)
        for outcome in Outcome:
            for toggled, label in ((True, "TOGGLE"), (False, "NO_TOGGLE")):
                count = table.counts.get((outcome, toggled), 0)
                writer.writerow([outcome.name, label, count,
                                 repr(count / table.n_trajectories)])
        for outcome in Outcome:
            count = table.dark_counts.get(outcome, 0)
            writer.writerow([outcome.name, "DARK", count,
                             repr(count / table.n_trajectories)])


def read_outcome_csv(path: str | Path) -> OutcomeTable:
    counts: dict[tuple[Outcome, bool], int] = {}
    dark: dict[Outcome, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != OUTCOME_CSV_HEADER:
            raise InvalidParameterError(f"{path}: bad outcome table header")
        for row in reader:
            outcome = Outcome[row[0]]
            if row[1] == "DARK":
                if int(row[2]):
                    dark[outcome] = int(row[2])
            elif int(row[2]):
                counts[(outcome, row[1] == "TOGGLE")] = int(row[2])
    return OutcomeTable(sum(counts.values()), counts, dark)
