"""Emulation of the switching protocol into time-tagged click streams.

Builds the pulse train (detection pulses with weak target pulses
interleaved), samples atom transits through the resonator mode, scatters
every source photon with the exact single-photon tables from
:mod:`photonswitch.dynamics`, and layers on the detection-chain
imperfections: optical path loss, dark counts and detector afterpulsing.

Timing model
------------
Each pulse is a Gaussian flux of the stated FWHM whose peak sits one FWHM
after the nominal pulse start.  Scattered photons inherit the resonator
response delay, so clicks are assigned to pulses through shifted gates
(``click_gate``) rather than the nominal windows.  All emitted timestamps
are integer picoseconds on the detector resolution grid.

Determinism
-----------
Cycle ``i`` of ``run_experiment(..., seed=s)`` draws from
``default_rng(SeedSequence((s, i)))`` in a frozen order: transits, photon
counts per pulse, the leak split per pulse, one uniform block of four
values per photon of the atom-covered pulses (outcome, jump time, path
survival, detector), photons of empty pulses grouped by pulse shape,
leak click times and routing, dark counts per detector, background
bursts, then afterpulses over the time-sorted surviving primaries.
Detector dead time is enforced greedily per detector (non-paralyzable):
a click within ``dead_time_ns`` of the previous accepted click on the
same detector is discarded and spawns no afterpulse.  Identical inputs
give byte-identical click streams; a run split into chunks via
``first_cycle`` reproduces the unsplit run cycle for cycle.
"""

from __future__ import annotations

import io
import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .dynamics import GaussianSource, JumpChannel, SinglePhotonSampler
from .model import (
    AtomLevel,
    ConfigError,
    GDistribution,
    InvalidParameterError,
    SystemParams,
)

TIMESTAMP_QUANTUM_PS = 100
CLICKS_FORMAT_HEADER = "# clicks v1"

# Click-assignment gate for detection pulses, in ns relative to the flux
# peak.  The scattered photon lags the drive (resonator response), so the
# gate sits later than the nominal window; the width covers > 98% of the
# arrival spread without overlapping the neighbouring pulse's gate.  The
# target pulse instead gets a wide symmetric gate around its nominal
# start, two FWHM to each side.
DETECTION_GATE_NS = (-7.0, 33.0)
TARGET_GATE_HALF_WIDTH_FWHM = 2.0

_CH_TRANSMIT = int(JumpChannel.TRANSMIT)
_CH_REFLECT = int(JumpChannel.REFLECT)


class StreamFormatError(ValueError):
    """A click-stream file violates the format contract."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class Port(IntEnum):
    """The two fibre outputs of the resonator."""

    LEFT = 0
    RIGHT = 1


class Direction(IntEnum):
    """Travel direction of a pulse; fixes the drive polarization.

    Rightward light circulates so that it drives sigma+ transitions,
    leftward light drives sigma-.  A pulse transmits into the port it was
    heading for and reflects back into the port it came from.
    """

    RIGHTWARD = 0
    LEFTWARD = 1

    @property
    def forward(self) -> bool:
        return self is Direction.RIGHTWARD

    @property
    def transmitted_port(self) -> Port:
        return Port.RIGHT if self is Direction.RIGHTWARD else Port.LEFT

    @property
    def reflected_port(self) -> Port:
        return Port.LEFT if self is Direction.RIGHTWARD else Port.RIGHT

    @property
    def opposite(self) -> "Direction":
        return (Direction.LEFTWARD if self is Direction.RIGHTWARD
                else Direction.RIGHTWARD)


class PulseKind(Enum):
    DETECTION = "detection"
    TARGET = "target"


class PulseRole(Enum):
    """What a pulse does for the heralding logic.

    The detection pulse right before a target is the control; the one
    right after it re-arms the atom and is excluded from heralding; the
    two following it confirm the atom was still there; the trailing pad
    keeps the alternation going between sequences.
    """

    CONTROL = "control"
    TARGET = "target"
    RESET = "reset"
    CONFIRM = "confirm"
    PAD = "pad"


class SequenceKind(Enum):
    """A: control opposite the target direction, so a reflected control
    photon leaves the atom reflecting for the target.  B: control parallel
    to the target, so a reflected control photon leaves it transmitting."""

    A = "A"
    B = "B"


_FWHM_TO_SIGMA = 1.0 / math.sqrt(8.0 * math.log(2.0))


@dataclass(frozen=True)
class PulseSpec:
    """One pulse of the chain.  Times in ns, within the cycle frame."""

    kind: PulseKind
    direction: Direction
    fwhm: float
    mean_photons: float
    start: float
    role: PulseRole
    sequence_index: int = -1

    @property
    def duration(self) -> float:
        return 2.0 * self.fwhm

    @property
    def end(self) -> float:
        return self.start + self.duration

    @property
    def peak(self) -> float:
        return self.start + self.fwhm

    @property
    def sigma_t(self) -> float:
        return self.fwhm * _FWHM_TO_SIGMA

    @property
    def source_origin(self) -> float:
        """Turn-on time of the shaped source that realizes this pulse."""
        return self.peak - GaussianSource(fwhm=self.fwhm).center

    @property
    def click_gate(self) -> tuple[float, float]:
        """Interval of click times attributed to this pulse."""
        if self.kind is PulseKind.TARGET:
            half = TARGET_GATE_HALF_WIDTH_FWHM * self.fwhm
            return (self.start - half, self.start + half)
        lo, hi = DETECTION_GATE_NS
        return (self.peak + lo, self.peak + hi)


@dataclass(frozen=True)
class SequenceInfo:
    """Pulse indices making up one control/target/confirm sequence."""

    index: int
    kind: SequenceKind
    control_direction: Direction
    start: float
    end: float
    control: int
    target: int
    reset: int
    confirms: tuple[int, int]
    pad: int


@dataclass(frozen=True)
class ChainConfig:
    """Geometry of the pulse chain.

    The post-control wait keeps the target clear of afterpulses trailing
    the control clicks and is therefore not allowed below 125 ns.
    """

    n_sequences: int = 8
    detection_fwhm: float = 15.0
    detection_mean_photons: float = 2.5
    target_fwhm: float = 50.0
    target_mean_photons: float = 0.24
    post_control_wait: float = 125.0
    detection_gap: float = 10.0
    first_control_direction: Direction = Direction.LEFTWARD

    def __post_init__(self) -> None:
        if self.n_sequences < 0:
            raise ConfigError("n_sequences must be >= 0")
        for name in ("detection_fwhm", "target_fwhm", "detection_gap"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("detection_mean_photons", "target_mean_photons"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.post_control_wait < 125.0:
            raise ConfigError(
                "post_control_wait must be >= 125 ns to outlast afterpulsing")


@dataclass(frozen=True)
class PulseChain:
    """A full cycle of pulses plus the sequence bookkeeping.  Chains that
    carry no control/target structure (calibration runs) have no
    sequences and no config."""

    pulses: tuple[PulseSpec, ...]
    sequences: tuple[SequenceInfo, ...]
    period: float
    config: ChainConfig | None

    @property
    def n_pulses(self) -> int:
        return len(self.pulses)

    def pulses_of(self, role: PulseRole) -> tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.pulses) if p.role is role)


def build_pulse_chain(config: ChainConfig | None = None) -> PulseChain:
    """Lay out the pulse chain for one cycle.

    Each sequence is control, target, reset, two confirms, and a pad; the
    detection pulses alternate direction through the whole chain and the
    target always runs rightward, so consecutive sequences alternate
    between kinds A and B.  An empty chain (``n_sequences=0``) is valid.
    """
    cfg = config if config is not None else ChainConfig()
    pulses: list[PulseSpec] = []
    sequences: list[SequenceInfo] = []
    t = 0.0
    direction = cfg.first_control_direction

    def detection(role: PulseRole, seq: int) -> int:
        nonlocal t, direction
        spec = PulseSpec(PulseKind.DETECTION, direction, cfg.detection_fwhm,
                         cfg.detection_mean_photons, t, role, seq)
        pulses.append(spec)
        t = spec.end + cfg.detection_gap
        direction = direction.opposite
        return len(pulses) - 1

    for u in range(cfg.n_sequences):
        seq_start = t
        kind = (SequenceKind.A if direction is not Direction.RIGHTWARD
                else SequenceKind.B)
        ctl_dir = direction
        i_ctl = detection(PulseRole.CONTROL, u)
        t = pulses[i_ctl].end + cfg.post_control_wait
        target = PulseSpec(PulseKind.TARGET, Direction.RIGHTWARD,
                           cfg.target_fwhm, cfg.target_mean_photons, t,
                           PulseRole.TARGET, u)
        pulses.append(target)
        i_tgt = len(pulses) - 1
        t = target.end + cfg.detection_gap
        i_rst = detection(PulseRole.RESET, u)
        i_c1 = detection(PulseRole.CONFIRM, u)
        i_c2 = detection(PulseRole.CONFIRM, u)
        i_pad = detection(PulseRole.PAD, u)
        sequences.append(SequenceInfo(
            index=u, kind=kind, control_direction=ctl_dir, start=seq_start,
            end=t, control=i_ctl, target=i_tgt, reset=i_rst,
            confirms=(i_c1, i_c2), pad=i_pad))

    for prev, cur in zip(pulses, pulses[1:]):
        if cur.start < prev.end - 1e-9:
            raise ConfigError(
                f"pulses overlap near t={cur.start:.1f} ns")
        if cur.click_gate[0] < prev.click_gate[1] - 1e-9:
            raise ConfigError(
                f"click gates overlap near t={cur.start:.1f} ns; "
                "increase detection_gap or post_control_wait")

    return PulseChain(tuple(pulses), tuple(sequences), t, cfg)


def build_calibration_chain(n_pulses: int = 40,
                            spacing_ns: float = 500.0,
                            fwhm: float = 15.0,
                            mean_photons: float = 2.5) -> PulseChain:
    """Isolated detection pulses for afterpulse calibration.

    Directions alternate so both ports collect primaries.  The spacing
    must comfortably exceed the afterpulse delay span, so that any extra
    click trailing a primary can only be that detector's own afterpulse
    or a dark count, never the next pulse.
    """
    if n_pulses < 1:
        raise ConfigError("n_pulses must be >= 1")
    if spacing_ns < 2.0 * fwhm + 400.0:
        raise ConfigError(
            "spacing_ns too small to isolate the afterpulse tail")
    pulses = tuple(
        PulseSpec(kind=PulseKind.DETECTION,
                  direction=(Direction.LEFTWARD if i % 2
                             else Direction.RIGHTWARD),
                  fwhm=fwhm, mean_photons=mean_photons,
                  start=i * spacing_ns, role=PulseRole.PAD)
        for i in range(n_pulses))
    return PulseChain(pulses, (), n_pulses * spacing_ns, None)


# --- atom transits ----------------------------------------------------------------


class Transit(NamedTuple):
    """One atom crossing: entry time, dwell time, peak coupling (MHz) and
    the ground sublevel it arrives in."""

    start: float
    duration: float
    g_peak: float
    entry_level: int

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class TransitModel:
    """Arrival statistics of atoms falling through the resonator mode.

    Arrivals are Poissonian; dwell times are exponential with the given
    mean; the peak coupling is drawn per atom; a fraction of atoms enters
    in the barely coupled m_F = 0 sublevel and the rest split evenly
    between m_F = -1 and m_F = +1.  ``mean_duration_ns = inf`` pins one
    atom in the mode for the whole span (flat envelope, coupling drawn
    once from the coupling distribution), which isolates the scattering
    physics from the arrival statistics.
    """

    arrival_rate_hz: float = 5.2e6
    mean_duration_ns: float = 380.0
    g_dist: GDistribution = field(default_factory=GDistribution)
    inert_fraction: float = 1.0 / 3.0
    envelope: str = "flat"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.arrival_rate_hz)
                and self.arrival_rate_hz >= 0):
            raise InvalidParameterError("arrival_rate_hz must be >= 0")
        if not self.mean_duration_ns > 0:
            raise InvalidParameterError("mean_duration_ns must be > 0")
        if not 0.0 <= self.inert_fraction <= 1.0:
            raise InvalidParameterError("inert_fraction must be in [0, 1]")
        if self.envelope not in ("sine2", "flat"):
            raise InvalidParameterError(
                f"envelope must be 'sine2' or 'flat', got {self.envelope!r}")

    def coupling_at(self, transit: Transit, t_ns: float) -> float:
        """Coupling seen at time t by an atom on the given transit."""
        if not transit.start <= t_ns <= transit.end:
            return 0.0
        if self.envelope == "flat" or math.isinf(transit.duration):
            return transit.g_peak
        phase = math.pi * (t_ns - transit.start) / transit.duration
        return transit.g_peak * math.sin(phase) ** 2


def sample_transits(model: TransitModel, span_ns: float,
                    seed) -> list[Transit]:
    """Draw the transits overlapping ``[0, span_ns]``.

    Arrivals extend far enough before t=0 that atoms already inside the
    mode at the window start are represented.  At most one atom occupies
    the mode: arrivals during an occupied stretch are discarded.
    ``seed`` is an int, a seed tuple, or a ``numpy.random.Generator``.
    """
    rng = (seed if isinstance(seed, np.random.Generator)
           else np.random.default_rng(seed))
    if math.isinf(model.mean_duration_ns):
        u = rng.random()
        level = _entry_level(u, model.inert_fraction)
        return [Transit(-1.0, math.inf, model.g_dist.sample(rng), level)]

    pad = 10.0 * model.mean_duration_ns
    mean_count = model.arrival_rate_hz * 1e-9 * (span_ns + pad)
    n = int(rng.poisson(mean_count)) if mean_count > 0 else 0
    if n == 0:
        return []
    starts = np.sort(rng.uniform(-pad, span_ns, n))
    durations = rng.exponential(model.mean_duration_ns, n)
    peaks = np.atleast_1d(model.g_dist.sample(rng, n))
    entries = rng.random(n)

    out: list[Transit] = []
    free_at = -math.inf
    for i in range(n):
        if starts[i] < free_at:
            continue
        free_at = starts[i] + durations[i]
        if free_at <= 0.0:
            continue
        out.append(Transit(float(starts[i]), float(durations[i]),
                           float(peaks[i]),
                           _entry_level(float(entries[i]),
                                        model.inert_fraction)))
    return out


def _entry_level(u: float, inert_fraction: float) -> int:
    if u < inert_fraction:
        return int(AtomLevel.G_ZERO)
    if inert_fraction >= 1.0:
        return int(AtomLevel.G_ZERO)
    rest = (u - inert_fraction) / (1.0 - inert_fraction)
    return int(AtomLevel.G_MINUS if rest < 0.5 else AtomLevel.G_PLUS)


# --- detection chain ---------------------------------------------------------------


@dataclass(frozen=True)
class DetectorParams:
    """Path efficiency, detector layout, and background processes.

    ``afterpulse_window_prob`` is the per-port probability that a primary
    click is followed by an afterpulse on the same detector within the
    reference gate ``afterpulse_gate_ns`` after the click (the control-to-
    target-window delay of the default chain); delays are exponential with
    ``afterpulse_tau_ns``, so afterpulses also spill outside the reference
    gate, which is why the analysis subtracts them from the measured delay
    histogram rather than from the window number alone.  ``dead_time_ns``
    is the non-paralyzable detector dead time: it must stay below the
    afterpulse gate so the reference window is not clipped.  ``reflected_leak_per_photon`` is the chance for
    a source photon to bypass the resonator through the imperfect
    circulator and click a detector on the pulse's reflection port.

    Background bursts model the occasional stray-light flash that sprays
    a handful of clicks across all detectors within a short span.  They
    are the dominant cause of false atom detections: uncorrelated darks
    and leak clicks essentially never pile three reflected-gate clicks
    into one herald window, while one flash can.  The default burst rate
    is calibrated so that, under the default chain and transit model,
    about 1.5 percent of detected atom events are such fakes.
    """

    path_transmission: float = 0.52
    detectors_left: tuple[int, ...] = (0, 1)
    detectors_right: tuple[int, ...] = (2, 3, 4)
    dark_rate_hz: float = 200.0
    reflected_leak_per_photon: float = 0.008
    dead_time_ns: float = 35.0
    afterpulse_window_prob: tuple[float, float] = (5.3e-4, 8.1e-4)
    afterpulse_tau_ns: float = 100.0
    afterpulse_gate_ns: tuple[float, float] = (140.0, 240.0)
    burst_rate_hz: float = 300.0
    burst_mean_clicks: float = 6.0
    burst_spread_ns: float = 500.0
    resolution_ps: int = 100

    def __post_init__(self) -> None:
        if not 0.0 < self.path_transmission <= 1.0:
            raise InvalidParameterError("path_transmission must be in (0, 1]")
        ids = self.detectors_left + self.detectors_right
        if not self.detectors_left or not self.detectors_right:
            raise InvalidParameterError("each port needs >= 1 detector")
        if len(set(ids)) != len(ids) or min(ids) < 0:
            raise InvalidParameterError(
                "detector ids must be unique and >= 0")
        for p in self.afterpulse_window_prob:
            if not 0.0 <= p < 0.1:
                raise InvalidParameterError(
                    "afterpulse_window_prob entries must be in [0, 0.1)")
        if not self.afterpulse_tau_ns > 0:
            raise InvalidParameterError("afterpulse_tau_ns must be > 0")
        lo, hi = self.afterpulse_gate_ns
        if not 0.0 <= lo < hi:
            raise InvalidParameterError("afterpulse_gate_ns must be ascending")
        if self.dead_time_ns < 0:
            raise InvalidParameterError("dead_time_ns must be >= 0")
        if any(self.afterpulse_window_prob) and self.dead_time_ns >= lo:
            raise InvalidParameterError(
                "dead_time_ns must be below the afterpulse gate start")
        if self.dark_rate_hz < 0:
            raise InvalidParameterError("dark_rate_hz must be >= 0")
        if self.burst_rate_hz < 0:
            raise InvalidParameterError("burst_rate_hz must be >= 0")
        if self.burst_mean_clicks < 0:
            raise InvalidParameterError("burst_mean_clicks must be >= 0")
        if not self.burst_spread_ns > 0:
            raise InvalidParameterError("burst_spread_ns must be > 0")
        if not 0.0 <= self.reflected_leak_per_photon < 1.0:
            raise InvalidParameterError(
                "reflected_leak_per_photon must be in [0, 1)")
        if (self.resolution_ps <= 0
                or self.resolution_ps % TIMESTAMP_QUANTUM_PS != 0):
            raise InvalidParameterError(
                f"resolution_ps must be a positive multiple of "
                f"{TIMESTAMP_QUANTUM_PS}")

    @property
    def n_detectors(self) -> int:
        return len(self.detectors_left) + len(self.detectors_right)

    @property
    def all_detectors(self) -> tuple[int, ...]:
        return tuple(sorted(self.detectors_left + self.detectors_right))

    def detectors_of(self, port: Port) -> tuple[int, ...]:
        return (self.detectors_left if port is Port.LEFT
                else self.detectors_right)

    def port_of(self, detector: int) -> Port:
        if detector in self.detectors_left:
            return Port.LEFT
        if detector in self.detectors_right:
            return Port.RIGHT
        raise InvalidParameterError(f"unknown detector id {detector}")

    def afterpulse_click_prob(self, port: Port) -> float:
        """Per-click afterpulse probability implied by the window spec."""
        lo, hi = self.afterpulse_gate_ns
        tau = self.afterpulse_tau_ns
        mass = math.exp(-lo / tau) - math.exp(-hi / tau)
        return self.afterpulse_window_prob[int(port)] / mass


class ClickRecord(NamedTuple):
    cycle_id: int
    detector_id: int
    timestamp_ps: int


@dataclass
class ClickStream:
    """Column-wise click storage, sorted by (cycle, timestamp, detector)."""

    cycle_ids: np.ndarray
    detector_ids: np.ndarray
    timestamps_ps: np.ndarray

    def __len__(self) -> int:
        return int(self.cycle_ids.size)

    def records(self) -> Iterator[ClickRecord]:
        for c, d, t in zip(self.cycle_ids, self.detector_ids,
                           self.timestamps_ps):
            yield ClickRecord(int(c), int(d), int(t))

    @classmethod
    def from_records(cls, records: Sequence[ClickRecord]) -> "ClickStream":
        rows = sorted((int(c), int(t), int(d)) for c, d, t in records)
        return cls(
            cycle_ids=np.array([r[0] for r in rows], dtype=np.int64),
            detector_ids=np.array([r[2] for r in rows], dtype=np.int16),
            timestamps_ps=np.array([r[1] for r in rows], dtype=np.int64))

    @property
    def n_cycles_seen(self) -> int:
        return int(self.cycle_ids.max()) + 1 if len(self) else 0


class PulseTruth(NamedTuple):
    """Ground truth for one pulse: atom coverage and physical scattering
    counts before any detection loss."""

    present: int
    g: float
    entry_level: int
    exit_level: int
    n_photons: int
    n_reflected: int
    n_transmitted: int


@dataclass
class CycleTruth:
    cycle_id: int
    transits: tuple[Transit, ...]
    pulses: tuple[PulseTruth, ...]

    def to_json_line(self) -> str:
        return json.dumps({
            "cycle": self.cycle_id,
            "transits": [[t.start, t.duration, t.g_peak, t.entry_level]
                         for t in self.transits],
            "pulses": [list(p) for p in self.pulses],
        })

    @classmethod
    def from_json_line(cls, line: str) -> "CycleTruth":
        obj = json.loads(line)
        return cls(
            cycle_id=int(obj["cycle"]),
            transits=tuple(Transit(float(s), float(d), float(g), int(lv))
                           for s, d, g, lv in obj["transits"]),
            pulses=tuple(PulseTruth(int(a), float(g), int(e), int(x),
                                    int(n), int(r), int(tr))
                         for a, g, e, x, n, r, tr in obj["pulses"]))


@dataclass
class ExperimentResult:
    """Click stream plus the configuration that produced it."""

    params: SystemParams
    chain: PulseChain
    transit_model: TransitModel
    detector_params: DetectorParams
    n_cycles: int
    seed: tuple[int, ...]
    stream: ClickStream
    truth: list[CycleTruth] | None

    @property
    def n_clicks(self) -> int:
        return len(self.stream)


# --- per-photon scattering tables ---------------------------------------------------

_TABLES: dict = {}


class _ScatterTable:
    """O(1) photon scatterer built from one ``SinglePhotonSampler``.

    Stores, per initial ground level, the exact cumulative joint
    distribution over (channel, final level) and, for the two output
    channels, the cumulative jump-time grid.  Jump times are drawn
    conditioned on the channel only; the residual correlation between the
    jump time and the final level within one channel is dropped.
    """

    __slots__ = ("joint_cum", "joint_cum_np", "time_inv", "time_inv_np")

    def __init__(self, sampler: SinglePhotonSampler):
        self.joint_cum: list[list[float]] = []
        self.joint_cum_np: list[np.ndarray] = []
        self.time_inv: list[list] = []
        self.time_inv_np: list[list] = []
        for level in range(3):
            joint = sampler.joint_probabilities(AtomLevel(level))
            flat = np.cumsum(joint.reshape(-1))
            flat /= flat[-1]
            self.joint_cum_np.append(flat)
            self.joint_cum.append(flat.tolist())
            times, cum = sampler.channel_time_table(AtomLevel(level))
            per_ch: list = [None, None]
            per_ch_np: list = [None, None]
            for ch in (_CH_TRANSMIT, _CH_REFLECT):
                total = float(cum[ch, -1])
                if total < 1e-12:
                    continue
                grid = cum[ch] / total
                keep = np.diff(grid, prepend=-1.0) > 1e-15
                per_ch_np[ch] = (grid[keep], times[keep])
                per_ch[ch] = (grid[keep].tolist(), times[keep].tolist())
            self.time_inv.append(per_ch)
            self.time_inv_np.append(per_ch_np)

    def draw(self, level: int, u_out: float, u_time: float,
             ) -> tuple[int, int, float]:
        """Scatter one photon: (channel, final level, jump time)."""
        cum = self.joint_cum[level]
        k = bisect_right(cum, u_out)
        if k > 20:
            k = 20
        ch, fin = divmod(k, 3)
        if ch > _CH_REFLECT or self.time_inv[level][ch] is None:
            return ch, fin, 0.0
        cgrid, tgrid = self.time_inv[level][ch]
        j = bisect_right(cgrid, u_time)
        if j <= 0:
            return ch, fin, tgrid[0]
        if j >= len(cgrid):
            return ch, fin, tgrid[-1]
        frac = (u_time - cgrid[j - 1]) / (cgrid[j] - cgrid[j - 1])
        return ch, fin, tgrid[j - 1] + frac * (tgrid[j] - tgrid[j - 1])

    def draw_many(self, level: int, uniforms: np.ndarray,
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized ``draw`` for state-independent (empty-mode) pulses."""
        k = np.searchsorted(self.joint_cum_np[level], uniforms[:, 0],
                            side="right")
        np.clip(k, 0, 20, out=k)
        ch, fin = np.divmod(k, 3)
        t = np.zeros(uniforms.shape[0])
        for c in (_CH_TRANSMIT, _CH_REFLECT):
            rows = ch == c
            if rows.any() and self.time_inv_np[level][c] is not None:
                cgrid, tgrid = self.time_inv_np[level][c]
                t[rows] = np.interp(uniforms[rows, 1], cgrid, tgrid)
        return ch, fin, t


def _scatter_table(params: SystemParams, g_value: float, fwhm: float,
                   forward: bool) -> _ScatterTable:
    key = (params, round(float(g_value), 6), round(float(fwhm), 6),
           bool(forward))
    table = _TABLES.get(key)
    if table is None:
        sampler = SinglePhotonSampler(
            params.with_coupling(float(g_value)),
            source=GaussianSource(fwhm=float(fwhm)), forward=bool(forward))
        table = _ScatterTable(sampler)
        _TABLES[key] = table
    return table


# --- the emulator -----------------------------------------------------------------


def _seed_tuple(seed) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def _dead_time_keep(t: np.ndarray, d: np.ndarray,
                    dead_ns: float) -> np.ndarray:
    """Keep-mask for clicks sorted by (detector, time).

    Greedy non-paralyzable model: a click is kept iff it falls at least
    ``dead_ns`` after the previous kept click on the same detector.
    """
    keep = np.ones(t.size, dtype=bool)
    if dead_ns <= 0 or t.size < 2:
        return keep
    tight = (d[1:] == d[:-1]) & (t[1:] - t[:-1] < dead_ns)
    if not tight.any():
        return keep
    bounds = np.flatnonzero(d[1:] != d[:-1]) + 1
    starts = [0] + bounds.tolist()
    stops = bounds.tolist() + [t.size]
    for lo, hi in zip(starts, stops):
        if not tight[lo:hi - 1].any():
            continue
        last = t[lo]
        for i in range(lo + 1, hi):
            if t[i] - last >= dead_ns:
                last = t[i]
            else:
                keep[i] = False
    return keep


def run_experiment(params: SystemParams, chain: PulseChain,
                   transit_model: TransitModel,
                   detector_params: DetectorParams,
                   n_cycles: int, seed, *,
                   g_quantum: float = 2.0,
                   include_truth: bool = True,
                   first_cycle: int = 0) -> ExperimentResult:
    """Emulate ``n_cycles`` independent cycles of the pulse chain.

    The atomic state persists from pulse to pulse while the same atom
    stays in the mode; atom presence and coupling are frozen per pulse at
    the value seen by the pulse peak, and the coupling is quantized to
    ``g_quantum`` MHz so scattering tables can be reused.  Photons inside
    one pulse scatter sequentially off the current atom state, which is
    exact for well-separated photons and a good approximation at the pulse
    strengths used here.

    ``first_cycle`` offsets the emitted cycle ids and the per-cycle seeds
    together, so concatenating runs over ``[0, k)`` and ``[k, n)``
    reproduces the single run over ``[0, n)`` exactly.
    """
    if n_cycles < 0:
        raise InvalidParameterError("n_cycles must be >= 0")
    if first_cycle < 0:
        raise InvalidParameterError("first_cycle must be >= 0")
    if not g_quantum > 0:
        raise InvalidParameterError("g_quantum must be > 0")
    dp = detector_params
    base = _seed_tuple(seed)
    pulses = chain.pulses
    n_p = len(pulses)
    mean_vec = np.array([p.mean_photons for p in pulses])
    peaks = np.array([p.peak for p in pulses])
    origins = np.array([p.source_origin for p in pulses])
    sigmas = np.array([p.sigma_t for p in pulses])
    refl_port_arr = np.array([int(p.direction.reflected_port)
                              for p in pulses])

    # static grouping of pulses by table shape, for the empty-mode path
    shape_keys = sorted({(p.fwhm, p.direction.forward) for p in pulses})
    shape_members = {
        k: np.array([i for i, p in enumerate(pulses)
                     if (p.fwhm, p.direction.forward) == k], dtype=int)
        for k in shape_keys}

    max_det = max(dp.all_detectors) if dp.all_detectors else 0
    port_of_det = np.full(max_det + 1, -1, dtype=int)
    for d in dp.detectors_left:
        port_of_det[d] = int(Port.LEFT)
    for d in dp.detectors_right:
        port_of_det[d] = int(Port.RIGHT)
    det_of_port = (np.array(dp.detectors_left, dtype=np.int16),
                   np.array(dp.detectors_right, dtype=np.int16))
    ap_prob = np.zeros(max_det + 1)
    for d in dp.all_detectors:
        ap_prob[d] = dp.afterpulse_click_prob(dp.port_of(d))

    res_ns = dp.resolution_ps * 1e-3
    period_ps = int(round(chain.period * 1000.0))
    origins_l = origins.tolist()
    det_lists = (list(map(int, dp.detectors_left)),
                 list(map(int, dp.detectors_right)))
    shapes_l = [(p.fwhm, p.direction.forward) for p in pulses]
    draw_cache: dict[tuple, object] = {}

    all_det_arr = np.array(dp.all_detectors, dtype=np.int16)
    out_cycle: list[np.ndarray] = []
    out_det: list[np.ndarray] = []
    out_ts: list[np.ndarray] = []
    truths: list[CycleTruth] | None = [] if include_truth else None

    for cycle in range(first_cycle, first_cycle + n_cycles):
        rng = np.random.default_rng(np.random.SeedSequence(base + (cycle,)))
        transits = sample_transits(transit_model, chain.period, rng)
        counts = rng.poisson(mean_vec).astype(int) if n_p else np.zeros(0, int)
        if n_p and dp.reflected_leak_per_photon > 0:
            n_leak = rng.binomial(counts, dp.reflected_leak_per_photon)
        else:
            n_leak = np.zeros(n_p, dtype=int)
        scat = counts - n_leak

        cover = np.full(n_p, -1, dtype=int)
        g_eff = np.zeros(n_p)
        if transits:
            t_starts = np.array([tr.start for tr in transits])
            t_ends = np.array([tr.end for tr in transits])
            idx = np.searchsorted(t_starts, peaks, side="right") - 1
            hit = (idx >= 0) & (peaks <= t_ends[np.maximum(idx, 0)])
            if transit_model.envelope == "flat":
                g_pk = np.array([tr.g_peak for tr in transits])
                gq = (np.round(g_pk[np.maximum(idx, 0)] / g_quantum)
                      * g_quantum)
                ok = hit & (gq > 0.0)
                cover[ok] = idx[ok]
                g_eff[ok] = gq[ok]
            else:
                for i in np.nonzero(hit)[0]:
                    g = transit_model.coupling_at(transits[idx[i]], peaks[i])
                    gq2 = round(g / g_quantum) * g_quantum
                    if gq2 > 0.0:
                        cover[i] = idx[i]
                        g_eff[i] = gq2

        click_t: list[np.ndarray] = []
        click_d: list[np.ndarray] = []
        atom_t: list[float] = []
        atom_d: list[int] = []
        n_refl = np.zeros(n_p, dtype=int)
        n_trans = np.zeros(n_p, dtype=int)
        entry_lv = np.full(n_p, -1, dtype=int)
        exit_lv = np.full(n_p, -1, dtype=int)

        # atom-covered pulses, chronologically, chaining the sublevel;
        # four uniforms per photon (outcome, jump time, path, detector)
        # drawn as one block per cycle
        cov_idx = np.nonzero(cover >= 0)[0]
        n_cov_ph = int(scat[cov_idx].sum()) if cov_idx.size else 0
        u_rows = rng.random((n_cov_ph, 4)).tolist() if n_cov_ph else []
        path_p = dp.path_transmission
        cur = 0
        active = -1
        level = -1
        for i in cov_idx:
            if cover[i] != active:
                active = int(cover[i])
                level = transits[active].entry_level
            entry_lv[i] = level
            m = int(scat[i])
            if m == 0:
                exit_lv[i] = level
                continue
            fwhm, fwd = shapes_l[i]
            dkey = (g_eff[i], fwhm, fwd)
            draw = draw_cache.get(dkey)
            if draw is None:
                draw = _scatter_table(params, g_eff[i], fwhm, fwd).draw
                draw_cache[dkey] = draw
            direction = pulses[i].direction
            origin = origins_l[i]
            nr = nt = 0
            for k in range(cur, cur + m):
                u0, u1, u2, u3 = u_rows[k]
                ch, fin, t_rel = draw(level, u0, u1)
                if ch == _CH_REFLECT or ch == _CH_TRANSMIT:
                    if ch == _CH_REFLECT:
                        nr += 1
                        port = direction.reflected_port
                    else:
                        nt += 1
                        port = direction.transmitted_port
                    if u2 < path_p:
                        dets = det_lists[int(port)]
                        pick = int(u3 * len(dets))
                        if pick >= len(dets):
                            pick = len(dets) - 1
                        atom_t.append(origin + t_rel)
                        atom_d.append(dets[pick])
                level = fin
            cur += m
            n_refl[i] = nr
            n_trans[i] = nt
            exit_lv[i] = level
        if atom_t:
            click_t.append(np.array(atom_t))
            click_d.append(np.array(atom_d, dtype=np.int16))

        # empty-mode pulses, vectorized per pulse shape
        for key in shape_keys:
            members = shape_members[key]
            members = members[cover[members] < 0]
            if members.size == 0:
                continue
            c = scat[members]
            total = int(c.sum())
            if total == 0:
                continue
            table = _scatter_table(params, 0.0, key[0], key[1])
            u = rng.random((total, 2))
            ch, _, t_rel = table.draw_many(int(AtomLevel.G_ZERO), u)
            pulse_rep = np.repeat(members, c)
            rmask = ch == _CH_REFLECT
            tmask = ch == _CH_TRANSMIT
            n_refl += np.bincount(pulse_rep[rmask], minlength=n_p)
            n_trans += np.bincount(pulse_rep[tmask], minlength=n_p)
            cand = rmask | tmask
            n_cand = int(cand.sum())
            if n_cand == 0:
                continue
            keep = rng.random(n_cand) < dp.path_transmission
            u_det = rng.random(n_cand)
            direction = Direction.RIGHTWARD if key[1] else Direction.LEFTWARD
            port = np.where(rmask[cand], int(direction.reflected_port),
                            int(direction.transmitted_port))
            dsel = np.empty(n_cand, dtype=np.int16)
            for pv in (0, 1):
                rows = port == pv
                if rows.any():
                    arr = det_of_port[pv]
                    idx = (u_det[rows] * len(arr)).astype(int)
                    np.clip(idx, 0, len(arr) - 1, out=idx)
                    dsel[rows] = arr[idx]
            times = origins[pulse_rep[cand]] + t_rel[cand]
            click_t.append(times[keep])
            click_d.append(dsel[keep])

        # circulator leak: photons skip the resonator and land prompt on
        # the reflection port of their own pulse
        total_leak = int(n_leak.sum())
        if total_leak:
            rep = np.repeat(np.arange(n_p), n_leak)
            times = rng.normal(peaks[rep], sigmas[rep])
            keep = rng.random(total_leak) < dp.path_transmission
            u_det = rng.random(total_leak)
            port = refl_port_arr[rep]
            dsel = np.empty(total_leak, dtype=np.int16)
            for pv in (0, 1):
                rows = port == pv
                if rows.any():
                    arr = det_of_port[pv]
                    idx = (u_det[rows] * len(arr)).astype(int)
                    np.clip(idx, 0, len(arr) - 1, out=idx)
                    dsel[rows] = arr[idx]
            click_t.append(times[keep])
            click_d.append(dsel[keep])

        # dark counts
        if dp.dark_rate_hz > 0 and chain.period > 0:
            for d in dp.all_detectors:
                nd = int(rng.poisson(dp.dark_rate_hz * 1e-9 * chain.period))
                if nd:
                    click_t.append(rng.uniform(0.0, chain.period, nd))
                    click_d.append(np.full(nd, d, dtype=np.int16))

        # background bursts: clicks sprayed over all detectors within a
        # short span; clicks pushed outside the cycle are dropped later
        # by the time-range mask
        if dp.burst_rate_hz > 0 and chain.period > 0:
            span = chain.period + dp.burst_spread_ns
            nb = int(rng.poisson(dp.burst_rate_hz * 1e-9 * span))
            for _ in range(nb):
                t0 = rng.uniform(-dp.burst_spread_ns, chain.period)
                nk = int(rng.poisson(dp.burst_mean_clicks))
                if nk == 0:
                    continue
                click_t.append(t0 + rng.uniform(0.0, dp.burst_spread_ns, nk))
                click_d.append(rng.choice(all_det_arr, size=nk))

        if click_t:
            t_arr = np.concatenate(click_t)
            d_arr = np.concatenate(click_d).astype(np.int16)
        else:
            t_arr = np.zeros(0)
            d_arr = np.zeros(0, dtype=np.int16)
        # dead time swallows primaries first; survivors may afterpulse,
        # and the merged set passes through the dead-time filter again
        order = np.lexsort((t_arr, d_arr))
        t_arr, d_arr = t_arr[order], d_arr[order]
        keep = _dead_time_keep(t_arr, d_arr, dp.dead_time_ns)
        t_arr, d_arr = t_arr[keep], d_arr[keep]
        order = np.lexsort((d_arr, t_arr))
        t_arr, d_arr = t_arr[order], d_arr[order]

        if t_arr.size:
            fire = rng.random(t_arr.size) < ap_prob[d_arr]
            n_ap = int(fire.sum())
            if n_ap:
                delays = rng.exponential(dp.afterpulse_tau_ns, n_ap)
                t_arr = np.concatenate([t_arr, t_arr[fire] + delays])
                d_arr = np.concatenate([d_arr, d_arr[fire]])
                order = np.lexsort((t_arr, d_arr))
                t_arr, d_arr = t_arr[order], d_arr[order]
                keep = _dead_time_keep(t_arr, d_arr, dp.dead_time_ns)
                t_arr, d_arr = t_arr[keep], d_arr[keep]

        ts_ps = np.rint(t_arr / res_ns).astype(np.int64) * dp.resolution_ps
        ok = (ts_ps >= 0) & (ts_ps < period_ps)
        ts_ps, d_arr = ts_ps[ok], d_arr[ok]
        order = np.lexsort((d_arr, ts_ps))
        ts_ps, d_arr = ts_ps[order], d_arr[order]

        out_cycle.append(np.full(ts_ps.size, cycle, dtype=np.int64))
        out_det.append(d_arr)
        out_ts.append(ts_ps)

        if truths is not None:
            rows = tuple(map(PulseTruth,
                             (cover >= 0).view(np.int8).tolist(),
                             g_eff.tolist(), entry_lv.tolist(),
                             exit_lv.tolist(), counts.tolist(),
                             n_refl.tolist(), n_trans.tolist()))
            truths.append(CycleTruth(cycle, tuple(transits), rows))

    stream = ClickStream(
        cycle_ids=(np.concatenate(out_cycle) if out_cycle
                   else np.zeros(0, dtype=np.int64)),
        detector_ids=(np.concatenate(out_det) if out_det
                      else np.zeros(0, dtype=np.int16)),
        timestamps_ps=(np.concatenate(out_ts) if out_ts
                       else np.zeros(0, dtype=np.int64)))
    return ExperimentResult(
        params=params, chain=chain, transit_model=transit_model,
        detector_params=dp, n_cycles=n_cycles, seed=base, stream=stream,
        truth=truths)


# --- stream serialization -----------------------------------------------------------


def write_clicks(stream: ClickStream | ExperimentResult,
                 path: str | Path) -> None:
    """Write a click stream: one header line, then one tab-separated
    ``cycle_id  detector_id  timestamp_ps`` row per click."""
    if isinstance(stream, ExperimentResult):
        stream = stream.stream
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CLICKS_FORMAT_HEADER + "\n")
        if len(stream):
            data = np.column_stack([
                stream.cycle_ids,
                stream.detector_ids.astype(np.int64),
                stream.timestamps_ps])
            np.savetxt(fh, data, fmt="%d\t%d\t%d", newline="\n")


def read_clicks(path: str | Path) -> ClickStream:
    """Read and validate a click stream written by :func:`write_clicks`."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if header.rstrip("\n") != CLICKS_FORMAT_HEADER:
            raise StreamFormatError(
                f"expected header {CLICKS_FORMAT_HEADER!r}", 1)
        body = fh.read()
    if not body.strip():
        return ClickStream(np.zeros(0, dtype=np.int64),
                           np.zeros(0, dtype=np.int16),
                           np.zeros(0, dtype=np.int64))
    try:
        data = np.loadtxt(io.StringIO(body), dtype=np.int64,
                          delimiter="\t", ndmin=2)
    except ValueError:
        for ln, line in enumerate(body.splitlines(), start=2):
            parts = line.split("\t")
            if len(parts) != 3:
                raise StreamFormatError(
                    f"expected 3 tab-separated fields, got "
                    f"{len(parts)}", ln) from None
            for part in parts:
                try:
                    int(part)
                except ValueError:
                    raise StreamFormatError(
                        f"non-integer field {part!r}", ln) from None
        raise StreamFormatError("malformed stream", 2) from None

    if data.size == 0:
        return ClickStream(np.zeros(0, dtype=np.int64),
                           np.zeros(0, dtype=np.int16),
                           np.zeros(0, dtype=np.int64))
    if data.shape[1] != 3:
        raise StreamFormatError(
            f"expected 3 columns, got {data.shape[1]}", 2)
    cycles, dets, ts = data[:, 0], data[:, 1], data[:, 2]

    def first_bad(mask: np.ndarray) -> int:
        return int(np.nonzero(mask)[0][0]) + 2

    bad = cycles < 0
    if bad.any():
        raise StreamFormatError("negative cycle_id", first_bad(bad))
    bad = (dets < 0) | (dets > 4095)
    if bad.any():
        raise StreamFormatError("detector_id out of range", first_bad(bad))
    bad = (ts < 0) | (ts % TIMESTAMP_QUANTUM_PS != 0)
    if bad.any():
        raise StreamFormatError(
            f"timestamp not a multiple of {TIMESTAMP_QUANTUM_PS} ps",
            first_bad(bad))
    if len(cycles) > 1:
        c0, c1 = cycles[:-1], cycles[1:]
        t0, t1 = ts[:-1], ts[1:]
        d0, d1 = dets[:-1], dets[1:]
        disorder = (c1 < c0) | ((c1 == c0) & ((t1 < t0) | (
            (t1 == t0) & (d1 < d0))))
        if disorder.any():
            raise StreamFormatError(
                "rows not sorted by (cycle_id, timestamp_ps, detector_id)",
                first_bad(disorder) + 1)
    return ClickStream(cycle_ids=cycles,
                       detector_ids=dets.astype(np.int16),
                       timestamps_ps=ts)


def truth_path_for(clicks_path: str | Path) -> Path:
    """Sidecar path convention: same stem, ``.truth`` suffix."""
    return Path(clicks_path).with_suffix(".truth")


def write_truth(truths: Sequence[CycleTruth], path: str | Path) -> None:
    """Ground-truth sidecar, one JSON object per cycle per line.  Meant
    for tests and diagnostics, not as part of the click-stream format."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in truths:
            fh.write(t.to_json_line() + "\n")


def read_truth(path: str | Path) -> list[CycleTruth]:
    with open(path, "r", encoding="utf-8") as fh:
        return [CycleTruth.from_json_line(line)
                for line in fh if line.strip()]
