"""Click-stream analysis: atom heralding and switching statistics.

Works from a :class:`~photonswitch.experiment.ClickStream` plus the
:class:`~photonswitch.experiment.PulseChain` that produced it and an
explicit detector-to-port mapping.  The mapping carries no default on
purpose: analysing a stream with the wrong port assignment produces
quietly wrong statistics, so the caller must state it.

A click is attributed to a pulse when it falls inside the pulse's click
gate; it counts as reflected when its detector sits on the port the pulse
reflects into.  Atom events are heralded per sequence from the detection
pulses alone, so the target outcome stays unbiased.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .experiment import (
    ClickStream,
    Direction,
    ExperimentResult,
    Port,
    PulseChain,
    PulseKind,
    PulseRole,
    SequenceKind,
    DetectorParams,
)
from .model import ConfigError, InvalidParameterError


@dataclass(frozen=True)
class DetectorRoles:
    """Which detectors watch which resonator output.  No defaults: the
    mapping must come from the setup that recorded the stream."""

    detectors_left: tuple[int, ...]
    detectors_right: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.detectors_left or not self.detectors_right:
            raise ConfigError("each port needs at least one detector")
        ids = self.detectors_left + self.detectors_right
        if len(set(ids)) != len(ids) or min(ids) < 0:
            raise ConfigError("detector ids must be unique and >= 0")

    @classmethod
    def from_params(cls, params: DetectorParams) -> "DetectorRoles":
        return cls(detectors_left=params.detectors_left,
                   detectors_right=params.detectors_right)

    def detectors_of(self, port: Port) -> tuple[int, ...]:
        return (self.detectors_left if port is Port.LEFT
                else self.detectors_right)

    def port_lookup(self) -> np.ndarray:
        """Array mapping detector id to port value (-1 for unmapped)."""
        top = max(self.detectors_left + self.detectors_right)
        table = np.full(top + 1, -1, dtype=int)
        for d in self.detectors_left:
            table[d] = int(Port.LEFT)
        for d in self.detectors_right:
            table[d] = int(Port.RIGHT)
        return table


@dataclass(frozen=True)
class HeraldCriterion:
    """Atom-presence test: enough reflected detection clicks bunched in
    time, plus a reflected click in each designated confirm pulse.

    ``min_control_reflected`` additionally demands that many reflected
    clicks in the control gate itself; the default of 0 keeps events whose
    atom is pinned only by the confirm pulses.
    """

    min_reflected: int = 3
    window_ns: float = 400.0
    confirm_pulses: int = 2
    min_control_reflected: int = 0

    def __post_init__(self) -> None:
        if self.min_reflected < 1:
            raise InvalidParameterError("min_reflected must be >= 1")
        if not self.window_ns > 0:
            raise InvalidParameterError("window_ns must be > 0")
        if not 0 <= self.confirm_pulses <= 2:
            raise InvalidParameterError("confirm_pulses must be 0, 1 or 2")
        if self.min_control_reflected < 0:
            raise InvalidParameterError(
                "min_control_reflected must be >= 0")


class GateClick(tuple):
    """(timestamp_ps, detector_id, is_reflected) for one gated click."""

    __slots__ = ()

    def __new__(cls, timestamp_ps: int, detector_id: int,
                is_reflected: bool):
        return super().__new__(
            cls, (int(timestamp_ps), int(detector_id), bool(is_reflected)))

    @property
    def timestamp_ps(self) -> int:
        return self[0]

    @property
    def detector_id(self) -> int:
        return self[1]

    @property
    def is_reflected(self) -> bool:
        return self[2]


@dataclass(frozen=True)
class AtomEvent:
    """One heralded atom: a sequence whose detection pulses showed the
    atom before and after the target pulse.  ``target_gate_ps`` carries
    the click gate of the target pulse so afterpulse exposures can be
    computed per control click downstream."""

    cycle_id: int
    sequence_index: int
    kind: SequenceKind
    control_direction: Direction
    herald_time_ps: int
    control_clicks: tuple[GateClick, ...]
    target_clicks: tuple[GateClick, ...]
    target_gate_ps: tuple[int, int] = (0, 0)

    @property
    def control_reflected(self) -> int:
        return sum(1 for c in self.control_clicks if c.is_reflected)


class _GatedStream:
    """Clicks of one stream attributed to pulses of the chain."""

    def __init__(self, stream: ClickStream, chain: PulseChain,
                 roles: DetectorRoles):
        self.chain = chain
        self.roles = roles
        pulses = chain.pulses
        gate_lo = np.array([round(p.click_gate[0] * 1000) for p in pulses],
                           dtype=np.int64)
        gate_hi = np.array([round(p.click_gate[1] * 1000) for p in pulses],
                           dtype=np.int64)
        refl_port = np.array([int(p.direction.reflected_port)
                              for p in pulses])
        is_detection = np.array([p.kind is PulseKind.DETECTION
                                 for p in pulses])
        port_of = roles.port_lookup()

        ts = stream.timestamps_ps
        det = stream.detector_ids.astype(int)
        self.cycle = stream.cycle_ids
        self.ts = ts
        self.det = det
        if len(pulses) == 0 or ts.size == 0:
            self.pulse = np.full(ts.size, -1, dtype=int)
            self.reflected = np.zeros(ts.size, dtype=bool)
            self.detection_refl = np.zeros(ts.size, dtype=bool)
            return
        idx = np.searchsorted(gate_lo, ts, side="right") - 1
        idx_c = np.clip(idx, 0, len(pulses) - 1)
        inside = (idx >= 0) & (ts <= gate_hi[idx_c])
        mapped = (det <= port_of.size - 1) & (det >= 0)
        port = np.where(mapped, port_of[np.clip(det, 0, port_of.size - 1)],
                        -1)
        self.pulse = np.where(inside, idx_c, -1)
        self.reflected = inside & (port >= 0) & (port == refl_port[idx_c])
        self.detection_refl = self.reflected & is_detection[idx_c]

    def cycle_bounds(self, n_cycles: int) -> np.ndarray:
        return np.searchsorted(self.cycle, np.arange(n_cycles + 1))


def detect_atoms(stream: ClickStream, chain: PulseChain,
                 roles: DetectorRoles,
                 criterion: HeraldCriterion | None = None,
                 ) -> list[AtomEvent]:
    """Herald atoms sequence by sequence.

    A sequence qualifies when (a) at least ``min_reflected`` reflected
    detection clicks of the cycle fall into some ``window_ns`` stretch
    touching the sequence, (b) the control gate itself holds at least
    ``min_control_reflected`` reflected clicks, and (c) each designated
    confirm pulse carries a reflected click, certifying the atom survived
    past the target.  Target-pulse clicks never contribute to the herald.
    """
    crit = criterion if criterion is not None else HeraldCriterion()
    if len(stream) == 0 or chain.n_pulses == 0 or not chain.sequences:
        return []
    gated = _GatedStream(stream, chain, roles)
    n_cycles = int(stream.cycle_ids.max()) + 1
    n_seq = len(chain.sequences)
    bounds = gated.cycle_bounds(n_cycles)
    window_ps = int(round(crit.window_ns * 1000))

    # candidate pre-pass: (cycle, sequence) keys holding a reflected click
    # in every designated confirm gate
    seq_of_pulse = np.full(chain.n_pulses, -1, dtype=int)
    which_confirm = np.full(chain.n_pulses, -1, dtype=int)
    for s in chain.sequences:
        for which, pi in enumerate(s.confirms[:crit.confirm_pulses]):
            seq_of_pulse[pi] = s.index
            which_confirm[pi] = which
    if crit.confirm_pulses == 0:
        candidates = np.arange(n_cycles * n_seq, dtype=np.int64)
    else:
        pulse_c = np.clip(gated.pulse, 0, chain.n_pulses - 1)
        conf = gated.reflected & (gated.pulse >= 0) & (
            which_confirm[pulse_c] >= 0)
        keys = gated.cycle[conf] * n_seq + seq_of_pulse[pulse_c[conf]]
        which = which_confirm[pulse_c[conf]]
        candidates = np.unique(keys[which == 0])
        for w in range(1, crit.confirm_pulses):
            candidates = np.intersect1d(
                candidates, np.unique(keys[which == w]),
                assume_unique=True)

    events: list[AtomEvent] = []
    for key in candidates:
        c = int(key // n_seq)
        s = chain.sequences[int(key % n_seq)]
        lo, hi = bounds[c], bounds[c + 1]
        if hi <= lo:
            continue
        pulse = gated.pulse[lo:hi]
        ts = gated.ts[lo:hi]
        det = gated.det[lo:hi]
        refl = gated.reflected[lo:hi]
        det_refl_t = ts[gated.detection_refl[lo:hi]]
        # sliding presence window over reflected detection clicks
        span_lo = int(round(s.start * 1000)) - window_ps
        span_hi = int(round(s.end * 1000)) + window_ps
        near = det_refl_t[(det_refl_t >= span_lo)
                          & (det_refl_t <= span_hi)]
        if near.size < crit.min_reflected:
            continue
        k = crit.min_reflected
        spans = near[k - 1:] - near[:near.size - k + 1]
        hits = np.nonzero(spans <= window_ps)[0]
        if hits.size == 0:
            continue
        herald_t = int(near[hits[0] + k - 1])
        ctl_m = pulse == s.control
        tgt_m = pulse == s.target
        if crit.min_control_reflected > 0:
            n_ctl_refl = int(np.count_nonzero(refl[ctl_m]))
            if n_ctl_refl < crit.min_control_reflected:
                continue
        t_gate = chain.pulses[s.target].click_gate
        events.append(AtomEvent(
            cycle_id=c, sequence_index=s.index, kind=s.kind,
            control_direction=s.control_direction,
            herald_time_ps=herald_t,
            control_clicks=tuple(
                GateClick(t, d, r) for t, d, r in
                zip(ts[ctl_m], det[ctl_m], refl[ctl_m])),
            target_clicks=tuple(
                GateClick(t, d, r) for t, d, r in
                zip(ts[tgt_m], det[tgt_m], refl[tgt_m])),
            target_gate_ps=(round(t_gate[0] * 1000),
                            round(t_gate[1] * 1000))))
    events.sort(key=lambda e: (e.cycle_id, e.sequence_index))
    return events


def false_event_rate(events: Sequence[AtomEvent], n_cycles: int,
                     n_sequences: int) -> float:
    """Heralded events per sequence slot; with transits disabled this is
    the false-detection rate of the criterion."""
    slots = n_cycles * n_sequences
    return len(events) / slots if slots else 0.0


# --- target-window counting ---------------------------------------------------------


@dataclass(frozen=True)
class TargetWindowCounts:
    """First-click counts in the target gate, by port role, plus what the
    afterpulse subtraction needs: per-detector control-click tallies and
    the delay window from each control click to the event's target gate
    (rows of detector id, delay low, delay high, in ns)."""

    n_events: int
    first_reflected: np.ndarray  # per detector id (dense up to max id)
    first_transmitted: np.ndarray
    control_clicks: np.ndarray
    control_exposures: np.ndarray | None = None
    afterpulse_subtracted: bool = False
    clamped: bool = False

    @property
    def n_first_reflected(self) -> float:
        return float(self.first_reflected.sum())

    @property
    def n_first_transmitted(self) -> float:
        return float(self.first_transmitted.sum())


def count_target_window(events: Sequence[AtomEvent]) -> TargetWindowCounts:
    """First target-gate click of each event, split by port role."""
    top = 0
    for e in events:
        for c in e.control_clicks + e.target_clicks:
            top = max(top, c.detector_id)
    first_r = np.zeros(top + 1)
    first_t = np.zeros(top + 1)
    ctl = np.zeros(top + 1)
    exposures: list[tuple[int, float, float]] = []
    for e in events:
        lo_ps, hi_ps = e.target_gate_ps
        for c in e.control_clicks:
            ctl[c.detector_id] += 1
            exposures.append((c.detector_id,
                              (lo_ps - c.timestamp_ps) * 1e-3,
                              (hi_ps - c.timestamp_ps) * 1e-3))
        if e.target_clicks:
            first = min(e.target_clicks, key=lambda c: c.timestamp_ps)
            if first.is_reflected:
                first_r[first.detector_id] += 1
            else:
                first_t[first.detector_id] += 1
    return TargetWindowCounts(
        n_events=len(events), first_reflected=first_r,
        first_transmitted=first_t, control_clicks=ctl,
        control_exposures=np.array(exposures).reshape(-1, 3))


@dataclass(frozen=True)
class AfterpulseCalibration:
    """Per-detector afterpulse window probability measured on a stream of
    isolated pulses, plus the background-corrected delay histogram behind
    it.  ``background_per_ns`` is the flat accidental-click rate (darks,
    bursts) estimated from a window before each primary and already
    removed from both the window probability and the histogram."""

    window_prob: np.ndarray  # per detector id
    n_primaries: np.ndarray
    gate_ns: tuple[float, float]
    delay_bins_ns: np.ndarray
    delay_counts: np.ndarray  # (n_detectors_dense, n_bins)
    background_per_ns: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.background_per_ns is None:
            object.__setattr__(self, "background_per_ns",
                               np.zeros_like(self.window_prob))

    def port_probability(self, roles: DetectorRoles, port: Port) -> float:
        dets = [d for d in roles.detectors_of(port)
                if d < self.window_prob.size]
        hits = sum(self.window_prob[d] * self.n_primaries[d] for d in dets)
        prim = sum(self.n_primaries[d] for d in dets)
        return float(hits / prim) if prim else 0.0

    def expected_in(self, detector: int, lo_ns: float,
                    hi_ns: float) -> float:
        """Expected extra clicks per primary on this detector within
        ``(lo_ns, hi_ns)`` after it, integrated from the measured delay
        histogram (partial bins count fractionally)."""
        if detector >= self.delay_counts.shape[0]:
            return 0.0
        prim = float(self.n_primaries[detector])
        if prim <= 0.0:
            return 0.0
        edges = self.delay_bins_ns
        lo = np.clip(np.minimum(lo_ns, hi_ns), edges[0], edges[-1])
        hi = np.clip(np.maximum(lo_ns, hi_ns), edges[0], edges[-1])
        widths = np.diff(edges)
        overlap = (np.minimum(edges[1:], hi)
                   - np.maximum(edges[:-1], lo)).clip(min=0.0)
        frac = np.divide(overlap, widths, out=np.zeros_like(widths),
                         where=widths > 0)
        return float(np.dot(self.delay_counts[detector], frac) / prim)


def afterpulse_calibrate(stream: ClickStream, chain: PulseChain,
                         roles: DetectorRoles,
                         gate_ns: tuple[float, float] = (140.0, 240.0),
                         histogram_span_ns: float = 400.0,
                         histogram_bin_ns: float = 10.0,
                         ) -> AfterpulseCalibration:
    """Measure the afterpulse probability per detector.

    For every click inside a pulse gate (a primary), count same-detector
    clicks delayed by ``gate_ns`` after it.  The pulses of the calibration
    chain must be spaced further apart than the histogram span, so the
    extras can only be afterpulses or accidentals.  The accidental floor
    (darks, background bursts) is estimated from a window before each
    primary, where afterpulses cannot fall, and subtracted from both the
    window probability and the delay histogram.
    """
    lo_ps = int(round(gate_ns[0] * 1000))
    hi_ps = int(round(gate_ns[1] * 1000))
    # pre-primary window for the accidental floor; ends 50 ns before the
    # primary so the leading edge of its own pulse cannot enter
    bg_lo_ps, bg_hi_ps = -150_000, -50_000
    bg_width_ns = (bg_hi_ps - bg_lo_ps) * 1e-3
    gated = _GatedStream(stream, chain, roles)
    top = max((int(d) for d in np.unique(stream.detector_ids)), default=0)
    top = max(top, roles.port_lookup().size - 1)
    window_prob = np.zeros(top + 1)
    n_primaries = np.zeros(top + 1)
    bins = np.arange(0.0, histogram_span_ns + histogram_bin_ns,
                     histogram_bin_ns)
    counts = np.zeros((top + 1, bins.size - 1))
    background = np.zeros(top + 1)

    if len(stream):
        n_cycles = int(stream.cycle_ids.max()) + 1
        bounds = gated.cycle_bounds(n_cycles)
        hits = np.zeros(top + 1)
        bg_hits = np.zeros(top + 1)
        for c in range(n_cycles):
            s, e = bounds[c], bounds[c + 1]
            ts = gated.ts[s:e]
            det = gated.det[s:e]
            primary = gated.pulse[s:e] >= 0
            for d in np.unique(det):
                on_d = det == d
                t_d = ts[on_d]
                t_p = ts[on_d & primary]
                if t_p.size == 0:
                    continue
                n_primaries[d] += t_p.size
                lo_i = np.searchsorted(t_d, t_p + lo_ps, side="left")
                hi_i = np.searchsorted(t_d, t_p + hi_ps, side="right")
                hits[d] += float((hi_i - lo_i).sum())
                lo_i = np.searchsorted(t_d, t_p + bg_lo_ps, side="left")
                hi_i = np.searchsorted(t_d, t_p + bg_hi_ps, side="right")
                bg_hits[d] += float((hi_i - lo_i).sum())
                delays = (t_d[None, :] - t_p[:, None]).ravel() * 1e-3
                delays = delays[(delays > 0)
                                & (delays <= histogram_span_ns)]
                if delays.size:
                    counts[d] += np.histogram(delays, bins=bins)[0]
        nz = n_primaries > 0
        background[nz] = bg_hits[nz] / (bg_width_ns * n_primaries[nz])
        flat = background * (gate_ns[1] - gate_ns[0])
        window_prob[nz] = (hits[nz] / n_primaries[nz] - flat[nz]).clip(0.0)
        counts -= (background * histogram_bin_ns
                   * n_primaries)[:, None]
        np.clip(counts, 0.0, None, out=counts)
    return AfterpulseCalibration(
        window_prob=window_prob, n_primaries=n_primaries,
        gate_ns=gate_ns, delay_bins_ns=bins, delay_counts=counts,
        background_per_ns=background)


def subtract_afterpulses(counts: TargetWindowCounts,
                         calibration: AfterpulseCalibration,
                         roles: DetectorRoles,
                         target_reflected_port: Port = Port.LEFT,
                         ) -> TargetWindowCounts:
    """Remove the expected afterpulse contamination from the target-gate
    counts.

    Every control click exposes its detector to afterpulsing inside the
    target gate over a known delay range; the expected count integrates
    the calibration delay histogram over that range and is charged to
    the role the detector plays in the target gate.  Without exposure
    records the reference-window probability times the control clicks is
    used instead.  Negative results clamp to zero and set the
    ``clamped`` flag.  Already subtracted counts pass through unchanged.
    """
    if counts.afterpulse_subtracted:
        return counts
    size = counts.first_reflected.size
    expected = np.zeros(size)
    if counts.control_exposures is not None:
        for det, lo_ns, hi_ns in counts.control_exposures:
            d = int(det)
            if d < size:
                expected[d] += calibration.expected_in(d, lo_ns, hi_ns)
    else:
        n = min(size, calibration.window_prob.size)
        expected[:n] = calibration.window_prob[:n]
        expected *= counts.control_clicks
    lookup = roles.port_lookup()
    role_r = np.zeros(size, dtype=bool)
    m = min(size, lookup.size)
    role_r[:m] = lookup[:m] == int(target_reflected_port)
    new_r = counts.first_reflected - np.where(role_r, expected, 0.0)
    new_t = counts.first_transmitted - np.where(role_r, 0.0, expected)
    clamped = bool((new_r < -1e-12).any() or (new_t < -1e-12).any())
    return replace(counts,
                   first_reflected=np.maximum(new_r, 0.0),
                   first_transmitted=np.maximum(new_t, 0.0),
                   afterpulse_subtracted=True,
                   clamped=clamped or counts.clamped)


# --- heralded switching statistics ---------------------------------------------------


@dataclass(frozen=True)
class HeraldedStats:
    """Switching statistics over one class of heralded events."""

    n_events: int
    n_first_reflected: float
    n_first_transmitted: float
    normalized_reflection: float
    normalized_reflection_se: float
    normalized_transmission: float
    normalized_transmission_se: float
    absolute_reflection: float
    absolute_reflection_se: float
    absolute_transmission: float
    absolute_transmission_se: float
    target_mean_photons: float
    path_transmission: float
    afterpulse_subtracted: bool
    clamped: bool


def heralded_switch_stats(events: Sequence[AtomEvent],
                          target_mean_photons: float,
                          path_transmission: float,
                          calibration: AfterpulseCalibration | None = None,
                          roles: DetectorRoles | None = None,
                          require_control_click: bool = True,
                          ) -> HeraldedStats:
    """First-photon switching statistics for the given events.

    Normalized values condition on a target-gate click and split it by
    port; absolute values divide the per-event click yield by the photon
    budget of the target pulse and the detection path transmission.
    Passing a calibration (which needs the detector roles too) removes
    the expected afterpulse counts first.

    By default only events with a reflected click in the control gate
    itself enter the statistics: that click is what certifies the atom
    state the control prepared.  Events heralded purely by the confirm
    pulses often hold an atom that arrived after the control, so keeping
    them (``require_control_click=False``) mixes unprepared atoms in.
    """
    if not 0 < path_transmission <= 1:
        raise InvalidParameterError("path_transmission must be in (0, 1]")
    if not target_mean_photons > 0:
        raise InvalidParameterError("target_mean_photons must be > 0")
    if require_control_click:
        events = [e for e in events if e.control_reflected >= 1]
    counts = count_target_window(events)
    if calibration is not None:
        if roles is None:
            raise ConfigError(
                "afterpulse subtraction needs the detector roles")
        counts = subtract_afterpulses(counts, calibration, roles)
    n_r = counts.n_first_reflected
    n_t = counts.n_first_transmitted
    n_clicked = n_r + n_t
    n_events = counts.n_events

    if n_clicked > 0:
        p = n_r / n_clicked
        se = math.sqrt(max(p * (1.0 - p), 1.0 / n_clicked) / n_clicked)
        norm_r, norm_r_se = p, se
    else:
        norm_r, norm_r_se = float("nan"), float("nan")

    scale = target_mean_photons * path_transmission

    def absolute(k: float) -> tuple[float, float]:
        if n_events == 0:
            return float("nan"), float("nan")
        q = k / n_events
        se_q = math.sqrt(max(q * (1.0 - q), 1.0 / n_events) / n_events)
        return q / scale, se_q / scale

    abs_r, abs_r_se = absolute(n_r)
    abs_t, abs_t_se = absolute(n_t)
    return HeraldedStats(
        n_events=n_events,
        n_first_reflected=n_r,
        n_first_transmitted=n_t,
        normalized_reflection=norm_r,
        normalized_reflection_se=norm_r_se,
        normalized_transmission=(1.0 - norm_r) if n_clicked else float("nan"),
        normalized_transmission_se=norm_r_se,
        absolute_reflection=abs_r,
        absolute_reflection_se=abs_r_se,
        absolute_transmission=abs_t,
        absolute_transmission_se=abs_t_se,
        target_mean_photons=target_mean_photons,
        path_transmission=path_transmission,
        afterpulse_subtracted=calibration is not None,
        clamped=counts.clamped)


def events_of_kind(events: Iterable[AtomEvent],
                   kind: SequenceKind) -> list[AtomEvent]:
    return [e for e in events if e.kind is kind]


# --- second photon and antibunching --------------------------------------------------


@dataclass(frozen=True)
class SecondPhotonStats:
    """How often a second control-gate click repeats the reflection."""

    n_pairs: int
    n_second_reflected: int
    probability: float
    probability_se: float


def second_photon_stats(events: Sequence[AtomEvent]) -> SecondPhotonStats:
    """Port statistics of the click following a reflected control click.

    Over events whose earliest control-gate click is reflected and which
    hold at least one more click there, returns the fraction of those
    second clicks that are reflected too.  A single photon flips the atom
    out of the reflecting state, so a low value certifies that one
    reflected photon means one switched atom.
    """
    n_pairs = 0
    n_second = 0
    for e in events:
        if len(e.control_clicks) < 2:
            continue
        first, second = sorted(e.control_clicks,
                               key=lambda c: c.timestamp_ps)[:2]
        if not first.is_reflected:
            continue
        n_pairs += 1
        n_second += int(second.is_reflected)
    if n_pairs == 0:
        return SecondPhotonStats(0, 0, float("nan"), float("nan"))
    p = n_second / n_pairs
    se = math.sqrt(max(p * (1.0 - p), 1.0 / n_pairs) / n_pairs)
    return SecondPhotonStats(
        n_pairs=n_pairs, n_second_reflected=n_second,
        probability=p, probability_se=se)


@dataclass(frozen=True)
class AntibunchingResult:
    """Pairwise coincidences of reflected control clicks versus event
    offset.  ``coincidences[dn]`` sums over the detector pairs."""

    offsets: np.ndarray
    coincidences: np.ndarray
    n_events: int
    detectors: tuple[int, ...]

    @property
    def suppression(self) -> float:
        """Off-peak mean over the same-event coincidence rate."""
        c0 = float(self.coincidences[0])
        off = float(np.mean(self.coincidences[1:]))
        if c0 <= 0.0:
            return math.inf
        return off / c0

    @property
    def zero_offset_pull(self) -> float:
        """How many off-peak standard deviations the zero-offset count
        sits below the off-peak mean.  Near zero for a flat histogram,
        large and positive for an antibunching dip."""
        off = self.coincidences[1:]
        mean = float(np.mean(off))
        sd = float(np.std(off))
        if sd == 0.0:
            return 0.0 if float(self.coincidences[0]) == mean else math.inf
        return (mean - float(self.coincidences[0])) / sd


def antibunching(events: Sequence[AtomEvent], roles: DetectorRoles,
                 max_offset: int = 20,
                 rng=None) -> AntibunchingResult:
    """Same-port pair coincidences of reflected control clicks.

    Uses the events whose control pulse reflects into a port with at
    least three mapped detectors, which the layout must provide.  Every
    such event contributes one row, clicks or not; dropping the empty
    rows would re-pair the offset sums and fake a dip even for
    uncorrelated input.  A single reflected photon cannot fire two
    detectors at once, so the true record dips at zero offset.  With
    ``rng`` given, each detector's per-event record is permuted
    independently first, which erases the same-event structure: the
    result must then be flat.
    """
    port = None
    for candidate in (Port.LEFT, Port.RIGHT):
        if len(roles.detectors_of(candidate)) >= 3:
            port = candidate
            break
    if port is None:
        raise ConfigError(
            "antibunching needs a port with >= 3 mapped detectors")
    dets = roles.detectors_of(port)[:3]
    use = [e for e in events
           if e.control_direction.reflected_port is port]
    n = len(use)
    offsets = np.arange(max_offset + 1)
    flags = np.zeros((n, 3), dtype=bool)
    for i, e in enumerate(use):
        for c in e.control_clicks:
            if c.is_reflected and c.detector_id in dets:
                flags[i, dets.index(c.detector_id)] = True
    if rng is not None and n:
        rng = np.random.default_rng(rng) if not isinstance(
            rng, np.random.Generator) else rng
        for j in range(3):
            flags[:, j] = flags[rng.permutation(n), j]
    co = np.zeros(max_offset + 1)
    pairs = ((0, 1), (1, 2), (0, 2))
    for dn in offsets:
        hiN = n - dn
        if hiN <= 0:
            continue
        a = flags[:hiN]
        b = flags[dn:]
        co[dn] = sum(float(np.sum(a[:, i] & b[:, j])) for i, j in pairs)
    return AntibunchingResult(offsets=offsets, coincidences=co,
                              n_events=n, detectors=dets)


# --- photons per switching event -----------------------------------------------------


@dataclass(frozen=True)
class PhotonsPerSwitch:
    """Photon cost of one toggle, under three accountings."""

    normalized: float
    absolute: float
    corrected: float
    loss_after_toggle_fraction: float


def photons_per_switch(stats: HeraldedStats,
                       loss_after_toggle_fraction: float,
                       ) -> PhotonsPerSwitch:
    """Invert reflection probabilities into photons per switching event.

    The normalized count charges only detected photons; the absolute
    count charges every photon sent.  The corrected figure discounts the
    photons lost after the toggle already happened, which cost nothing:
    it interpolates the absolute count toward the normalized one by the
    given post-toggle loss fraction.
    """
    if not 0.0 <= loss_after_toggle_fraction <= 1.0:
        raise InvalidParameterError(
            "loss_after_toggle_fraction must be in [0, 1]")
    if not stats.normalized_reflection > 0:
        raise InvalidParameterError("normalized reflection must be > 0")
    if not stats.absolute_reflection > 0:
        raise InvalidParameterError("absolute reflection must be > 0")
    normalized = 1.0 / stats.normalized_reflection
    absolute = 1.0 / stats.absolute_reflection
    corrected = absolute - loss_after_toggle_fraction * (
        absolute - normalized)
    return PhotonsPerSwitch(
        normalized=normalized, absolute=absolute, corrected=corrected,
        loss_after_toggle_fraction=loss_after_toggle_fraction)


# --- serialization -------------------------------------------------------------------

EVENTS_CSV_HEADER = ("cycle_id", "herald_time_ps", "sequence_kind",
                     "control_dir")
CORRELATION_CSV_HEADER = ("dn", "coincidences")


def write_events_csv(events: Sequence[AtomEvent], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENTS_CSV_HEADER)
        for e in events:
            writer.writerow([e.cycle_id, e.herald_time_ps, e.kind.value,
                             e.control_direction.name])


def write_correlation_csv(result: AntibunchingResult,
                          path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CORRELATION_CSV_HEADER)
        for dn, c in zip(result.offsets, result.coincidences):
            writer.writerow([int(dn), int(c)])


def format_stats_report(stats_by_kind: dict[SequenceKind, HeraldedStats],
                        second: SecondPhotonStats | None = None,
                        correlation: AntibunchingResult | None = None,
                        cost: PhotonsPerSwitch | None = None) -> str:
    """Flat text summary of a full analysis pass."""
    lines: list[str] = []
    for kind in (SequenceKind.A, SequenceKind.B):
        if kind not in stats_by_kind:
            continue
        s = stats_by_kind[kind]
        lines.append(f"sequence kind {kind.value}: {s.n_events} events, "
                     f"{s.n_first_reflected:.1f} reflected / "
                     f"{s.n_first_transmitted:.1f} transmitted first clicks")
        lines.append(
            f"  normalized reflection  {s.normalized_reflection:.4f} "
            f"+- {s.normalized_reflection_se:.4f}")
        lines.append(
            f"  absolute reflection    {s.absolute_reflection:.4f} "
            f"+- {s.absolute_reflection_se:.4f}")
        lines.append(
            f"  absolute transmission  {s.absolute_transmission:.4f} "
            f"+- {s.absolute_transmission_se:.4f}")
        if s.clamped:
            lines.append("  warning: afterpulse subtraction clamped at 0")
    if second is not None and second.n_pairs:
        lines.append(
            f"second click reflected: {second.probability:.4f} "
            f"+- {second.probability_se:.4f} "
            f"({second.n_second_reflected}/{second.n_pairs} pairs)")
    if correlation is not None:
        lines.append(
            f"antibunching: C(0)={correlation.coincidences[0]:.0f}, "
            f"off-peak mean={np.mean(correlation.coincidences[1:]):.1f}, "
            f"suppression={correlation.suppression:.1f}")
    if cost is not None:
        lines.append(
            f"photons per switch: normalized {cost.normalized:.3f}, "
            f"absolute {cost.absolute:.3f}, corrected {cost.corrected:.3f}")
    return "\n".join(lines) + "\n"
