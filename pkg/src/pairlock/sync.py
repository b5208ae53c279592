"""Clock recovery between two independently time-tagged stations.

The receiver's stream is aligned to the local one in three steps:

1. GPS markers, when both streams carry them, are paired by integer
   second and their median local-time difference gives a coarse offset
   good to the marker jitter (tens of ns). Without markers the search
   falls back to a wide blind window.
2. A two-stage cross-correlation of detection times (coarse bins over the
   search span, then fine bins around the coarse peak) finds the true
   offset. The peak is refined to a sub-bin centroid. Lock is declared
   when both stages clear the significance threshold.
3. Once locked, the offset is re-measured every block and a least-squares
   line through recent block estimates tracks relative clock drift. After
   a run of failed blocks the engine drops back to searching and
   periodically retries a full acquisition.

Significance is the peak bin count over the expected accidental count per
bin, with the expectation floored at one count so the ratio stays
meaningful for sparse histograms. Coincidences are extracted from locked
blocks only, by a one-to-one greedy pairing in order of residual.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum, auto
from pathlib import Path

import numpy as np

from .timetags import (TICK_SECONDS, ChannelCode, Station, TagStream,
                       seconds_to_ticks, ticks_to_seconds)


class SyncError(Exception):
    pass


class NoMarkersError(SyncError):
    """GPS alignment was requested but markers are missing."""


class EmptyBlockError(SyncError):
    """A correlation was attempted on a block without detector tags."""


class NoLockError(SyncError):
    """No correlation peak cleared the significance threshold."""


class LockMode(Enum):
    SEARCHING = auto()
    LOCKED = auto()


@dataclass(frozen=True)
class CorrelatorConfig:
    """Tunables of the correlator and lock logic.

    coincidence_window is the half-width tau of the pairing window, i.e.
    events match when |aligned difference| <= tau.
    """

    coincidence_window: float = 7e-9
    fine_bin: float = 1e-9
    coarse_bin: float = 100e-9
    gps_search_span: float = 1e-3
    blind_search_span: float = 20e-3
    lock_threshold: float = 5.0
    block_span: float = 1.0
    acquisition_span: float = 10.0
    drift_window: int = 20
    drop_lock_after: int = 3
    reacquire_interval: int = 5

    def __post_init__(self) -> None:
        if not 0 < self.fine_bin <= self.coincidence_window:
            raise ValueError("need 0 < fine_bin <= coincidence_window")
        if not self.coincidence_window <= self.coarse_bin:
            raise ValueError("coincidence_window must not exceed coarse_bin")
        if not self.coarse_bin <= min(self.gps_search_span, self.blind_search_span):
            raise ValueError("search spans must be at least one coarse bin")
        if self.lock_threshold <= 1.0:
            raise ValueError("lock_threshold must exceed 1")
        if self.block_span <= 0 or self.acquisition_span < self.block_span:
            raise ValueError("acquisition_span must cover at least one block")
        if self.drift_window < 2 or self.drop_lock_after < 1 or self.reacquire_interval < 1:
            raise ValueError("window and retry counts must be positive")


@dataclass(frozen=True)
class OffsetEstimate:
    """Receiver-minus-local clock offset, valid at an instant.

    offset: seconds to subtract from receiver timestamps.
    drift_rate: d(offset)/dt in s/s.
    significance: correlation peak over expected accidentals per bin.
    valid_from: local-clock time (s) the estimate refers to.
    """

    offset: float
    drift_rate: float
    significance: float
    valid_from: float

    def predict(self, t: float) -> float:
        return self.offset + self.drift_rate * (t - self.valid_from)


@dataclass(frozen=True)
class BlockStatus:
    """Outcome of one tracking block."""

    t_start: float
    t_end: float
    locked: bool
    offset: float
    drift_rate: float
    significance: float
    predicted: float

    @property
    def span(self) -> float:
        return self.t_end - self.t_start


@dataclass
class LockState:
    mode: LockMode = LockMode.SEARCHING
    current: OffsetEstimate | None = None
    locked_seconds_total: float = 0.0
    history: list[tuple[float, OffsetEstimate]] = field(default_factory=list)
    blocks: list[BlockStatus] = field(default_factory=list)


@dataclass(frozen=True)
class CorrelationResult:
    """Histogram of pair time differences plus its peak summary."""

    histogram: np.ndarray
    center: float
    span: float
    bin_width: float
    n_alice: int
    n_bob: int
    expected_per_bin: float
    peak_index: int
    peak_count: int
    peak_offset: float
    significance: float

    def bin_offsets(self) -> np.ndarray:
        n = len(self.histogram)
        return self.center - self.span + (np.arange(n) + 0.5) * self.bin_width


_MAX_BINS = 20_000_000
_MAX_CHUNK_PAIRS = 4_000_000


def pair_difference_histogram(a_times: np.ndarray, b_times: np.ndarray,
                              center: float, span: float, bin_width: float) -> np.ndarray:
    """Histogram of all pairwise differences (b - a - center) over [-span, span).

    Equals the direct all-pairs histogram bin for bin: a pair contributes
    to bin floor((d + span) / bin_width) when that index is in range. The
    inner arithmetic matches the obvious nested-loop reference operation
    for operation, so results agree exactly, not just to rounding.
    """
    n_bins = int(round(2.0 * span / bin_width))
    if n_bins < 1 or n_bins > _MAX_BINS:
        raise ValueError(f"requested {n_bins} bins, supported range is 1..{_MAX_BINS}")
    hist = np.zeros(n_bins, dtype=np.int64)
    # Prefilter one bin wider than the span so that float rounding at the
    # edges can never hide a pair the bin filter below would accept.
    lo = np.searchsorted(b_times, a_times + (center - span - bin_width))
    hi = np.searchsorted(b_times, a_times + (center + span + bin_width))
    counts = hi - lo
    cum = np.concatenate(([0], np.cumsum(counts)))
    i = 0
    while i < len(a_times):
        j = int(np.searchsorted(cum, cum[i] + _MAX_CHUNK_PAIRS, side="right")) - 1
        j = max(j, i + 1)
        n_pairs = int(cum[j] - cum[i])
        if n_pairs:
            c = counts[i:j]
            group_starts = (cum[i:j] - cum[i]).astype(np.int64)
            idx_b = np.arange(n_pairs, dtype=np.int64) - np.repeat(group_starts, c) \
                + np.repeat(lo[i:j], c)
            d = (b_times[idx_b] - np.repeat(a_times[i:j], c)) - center
            k = np.floor((d + span) / bin_width).astype(np.int64)
            valid = (k >= 0) & (k < n_bins)
            hist += np.bincount(k[valid], minlength=n_bins)
        i = j
    return hist


def cross_correlate(a_times: np.ndarray, b_times: np.ndarray, center: float,
                    span: float, bin_width: float, *,
                    expected_per_bin: float | None = None) -> CorrelationResult:
    """Correlate two sorted detection-time arrays around a trial offset.

    GPS markers must already be excluded. When expected_per_bin is not
    given it is estimated as n_a * n_b * bin / T_overlap from the spans of
    the inputs; callers correlating a pre-windowed slice should pass a
    rate-based value instead.
    """
    if len(a_times) == 0 or len(b_times) == 0:
        raise EmptyBlockError("cannot correlate an empty block")
    hist = pair_difference_histogram(a_times, b_times, center, span, bin_width)
    if expected_per_bin is None:
        t_overlap = min(a_times[-1], b_times[-1] - center) \
            - max(a_times[0], b_times[0] - center)
        t_overlap = max(float(t_overlap), bin_width)
        expected_per_bin = len(a_times) * len(b_times) * bin_width / t_overlap
    peak_index = int(np.argmax(hist))
    peak_count = int(hist[peak_index])
    peak_offset = center - span + (peak_index + 0.5) * bin_width
    significance = peak_count / max(expected_per_bin, 1.0)
    return CorrelationResult(hist, center, span, bin_width, len(a_times), len(b_times),
                             float(expected_per_bin), peak_index, peak_count,
                             float(peak_offset), float(significance))


def _match_markers(markers_a: np.ndarray, markers_b: np.ndarray):
    """Pair GPS markers of two streams by their integer second."""
    key_a = np.rint(markers_a).astype(np.int64)
    key_b = np.rint(markers_b).astype(np.int64)
    _, idx_a, idx_b = np.intersect1d(key_a, key_b, return_indices=True)
    return markers_a[idx_a], markers_b[idx_b]


def coarse_align_markers(alice: TagStream, bob: TagStream) -> float:
    """Median receiver-minus-local difference of matching GPS markers."""
    ma = alice.marker_seconds()
    mb = bob.marker_seconds()
    if len(ma) == 0 or len(mb) == 0:
        raise NoMarkersError("both streams need GPS markers for coarse alignment")
    pa, pb = _match_markers(ma, mb)
    if len(pa) == 0:
        raise NoMarkersError("no GPS markers share an integer second")
    return float(np.median(pb - pa))


def _centroid(corr: CorrelationResult, half_width_bins: int = 3) -> float:
    """Sub-bin peak position from a local weighted mean."""
    lo = max(0, corr.peak_index - half_width_bins)
    hi = min(len(corr.histogram), corr.peak_index + half_width_bins + 1)
    weights = corr.histogram[lo:hi].astype(np.float64)
    total = weights.sum()
    if total <= 0:
        return corr.peak_offset
    centers = corr.center - corr.span + (np.arange(lo, hi) + 0.5) * corr.bin_width
    return float((weights * centers).sum() / total)


class _Engine:
    """Block-serial lock engine shared by the offline and streaming paths.

    Receiver data is appended in time order; advance() processes every
    block whose data window is fully available, so results depend only on
    the data, not on how it was chunked on arrival.
    """

    def __init__(self, alice: TagStream, cfg: CorrelatorConfig):
        if len(alice) == 0:
            raise EmptyBlockError("local stream is empty")
        self.cfg = cfg
        self.a_det = alice.detector_seconds()
        self.a_mark = alice.marker_seconds()
        self.t_origin = ticks_to_seconds(int(alice.ticks[0]))
        self.t_end = ticks_to_seconds(int(alice.ticks[-1]))
        self.state = LockState()
        self._b_tick_chunks: list[np.ndarray] = []
        self._b_chan_chunks: list[np.ndarray] = []
        self._b_det: np.ndarray = np.empty(0)
        self._b_mark: np.ndarray = np.empty(0)
        self._b_dirty = False
        self._b_available = -math.inf
        self._b_finished = False
        self._next_block = 0
        self._fails = 0
        self._last_attempt: int | None = None
        span_total = self.t_end - self.t_origin
        n_full = int(span_total // cfg.block_span)
        trailing = span_total - n_full * cfg.block_span
        if n_full == 0:
            self._n_blocks = 1
        elif trailing >= max(0.05 * cfg.block_span, 2.0 * cfg.coincidence_window):
            self._n_blocks = n_full + 1
        else:
            self._n_blocks = n_full

    def seed_state(self, state: LockState) -> None:
        self.state = state

    def feed_bob(self, ticks: np.ndarray, channels: np.ndarray) -> None:
        if len(ticks) == 0:
            return
        if self._b_finished:
            raise ValueError("receiver stream already finished")
        if self._b_tick_chunks and ticks[0] < self._b_tick_chunks[-1][-1]:
            raise ValueError("receiver chunks must arrive in time order")
        self._b_tick_chunks.append(np.asarray(ticks, dtype=np.int64))
        self._b_chan_chunks.append(np.asarray(channels, dtype=np.uint8))
        self._b_available = ticks_to_seconds(int(ticks[-1]))
        self._b_dirty = True

    def finish_bob(self) -> None:
        self._b_finished = True

    def bob_stream(self, epoch_label: str = "") -> TagStream:
        ticks = (np.concatenate(self._b_tick_chunks)
                 if self._b_tick_chunks else np.empty(0, dtype=np.int64))
        chans = (np.concatenate(self._b_chan_chunks)
                 if self._b_chan_chunks else np.empty(0, dtype=np.uint8))
        return TagStream(Station.BOB, ticks, chans, epoch_label)

    def _bob_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if self._b_dirty:
            ticks = np.concatenate(self._b_tick_chunks)
            chans = np.concatenate(self._b_chan_chunks)
            seconds = ticks_to_seconds(ticks)
            marker = chans == int(ChannelCode.GPS_MARKER)
            self._b_det = seconds[~marker]
            self._b_mark = seconds[marker]
            self._b_dirty = False
        return self._b_det, self._b_mark

    def _block_bounds(self, i: int) -> tuple[float, float]:
        start = self.t_origin + i * self.cfg.block_span
        if i == self._n_blocks - 1:
            return start, self.t_end + 1e-9
        return start, start + self.cfg.block_span

    def _data_ready(self, i: int, t_start: float, t_end: float) -> bool:
        if self._b_finished:
            return True
        cfg = self.cfg
        if self.state.current is None or self.state.mode is LockMode.SEARCHING:
            need = min(max(t_end, t_start + cfg.acquisition_span), self.t_end) \
                + cfg.blind_search_span + 1.5
        else:
            need = t_end + abs(self.state.current.offset) + 1.5
        return self._b_available >= need

    def advance(self) -> list[BlockStatus]:
        """Process all blocks whose receiver data is available."""
        done: list[BlockStatus] = []
        while self._next_block < self._n_blocks:
            t_start, t_end = self._block_bounds(self._next_block)
            if not self._data_ready(self._next_block, t_start, t_end):
                break
            done.append(self._process_block(self._next_block, t_start, t_end))
            self._next_block += 1
        return done

    @property
    def finished(self) -> bool:
        return self._next_block >= self._n_blocks

    def _bob_local_rate(self, lo: float, hi: float) -> float:
        """Detector rate of the receiver around a local window (tags/s)."""
        b_det, _ = self._bob_arrays()
        pad = 0.5
        n = np.searchsorted(b_det, hi + pad) - np.searchsorted(b_det, lo - pad)
        return float(n) / (hi - lo + 2 * pad)

    def _process_block(self, i: int, t_start: float, t_end: float) -> BlockStatus:
        cfg = self.cfg
        mid = 0.5 * (t_start + t_end)
        searching = self.state.current is None or self.state.mode is LockMode.SEARCHING
        if searching:
            due = self._last_attempt is None \
                or i - self._last_attempt >= cfg.reacquire_interval
            if due:
                self._last_attempt = i
                est = self._attempt_acquire(t_start)
                if est is not None:
                    self.state.current = est
                    self.state.mode = LockMode.LOCKED
                    self.state.history = [(est.valid_from, est)]
                    self._fails = 0

        if self.state.current is None:
            status = BlockStatus(t_start, t_end, False, math.nan, 0.0, 0.0, math.nan)
            self.state.blocks.append(status)
            return status

        est = self.state.current
        predicted = est.predict(mid)
        measured, significance = self._fine_measure(t_start, t_end, predicted)
        locked = significance >= cfg.lock_threshold
        if locked:
            updated = OffsetEstimate(measured, est.drift_rate, significance, mid)
            self.state.history.append((mid, updated))
            drift = self._refit_drift()
            updated = replace(updated, drift_rate=drift)
            self.state.history[-1] = (mid, updated)
            self.state.current = updated
            self.state.mode = LockMode.LOCKED
            self.state.locked_seconds_total += t_end - t_start
            self._fails = 0
            status = BlockStatus(t_start, t_end, True, measured, drift,
                                 significance, predicted)
        else:
            self._fails += 1
            if self._fails >= cfg.drop_lock_after and self.state.mode is LockMode.LOCKED:
                self.state.mode = LockMode.SEARCHING
                self._last_attempt = i
            status = BlockStatus(t_start, t_end, False, predicted,
                                 est.drift_rate, significance, predicted)
        self.state.blocks.append(status)
        return status

    def _refit_drift(self) -> float:
        pts = self.state.history[-self.cfg.drift_window:]
        if len(pts) < 3:
            return 0.0
        t = np.array([p[0] for p in pts])
        offsets = np.array([p[1].offset for p in pts])
        t_c = t - t.mean()
        denom = float((t_c * t_c).sum())
        if denom <= 0.0:
            return 0.0
        return float((t_c * offsets).sum() / denom)

    def _fine_measure(self, t_start: float, t_end: float,
                      predicted: float) -> tuple[float, float]:
        """Fine correlation of one block around a predicted offset."""
        cfg = self.cfg
        a0 = np.searchsorted(self.a_det, t_start)
        a1 = np.searchsorted(self.a_det, t_end)
        a_slice = self.a_det[a0:a1]
        if len(a_slice) == 0:
            return math.nan, 0.0
        span = 2.0 * cfg.coarse_bin
        pad = cfg.coarse_bin + cfg.coincidence_window
        b_det, _ = self._bob_arrays()
        b0 = np.searchsorted(b_det, t_start + predicted - span - pad)
        b1 = np.searchsorted(b_det, t_end + predicted + span + pad)
        b_slice = b_det[b0:b1]
        if len(b_slice) == 0:
            return math.nan, 0.0
        rate_b = self._bob_local_rate(t_start + predicted, t_end + predicted)
        expected = len(a_slice) * rate_b * cfg.fine_bin
        corr = cross_correlate(a_slice, b_slice, predicted, span, cfg.fine_bin,
                               expected_per_bin=expected)
        return _centroid(corr), corr.significance

    def _attempt_acquire(self, t_start: float) -> OffsetEstimate | None:
        """Two-stage acquisition over a window starting at t_start."""
        cfg = self.cfg
        t_stop = min(t_start + cfg.acquisition_span, self.t_end)
        if t_stop - t_start < cfg.block_span:
            return None
        a0 = np.searchsorted(self.a_det, t_start)
        a1 = np.searchsorted(self.a_det, t_stop)
        a_slice = self.a_det[a0:a1]
        b_det, b_mark = self._bob_arrays()
        if len(a_slice) == 0 or len(b_det) == 0:
            return None

        center = 0.0
        span = cfg.blind_search_span
        m0 = np.searchsorted(self.a_mark, t_start)
        m1 = np.searchsorted(self.a_mark, t_stop)
        if m1 > m0 and len(b_mark):
            pa, pb = _match_markers(self.a_mark[m0:m1], b_mark)
            if len(pa):
                center = float(np.median(pb - pa))
                span = cfg.gps_search_span

        pad = 2.0 * cfg.coarse_bin
        b0 = np.searchsorted(b_det, t_start + center - span - pad)
        b1 = np.searchsorted(b_det, t_stop + center + span + pad)
        b_slice = b_det[b0:b1]
        if len(b_slice) == 0:
            return None
        t_window = t_stop - t_start
        rate_b = len(b_slice) / max(t_window + 2.0 * span, cfg.block_span)
        coarse = cross_correlate(a_slice, b_slice, center, span, cfg.coarse_bin,
                                 expected_per_bin=len(a_slice) * rate_b * cfg.coarse_bin)
        if coarse.significance < cfg.lock_threshold:
            return None

        fine_span = 2.0 * cfg.coarse_bin
        f0 = np.searchsorted(b_det, t_start + coarse.peak_offset - fine_span - pad)
        f1 = np.searchsorted(b_det, t_stop + coarse.peak_offset + fine_span + pad)
        b_fine = b_det[f0:f1]
        if len(b_fine) == 0:
            return None
        fine = cross_correlate(a_slice, b_fine, coarse.peak_offset, fine_span,
                               cfg.fine_bin,
                               expected_per_bin=len(a_slice) * rate_b * cfg.fine_bin)
        if fine.significance < cfg.lock_threshold:
            return None
        offset = _centroid(fine)
        return OffsetEstimate(offset, 0.0, fine.significance,
                              valid_from=0.5 * (t_start + t_stop))


def acquire_lock(alice: TagStream, bob: TagStream,
                 cfg: CorrelatorConfig | None = None) -> LockState:
    """Initial two-stage acquisition at the start of the streams.

    Raises NoLockError when neither correlation stage clears the
    threshold.
    """
    cfg = cfg or CorrelatorConfig()
    engine = _Engine(alice, cfg)
    engine.feed_bob(bob.ticks, bob.channels)
    engine.finish_bob()
    est = engine._attempt_acquire(engine.t_origin)
    if est is None:
        raise NoLockError("no correlation peak above threshold")
    return LockState(mode=LockMode.LOCKED, current=est,
                     history=[(est.valid_from, est)])


def track(state: LockState, alice: TagStream, bob: TagStream,
          cfg: CorrelatorConfig | None = None) -> LockState:
    """Run block-wise tracking over the full streams from a seed state."""
    cfg = cfg or CorrelatorConfig()
    engine = _Engine(alice, cfg)
    engine.seed_state(state)
    engine.feed_bob(bob.ticks, bob.channels)
    engine.finish_bob()
    engine.advance()
    return engine.state


@dataclass
class Coincidences:
    """Matched event pairs, one row per coincidence."""

    alice_ticks: np.ndarray
    alice_channels: np.ndarray
    bob_ticks: np.ndarray
    bob_channels: np.ndarray
    residuals: np.ndarray  # seconds, |aligned difference|

    @classmethod
    def empty(cls) -> "Coincidences":
        return cls(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.uint8),
                   np.empty(0, dtype=np.int64), np.empty(0, dtype=np.uint8),
                   np.empty(0))

    def __len__(self) -> int:
        return len(self.alice_ticks)


def extract_coincidences(alice: TagStream, bob: TagStream, state: LockState,
                         cfg: CorrelatorConfig | None = None) -> Coincidences:
    """Pair detector tags inside locked blocks.

    Candidates within the window are accepted greedily in order of
    residual (ties broken by earlier local, then receiver, tick), each tag
    at most once. Working in integer ticks with the block offset rounded
    to the nearest tick makes the window edge exact: a pair at exactly tau
    is in, one tick beyond is out.
    """
    cfg = cfg or CorrelatorConfig()
    a_mask = alice.detector_mask
    a_ticks = alice.ticks[a_mask]
    a_chans = alice.channels[a_mask]
    b_mask = bob.detector_mask
    b_ticks = bob.ticks[b_mask]
    b_chans = bob.channels[b_mask]
    tau_ticks = int(round(cfg.coincidence_window / TICK_SECONDS))
    used_b = np.zeros(len(b_ticks), dtype=bool)

    parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    for block in state.blocks:
        if not block.locked:
            continue
        s_tick = seconds_to_ticks(block.t_start)
        e_tick = seconds_to_ticks(block.t_end)
        a0 = int(np.searchsorted(a_ticks, s_tick))
        a1 = int(np.searchsorted(a_ticks, e_tick))
        if a1 <= a0:
            continue
        off_ticks = int(round(block.offset / TICK_SECONDS))
        targets = a_ticks[a0:a1] + off_ticks
        lo = np.searchsorted(b_ticks, targets - tau_ticks, side="left")
        hi = np.searchsorted(b_ticks, targets + tau_ticks, side="right")
        counts = hi - lo
        n_pairs = int(counts.sum())
        if n_pairs == 0:
            continue
        group_starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        cand_b = (np.arange(n_pairs, dtype=np.int64)
                  - np.repeat(group_starts, counts) + np.repeat(lo, counts))
        cand_a = np.repeat(np.arange(a0, a1, dtype=np.int64), counts)
        diff = (b_ticks[cand_b] - off_ticks) - a_ticks[cand_a]
        order = np.lexsort((cand_b, cand_a, np.abs(diff)))
        taken_a: set[int] = set()
        keep = []
        for idx in order:
            ia = int(cand_a[idx])
            ib = int(cand_b[idx])
            if ia in taken_a or used_b[ib]:
                continue
            taken_a.add(ia)
            used_b[ib] = True
            keep.append(idx)
        if not keep:
            continue
        keep_arr = np.array(keep, dtype=np.int64)
        ia = cand_a[keep_arr]
        ib = cand_b[keep_arr]
        res = np.abs(diff[keep_arr]).astype(np.float64) * TICK_SECONDS
        time_order = np.argsort(a_ticks[ia], kind="stable")
        parts.append((ia[time_order], ib[time_order], res[time_order]))

    if not parts:
        return Coincidences.empty()
    ia_all = np.concatenate([p[0] for p in parts])
    ib_all = np.concatenate([p[1] for p in parts])
    res_all = np.concatenate([p[2] for p in parts])
    return Coincidences(a_ticks[ia_all], a_chans[ia_all],
                        b_ticks[ib_all], b_chans[ib_all], res_all)


def run_offline(alice: TagStream, bob: TagStream,
                cfg: CorrelatorConfig | None = None) -> tuple[LockState, Coincidences]:
    """Full pipeline on complete streams: acquire, track, extract."""
    cfg = cfg or CorrelatorConfig()
    engine = _Engine(alice, cfg)
    engine.feed_bob(bob.ticks, bob.channels)
    engine.finish_bob()
    engine.advance()
    events = extract_coincidences(alice, bob, engine.state, cfg)
    return engine.state, events


class SyncPipeline:
    """Incremental front end over the lock engine for streamed receivers.

    Feed receiver tags as they arrive; advance() processes every block
    whose data window is complete and returns the new block statuses. The
    final results are identical to run_offline on the assembled streams.
    """

    def __init__(self, alice: TagStream, cfg: CorrelatorConfig | None = None):
        self.cfg = cfg or CorrelatorConfig()
        self._alice = alice
        self._engine = _Engine(alice, self.cfg)
        self._events: Coincidences | None = None

    def feed_bob(self, ticks: np.ndarray, channels: np.ndarray) -> list[BlockStatus]:
        self._engine.feed_bob(ticks, channels)
        return self._engine.advance()

    def finish(self) -> list[BlockStatus]:
        self._engine.finish_bob()
        done = self._engine.advance()
        bob = self._engine.bob_stream(self._alice.epoch_label)
        self._events = extract_coincidences(self._alice, bob, self._engine.state, self.cfg)
        return done

    @property
    def state(self) -> LockState:
        return self._engine.state

    @property
    def coincidences(self) -> Coincidences:
        if self._events is None:
            raise RuntimeError("pipeline not finished yet")
        return self._events


_COINC_HEADER = "alice_ticks,alice_channel,bob_ticks,bob_channel,residual_ns"
_TIMELINE_HEADER = "t_start,t_end,offset_ns,drift,significance"


def write_coincidence_log(path: str | Path, events: Coincidences) -> None:
    lines = [_COINC_HEADER]
    res_ns = events.residuals * 1e9
    for i in range(len(events)):
        lines.append(f"{events.alice_ticks[i]},{events.alice_channels[i]},"
                     f"{events.bob_ticks[i]},{events.bob_channels[i]},{res_ns[i]:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def _load_csv(path: str | Path) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # header-only file
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def read_coincidence_log(path: str | Path) -> Coincidences:
    raw = _load_csv(path)
    if raw.size == 0:
        return Coincidences.empty()
    return Coincidences(raw[:, 0].astype(np.int64), raw[:, 1].astype(np.uint8),
                        raw[:, 2].astype(np.int64), raw[:, 3].astype(np.uint8),
                        raw[:, 4] * 1e-9)


def write_lock_timeline(path: str | Path, state: LockState) -> None:
    lines = [_TIMELINE_HEADER]
    for block in state.blocks:
        if not block.locked:
            continue
        lines.append(f"{block.t_start:.6f},{block.t_end:.6f},"
                     f"{block.offset * 1e9:.3f},{block.drift_rate:.6e},"
                     f"{block.significance:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def locked_seconds_from_timeline(path: str | Path) -> float:
    raw = _load_csv(path)
    if raw.size == 0:
        return 0.0
    return float((raw[:, 1] - raw[:, 0]).sum())
