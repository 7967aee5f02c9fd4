"""Heartbeat detection on 5 s segments.

``find_rpeaks`` picks R-peaks on a (ground-truth or predicted) ECG window.
``lydon_baseline`` detects beats directly on BCG from its short-time energy
envelope, a reduced form of the envelope method of Lydon et al. used as the
comparison baseline.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import peak_prominences

RR_MIN_S = 0.25
RR_MAX_S = 3.0


@dataclass(frozen=True)
class PeakConfig:
    min_distance_samples: int = 25
    min_prominence_frac: float = 0.3
    envelope_window_samples: int = 30

    def __post_init__(self):
        if self.min_distance_samples < 1:
            raise ValueError("min_distance_samples must be >= 1")
        if not 0 < self.min_prominence_frac < 1:
            raise ValueError("min_prominence_frac must lie in (0, 1)")
        if self.envelope_window_samples < 1:
            raise ValueError("envelope_window_samples must be >= 1")


@dataclass
class BeatSeries:
    beat_indices: list[int]
    rate_hz: float = 100.0
    rr_intervals_s: list[float] = field(default_factory=list)
    n_rejected_rr: int = 0

    @property
    def n_beats(self) -> int:
        return len(self.beat_indices)

    @property
    def usable(self) -> bool:
        """At least one in-gate RR interval is available for metrics."""
        return len(self.rr_intervals_s) >= 1


def _local_maxima(x: np.ndarray) -> np.ndarray:
    """Indices of strict local maxima; flat tops report their middle sample."""
    n = x.size
    if n < 3:
        return np.empty(0, dtype=int)
    peaks = []
    i = 1
    while i < n - 1:
        if x[i - 1] < x[i]:
            j = i
            while j + 1 < n and x[j + 1] == x[i]:
                j += 1
            if j + 1 < n and x[j + 1] < x[i]:
                peaks.append((i + j) // 2)
            i = j + 1
        else:
            i += 1
    return np.asarray(peaks, dtype=int)


def _pick_peaks(x: np.ndarray, cfg: PeakConfig) -> list[int]:
    x = np.asarray(x, dtype=np.float64)
    span = float(x.max() - x.min()) if x.size else 0.0
    if span <= 0 or not np.isfinite(span):
        return []
    cand = _local_maxima(x)
    if cand.size == 0:
        return []
    prom = peak_prominences(x, cand)[0]
    keep = prom >= cfg.min_prominence_frac * span
    cand, prom = cand[keep], prom[keep]
    # greedy: most prominent first, ties to the earlier sample
    order = np.lexsort((cand, -prom))
    chosen: list[int] = []
    for i in order:
        c = int(cand[i])
        if all(abs(c - k) >= cfg.min_distance_samples for k in chosen):
            chosen.append(c)
    return sorted(chosen)


def rr_from_beats(beats, rate_hz: float = 100.0) -> tuple[list[float], int]:
    """RR intervals (s) between successive beats, gated to (0.25, 3.0] s.

    Returns ``(rr, n_rejected)``. Fewer than two beats gives an empty list.
    """
    idx = beats.beat_indices if isinstance(beats, BeatSeries) else list(beats)
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    if len(idx) < 2:
        return [], 0
    rr = np.diff(np.asarray(idx, dtype=np.float64)) / rate_hz
    ok = (rr > RR_MIN_S) & (rr <= RR_MAX_S)
    return rr[ok].tolist(), int((~ok).sum())


def _series(indices: list[int], rate_hz: float) -> BeatSeries:
    rr, rejected = rr_from_beats(indices, rate_hz)
    return BeatSeries(indices, rate_hz, rr, rejected)


def find_rpeaks(ecg: np.ndarray, cfg: PeakConfig = PeakConfig(), rate_hz: float = 100.0) -> BeatSeries:
    """R-peaks: local maxima whose prominence is at least a fraction of the window range,
    kept greedily by prominence subject to the refractory distance."""
    return _series(_pick_peaks(ecg, cfg), rate_hz)


def energy_envelope(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving mean of the squared, mean-removed signal."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean()
    kernel = np.full(window, 1.0 / window)
    return np.convolve(xc * xc, kernel, mode="same")


def lydon_baseline(bcg: np.ndarray, cfg: PeakConfig = PeakConfig(), rate_hz: float = 100.0) -> BeatSeries:
    """Beats located at peaks of the BCG short-time energy envelope."""
    env = energy_envelope(bcg, cfg.envelope_window_samples)
    return _series(_pick_peaks(env, cfg), rate_hz)


# -- beats.csv ---------------------------------------------------------------------

BEATS_FIELDS = ["segment_id", "source", "beat_indices"]


def segment_id(subject_id: str, segment_index: int) -> str:
    return f"{subject_id}:{segment_index}"


def parse_segment_id(sid: str) -> tuple[str, int]:
    subject, sep, idx = sid.rpartition(":")
    if not sep:
        raise ValueError(f"malformed segment id {sid!r}")
    return subject, int(idx)


def format_beats_csv(rows) -> str:
    """`rows` are ``(segment_id, source, indices)`` triples; indices are space separated."""
    lines = [",".join(BEATS_FIELDS)]
    for sid, source, idx in rows:
        lines.append(f"{sid},{source},{' '.join(str(int(i)) for i in idx)}")
    return "\n".join(lines) + "\n"


def read_beats_csv(path) -> dict[tuple[str, int], list[int]]:
    """Map ``(subject_id, segment_index)`` to beat indices."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != BEATS_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(BEATS_FIELDS)}")
        for row in reader:
            text = row["beat_indices"].strip()
            out[parse_segment_id(row["segment_id"])] = [int(t) for t in text.split()] if text else []
    return out
