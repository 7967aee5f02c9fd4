"""Per-segment HR/HRV indices and agreement statistics against ground truth."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

METRICS = ("hr", "mhbi", "rmssd", "sdnn")
HIST_OVERFLOW_BPM = 10.0


@dataclass(frozen=True)
class SegmentMetrics:
    hr_bpm: float
    mhbi_ms: float
    rmssd_ms: Optional[float]
    sdnn_ms: Optional[float]
    n_rr: int

    def get(self, metric: str) -> Optional[float]:
        return {
            "hr": self.hr_bpm,
            "mhbi": self.mhbi_ms,
            "rmssd": self.rmssd_ms,
            "sdnn": self.sdnn_ms,
        }[metric]


def segment_metrics(rr: Sequence[float]) -> SegmentMetrics:
    """HR (bpm) from the median RR; MHBI, RMSSD and SDNN in ms.

    RMSSD and SDNN need at least two intervals and are ``None`` otherwise.
    Both use an N-1 denominator.
    """
    rr = np.asarray(rr, dtype=np.float64)
    n = rr.size
    if n == 0:
        raise ValueError("no RR intervals")
    hr = 60.0 / float(np.median(rr))
    mhbi = float(rr.mean()) * 1000.0
    rmssd = sdnn = None
    if n >= 2:
        rmssd = math.sqrt(float(np.sum(np.diff(rr) ** 2)) / (n - 1)) * 1000.0
        sdnn = math.sqrt(float(np.sum((rr - rr.mean()) ** 2)) / (n - 1)) * 1000.0
    return SegmentMetrics(hr, mhbi, rmssd, sdnn, n)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation; NaN when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("length mismatch")
    if x.size < 2:
        raise ValueError("need at least two pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class BlandAltman:
    mean_diff: float
    loa_low: float
    loa_high: float
    rows: list[tuple[float, float]] = field(default_factory=list, repr=False, compare=False)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.mean_diff, self.loa_low, self.loa_high)


def bland_altman(x: Sequence[float], y: Sequence[float]) -> BlandAltman:
    """Mean of x - y and its 95% limits of agreement (mean +/- 1.96 sd, N-1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("length mismatch")
    if x.size < 2:
        raise ValueError("need at least two pairs")
    d = x - y
    md = float(d.mean())
    sd = float(d.std(ddof=1))
    rows = list(zip(((x + y) / 2).tolist(), d.tolist()))
    return BlandAltman(md, md - 1.96 * sd, md + 1.96 * sd, rows)


@dataclass(frozen=True)
class Histogram:
    edges: list[float]  # lower edges; last bin is [edges[-1], inf)
    counts: list[int]


def error_histogram(hr_pred: Sequence[float], hr_gt: Sequence[float],
                    bin_width_bpm: float = 1.0) -> Histogram:
    """Counts of |pred - gt| in [k*w, (k+1)*w) bins up to 10 bpm, plus an overflow bin."""
    p = np.asarray(hr_pred, dtype=np.float64)
    g = np.asarray(hr_gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError("length mismatch")
    if bin_width_bpm <= 0:
        raise ValueError("bin width must be positive")
    n_bins = int(math.ceil(HIST_OVERFLOW_BPM / bin_width_bpm - 1e-12))
    err = np.abs(p - g)
    idx = np.minimum(np.floor(err / bin_width_bpm).astype(int), n_bins)
    counts = np.bincount(idx, minlength=n_bins + 1)
    edges = [k * bin_width_bpm for k in range(n_bins)] + [HIST_OVERFLOW_BPM]
    return Histogram(edges, counts.tolist())


@dataclass
class MetricAgreement:
    n: int
    pearson_r: Optional[float]
    bland_altman: Optional[BlandAltman]


@dataclass
class AgreementReport:
    metrics: dict[str, MetricAgreement]
    abs_error_histogram: Histogram
    n_segments_included: int
    n_excluded: int
    median_hr_diff_pooled: Optional[float] = None
    median_hr_diff_per_subject: Optional[float] = None
    hr_pairs: list[tuple[float, float]] = field(default_factory=list, repr=False)

    def r(self, metric: str) -> Optional[float]:
        return self.metrics[metric].pearson_r

    def to_dict(self) -> dict:
        out = {
            "n_segments_included": self.n_segments_included,
            "n_excluded": self.n_excluded,
            "median_hr_diff_pooled": self.median_hr_diff_pooled,
            "median_hr_diff_per_subject": self.median_hr_diff_per_subject,
            "metrics": {},
            "abs_error_histogram": asdict(self.abs_error_histogram),
        }
        for name, m in self.metrics.items():
            ba = m.bland_altman
            out["metrics"][name] = {
                "n": m.n,
                "pearson_r": m.pearson_r,
                "bland_altman": None if ba is None else {
                    "mean_diff": ba.mean_diff, "loa_low": ba.loa_low, "loa_high": ba.loa_high,
                },
            }
        return out


def _nan_to_none(v: float) -> Optional[float]:
    return None if v is None or math.isnan(v) else v


def agreement(candidate: dict, ground_truth: dict) -> AgreementReport:
    """Compare per-segment metrics keyed by ``(subject_id, segment_index)``.

    Values are SegmentMetrics or ``None`` (segment excluded: too few beats).
    A segment counts only if both sides have metrics; RMSSD/SDNN additionally
    need values on both sides.
    """
    keys = sorted(set(candidate) | set(ground_truth))
    pairs = [(k, candidate.get(k), ground_truth.get(k)) for k in keys]
    used = [(k, c, g) for k, c, g in pairs if c is not None and g is not None]
    n_excluded = len(pairs) - len(used)

    metrics = {}
    for name in METRICS:
        xs, ys = [], []
        for _, c, g in used:
            a, b = c.get(name), g.get(name)
            if a is not None and b is not None:
                xs.append(a)
                ys.append(b)
        r = ba = None
        if len(xs) >= 2:
            r = _nan_to_none(pearson(xs, ys))
            ba = bland_altman(xs, ys)
        metrics[name] = MetricAgreement(len(xs), r, ba)

    hr_c = [c.hr_bpm for _, c, _ in used]
    hr_g = [g.hr_bpm for _, _, g in used]
    hist = error_histogram(hr_c, hr_g)
    med_pooled = med_subject = None
    if used:
        med_pooled = float(np.median(hr_c) - np.median(hr_g))
        by_subject: dict[str, tuple[list, list]] = {}
        for (sid, _), c, g in used:
            a, b = by_subject.setdefault(sid, ([], []))
            a.append(c.hr_bpm)
            b.append(g.hr_bpm)
        med_subject = float(np.median([np.median(a) - np.median(b) for a, b in by_subject.values()]))
    return AgreementReport(
        metrics=metrics,
        abs_error_histogram=hist,
        n_segments_included=len(used),
        n_excluded=n_excluded,
        median_hr_diff_pooled=med_pooled,
        median_hr_diff_per_subject=med_subject,
        hr_pairs=list(zip(hr_c, hr_g)),
    )
