"""Fold plans for the segment and subject models, and the CV driver."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .beats import PeakConfig, find_rpeaks, lydon_baseline
from .hrv import METRICS, AgreementReport, agreement, segment_metrics
from .preprocess import normalize_unit
from .recording_io import SegmentPair
from .training import DivergenceError, TrainConfig, train
from .transformer import ModelConfig, predict

log = logging.getLogger(__name__)

N_FOLDS = 5

# subjects per fold as used for the original cohorts
COHORT_FOLD_COUNTS = {
    "lab": [9, 9, 9, 9, 10],
    "elder": [6, 6, 6, 6, 4],
    "combined": [15, 15, 15, 15, 14],
}


class FoldPlanError(ValueError):
    pass


@dataclass
class FoldPlan:
    mode: str  # "segment" or "subject"
    folds: list[list]
    seed: int
    composition: Optional[list[dict[str, int]]] = None

    def __post_init__(self):
        if self.mode not in ("segment", "subject"):
            raise FoldPlanError(f"unknown mode {self.mode!r}")
        seen = set()
        for fold in self.folds:
            ids = set(fold)
            if len(ids) != len(fold) or ids & seen:
                raise FoldPlanError("folds overlap or contain duplicates")
            seen |= ids

    @property
    def sizes(self) -> list[int]:
        return [len(f) for f in self.folds]

    def population(self) -> set:
        return {i for f in self.folds for i in f}

    def _id(self, seg: SegmentPair):
        return seg.key if self.mode == "segment" else seg.subject_id

    def fold_of(self) -> dict:
        return {i: k for k, fold in enumerate(self.folds) for i in fold}

    def split(self, segments: Sequence[SegmentPair], k: int) -> tuple[list[int], list[int]]:
        """Positions of training and test segments for cycle `k`."""
        owner = self.fold_of()
        train_idx, test_idx = [], []
        for pos, seg in enumerate(segments):
            try:
                f = owner[self._id(seg)]
            except KeyError:
                raise FoldPlanError(f"segment {seg.key} is not covered by the fold plan") from None
            (test_idx if f == k else train_idx).append(pos)
        return train_idx, test_idx


def make_segment_folds(segments: Sequence[SegmentPair], seed: int, n_folds: int = N_FOLDS) -> FoldPlan:
    """Shuffle all segments, then deal them round-robin into `n_folds` folds."""
    if len(segments) < n_folds:
        raise FoldPlanError(f"need at least {n_folds} segments, got {len(segments)}")
    ids = [s.key for s in segments]
    perm = np.random.default_rng(seed).permutation(len(ids))
    return FoldPlan("segment", [[ids[i] for i in perm[k::n_folds]] for k in range(n_folds)], seed)


def near_equal_counts(n: int, n_folds: int = N_FOLDS) -> list[int]:
    """Sizes differing by at most one; the larger folds come last (46 -> 9,9,9,9,10)."""
    base, extra = divmod(n, n_folds)
    return [base + (1 if k >= n_folds - extra else 0) for k in range(n_folds)]


def _composition(counts: Sequence[int], tag_totals: dict[str, int]) -> list[dict[str, int]]:
    """Per-fold subject counts per dataset tag.

    Tags are filled largest first with ``floor(fold_size * remaining_tag /
    remaining_total)`` (at least one per fold while available); the last tag
    takes the rest of the fold.
    """
    tags = sorted(tag_totals, key=lambda t: (-tag_totals[t], t))
    remaining = dict(tag_totals)
    out = []
    for k, c in enumerate(counts):
        total_left = sum(remaining.values())
        folds_left = len(counts) - k
        row = {}
        left_in_fold = c
        for t in tags[:-1]:
            n = c * remaining[t] // total_left if total_left else 0
            if remaining[t] > 0 and folds_left <= remaining[t]:
                n = max(n, 1)
            n = min(n, remaining[t], left_in_fold)
            row[t] = n
            left_in_fold -= n
        row[tags[-1]] = left_in_fold
        if left_in_fold > remaining[tags[-1]]:
            raise FoldPlanError(f"fold {k}: cannot fill {c} subjects from the available tags")
        for t, n in row.items():
            remaining[t] -= n
        out.append(row)
    if any(remaining.values()):
        raise FoldPlanError("fold counts do not consume every subject")
    return out


def make_subject_folds(
    subjects: Sequence[str],
    dataset_tags: Optional[Mapping[str, str]] = None,
    mode_counts: Union[Sequence[int], Mapping[str, Sequence[int]], None] = None,
    seed: int = 0,
    n_folds: int = N_FOLDS,
) -> FoldPlan:
    """Assign whole subjects to folds.

    `mode_counts` is a list of per-fold subject counts, or a mapping from
    dataset tag to such a list (fold k then merges fold k of every tag).
    With several tags and a plain list, each fold's per-tag make-up is
    derived proportionally so every fold mixes the datasets. Defaults to
    near-equal fold sizes.
    """
    subjects = sorted(set(subjects))
    if len(subjects) < n_folds:
        raise FoldPlanError(f"need at least {n_folds} subjects, got {len(subjects)}")
    tags = {s: (dataset_tags or {}).get(s, "") for s in subjects}
    by_tag: dict[str, list[str]] = {}
    for s in subjects:
        by_tag.setdefault(tags[s], []).append(s)

    if isinstance(mode_counts, Mapping):
        per_tag = {t: list(c) for t, c in mode_counts.items()}
        if set(per_tag) != set(by_tag):
            raise FoldPlanError(f"count tags {sorted(per_tag)} do not match subject tags {sorted(by_tag)}")
        for t, c in per_tag.items():
            if len(c) != n_folds or sum(c) != len(by_tag[t]) or min(c) < 0:
                raise FoldPlanError(f"counts {c} for tag {t!r} do not split {len(by_tag[t])} subjects")
        composition = [{t: per_tag[t][k] for t in sorted(per_tag)} for k in range(n_folds)]
    else:
        counts = near_equal_counts(len(subjects), n_folds) if mode_counts is None else list(mode_counts)
        if len(counts) != n_folds or sum(counts) != len(subjects) or min(counts) < 1:
            raise FoldPlanError(f"counts {counts} do not split {len(subjects)} subjects into {n_folds} folds")
        composition = _composition(counts, {t: len(v) for t, v in by_tag.items()})

    rng = np.random.default_rng(seed)
    shuffled = {t: [v[i] for i in rng.permutation(len(v))] for t, v in sorted(by_tag.items())}
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    for t, pool in shuffled.items():
        a = 0
        for k in range(n_folds):
            n = composition[k].get(t, 0)
            folds[k].extend(pool[a : a + n])
            a += n
    return FoldPlan("subject", folds, seed, composition=composition)


def check_plan(plan: FoldPlan, population: Sequence) -> None:
    """Raise unless folds are pairwise disjoint and cover exactly `population`."""
    union = plan.population()
    if sum(plan.sizes) != len(union):
        raise FoldPlanError("folds are not disjoint")
    if union != set(population):
        raise FoldPlanError("folds do not cover the population exactly")


# -- cross-validation --------------------------------------------------------------


def beat_metrics(beats):
    return segment_metrics(beats.rr_intervals_s) if beats.usable else None


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_test: int
    train_subjects: list[str]
    test_subjects: list[str]
    loss_history: list[float]
    proposed: AgreementReport
    baseline: AgreementReport

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "test_subjects": self.test_subjects,
            "loss_history": self.loss_history,
            "proposed": self.proposed.to_dict(),
            "baseline": self.baseline.to_dict(),
        }


@dataclass
class CVResult:
    dataset: str
    mode: str
    folds: list[FoldResult]
    proposed: AgreementReport
    baseline: AgreementReport
    total_segments: int
    per_segment: dict = field(default_factory=dict, repr=False)

    def matrix(self) -> dict[str, dict[str, Optional[float]]]:
        """{"proposed"|"baseline": {metric: pooled Pearson r}}."""
        return {
            "proposed": {m: self.proposed.r(m) for m in METRICS},
            "baseline": {m: self.baseline.r(m) for m in METRICS},
        }

    def table1_rows(self) -> list[dict]:
        return [
            {
                "dataset": self.dataset,
                "mode": self.mode,
                "total_segments": self.total_segments,
                "metric": m,
                "proposed_r": self.proposed.r(m),
                "baseline_r": self.baseline.r(m),
            }
            for m in METRICS
        ]


TABLE1_FIELDS = ["dataset", "mode", "total_segments", "metric", "proposed_r", "baseline_r"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def table1_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE1_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in TABLE1_FIELDS})
    return buf.getvalue()


def evaluate_fold(test: Sequence[SegmentPair], pred: np.ndarray, peak_config: PeakConfig):
    """Per-segment metrics for the three beat sources of one test fold."""
    gt, proposed, baseline = {}, {}, {}
    for seg, p in zip(test, pred):
        p_norm, _ = normalize_unit(p)
        gt[seg.key] = beat_metrics(find_rpeaks(seg.ecg, peak_config))
        proposed[seg.key] = beat_metrics(find_rpeaks(p_norm, peak_config))
        baseline[seg.key] = beat_metrics(lydon_baseline(seg.bcg, peak_config))
    return gt, proposed, baseline


def _fold_train_config(train_config: TrainConfig, k: int) -> TrainConfig:
    seed = int(np.random.SeedSequence([train_config.seed, k]).generate_state(1)[0])
    return replace(train_config, seed=seed)


def run_fold(segments, plan, k, model_config, train_config, peak_config) -> tuple[FoldResult, dict]:
    train_idx, test_idx = plan.split(segments, k)
    train_set = [segments[i] for i in train_idx if not segments[i].degenerate]
    test_set = [segments[i] for i in test_idx]
    train_subj = sorted({s.subject_id for s in train_set})
    test_subj = sorted({s.subject_id for s in test_set})
    if plan.mode == "subject" and set(train_subj) & set(test_subj):
        raise FoldPlanError(f"fold {k}: subjects shared between train and test")
    try:
        params, history = train(train_set, model_config, _fold_train_config(train_config, k))
    except DivergenceError as exc:
        raise DivergenceError(f"fold {k}: {exc}", exc.epoch, exc.batch) from exc
    pred = predict(np.stack([s.bcg for s in test_set]), params) if test_set else np.empty((0, 0))
    gt, proposed, baseline = evaluate_fold(test_set, pred, peak_config)
    result = FoldResult(
        fold=k,
        n_train=len(train_set),
        n_test=len(test_set),
        train_subjects=train_subj,
        test_subjects=test_subj,
        loss_history=history,
        proposed=agreement(proposed, gt),
        baseline=agreement(baseline, gt),
    )
    log.info("fold %d: train %d test %d, HR r proposed %s baseline %s",
             k, len(train_set), len(test_set), result.proposed.r("hr"), result.baseline.r("hr"))
    return result, {"gt": gt, "proposed": proposed, "baseline": baseline}


def run_cv(
    segments: Sequence[SegmentPair],
    plan: FoldPlan,
    model_config: ModelConfig,
    train_config: TrainConfig,
    peak_config: PeakConfig = PeakConfig(),
    dataset: str = "dataset",
    threads: int = 1,
) -> CVResult:
    """Train on four folds, test on the fifth, five times; pool the test folds."""
    n_folds = len(plan.folds)
    check_plan(plan, {plan._id(s) for s in segments})

    def one(k):
        return run_fold(segments, plan, k, model_config, train_config, peak_config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(one, range(n_folds)))
    else:
        outputs = [one(k) for k in range(n_folds)]

    pooled = {"gt": {}, "proposed": {}, "baseline": {}}
    for _, per_seg in outputs:
        for src in pooled:
            pooled[src].update(per_seg[src])
    total = sum(1 for v in pooled["gt"].values() if v is not None)
    return CVResult(
        dataset=dataset,
        mode=plan.mode,
        folds=[r for r, _ in outputs],
        proposed=agreement(pooled["proposed"], pooled["gt"]),
        baseline=agreement(pooled["baseline"], pooled["gt"]),
        total_segments=total,
        per_segment=pooled,
    )
