import numpy as np
import pytest
from hypothesis import given, strategies as st

from bcg2ecg.beats import PeakConfig
from bcg2ecg.evaluation import (
    COHORT_FOLD_COUNTS,
    TABLE1_FIELDS,
    FoldPlan,
    FoldPlanError,
    check_plan,
    make_segment_folds,
    make_subject_folds,
    near_equal_counts,
    run_cv,
    table1_csv,
)
from bcg2ecg.preprocess import preprocess_recording
from bcg2ecg.recording_io import SegmentPair
from bcg2ecg.synth import generate_cohort, preset
from bcg2ecg.training import TrainConfig
from bcg2ecg.transformer import ModelConfig


def fake_segments(n_subjects, per_subject):
    flat = np.full(500, 0.5, dtype=np.float32)
    return [
        SegmentPair(f"s{s:02d}", i, i * 0.25, flat, flat)
        for s in range(n_subjects)
        for i in range(per_subject)
    ]


def cohort(lab, elder):
    subjects = [f"lab-{i:03d}" for i in range(lab)] + [f"elder-{i:03d}" for i in range(elder)]
    tags = {s: s.split("-")[0] for s in subjects}
    return subjects, tags


class TestSegmentFolds:
    def test_ten_segments(self):
        plan = make_segment_folds(fake_segments(1, 10), seed=0)
        assert plan.sizes == [2, 2, 2, 2, 2]

    @given(st.integers(5, 300), st.integers(0, 2**31))
    def test_partition(self, n, seed):
        segs = fake_segments(1, n)
        plan = make_segment_folds(segs, seed=seed)
        check_plan(plan, [s.key for s in segs])
        assert max(plan.sizes) - min(plan.sizes) <= 1

    def test_seeded(self):
        segs = fake_segments(3, 20)
        assert make_segment_folds(segs, 4).folds == make_segment_folds(segs, 4).folds
        assert make_segment_folds(segs, 4).folds != make_segment_folds(segs, 5).folds

    def test_too_few(self):
        with pytest.raises(FoldPlanError):
            make_segment_folds(fake_segments(1, 4), seed=0)


class TestSubjectFolds:
    def test_lab_counts(self):
        subjects, tags = cohort(46, 0)
        plan = make_subject_folds(subjects, tags, COHORT_FOLD_COUNTS["lab"], seed=1)
        assert plan.sizes == [9, 9, 9, 9, 10]
        check_plan(plan, subjects)

    def test_elder_counts(self):
        subjects, tags = cohort(0, 28)
        plan = make_subject_folds(subjects, tags, COHORT_FOLD_COUNTS["elder"], seed=1)
        assert plan.sizes == [6, 6, 6, 6, 4]
        check_plan(plan, subjects)

    @pytest.mark.parametrize("seed", range(5))
    def test_combined_composition(self, seed):
        subjects, tags = cohort(46, 28)
        plan = make_subject_folds(subjects, tags, COHORT_FOLD_COUNTS["combined"], seed=seed)
        assert plan.sizes == [15, 15, 15, 15, 14]
        check_plan(plan, subjects)
        mix = [(sum(tags[s] == "lab" for s in f), sum(tags[s] == "elder" for s in f)) for f in plan.folds]
        assert mix == [(9, 6)] * 4 + [(10, 4)]

    def test_per_tag_counts(self):
        subjects, tags = cohort(46, 28)
        plan = make_subject_folds(
            subjects, tags, {"lab": COHORT_FOLD_COUNTS["lab"], "elder": COHORT_FOLD_COUNTS["elder"]}
        )
        assert plan.sizes == [15, 15, 15, 15, 14]

    def test_near_equal(self):
        assert near_equal_counts(46) == [9, 9, 9, 9, 10]
        assert near_equal_counts(20) == [4] * 5

    @given(st.integers(5, 120), st.integers(0, 60), st.integers(0, 1000))
    def test_partition_random(self, lab, elder, seed):
        subjects, tags = cohort(lab, elder)
        plan = make_subject_folds(subjects, tags, seed=seed)
        check_plan(plan, subjects)
        assert plan.sizes == near_equal_counts(lab + elder)

    def test_bad_counts(self):
        subjects, tags = cohort(46, 0)
        with pytest.raises(FoldPlanError):
            make_subject_folds(subjects, tags, [9, 9, 9, 9, 9])
        with pytest.raises(FoldPlanError):
            make_subject_folds(subjects, tags, {"elder": [9, 9, 9, 9, 10]})

    def test_overlap_rejected(self):
        with pytest.raises(FoldPlanError):
            FoldPlan("subject", [["a"], ["a"]], 0)

    def test_split_leaves_no_subject_overlap(self):
        segs = fake_segments(10, 3)
        plan = make_subject_folds(sorted({s.subject_id for s in segs}), seed=2)
        for k in range(5):
            tr, te = plan.split(segs, k)
            assert not {segs[i].subject_id for i in tr} & {segs[i].subject_id for i in te}
            assert sorted(tr + te) == list(range(len(segs)))

    def test_uncovered_segment(self):
        plan = make_subject_folds([f"s{i:02d}" for i in range(5)])
        with pytest.raises(FoldPlanError):
            plan.split(fake_segments(6, 1), 0)


def test_table1_csv_layout():
    rows = [{"dataset": "lab", "mode": "segment", "total_segments": 3, "metric": "hr",
             "proposed_r": 0.5, "baseline_r": None}]
    text = table1_csv(rows)
    assert text.splitlines() == [",".join(TABLE1_FIELDS), "lab,segment,3,hr,0.500000,"]


@pytest.fixture(scope="module")
def small_cv_segments():
    segs = []
    for rec, _ in generate_cohort(preset("lab", n_subjects=5, duration_s=8, seed=3)):
        segs += preprocess_recording(rec)
    return segs


def _run(segs, mode):
    plan = (make_segment_folds(segs, seed=1) if mode == "segment"
            else make_subject_folds(sorted({s.subject_id for s in segs}), seed=1))
    return run_cv(segs, plan, ModelConfig(500, 8, 1, 2, 8), TrainConfig(epochs=1, batch_size=8),
                  PeakConfig(), dataset="lab")


@pytest.mark.parametrize("mode", ["segment", "subject"])
def test_run_cv_pools_all_test_segments(small_cv_segments, mode):
    result = _run(small_cv_segments, mode)
    assert len(result.folds) == 5
    assert sum(f.n_test for f in result.folds) == len(small_cv_segments)
    if mode == "subject":
        for f in result.folds:
            assert not set(f.train_subjects) & set(f.test_subjects)
    assert len(result.table1_rows()) == 4


def test_run_cv_deterministic(small_cv_segments):
    a = table1_csv(_run(small_cv_segments, "segment").table1_rows())
    b = table1_csv(_run(small_cv_segments, "segment").table1_rows())
    assert a == b
