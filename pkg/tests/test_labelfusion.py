import math
import time

import numpy as np
import pytest

from src.affect.annotations import (
    Expression,
    FrameRecord,
    ValenceArousal,
    build_dataset_index,
    load_annotation_dir,
    validate_record,
)
from src.affect.errors import EmptyDistributionError
from src.affect.labelfusion import (
    REASON_HAPPY_NEGATIVE,
    REASON_INVALID,
    REASON_NEUTRAL_HIGH_NORM,
    VaHistogramSet,
    apply_pseudo_policy,
    build_va_histograms,
    filter_index,
    filter_record,
    histogram_from_summary,
    histogram_summary,
    histogram_text_grid,
    merge_histograms,
    sample_pseudo_va,
    soft_expression,
)
from src.affect.synth import CONTRADICTION_RULES

HAPPY = int(Expression.HAPPINESS)
NEUTRAL = int(Expression.NEUTRAL)
SAD = int(Expression.SADNESS)
FEAR = int(Expression.FEAR)


def record(i, va=None, ex=None, video="v"):
    return FrameRecord(video, i, va=None if va is None else ValenceArousal(*va), ex=ex)


def single_bin_histogram(bins, ex, vi, ai, count=1):
    hist = VaHistogramSet.empty(bins)
    hist.counts[ex, vi, ai] = count
    return hist


def test_single_frame_upper_right_bin():
    hist = build_va_histograms(build_dataset_index([record(0, (0.5, 0.5), HAPPY)]), bins=2)
    assert hist.counts[HAPPY, 1, 1] == 1
    assert hist.counts.sum() == 1


def test_frame_without_va_contributes_nothing():
    hist = build_va_histograms(build_dataset_index([record(0, None, HAPPY)]), bins=4)
    assert hist.counts.sum() == 0


def test_boundary_value_one_lands_in_last_bin():
    hist = build_va_histograms(build_dataset_index([record(0, (1.0, -1.0), SAD)]), bins=5)
    assert hist.counts[SAD, 4, 0] == 1


def test_histogram_recovers_class_means(rng):
    means = {HAPPY: (0.6, 0.3), SAD: (-0.5, -0.2), FEAR: (-0.3, 0.7)}
    records = []
    for i in range(10000):
        ex = list(means)[i % 3]
        v, a = np.clip(rng.normal(means[ex], 0.1), -1.0, 1.0)
        records.append(record(i, (float(v), float(a)), ex))
    hist = build_va_histograms(build_dataset_index(records), bins=20)
    centers = (hist.bin_edges()[:-1] + hist.bin_edges()[1:]) / 2.0
    for ex, (mv, ma) in means.items():
        grid = hist.counts[ex] / hist.counts[ex].sum()
        assert abs(grid.sum(axis=1) @ centers - mv) < 0.05
        assert abs(grid.sum(axis=0) @ centers - ma) < 0.05


def test_parallel_build_matches_serial(rng):
    records = [
        record(i, (float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))), int(rng.integers(7)), video=f"v{i % 5}")
        for i in range(500)
    ]
    index = build_dataset_index(records)
    serial = build_va_histograms(index, bins=8, jobs=1)
    parallel = build_va_histograms(index, bins=8, jobs=4)
    np.testing.assert_array_equal(serial.counts, parallel.counts)


def test_merge_is_associative():
    a = single_bin_histogram(3, 0, 0, 0, 2)
    b = single_bin_histogram(3, 1, 1, 2, 5)
    c = single_bin_histogram(3, 0, 0, 0, 1)
    left = merge_histograms(merge_histograms(a, b), c)
    right = merge_histograms(a, merge_histograms(b, c))
    np.testing.assert_array_equal(left.counts, right.counts)
    with pytest.raises(ValueError):
        merge_histograms(a, VaHistogramSet.empty(4))


def test_sample_stays_in_forced_bin(rng):
    hist = single_bin_histogram(20, HAPPY, 10, 10)
    for _ in range(200):
        va = sample_pseudo_va(hist, HAPPY, rng)
        assert 0.0 <= va.valence < 0.1
        assert 0.0 <= va.arousal < 0.1


def test_two_equal_bins_split_evenly(rng):
    hist = single_bin_histogram(2, SAD, 0, 0, 7)
    hist.counts[SAD, 1, 1] = 7
    draws = [sample_pseudo_va(hist, SAD, rng).valence < 0 for _ in range(100_000)]
    assert abs(np.mean(draws) - 0.5) < 0.01


def test_sample_from_empty_class_fails(rng):
    hist = single_bin_histogram(4, HAPPY, 0, 0)
    with pytest.raises(EmptyDistributionError):
        sample_pseudo_va(hist, FEAR, rng)


def test_soft_expression_single_class():
    hist = single_bin_histogram(10, HAPPY, 7, 7, 3)
    soft = soft_expression(hist, ValenceArousal(0.45, 0.45))
    assert soft.probs[HAPPY] == 1.0
    assert sum(soft.probs) == 1.0


def test_soft_expression_ratio():
    hist = single_bin_histogram(10, HAPPY, 5, 5, 3)
    hist.counts[NEUTRAL, 5, 5] = 1
    soft = soft_expression(hist, ValenceArousal(0.05, 0.05))
    assert soft.probs[HAPPY] == pytest.approx(0.75)
    assert soft.probs[NEUTRAL] == pytest.approx(0.25)


def test_soft_expression_uniform():
    hist = VaHistogramSet(bins=1, counts=np.full((7, 1, 1), 4, dtype=np.int64))
    soft = soft_expression(hist, ValenceArousal(0.0, 0.0))
    assert soft.probs == pytest.approx((1.0 / 7.0,) * 7)
    assert math.fsum(soft.probs) == pytest.approx(1.0, abs=1e-9)


def test_soft_expression_empty_bin():
    with pytest.raises(EmptyDistributionError):
        soft_expression(VaHistogramSet.empty(4), ValenceArousal(0.0, 0.0))


@pytest.mark.parametrize(
    "va,ex,reason",
    [
        ((-0.3, 0.0), HAPPY, REASON_HAPPY_NEGATIVE),
        ((0.6, 0.4), NEUTRAL, REASON_NEUTRAL_HIGH_NORM),
        ((-0.5, 0.1), SAD, None),
        ((0.0, 0.0), HAPPY, None),
    ],
)
def test_filter_rules(va, ex, reason):
    filtered, got = filter_record(record(0, va, ex))
    assert got == reason
    assert filtered.excluded is (reason is not None)


def test_filter_invalid_label():
    filtered, reason = filter_record(FrameRecord("v", 0, ex=HAPPY, invalid=frozenset({"VA"})))
    assert reason == REASON_INVALID
    assert filtered.excluded


def test_filter_index_counts_and_excluded_frames_leave_histograms():
    index = build_dataset_index(
        [record(0, (-0.3, 0.0), HAPPY), record(1, (0.4, 0.1), SAD), record(2, (0.2, 0.2), HAPPY)]
    )
    filtered, report, decisions = filter_index(index)
    assert report.removed_happy_neg == 1
    assert report.removed_sad_pos == 1
    assert report.kept == 1
    assert report.total == 3
    assert [d["frame_index"] for d in decisions] == [0, 1]
    assert build_va_histograms(filtered, bins=2).counts.sum() == 1


def test_filter_matches_injected_contradictions(small_corpus):
    corpus, manifest = small_corpus
    _, report, decisions = filter_index(load_annotation_dir(corpus / "annotations"))
    counts = manifest["contradiction_counts"]
    assert report.removed_happy_neg == counts["happy_negative_valence"]
    assert report.removed_sad_pos == counts["sad_positive_valence"]
    assert report.removed_neutral_highnorm == counts["neutral_high_norm"]
    assert report.removed_invalid == counts["invalid"]
    injected = {(c["video_id"], c["frame_index"], c["rule"]) for c in manifest["contradictions"]}
    assert {(d["video_id"], d["frame_index"], d["reason"]) for d in decisions} == injected
    assert set(counts) == set(CONTRADICTION_RULES)


def uniform_histogram(bins=4):
    return VaHistogramSet(bins=bins, counts=np.ones((7, bins, bins), dtype=np.int64))


def test_policy_none_is_identity(rng):
    index = build_dataset_index([record(0, None, HAPPY), record(1, (0.1, 0.1), None)])
    assert apply_pseudo_policy(index, uniform_histogram(), "none", rng) is index


def test_valence_only_policy(rng):
    index = build_dataset_index([record(0, None, HAPPY), record(1, (0.1, 0.1), HAPPY)])
    out = list(apply_pseudo_policy(index, uniform_histogram(), "valence", rng).records())
    assert out[0].pseudo_va.valence is not None
    assert out[0].pseudo_va.arousal is None
    assert out[1].pseudo_va is None
    assert out[1].va == ValenceArousal(0.1, 0.1)


def test_va_policy_sets_both(rng):
    index = build_dataset_index([record(0, None, SAD)])
    out = next(apply_pseudo_policy(index, uniform_histogram(), "va", rng).records())
    assert out.pseudo_va.is_valid()


def test_va_ex_policy_adds_soft_labels(rng):
    records = [record(i, (float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))), None) for i in range(69)]
    records += [record(69 + i, (0.1, 0.1), HAPPY) for i in range(31)]
    out = list(apply_pseudo_policy(build_dataset_index(records), uniform_histogram(), "va+ex", rng).records())
    assert sum(r.soft_ex is not None for r in out) == 69
    for r in out:
        if r.soft_ex is not None:
            assert math.fsum(r.soft_ex) == pytest.approx(1.0, abs=1e-9)
            assert r.ex is None


def test_excluded_frames_get_no_pseudo_labels(rng):
    index = build_dataset_index([FrameRecord("v", 0, ex=HAPPY, excluded=True)])
    out = next(apply_pseudo_policy(index, uniform_histogram(), "va", rng).records())
    assert out.pseudo_va is None


def test_empty_distribution_skip_or_raise(rng):
    index = build_dataset_index([record(0, None, FEAR)])
    hist = single_bin_histogram(4, HAPPY, 0, 0)
    with pytest.raises(EmptyDistributionError):
        apply_pseudo_policy(index, hist, "valence", rng)
    out = next(apply_pseudo_policy(index, hist, "valence", rng, on_empty="skip").records())
    assert out.pseudo_va is None


def test_summary_round_trip_and_text_grid():
    hist = single_bin_histogram(3, HAPPY, 2, 1, 4)
    summary = histogram_summary(hist)
    assert summary["totals"]["happiness"] == 4
    np.testing.assert_array_equal(histogram_from_summary(summary).counts, hist.counts)
    text = histogram_text_grid(hist)
    assert "# happiness total=4" in text
    assert text.count("\n") == 7 * 4 + 6


def test_valence_only_alias_matches_valence(rng):
    index = build_dataset_index([record(0, None, HAPPY), record(1, (0.1, 0.1), HAPPY)])
    out = list(apply_pseudo_policy(index, uniform_histogram(), "valence-only", rng).records())
    assert out[0].pseudo_va.valence is not None
    assert out[0].pseudo_va.arousal is None
    assert out[1].pseudo_va is None


def test_unknown_policy_rejected(rng):
    with pytest.raises(ValueError):
        apply_pseudo_policy(build_dataset_index([record(0, None, HAPPY)]), uniform_histogram(), "arousal", rng)


def test_filter_invalid_au_vector():
    raw = validate_record((0.1, 0.1), 0, (0, 1, 2, 0, 0, 0, 0, 0))
    assert "AU" in raw.invalid
    filtered, reason = filter_record(raw)
    assert reason == REASON_INVALID
    assert filtered.excluded


def _violates_a_rule(ex, v, a):
    if ex == HAPPY and v < 0:
        return True
    if ex == SAD and v > 0:
        return True
    return ex == NEUTRAL and math.hypot(v, a) > 0.5


def test_filter_matches_rules_on_grid():
    grid = [k / 20 for k in range(-20, 21)]
    for ex in range(7):
        for v in grid:
            for a in grid:
                filtered, reason = filter_record(record(0, (v, a), ex))
                assert filtered.excluded is _violates_a_rule(ex, v, a), (ex, v, a, reason)


def random_histogram(rng, bins=None):
    bins = bins or int(rng.integers(1, 11))
    counts = rng.integers(0, 5, size=(7, bins, bins)) * (rng.random((7, bins, bins)) < 0.4)
    return VaHistogramSet(bins=bins, counts=counts.astype(np.int64))


@pytest.mark.parametrize("seed", range(100))
def test_soft_labels_normalized_in_every_bin(seed):
    rng = np.random.default_rng(seed)
    hist = random_histogram(rng)
    centers = (hist.bin_edges()[:-1] + hist.bin_edges()[1:]) / 2.0
    for vi, v in enumerate(centers):
        for ai, a in enumerate(centers):
            va = ValenceArousal(float(v), float(a))
            if hist.counts[:, vi, ai].sum() == 0:
                with pytest.raises(EmptyDistributionError):
                    soft_expression(hist, va)
            else:
                assert math.fsum(soft_expression(hist, va).probs) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_merge_is_associative_and_commutative(seed):
    rng = np.random.default_rng(seed)
    bins = int(rng.integers(1, 11))
    a, b, c = (random_histogram(rng, bins) for _ in range(3))
    np.testing.assert_array_equal(merge_histograms(a, b).counts, merge_histograms(b, a).counts)
    left = merge_histograms(merge_histograms(a, b), c)
    right = merge_histograms(a, merge_histograms(b, c))
    np.testing.assert_array_equal(left.counts, right.counts)


def test_pseudo_samples_stay_in_range(rng):
    for _ in range(20):
        hist = random_histogram(rng)
        hist.counts[:, -1, -1] += 1
        hist.counts[:, 0, 0] += 1
        for ex in range(7):
            for _ in range(50):
                va = sample_pseudo_va(hist, ex, rng)
                assert -1.0 <= va.valence <= 1.0
                assert -1.0 <= va.arousal <= 1.0


@pytest.mark.parametrize("policy", ["valence", "va", "va+ex"])
def test_policies_never_overwrite_labels(rng, policy):
    records = []
    for i in range(300):
        va = (float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1))) if rng.random() < 0.5 else None
        ex = int(rng.integers(7)) if rng.random() < 0.5 else None
        records.append(FrameRecord("v", i, va=None if va is None else ValenceArousal(*va), ex=ex))
    index = build_dataset_index(records)
    out = list(apply_pseudo_policy(index, uniform_histogram(), policy, rng).records())
    for before, after in zip(index.records(), out):
        assert after.va == before.va
        assert after.ex == before.ex
        assert after.au == before.au
        if before.va is not None:
            assert after.pseudo_va is None
        if before.ex is not None:
            assert after.soft_ex is None


def test_filter_finds_exactly_the_planted_contradictions(acceptance_corpus):
    corpus, manifest = acceptance_corpus
    index = load_annotation_dir(corpus / "annotations")
    assert len(index) == 1000

    start = time.perf_counter()
    _, report, decisions = filter_index(index)
    assert time.perf_counter() - start < 1.0

    assert len(decisions) == 137
    planted = {(c["video_id"], c["frame_index"], c["rule"]) for c in manifest["contradictions"]}
    assert {(d["video_id"], d["frame_index"], d["reason"]) for d in decisions} == planted
    assert report.kept == 1000 - 137
