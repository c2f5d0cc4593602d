"""Valence-arousal histograms per expression, pseudo/soft labels and contradiction filtering"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import reduce
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from .annotations import (
    EXPRESSION_NAMES,
    NUM_EXPRESSIONS,
    DatasetIndex,
    Expression,
    FrameRecord,
    ValenceArousal,
    build_dataset_index,
)
from .errors import EmptyDistributionError

logger = logging.getLogger(__name__)

DEFAULT_BINS = 20
NEUTRAL_NORM_LIMIT = 0.5

REASON_INVALID = "invalid"
REASON_HAPPY_NEGATIVE = "happy_negative_valence"
REASON_SAD_POSITIVE = "sad_positive_valence"
REASON_NEUTRAL_HIGH_NORM = "neutral_high_norm"

Policy = Literal["none", "valence", "valence-only", "va", "va+ex"]
POLICY_ALIASES = {"valence-only": "valence"}


@dataclass(frozen=True, eq=False)
class VaHistogramSet:
    """Per-expression B x B count grids over [-1, 1]^2, indexed [expression, valence_bin, arousal_bin]"""

    bins: int
    counts: np.ndarray

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError(f"bins must be positive, got {self.bins}")
        if self.counts.shape != (NUM_EXPRESSIONS, self.bins, self.bins):
            raise ValueError(f"counts shape {self.counts.shape} does not match {self.bins} bins")
        if (self.counts < 0).any():
            raise ValueError("histogram counts must be nonnegative")

    @classmethod
    def empty(cls, bins: int = DEFAULT_BINS) -> "VaHistogramSet":
        return cls(bins=bins, counts=np.zeros((NUM_EXPRESSIONS, bins, bins), dtype=np.int64))

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2))

    @property
    def bin_width(self) -> float:
        return 2.0 / self.bins

    def bin_of(self, value: float) -> int:
        """Uniform bins over [-1, 1]; 1.0 lands in the last bin"""
        return bin_index(np.asarray(value), self.bins).item()

    def bin_edges(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.bins + 1)


def bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    idx = np.floor((np.asarray(values, dtype=np.float64) + 1.0) * (bins / 2.0)).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def merge_histograms(a: VaHistogramSet, b: VaHistogramSet) -> VaHistogramSet:
    """Associative merge of partial grids"""
    if a.bins != b.bins:
        raise ValueError(f"cannot merge histograms with {a.bins} and {b.bins} bins")
    return VaHistogramSet(bins=a.bins, counts=a.counts + b.counts)


def _histogram_of(records: Tuple[FrameRecord, ...], bins: int) -> VaHistogramSet:
    usable = [r for r in records if r.ex is not None and r.va is not None and not r.excluded]
    hist = VaHistogramSet.empty(bins)
    if not usable:
        return hist
    ex = np.array([r.ex for r in usable], dtype=np.int64)
    vi = bin_index([r.va.valence for r in usable], bins)
    ai = bin_index([r.va.arousal for r in usable], bins)
    np.add.at(hist.counts, (ex, vi, ai), 1)
    return hist


def build_va_histograms(index: DatasetIndex, bins: int = DEFAULT_BINS, jobs: int = 1) -> VaHistogramSet:
    """Count frames labeled for both EX and VA (excluded frames never contribute)"""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    groups = [records for _, records in index.videos]
    if jobs > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            partials = list(pool.map(lambda rs: _histogram_of(rs, bins), groups))
    else:
        partials = [_histogram_of(rs, bins) for rs in groups]
    hist = reduce(merge_histograms, partials, VaHistogramSet.empty(bins))
    logger.info(f"Built VA histograms ({bins}x{bins}) from {int(hist.totals.sum())} co-labeled frames")
    return hist


def sample_pseudo_va(hist: VaHistogramSet, ex: int, rng: np.random.Generator) -> ValenceArousal:
    """Draw a bin with probability counts/total, then a point uniformly inside it"""
    grid = hist.counts[int(ex)]
    total = int(grid.sum())
    if total == 0:
        raise EmptyDistributionError(f"no co-labeled frames for expression {EXPRESSION_NAMES[int(ex)]}")
    flat = rng.choice(grid.size, p=grid.ravel() / total)
    vi, ai = divmod(int(flat), hist.bins)
    offsets = rng.random(2)
    width = hist.bin_width
    valence = min(-1.0 + (vi + offsets[0]) * width, 1.0)
    arousal = min(-1.0 + (ai + offsets[1]) * width, 1.0)
    return ValenceArousal(float(valence), float(arousal))


@dataclass(frozen=True)
class SoftExpression:
    """Probability vector over the seven expressions"""

    probs: Tuple[float, ...]

    def __post_init__(self):
        if len(self.probs) != NUM_EXPRESSIONS:
            raise ValueError(f"expected {NUM_EXPRESSIONS} probabilities, got {len(self.probs)}")
        if any(p < 0.0 or p > 1.0 for p in self.probs) or abs(math.fsum(self.probs) - 1.0) > 1e-9:
            raise ValueError(f"not a probability vector: {self.probs}")


def soft_expression(hist: VaHistogramSet, va: ValenceArousal) -> SoftExpression:
    """p_i = n_i(v,a) / sum_j n_j(v,a) over the bin containing (v, a)"""
    column = hist.counts[:, hist.bin_of(va.valence), hist.bin_of(va.arousal)].astype(np.float64)
    total = column.sum()
    if total == 0:
        raise EmptyDistributionError(f"empty histogram bin at valence={va.valence}, arousal={va.arousal}")
    return SoftExpression(tuple(float(p) for p in column / total))


def filter_record(r: FrameRecord) -> Tuple[FrameRecord, Optional[str]]:
    """Mark a frame excluded when its labels are invalid or contradict each other"""
    reason: Optional[str] = None
    if r.invalid:
        reason = REASON_INVALID
    elif r.ex is not None and r.va is not None:
        v, a = r.va.valence, r.va.arousal
        if r.ex == Expression.HAPPINESS and v < 0:
            reason = REASON_HAPPY_NEGATIVE
        elif r.ex == Expression.SADNESS and v > 0:
            reason = REASON_SAD_POSITIVE
        elif r.ex == Expression.NEUTRAL and math.hypot(v, a) > NEUTRAL_NORM_LIMIT:
            reason = REASON_NEUTRAL_HIGH_NORM
    if reason is None:
        return r, None
    return replace(r, excluded=True), reason


class FilterReport(BaseModel):
    """Outcome of filtering a dataset"""

    removed_happy_neg: int = 0
    removed_sad_pos: int = 0
    removed_neutral_highnorm: int = 0
    removed_invalid: int = 0
    kept: int = 0

    @property
    def total(self) -> int:
        return (
            self.removed_happy_neg
            + self.removed_sad_pos
            + self.removed_neutral_highnorm
            + self.removed_invalid
            + self.kept
        )


_REPORT_FIELD = {
    REASON_INVALID: "removed_invalid",
    REASON_HAPPY_NEGATIVE: "removed_happy_neg",
    REASON_SAD_POSITIVE: "removed_sad_pos",
    REASON_NEUTRAL_HIGH_NORM: "removed_neutral_highnorm",
}


def filter_index(index: DatasetIndex) -> Tuple[DatasetIndex, FilterReport, List[Dict[str, Any]]]:
    """Apply filter_record to every frame; returns the new index, counts and per-frame decisions"""
    report = FilterReport()
    decisions: List[Dict[str, Any]] = []
    out: List[FrameRecord] = []
    for record in index.records():
        filtered, reason = filter_record(record)
        out.append(filtered)
        if reason is None:
            report.kept += 1
            continue
        field_name = _REPORT_FIELD[reason]
        setattr(report, field_name, getattr(report, field_name) + 1)
        decisions.append({"video_id": record.video_id, "frame_index": record.frame_index, "reason": reason})

    logger.info(
        f"Filtered {report.total - report.kept} of {report.total} frames "
        f"(happy/neg {report.removed_happy_neg}, sad/pos {report.removed_sad_pos}, "
        f"neutral/norm {report.removed_neutral_highnorm}, invalid {report.removed_invalid})"
    )
    return build_dataset_index(out), report, decisions


def apply_pseudo_policy(
    index: DatasetIndex,
    hist: VaHistogramSet,
    policy: Policy,
    rng: np.random.Generator,
    on_empty: Literal["raise", "skip"] = "raise",
) -> DatasetIndex:
    """Attach pseudo VA and soft EX labels; existing valid labels are never overwritten

    Resampling for every training pass is the caller's job: call again with
    the advanced rng.
    """
    policy = POLICY_ALIASES.get(policy, policy)
    if policy == "none":
        return index
    if policy not in ("valence", "va", "va+ex"):
        raise ValueError(f"unknown pseudo policy {policy!r}")

    skipped = 0
    out: List[FrameRecord] = []
    for r in index.records():
        if r.excluded:
            out.append(r)
            continue
        try:
            if r.ex is not None and r.va is None:
                sampled = sample_pseudo_va(hist, r.ex, rng)
                if policy == "valence":
                    sampled = ValenceArousal(sampled.valence, None)
                r = replace(r, pseudo_va=sampled)
            elif policy == "va+ex" and r.va is not None and r.ex is None:
                r = replace(r, soft_ex=soft_expression(hist, r.va).probs)
        except EmptyDistributionError:
            if on_empty == "raise":
                raise
            skipped += 1
        out.append(r)

    if skipped:
        logger.warning(f"Skipped {skipped} pseudo labels drawn from empty distributions")
    return build_dataset_index(out)


def histogram_summary(hist: VaHistogramSet) -> Dict[str, Any]:
    """JSON-ready summary with totals and the full grids"""
    return {
        "bins": hist.bins,
        "expressions": list(EXPRESSION_NAMES),
        "totals": {name: int(t) for name, t in zip(EXPRESSION_NAMES, hist.totals)},
        "counts": {name: hist.counts[i].tolist() for i, name in enumerate(EXPRESSION_NAMES)},
    }


def histogram_from_summary(summary: Dict[str, Any]) -> VaHistogramSet:
    bins = int(summary["bins"])
    counts = np.array([summary["counts"][name] for name in EXPRESSION_NAMES], dtype=np.int64)
    return VaHistogramSet(bins=bins, counts=counts.reshape(NUM_EXPRESSIONS, bins, bins))


def histogram_text_grid(hist: VaHistogramSet) -> str:
    """One block per expression: rows are valence bins, columns arousal bins"""
    blocks = []
    for i, name in enumerate(EXPRESSION_NAMES):
        lines = [f"# {name} total={int(hist.totals[i])}"]
        lines.extend(" ".join(str(int(c)) for c in row) for row in hist.counts[i])
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
