"""Multi-task losses with analytic gradients and challenge evaluation criteria"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_softmax, softmax
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
from sklearn.metrics import f1_score

from .annotations import NUM_EXPRESSIONS, FrameRecord, TaskCounts
from .errors import ShapeError

logger = logging.getLogger(__name__)

CCC_EPS = 1e-12
SOFT_SUM_TOLERANCE = 1e-9


def ccc(x: Sequence[float], y: Sequence[float]) -> float:
    """Concordance correlation coefficient with population moments; 0 when degenerate"""
    return _ccc_and_grad(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))[0]


def _ccc_and_grad(x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("series length", x.shape, y.shape)
    n = x.size
    if n < 2:
        raise ShapeError("series length", ">= 2", n)
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    cov = float(dx @ dy) / n
    denom = float(dx @ dx) / n + float(dy @ dy) / n + (mx - my) ** 2
    if denom < CCC_EPS:
        return 0.0, np.zeros(n)
    value = 2.0 * cov / denom
    # d ccc / d x_i = 2 / (N D) * ((y_i - my) - ccc * (x_i - my))
    grad = 2.0 / (n * denom) * (dy - value * (x - my))
    return value, grad


@dataclass(frozen=True, eq=False)
class BatchPredictions:
    """Per-sample [v, a], 7 EX logits and K AU logits"""

    va: np.ndarray
    ex_logits: np.ndarray
    au_logits: np.ndarray

    def __post_init__(self):
        n = self.va.shape[0]
        if self.va.shape != (n, 2):
            raise ShapeError("va", (n, 2), self.va.shape)
        if self.ex_logits.shape != (n, NUM_EXPRESSIONS):
            raise ShapeError("ex_logits", (n, NUM_EXPRESSIONS), self.ex_logits.shape)
        if self.au_logits.ndim != 2 or self.au_logits.shape[0] != n:
            raise ShapeError("au_logits", f"{n} x K", self.au_logits.shape)
        for name in ("va", "ex_logits", "au_logits"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains non-finite values")

    def __len__(self) -> int:
        return self.va.shape[0]

    @property
    def n_au(self) -> int:
        return self.au_logits.shape[1]

    @classmethod
    def from_matrix(cls, rows: np.ndarray, n_au: int) -> "BatchPredictions":
        """Split N x (2 + 7 + K) head outputs"""
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if rows.shape[1] != 2 + NUM_EXPRESSIONS + n_au:
            raise ShapeError("head width", 2 + NUM_EXPRESSIONS + n_au, rows.shape[1])
        return cls(
            va=rows[:, :2].copy(),
            ex_logits=rows[:, 2 : 2 + NUM_EXPRESSIONS].copy(),
            au_logits=rows[:, 2 + NUM_EXPRESSIONS :].copy(),
        )

    def to_matrix(self) -> np.ndarray:
        return np.concatenate([self.va, self.ex_logits, self.au_logits], axis=1)

    def subset(self, rows: slice) -> "BatchPredictions":
        return BatchPredictions(self.va[rows], self.ex_logits[rows], self.au_logits[rows])


@dataclass(frozen=True, eq=False)
class BatchTargets:
    """Optional per-sample targets; NaN marks an absent value, -1 an absent hard EX

    ``soft_ex`` rows are NaN when absent. A sample with a soft row uses it
    instead of its hard label.
    """

    valence: np.ndarray
    arousal: np.ndarray
    ex: np.ndarray
    soft_ex: np.ndarray
    au: np.ndarray

    def __post_init__(self):
        n = self.valence.shape[0]
        for name, shape in (
            ("arousal", (n,)),
            ("ex", (n,)),
            ("soft_ex", (n, NUM_EXPRESSIONS)),
        ):
            if getattr(self, name).shape != shape:
                raise ShapeError(name, shape, getattr(self, name).shape)
        if self.au.ndim != 2 or self.au.shape[0] != n:
            raise ShapeError("au", f"{n} x K", self.au.shape)
        present = self.soft_mask
        if present.any():
            sums = self.soft_ex[present].sum(axis=1)
            if np.abs(sums - 1.0).max() > SOFT_SUM_TOLERANCE:
                raise ValueError("soft expression targets must sum to 1")
        hard = self.ex[self.ex >= 0]
        if (hard >= NUM_EXPRESSIONS).any():
            raise ValueError("hard expression target out of range")

    def __len__(self) -> int:
        return self.valence.shape[0]

    @property
    def v_mask(self) -> np.ndarray:
        return ~np.isnan(self.valence)

    @property
    def a_mask(self) -> np.ndarray:
        return ~np.isnan(self.arousal)

    @property
    def soft_mask(self) -> np.ndarray:
        return ~np.isnan(self.soft_ex).any(axis=1)

    @property
    def ex_mask(self) -> np.ndarray:
        return (self.ex >= 0) | self.soft_mask

    @property
    def au_mask(self) -> np.ndarray:
        return ~np.isnan(self.au).any(axis=1)

    def counts(self) -> TaskCounts:
        return TaskCounts(va=int(self.v_mask.sum()), ex=int(self.ex_mask.sum()), au=int(self.au_mask.sum()))

    def ex_distribution(self) -> np.ndarray:
        """N x 7 target distribution: soft row if present, else one-hot, else zeros"""
        dist = np.zeros((len(self), NUM_EXPRESSIONS))
        hard = self.ex >= 0
        dist[np.flatnonzero(hard), self.ex[hard]] = 1.0
        soft = self.soft_mask
        dist[soft] = self.soft_ex[soft]
        return dist

    def subset(self, rows: slice) -> "BatchTargets":
        return BatchTargets(self.valence[rows], self.arousal[rows], self.ex[rows], self.soft_ex[rows], self.au[rows])

    @classmethod
    def from_records(cls, records: Iterable[FrameRecord], n_au: int, use_pseudo: bool = True) -> "BatchTargets":
        """Targets for frame records; pseudo VA and soft EX only when ``use_pseudo``"""
        records = list(records)
        n = len(records)
        valence = np.full(n, np.nan)
        arousal = np.full(n, np.nan)
        ex = np.full(n, -1, dtype=np.int64)
        soft = np.full((n, NUM_EXPRESSIONS), np.nan)
        au = np.full((n, n_au), np.nan)
        for i, r in enumerate(records):
            va = r.va if r.va is not None else (r.pseudo_va if use_pseudo else None)
            if va is not None:
                if va.valence is not None:
                    valence[i] = va.valence
                if va.arousal is not None:
                    arousal[i] = va.arousal
            if r.ex is not None:
                ex[i] = int(r.ex)
            elif use_pseudo and r.soft_ex is not None:
                soft[i] = r.soft_ex
            if r.au is not None:
                au[i] = r.au
        return cls(valence=valence, arousal=arousal, ex=ex, soft_ex=soft, au=au)


@dataclass(frozen=True)
class LossBreakdown:
    l_ex: float
    l_au: float
    l_va: float
    n_ex: int
    n_au: int
    n_v: int
    n_a: int

    @property
    def total(self) -> float:
        return self.l_ex + self.l_au + self.l_va

    def as_dict(self) -> Dict[str, float]:
        return {
            "l_ex": self.l_ex,
            "l_au": self.l_au,
            "l_va": self.l_va,
            "n_ex": self.n_ex,
            "n_au": self.n_au,
            "n_v": self.n_v,
            "n_a": self.n_a,
            "total": self.total,
        }


def multitask_loss(
    pred: BatchPredictions,
    tgt: BatchTargets,
    counts: Optional[TaskCounts] = None,
) -> Tuple[LossBreakdown, BatchPredictions]:
    """Sum of per-task losses, each divided by its number of labeled samples

    ``counts`` overrides the EX and AU normalizers; passing the counts of a
    whole batch lets the parts of a split batch add up to the full-batch
    value. The CCC term always uses the samples it is given.

    Returns the breakdown and the gradient of ``total`` for every prediction entry.
    """
    n = len(pred)
    if n == 0:
        raise ValueError("batch must not be empty")
    if len(tgt) != n:
        raise ShapeError("batch size", n, len(tgt))
    if tgt.au.shape[1] != pred.n_au:
        raise ShapeError("au units", pred.n_au, tgt.au.shape[1])

    grad_va = np.zeros_like(pred.va)
    grad_ex = np.zeros_like(pred.ex_logits)
    grad_au = np.zeros_like(pred.au_logits)

    ex_mask = tgt.ex_mask
    n_ex = counts.ex if counts is not None else int(ex_mask.sum())
    l_ex = 0.0
    if ex_mask.any() and n_ex > 0:
        targets = tgt.ex_distribution()[ex_mask]
        logits = pred.ex_logits[ex_mask]
        l_ex = float(-(targets * log_softmax(logits, axis=1)).sum() / n_ex)
        grad_ex[ex_mask] = (softmax(logits, axis=1) * targets.sum(axis=1, keepdims=True) - targets) / n_ex

    au_mask = tgt.au_mask
    n_au = counts.au if counts is not None else int(au_mask.sum())
    l_au = 0.0
    if au_mask.any() and n_au > 0:
        z = pred.au_logits[au_mask]
        y = tgt.au[au_mask]
        l_au = float((np.logaddexp(0.0, z) - y * z).sum() / n_au)
        grad_au[au_mask] = (expit(z) - y) / n_au

    v_mask, a_mask = tgt.v_mask, tgt.a_mask
    terms = []
    for col, mask, series in ((0, v_mask, tgt.valence), (1, a_mask, tgt.arousal)):
        if mask.sum() < 2:
            terms.append(0.0)
            continue
        value, grad = _ccc_and_grad(pred.va[mask, col], series[mask])
        terms.append(1.0 - value)
        grad_va[mask, col] = -0.5 * grad
    l_va = 0.5 * (terms[0] + terms[1])

    breakdown = LossBreakdown(
        l_ex=l_ex,
        l_au=l_au,
        l_va=l_va,
        n_ex=int(n_ex),
        n_au=int(n_au),
        n_v=int(v_mask.sum()),
        n_a=int(a_mask.sum()),
    )
    return breakdown, BatchPredictions(grad_va, grad_ex, grad_au)


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int = NUM_EXPRESSIONS) -> np.ndarray:
    """Rows are true classes, columns predictions"""
    return sk_confusion_matrix(y_true, y_pred, labels=list(range(n_classes)))


def f1_scores(confusion: np.ndarray) -> Tuple[np.ndarray, float]:
    """Per-class F1 (0 where undefined) and their unweighted mean"""
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ShapeError("confusion", "square matrix", confusion.shape)
    tp = np.diag(confusion)
    denom = confusion.sum(axis=0) + confusion.sum(axis=1)
    per_class = np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return per_class, float(per_class.mean()) if per_class.size else 0.0


def au_f1_scores(y_true: np.ndarray, y_pred: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Per-unit binary F1, their mean, and accuracy over all unit decisions"""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise ShapeError("au labels", y_true.shape, y_pred.shape)
    if y_true.size == 0:
        return np.zeros(y_true.shape[1]), 0.0, 0.0
    per_unit = np.array(
        [f1_score(y_true[:, k], y_pred[:, k], labels=[0, 1], zero_division=0) for k in range(y_true.shape[1])]
    )
    return per_unit, float(np.mean(per_unit)), float((y_true == y_pred).mean())


def expression_criterion(macro_f1: float, accuracy: float) -> float:
    return 0.67 * macro_f1 + 0.33 * accuracy


def au_criterion(avg_f1: float, total_accuracy: float) -> float:
    return 0.5 * avg_f1 + 0.5 * total_accuracy


def va_score(ccc_v: float, ccc_a: float) -> float:
    return (ccc_v + ccc_a) / 2.0


def overall_score(ccc_mean: float, ex_score: float, au_score: float) -> float:
    """Unweighted mean of the three challenge scores"""
    return (ccc_mean + ex_score + au_score) / 3.0


def _series_ccc(pred: np.ndarray, target: np.ndarray) -> float:
    mask = ~np.isnan(target)
    if mask.sum() < 2:
        return 0.0
    return ccc(pred[mask], target[mask])


def evaluation_report(pred: BatchPredictions, tgt: BatchTargets) -> Dict[str, Any]:
    """Scores on the ground-truth labels of a batch; every key present even without labels"""
    ccc_v = _series_ccc(pred.va[:, 0], tgt.valence)
    ccc_a = _series_ccc(pred.va[:, 1], tgt.arousal)

    hard = tgt.ex >= 0
    if hard.any():
        predicted = pred.ex_logits[hard].argmax(axis=1)
        per_class, macro = f1_scores(confusion_matrix(tgt.ex[hard], predicted))
        ex_accuracy = float((predicted == tgt.ex[hard]).mean())
    else:
        per_class, macro, ex_accuracy = np.zeros(NUM_EXPRESSIONS), 0.0, 0.0

    au_rows = tgt.au_mask
    au_per_unit, au_avg, au_accuracy = au_f1_scores(
        tgt.au[au_rows].astype(np.int64).reshape(-1, pred.n_au),
        (pred.au_logits[au_rows] > 0).astype(np.int64).reshape(-1, pred.n_au),
    )

    ex_score = expression_criterion(macro, ex_accuracy)
    au_score = au_criterion(au_avg, au_accuracy)
    mean_ccc = va_score(ccc_v, ccc_a)
    report = {
        "n_samples": len(pred),
        "n_v": int(tgt.v_mask.sum()),
        "n_a": int(tgt.a_mask.sum()),
        "n_ex": int(hard.sum()),
        "n_au": int(au_rows.sum()),
        "ccc_v": ccc_v,
        "ccc_a": ccc_a,
        "ccc_mean": mean_ccc,
        "ex_f1": [float(f) for f in per_class],
        "ex_macro_f1": macro,
        "ex_accuracy": ex_accuracy,
        "ex_criterion": ex_score,
        "au_f1": [float(f) for f in au_per_unit],
        "au_avg_f1": au_avg,
        "au_accuracy": au_accuracy,
        "au_criterion": au_score,
        "overall": overall_score(mean_ccc, ex_score, au_score),
    }
    if not math.isfinite(report["overall"]):
        raise ValueError("evaluation produced a non-finite score")
    return report
