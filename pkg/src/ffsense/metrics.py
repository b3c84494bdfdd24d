"""Evaluation metrics for recognition, attribute estimation and filter impact.

Everything here is a pure function of its inputs. Distortion between a
baseline and a filtered image is the Euclidean distance between their
L2-normalized identity probability vectors; a filter whose mean distance
exceeds the breaking threshold (0.75 by default) is taken to defeat
recognition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .dataset import ETHNICITIES, GENDERS

BREAKING_THRESHOLD = 0.75
NORM_EPS = 1e-12


class MetricError(ValueError):
    pass


class ZeroVectorError(MetricError):
    pass


class LabelError(MetricError):
    pass


# ------------------------------------------------------------ classification


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class ClassificationReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    averaging: str
    per_class: Mapping[Hashable, ClassMetrics]
    # "<label>:precision" / "<label>:recall" entries whose denominator was
    # zero and were therefore reported as 0.
    zero_division: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "averaging": self.averaging,
            "per_class": {str(k): vars(v) for k, v in self.per_class.items()},
            "zero_division": list(self.zero_division),
        }


def _check_pair(actual: Sequence, predicted: Sequence, min_len: int = 1) -> None:
    if len(actual) != len(predicted):
        raise MetricError(f"length mismatch: {len(actual)} actual vs {len(predicted)} predicted")
    if len(actual) < min_len:
        raise MetricError(f"need at least {min_len} samples, got {len(actual)}")


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def classification_report(actual: Sequence, predicted: Sequence, averaging: str = "macro",
                          classes: Sequence | None = None) -> ClassificationReport:
    """Accuracy plus macro- or support-weighted precision, recall and F1."""
    _check_pair(actual, predicted)
    if averaging not in ("macro", "weighted"):
        raise MetricError(f"unknown averaging {averaging!r}")
    if classes is None:
        classes = sorted(set(actual) | set(predicted), key=lambda c: (str(type(c)), c))
    cm = confusion(actual, predicted, classes)
    counts = cm.counts
    total = int(counts.sum())
    tp = np.diag(counts)
    pred_tot = counts.sum(axis=0)
    act_tot = counts.sum(axis=1)

    per_class, flags = {}, []
    for i, c in enumerate(cm.classes):
        if pred_tot[i] == 0:
            p = 0.0
            flags.append(f"{c}:precision")
        else:
            p = tp[i] / pred_tot[i]
        if act_tot[i] == 0:
            r = 0.0
            flags.append(f"{c}:recall")
        else:
            r = tp[i] / act_tot[i]
        per_class[c] = ClassMetrics(float(p), float(r), _f1(float(p), float(r)), int(act_tot[i]))

    k = len(cm.classes)
    if averaging == "macro":
        weights = [1.0 / k] * k
    else:
        weights = [m.support / total for m in per_class.values()]
    stats = list(per_class.values())
    return ClassificationReport(
        accuracy=int(tp.sum()) / total,
        precision=math.fsum(w * m.precision for w, m in zip(weights, stats)),
        recall=math.fsum(w * m.recall for w, m in zip(weights, stats)),
        f1=math.fsum(w * m.f1 for w, m in zip(weights, stats)),
        averaging=averaging,
        per_class=per_class,
        zero_division=tuple(flags),
    )


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    classes: tuple
    counts: np.ndarray  # rows = actual, columns = predicted

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and self.classes == other.classes
                and np.array_equal(self.counts, other.counts))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> ConfusionMatrix:
        return cls(tuple(d["classes"]), np.asarray(d["counts"], dtype=np.int64))


def confusion(actual: Sequence, predicted: Sequence, classes: Sequence) -> ConfusionMatrix:
    _check_pair(actual, predicted, min_len=0)
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for a, p in zip(actual, predicted):
        for label in (a, p):
            if label not in index:
                raise LabelError(f"label {label!r} is not one of {list(classes)}")
        counts[index[a], index[p]] += 1
    return ConfusionMatrix(classes, counts)


# ---------------------------------------------------------------- regression


@dataclass(frozen=True)
class RegressionReport:
    r2: float
    mae: float
    mse: float

    def to_dict(self) -> dict:
        return {"r2": self.r2, "mae": self.mae, "mse": self.mse}


def _residuals(actual, predicted) -> np.ndarray:
    _check_pair(actual, predicted)
    return np.asarray(actual, dtype=np.float64) - np.asarray(predicted, dtype=np.float64)


def mean_absolute_error(actual: Sequence[float], predicted: Sequence[float]) -> float:
    return math.fsum(np.abs(_residuals(actual, predicted))) / len(actual)


def mean_squared_error(actual: Sequence[float], predicted: Sequence[float]) -> float:
    return math.fsum(_residuals(actual, predicted) ** 2) / len(actual)


def r2_score(actual: Sequence[float], predicted: Sequence[float]) -> float:
    res = _residuals(actual, predicted)
    a = np.asarray(actual, dtype=np.float64)
    ss_tot = math.fsum((a - math.fsum(a) / len(a)) ** 2)
    if ss_tot == 0:
        raise MetricError("R2 is undefined when every actual value is identical")
    return 1.0 - math.fsum(res**2) / ss_tot


def regression_report(actual: Sequence[float], predicted: Sequence[float]) -> RegressionReport:
    _check_pair(actual, predicted, min_len=2)
    return RegressionReport(
        r2=r2_score(actual, predicted),
        mae=mean_absolute_error(actual, predicted),
        mse=mean_squared_error(actual, predicted),
    )


# ---------------------------------------------------------------- distortion


def l2_normalize(v: Sequence[float]) -> np.ndarray:
    x = np.asarray(v, dtype=np.float64).ravel()
    if x.size == 0:
        raise ZeroVectorError("cannot normalize an empty vector")
    norm = math.sqrt(math.fsum(x * x))
    if not norm > NORM_EPS:
        raise ZeroVectorError(f"cannot normalize a vector of norm {norm:g}")
    return x / norm


def pair_distance(p, q) -> float:
    """Distance between two identity distributions after L2 normalization.

    Lies in [0, sqrt(2)] for non-negative inputs and ignores positive scaling
    of either argument.
    """
    p = np.asarray(getattr(p, "probs", p), dtype=np.float64)
    q = np.asarray(getattr(q, "probs", q), dtype=np.float64)
    if p.shape != q.shape:
        raise MetricError(f"distribution length mismatch: {p.shape} vs {q.shape}")
    diff = l2_normalize(q) - l2_normalize(p)
    return math.sqrt(math.fsum(diff * diff))


@dataclass(frozen=True)
class DistortionRow:
    mean_d: float
    n_pairs: int
    breaking: bool


@dataclass(frozen=True)
class FilterDistortionReport:
    rows: Mapping[str, DistortionRow]
    threshold: float = BREAKING_THRESHOLD

    @property
    def breaking(self) -> list[str]:
        return [fid for fid, row in self.rows.items() if row.breaking]

    def to_dict(self) -> dict:
        return {"threshold": self.threshold,
                "rows": {fid: vars(row) for fid, row in self.rows.items()},
                "breaking": self.breaking}

    @classmethod
    def from_dict(cls, d: Mapping) -> FilterDistortionReport:
        return cls({fid: DistortionRow(**row) for fid, row in d["rows"].items()}, d["threshold"])


def filter_distortion(pairs: Iterable[tuple], threshold: float = BREAKING_THRESHOLD,
                      filter_order: Sequence[str] | None = None) -> FilterDistortionReport:
    """Mean baseline-vs-filtered distance per filter.

    ``pairs`` holds ``(baseline_probs, filtered_probs, filter_id)``. Rows
    follow ``filter_order`` when given, otherwise first appearance.
    """
    dists: dict[str, list[float]] = {}
    for base, filt, fid in pairs:
        dists.setdefault(fid, []).append(pair_distance(base, filt))
    if not dists:
        raise MetricError("no baseline/filtered pairs to score")
    order = [f for f in filter_order if f in dists] if filter_order is not None else list(dists)
    order += [f for f in dists if f not in order]
    rows = {}
    for fid in order:
        mean_d = math.fsum(dists[fid]) / len(dists[fid])
        rows[fid] = DistortionRow(mean_d, len(dists[fid]), mean_d > threshold)
    return FilterDistortionReport(rows, threshold)


# ----------------------------------------------------------- age deviation


@dataclass(frozen=True)
class AgeDeviationRow:
    avg_reduction: float
    avg_increment: float
    net_deviation: float | None  # None when every prediction was exact
    n_reduced: int
    n_increased: int

    @property
    def n_total(self) -> int:
        return self.n_reduced + self.n_increased

    @property
    def defined(self) -> bool:
        return self.net_deviation is not None


@dataclass(frozen=True)
class AgeDeviationReport:
    rows: Mapping[str, AgeDeviationRow]

    def to_dict(self) -> dict:
        return {"rows": {fid: vars(row) for fid, row in self.rows.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> AgeDeviationReport:
        return cls({fid: AgeDeviationRow(**row) for fid, row in d["rows"].items()})


def age_deviation(samples: Iterable[tuple[float, float, str]],
                  filter_order: Sequence[str] | None = None) -> AgeDeviationReport:
    """Per-filter under/over-estimation of age.

    ``samples`` holds ``(actual, predicted, filter_id)``. The deviation is
    predicted minus actual, so reductions come out negative. Exact
    predictions count towards neither side nor the net average.
    """
    under: dict[str, list[float]] = {}
    over: dict[str, list[float]] = {}
    seen: list[str] = []
    for actual, predicted, fid in samples:
        if fid not in under:
            under[fid], over[fid] = [], []
            seen.append(fid)
        d = float(predicted) - float(actual)
        if d < 0:
            under[fid].append(d)
        elif d > 0:
            over[fid].append(d)
    if not seen:
        raise MetricError("no age samples")
    order = [f for f in filter_order if f in under] if filter_order is not None else []
    order += [f for f in seen if f not in order]
    rows = {}
    for fid in order:
        n1, n2 = len(under[fid]), len(over[fid])
        s1, s2 = math.fsum(under[fid]), math.fsum(over[fid])
        rows[fid] = AgeDeviationRow(
            avg_reduction=s1 / n1 if n1 else 0.0,
            avg_increment=s2 / n2 if n2 else 0.0,
            net_deviation=(s1 + s2) / (n1 + n2) if n1 + n2 else None,
            n_reduced=n1,
            n_increased=n2,
        )
    return AgeDeviationReport(rows)


# ------------------------------------------------------------ mispredictions

GENDER_DESCRIPTORS = ("male->female", "female->male")


@dataclass(frozen=True)
class MispredictionTable:
    task: str
    columns: tuple[str, ...]
    rows: Mapping[str, Mapping[str, int]]
    confusions: Mapping[str, ConfusionMatrix] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"task": self.task, "columns": list(self.columns),
                "rows": {fid: dict(r) for fid, r in self.rows.items()},
                "confusions": {fid: cm.to_dict() for fid, cm in self.confusions.items()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> MispredictionTable:
        return cls(d["task"], tuple(d["columns"]), {fid: dict(r) for fid, r in d["rows"].items()},
                   {fid: ConfusionMatrix.from_dict(cm) for fid, cm in d.get("confusions", {}).items()})


def mispredictions_from_confusion(cm: ConfusionMatrix, task: str) -> dict[str, int]:
    off = cm.counts.copy()
    np.fill_diagonal(off, 0)
    if task == "gender":
        i, j = cm.classes.index("male"), cm.classes.index("female")
        return {"male->female": int(off[i, j]), "female->male": int(off[j, i])}
    return {c: int(off[:, k].sum()) for k, c in enumerate(cm.classes)}


def misprediction_tables(per_filter_samples: Mapping[str, tuple[Sequence[str], Sequence[str]]],
                         task: str) -> MispredictionTable:
    """Per-filter wrong-prediction counts for gender or ethnicity.

    Gender rows count each error direction; ethnicity rows count errors by
    the class that was wrongly predicted.
    """
    if task == "gender":
        classes, columns = GENDERS, GENDER_DESCRIPTORS
    elif task == "ethnicity":
        classes, columns = ETHNICITIES, ETHNICITIES
    else:
        raise MetricError(f"unknown task {task!r}")
    rows, cms = {}, {}
    for fid, (actual, predicted) in per_filter_samples.items():
        cm = confusion(actual, predicted, classes)
        cms[fid] = cm
        rows[fid] = mispredictions_from_confusion(cm, task)
    return MispredictionTable(task, tuple(columns), rows, cms)
