"""Prediction dumps and the filter-impact analysis computed from them.

A dump is JSON lines, one record per scored image. Analysis only needs the
dump and the manifest, so any recognizer that writes conforming records can
be evaluated the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import metrics as M
from .dataset import ETHNICITIES, GENDERS, DatasetManifest, pair_baseline_filtered

PROB_TOL = 1e-5

ANALYSIS_FILES = {
    "identity": "identity_classification.json",
    "gender": "gender_classification.json",
    "ethnicity": "ethnicity_classification.json",
    "age": "age_regression.json",
    "distortion": "distortion.json",
    "age_deviation": "age_deviation.json",
    "gender_mispredictions": "gender_mispredictions.json",
    "ethnicity_mispredictions": "ethnicity_mispredictions.json",
}
META_FILE = "analysis.json"


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    image_id: str
    subject_id: str
    filter_id: str
    identity_probs: np.ndarray
    predicted_identity: str
    age_pred: float
    gender_probs: np.ndarray
    ethnicity_probs: np.ndarray

    @property
    def gender(self) -> str:
        return GENDERS[int(np.argmax(self.gender_probs))]

    @property
    def ethnicity(self) -> str:
        return ETHNICITIES[int(np.argmax(self.ethnicity_probs))]

    def to_json(self) -> str:
        return json.dumps({
            "image_id": self.image_id,
            "subject_id": self.subject_id,
            "filter_id": self.filter_id,
            "identity_probs": [float(x) for x in self.identity_probs],
            "predicted_identity": self.predicted_identity,
            "age_pred": float(self.age_pred),
            "gender_probs": [float(x) for x in self.gender_probs],
            "ethnicity_probs": [float(x) for x in self.ethnicity_probs],
        })


@dataclass(frozen=True)
class ErrorRecord:
    image_id: str
    error: str

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "error": self.error})


def _check_distribution(name: str, image_id: str, probs: np.ndarray, length: int | None = None) -> None:
    if length is not None and probs.shape != (length,):
        raise AnalysisError(f"{image_id}: {name} has length {probs.size}, expected {length}")
    if probs.size == 0 or np.any(probs < 0) or abs(probs.sum() - 1.0) > PROB_TOL:
        raise AnalysisError(f"{image_id}: {name} is not a probability distribution")


def parse_record(obj: Mapping) -> PredictionRecord | ErrorRecord:
    if "error" in obj:
        return ErrorRecord(obj["image_id"], obj["error"])
    rec = PredictionRecord(
        image_id=obj["image_id"],
        subject_id=obj["subject_id"],
        filter_id=obj.get("filter_id") or "none",
        identity_probs=np.asarray(obj["identity_probs"], dtype=np.float64),
        predicted_identity=str(obj["predicted_identity"]),
        age_pred=float(obj["age_pred"]),
        gender_probs=np.asarray(obj["gender_probs"], dtype=np.float64),
        ethnicity_probs=np.asarray(obj["ethnicity_probs"], dtype=np.float64),
    )
    _check_distribution("identity_probs", rec.image_id, rec.identity_probs)
    _check_distribution("gender_probs", rec.image_id, rec.gender_probs, len(GENDERS))
    _check_distribution("ethnicity_probs", rec.image_id, rec.ethnicity_probs, len(ETHNICITIES))
    return rec


def read_dump(path: str | Path) -> list[PredictionRecord | ErrorRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(parse_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise AnalysisError(f"{path}:{lineno}: malformed prediction record ({exc})") from None
    return out


def write_dump(records: Iterable[PredictionRecord | ErrorRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


@dataclass
class Analysis:
    identity: M.ClassificationReport
    gender: M.ClassificationReport
    ethnicity: M.ClassificationReport
    age: M.RegressionReport | None
    distortion: M.FilterDistortionReport | None
    age_deviation: M.AgeDeviationReport | None
    gender_mispredictions: M.MispredictionTable
    ethnicity_mispredictions: M.MispredictionTable
    filter_labels: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    identity_test: M.ClassificationReport | None = None

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for key, name in ANALYSIS_FILES.items():
            rep = getattr(self, key)
            payload = rep.to_dict() if rep is not None else {"undefined": True}
            written.append(_write_json(out / name, payload))
        if self.identity_test is not None:
            written.append(_write_json(out / "identity_classification_test.json", self.identity_test.to_dict()))
        written.append(_write_json(out / META_FILE, {
            "filters": list(self.filter_labels), "filter_labels": self.filter_labels,
            "threshold": self.distortion.threshold if self.distortion else M.BREAKING_THRESHOLD,
            "notes": self.notes,
        }))
        return written


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def analyze(records: Iterable[PredictionRecord | ErrorRecord], manifest: DatasetManifest,
            threshold: float = M.BREAKING_THRESHOLD, test_ids: Iterable[str] | None = None) -> Analysis:
    """Score a prediction dump against manifest ground truth.

    Classification and regression reports cover every record. Filter-wise
    reports cover filtered records; each needs its subject's baseline
    record in the dump.
    """
    records = list(records)
    errors = [r.image_id for r in records if isinstance(r, ErrorRecord)]
    if errors:
        raise AnalysisError(f"dump holds {len(errors)} failed predictions, e.g. {errors[0]!r}")
    if not records:
        raise AnalysisError("empty prediction dump")
    classes = manifest.identity_classes
    by_id: dict[str, PredictionRecord] = {}
    for r in records:
        im = manifest.image(r.image_id)
        if im.subject_id != r.subject_id or im.filter_id != r.filter_id:
            raise AnalysisError(f"{r.image_id}: subject/filter disagree with the manifest")
        if r.identity_probs.size != len(classes):
            raise AnalysisError(f"{r.image_id}: {r.identity_probs.size} identity probabilities for {len(classes)} classes")
        if r.predicted_identity != classes[int(np.argmax(r.identity_probs))]:
            raise AnalysisError(f"{r.image_id}: predicted_identity is not the argmax of identity_probs")
        by_id[r.image_id] = r

    truth = {r.image_id: manifest.subject(r.subject_id) for r in records}
    identity = M.classification_report([r.subject_id for r in records], [r.predicted_identity for r in records])
    gender = M.classification_report([truth[r.image_id].gender for r in records], [r.gender for r in records],
                                     classes=GENDERS)
    ethnicity = M.classification_report([truth[r.image_id].ethnicity for r in records],
                                        [r.ethnicity for r in records], classes=ETHNICITIES)
    notes = []
    try:
        age = M.regression_report([truth[r.image_id].age for r in records], [r.age_pred for r in records])
    except M.MetricError as exc:
        age = None
        notes.append(f"age regression report omitted: {exc}")

    identity_test = None
    if test_ids is not None:
        test = [by_id[i] for i in test_ids if i in by_id]
        if test:
            identity_test = M.classification_report([r.subject_id for r in test],
                                                    [r.predicted_identity for r in test])

    filtered = [r for r in records if r.filter_id != "none"]
    filter_order = [f for f in manifest.filter_ids() if any(r.filter_id == f for r in filtered)]
    labels = {f: manifest.filter(f).display_name for f in filter_order}
    distortion = age_dev = None
    per_gender: dict[str, tuple[list, list]] = {f: ([], []) for f in filter_order}
    per_eth: dict[str, tuple[list, list]] = {f: ([], []) for f in filter_order}
    if filtered:
        baseline_of = {}
        for base, filt, _ in pair_baseline_filtered(manifest):
            baseline_of[filt] = base
        pairs, ages = [], []
        for r in filtered:
            base = by_id.get(baseline_of[r.image_id])
            if base is None:
                raise AnalysisError(
                    f"subject {r.subject_id!r} has no baseline prediction ({baseline_of[r.image_id]!r}) "
                    f"for filtered image {r.image_id!r}"
                )
            s = truth[r.image_id]
            pairs.append((base.identity_probs, r.identity_probs, r.filter_id))
            ages.append((s.age, r.age_pred, r.filter_id))
            per_gender[r.filter_id][0].append(s.gender)
            per_gender[r.filter_id][1].append(r.gender)
            per_eth[r.filter_id][0].append(s.ethnicity)
            per_eth[r.filter_id][1].append(r.ethnicity)
        distortion = M.filter_distortion(pairs, threshold, filter_order)
        age_dev = M.age_deviation(ages, filter_order)
    else:
        notes.append("no filtered images in dump; filter-wise reports are empty")

    return Analysis(
        identity=identity, gender=gender, ethnicity=ethnicity, age=age,
        distortion=distortion, age_deviation=age_dev,
        gender_mispredictions=M.misprediction_tables(per_gender, "gender"),
        ethnicity_mispredictions=M.misprediction_tables(per_eth, "ethnicity"),
        filter_labels=labels, notes=notes, identity_test=identity_test,
    )


def load_analysis(analysis_dir: str | Path) -> dict:
    """Read the JSON artifacts written by :meth:`Analysis.write`.

    Raises :class:`FileNotFoundError` listing every missing file.
    """
    root = Path(analysis_dir)
    needed = {"distortion": ANALYSIS_FILES["distortion"], "age_deviation": ANALYSIS_FILES["age_deviation"],
              "gender_mispredictions": ANALYSIS_FILES["gender_mispredictions"],
              "ethnicity_mispredictions": ANALYSIS_FILES["ethnicity_mispredictions"], "meta": META_FILE}
    missing = [name for name in needed.values() if not (root / name).is_file()]
    if missing:
        raise FileNotFoundError(f"analysis directory {root} is missing: {', '.join(missing)}")
    raw = {k: json.loads((root / name).read_text(encoding="utf-8")) for k, name in needed.items()}
    for key in ("distortion", "age_deviation"):
        if raw[key].get("undefined"):
            raise AnalysisError(f"{needed[key]} is empty (no filtered predictions were analyzed)")
    return {
        "distortion": M.FilterDistortionReport.from_dict(raw["distortion"]),
        "age_deviation": M.AgeDeviationReport.from_dict(raw["age_deviation"]),
        "gender_mispredictions": M.MispredictionTable.from_dict(raw["gender_mispredictions"]),
        "ethnicity_mispredictions": M.MispredictionTable.from_dict(raw["ethnicity_mispredictions"]),
        "filter_labels": raw["meta"]["filter_labels"],
    }
