"""Face-image manifests: loading, validation, train/test splits and baseline pairing.

A manifest is a JSON-lines file. Every line is one record tagged with
``"kind"``: ``subject``, ``image``, ``filter`` or ``meta``. Keys a record
does not know about are kept in its ``extra`` mapping so a manifest survives
a load/dump round trip unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

NO_FILTER = "none"
BASELINE_POSE = "neutral_front"

GENDERS = ("male", "female")
ETHNICITIES = ("east_asian", "west_asian", "black", "white")
SOURCE_APPS = ("FaceApp", "B612", "Snapchat", "other")
FILTER_CATEGORIES = ("beautification", "occlusion", "distortion")


class ManifestError(ValueError):
    """Raised when a manifest cannot be loaded.

    ``problems`` lists every violation found, not just the first one.
    """

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ManifestParseError(ManifestError):
    pass


class DanglingReferenceError(ManifestError):
    pass


class DuplicateIdError(ManifestError):
    pass


class SplitError(ValueError):
    pass


class PairingError(ValueError):
    pass


class MissingPayloadError(LookupError):
    def __init__(self, image_id: str, reason: str = "no such image"):
        self.image_id = image_id
        super().__init__(f"missing image payload for {image_id!r}: {reason}")


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    age: int
    gender: str
    ethnicity: str
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.age, int) or isinstance(self.age, bool) or self.age < 0:
            raise ValueError(f"subject {self.subject_id!r}: age must be a non-negative integer, got {self.age!r}")
        if self.gender not in GENDERS:
            raise ValueError(f"subject {self.subject_id!r}: gender {self.gender!r} not in {GENDERS}")
        if self.ethnicity not in ETHNICITIES:
            raise ValueError(f"subject {self.subject_id!r}: ethnicity {self.ethnicity!r} not in {ETHNICITIES}")


@dataclass(frozen=True)
class FilterSpec:
    filter_id: str
    display_name: str
    source_app: str = "other"
    category: str = "distortion"
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.filter_id == NO_FILTER:
            raise ValueError(f"filter_id {NO_FILTER!r} is reserved")
        if self.source_app not in SOURCE_APPS:
            raise ValueError(f"filter {self.filter_id!r}: source_app {self.source_app!r} not in {SOURCE_APPS}")
        if self.category not in FILTER_CATEGORIES:
            raise ValueError(f"filter {self.filter_id!r}: category {self.category!r} not in {FILTER_CATEGORIES}")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    subject_id: str
    pose: str
    filter_id: str = NO_FILTER
    uri: str = ""
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.filter_id != NO_FILTER and self.pose != BASELINE_POSE:
            raise ValueError(
                f"image {self.image_id!r}: filtered images must have pose {BASELINE_POSE!r}, got {self.pose!r}"
            )

    @property
    def is_filtered(self) -> bool:
        return self.filter_id != NO_FILTER


# The ten filters evaluated on the FRLL-Beautified set, in table order.
# Category assignments are a best guess; manifests may override them.
REFERENCE_FILTERS = (
    FilterSpec("haircut", "Haircut Filter FaceApp", "FaceApp", "distortion"),
    FilterSpec("child", "Child Filter FaceApp", "FaceApp", "distortion"),
    FilterSpec("gender_reverse", "Gender Reverse Filter FaceApp", "FaceApp", "distortion"),
    FilterSpec("hipster_beard", "Hipster Beard Style Filter FaceApp", "FaceApp", "occlusion"),
    FilterSpec("hair_color_blonde", "Hair Color Blonde Filter FaceApp", "FaceApp", "beautification"),
    FilterSpec("puppy", "Puppy Filter B612", "B612", "occlusion"),
    FilterSpec("so_sad", "So Sad Filter B612", "B612", "distortion"),
    FilterSpec("hipster_look", "Hipster Look Filter Snapchat", "Snapchat", "occlusion"),
    FilterSpec("sparkling_cartoon", "Sparkling Cartoon Filter Snapchat", "Snapchat", "distortion"),
    FilterSpec("body_mellow_glow", "Body Mellow Glow Filter Snapchat", "Snapchat", "beautification"),
)


@dataclass(frozen=True)
class DatasetManifest:
    subjects: tuple[SubjectRecord, ...]
    images: tuple[ImageRecord, ...]
    filters: tuple[FilterSpec, ...] = ()
    metadata: Mapping[str, str] = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        problems = _check_references(self.subjects, self.images, self.filters)
        if problems:
            kind, _ = problems[0]
            raise _ERROR_BY_KIND[kind]([msg for _, msg in problems])
        object.__setattr__(self, "_subject_index", {s.subject_id: s for s in self.subjects})
        object.__setattr__(self, "_image_index", {im.image_id: im for im in self.images})
        object.__setattr__(self, "_filter_index", {f.filter_id: f for f in self.filters})

    @property
    def identity_classes(self) -> tuple[str, ...]:
        """Subject ids in manifest order; position = identity class index."""
        return tuple(s.subject_id for s in self.subjects)

    @property
    def num_identities(self) -> int:
        return len(self.subjects)

    def subject(self, subject_id: str) -> SubjectRecord:
        return self._subject_index[subject_id]

    def image(self, image_id: str) -> ImageRecord:
        try:
            return self._image_index[image_id]
        except KeyError:
            raise MissingPayloadError(image_id) from None

    def filter(self, filter_id: str) -> FilterSpec:
        return self._filter_index[filter_id]

    def filter_ids(self) -> list[str]:
        return [f.filter_id for f in self.filters]

    def filter_labels(self) -> dict[str, str]:
        return {f.filter_id: f.display_name for f in self.filters}

    def resolve_uri(self, image_id: str) -> Path:
        uri = self.image(image_id).uri
        if uri.startswith("file://"):
            uri = uri[len("file://"):]
        path = Path(uri)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def load_image(self, image_id: str) -> np.ndarray:
        """Decode an image payload to an H x W x 3 float32 array in [0, 1]."""
        from PIL import Image, UnidentifiedImageError

        path = self.resolve_uri(image_id)
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32)
        except FileNotFoundError:
            raise MissingPayloadError(image_id, f"{path} does not exist") from None
        except (UnidentifiedImageError, OSError) as exc:
            raise MissingPayloadError(image_id, f"cannot decode {path}: {exc}") from None
        return arr / 255.0


_ERROR_BY_KIND = {
    "dangling": DanglingReferenceError,
    "duplicate": DuplicateIdError,
    "parse": ManifestParseError,
}


def _check_references(subjects, images, filters) -> list[tuple[str, str]]:
    problems = []
    for label, records, key in (
        ("subject_id", subjects, "subject_id"),
        ("image_id", images, "image_id"),
        ("filter_id", filters, "filter_id"),
    ):
        seen = set()
        for rec in records:
            rid = getattr(rec, key)
            if rid in seen:
                problems.append(("duplicate", f"duplicate {label} {rid!r}"))
            seen.add(rid)
    subject_ids = {s.subject_id for s in subjects}
    filter_ids = {f.filter_id for f in filters}
    for im in images:
        if im.subject_id not in subject_ids:
            problems.append(("dangling", f"image {im.image_id!r} references unknown subject_id {im.subject_id!r}"))
        if im.filter_id != NO_FILTER and im.filter_id not in filter_ids:
            problems.append(("dangling", f"image {im.image_id!r} references unknown filter_id {im.filter_id!r}"))
    return problems


_SUBJECT_KEYS = ("subject_id", "age", "gender", "ethnicity")
_IMAGE_KEYS = ("image_id", "subject_id", "pose", "filter_id", "uri")
_FILTER_KEYS = ("filter_id", "display_name", "source_app", "category")
_REQUIRED = {
    "subject": _SUBJECT_KEYS,
    "image": ("image_id", "subject_id", "pose"),
    "filter": ("filter_id", "display_name"),
}


def _split_known(obj: dict, known: Iterable[str]) -> tuple[dict, dict]:
    known = set(known) | {"kind"}
    return ({k: v for k, v in obj.items() if k in known and k != "kind"},
            {k: v for k, v in obj.items() if k not in known})


def parse_manifest(lines: Iterable[str], root: Path | None = None) -> DatasetManifest:
    subjects, images, filters = [], [], []
    metadata: dict[str, str] = {}
    problems: list[tuple[str, str]] = []

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(("parse", f"line {lineno}: malformed JSON ({exc.msg}): {line[:80]}"))
            continue
        if not isinstance(obj, dict):
            problems.append(("parse", f"line {lineno}: expected a JSON object"))
            continue
        kind = obj.get("kind")
        if kind == "meta":
            metadata.update({k: str(v) for k, v in obj.items() if k != "kind"})
            continue
        if kind not in _REQUIRED:
            problems.append(("parse", f"line {lineno}: unknown record kind {kind!r}"))
            continue
        missing = [k for k in _REQUIRED[kind] if k not in obj]
        if missing:
            problems.append(("parse", f"line {lineno}: {kind} record missing {', '.join(missing)}"))
            continue
        try:
            if kind == "subject":
                fields, extra = _split_known(obj, _SUBJECT_KEYS)
                subjects.append(SubjectRecord(**fields, extra=extra))
            elif kind == "image":
                fields, extra = _split_known(obj, _IMAGE_KEYS)
                if fields.get("filter_id") is None:
                    fields["filter_id"] = NO_FILTER
                images.append(ImageRecord(**fields, extra=extra))
            else:
                fields, extra = _split_known(obj, _FILTER_KEYS)
                filters.append(FilterSpec(**fields, extra=extra))
        except (TypeError, ValueError) as exc:
            problems.append(("parse", f"line {lineno}: {exc}"))

    problems += _check_references(subjects, images, filters)
    if problems:
        kind, _ = problems[0]
        raise _ERROR_BY_KIND[kind]([msg for _, msg in problems])
    return DatasetManifest(tuple(subjects), tuple(images), tuple(filters), metadata, root)


def load_manifest(uri: str | Path) -> DatasetManifest:
    """Load and validate a JSON-lines manifest.

    Relative image URIs are resolved against the manifest's directory.
    """
    path = Path(uri)
    with path.open("r", encoding="utf-8") as fh:
        return parse_manifest(fh, root=path.resolve().parent)


def _record(kind: str, rec, keys) -> dict:
    out = {"kind": kind}
    out.update({k: getattr(rec, k) for k in keys})
    out.update(rec.extra)
    return out


def dump_manifest(manifest: DatasetManifest) -> str:
    lines = []
    if manifest.metadata:
        lines.append(json.dumps({"kind": "meta", **manifest.metadata}, sort_keys=True))
    lines += [json.dumps(_record("filter", f, _FILTER_KEYS)) for f in manifest.filters]
    lines += [json.dumps(_record("subject", s, _SUBJECT_KEYS)) for s in manifest.subjects]
    lines += [json.dumps(_record("image", im, _IMAGE_KEYS)) for im in manifest.images]
    return "".join(line + "\n" for line in lines)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(dump_manifest(manifest), encoding="utf-8")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    stratify_by_subject: bool = True

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class Split:
    train: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    fraction: float

    def to_json(self) -> str:
        return json.dumps({"train": list(self.train), "test": list(self.test),
                           "seed": self.seed, "fraction": self.fraction})

    @classmethod
    def from_json(cls, text: str) -> Split:
        obj = json.loads(text)
        return cls(tuple(obj["train"]), tuple(obj["test"]), int(obj["seed"]), float(obj["fraction"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Split:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_train_test(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()) -> Split:
    """Partition image ids into train and test.

    With stratification each subject's images are shuffled and cut
    separately, so every identity lands in both halves. Output lists keep
    manifest order.
    """
    rng = np.random.default_rng(spec.seed)
    order = {im.image_id: i for i, im in enumerate(manifest.images)}
    train: set[str] = set()

    if spec.stratify_by_subject:
        by_subject: dict[str, list[str]] = {s.subject_id: [] for s in manifest.subjects}
        for im in manifest.images:
            by_subject[im.subject_id].append(im.image_id)
        lonely = [sid for sid, ids in by_subject.items() if len(ids) < 2]
        if lonely:
            raise SplitError(
                f"stratified split needs at least 2 images per subject; too few for {', '.join(lonely)}"
            )
        for ids in by_subject.values():
            n_train = min(max(_round_half_up(spec.train_fraction * len(ids)), 1), len(ids) - 1)
            perm = rng.permutation(len(ids))
            train.update(ids[i] for i in perm[:n_train])
    else:
        ids = [im.image_id for im in manifest.images]
        n_train = _round_half_up(spec.train_fraction * len(ids))
        perm = rng.permutation(len(ids))
        train.update(ids[i] for i in perm[:n_train])

    train_ids = tuple(sorted(train, key=order.__getitem__))
    test_ids = tuple(im.image_id for im in manifest.images if im.image_id not in train)
    return Split(train_ids, test_ids, spec.seed, spec.train_fraction)


def pair_baseline_filtered(manifest: DatasetManifest) -> list[tuple[str, str, str]]:
    """Match every filtered image with its subject's unfiltered neutral-front image.

    Returns ``(baseline_image_id, filtered_image_id, filter_id)`` tuples in
    manifest image order.
    """
    baselines: dict[str, list[str]] = {s.subject_id: [] for s in manifest.subjects}
    for im in manifest.images:
        if not im.is_filtered and im.pose == BASELINE_POSE:
            baselines[im.subject_id].append(im.image_id)

    problems = []
    for sid, found in baselines.items():
        if not found:
            problems.append(f"subject {sid!r} has no unfiltered {BASELINE_POSE} baseline")
        elif len(found) > 1:
            problems.append(f"subject {sid!r} has {len(found)} {BASELINE_POSE} baselines: {found}")
    if problems:
        raise PairingError("; ".join(problems))
    pairs = [(baselines[im.subject_id][0], im.image_id, im.filter_id)
             for im in manifest.images if im.is_filtered]
    return pairs
