"""Deterministic fixture generators.

``write_reference_fixture`` builds a 102-subject manifest and a prediction
dump engineered so the filter analysis reproduces the reference filter
tables (distortion, age deviation, gender and ethnicity mispredictions).
``write_synthetic_dataset`` renders a tiny image dataset that a compact
network can memorize, for smoke-testing the training pipeline end to end.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .dataset import (BASELINE_POSE, ETHNICITIES, GENDERS, NO_FILTER, REFERENCE_FILTERS, DatasetManifest,
                      FilterSpec, ImageRecord, SubjectRecord, save_manifest)

# Mean baseline-vs-filtered distance per filter.
REFERENCE_DISTORTION = {
    "haircut": 0.458548,
    "child": 0.507977,
    "gender_reverse": 0.580298,
    "hipster_beard": 0.332914,
    "hair_color_blonde": 0.222967,
    "puppy": 0.494714,
    "so_sad": 0.191711,
    "hipster_look": 1.179643,
    "sparkling_cartoon": 0.615396,
    "body_mellow_glow": 0.427381,
}

# (average reduction, average increment, net deviation) in years.
REFERENCE_AGE_DEVIATION = {
    "haircut": (-2.062500, 1.478261, -0.292120),
    "child": (-3.371795, 1.888889, -0.741453),
    "gender_reverse": (-3.492754, 2.000000, -0.746377),
    "hipster_beard": (-2.530303, 1.812500, -0.358902),
    "hair_color_blonde": (-2.369863, 1.636364, -0.366750),
    "puppy": (-3.200000, 1.800000, -0.700000),
    "so_sad": (-2.142857, 1.733333, -0.204762),
    "hipster_look": (-5.774194, 2.166667, -1.803763),
    "sparkling_cartoon": (-3.208333, 3.153846, -0.027244),
    "body_mellow_glow": (-2.716049, 1.200000, -0.758025),
}

# (males predicted female, females predicted male).
REFERENCE_GENDER_ERRORS = {
    "haircut": (1, 0),
    "child": (4, 0),
    "gender_reverse": (1, 3),
    "hipster_beard": (0, 0),
    "hair_color_blonde": (1, 0),
    "puppy": (1, 1),
    "so_sad": (0, 0),
    "hipster_look": (5, 2),
    "sparkling_cartoon": (1, 0),
    "body_mellow_glow": (1, 0),
}

# Wrong ethnicity predictions, counted by the predicted class.
REFERENCE_ETHNICITY_ERRORS = {
    fid: dict(zip(("black", "east_asian", "west_asian", "white"), row))
    for fid, row in {
        "haircut": (0, 3, 6, 6),
        "child": (0, 10, 8, 3),
        "gender_reverse": (0, 0, 2, 5),
        "hipster_beard": (0, 8, 6, 5),
        "hair_color_blonde": (0, 3, 3, 6),
        "puppy": (0, 15, 7, 2),
        "so_sad": (0, 6, 7, 1),
        "hipster_look": (0, 3, 0, 29),
        "sparkling_cartoon": (0, 5, 2, 7),
        "body_mellow_glow": (0, 3, 4, 6),
    }.items()
}

REFERENCE_POSES = (
    BASELINE_POSE, "neutral_left", "neutral_right", "smiling_front", "smiling_left",
    "smiling_right", "neutral_up", "neutral_down", "smiling_up", "smiling_down",
)

# Instances per side (reduced, increased) in the age fixture; equal sides make
# the net deviation the midpoint of the two averages, as in the reference table.
_AGE_SIDE_COUNTS = {"haircut": 16, "child": 39, "gender_reverse": 46, "hipster_beard": 33,
                    "hair_color_blonde": 24, "puppy": 25, "so_sad": 21, "hipster_look": 31,
                    "sparkling_cartoon": 24, "body_mellow_glow": 27}


def _centered(rng: np.random.Generator, n: int) -> np.ndarray:
    """n values in [-1, 1] with mean exactly zero (up to rounding)."""
    if n == 1:
        return np.zeros(1)
    z = rng.uniform(-1, 1, n)
    z -= z.mean()
    return z / np.abs(z).max()


def _two_point_probs(n: int, keep: int, other: int, d: float) -> list[float]:
    """Distribution whose normalized distance from one-hot ``keep`` equals d."""
    theta = 2 * math.asin(d / 2)
    c, s = math.cos(theta), math.sin(theta)
    probs = [0.0] * n
    probs[keep] = c / (c + s)
    probs[other] = s / (c + s)
    return probs


def reference_manifest(n_subjects: int = 102, seed: int = 0) -> DatasetManifest:
    rng = np.random.default_rng(seed)
    genders = [GENDERS[i % 2] for i in range(n_subjects)]
    eth_pool = (["white"] * 40 + ["east_asian"] * 22 + ["west_asian"] * 22 + ["black"] * 18)
    eth = [eth_pool[i % len(eth_pool)] for i in rng.permutation(n_subjects)]
    subjects = tuple(
        SubjectRecord(f"s{i:03d}", int(rng.integers(19, 61)), genders[i], eth[i]) for i in range(n_subjects)
    )
    images = []
    for s in subjects:
        for pose in REFERENCE_POSES:
            images.append(ImageRecord(f"{s.subject_id}_{pose}", s.subject_id, pose, NO_FILTER,
                                      f"images/{s.subject_id}/{pose}.jpg"))
        for f in REFERENCE_FILTERS:
            images.append(ImageRecord(f"{s.subject_id}_{f.filter_id}", s.subject_id, BASELINE_POSE, f.filter_id,
                                      f"images/{s.subject_id}/{f.filter_id}.jpg"))
    return DatasetManifest(subjects, tuple(images), REFERENCE_FILTERS,
                           {"name": "reference-fixture", "generator": "ffsense.fixtures", "seed": str(seed)})


def reference_predictions(manifest: DatasetManifest, seed: int = 0) -> list[dict]:
    """Prediction records (one per manifest image, manifest order)."""
    rng = np.random.default_rng(seed + 1)
    classes = manifest.identity_classes
    n = len(classes)
    cls_index = {c: i for i, c in enumerate(classes)}
    subjects = manifest.subjects

    # Per-filter plans keyed by subject id.
    plan: dict[str, dict[str, dict]] = {}
    for f in manifest.filters:
        fid = f.filter_id
        per = {s.subject_id: {} for s in subjects}
        order = [subjects[i].subject_id for i in rng.permutation(n)]

        target = REFERENCE_DISTORTION[fid]
        spread = 0.5 * min(target, math.sqrt(2) - target)
        dists = target + spread * _centered(rng, n)
        for sid, d in zip(order, dists):
            per[sid]["d"] = float(d)

        red, inc, _ = REFERENCE_AGE_DEVIATION[fid]
        k = _AGE_SIDE_COUNTS[fid]
        devs = np.concatenate([red * (1 + 0.5 * _centered(rng, k)), inc * (1 + 0.5 * _centered(rng, k))])
        for sid, dev in zip(rng.permutation(order), np.concatenate([devs, np.zeros(n - 2 * k)])):
            per[sid]["age_dev"] = float(dev)

        m2f, f2m = REFERENCE_GENDER_ERRORS[fid]
        males = [s.subject_id for s in subjects if s.gender == "male"]
        females = [s.subject_id for s in subjects if s.gender == "female"]
        for sid in rng.choice(males, m2f, replace=False):
            per[sid]["gender"] = "female"
        for sid in rng.choice(females, f2m, replace=False):
            per[sid]["gender"] = "male"

        used: set[str] = set()
        for cls, count in REFERENCE_ETHNICITY_ERRORS[fid].items():
            pool = [s.subject_id for s in subjects if s.ethnicity != cls and s.subject_id not in used]
            for sid in rng.choice(pool, count, replace=False):
                per[sid]["ethnicity"] = cls
                used.add(sid)
        plan[fid] = per

    records = []
    for im in manifest.images:
        subj = manifest.subject(im.subject_id)
        k = cls_index[subj.subject_id]
        if im.is_filtered:
            p = plan[im.filter_id][subj.subject_id]
            other = (k + 1 + int(rng.integers(n - 1))) % n
            ident = _two_point_probs(n, k, other, p["d"])
            age = subj.age + p["age_dev"]
            gender = p.get("gender", subj.gender)
            ethnicity = p.get("ethnicity", subj.ethnicity)
        else:
            if im.pose == BASELINE_POSE:
                ident = [0.0] * n
                ident[k] = 1.0
            else:
                ident = [0.0] * n
                ident[k] = 0.9
                ident[(k + 1) % n] = 0.1
            age = float(subj.age)
            gender, ethnicity = subj.gender, subj.ethnicity
        records.append({
            "image_id": im.image_id,
            "subject_id": im.subject_id,
            "filter_id": im.filter_id,
            "identity_probs": ident,
            "predicted_identity": classes[int(np.argmax(ident))],
            "age_pred": age,
            "gender_probs": [0.9 if g == gender else 0.1 for g in GENDERS],
            "ethnicity_probs": [0.7 if e == ethnicity else 0.1 for e in ETHNICITIES],
        })
    return records


def write_reference_fixture(out_dir: str | Path, seed: int = 0) -> tuple[Path, Path]:
    """Write ``manifest.jsonl`` and ``predictions.jsonl`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = reference_manifest(seed=seed)
    save_manifest(manifest, out / "manifest.jsonl")
    dump = out / "predictions.jsonl"
    with dump.open("w", encoding="utf-8") as fh:
        for rec in reference_predictions(manifest, seed):
            fh.write(json.dumps(rec) + "\n")
    return out / "manifest.jsonl", dump


# ------------------------------------------------------- synthetic images

SYNTHETIC_FILTERS = (
    FilterSpec("warm_glow", "Warm Glow", "other", "beautification"),
    FilterSpec("dark_glasses", "Dark Glasses", "other", "occlusion"),
    FilterSpec("squeeze", "Squeeze", "other", "distortion"),
    FilterSpec("soft_focus", "Soft Focus", "other", "beautification"),
)


def subject_pattern(index: int, size: int = 64) -> np.ndarray:
    """Distinct solid-colour stripe pattern for subject ``index``, H x W x 3 in [0, 1]."""
    rng = np.random.default_rng(1000 + index)
    base = rng.uniform(0.15, 0.85, 3)
    accent = 1.0 - base
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = math.pi * index / 8
    period = 2 + index % 4
    wave = np.sin(2 * math.pi * period * (xx * math.cos(angle) + yy * math.sin(angle))) > 0
    img = np.where(wave[..., None], base, accent)
    return img.astype(np.float32)


def _pose_variant(img: np.ndarray, pose_idx: int, rng: np.random.Generator) -> np.ndarray:
    out = np.roll(img, shift=(pose_idx * 2, -pose_idx * 3), axis=(0, 1))
    return np.clip(out + rng.normal(0, 0.02, out.shape), 0, 1)


def _apply_filter(img: np.ndarray, filter_id: str) -> np.ndarray:
    h, w, _ = img.shape
    out = img.copy()
    if filter_id == "warm_glow":
        out = np.clip(out * np.array([1.15, 1.0, 0.85]) + 0.05, 0, 1)
    elif filter_id == "dark_glasses":
        out[h // 4: h // 2, w // 8: 7 * w // 8] = 0.05
    elif filter_id == "squeeze":
        cols = (np.linspace(0, 1, w) ** 1.6 * (w - 1)).astype(int)
        out = out[:, cols]
    elif filter_id == "soft_focus":
        out = (out + np.roll(out, 1, 0) + np.roll(out, -1, 0) + np.roll(out, 1, 1) + np.roll(out, -1, 1)) / 5
    return np.clip(out, 0, 1)


def _save_png(arr: np.ndarray, path: Path) -> None:
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8)).save(path)


def write_synthetic_dataset(out_dir: str | Path, n_subjects: int = 8, n_poses: int = 4,
                            filters: tuple[FilterSpec, ...] = SYNTHETIC_FILTERS, size: int = 64,
                            seed: int = 0) -> Path:
    """Render a small manifest of patterned "faces" and return the manifest path.

    Each subject gets ``n_poses`` unfiltered poses (the first is the
    neutral-front baseline) plus one image per filter.
    """
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    subjects, images = [], []
    for i in range(n_subjects):
        sid = f"id{i:02d}"
        subjects.append(SubjectRecord(sid, int(rng.integers(18, 70)), GENDERS[i % 2],
                                      ETHNICITIES[(i // 2) % len(ETHNICITIES)]))
        base = subject_pattern(i, size)
        for p in range(n_poses):
            pose = BASELINE_POSE if p == 0 else f"pose{p}"
            img = base if p == 0 else _pose_variant(base, p, rng)
            rel = f"images/{sid}/{pose}.png"
            _save_png(img, out / rel)
            images.append(ImageRecord(f"{sid}_{pose}", sid, pose, NO_FILTER, rel))
        for f in filters:
            rel = f"images/{sid}/{f.filter_id}.png"
            _save_png(_apply_filter(base, f.filter_id), out / rel)
            images.append(ImageRecord(f"{sid}_{f.filter_id}", sid, BASELINE_POSE, f.filter_id, rel))
    manifest = DatasetManifest(tuple(subjects), tuple(images), tuple(filters), {"name": "synthetic"})
    save_manifest(manifest, out / "manifest.jsonl")
    return out / "manifest.jsonl"


def write_copies_dataset(out_dir: str | Path, n_subjects: int = 8, copies: int = 8, size: int = 64) -> Path:
    """``n_subjects`` distinct patterns, each saved ``copies`` times unchanged."""
    out = Path(out_dir)
    subjects, images = [], []
    for i in range(n_subjects):
        sid = f"id{i:02d}"
        subjects.append(SubjectRecord(sid, 30, GENDERS[i % 2], ETHNICITIES[i % len(ETHNICITIES)]))
        img = subject_pattern(i, size)
        for c in range(copies):
            rel = f"images/{sid}/copy{c}.png"
            _save_png(img, out / rel)
            pose = BASELINE_POSE if c == 0 else f"copy{c}"
            images.append(ImageRecord(f"{sid}_c{c}", sid, pose, NO_FILTER, rel))
    manifest = DatasetManifest(tuple(subjects), tuple(images), (), {"name": "copies"})
    save_manifest(manifest, out / "manifest.jsonl")
    return out / "manifest.jsonl"


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(prog="python -m ffsense.fixtures", description=__doc__.splitlines()[0])
    parser.add_argument("kind", choices=("reference", "synthetic"))
    parser.add_argument("out", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if args.kind == "reference":
        for path in write_reference_fixture(args.out, args.seed):
            print(path)
    else:
        print(write_synthetic_dataset(args.out, seed=args.seed))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
