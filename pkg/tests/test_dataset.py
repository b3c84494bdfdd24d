import json

import numpy as np
import pytest

from ffsense import dataset as D
from ffsense.fixtures import reference_manifest


def _lines(*records):
    return [json.dumps(r) for r in records]


def _small_manifest_lines(subject_for_second_image="s1"):
    return _lines(
        {"kind": "filter", "filter_id": "f1", "display_name": "F One", "source_app": "other", "category": "distortion"},
        {"kind": "subject", "subject_id": "s1", "age": 30, "gender": "male", "ethnicity": "white"},
        {"kind": "subject", "subject_id": "s2", "age": 41, "gender": "female", "ethnicity": "black"},
        {"kind": "image", "image_id": "a", "subject_id": "s1", "pose": "neutral_front", "filter_id": None, "uri": "a.png"},
        {"kind": "image", "image_id": "b", "subject_id": subject_for_second_image, "pose": "neutral_front",
         "filter_id": "f1", "uri": "b.png"},
        {"kind": "image", "image_id": "c", "subject_id": "s2", "pose": "neutral_front", "filter_id": None, "uri": "c.png"},
        {"kind": "image", "image_id": "d", "subject_id": "s2", "pose": "neutral_front", "filter_id": "f1", "uri": "d.png"},
    )


def test_small_manifest_counts():
    m = D.parse_manifest(_small_manifest_lines())
    assert (len(m.subjects), len(m.images), len(m.filters)) == (2, 4, 1)
    assert m.identity_classes == ("s1", "s2")
    assert m.image("a").filter_id == D.NO_FILTER


def test_dangling_subject_is_named():
    with pytest.raises(D.DanglingReferenceError, match="s99"):
        D.parse_manifest(_small_manifest_lines("s99"))


def test_duplicate_ids_rejected():
    lines = _small_manifest_lines() + _lines(
        {"kind": "subject", "subject_id": "s1", "age": 3, "gender": "male", "ethnicity": "white"})
    with pytest.raises(D.DuplicateIdError, match="s1"):
        D.parse_manifest(lines)


def test_all_problems_reported_with_line_numbers():
    lines = ["{not json", json.dumps({"kind": "subject", "subject_id": "x"}), json.dumps({"kind": "widget"})]
    with pytest.raises(D.ManifestParseError) as info:
        D.parse_manifest(lines)
    problems = info.value.problems
    assert len(problems) == 3
    assert [p.split(":")[0] for p in problems] == ["line 1", "line 2", "line 3"]


@pytest.mark.parametrize("bad", [
    {"kind": "subject", "subject_id": "z", "age": -1, "gender": "male", "ethnicity": "white"},
    {"kind": "subject", "subject_id": "z", "age": 20, "gender": "robot", "ethnicity": "white"},
    {"kind": "subject", "subject_id": "z", "age": 20, "gender": "male", "ethnicity": "martian"},
])
def test_subject_domains_enforced(bad):
    with pytest.raises(D.ManifestParseError):
        D.parse_manifest(_lines(bad))


def test_round_trip_preserves_unknown_fields(tmp_path):
    lines = _small_manifest_lines()
    extra = json.loads(lines[1])
    extra["note"] = "kept"
    lines[1] = json.dumps(extra)
    m = D.parse_manifest(lines)
    path = tmp_path / "m.jsonl"
    D.save_manifest(m, path)
    again = D.load_manifest(path)
    assert again == m
    assert again.subject("s1").extra == {"note": "kept"}
    assert D.dump_manifest(again) == D.dump_manifest(m)


def test_reference_manifest_size():
    m = reference_manifest()
    assert (m.num_identities, len(m.images), len(m.filters)) == (102, 2040, 10)


def test_missing_image_payload(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(_small_manifest_lines()) + "\n")
    m = D.load_manifest(path)
    with pytest.raises(D.MissingPayloadError, match="'a'"):
        m.load_image("a")
    with pytest.raises(D.MissingPayloadError, match="nope"):
        m.image("nope")


# -- splits

def _one_subject(n):
    subject = D.SubjectRecord("s1", 30, "male", "white")
    images = tuple(D.ImageRecord(f"i{k}", "s1", f"p{k}", D.NO_FILTER, f"{k}.png") for k in range(n))
    return D.DatasetManifest((subject,), images)


def test_ten_images_one_subject():
    m = _one_subject(10)
    a = D.split_train_test(m, D.SplitSpec(0.8, seed=7))
    b = D.split_train_test(m, D.SplitSpec(0.8, seed=7))
    assert (len(a.train), len(a.test)) == (8, 2)
    assert a == b


def test_reference_split_sizes_and_stratification():
    m = reference_manifest()
    split = D.split_train_test(m, D.SplitSpec(0.8, seed=0))
    assert (len(split.train), len(split.test)) == (1632, 408)
    assert set(split.train).isdisjoint(split.test)
    assert {m.image(i).subject_id for i in split.test} == set(m.identity_classes)


def test_split_needs_two_images_per_subject():
    with pytest.raises(D.SplitError, match="s1"):
        D.split_train_test(_one_subject(1))


def test_split_json_round_trip(tmp_path):
    split = D.split_train_test(_one_subject(6), D.SplitSpec(seed=3))
    split.save(tmp_path / "split.json")
    assert D.Split.load(tmp_path / "split.json") == split


def _random_manifest(rng):
    subjects, images = [], []
    for s in range(int(rng.integers(1, 6))):
        sid = f"s{s}"
        subjects.append(D.SubjectRecord(sid, int(rng.integers(1, 90)), "female", "black"))
        for k in range(int(rng.integers(2, 12))):
            images.append(D.ImageRecord(f"{sid}_{k}", sid, f"p{k}", D.NO_FILTER, "x.png"))
    return D.DatasetManifest(tuple(subjects), tuple(images))


@pytest.mark.parametrize("stratify", [True, False])
def test_split_determinism_over_random_manifests(stratify):
    rng = np.random.default_rng(2024)
    for trial in range(100):
        m = _random_manifest(rng)
        spec = D.SplitSpec(float(rng.uniform(0.1, 0.9)), seed=trial, stratify_by_subject=stratify)
        a, b = D.split_train_test(m, spec), D.split_train_test(m, spec)
        assert a.to_json() == b.to_json()
        assert sorted(a.train + a.test) == sorted(im.image_id for im in m.images)


# -- pairing

def test_pairs_for_one_subject():
    subject = D.SubjectRecord("s1", 30, "male", "white")
    filters = tuple(D.FilterSpec(f, f.upper(), "other", "distortion") for f in ("f1", "f2"))
    images = (D.ImageRecord("base", "s1", D.BASELINE_POSE, D.NO_FILTER, "b.png"),
              D.ImageRecord("x1", "s1", D.BASELINE_POSE, "f1", "1.png"),
              D.ImageRecord("x2", "s1", D.BASELINE_POSE, "f2", "2.png"))
    m = D.DatasetManifest((subject,), images, filters)
    assert D.pair_baseline_filtered(m) == [("base", "x1", "f1"), ("base", "x2", "f2")]


def test_reference_pairs():
    pairs = D.pair_baseline_filtered(reference_manifest())
    assert len(pairs) == 1020
    assert all(b.endswith(D.BASELINE_POSE) for b, _, _ in pairs)


def test_missing_baseline_is_an_error():
    m = D.parse_manifest(_small_manifest_lines())
    images = tuple(im for im in m.images if im.image_id != "c")
    broken = D.DatasetManifest(m.subjects, images, m.filters)
    with pytest.raises(D.PairingError, match="s2"):
        D.pair_baseline_filtered(broken)


def test_duplicate_baseline_is_an_error():
    m = D.parse_manifest(_small_manifest_lines())
    extra = D.ImageRecord("a2", "s1", D.BASELINE_POSE, D.NO_FILTER, "a2.png")
    with pytest.raises(D.PairingError, match="2 neutral_front baselines"):
        D.pair_baseline_filtered(D.DatasetManifest(m.subjects, m.images + (extra,), m.filters))
