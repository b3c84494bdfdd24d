import numpy as np
import pytest

from ffsense import nets
from ffsense import train as T
from ffsense.checkpoint import Checkpoint
from ffsense.dataset import MissingPayloadError, Split, load_manifest
from ffsense.fixtures import write_copies_dataset

SMALL = dict(input_size=32, stage_blocks=(1, 1), base_width=8, bridge_width=8)


@pytest.fixture(scope="module")
def copies(tmp_path_factory):
    manifest = load_manifest(write_copies_dataset(tmp_path_factory.mktemp("copies"), n_subjects=4, copies=8,
                                                  size=32))
    ids = tuple(im.image_id for im in manifest.images)
    return manifest, Split(ids[::2], ids[1::2], 0, 0.5)


@pytest.fixture(scope="module")
def trained(copies):
    manifest, split = copies
    spec = nets.build_facefilternet(4, **SMALL)
    cfg = T.TrainConfig(epochs=20, learning_rate=3e-4, batch_size=4, seed=3)
    return T.train_identity(manifest, split, spec, cfg)


def test_small_network_memorizes(trained):
    ckpt, report = trained
    assert report.final["train_accuracy"] == 1.0
    assert len(report.epochs) == 20
    assert report.epochs[-1]["loss"] < report.epochs[0]["loss"]
    assert report.checkpoint_digest == ckpt.digest
    assert ckpt.fingerprint["trained"] is True


def test_same_seed_same_run(copies, trained):
    manifest, split = copies
    spec = nets.build_facefilternet(4, **SMALL)
    ckpt, report = T.train_identity(manifest, split, spec,
                                    T.TrainConfig(epochs=20, learning_rate=3e-4, batch_size=4, seed=3))
    assert abs(report.epochs[0]["loss"] - trained[1].epochs[0]["loss"]) < 1e-4
    assert ckpt.digest == trained[0].digest


def test_identity_accuracy_agrees_with_prediction(copies, trained):
    manifest, split = copies
    ckpt, report = trained
    hits = [nets.predict_identity(ckpt, manifest.load_image(i)).predicted == manifest.image(i).subject_id
            for i in split.test]
    assert report.final["test_accuracy"] == sum(hits) / len(hits)


@pytest.mark.parametrize("epochs", [0, -1])
def test_non_positive_epochs_rejected(epochs):
    with pytest.raises(T.ConfigError):
        T.TrainConfig(epochs=epochs)


def test_bad_config_values():
    with pytest.raises(T.ConfigError):
        T.TrainConfig(optimizer="lbfgs")
    with pytest.raises(T.ConfigError, match="epochs"):
        T.TrainConfig.from_mapping({"epochs": "many"})
    cfg = T.TrainConfig.from_mapping({"epochs": "3", "freeze_extractor": "no", "learning_rate": "0.01"})
    assert (cfg.epochs, cfg.freeze_extractor, cfg.learning_rate) == (3, False, 0.01)


def test_read_config(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nseed = 4\n\nepochs=2  # trailing\n")
    assert T.read_config(path) == {"seed": "4", "epochs": "2"}
    path.write_text("seed 4\n")
    with pytest.raises(T.ConfigError, match=":1:"):
        T.read_config(path)


def test_empty_split_and_class_mismatch(copies):
    manifest, split = copies
    spec = nets.build_facefilternet(4, **SMALL)
    with pytest.raises(T.TrainError, match="empty"):
        T.train_identity(manifest, Split((), split.test, 0, 0.5), spec, T.TrainConfig(epochs=1))
    with pytest.raises(T.TrainError, match="classes"):
        T.train_identity(manifest, split, nets.build_facefilternet(5, **SMALL), T.TrainConfig(epochs=1))


def test_batch_order_is_seeded_and_never_leaves_a_singleton():
    a = T.batch_order(33, 16, np.random.default_rng(1))
    b = T.batch_order(33, 16, np.random.default_rng(1))
    assert [x.tolist() for x in a] == [x.tolist() for x in b]
    assert [len(x) for x in a] == [16, 17]
    assert sorted(np.concatenate(a).tolist()) == list(range(33))


# -- feature cache

def test_feature_cache(copies, trained, tmp_path):
    manifest, _ = copies
    ckpt, _ = trained
    ids = [im.image_id for im in manifest.images][:5]
    first = T.precompute_features(ckpt, manifest, ids, tmp_path)
    assert len(first) == 5 and all(v.shape == (2048,) for v in first.values())
    folder = tmp_path / ckpt.digest[:32]
    assert (folder / "index.json").is_file()
    stamps = {p.name: p.stat().st_mtime_ns for p in folder.iterdir()}
    again = T.precompute_features(ckpt, manifest, ids, tmp_path)
    assert all(first[i].tobytes() == again[i].tobytes() for i in ids)
    assert {p.name: p.stat().st_mtime_ns for p in folder.iterdir()} == stamps
    assert np.array_equal(first[ids[0]], nets.extract_features(ckpt, manifest.load_image(ids[0])))


def test_feature_cache_unknown_id(copies, trained, tmp_path):
    with pytest.raises(MissingPayloadError, match="ghost"):
        T.precompute_features(trained[0], copies[0], ["ghost"], tmp_path)


# -- attribute heads

def _separable_features(n=20):
    feats, labels = {}, {}
    for i in range(n):
        v = np.zeros(2048, dtype=np.float32)
        v[0] = 1.0 if i % 2 == 0 else -1.0
        feats[f"x{i}"] = v
        labels[f"x{i}"] = "male" if i % 2 == 0 else "female"
    return feats, labels


def test_gender_head_separates_clusters():
    feats, labels = _separable_features()
    ckpt, report = T.train_attribute_head(feats, labels, "gender", T.TrainConfig(epochs=30, learning_rate=1e-3))
    assert report.final["train_accuracy"] == 1.0
    assert ckpt.spec.kind == nets.GENDER and ckpt.classes == ("male", "female")
    assert report.epochs[-1]["loss"] < report.epochs[0]["loss"]


def test_constant_age_is_learned():
    rng = np.random.default_rng(0)
    feats = {f"x{i}": rng.normal(size=2048).astype(np.float32) for i in range(24)}
    labels = {k: 30 for k in feats}
    ckpt, report = T.train_attribute_head(feats, labels, "age",
                                          T.TrainConfig(epochs=40, learning_rate=1e-3, loss="mse"))
    preds = nets.head_outputs(ckpt, np.stack(list(feats.values())))[:, 0]
    assert np.all(np.abs(preds - 30) < 0.5)
    assert report.final["train_mae"] < 0.5


def test_unknown_labels_rejected():
    feats, labels = _separable_features(4)
    labels["x0"] = "martian"
    with pytest.raises(T.LabelDomainError, match="martian"):
        T.train_attribute_head(feats, labels, "ethnicity", T.TrainConfig(epochs=1))
    with pytest.raises(T.LabelDomainError):
        T.encode_labels(["x"], nets.AGE)


def test_loss_must_suit_the_head():
    feats, labels = _separable_features(4)
    with pytest.raises(T.ConfigError):
        T.train_attribute_head(feats, labels, "gender", T.TrainConfig(epochs=1, loss="mse"))
    with pytest.raises(T.ConfigError):
        T.train_attribute_head(feats, {k: 20 for k in feats}, "age", T.TrainConfig(epochs=1))


def test_class_weighting_runs():
    feats, labels = _separable_features(10)
    labels.update({k: "male" for k in list(labels)[:8]})
    _, report = T.train_attribute_head(feats, labels, "gender",
                                       T.TrainConfig(epochs=5, learning_rate=1e-3, class_weighting=True))
    assert np.isfinite(report.final["loss"])


def test_finetuning_leaves_input_extractor_alone(copies, trained):
    manifest, split = copies
    extractor = trained[0]
    before = extractor.digest
    labels = {i: manifest.subject(manifest.image(i).subject_id).gender for i in split.train}
    new_extractor, head, report = T.finetune_attribute_head(
        extractor, manifest, split.train, labels, "gender",
        T.TrainConfig(epochs=2, learning_rate=1e-3, freeze_extractor=False))
    assert extractor.digest == before == Checkpoint(extractor.spec, extractor.weights,
                                                    extractor.fingerprint, extractor.classes).digest
    assert new_extractor.digest != before
    assert head.spec.kind == nets.GENDER and len(report.epochs) == 2
