import numpy as np
import pytest
import torch

from ffsense import nets
from ffsense.checkpoint import (Checkpoint, CheckpointError, CheckpointVersionError, CorruptCheckpointError,
                                ShapeMismatchError, from_bytes, load_checkpoint, save_checkpoint)
from ffsense.dataset import ETHNICITIES

TINY = dict(input_size=32, stage_blocks=(1, 1), base_width=8, bridge_width=8)


@pytest.fixture(scope="module")
def tiny():
    spec = nets.build_facefilternet(5, **TINY)
    return Checkpoint.initialize(spec, seed=1, classes=[f"c{i}" for i in range(5)])


@pytest.fixture(scope="module")
def heads():
    return {name: Checkpoint.initialize(nets.attribute_head_spec(kind), seed=i)
            for i, (name, kind) in enumerate((("age", nets.AGE), ("gender", nets.GENDER),
                                              ("ethnicity", nets.ETHNICITY)))}


def _image(seed, size=40):
    return np.random.default_rng(seed).random((size, size, 3), dtype=np.float32)


def test_full_network_shape():
    spec = nets.build_facefilternet(102)
    net = nets.build_module(spec)
    assert spec.feature_dim == 2048 and spec.input_shape == (256, 256, 3)
    assert net.head[-1].out_features == 102
    assert isinstance(net.projection, torch.nn.Identity)  # the ResNet-50 trunk already ends at 2048


def test_class_count_only_changes_the_head():
    a = nets.build_module(nets.build_facefilternet(102, **TINY)).state_dict()
    b = nets.build_module(nets.build_facefilternet(2, **TINY)).state_dict()
    differing = {k for k in a if a[k].shape != b[k].shape}
    assert differing == {"head.0.weight", "head.0.bias"}
    assert b["head.0.weight"].shape == (2, 2048)


@pytest.mark.parametrize("n", [1, 0, -3])
def test_degenerate_class_count(n):
    with pytest.raises(nets.SpecError):
        nets.build_facefilternet(n)


def test_spec_dict_round_trip():
    spec = nets.build_facefilternet(7, **TINY)
    assert nets.spec_from_dict(spec.to_dict()) == spec
    head = nets.attribute_head_spec(nets.GENDER)
    assert nets.spec_from_dict(head.to_dict()) == head


def test_predict_identity_is_a_distribution(tiny):
    dist = nets.predict_identity(tiny, _image(0))
    assert dist.probs.shape == (5,)
    assert np.all(dist.probs >= 0) and abs(dist.probs.sum() - 1) < 1e-5
    assert dist.predicted == tiny.classes[dist.predicted_index]


def test_predict_identity_bitwise_repeatable_and_batch_free(tiny):
    img = _image(1)
    first = nets.predict_identity(tiny, img).probs
    for k in range(3):
        nets.predict_identity(tiny, _image(100 + k))
    assert first.tobytes() == nets.predict_identity(tiny, img).probs.tobytes()
    assert first.tobytes() == nets.predict_identity(Checkpoint(tiny.spec, tiny.weights), img).probs.tobytes()


def test_identity_with_features_matches_separate_calls(tiny):
    img = _image(2)
    dist, feats = nets.identity_with_features(tiny, img)
    assert dist.probs.tobytes() == nets.predict_identity(tiny, img).probs.tobytes()
    assert feats.tobytes() == nets.extract_features(tiny, img).tobytes()


def test_features(tiny):
    a = nets.extract_features(tiny, _image(3))
    assert a.shape == (2048,) and a.dtype == np.float32 and np.all(np.isfinite(a))
    assert np.array_equal(a, nets.extract_features(tiny, _image(3)))
    assert not np.array_equal(a, nets.extract_features(tiny, _image(4)))


@pytest.mark.parametrize("bad", [np.zeros((8, 8)), np.zeros((8, 8, 4)), np.full((8, 8, 3), 1.5),
                                 np.full((8, 8, 3), np.nan)])
def test_preprocess_rejects_bad_images(bad):
    with pytest.raises(nets.ImageShapeError):
        nets.preprocess(bad, 32)


def test_preprocess_resizes_to_input_size():
    assert nets.preprocess(_image(0, size=17), 32).shape == (1, 3, 32, 32)


def test_random_init_is_near_uniform_over_102_classes():
    spec = nets.build_facefilternet(102)
    img = _image(5, size=256)
    top = [nets.predict_identity(Checkpoint.initialize(spec, seed=s), img).probs.max() for s in range(20)]
    assert max(top) < 0.2


def test_attributes(tiny, heads):
    pred = nets.predict_attributes(tiny, heads, _image(6))
    assert pred.gender_probs.shape == (2,) and abs(pred.gender_probs.sum() - 1) < 1e-12
    assert pred.ethnicity_probs.shape == (4,) and abs(pred.ethnicity_probs.sum() - 1) < 1e-12
    assert pred.ethnicity in ETHNICITIES
    assert ETHNICITIES == ("east_asian", "west_asian", "black", "white")
    assert 0 <= pred.age <= nets.MAX_AGE


def test_zero_age_head_predicts_zero(tiny, heads):
    zero = Checkpoint.initialize(nets.attribute_head_spec(nets.AGE), zero=True)
    assert nets.predict_attributes(tiny, {**heads, "age": zero}, _image(7)).age == 0.0


def test_age_is_clamped(tiny, heads):
    spec = nets.attribute_head_spec(nets.AGE)
    weights = {k: np.zeros_like(v) for k, v in heads["age"].weights.items()}
    weights["2.bias"] = np.array([500.0], dtype=np.float32)
    assert nets.predict_attributes(tiny, {**heads, "age": Checkpoint(spec, weights)}, _image(7)).age == nets.MAX_AGE
    weights["2.bias"] = np.array([-3.0], dtype=np.float32)
    assert nets.predict_attributes(tiny, {**heads, "age": Checkpoint(spec, weights)}, _image(7)).age == 0.0


def test_head_mismatch(tiny, heads):
    with pytest.raises(nets.HeadMismatchError):
        nets.predict_attributes(tiny, {**heads, "age": heads["gender"]}, _image(0))
    with pytest.raises(nets.HeadMismatchError, match="missing"):
        nets.predict_attributes(tiny, {"age": heads["age"]}, _image(0))
    with pytest.raises(nets.HeadMismatchError):
        nets.predict_identity(heads["gender"], _image(0))
    narrow = Checkpoint.initialize(nets.HeadSpec(nets.GENDER, input_dim=16))
    with pytest.raises(nets.HeadMismatchError, match="16"):
        nets.predict_attributes(tiny, {**heads, "gender": narrow}, _image(0))


def test_cross_entropy_head_gradient_matches_autograd():
    rng = np.random.default_rng(0)
    hidden = rng.normal(size=(6, 5))
    w = torch.tensor(rng.normal(size=(3, 5)), requires_grad=True)
    b = torch.tensor(rng.normal(size=3), requires_grad=True)
    targets = rng.integers(0, 3, 6)
    logits = torch.from_numpy(hidden) @ w.T + b
    torch.nn.functional.cross_entropy(logits, torch.from_numpy(targets)).backward()
    dw, db = nets.cross_entropy_head_gradient(hidden, logits.detach().numpy(), targets)
    np.testing.assert_allclose(dw, w.grad.numpy(), atol=1e-12)
    np.testing.assert_allclose(db, b.grad.numpy(), atol=1e-12)


def test_backbone_parameter_names_follow_torchvision():
    models = pytest.importorskip("torchvision.models")
    ours = nets.build_module(nets.build_facefilternet(102)).backbone.state_dict()
    theirs = models.resnet50().state_dict()
    assert all(k in theirs and theirs[k].shape == v.shape for k, v in ours.items())


# -- checkpoints

def test_checkpoint_round_trip_is_bitwise(tiny, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny, path)
    assert not (tmp_path / "m.ckpt.tmp").exists()
    again = load_checkpoint(path)
    assert again.spec == tiny.spec and again.classes == tiny.classes and again.digest == tiny.digest
    img = _image(8)
    assert nets.predict_identity(again, img).probs.tobytes() == nets.predict_identity(tiny, img).probs.tobytes()


def test_truncated_checkpoint(tiny):
    blob = tiny.to_bytes()
    for cut in (10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptCheckpointError):
            from_bytes(blob[:cut])


def test_modified_checkpoint(tiny):
    blob = bytearray(tiny.to_bytes())
    blob[len(blob) // 2] ^= 0xFF
    with pytest.raises(CorruptCheckpointError):
        from_bytes(bytes(blob))


def test_bad_magic_and_version(tiny):
    blob = tiny.to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointVersionError):
        from_bytes(blob[:8] + (2).to_bytes(4, "little") + blob[12:])


def test_shape_mismatch_names_tensor(tiny):
    weights = dict(tiny.weights)
    weights["head.0.bias"] = np.zeros(6, dtype=np.float32)
    with pytest.raises(ShapeMismatchError, match="head.0.bias"):
        Checkpoint(tiny.spec, weights)
    other = nets.build_facefilternet(6, **TINY)
    with pytest.raises(ShapeMismatchError, match="head.0"):
        Checkpoint(other, tiny.weights)


def test_digest_depends_on_weights(tiny):
    bumped = {k: v.copy() for k, v in tiny.weights.items()}
    bumped["head.0.bias"][0] += 1
    assert Checkpoint(tiny.spec, bumped, tiny.fingerprint, tiny.classes).digest != tiny.digest
    assert Checkpoint.initialize(tiny.spec, seed=1, classes=tiny.classes).digest == tiny.digest
