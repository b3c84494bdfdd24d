"""Training for the identity network and the attribute heads.

Batch order is a pure function of the seed, and weights are initialized
from the same seed, so a rerun on the same machine retraces the same loss
trajectory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import nets
from .checkpoint import Checkpoint, config_hash
from .dataset import ETHNICITIES, GENDERS, DatasetManifest, Split

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum", "adaptive_moment")
LOSSES = ("cross_entropy", "mse", "mae")
CACHE_ENV = "FFSENSE_CACHE_DIR"


class TrainError(ValueError):
    pass


class LabelDomainError(TrainError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    optimizer: str = "adaptive_moment"
    loss: str = "cross_entropy"
    seed: int = 0
    freeze_extractor: bool = True
    class_weighting: bool = False
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> TrainConfig:
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            kind = type(f.default)
            try:
                if kind is bool:
                    kwargs[f.name] = parse_bool(raw)
                else:
                    kwargs[f.name] = kind(raw)
            except ValueError:
                raise ConfigError(f"bad value for {f.name}: {raw!r}") from None
        return cls(**kwargs)


def parse_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    value = str(raw).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def read_config(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


@dataclass
class TrainReport:
    kind: str
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    checkpoint_digest: str = ""
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd_momentum":
        return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)
    return torch.optim.Adam(params, lr=cfg.learning_rate)


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled minibatch indices; a trailing singleton joins the previous batch
    (batch norm cannot train on one sample)."""
    perm = rng.permutation(n)
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _class_weights(targets: np.ndarray, n_classes: int) -> torch.Tensor:
    counts = np.bincount(targets, minlength=n_classes).astype(np.float64)
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / n_classes, 0.0)
    return torch.tensor(w, dtype=torch.float32)


def _loss_fn(cfg: TrainConfig, weights: torch.Tensor | None) -> Callable:
    if cfg.loss == "cross_entropy":
        return lambda out, y: F.cross_entropy(out, y, weight=weights)
    if cfg.loss == "mse":
        return lambda out, y: F.mse_loss(out.squeeze(1), y)
    return lambda out, y: F.l1_loss(out.squeeze(1), y)


def _fingerprint(spec, cfg: TrainConfig, extra=None) -> dict:
    return {"seed": cfg.seed, "config_hash": config_hash({"spec": spec.to_dict(), "train": asdict(cfg),
                                                          **(extra or {})}), "trained": True}


# ------------------------------------------------------------------ identity


def load_inputs(manifest: DatasetManifest, image_ids: Sequence[str], size: int) -> torch.Tensor:
    return torch.cat([nets.preprocess(manifest.load_image(i), size) for i in image_ids])


def identity_accuracy(checkpoint: Checkpoint, manifest: DatasetManifest, image_ids: Sequence[str],
                      inputs: torch.Tensor | None = None) -> float:
    """Accuracy of argmax identity predictions, one image at a time.

    Uses the same per-image inference path as prediction dumps, so the two
    always agree.
    """
    if not image_ids:
        return float("nan")
    classes = checkpoint.classes
    net = checkpoint.module()
    correct = 0
    for k, image_id in enumerate(image_ids):
        if inputs is None:
            probs = nets.predict_identity(checkpoint, manifest.load_image(image_id)).probs
        else:
            with torch.inference_mode():
                probs = nets.softmax(net(inputs[k:k + 1])[0].double().numpy())
        correct += classes[int(np.argmax(probs))] == manifest.image(image_id).subject_id
    return correct / len(image_ids)


def train_identity(manifest: DatasetManifest, split: Split, spec: nets.NetworkSpec,
                   cfg: TrainConfig) -> tuple[Checkpoint, TrainReport]:
    """Train FaceFilterNet end to end on the split's training images.

    Each epoch records the mean training loss, the running training
    accuracy and the held-out test accuracy.
    """
    if not split.train:
        raise TrainError("training split is empty")
    if spec.head.kind != nets.IDENTITY:
        raise TrainError(f"identity training needs an {nets.IDENTITY} head, got {spec.head.kind}")
    classes = manifest.identity_classes
    if spec.head.num_classes != len(classes):
        raise TrainError(f"head has {spec.head.num_classes} classes but the manifest has {len(classes)} subjects")
    if cfg.loss != "cross_entropy":
        raise ConfigError("identity classification trains with cross_entropy")

    started = time.perf_counter()
    index = {c: i for i, c in enumerate(classes)}
    x_train = load_inputs(manifest, split.train, spec.input_size)
    y_train = np.array([index[manifest.image(i).subject_id] for i in split.train])
    x_test = load_inputs(manifest, split.test, spec.input_size) if split.test else None

    model = nets.init_module(spec, cfg.seed)
    opt = _make_optimizer(model.parameters(), cfg)
    weights = _class_weights(y_train, len(classes)) if cfg.class_weighting else None
    loss_fn = _loss_fn(cfg, weights)
    rng = np.random.default_rng(cfg.seed)
    y_t = torch.from_numpy(y_train)
    fingerprint = _fingerprint(spec, cfg, {"split_seed": split.seed})
    report = TrainReport(nets.IDENTITY)

    ckpt = None
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        total, correct, loss_sum = 0, 0, 0.0
        for idx in batch_order(len(y_train), cfg.batch_size, rng):
            idx_t = torch.from_numpy(idx)
            logits = model(x_train[idx_t])
            loss = loss_fn(logits, y_t[idx_t])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y_t[idx_t]).sum())
            total += len(idx)
        ckpt = Checkpoint.from_module(spec, model, fingerprint, classes)
        test_acc = identity_accuracy(ckpt, manifest, split.test, x_test) if split.test else None
        report.epochs.append({"epoch": epoch, "loss": loss_sum / total, "train_accuracy": correct / total,
                              "test_accuracy": test_acc})
        log.info("identity epoch %d loss %.4f train %.4f test %s", epoch, loss_sum / total, correct / total, test_acc)

    report.final = {
        "train_accuracy": identity_accuracy(ckpt, manifest, split.train, x_train),
        "test_accuracy": report.epochs[-1]["test_accuracy"],
        "loss": report.epochs[-1]["loss"],
    }
    report.checkpoint_digest = ckpt.digest
    report.wall_clock_seconds = time.perf_counter() - started
    return ckpt, report


# ------------------------------------------------------------------ features


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, ".ffsense_cache"))


def _cache_name(image_id: str) -> str:
    return hashlib.sha1(image_id.encode()).hexdigest() + ".f32"


def precompute_features(checkpoint: Checkpoint, manifest: DatasetManifest, image_ids: Sequence[str],
                        cache_dir: str | Path | None = None) -> dict[str, np.ndarray]:
    """2048-wide features for each image, cached on disk per checkpoint.

    Cache layout: ``<cache_dir>/<checkpoint digest>/index.json`` maps image
    ids to raw little-endian float32 files in the same directory.
    """
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    folder = root / checkpoint.digest[:32]
    index_path = folder / "index.json"
    index = json.loads(index_path.read_text()) if index_path.is_file() else {}
    out, dirty = {}, False
    for image_id in image_ids:
        name = index.get(image_id)
        if name and (folder / name).is_file():
            out[image_id] = np.fromfile(folder / name, dtype="<f4")
            continue
        manifest.image(image_id)  # raises MissingPayloadError for unknown ids
        vec = nets.extract_features(checkpoint, manifest.load_image(image_id)).astype("<f4")
        folder.mkdir(parents=True, exist_ok=True)
        name = _cache_name(image_id)
        vec.tofile(folder / name)
        index[image_id] = name
        out[image_id] = vec
        dirty = True
    if dirty:
        tmp = index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(index, sort_keys=True, indent=0))
        tmp.replace(index_path)
    return out


# -------------------------------------------------------------------- heads


def encode_labels(labels: Sequence, kind: str) -> np.ndarray:
    if kind == nets.AGE:
        try:
            y = np.array([float(v) for v in labels], dtype=np.float32)
        except (TypeError, ValueError) as exc:
            raise LabelDomainError(f"age labels must be numbers ({exc})") from None
        if np.any(~np.isfinite(y)) or np.any(y < 0):
            raise LabelDomainError("age labels must be finite and non-negative")
        return y
    domain = {nets.GENDER: GENDERS, nets.ETHNICITY: ETHNICITIES}.get(kind)
    if domain is None:
        raise TrainError(f"{kind!r} is not an attribute head kind")
    bad = sorted({v for v in labels if v not in domain}, key=str)
    if bad:
        raise LabelDomainError(f"{kind} labels outside {list(domain)}: {bad}")
    return np.array([domain.index(v) for v in labels], dtype=np.int64)


def _head_metric(kind: str, out: np.ndarray, y: np.ndarray) -> float:
    if kind == nets.AGE:
        pred = np.clip(out[:, 0], 0, nets.MAX_AGE)
        return float(np.mean(np.abs(pred - y)))
    return float(np.mean(out.argmax(1) == y))


def train_attribute_head(features: Mapping[str, np.ndarray], labels: Mapping[str, object], kind: str,
                         cfg: TrainConfig, hidden: tuple[int, ...] = (256,),
                         eval_features: Mapping[str, np.ndarray] | None = None,
                         eval_labels: Mapping[str, object] | None = None) -> tuple[Checkpoint, TrainReport]:
    """Fit an age, gender or ethnicity head on precomputed extractor features.

    The report's metric is accuracy for the classifiers and MAE (years) for
    age, on the training features and, when given, on held-out features.
    """
    kind = {"age": nets.AGE, "gender": nets.GENDER, "ethnicity": nets.ETHNICITY}.get(kind, kind)
    if kind not in nets.ATTRIBUTE_KINDS:
        raise TrainError(f"{kind!r} is not an attribute head kind")
    if kind == nets.AGE and cfg.loss == "cross_entropy":
        raise ConfigError("the age head trains with mse or mae")
    if kind != nets.AGE and cfg.loss != "cross_entropy":
        raise ConfigError(f"the {kind} head trains with cross_entropy")
    ids = [i for i in features if i in labels]
    if not ids:
        raise TrainError("no labelled features to train on")
    spec = nets.attribute_head_spec(kind, hidden)
    x = torch.from_numpy(np.stack([np.asarray(features[i], dtype=np.float32) for i in ids]))
    if x.shape[1] != spec.input_dim:
        raise nets.HeadMismatchError(f"features are {x.shape[1]} wide, head expects {spec.input_dim}")
    y_np = encode_labels([labels[i] for i in ids], kind)
    y = torch.from_numpy(y_np)
    x_eval = y_eval = None
    if eval_features and eval_labels:
        eids = [i for i in eval_features if i in eval_labels]
        if eids:
            x_eval = torch.from_numpy(np.stack([np.asarray(eval_features[i], dtype=np.float32) for i in eids]))
            y_eval = encode_labels([eval_labels[i] for i in eids], kind)

    started = time.perf_counter()
    model = nets.init_module(spec, cfg.seed)
    if kind == nets.AGE:
        # Start from the mean age so early epochs are not spent learning the offset.
        with torch.no_grad():
            model[-1].bias.fill_(float(y_np.mean()))
    opt = _make_optimizer(model.parameters(), cfg)
    weights = None
    if cfg.class_weighting and kind != nets.AGE:
        weights = _class_weights(y_np, spec.out_dim)
    loss_fn = _loss_fn(cfg, weights)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(kind)
    metric = "mae" if kind == nets.AGE else "accuracy"

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        loss_sum = 0.0
        for idx in batch_order(len(ids), cfg.batch_size, rng):
            idx_t = torch.from_numpy(idx)
            loss = loss_fn(model(x[idx_t]), y[idx_t])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
        model.eval()
        with torch.no_grad():
            entry = {"epoch": epoch, "loss": loss_sum / len(ids),
                     f"train_{metric}": _head_metric(kind, model(x).double().numpy(), y_np)}
            if x_eval is not None:
                entry[f"test_{metric}"] = _head_metric(kind, model(x_eval).double().numpy(), y_eval)
        report.epochs.append(entry)

    ckpt = Checkpoint.from_module(spec, model, _fingerprint(spec, cfg), spec.labels)
    report.final = {k: v for k, v in report.epochs[-1].items() if k != "epoch"}
    report.checkpoint_digest = ckpt.digest
    report.wall_clock_seconds = time.perf_counter() - started
    return ckpt, report


def finetune_attribute_head(extractor: Checkpoint, manifest: DatasetManifest, image_ids: Sequence[str],
                            labels: Mapping[str, object], kind: str, cfg: TrainConfig,
                            hidden: tuple[int, ...] = (256,)) -> tuple[Checkpoint, Checkpoint, TrainReport]:
    """Train a head jointly with a copy of the extractor (no frozen features).

    Returns ``(extractor, head, report)``; the input extractor checkpoint is
    left untouched.
    """
    kind = {"age": nets.AGE, "gender": nets.GENDER, "ethnicity": nets.ETHNICITY}.get(kind, kind)
    if kind == nets.AGE and cfg.loss == "cross_entropy":
        raise ConfigError("the age head trains with mse or mae")
    if kind != nets.AGE and cfg.loss != "cross_entropy":
        raise ConfigError(f"the {kind} head trains with cross_entropy")
    ids = [i for i in image_ids if i in labels]
    if not ids:
        raise TrainError("no labelled images to train on")
    spec = nets.attribute_head_spec(kind, hidden)
    y_np = encode_labels([labels[i] for i in ids], kind)
    y = torch.from_numpy(y_np)
    x = load_inputs(manifest, ids, extractor.spec.input_size)

    started = time.perf_counter()
    trunk = nets.build_module(extractor.spec)
    trunk.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in extractor.weights.items()})
    head = nets.init_module(spec, cfg.seed)
    if kind == nets.AGE:
        with torch.no_grad():
            head[-1].bias.fill_(float(y_np.mean()))
    opt = _make_optimizer(list(trunk.parameters()) + list(head.parameters()), cfg)
    loss_fn = _loss_fn(cfg, None)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(kind)
    metric = "mae" if kind == nets.AGE else "accuracy"
    for epoch in range(1, cfg.epochs + 1):
        trunk.train()
        head.train()
        loss_sum = 0.0
        for idx in batch_order(len(ids), cfg.batch_size, rng):
            idx_t = torch.from_numpy(idx)
            loss = loss_fn(head(trunk.features(x[idx_t])), y[idx_t])
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
        trunk.eval()
        head.eval()
        with torch.no_grad():
            out = head(trunk.features(x)).double().numpy()
        report.epochs.append({"epoch": epoch, "loss": loss_sum / len(ids), f"train_{metric}": _head_metric(kind, out, y_np)})

    fp = _fingerprint(spec, cfg, {"finetuned_from": extractor.digest})
    new_extractor = Checkpoint.from_module(extractor.spec, trunk, fp, extractor.classes)
    head_ckpt = Checkpoint.from_module(spec, head, fp, spec.labels)
    report.final = {k: v for k, v in report.epochs[-1].items() if k != "epoch"}
    report.checkpoint_digest = head_ckpt.digest
    report.wall_clock_seconds = time.perf_counter() - started
    return new_extractor, head_ckpt, report
