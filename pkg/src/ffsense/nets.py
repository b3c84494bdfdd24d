"""FaceFilterNet and the attribute heads that sit on its 2048-wide features.

The identity network is a bottleneck residual backbone (ResNet-50 layout by
default), one or more Inception-ResNet-B blocks, global average pooling to a
2048 feature vector and a softmax over enrolled identities. Age, gender and
ethnicity heads are small dense networks over those features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import ETHNICITIES, GENDERS

FEATURE_DIM = 2048
INPUT_SIZE = 256
MAX_AGE = 120.0

IDENTITY = "identity_softmax"
AGE = "age_regression"
GENDER = "gender_softmax"
ETHNICITY = "ethnicity_softmax"
HEAD_KINDS = (IDENTITY, AGE, GENDER, ETHNICITY)
ATTRIBUTE_KINDS = (AGE, GENDER, ETHNICITY)


class SpecError(ValueError):
    pass


class HeadMismatchError(ValueError):
    pass


class ImageShapeError(ValueError):
    pass


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    num_classes: int = 0
    hidden: tuple[int, ...] = ()
    input_dim: int = FEATURE_DIM

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in HEAD_KINDS:
            raise SpecError(f"unknown head kind {self.kind!r}")
        if self.kind == IDENTITY and self.num_classes < 2:
            raise SpecError(f"identity head needs at least 2 classes, got {self.num_classes}")
        if self.kind == GENDER and self.num_classes not in (0, len(GENDERS)):
            raise SpecError("gender head has exactly 2 classes")
        if self.kind == ETHNICITY and self.num_classes not in (0, len(ETHNICITIES)):
            raise SpecError("ethnicity head has exactly 4 classes")
        if self.kind == AGE and self.num_classes not in (0, 1):
            raise SpecError("age head has a single output")
        if any(h < 1 for h in self.hidden) or self.input_dim < 1:
            raise SpecError("layer widths must be positive")

    @property
    def out_dim(self) -> int:
        return {IDENTITY: self.num_classes, AGE: 1, GENDER: len(GENDERS), ETHNICITY: len(ETHNICITIES)}[self.kind]

    @property
    def labels(self) -> tuple[str, ...]:
        if self.kind == GENDER:
            return GENDERS
        if self.kind == ETHNICITY:
            return ETHNICITIES
        return ()

    def to_dict(self) -> dict:
        return {"type": "head", **asdict(self), "hidden": list(self.hidden)}


@dataclass(frozen=True)
class BackboneSpec:
    stage_blocks: tuple[int, ...] = (3, 4, 6, 3)
    base_width: int = 64
    pretrained: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        if not self.stage_blocks or any(b < 1 for b in self.stage_blocks) or self.base_width < 1:
            raise SpecError(f"invalid backbone {self.stage_blocks} x {self.base_width}")

    @property
    def out_channels(self) -> int:
        return self.base_width * 4 * 2 ** (len(self.stage_blocks) - 1)

    @property
    def is_resnet50(self) -> bool:
        return self.stage_blocks == (3, 4, 6, 3) and self.base_width == 64


@dataclass(frozen=True)
class BridgeSpec:
    blocks: int = 1
    branch_width: int = 128
    scale: float = 0.1

    def __post_init__(self):
        if self.blocks < 0 or self.branch_width < 1:
            raise SpecError("bridge needs blocks >= 0 and a positive branch width")


@dataclass(frozen=True)
class NetworkSpec:
    head: HeadSpec
    input_size: int = INPUT_SIZE
    channels: int = 3
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    bridge: BridgeSpec = field(default_factory=BridgeSpec)
    feature_dim: int = FEATURE_DIM

    def __post_init__(self):
        if self.feature_dim != FEATURE_DIM:
            raise SpecError(f"feature_dim is fixed at {FEATURE_DIM}, got {self.feature_dim}")
        if self.channels != 3:
            raise SpecError("input images are RGB")
        # The stem and every stage after the first halve the resolution.
        if self.input_size < 2 ** (len(self.backbone.stage_blocks) + 1):
            raise SpecError(f"input_size {self.input_size} too small for {len(self.backbone.stage_blocks)} stages")
        if self.head.input_dim != self.feature_dim:
            raise SpecError("head input width must equal feature_dim")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.input_size, self.input_size, self.channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head"] = self.head.to_dict()
        d["backbone"]["stage_blocks"] = list(self.backbone.stage_blocks)
        return {"type": "network", **d}


def spec_from_dict(d: dict) -> NetworkSpec | HeadSpec:
    d = dict(d)
    kind = d.pop("type", None)
    if kind == "head":
        return HeadSpec(**d)
    if kind == "network":
        return NetworkSpec(
            head=spec_from_dict(d.pop("head")),
            backbone=BackboneSpec(**d.pop("backbone")),
            bridge=BridgeSpec(**d.pop("bridge")),
            **d,
        )
    raise SpecError(f"unknown spec type {kind!r}")


def build_facefilternet(
    num_identities: int,
    *,
    input_size: int = INPUT_SIZE,
    stage_blocks: tuple[int, ...] = (3, 4, 6, 3),
    base_width: int = 64,
    pretrained: bool = False,
    bridge_blocks: int = 1,
    bridge_width: int = 128,
    bridge_scale: float = 0.1,
) -> NetworkSpec:
    """Describe a FaceFilterNet with a softmax over ``num_identities`` classes.

    The defaults give the full-size network: ResNet-50 stages, one
    Inception-ResNet-B block, 256x256 RGB input.
    """
    if num_identities < 2:
        raise SpecError(f"need at least 2 identities, got {num_identities}")
    return NetworkSpec(
        head=HeadSpec(IDENTITY, num_classes=num_identities),
        input_size=input_size,
        backbone=BackboneSpec(tuple(stage_blocks), base_width, pretrained),
        bridge=BridgeSpec(bridge_blocks, bridge_width, bridge_scale),
    )


def attribute_head_spec(kind: str, hidden: tuple[int, ...] = (256,)) -> HeadSpec:
    if kind not in ATTRIBUTE_KINDS:
        raise SpecError(f"{kind!r} is not an attribute head")
    return HeadSpec(kind, hidden=hidden)


# ---------------------------------------------------------------- modules


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_channels: int, planes: int, stride: int = 1):
        super().__init__()
        out = planes * self.expansion
        self.conv1 = nn.Conv2d(in_channels, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, out, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_channels != out:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        y = self.relu(self.bn1(self.conv1(x)))
        y = self.relu(self.bn2(self.conv2(y)))
        y = self.bn3(self.conv3(y))
        return self.relu(y + identity)


class ResidualBackbone(nn.Module):
    """Bottleneck ResNet; parameter names follow torchvision's ResNet."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        w = spec.base_width
        self.conv1 = nn.Conv2d(3, w, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(w)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        in_ch = w
        self.stage_names = []
        for i, n_blocks in enumerate(spec.stage_blocks):
            planes = w * 2**i
            blocks = []
            for j in range(n_blocks):
                blocks.append(Bottleneck(in_ch, planes, stride=2 if (i > 0 and j == 0) else 1))
                in_ch = planes * Bottleneck.expansion
            name = f"layer{i + 1}"
            setattr(self, name, nn.Sequential(*blocks))
            self.stage_names.append(name)
        self.out_channels = in_ch

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        for name in self.stage_names:
            x = getattr(self, name)(x)
        return x


class ConvBN(nn.Sequential):
    def __init__(self, cin, cout, kernel, padding=0):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, padding=padding, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class InceptionResNetB(nn.Module):
    """Block B of Inception-ResNet-v1: a 1x1 branch and a 1x1 -> 1x7 -> 7x1
    branch, concatenated, projected back by a 1x1 conv and added to the
    input after scaling."""

    def __init__(self, channels: int, branch_width: int = 128, scale: float = 0.1):
        super().__init__()
        self.scale = scale
        self.branch0 = ConvBN(channels, branch_width, 1)
        self.branch1 = nn.Sequential(
            ConvBN(channels, branch_width, 1),
            ConvBN(branch_width, branch_width, (1, 7), padding=(0, 3)),
            ConvBN(branch_width, branch_width, (7, 1), padding=(3, 0)),
        )
        self.project = nn.Conv2d(2 * branch_width, channels, 1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        y = torch.cat([self.branch0(x), self.branch1(x)], dim=1)
        return self.relu(x + self.scale * self.project(y))


def build_head(spec: HeadSpec) -> nn.Sequential:
    layers: list[nn.Module] = []
    width = spec.input_dim
    for h in spec.hidden:
        layers += [nn.Linear(width, h), nn.ReLU(inplace=True)]
        width = h
    layers.append(nn.Linear(width, spec.out_dim))
    return nn.Sequential(*layers)


class FaceFilterNet(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.backbone = ResidualBackbone(spec.backbone)
        ch = self.backbone.out_channels
        self.bridge = nn.Sequential(
            *[InceptionResNetB(ch, spec.bridge.branch_width, spec.bridge.scale) for _ in range(spec.bridge.blocks)]
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        # Keeps the feature width at 2048 for backbones that end elsewhere.
        self.projection = nn.Identity() if ch == spec.feature_dim else nn.Linear(ch, spec.feature_dim)
        self.head = build_head(spec.head)

    def features(self, x):
        x = self.bridge(self.backbone(x))
        return self.projection(torch.flatten(self.pool(x), 1))

    def forward(self, x):
        return self.head(self.features(x))


def build_module(spec: NetworkSpec | HeadSpec) -> nn.Module:
    if isinstance(spec, NetworkSpec):
        return FaceFilterNet(spec)
    return build_head(spec)


def init_module(spec: NetworkSpec | HeadSpec, seed: int) -> nn.Module:
    torch.manual_seed(seed)
    module = build_module(spec)
    if isinstance(spec, NetworkSpec) and spec.backbone.pretrained:
        load_pretrained_backbone(module.backbone)
    return module


def load_pretrained_backbone(backbone: ResidualBackbone) -> None:
    """Copy torchvision's ImageNet ResNet-50 weights into ``backbone``.

    Needs network access the first time (torchvision caches the download).
    """
    from torchvision.models import ResNet50_Weights, resnet50

    state = resnet50(weights=ResNet50_Weights.DEFAULT).state_dict()
    own = backbone.state_dict()
    missing = [k for k in own if k not in state or state[k].shape != own[k].shape]
    if missing:
        raise SpecError(f"pretrained weights only fit the ResNet-50 layout; mismatched: {missing[:3]}")
    backbone.load_state_dict({k: state[k] for k in own})


def parameter_count(spec: NetworkSpec | HeadSpec) -> int:
    return sum(p.numel() for p in build_module(spec).parameters())


# -------------------------------------------------------------- inference


@dataclass(frozen=True, eq=False)
class IdentityDistribution:
    probs: np.ndarray
    classes: tuple[str, ...] = ()

    @property
    def predicted_index(self) -> int:
        # np.argmax returns the first maximum, i.e. the lowest class index.
        return int(np.argmax(self.probs))

    @property
    def predicted(self) -> str:
        i = self.predicted_index
        return self.classes[i] if self.classes else str(i)


@dataclass(frozen=True, eq=False)
class AttributePrediction:
    age: float
    gender_probs: np.ndarray
    ethnicity_probs: np.ndarray

    @property
    def gender(self) -> str:
        return GENDERS[int(np.argmax(self.gender_probs))]

    @property
    def ethnicity(self) -> str:
        return ETHNICITIES[int(np.argmax(self.ethnicity_probs))]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def preprocess(image: np.ndarray, size: int) -> torch.Tensor:
    """H x W x 3 array in [0, 1] -> 1 x 3 x size x size tensor (bilinear resize)."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageShapeError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ImageShapeError("image values must be finite and lie in [0, 1]")
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
    if arr.shape[:2] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t


def _network(checkpoint) -> FaceFilterNet:
    if not isinstance(checkpoint.spec, NetworkSpec):
        raise HeadMismatchError("checkpoint holds a bare head, not a FaceFilterNet")
    return checkpoint.module()


def _identity_network(checkpoint) -> FaceFilterNet:
    net = _network(checkpoint)
    if checkpoint.spec.head.kind != IDENTITY:
        raise HeadMismatchError(f"expected an {IDENTITY} head, got {checkpoint.spec.head.kind}")
    return net


def identity_logits(checkpoint, image: np.ndarray) -> np.ndarray:
    net = _network(checkpoint)
    with torch.inference_mode():
        return net(preprocess(image, net.spec.input_size))[0].double().numpy()


def predict_identity(checkpoint, image: np.ndarray) -> IdentityDistribution:
    """Probability of ``image`` belonging to each enrolled identity.

    Images are processed one at a time so the result never depends on what
    else is being scored.
    """
    _identity_network(checkpoint)
    return IdentityDistribution(softmax(identity_logits(checkpoint, image)), tuple(checkpoint.classes))


def extract_features(checkpoint, image: np.ndarray) -> np.ndarray:
    net = _network(checkpoint)
    with torch.inference_mode():
        return net.features(preprocess(image, net.spec.input_size))[0].numpy().astype(np.float32)


def identity_with_features(checkpoint, image: np.ndarray) -> tuple[IdentityDistribution, np.ndarray]:
    """Identity distribution and extractor features from a single forward pass."""
    net = _identity_network(checkpoint)
    with torch.inference_mode():
        feats = net.features(preprocess(image, net.spec.input_size))
        logits = net.head(feats)[0].double().numpy()
    return (IdentityDistribution(softmax(logits), tuple(checkpoint.classes)),
            feats[0].numpy().astype(np.float32))


def head_outputs(checkpoint, features: np.ndarray) -> np.ndarray:
    """Raw head outputs for a feature vector (or a batch of them)."""
    spec = checkpoint.spec
    if not isinstance(spec, HeadSpec):
        raise HeadMismatchError("expected a head checkpoint")
    feats = np.asarray(features, dtype=np.float32)
    if feats.shape[-1] != spec.input_dim:
        raise HeadMismatchError(f"head expects {spec.input_dim} features, got {feats.shape[-1]}")
    with torch.inference_mode():
        return checkpoint.module()(torch.from_numpy(np.atleast_2d(feats))).double().numpy()


def predict_attributes(extractor, heads: dict, image: np.ndarray) -> AttributePrediction:
    """Age, gender and ethnicity for one image.

    ``heads`` maps ``"age"``, ``"gender"`` and ``"ethnicity"`` (or the head
    kind names) to head checkpoints. Age is clamped to [0, 120].
    """
    by_kind = {}
    for key, ckpt in heads.items():
        kind = {"age": AGE, "gender": GENDER, "ethnicity": ETHNICITY}.get(key, key)
        if not isinstance(ckpt.spec, HeadSpec) or ckpt.spec.kind != kind:
            raise HeadMismatchError(f"{key!r} checkpoint is not a {kind} head")
        by_kind[kind] = ckpt
    missing = [k for k in ATTRIBUTE_KINDS if k not in by_kind]
    if missing:
        raise HeadMismatchError(f"missing heads: {missing}")
    feat_dim = extractor.spec.feature_dim
    for kind, ckpt in by_kind.items():
        if ckpt.spec.input_dim != feat_dim:
            raise HeadMismatchError(
                f"{kind} head expects {ckpt.spec.input_dim} inputs but the extractor emits {feat_dim}"
            )
    feats = extract_features(extractor, image)
    return attributes_from_features(by_kind, feats)


def attributes_from_features(heads_by_kind: dict, features: np.ndarray) -> AttributePrediction:
    age = float(head_outputs(heads_by_kind[AGE], features)[0, 0])
    return AttributePrediction(
        age=min(max(age, 0.0), MAX_AGE),
        gender_probs=softmax(head_outputs(heads_by_kind[GENDER], features)[0]),
        ethnicity_probs=softmax(head_outputs(heads_by_kind[ETHNICITY], features)[0]),
    )


def cross_entropy_head_gradient(hidden: np.ndarray, logits: np.ndarray, targets: np.ndarray):
    """Closed-form gradient of mean softmax cross-entropy w.r.t. the last
    linear layer, given that layer's inputs ``hidden`` (N x H) and outputs
    ``logits`` (N x C). Returns ``(d_weight C x H, d_bias C)``."""
    n = logits.shape[0]
    delta = softmax(logits)
    delta[np.arange(n), targets] -= 1.0
    delta /= n
    return delta.T @ hidden, delta.sum(axis=0)
