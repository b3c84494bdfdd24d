"""Trained weights plus the spec that produced them, and their on-disk container.

Container layout (all integers little-endian)::

    magic        8 bytes   b"FFSCKPT\\x00"
    version      uint32    FORMAT_VERSION
    header_len   uint64
    header       header_len bytes of canonical JSON:
                 {"spec": ..., "classes": [...], "fingerprint": {...},
                  "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      concatenated raw tensor bytes, C order, offsets relative to here
    sha256       32 bytes over everything above

The digest doubles as the checkpoint's identity for feature caching.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .nets import HeadSpec, NetworkSpec, build_module, init_module, spec_from_dict

MAGIC = b"FFSCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Checkpoint:
    spec: NetworkSpec | HeadSpec
    weights: Mapping[str, np.ndarray]
    fingerprint: Mapping[str, Any] = field(default_factory=dict)
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "weights", {k: np.array(v, order="C") for k, v in self.weights.items()})
        object.__setattr__(self, "classes", tuple(self.classes))
        check_shapes(self.spec, self.weights)

    @classmethod
    def from_module(cls, spec, module: torch.nn.Module, fingerprint=None, classes=()) -> Checkpoint:
        weights = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return cls(spec, weights, dict(fingerprint or {}), tuple(classes))

    @classmethod
    def initialize(cls, spec, seed: int = 0, classes=(), zero: bool = False) -> Checkpoint:
        module = init_module(spec, seed)
        if zero:
            with torch.no_grad():
                for p in module.parameters():
                    p.zero_()
        fp = {"seed": seed, "config_hash": config_hash(spec.to_dict()), "trained": False}
        return cls.from_module(spec, module, fp, classes)

    def module(self) -> torch.nn.Module:
        """Eval-mode torch module carrying these weights (built once, then reused)."""
        cached = self.__dict__.get("_module")
        if cached is None:
            cached = build_module(self.spec)
            cached.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.weights.items()})
            cached.eval()
            for p in cached.parameters():
                p.requires_grad_(False)
            object.__setattr__(self, "_module", cached)
        return cached

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name in sorted(self.weights):
            arr = self.weights[name]
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
            entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = canonical_json({
            "spec": self.spec.to_dict(),
            "classes": list(self.classes),
            "fingerprint": dict(self.fingerprint),
            "tensors": entries,
        }).encode()
        body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
        return body + hashlib.sha256(body).digest()

    @property
    def digest(self) -> str:
        cached = self.__dict__.get("_digest")
        if cached is None:
            cached = hashlib.sha256(self.to_bytes()).hexdigest()
            object.__setattr__(self, "_digest", cached)
        return cached


def check_shapes(spec, weights: Mapping[str, np.ndarray]) -> None:
    expected = build_module(spec).state_dict()
    for name, tensor in expected.items():
        if name not in weights:
            raise ShapeMismatchError(f"tensor {name!r} missing from weights")
        if tuple(weights[name].shape) != tuple(tensor.shape):
            raise ShapeMismatchError(
                f"tensor {name!r} has shape {tuple(weights[name].shape)}, spec needs {tuple(tensor.shape)}"
            )
    extra = sorted(set(weights) - set(expected))
    if extra:
        raise ShapeMismatchError(f"tensor {extra[0]!r} is not part of the spec")


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size + 32 or not blob.startswith(MAGIC):
        if len(blob) >= len(MAGIC) and not blob.startswith(MAGIC):
            raise CheckpointError("not a checkpoint file (bad magic)")
        raise CorruptCheckpointError("checkpoint truncated")
    _, version, header_len = _PREFIX.unpack_from(blob)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format v{version}, this build reads v{FORMAT_VERSION}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("integrity hash mismatch (truncated or modified file)")
    start = _PREFIX.size
    header = json.loads(body[start:start + header_len])
    payload = memoryview(body)[start + header_len:]
    weights = {}
    for t in header["tensors"]:
        chunk = payload[t["offset"]:t["offset"] + t["nbytes"]]
        weights[t["name"]] = np.frombuffer(chunk, dtype=np.dtype(t["dtype"]).newbyteorder("<")).reshape(
            t["shape"]).astype(np.dtype(t["dtype"]), copy=True)
    return Checkpoint(spec_from_dict(header["spec"]), weights, header["fingerprint"], tuple(header["classes"]))


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint.to_bytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
