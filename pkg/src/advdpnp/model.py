"""Feature extractors and the prototype head.

The head has no weights of its own: class ``j`` scores a feature ``f`` as
``c_j . f / alpha`` where ``c_j`` is the class prototype, so the prototype
bank is both the classifier and the set of class anchors. Features are left
unnormalized; only the prototypes are held on the radius-``alpha`` sphere.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np

from advdpnp import tensor as T
from advdpnp._io import atomic_write_bytes

CHECKPOINT_MAGIC = b"ADVP"
CHECKPOINT_VERSION = 1

FAMILIES = ("mlp", "small-cnn")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureConfig:
    """Extractor layout.

    ``mlp``: ``hidden`` are fully connected widths, each followed by relu;
    a final linear layer maps to ``feature_dim``.

    ``small-cnn``: ``hidden`` are conv channel counts. Each stage is a
    5x5 same-padded conv, relu and 2x2 max pool; a final linear layer maps
    the flattened map to ``feature_dim`` (2 gives the LeNets++-style
    planar bottleneck).
    """

    input_shape: tuple[int, ...] = (2,)
    hidden: tuple[int, ...] = (32, 32)
    feature_dim: int = 2
    family: str = "mlp"
    kernel: int = 5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be at least 2, got {self.feature_dim}")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown extractor family {self.family!r}")
        if self.family == "mlp" and len(self.input_shape) != 1:
            raise ValueError("mlp input_shape must be one-dimensional")
        if self.family == "small-cnn":
            if len(self.input_shape) != 3:
                raise ValueError("small-cnn input_shape must be (channels, height, width)")
            _, h, w = self.input_shape
            scale = 2 ** len(self.hidden)
            if h % scale or w % scale:
                raise ValueError(f"spatial extents must be divisible by {scale}")

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureConfig":
        return cls(**d)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Extractor tensor names and shapes in checkpoint order."""
        shapes = []
        if self.family == "mlp":
            width = self.input_shape[0]
            for i, h in enumerate(self.hidden):
                shapes += [(f"fc{i}.weight", (width, h)), (f"fc{i}.bias", (h,))]
                width = h
            n = len(self.hidden)
        else:
            c, h, w = self.input_shape
            for i, ch in enumerate(self.hidden):
                shapes += [(f"conv{i}.weight", (ch, c, self.kernel, self.kernel)), (f"conv{i}.bias", (ch,))]
                c, h, w = ch, h // 2, w // 2
            width = c * h * w
            n = 0
        shapes += [(f"fc{n}.weight", (width, self.feature_dim)), (f"fc{n}.bias", (self.feature_dim,))]
        return shapes


@dataclass(frozen=True)
class PrototypeBank:
    prototypes: np.ndarray  # (M, d)
    radius: float

    def __post_init__(self):
        p = np.array(self.prototypes, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 2 or p.shape[1] < 2:
            raise ValueError(f"prototype bank needs shape (M>=2, d>=2), got {p.shape}")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        p.setflags(write=False)
        object.__setattr__(self, "prototypes", p)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


@dataclass(frozen=True)
class ModelParams:
    arch: ArchitectureConfig
    extractor: dict[str, np.ndarray]
    bank: PrototypeBank

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if [k for k, _ in expected] != list(self.extractor):
            raise ValueError("extractor tensors do not match the architecture")
        for name, shape in expected:
            if self.extractor[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.extractor[name].shape}")
        if self.bank.dim != self.arch.feature_dim:
            raise ValueError("prototype dimension differs from the extractor output dimension")

    def with_(self, extractor=None, bank=None) -> "ModelParams":
        return replace(self, extractor=self.extractor if extractor is None else extractor,
                       bank=self.bank if bank is None else bank)


def init_model(cfg: ArchitectureConfig, num_classes: int, radius: float, seed: int | np.random.Generator) -> ModelParams:
    """He-uniform extractor weights, zero biases, isotropic prototypes on the sphere."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if not radius > 0:
        raise ValueError("radius must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    extractor = {}
    for name, shape in cfg.param_shapes():
        if name.endswith(".bias"):
            extractor[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            extractor[name] = rng.uniform(-bound, bound, size=shape)
    directions = rng.standard_normal((num_classes, cfg.feature_dim))
    bank = renormalize_prototypes(PrototypeBank(directions, radius))
    return ModelParams(cfg, extractor, bank)


def _as_batch(arch: ArchitectureConfig, x) -> T.Tensor:
    x = T.as_tensor(x)
    n = arch.input_size
    if x.ndim < 1 or int(np.prod(x.shape[1:])) != n:
        raise T.ShapeError("input", f"batch of shape {x.shape} does not match input shape {arch.input_shape}")
    if arch.family == "mlp":
        return x if x.ndim == 2 else T.reshape(x, (x.shape[0], n))
    target = (x.shape[0],) + arch.input_shape
    return x if x.shape == target else T.reshape(x, target)


def features_graph(arch: ArchitectureConfig, extractor: Mapping[str, T.Tensor], x) -> T.Tensor:
    """Differentiable f(x; theta) on a batch; returns (B, d)."""
    h = _as_batch(arch, x)
    if arch.family == "mlp":
        for i in range(len(arch.hidden)):
            h = T.relu(T.affine(extractor[f"fc{i}.weight"], h, extractor[f"fc{i}.bias"], name=f"fc{i}"))
        last = len(arch.hidden)
    else:
        pad = arch.kernel // 2
        for i in range(len(arch.hidden)):
            h = T.conv2d(h, extractor[f"conv{i}.weight"], extractor[f"conv{i}.bias"], padding=pad, name=f"conv{i}")
            h = T.maxpool2d(T.relu(h))
        h = T.reshape(h, (h.shape[0], int(np.prod(h.shape[1:]))))
        last = 0
    return T.affine(extractor[f"fc{last}.weight"], h, extractor[f"fc{last}.bias"], name=f"fc{last}")


def logits_graph(features: T.Tensor, prototypes: T.Tensor, radius: float) -> T.Tensor:
    if features.shape[-1] != prototypes.shape[-1]:
        raise T.ShapeError("logits", f"feature dim {features.shape[-1]} != prototype dim {prototypes.shape[-1]}")
    return T.matmul(features, T.transpose(prototypes)) * (1.0 / radius)


def extract_features(params: ModelParams, batch) -> np.ndarray:
    ext = {k: T.Tensor(v) for k, v in params.extractor.items()}
    return features_graph(params.arch, ext, np.asarray(batch, dtype=np.float64)).data


def class_logits(features, bank: PrototypeBank) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise T.NonFiniteError("features", "non-finite features")
    return logits_graph(T.Tensor(np.atleast_2d(f)), T.Tensor(bank.prototypes), bank.radius).data


def class_probabilities(features, bank: PrototypeBank) -> np.ndarray:
    """Softmax of ``c_j . f / alpha`` over classes, one row per feature."""
    logits = class_logits(features, bank)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def predict(probs) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the tie rule we want
    return np.argmax(np.atleast_2d(probs), axis=1)


def predict_labels(params: ModelParams, x) -> np.ndarray:
    return predict(class_logits(extract_features(params, x), params.bank))


def renormalize_prototypes(bank: PrototypeBank) -> PrototypeBank:
    norms = np.linalg.norm(bank.prototypes, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = np.flatnonzero(norms[:, 0] == 0).tolist()
        raise ValueError(f"prototypes {bad} collapsed to zero norm")
    return PrototypeBank(bank.radius * bank.prototypes / norms, bank.radius)


# ------------------------------------------------------------- checkpoints
#
# Layout (all integers and floats little-endian):
#   b"ADVP" | u16 version | u32 header length | header (UTF-8 JSON)
#   | float64 payload of every tensor listed in header["tensors"], in order.
# The tensor order is the extractor in layer order followed by "prototypes".


def checkpoint_bytes(params: ModelParams) -> bytes:
    tensors = [(k, params.extractor[k]) for k, _ in params.arch.param_shapes()]
    tensors.append(("prototypes", params.bank.prototypes))
    header = {
        "architecture": params.arch.to_dict(),
        "num_classes": params.bank.num_classes,
        "radius": params.bank.radius,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for _, v in tensors:
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(payload: bytes) -> ModelParams:
    if payload[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(payload) < 10:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<HI", payload, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 10 + hlen
    try:
        header = json.loads(payload[10:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    arch = ArchitectureConfig.from_dict(header["architecture"])
    arrays = {}
    offset = start
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(payload):
            raise CheckpointError(f"truncated payload at tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("trailing bytes after checkpoint payload")
    protos = arrays.pop("prototypes")
    return ModelParams(arch, arrays, PrototypeBank(protos, header["radius"]))


def save_checkpoint(path, params: ModelParams) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
