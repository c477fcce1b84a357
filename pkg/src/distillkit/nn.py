"""Small convolutional networks exposing logits, a penultimate embedding and hints.

Two presets stand in for the large backbones: ``plain-small`` (a VGG-style
conv/pool stack followed by a dense embedding layer) and ``residual-small``
(identity or 1x1-projection residual blocks with global average pooling).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .autograd import ShapeError, Tensor, conv2d, global_avg_pool, max_pool2d, softmax

CHECKPOINT_FORMAT = "distillkit-params"
CHECKPOINT_VERSION = 1


class SpecError(ValueError):
    """Raised for an invalid :class:`NetworkSpec`; names the offending block."""


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class ResidualBlock:
    out_channels: int


@dataclass(frozen=True)
class MaxPool:
    window: int = 2


Block = Union[Conv, ResidualBlock, MaxPool]
_BLOCK_TYPES = {"conv": Conv, "residual_block": ResidualBlock, "maxpool": MaxPool}


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    ``head`` is ``"classifier"`` (with ``num_classes``) or ``"regressor"``.
    ``pooling`` selects how the last feature map reaches the embedding layer:
    ``"flatten"`` or ``"global_avg"``. ``hint_block_index=None`` uses the
    embedding itself as the hint.
    """

    input_shape: tuple[int, int, int]
    blocks: tuple[Block, ...]
    embedding_dim: int = 64
    head: str = "classifier"
    num_classes: int = 2
    pooling: str = "flatten"
    hint_block_index: int | None = None

    @property
    def is_classifier(self) -> bool:
        return self.head == "classifier"

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.is_classifier else 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["input_shape"] = list(self.input_shape)
        out["blocks"] = [{"type": _block_name(b), **asdict(b)} for b in self.blocks]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        data = dict(data)
        blocks = []
        for i, raw in enumerate(data.pop("blocks")):
            raw = dict(raw)
            kind = raw.pop("type", None)
            if kind not in _BLOCK_TYPES:
                raise SpecError(f"block {i}: unknown block type {kind!r}")
            try:
                blocks.append(_BLOCK_TYPES[kind](**raw))
            except TypeError as exc:
                raise SpecError(f"block {i}: {exc}") from None
        data["input_shape"] = tuple(data["input_shape"])
        return cls(blocks=tuple(blocks), **data)

    def with_head(self, head: str, num_classes: int = 2) -> "NetworkSpec":
        return NetworkSpec(
            input_shape=self.input_shape,
            blocks=self.blocks,
            embedding_dim=self.embedding_dim,
            head=head,
            num_classes=num_classes,
            pooling=self.pooling,
            hint_block_index=self.hint_block_index,
        )


def _block_name(block: Block) -> str:
    for name, typ in _BLOCK_TYPES.items():
        if isinstance(block, typ):
            return name
    raise SpecError(f"unknown block {block!r}")


def preset(name: str, input_shape=(1, 16, 16), head: str = "classifier", num_classes: int = 4) -> NetworkSpec:
    """Desk-scale architectures: ``plain-small`` and ``residual-small``."""
    if name == "plain-small":
        blocks = (Conv(8), MaxPool(2), Conv(16), MaxPool(2), Conv(16))
        pooling = "flatten"
    elif name == "residual-small":
        blocks = (ResidualBlock(8), MaxPool(2), ResidualBlock(16), MaxPool(2), ResidualBlock(16))
        pooling = "global_avg"
    else:
        raise SpecError(f"unknown preset {name!r}")
    return NetworkSpec(
        input_shape=tuple(input_shape),
        blocks=blocks,
        embedding_dim=64,
        head=head,
        num_classes=num_classes,
        pooling=pooling,
    )


def _layer_shapes(spec: NetworkSpec) -> tuple[dict[str, tuple], list[tuple]]:
    """Parameter shapes by layer id, plus the feature shape after each block."""
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise SpecError(f"input_shape must be (channels, height, width), got {spec.input_shape}")
    if spec.head not in ("classifier", "regressor"):
        raise SpecError(f"unknown head {spec.head!r}")
    if spec.is_classifier and spec.num_classes < 2:
        raise SpecError("classifier head needs num_classes >= 2")
    if spec.embedding_dim < 1:
        raise SpecError("embedding_dim must be positive")
    if spec.pooling not in ("flatten", "global_avg"):
        raise SpecError(f"unknown pooling {spec.pooling!r}")
    if spec.hint_block_index is not None and not 0 <= spec.hint_block_index < len(spec.blocks):
        raise SpecError(f"hint_block_index {spec.hint_block_index} out of range")

    shapes: dict[str, tuple] = {}
    feature_shapes = []
    c, h, w = spec.input_shape
    for i, block in enumerate(spec.blocks):
        name = f"block{i}"
        if isinstance(block, Conv):
            if block.out_channels < 1 or block.kernel < 1 or block.stride < 1:
                raise SpecError(f"block {i}: conv settings must be positive")
            if block.kernel % 2 == 0:
                raise SpecError(f"block {i}: conv kernel must be odd for same padding")
            pad = block.kernel // 2
            shapes[f"{name}.conv.weight"] = (block.out_channels, c, block.kernel, block.kernel)
            shapes[f"{name}.conv.bias"] = (block.out_channels,)
            c = block.out_channels
            h = (h + 2 * pad - block.kernel) // block.stride + 1
            w = (w + 2 * pad - block.kernel) // block.stride + 1
        elif isinstance(block, ResidualBlock):
            if block.out_channels < 1:
                raise SpecError(f"block {i}: residual out_channels must be positive")
            o = block.out_channels
            shapes[f"{name}.conv1.weight"] = (o, c, 3, 3)
            shapes[f"{name}.conv1.bias"] = (o,)
            shapes[f"{name}.conv2.weight"] = (o, o, 3, 3)
            shapes[f"{name}.conv2.bias"] = (o,)
            if o != c:
                shapes[f"{name}.proj.weight"] = (o, c, 1, 1)
                shapes[f"{name}.proj.bias"] = (o,)
            c = o
        elif isinstance(block, MaxPool):
            if block.window < 1 or h % block.window or w % block.window:
                raise SpecError(f"block {i}: maxpool window {block.window} does not divide {(h, w)}")
            h, w = h // block.window, w // block.window
        else:
            raise SpecError(f"block {i}: unknown block {block!r}")
        if h < 1 or w < 1:
            raise SpecError(f"block {i}: feature map collapsed to {(h, w)}")
        feature_shapes.append((c, h, w))

    flat = c * h * w if spec.pooling == "flatten" else c
    shapes["embed.weight"] = (flat, spec.embedding_dim)
    shapes["embed.bias"] = (spec.embedding_dim,)
    shapes["head.weight"] = (spec.embedding_dim, spec.output_dim)
    shapes["head.bias"] = (spec.output_dim,)
    return shapes, feature_shapes


@dataclass
class NetworkParams:
    """Learnable tensors keyed by layer id, tagged ``teacher`` or ``student``."""

    tensors: dict[str, Tensor]
    role: str = "teacher"

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def copy(self, role: str | None = None, requires_grad: bool = True) -> "NetworkParams":
        return NetworkParams(
            {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in self.tensors.items()},
            role=self.role if role is None else role,
        )

    def frozen(self) -> "NetworkParams":
        """Same values, no gradient tracking (used for the teacher during distillation)."""
        return self.copy(requires_grad=False)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.tensors[k].data = v.copy()

    def equals(self, other: "NetworkParams") -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(np.array_equal(self.tensors[k].data, other.tensors[k].data) for k in self.tensors)


@dataclass
class ForwardOutput:
    logits: Tensor
    embedding: Tensor
    hint: Tensor
    prediction: Tensor
    features: list[Tensor] = field(default_factory=list)


def build(spec: NetworkSpec, seed: int, role: str = "teacher") -> NetworkParams:
    """He-initialised weights, zero biases; deterministic in ``seed``."""
    shapes, _ = _layer_shapes(spec)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        tensors[name] = Tensor(values, requires_grad=True)
    return NetworkParams(tensors, role=role)


def _as_batch(batch) -> Tensor:
    return batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float64))


def forward(params: NetworkParams, spec: NetworkSpec, batch) -> ForwardOutput:
    x = _as_batch(batch)
    if x.ndim == 3 and spec.input_shape[0] == 1:
        x = x.reshape((x.shape[0], 1) + x.shape[1:])
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"forward: batch shape {x.shape} does not match input_shape {tuple(spec.input_shape)}")

    features = []
    for i, block in enumerate(spec.blocks):
        name = f"block{i}"
        if isinstance(block, Conv):
            x = conv2d(x, params[f"{name}.conv.weight"], params[f"{name}.conv.bias"],
                       stride=block.stride, pad=block.kernel // 2).relu()
        elif isinstance(block, ResidualBlock):
            branch = conv2d(x, params[f"{name}.conv1.weight"], params[f"{name}.conv1.bias"], pad=1).relu()
            branch = conv2d(branch, params[f"{name}.conv2.weight"], params[f"{name}.conv2.bias"], pad=1)
            if f"{name}.proj.weight" in params.tensors:
                shortcut = conv2d(x, params[f"{name}.proj.weight"], params[f"{name}.proj.bias"])
            else:
                shortcut = x
            x = (branch + shortcut).relu()
        else:
            x = max_pool2d(x, block.window)
        features.append(x)

    if spec.pooling == "flatten":
        flat = x.reshape((x.shape[0], -1))
    else:
        flat = global_avg_pool(x)
    embedding = (flat @ params["embed.weight"] + params["embed.bias"]).relu()
    logits = embedding @ params["head.weight"] + params["head.bias"]
    if spec.is_classifier:
        prediction = softmax(logits, axis=-1)
    else:
        prediction = logits.reshape((logits.shape[0],))
    if spec.hint_block_index is None:
        hint = embedding
    else:
        hint = features[spec.hint_block_index]
    return ForwardOutput(logits=logits, embedding=embedding, hint=hint, prediction=prediction, features=features)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_params(params: NetworkParams, path, spec: NetworkSpec | None = None, extra: dict | None = None) -> None:
    """Write a JSON checkpoint.

    Schema::

        {"format": "distillkit-params", "version": 1, "role": "teacher",
         "spec": {...} | null, "extra": {...},
         "layers": {"block0.conv.weight": {"shape": [8, 1, 3, 3], "values": [...]}, ...}}

    Values are written with ``repr`` precision, so loading is bit-exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "role": params.role,
        "spec": spec.to_dict() if spec is not None else None,
        "extra": extra or {},
        "layers": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> tuple[NetworkParams, NetworkSpec | None]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    tensors = {}
    for name, layer in doc["layers"].items():
        values = np.array(layer["values"], dtype=np.float64)
        tensors[name] = Tensor(values.reshape(layer["shape"]), requires_grad=True)
    spec = NetworkSpec.from_dict(doc["spec"]) if doc.get("spec") else None
    return NetworkParams(tensors, role=doc.get("role", "teacher")), spec


# ---------------------------------------------------------------------------
# batched inference
# ---------------------------------------------------------------------------


def infer(params: NetworkParams, spec: NetworkSpec, images: np.ndarray, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Gradient-free forward pass in batches; returns logits, embedding, hint, prediction arrays."""
    from .autograd import no_grad

    images = np.asarray(images, dtype=np.float64)
    parts: dict[str, list] = {"logits": [], "embedding": [], "hint": [], "prediction": []}
    with no_grad():
        for lo in range(0, len(images), batch_size):
            out = forward(params, spec, images[lo:lo + batch_size])
            for key in parts:
                parts[key].append(getattr(out, key).data)
    if not len(images):
        raise ValueError("infer: empty input")
    return {k: np.concatenate(v, axis=0) for k, v in parts.items()}


def embed(params: NetworkParams, spec: NetworkSpec, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return infer(params, spec, images, batch_size)["embedding"]


def predict(params: NetworkParams, spec: NetworkSpec, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class ids (argmax, lowest id on ties) or regression values."""
    out = infer(params, spec, images, batch_size)
    if spec.is_classifier:
        return out["logits"].argmax(axis=1)
    return out["prediction"]
