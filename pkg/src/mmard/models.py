"""Classifier architectures, initialization and checkpoint persistence."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointShapeError,
    CorruptCheckpointError,
    NotACheckpointError,
    ShapeError,
)
from .tensorcore import Graph, Tensor, apply, forward_value

CHECKPOINT_MAGIC = b"MMCK"
CHECKPOINT_VERSION = 1

FAMILIES = ("mlp", "smallcnn")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor.

    ``mlp`` uses ``hidden`` as the hidden-layer widths over a flat input.
    ``smallcnn`` uses ``channels`` as the conv schedule (one ``kernel``-sized
    conv per entry, stride 2 after the first) followed by a linear head.
    """

    family: str
    input_shape: tuple
    num_classes: int
    hidden: tuple = ()
    channels: tuple = ()
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ShapeError(f"unknown architecture family {self.family!r}")
        if self.num_classes < 2:
            raise ShapeError(f"class count must be >= 2, got {self.num_classes}")
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ShapeError(f"bad input shape {list(self.input_shape)}")
        if any(w < 1 for w in self.hidden) or any(c < 1 for c in self.channels):
            raise ShapeError("all widths must be >= 1")
        if self.family == "smallcnn":
            if len(self.input_shape) != 3:
                raise ShapeError("smallcnn needs a (channels, height, width) input shape")
            if not self.channels:
                raise ShapeError("smallcnn needs at least one conv layer")
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ShapeError(f"smallcnn kernel must be odd, got {self.kernel}")

    def conv_strides(self) -> list[int]:
        return [1] + [2] * (len(self.channels) - 1)

    def descriptor(self) -> str:
        return json.dumps(
            {
                "family": self.family,
                "input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "hidden": list(self.hidden),
                "channels": list(self.channels),
                "kernel": self.kernel,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_descriptor(cls, text: str) -> "ArchSpec":
        d = json.loads(text)
        return cls(
            family=d["family"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            hidden=tuple(d.get("hidden", ())),
            channels=tuple(d.get("channels", ())),
            kernel=int(d.get("kernel", 3)),
        )

    def param_shapes(self) -> list[tuple[str, tuple]]:
        shapes = []
        if self.family == "mlp":
            widths = [int(np.prod(self.input_shape))] + list(self.hidden) + [self.num_classes]
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                shapes += [(f"fc{i}.weight", (a, b)), (f"fc{i}.bias", (b,))]
            return shapes
        c, h, w = self.input_shape
        pad = self.kernel // 2
        for i, (cout, stride) in enumerate(zip(self.channels, self.conv_strides())):
            shapes += [(f"conv{i}.weight", (cout, c, self.kernel, self.kernel)), (f"conv{i}.bias", (cout,))]
            h = (h + 2 * pad - self.kernel) // stride + 1
            w = (w + 2 * pad - self.kernel) // stride + 1
            c = cout
        shapes += [("head.weight", (c * h * w, self.num_classes)), ("head.bias", (self.num_classes,))]
        return shapes


def mlp(input_dim: int, hidden, num_classes: int) -> ArchSpec:
    return ArchSpec("mlp", (input_dim,), num_classes, hidden=tuple(hidden))


@dataclass
class Model:
    arch: ArchSpec
    params: dict = field(default_factory=dict)  # name -> np.ndarray, in arch order
    frozen: bool = False

    def frozen_copy(self) -> "Model":
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()}, frozen=True)

    def copy(self) -> "Model":
        return Model(self.arch, {k: v.copy() for k, v in self.params.items()}, frozen=self.frozen)

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256(self.arch.descriptor().encode())
        for name, value in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return h.hexdigest()


def build_model(arch: ArchSpec, seed: int) -> Model:
    """Fan-in scaled uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    arch.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(arch, params)


def _check_batch(model: Model, shape: tuple):
    if tuple(shape[1:]) != model.arch.input_shape:
        raise ShapeError(
            f"batch shape {list(shape)} does not match model input {list(model.arch.input_shape)}"
        )


def bind_params(model: Model, graph: Graph) -> dict:
    """Attach the model's parameters to ``graph`` once; repeated calls reuse the leaves.

    Frozen models are attached as constants, so no gradient path reaches them.
    """
    cache = graph.bindings
    key = id(model)
    if key not in cache:
        if model.frozen:
            cache[key] = (model, {k: graph.constant(v) for k, v in model.params.items()})
        else:
            cache[key] = (model, {k: graph.leaf(v) for k, v in model.params.items()})
    return cache[key][1]


def forward_logits(model: Model, batch, graph: Graph) -> Tensor:
    """Record the forward pass of ``batch`` on ``graph``; returns [N, C] logits."""
    x = batch if isinstance(batch, Tensor) and batch.graph is graph else graph.constant(
        batch.data if isinstance(batch, Tensor) else batch
    )
    _check_batch(model, x.shape)
    p = bind_params(model, graph)
    return _run(model.arch, x, p, lambda kind, ins, attrs=None: apply(graph, kind, ins, attrs))


def predict_logits(model: Model, x: np.ndarray) -> np.ndarray:
    """Graph-free forward pass, used for teachers and evaluation."""
    x = np.asarray(x, dtype=np.float64)
    _check_batch(model, x.shape)
    return _run(model.arch, x, model.params, lambda kind, ins, attrs=None: forward_value(kind, ins, attrs))


def _run(arch: ArchSpec, x, p, op):
    if arch.family == "mlp":
        h = op("flatten", [x]) if len(arch.input_shape) > 1 else x
        n_layers = len(arch.hidden) + 1
        for i in range(n_layers):
            h = op("affine", [h, p[f"fc{i}.weight"], p[f"fc{i}.bias"]])
            if i < n_layers - 1:
                h = op("relu", [h])
        return h
    h = x
    for i, stride in enumerate(arch.conv_strides()):
        h = op(
            "conv2d",
            [h, p[f"conv{i}.weight"], p[f"conv{i}.bias"]],
            {"stride": stride, "padding": arch.kernel // 2},
        )
        h = op("relu", [h])
    h = op("flatten", [h])
    return op("affine", [h, p["head.weight"], p["head.bias"]])


# -- checkpoint file ---------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    desc = model.arch.descriptor().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(desc)), desc]
    parts.append(struct.pack("<I", len(model.params)))
    for name, value in model.params.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<B", value.ndim)]
        parts += [struct.pack("<I", d) for d in value.shape]
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, error):
        self.buf, self.pos, self.error = buf, 0, error

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise self.error("truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def text(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise self.error("invalid UTF-8 text") from None


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic)")

    def corrupt(msg):
        return CorruptCheckpointError(f"{path}: corrupt checkpoint ({msg})")

    r = _Reader(buf, corrupt)
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise corrupt(f"unsupported version {version}")
    try:
        arch = ArchSpec.from_descriptor(r.text())
    except (ValueError, KeyError, TypeError) as exc:
        raise corrupt(f"bad architecture descriptor: {exc}") from None
    expected = dict(arch.param_shapes())
    count = r.u32()
    params = {}
    for _ in range(count):
        name = r.text()
        shape = tuple(r.u32() for _ in range(r.u8()))
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if expected.get(name) != shape:
            raise CheckpointShapeError(
                f"{path}: parameter {name!r} has shape {list(shape)}, architecture expects "
                f"{list(expected[name]) if name in expected else 'no such parameter'}"
            )
    if r.pos != len(buf):
        raise corrupt("trailing bytes")
    if set(params) != set(expected):
        raise CheckpointShapeError(f"{path}: parameter set does not match the architecture header")
    return Model(arch, {name: params[name] for name, _ in arch.param_shapes()})
