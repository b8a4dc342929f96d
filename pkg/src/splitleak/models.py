"""Splittable sequential CNN classifiers, training, and the checkpoint format."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensor as T
from .data import Dataset
from .errors import (
    ChecksumMismatch,
    DatasetEmpty,
    FormatVersionMismatch,
    InvalidSplitPoint,
    InvalidSpec,
    IoFailure,
    ShapeMismatch,
)

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "affine", "res")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, **self.args}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(d.pop("kind"), d)


def conv(cin, cout, k=3, stride=1, padding=1):
    return LayerSpec("conv", {"in_channels": cin, "out_channels": cout, "kernel": k, "stride": stride, "padding": padding})


def res(c):
    return LayerSpec("res", {"channels": c})


def affine(din, dout):
    return LayerSpec("affine", {"in_features": din, "out_features": dout})


RELU = LayerSpec("relu")
POOL = LayerSpec("maxpool")
FLATTEN = LayerSpec("flatten")


@dataclass(frozen=True)
class ModelSpec:
    """Layer list plus input shape; ``block_ends`` marks layer indices closing each block."""

    name: str
    input_shape: tuple
    layers: tuple
    num_classes: int
    block_ends: tuple = ()

    def shapes(self) -> list[tuple]:
        """Per-layer output shapes (batch axis omitted); raises InvalidSpec at the first bad layer."""
        shape = tuple(self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise InvalidSpec(-1, f"input shape must be (C,H,W), got {shape}")
        out = []
        flattens = 0
        for i, layer in enumerate(self.layers):
            a = layer.args
            k = layer.kind
            if k not in LAYER_KINDS:
                raise InvalidSpec(i, f"unknown layer kind {k!r}")
            if k in ("conv", "maxpool", "res", "flatten") and len(shape) != 3:
                raise InvalidSpec(i, f"{k} needs a (C,H,W) input, got {shape}")
            if k == "conv":
                if a["in_channels"] != shape[0]:
                    raise InvalidSpec(i, f"conv expects {a['in_channels']} channels, gets {shape[0]}")
                hw = [(s + 2 * a["padding"] - a["kernel"]) // a["stride"] + 1 for s in shape[1:]]
                if min(hw) < 1 or min(s + 2 * a["padding"] for s in shape[1:]) < a["kernel"]:
                    raise InvalidSpec(i, f"conv kernel does not fit {shape}")
                shape = (a["out_channels"], *hw)
            elif k == "res":
                if a["channels"] != shape[0]:
                    raise InvalidSpec(i, f"res block expects {a['channels']} channels, gets {shape[0]}")
            elif k == "maxpool":
                if min(shape[1:]) < 2:
                    raise InvalidSpec(i, f"maxpool needs spatial size >= 2, got {shape}")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif k == "flatten":
                flattens += 1
                shape = (int(np.prod(shape)),)
            elif k == "affine":
                if len(shape) != 1 or a["in_features"] != shape[0]:
                    raise InvalidSpec(i, f"affine expects {a['in_features']} features, gets {shape}")
                shape = (a["out_features"],)
            out.append(shape)
        if flattens != 1:
            raise InvalidSpec(len(self.layers) - 1, f"flatten must appear exactly once, found {flattens}")
        if shape != (self.num_classes,):
            raise InvalidSpec(len(self.layers) - 1, f"head produces {shape}, expected ({self.num_classes},)")
        return out

    @property
    def valid_split_indices(self) -> list[int]:
        shapes = self.shapes()
        return [k for k in range(1, len(self.layers)) if len(shapes[k - 1]) == 3]

    def feature_shape(self, split_index: int) -> tuple:
        if split_index not in self.valid_split_indices:
            raise InvalidSplitPoint(f"{split_index} not in {self.valid_split_indices}")
        return self.shapes()[split_index - 1]

    def block_split(self, block: int) -> int:
        """Layer index of the split placed after 1-based ``block``."""
        if not 1 <= block <= len(self.block_ends):
            raise InvalidSplitPoint(f"{self.name} has blocks 1..{len(self.block_ends)}")
        return self.block_ends[block - 1]

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "num_classes": self.num_classes,
            "block_ends": list(self.block_ends),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["name"],
            tuple(d["input_shape"]),
            tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            d["num_classes"],
            tuple(d.get("block_ends", ())),
        )


def tinyvgg(size: int = 16, num_classes: int = 10, widths=(16, 32, 64, 64)) -> ModelSpec:
    """Plain conv stacks; pooling closes the first three blocks."""
    layers, ends, cin = [], [], 3
    for b, c in enumerate(widths):
        layers += [conv(cin, c), RELU]
        if b < 3:
            layers.append(POOL)
        ends.append(len(layers))
        cin = c
    s = size // 8
    layers += [FLATTEN, affine(cin * s * s, num_classes)]
    return ModelSpec(f"tinyvgg{size}", (3, size, size), tuple(layers), num_classes, tuple(ends))


def tinyres(size: int = 16, num_classes: int = 10, widths=(16, 32, 64, 64)) -> ModelSpec:
    """Conv + residual block per stage; the last block is a bare residual block."""
    layers, ends, cin = [], [], 3
    for b, c in enumerate(widths):
        if b < 3:
            layers += [conv(cin, c), RELU, res(c), POOL]
        else:
            layers.append(res(c))
        ends.append(len(layers))
        cin = c
    s = size // 8
    layers += [FLATTEN, affine(cin * s * s, num_classes)]
    return ModelSpec(f"tinyres{size}", (3, size, size), tuple(layers), num_classes, tuple(ends))


PRESETS = {
    "tinyvgg16": lambda: tinyvgg(16),
    "tinyvgg32": lambda: tinyvgg(32),
    "tinyres16": lambda: tinyres(16),
    "tinyres32": lambda: tinyres(32),
}


def preset(name: str) -> ModelSpec:
    try:
        return PRESETS[name.lower()]()
    except KeyError:
        raise InvalidSpec(-1, f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------- layers


class Layer:
    kind = ""

    def __init__(self):
        self.params: dict[str, torch.Tensor] = {}

    def __call__(self, x):
        raise NotImplementedError


class Conv(Layer):
    kind = "conv"

    def __init__(self, weight, bias, stride, padding):
        super().__init__()
        self.params = {"weight": weight, "bias": bias}
        self.stride, self.padding = stride, padding

    def __call__(self, x):
        return T.conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)


class Res(Layer):
    """relu(x + conv2(relu(conv1(x)))) with 3x3 same-padding convs."""

    kind = "res"

    def __init__(self, w1, b1, w2, b2):
        super().__init__()
        self.params = {"weight1": w1, "bias1": b1, "weight2": w2, "bias2": b2}

    def __call__(self, x):
        p = self.params
        h = T.relu(T.conv2d(x, p["weight1"], p["bias1"], 1, 1))
        return T.relu(x + T.conv2d(h, p["weight2"], p["bias2"], 1, 1))


class Affine(Layer):
    kind = "affine"

    def __init__(self, weight, bias):
        super().__init__()
        self.params = {"weight": weight, "bias": bias}

    def __call__(self, x):
        return T.affine(x, self.params["weight"], self.params["bias"])


class Fn(Layer):
    def __init__(self, kind, fn):
        super().__init__()
        self.kind, self.fn = kind, fn

    def __call__(self, x):
        return self.fn(x)


class Sequential:
    """An ordered run of layers; parameters are shared, never copied."""

    def __init__(self, layers, offset: int = 0):
        self.layers = list(layers)
        self.offset = offset

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    forward = __call__

    def named_parameters(self):
        return [
            (f"{self.offset + i}.{layer.kind}.{name}", t)
            for i, layer in enumerate(self.layers)
            for name, t in layer.params.items()
        ]

    def parameters(self):
        return [t for _, t in self.named_parameters()]


class Model(Sequential):
    def __init__(self, spec: ModelSpec, layers, meta=None):
        super().__init__(layers)
        self.spec = spec
        self.meta = dict(meta or {})

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else torch.float32

    def predict(self, x, batch_size: int = 256) -> torch.Tensor:
        with torch.no_grad():
            return torch.cat([self(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def _he_uniform(shape, fan_in, seed, index, dtype):
    rng = np.random.default_rng([seed, index])
    bound = np.sqrt(6.0 / fan_in)
    return torch.tensor(rng.uniform(-bound, bound, size=shape), dtype=dtype, requires_grad=True)


def _zeros(n, dtype):
    return torch.zeros(n, dtype=dtype, requires_grad=True)


def build_model(spec: ModelSpec, seed: int = 0, dtype=torch.float32) -> Model:
    """He-uniform weights (one seeded stream per weight tensor), zero biases."""
    spec.shapes()
    layers = []
    stream = 0

    def weight(shape, fan_in):
        nonlocal stream
        stream += 1
        return _he_uniform(shape, fan_in, seed, stream, dtype)

    for layer in spec.layers:
        a = layer.args
        if layer.kind == "conv":
            cin, cout, k = a["in_channels"], a["out_channels"], a["kernel"]
            layers.append(Conv(weight((cout, cin, k, k), cin * k * k), _zeros(cout, dtype), a["stride"], a["padding"]))
        elif layer.kind == "res":
            c = a["channels"]
            layers.append(
                Res(weight((c, c, 3, 3), 9 * c), _zeros(c, dtype), weight((c, c, 3, 3), 9 * c), _zeros(c, dtype))
            )
        elif layer.kind == "affine":
            din, dout = a["in_features"], a["out_features"]
            layers.append(Affine(weight((dout, din), din), _zeros(dout, dtype)))
        elif layer.kind == "relu":
            layers.append(Fn("relu", T.relu))
        elif layer.kind == "maxpool":
            layers.append(Fn("maxpool", T.maxpool2d))
        elif layer.kind == "flatten":
            layers.append(Fn("flatten", T.flatten))
    return Model(spec, layers, {"seed": seed})


@dataclass
class SplitModel:
    edge: Sequential
    cloud: Sequential
    split_index: int
    feature_shape: tuple

    def __call__(self, x):
        return self.cloud(self.edge(x))


def split_at(model: Model, split_index: int) -> SplitModel:
    """Partition into edge = layers[:k] and cloud = layers[k:] sharing parameters."""
    if split_index not in model.spec.valid_split_indices:
        raise InvalidSplitPoint(
            f"split {split_index} invalid for {model.spec.name}; valid: {model.spec.valid_split_indices}"
        )
    return SplitModel(
        Sequential(model.layers[:split_index]),
        Sequential(model.layers[split_index:], offset=split_index),
        split_index,
        model.spec.feature_shape(split_index),
    )


def flatten_features(feat: torch.Tensor) -> torch.Tensor:
    """[1,C,H,W] -> [C*H*W], channel-major then row-major."""
    if feat.dim() != 4 or feat.shape[0] != 1:
        raise ShapeMismatch(f"expected a single-sample [1,C,H,W] tensor, got {tuple(feat.shape)}")
    return feat.reshape(-1)


def iterate_batches(n: int, batch_size: int, generator: torch.Generator | None):
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_classifier(
    model: Model, data: Dataset, epochs: int = 10, lr: float = 5e-3, seed: int = 0, batch_size: int = 64
) -> list[float]:
    """Adam on cross-entropy; returns per-epoch training accuracy measured during the pass."""
    if len(data) == 0:
        raise DatasetEmpty("cannot train on an empty dataset")
    if int(data.labels.max()) >= model.spec.num_classes or int(data.labels.min()) < 0:
        raise ValueError("dataset labels exceed the model's class count")
    gen = torch.Generator().manual_seed(seed)
    params = model.parameters()
    state = T.AdamState(lr=lr)
    x_all = data.images.to(model.dtype)
    history = []
    for _ in range(epochs):
        correct = 0
        for idx in iterate_batches(len(data), batch_size, gen):
            logits = model(x_all[idx])
            loss = T.softmax_cross_entropy(logits, data.labels[idx])
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            T.adam_update(params, grads, state)
            correct += int((logits.argmax(dim=1) == data.labels[idx]).sum())
        history.append(correct / len(data))
    model.meta.update({"epochs": model.meta.get("epochs", 0) + epochs, "train_seed": seed})
    if history:
        model.meta["final_accuracy"] = history[-1]
    return history


def evaluate_accuracy(model, data: Dataset, batch_size: int = 256) -> float:
    """Fraction of argmax predictions (lowest index on ties) equal to the label."""
    if len(data) == 0:
        raise DatasetEmpty("cannot evaluate on an empty dataset")
    correct = 0
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            logits = model(data.images[i : i + batch_size].to(_dtype_of(model)))
            correct += int((logits.argmax(dim=1) == data.labels[i : i + batch_size]).sum())
    return correct / len(data)


def _dtype_of(model):
    params = model.parameters() if hasattr(model, "parameters") else []
    return params[0].dtype if params else torch.float32


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SLKC"
CKPT_VERSION = 1
_DTYPES = {4: (torch.float32, "<f4"), 8: (torch.float64, "<f8")}


def encode_checkpoint(header: dict, named: list[tuple[str, torch.Tensor]]) -> bytes:
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(text)), text]
    for name, t in named:
        raw_name = name.encode("utf-8")
        arr = t.detach().cpu().numpy()
        width = arr.dtype.itemsize
        if width not in _DTYPES:
            raise ShapeMismatch(f"{name}: unsupported element type {arr.dtype}")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", width) + arr.astype(_DTYPES[width][1]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(raw: bytes) -> tuple[dict, list[tuple[str, torch.Tensor]]]:
    if len(raw) < 10 or raw[:4] != CKPT_MAGIC:
        raise FormatVersionMismatch("not a splitleak checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CKPT_VERSION:
        raise FormatVersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    if len(raw) < 14 or struct.unpack("<I", raw[-4:])[0] != zlib.crc32(raw[:-4]):
        raise ChecksumMismatch("checkpoint CRC32 does not match")
    end = len(raw) - 4
    (hlen,) = struct.unpack_from("<I", raw, 6)
    pos = 10 + hlen
    try:
        header = json.loads(raw[10:pos].decode("utf-8"))
        named = []
        while pos < end:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            rank = raw[pos]
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 1)
            pos += 1 + 4 * rank
            width = raw[pos]
            dtype, np_dtype = _DTYPES[width]
            count = int(np.prod(dims)) if rank else 1
            chunk = raw[pos + 1 : pos + 1 + width * count]
            if len(chunk) != width * count or pos + 1 + width * count > end:
                raise FormatVersionMismatch(f"{name}: element data runs past the end")
            pos += 1 + width * count
            arr = np.frombuffer(chunk, dtype=np_dtype).reshape(dims)
            named.append((name, torch.tensor(arr, dtype=dtype)))
    except (struct.error, KeyError, IndexError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatVersionMismatch(f"malformed checkpoint body: {exc}") from exc
    return header, named


def checkpoint_size(header: dict, named) -> int:
    """Exact byte size of :func:`encode_checkpoint` output."""
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    total = 4 + 2 + 4 + len(text) + 4
    for name, t in named:
        total += 2 + len(name.encode("utf-8")) + 1 + 4 * t.dim() + 1 + t.element_size() * t.numel()
    return total


def model_header(model: Model) -> dict:
    return {"kind": "model", "spec": model.spec.to_dict(), "meta": model.meta}


def load_parameters(target, named) -> None:
    """Copy tensors into ``target``'s parameters, checking names and shapes."""
    own = target.named_parameters()
    if [n for n, _ in own] != [n for n, _ in named]:
        raise FormatVersionMismatch("checkpoint parameter names do not match the architecture")
    with torch.no_grad():
        for (name, p), (_, t) in zip(own, named):
            if p.shape != t.shape:
                raise FormatVersionMismatch(f"{name}: shape {tuple(t.shape)} != {tuple(p.shape)}")
            p.data = t.clone()


def write_bytes(path, raw: bytes) -> None:
    try:
        Path(path).write_bytes(raw)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def save_checkpoint(model: Model, path) -> None:
    write_bytes(path, encode_checkpoint(model_header(model), model.named_parameters()))


def load_checkpoint(path) -> Model:
    header, named = decode_checkpoint(read_bytes(path))
    if header.get("kind") != "model":
        raise FormatVersionMismatch(f"checkpoint holds a {header.get('kind')!r}, not a model")
    spec = ModelSpec.from_dict(header["spec"])
    dtype = named[0][1].dtype if named else torch.float32
    model = build_model(spec, 0, dtype)
    load_parameters(model, named)
    model.meta = dict(header.get("meta", {}))
    return model
