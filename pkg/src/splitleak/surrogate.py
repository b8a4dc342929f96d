"""Partitioned surrogate with adaptation blocks, trained by feature + output distillation."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from . import tensor as T
from .errors import (
    ChecksumMismatch,
    DatasetEmpty,
    DivergedLoss,
    FormatVersionMismatch,
    InconsistentDim,
    InvalidConfig,
    MissingSupervision,
    ShapeEstimateMissing,
    Truncated,
)
from .models import (
    Conv,
    Layer,
    Model,
    ModelSpec,
    Sequential,
    _he_uniform,
    _zeros,
    build_model,
    decode_checkpoint,
    encode_checkpoint,
    iterate_batches,
    load_parameters,
    read_bytes,
    split_at,
    write_bytes,
)
from .shape import ShapeEstimate


class ConvT(Layer):
    kind = "convT"

    def __init__(self, weight, bias, stride):
        super().__init__()
        self.params = {"weight": weight, "bias": bias}
        self.stride = stride

    def __call__(self, x):
        return T.conv_transpose2d(x, self.params["weight"], self.params["bias"], self.stride)


class Resize(Layer):
    kind = "interp"

    def __init__(self, h, w):
        super().__init__()
        self.size = (h, w)

    def __call__(self, x):
        return T.interpolate_bilinear(x, *self.size)


def plan_stages(src_hw, dst_hw) -> list[str]:
    """'up' (x2) or 'down' (/2) steps while both spatial dims are at least a factor 2 off."""
    h, w = src_hw
    th, tw = dst_hw
    stages = []
    while True:
        if 2 * h <= th and 2 * w <= tw:
            stages.append("up")
            h, w = 2 * h, 2 * w
        elif h >= 2 * th and w >= 2 * tw:
            stages.append("down")
            h, w = (h + 1) // 2, (w + 1) // 2
        else:
            return stages


class _Stream:
    def __init__(self, seed, dtype, base=0):
        self.seed, self.dtype, self.index = seed, dtype, base

    def weight(self, shape, fan_in):
        self.index += 1
        return _he_uniform(shape, fan_in, self.seed, self.index, self.dtype)


def build_encoder(src_shape, dst_shape, seed: int = 0, dtype=torch.float32) -> Sequential:
    """1x1 channel map, then x2 / /2 stages, then bilinear resize to the exact target."""
    if min(src_shape) < 1 or min(dst_shape) < 1:
        raise ValueError("all dimensions must be >= 1")
    cs, hs, ws = src_shape
    c, h, w = dst_shape
    rng = _Stream(seed, dtype, base=1000)
    layers: list[Layer] = [Conv(rng.weight((c, cs, 1, 1), cs), _zeros(c, dtype), 1, 0)]
    for step in plan_stages((hs, ws), (h, w)):
        if step == "up":
            layers.append(ConvT(rng.weight((c, c, 2, 2), c * 4), _zeros(c, dtype), 2))
        else:
            layers.append(Conv(rng.weight((c, c, 3, 3), c * 9), _zeros(c, dtype), 2, 1))
    layers.append(Resize(h, w))
    return Sequential(layers)


def build_decoder(feat_shape, backbone_shape, seed: int = 0, dtype=torch.float32) -> Sequential:
    """3x3 conv back to the backbone's channel count, then resize to its spatial size."""
    c = feat_shape[0]
    cb, hb, wb = backbone_shape
    rng = _Stream(seed, dtype, base=2000)
    return Sequential([Conv(rng.weight((cb, c, 3, 3), c * 9), _zeros(cb, dtype), 1, 1), Resize(hb, wb)])


class SurrogateModel:
    """g_e = encoder . backbone_edge ; g_c = backbone_cloud . decoder."""

    def __init__(self, backbone: Model, split_index: int, target_shape, encoder, decoder, seed: int = 0):
        part = split_at(backbone, split_index)
        self.backbone = backbone
        self.split_index = split_index
        self.backbone_shape = part.feature_shape
        self.target_shape = tuple(target_shape)
        self.backbone_edge, self.backbone_cloud = part.edge, part.cloud
        self.encoder, self.decoder = encoder, decoder
        self.seed = seed

    def features(self, x):
        return self.encoder(self.backbone_edge(x))

    def cloud(self, feat):
        return self.backbone_cloud(self.decoder(feat))

    def __call__(self, x):
        return self.cloud(self.features(x))

    @property
    def edge(self):
        return self.features

    def named_parameters(self):
        out = [(f"backbone.{n}", p) for n, p in self.backbone.named_parameters()]
        out += [(f"encoder.{n}", p) for n, p in self.encoder.named_parameters()]
        out += [(f"decoder.{n}", p) for n, p in self.decoder.named_parameters()]
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    @property
    def dtype(self):
        return self.backbone.dtype

    @property
    def num_classes(self) -> int:
        return self.backbone.spec.num_classes

    def predict(self, x, batch_size: int = 256):
        with torch.no_grad():
            return torch.cat([self(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])

    def header(self) -> dict:
        return {
            "kind": "surrogate",
            "backbone": self.backbone.spec.to_dict(),
            "split": self.split_index,
            "target_shape": list(self.target_shape),
            "seed": self.seed,
            "meta": self.backbone.meta,
        }


def assemble_surrogate(backbone, split_index: int, target_shape, seed: int = 0) -> SurrogateModel:
    """Wire adaptation blocks around ``backbone`` split at ``split_index``.

    ``backbone`` is either a built model or a ModelSpec (built from ``seed``).
    """
    if isinstance(backbone, ModelSpec):
        backbone = build_model(backbone, seed)
    src = backbone.spec.feature_shape(split_index)
    dtype = backbone.dtype
    enc = build_encoder(src, target_shape, seed, dtype)
    dec = build_decoder(target_shape, src, seed, dtype)
    return SurrogateModel(backbone, split_index, target_shape, enc, dec, seed)


def save_surrogate(g: SurrogateModel, path) -> None:
    write_bytes(path, encode_checkpoint(g.header(), g.named_parameters()))


def load_surrogate(path) -> SurrogateModel:
    header, named = decode_checkpoint(read_bytes(path))
    if header.get("kind") != "surrogate":
        raise FormatVersionMismatch(f"checkpoint holds a {header.get('kind')!r}, not a surrogate")
    dtype = named[0][1].dtype if named else torch.float32
    backbone = build_model(ModelSpec.from_dict(header["backbone"]), header["seed"], dtype)
    g = assemble_surrogate(backbone, header["split"], tuple(header["target_shape"]), header["seed"])
    load_parameters(g, named)
    backbone.meta = dict(header.get("meta", {}))
    return g


# ---------------------------------------------------------------- distillation

OUTPUT_MODES = ("score", "hard", "label")


@dataclass
class DistillationConfig:
    alpha: float = 0.5
    beta: float = 0.5
    mode: str = "score"
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise InvalidConfig("alpha and beta must be non-negative")
        if self.alpha + self.beta <= 0:
            raise InvalidConfig("alpha + beta must be positive")
        if self.mode not in OUTPUT_MODES:
            raise InvalidConfig(f"mode must be one of {OUTPUT_MODES}")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfig("lr must be positive, epochs >= 0, batch_size >= 1")


@dataclass
class QueryDataset:
    """Attacker inputs aligned with intercepted features and whatever the target returned."""

    inputs: torch.Tensor
    features: torch.Tensor
    probs: torch.Tensor | None = None
    hard: torch.Tensor | None = None
    labels: torch.Tensor | None = None

    def __post_init__(self):
        n = len(self.inputs)
        for name in ("features", "probs", "hard", "labels"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise InconsistentDim(f"{name} has {len(v)} rows, inputs have {n}")

    def __len__(self):
        return len(self.inputs)

    def take(self, idx) -> "QueryDataset":
        pick = lambda v: None if v is None else v[idx]
        return QueryDataset(self.inputs[idx], self.features[idx], pick(self.probs), pick(self.hard), pick(self.labels))

    @property
    def available_modes(self) -> list[str]:
        return [m for m, v in zip(OUTPUT_MODES, (self.probs, self.hard, self.labels)) if v is not None]


def distillation_loss(g: SurrogateModel, batch: QueryDataset, cfg: DistillationConfig):
    """Returns (total, feature term, output term); total = alpha*feature + beta*output."""
    x = batch.inputs.to(g.dtype)
    feat = g.features(x)
    logits = g.cloud(feat)
    l_feat = T.mse(feat, batch.features.to(g.dtype))
    if cfg.mode == "score":
        if batch.probs is None:
            raise MissingSupervision("score mode needs observed probabilities")
        l_out = T.kl_divergence(batch.probs.to(g.dtype), logits)
    elif cfg.mode == "hard":
        if batch.hard is None:
            raise MissingSupervision("hard mode needs observed class indices")
        l_out = T.softmax_cross_entropy(logits, batch.hard)
    else:
        if batch.labels is None:
            raise MissingSupervision("label mode needs ground-truth labels")
        l_out = T.softmax_cross_entropy(logits, batch.labels)
    return cfg.alpha * l_feat + cfg.beta * l_out, l_feat, l_out


def train_surrogate(g: SurrogateModel, data: QueryDataset, cfg: DistillationConfig) -> dict:
    """Adam over all surrogate parameters; per-epoch mean total/feature/output losses."""
    cfg.validate()
    if len(data) == 0:
        raise DatasetEmpty("no queries to distill from")
    gen = torch.Generator().manual_seed(cfg.seed)
    params = g.parameters()
    state = T.AdamState(lr=cfg.lr)
    history = {"total": [], "feature": [], "output": []}
    for epoch in range(cfg.epochs):
        sums = np.zeros(3)
        for idx in iterate_batches(len(data), cfg.batch_size, gen):
            total, l_feat, l_out = distillation_loss(g, data.take(idx), cfg)
            if not torch.isfinite(total):
                raise DivergedLoss(f"loss became {float(total)} in epoch {epoch}")
            grads = torch.autograd.grad(total, params, allow_unused=True)
            T.adam_update(params, grads, state)
            sums += np.array([total.item(), l_feat.item(), l_out.item()]) * len(idx)
        for key, value in zip(("total", "feature", "output"), sums / len(data)):
            history[key].append(float(value))
    return history


def collect_queries(client, sniffer, inputs, estimate=None, labels=None) -> QueryDataset:
    """Query the deployment once per input while ``sniffer`` records the feature link.

    ``estimate`` is a ShapeEstimate, or a callable that receives the new
    capture rows and returns one (so the shape can be inferred from the
    same traffic).
    """
    if estimate is None:
        raise ShapeEstimateMissing("a shape estimate (or estimator) is required to reshape captures")
    start = sniffer.n
    outputs = [client.infer(x) for x in inputs]
    rows = sniffer.matrix()[start:]
    if len(rows) != len(inputs):
        raise InconsistentDim(f"captured {len(rows)} feature rows for {len(inputs)} queries")
    if not isinstance(estimate, ShapeEstimate):
        estimate = estimate(rows)
    c, h, w = estimate.shape
    if c * h * w != rows.shape[1]:
        raise InconsistentDim(f"estimated shape {(c, h, w)} does not cover d={rows.shape[1]}")
    feats = torch.from_numpy(rows.astype(np.float32).reshape(len(rows), c, h, w))
    x = torch.stack([torch.as_tensor(v, dtype=torch.float32) for v in inputs])
    probs = hard = None
    mode = client.mode.value
    if mode == "score":
        probs = torch.from_numpy(np.stack(outputs))
        probs = probs / probs.sum(dim=1, keepdim=True)
    elif mode == "hard":
        hard = torch.tensor(outputs, dtype=torch.long)
    lab = None if labels is None else torch.as_tensor(labels, dtype=torch.long)
    if mode == "none" and lab is None:
        raise MissingSupervision("the deployment returns no outputs and no labels were supplied")
    return QueryDataset(x, feats, probs, hard, lab)


# ---------------------------------------------------------------- query log

QLOG_MAGIC = b"SLKQ"
QLOG_VERSION = 1
_QLOG_HEADER = struct.Struct("<4sHIIIII")


def write_query_log(path, inputs, probs=None, labels=None) -> None:
    """``SLKQ`` | version u16 | count, C, H, W, K (u32) | items | CRC32.

    Item: flags u8 (bit0 probs, bit1 label) | input f32[C*H*W] | probs f32[K]? | label u16?
    """
    inputs = np.asarray(inputs, dtype="<f4")
    n, c, h, w = inputs.shape
    k = 0 if probs is None else np.asarray(probs).shape[1]
    parts = [_QLOG_HEADER.pack(QLOG_MAGIC, QLOG_VERSION, n, c, h, w, k)]
    for i in range(n):
        flags = (probs is not None) | ((labels is not None) << 1)
        parts.append(struct.pack("<B", flags) + inputs[i].tobytes())
        if probs is not None:
            parts.append(np.asarray(probs[i], dtype="<f4").tobytes())
        if labels is not None:
            parts.append(struct.pack("<H", int(labels[i])))
    body = b"".join(parts)
    write_bytes(path, body + struct.pack("<I", zlib.crc32(body)))


def read_query_log(path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    raw = read_bytes(path)
    if len(raw) < _QLOG_HEADER.size + 4:
        raise Truncated("query log shorter than its header")
    magic, version, n, c, h, w, k = _QLOG_HEADER.unpack_from(raw)
    if magic != QLOG_MAGIC or version != QLOG_VERSION:
        raise FormatVersionMismatch("not a version-1 query log")
    if struct.unpack("<I", raw[-4:])[0] != zlib.crc32(raw[:-4]):
        raise ChecksumMismatch("query log CRC32 does not match")
    pos, d = _QLOG_HEADER.size, c * h * w
    inputs, probs, labels = [], [], []
    for _ in range(n):
        flags = raw[pos]
        pos += 1
        inputs.append(np.frombuffer(raw, "<f4", d, pos))
        pos += 4 * d
        if flags & 1:
            probs.append(np.frombuffer(raw, "<f4", k, pos))
            pos += 4 * k
        if flags & 2:
            labels.append(struct.unpack_from("<H", raw, pos)[0])
            pos += 2
    x = np.stack(inputs).reshape(n, c, h, w) if n else np.zeros((0, c, h, w), "<f4")
    return x, (np.stack(probs) if probs else None), (np.array(labels) if labels else None)
