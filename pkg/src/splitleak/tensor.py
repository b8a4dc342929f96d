"""Differentiable tensor ops used by the models, adaptation blocks and attacks.

Tensors are plain ``torch.Tensor`` objects; reverse-mode accumulation is
torch's autograd tape. This module pins the exact semantics the rest of the
package relies on (shape checks, interpolation convention, pooling ties,
loss definitions) and provides the optimizer and the finite-difference
gradient checker.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import LabelOutOfRange, NonFinite, NotADistribution, ShapeMismatch

__all__ = [
    "conv2d",
    "conv_transpose2d",
    "interpolate_bilinear",
    "relu",
    "affine",
    "maxpool2d",
    "flatten",
    "softmax_cross_entropy",
    "kl_divergence",
    "mse",
    "AdamState",
    "adam_update",
    "grad_check",
    "deterministic",
]


def deterministic(threads: int = 1) -> None:
    """Single-threaded, deterministic kernels; required for byte-identical reruns."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def _check_rank(t: torch.Tensor, rank: int, what: str) -> None:
    if t.dim() != rank:
        raise ShapeMismatch(f"{what}: expected rank {rank}, got shape {tuple(t.shape)}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> torch.Tensor:
    """Cross-correlation of ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin,kh,kw]."""
    _check_rank(x, 4, "conv2d input")
    _check_rank(weight, 4, "conv2d weight")
    if stride < 1 or padding < 0:
        raise ShapeMismatch(f"invalid stride {stride} / padding {padding}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"conv2d channels: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeMismatch(f"conv2d bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    for size, k in ((x.shape[2], weight.shape[2]), (x.shape[3], weight.shape[3])):
        if size + 2 * padding - k < 0:
            raise ShapeMismatch(f"conv2d kernel {k} larger than padded size {size + 2 * padding}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride: int = 1) -> torch.Tensor:
    """Adjoint of :func:`conv2d` (zero padding); output size (H-1)*stride + kh."""
    _check_rank(x, 4, "conv_transpose2d input")
    _check_rank(weight, 4, "conv_transpose2d weight")
    if stride < 1:
        raise ShapeMismatch(f"invalid stride {stride}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeMismatch(
            f"conv_transpose2d channels: input has {x.shape[1]}, weight expects {weight.shape[0]}"
        )
    if bias is not None and tuple(bias.shape) != (weight.shape[1],):
        raise ShapeMismatch(f"conv_transpose2d bias shape {tuple(bias.shape)} != ({weight.shape[1]},)")
    return F.conv_transpose2d(x, weight, bias, stride=stride)


def interpolate_bilinear(x, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize with half-pixel centres and edge clamping.

    Source coordinate for output index i is (i + 0.5) * H / out_h - 0.5,
    clamped below at 0; the upper neighbour is clamped to H - 1. Equal sizes
    return the input unchanged.
    """
    _check_rank(x, 4, "interpolate input")
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"output size must be positive, got {out_h}x{out_w}")
    if x.shape[2] == out_h and x.shape[3] == out_w:
        return x
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)


def relu(x) -> torch.Tensor:
    return torch.relu(x)


def affine(x, weight, bias=None) -> torch.Tensor:
    """``x @ weight.T + bias`` for x [N,Din], weight [Dout,Din]."""
    _check_rank(x, 2, "affine input")
    _check_rank(weight, 2, "affine weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"affine: input dim {x.shape[1]} != weight dim {weight.shape[1]}")
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeMismatch(f"affine bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.linear(x, weight, bias)


def maxpool2d(x, k: int = 2, stride: int = 2) -> torch.Tensor:
    # torch's CPU kernel keeps the first maximum of a row-major window scan on ties
    _check_rank(x, 4, "maxpool input")
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeMismatch(f"maxpool window {k} larger than {tuple(x.shape[2:])}")
    return F.max_pool2d(x, kernel_size=k, stride=stride)


def flatten(x) -> torch.Tensor:
    """[N, ...] -> [N, prod(...)] in row-major (channel, height, width) order."""
    return x.reshape(x.shape[0], -1)


def softmax_cross_entropy(logits, labels) -> torch.Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    _check_rank(logits, 2, "logits")
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1)
    if labels.numel() != logits.shape[0]:
        raise ShapeMismatch(f"{labels.numel()} labels for {logits.shape[0]} rows")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def kl_divergence(p, q_logits) -> torch.Tensor:
    """Batch mean of sum_i p_i log(p_i / softmax(q)_i); p is treated as a constant."""
    _check_rank(q_logits, 2, "q_logits")
    p = torch.as_tensor(p, dtype=q_logits.dtype).detach()
    if p.shape != q_logits.shape:
        raise ShapeMismatch(f"p shape {tuple(p.shape)} != logits shape {tuple(q_logits.shape)}")
    if bool((p < 0).any()) or bool(((p.sum(dim=1) - 1).abs() > 1e-5).any()):
        raise NotADistribution("rows of p must be non-negative and sum to 1")
    log_q = torch.log_softmax(q_logits, dim=1)
    # xlogy gives 0 * log 0 = 0
    return (torch.xlogy(p, p) - p * log_q).sum(dim=1).mean()


def mse(a, b) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


@torch.no_grad()
def adam_update(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState) -> None:
    """One bias-corrected Adam step applied in place. ``None`` grads count as zero."""
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeMismatch("optimizer state was created for a different parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        m_hat = m / c1
        v_hat = v / c2
        p.sub_(state.lr * m_hat / (v_hat.sqrt() + state.eps_stab))


def grad_check(fn: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor, h: float = 1e-5) -> float:
    """Max relative error between autograd and central differences of a scalar ``fn``.

    Runs in float64. Per coordinate the error is
    |g - g_fd| / max(1e-12, |g| + |g_fd|).
    """
    x = point.detach().to(torch.float64).clone().requires_grad_(True)
    out = fn(x)
    if not torch.isfinite(out).all():
        raise NonFinite("function value is not finite at the check point")
    g = None
    if out.requires_grad:
        (g,) = torch.autograd.grad(out, x, allow_unused=True)
    g = torch.zeros_like(x) if g is None else g.detach()
    if not torch.isfinite(g).all():
        raise NonFinite("autograd gradient is not finite")

    flat = x.detach().clone().reshape(-1)
    fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn(flat.reshape(x.shape)).item()
            flat[i] = orig - h
            down = fn(flat.reshape(x.shape)).item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NonFinite(f"function not finite near coordinate {i}")
            fd[i] = (up - down) / (2.0 * h)
    g = g.reshape(-1)
    err = (g - fd).abs() / torch.clamp(g.abs() + fd.abs(), min=1e-12)
    return float(err.max()) if err.numel() else 0.0
