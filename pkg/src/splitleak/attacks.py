"""Evasion attacks: white-box PGD on a surrogate and query attacks against the served target."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import tensor as T
from .errors import DegenerateDirection, FeedbackUnavailable, InvalidConfig, NonFiniteGradient
from .wire import Client

INF = math.inf
QUERY_METHODS = ("simba-ods", "gfcs", "rgf", "p-rgf", "ods-rgf")
METHODS = ("pgd",) + QUERY_METHODS


@dataclass
class AttackConfig:
    norm: float = 2  # 2 or inf
    eps: float = 1.0  # inf means unbounded (pixel clamp only)
    iters: int = 20
    step: float | None = None
    qmax: int = 100
    feedback: str = "score"
    seed: int = 0
    q: int = 16
    sigma: float = 1e-3
    lam: float = 0.5

    def __post_init__(self):
        if self.norm not in (2, INF):
            raise InvalidConfig(f"norm must be 2 or inf, got {self.norm}")
        if not self.eps >= 0:
            raise InvalidConfig("eps must be >= 0 or inf")
        if self.iters < 1 or self.qmax < 1 or self.q < 1:
            raise InvalidConfig("iters, qmax and q must be >= 1")
        if self.feedback not in ("score", "hard"):
            raise InvalidConfig("feedback must be 'score' or 'hard'")
        if self.step is not None and not self.step > 0:
            raise InvalidConfig("step size must be positive")
        if not 0 <= self.lam <= 1 or not self.sigma > 0:
            raise InvalidConfig("need 0 <= lam <= 1 and sigma > 0")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.eps)

    @property
    def step_size(self) -> float:
        if self.step is not None:
            return self.step
        if not self.bounded:
            return 0.1
        if self.norm == 2:
            return 2 * self.eps / math.sqrt(self.iters)
        return 2.5 * self.eps / self.iters

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


@dataclass
class AttackResult:
    success: bool
    queries: int
    l2: float
    linf: float
    x_adv: torch.Tensor = field(repr=False)
    trace: list = field(default_factory=list, repr=False)  # (queries so far, margin)
    initially_correct: bool = True
    sample_id: int = -1
    fallbacks: int = 0
    directions: int = 0

    def lp(self, norm) -> float:
        return self.l2 if norm == 2 else self.linf


# ---------------------------------------------------------------- geometry


def _norms(delta: torch.Tensor, norm) -> torch.Tensor:
    flat = delta.reshape(delta.shape[0], -1)
    return flat.abs().amax(dim=1) if norm == INF else flat.norm(dim=1)


def project(delta: torch.Tensor, eps: float, norm) -> torch.Tensor:
    """Project a single perturbation (any shape) onto the eps-ball."""
    if not math.isfinite(eps):
        return delta
    if norm == INF:
        return delta.clamp(-eps, eps)
    n = float(delta.norm())
    return delta * (eps / n) if n > eps else delta


def _project_batch(delta, eps, norm):
    if not math.isfinite(eps):
        return delta
    if norm == INF:
        return delta.clamp(-eps, eps)
    n = _norms(delta, 2).clamp_min(1e-30)
    scale = torch.where(n > eps, eps / n, torch.ones_like(n))
    return delta * scale.view(-1, *([1] * (delta.dim() - 1)))


def _unit(g: torch.Tensor, norm) -> torch.Tensor:
    """Steepest-ascent direction of unit norm-step: sign for l-inf, l2-normalised otherwise."""
    if norm == INF:
        return g.sign()
    n = float(g.norm())
    return g / n if n > 0 else g


def _finish(x, x_adv):
    delta = (x_adv - x).reshape(1, -1)
    return float(_norms(delta, 2)[0]), float(_norms(delta, INF)[0])


# ---------------------------------------------------------------- white box


def pgd(surrogate, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    """Untargeted PGD on the surrogate's cross-entropy; batched, no target queries."""
    x = x.detach()
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
    dtype = surrogate.dtype
    delta = torch.zeros_like(x)
    if cfg.bounded and cfg.eps == 0:
        return x.clone()
    step = cfg.step_size
    for _ in range(cfg.iters):
        xd = (x + delta).to(dtype).requires_grad_(True)
        loss = T.softmax_cross_entropy(surrogate(xd), y) * len(y)
        (g,) = torch.autograd.grad(loss, xd)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("surrogate gradient is not finite")
        g = g.to(x.dtype)
        if cfg.norm == INF:
            d = g.sign()
        else:
            d = g / _norms(g, 2).clamp_min(1e-30).view(-1, 1, 1, 1)
        delta = _project_batch(delta + step * d, cfg.eps, cfg.norm)
        delta = (x + delta).clamp(0, 1) - x
    return (x + delta).detach()


def evaluate_transfer(target, adv: torch.Tensor, labels) -> float:
    """Offline success rate of a batch on ``target``; no attack queries are charged."""
    if len(adv) == 0:
        raise ValueError("empty batch")
    labels = torch.as_tensor(labels).reshape(-1)
    with torch.no_grad():
        pred = torch.cat([target(adv[i : i + 256].to(target.dtype)) for i in range(0, len(adv), 256)]).argmax(1)
    return float((pred != labels).float().mean())


# ---------------------------------------------------------------- target oracle


class Oracle:
    """Every target forward goes through ``__call__`` and bumps ``queries`` by one.

    ``fn`` maps one [C,H,W] image to probabilities (score) or a class index (hard).
    ``peek`` runs the same forward without charging it (prescreening only).
    """

    def __init__(self, fn, feedback: str = "score"):
        self.fn = fn
        self.feedback = feedback
        self.queries = 0

    def __call__(self, x):
        self.queries += 1
        return self.fn(x)

    def peek(self, x):
        return self.fn(x)

    @classmethod
    def from_model(cls, model, feedback: str = "score"):
        def fn(x):
            with torch.no_grad():
                logits = model(x.reshape(1, *x.shape[-3:]).to(model.dtype))[0]
            if feedback == "hard":
                return int(logits.argmax())
            return torch.softmax(logits, 0).to(torch.float32).numpy()

        return cls(fn, feedback)

    @classmethod
    def from_client(cls, client: Client):
        mode = client.mode.value
        if mode == "none":
            raise FeedbackUnavailable("the deployment returns no outputs")
        return cls(client.infer, mode)


def predicted_label(out) -> int:
    return int(out) if np.ndim(out) == 0 else int(np.argmax(out))


def margin(probs, y: int) -> float:
    """log p_y - max_{j != y} log p_j; negative once the label flips."""
    lp = np.log(np.maximum(np.asarray(probs, dtype=np.float64), 1e-300))
    other = np.delete(lp, y).max()
    return float(lp[y] - other)


class _Budget:
    def __init__(self, oracle: Oracle, qmax: int):
        self.oracle, self.qmax = oracle, qmax
        self.start = oracle.queries

    @property
    def used(self) -> int:
        return self.oracle.queries - self.start

    @property
    def left(self) -> int:
        return self.qmax - self.used

    def __call__(self, x):
        if self.left <= 0:
            raise _Exhausted
        return self.oracle(x)


class _Exhausted(Exception):
    pass


# ---------------------------------------------------------------- directions


def ods_direction(surrogate, x: torch.Tensor, seed) -> torch.Tensor:
    """Unit-l2 input gradient of w . logits with w ~ U[-1,1]^K.

    ``seed`` is an int or a numpy Generator (consumed in place).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(10):
        xd = x.detach().reshape(1, *x.shape[-3:]).to(surrogate.dtype).requires_grad_(True)
        logits = surrogate(xd)
        w = torch.as_tensor(rng.uniform(-1, 1, size=logits.shape[1]), dtype=logits.dtype)
        (g,) = torch.autograd.grad((logits[0] * w).sum(), xd)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient("ODS gradient is not finite")
        n = float(g.norm())
        if n > 0:
            return (g / n).reshape(x.shape).to(x.dtype)
    raise DegenerateDirection("surrogate gradient vanished for 10 ODS draws")


def _ods_or_random(surrogate, x, rng) -> torch.Tensor:
    # a dead surrogate (all-zero input gradient) must not abort a query attack
    try:
        return ods_direction(surrogate, x, rng)
    except DegenerateDirection:
        z = torch.as_tensor(rng.standard_normal(size=x.shape), dtype=x.dtype)
        return z / z.norm()


def surrogate_gradient(surrogate, x: torch.Tensor, label: int) -> torch.Tensor:
    """Unit-l2 gradient of CE(surrogate(x), label) w.r.t. x (ascent direction)."""
    xd = x.detach().reshape(1, *x.shape[-3:]).to(surrogate.dtype).requires_grad_(True)
    loss = T.softmax_cross_entropy(surrogate(xd), torch.tensor([label]))
    (g,) = torch.autograd.grad(loss, xd)
    if not torch.isfinite(g).all():
        raise NonFiniteGradient("surrogate gradient is not finite")
    n = float(g.norm())
    return (g / n).reshape(x.shape).to(x.dtype) if n > 0 else g.reshape(x.shape).to(x.dtype)


def _surrogate_margin(surrogate, x, y) -> float:
    with torch.no_grad():
        p = torch.softmax(surrogate(x.reshape(1, *x.shape[-3:]).to(surrogate.dtype))[0], 0).numpy()
    return margin(p, y)


# ---------------------------------------------------------------- simba-ods / gfcs


class _Walker:
    """Shared state of the coordinate-style attacks: try +/- step along a direction."""

    def __init__(self, oracle, surrogate, x, y, cfg):
        self.budget = _Budget(oracle, cfg.qmax)
        self.surrogate, self.x, self.y, self.cfg = surrogate, x.detach(), int(y), cfg
        self.hard = oracle.feedback == "hard"
        self.x_adv = self.x.clone()
        self.trace = []
        self.success = False
        self.loss = self._observe(self.x_adv)

    def _observe(self, x):
        out = self.budget(x)
        label = predicted_label(out)
        if label != self.y:
            self.success = True
        loss = _surrogate_margin(self.surrogate, x, self.y) if self.hard else margin(out, self.y)
        self.trace.append((self.budget.used, loss))
        self.label = label
        return loss

    def candidate(self, direction, sign):
        step = self.cfg.step_size * (direction.sign() if self.cfg.norm == INF else direction)
        delta = project(self.x_adv - self.x + sign * step, self.cfg.eps, self.cfg.norm)
        return (self.x + delta).clamp(0, 1)

    def try_direction(self, direction) -> bool:
        """Query +step then -step; accept the first improvement. True if accepted."""
        for sign in (1.0, -1.0):
            cand = self.candidate(direction, sign)
            loss = self._observe(cand)
            if self.success or loss < self.loss:
                self.x_adv, self.loss = cand, loss
                return True
        return False

    def result(self, **extra) -> AttackResult:
        l2, linf = _finish(self.x, self.x_adv)
        return AttackResult(self.success, self.budget.used, l2, linf, self.x_adv, self.trace, **extra)


def simba_ods(oracle: Oracle, surrogate, x, y, cfg: AttackConfig) -> AttackResult:
    rng = np.random.default_rng([cfg.seed, 1])
    w = _Walker(oracle, surrogate, x, y, cfg)
    n = 0
    if cfg.bounded and cfg.eps == 0:
        return w.result()
    try:
        while not w.success:
            n += 1
            w.try_direction(_ods_or_random(surrogate, w.x_adv, rng))
    except _Exhausted:
        pass
    return w.result(directions=n)


def gfcs(oracle: Oracle, surrogate, x, y, cfg: AttackConfig) -> AttackResult:
    """Surrogate-gradient direction first; ODS samples after it fails, until a step is accepted."""
    rng = np.random.default_rng([cfg.seed, 2])
    w = _Walker(oracle, surrogate, x, y, cfg)
    use_grad, n, fallbacks = True, 0, 0
    if cfg.bounded and cfg.eps == 0:
        return w.result()
    try:
        while not w.success:
            n += 1
            if use_grad:
                d = surrogate_gradient(surrogate, w.x_adv, w.label)
            else:
                fallbacks += 1
                d = _ods_or_random(surrogate, w.x_adv, rng)
            # a rejected gradient step switches to ODS until something is accepted
            use_grad = w.try_direction(d)
    except _Exhausted:
        pass
    return w.result(fallbacks=fallbacks, directions=n)


# ---------------------------------------------------------------- rgf family


def rgf_estimate(loss_fn, x: torch.Tensor, directions, sigma: float, base: float | None = None):
    """g = (1/q) sum_i [L(x + sigma u_i) - L(x)] / sigma * u_i over the given unit directions."""
    l0 = loss_fn(x) if base is None else base
    g = torch.zeros_like(x, dtype=torch.float64)
    for u in directions:
        g += (loss_fn(x + sigma * u) - l0) / sigma * u.to(torch.float64)
    return g / len(directions)


def _gaussian_units(rng, q, shape, dtype):
    z = torch.as_tensor(rng.standard_normal(size=(q, *shape)), dtype=dtype)
    return z / z.reshape(q, -1).norm(dim=1).view(q, *([1] * len(shape)))


def rgf_family(oracle: Oracle, surrogate, x, y, cfg: AttackConfig, variant: str = "rgf") -> AttackResult:
    """(q+1) loss queries per estimate, then one projected step and one success check."""
    if variant not in ("rgf", "p_rgf", "ods_rgf", "p-rgf", "ods-rgf"):
        raise InvalidConfig(f"unknown RGF variant {variant!r}")
    variant = variant.replace("-", "_")
    if oracle.feedback != "score":
        raise FeedbackUnavailable("RGF estimation needs score feedback")
    budget = _Budget(oracle, cfg.qmax)
    x = x.detach()
    y = int(y)
    rng = np.random.default_rng([cfg.seed, 3])
    loss = lambda z: margin(budget(z), y)
    x_adv = x.clone()
    out = budget(x_adv)
    success = predicted_label(out) != y
    trace = [(budget.used, margin(out, y))]
    steps = 0
    while not success and budget.left >= cfg.q + 2:
        units = _gaussian_units(rng, cfg.q, x.shape, x.dtype)
        if variant == "p_rgf" and cfg.lam > 0:
            prior = surrogate_gradient(surrogate, x_adv, y)
            mixed = cfg.lam * prior + (1 - cfg.lam) * units
            units = mixed / mixed.reshape(cfg.q, -1).norm(dim=1).view(cfg.q, 1, 1, 1)
        elif variant == "ods_rgf":
            units = torch.stack([_ods_or_random(surrogate, x_adv, rng) for _ in range(cfg.q)])
        g = rgf_estimate(loss, x_adv, units, cfg.sigma).to(x.dtype)
        steps += 1
        # margin is minimised, so step against the estimate
        delta = project(x_adv - x - cfg.step_size * _unit(g, cfg.norm), cfg.eps, cfg.norm)
        x_adv = (x + delta).clamp(0, 1)
        out = budget(x_adv)
        success = predicted_label(out) != y
        trace.append((budget.used, margin(out, y)))
    l2, linf = _finish(x, x_adv)
    return AttackResult(success, budget.used, l2, linf, x_adv, trace, directions=steps)


def get_attack(method: str):
    method = method.replace("_", "-")
    if method == "simba-ods":
        return simba_ods
    if method == "gfcs":
        return gfcs
    if method in ("rgf", "p-rgf", "ods-rgf"):
        return lambda o, s, x, y, c: rgf_family(o, s, x, y, c, method)
    raise InvalidConfig(f"unknown query attack {method!r}; choose from {QUERY_METHODS}")


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepSummary:
    results: list
    sr: float
    aq: float | None
    ap_l2: float | None
    ap_p: float | None
    attempted: int
    excluded: int

    @property
    def successes(self) -> int:
        return sum(r.success for r in self.results if r.initially_correct)


def aggregate(results: list, norm=2) -> SweepSummary:
    """SR over initially-correct samples; AQ and AP over successes only (None when there are none)."""
    live = [r for r in results if r.initially_correct]
    wins = [r for r in live if r.success]
    sr = len(wins) / len(live) if live else 0.0
    aq = float(np.mean([r.queries for r in wins])) if wins else None
    ap2 = float(np.mean([r.l2 for r in wins])) if wins else None
    app = float(np.mean([r.lp(norm) for r in wins])) if wins else None
    return SweepSummary(results, sr, aq, ap2, app, len(live), len(results) - len(live))


def run_attack_sweep(attack, oracle: Oracle, surrogate, images, labels, cfg: AttackConfig, ids=None) -> SweepSummary:
    """Attack every initially-correct sample; misclassified ones are recorded and skipped.

    Each sample gets its own seed stream (cfg.seed, sample id).
    """
    if isinstance(attack, str):
        attack = get_attack(attack)
    labels = torch.as_tensor(labels).reshape(-1)
    ids = list(range(len(images))) if ids is None else [int(i) for i in ids]
    results = []
    for i, sid in enumerate(ids):
        x, y = images[i], int(labels[i])
        if predicted_label(oracle.peek(x)) != y:
            results.append(AttackResult(False, 0, 0.0, 0.0, x, initially_correct=False, sample_id=sid))
            continue
        sample_cfg = cfg.with_(seed=int(np.random.SeedSequence([cfg.seed, sid]).generate_state(1)[0]))
        r = attack(oracle, surrogate, x, y, sample_cfg)
        r.sample_id = sid
        results.append(r)
    return aggregate(results, cfg.norm)


def pgd_results(surrogate, target, images, labels, cfg: AttackConfig, ids=None) -> SweepSummary:
    """PGD on the surrogate, scored offline on the target (zero queries)."""
    labels = torch.as_tensor(labels).reshape(-1)
    ids = list(range(len(images))) if ids is None else [int(i) for i in ids]
    adv = pgd(surrogate, images, labels, cfg)
    with torch.no_grad():
        clean = target.predict(images).argmax(1)
        pred = target.predict(adv).argmax(1)
    out = []
    for i, sid in enumerate(ids):
        l2, linf = _finish(images[i], adv[i])
        ok = bool(clean[i] == labels[i])
        out.append(AttackResult(ok and bool(pred[i] != labels[i]), 0, l2, linf, adv[i], initially_correct=ok, sample_id=sid))
    return aggregate(out, cfg.norm)


RESULT_COLUMNS = ["sample_id", "success", "queries", "l2_delta", "linf_delta", "initially_correct"]
SUMMARY_COLUMNS = ["attempted", "excluded", "successes", "sr", "avg_queries", "avg_pert_l2"]


def result_rows(results) -> list[dict]:
    return [
        {
            "sample_id": r.sample_id,
            "success": r.success,
            "queries": r.queries,
            "l2_delta": r.l2,
            "linf_delta": r.linf,
            "initially_correct": r.initially_correct,
        }
        for r in results
    ]


def summary_row(s: SweepSummary) -> dict:
    return {
        "attempted": s.attempted,
        "excluded": s.excluded,
        "successes": s.successes,
        "sr": s.sr,
        "avg_queries": s.aq,
        "avg_pert_l2": s.ap_l2,
    }
