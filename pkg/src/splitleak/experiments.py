"""Seeded desk-scale experiment pipelines.

Every pipeline goes through the same attacker path: the target is deployed
behind the simulated wire, a passive sniffer records the feature link while
the attacker queries, the feature shape is estimated from the capture and the
surrogates are distilled from what was observed. Attacks then query the
deployment through a counting oracle.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import attacks as A
from . import data as D
from . import models as M
from . import reports as R
from . import surrogate as G
from .errors import DatasetEmpty, InvalidConfig, SplitLeakError
from .shape import ShapeEstimate, estimate_shape
from .tensor import deterministic
from .wire import Client, SimulatedDeployment, Sniffer

EXPERIMENTS = ("sr-vs-queries", "eps-table", "unbounded", "split-matrix", "cleanacc-corr", "shape-batch")


@dataclass
class ExperimentConfig:
    experiment: str = "eps-table"
    # data
    dataset: str = "pattern"  # pattern | synthetic | idx | cifar10
    data_path: str = ""
    data_seed: int = 1
    n_train: int = 2000
    n_holdout: int = 2000
    # target
    target: str = "tinyres16"  # preset name or checkpoint path
    target_epochs: int = 15
    target_lr: float = 3e-3
    target_seed: int = 0
    tsplit: int = 2  # block number
    # surrogate
    surrogate: str = "tinyvgg16"
    ssplit: int = 2
    queries: int = 200
    alpha: float = 50.0
    beta: float = 0.5
    modes: str = "score"
    distill_epochs: int = 300
    distill_lr: float = 3e-3
    distill_batch: int = 16
    surrogate_seed: int = 0
    feature_shape: str = "auto"  # auto | C,H,W
    # attacks
    methods: str = "gfcs,simba-ods"
    feedback: str = "score"
    eps: float = 1.0
    eps_grid: str = "0.25,0.5,1.0,1.5"
    budgets: str = "5,10,25,50,100"
    qmax: int = 100
    unbounded_qmax: int = 25
    transfer_eps: float = 8 / 255
    transfer_eps_l2: float = 1.0
    pgd_iters: int = 20
    n_attack: int = 100
    attack_seed: int = 0
    dump_images: int = 4
    # split grid
    tsplits: str = "1,2,3"
    ssplits: str = "1,2,3"
    # shape batch
    shape_models: str = "tinyres32:3,tinyvgg32:2"
    shape_ns: str = "2,8,16,64,256,512"
    shape_seeds: int = 10
    out: str = "runs"

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise InvalidConfig(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.dataset not in ("pattern", "synthetic", "idx", "cifar10"):
            raise InvalidConfig(f"unknown dataset {self.dataset!r}")
        for mode in self.mode_list:
            if mode not in ("score", "hard", "label"):
                raise InvalidConfig(f"unknown output mode {mode!r}")
        for method in self.method_list:
            A.get_attack(method)
        if self.queries < 1 or self.n_attack < 1:
            raise InvalidConfig("queries and n_attack must be positive")
        return self

    @property
    def mode_list(self):
        return _strs(self.modes)

    @property
    def method_list(self):
        return _strs(self.methods)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _strs(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def _ints(s: str) -> list[int]:
    return [int(p) for p in _strs(s)]


def _floats(s: str) -> list[float]:
    return [float(p) for p in _strs(s)]


def _coerce(f, raw: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise InvalidConfig(f"{f.name}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, **overrides) -> ExperimentConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    known = {f.name: f for f in fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key=value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise InvalidConfig(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(known[key], raw)
    for key, raw in overrides.items():
        if raw is None:
            continue
        if key not in known:
            raise InvalidConfig(f"unknown key {key!r}")
        values[key] = _coerce(known[key], str(raw)) if isinstance(raw, str) else raw
    return ExperimentConfig(**values).validate()


def load_config(path, **overrides) -> ExperimentConfig:
    return parse_config(Path(path).read_text(), **overrides)


def config_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# ---------------------------------------------------------------- toy setup


def load_data(cfg: ExperimentConfig):
    """(train, surrogate-train half, attack-eval half)."""
    n = cfg.n_train + cfg.n_holdout
    if cfg.dataset == "pattern":
        full = D.pattern_dataset(n, seed=cfg.data_seed)
    elif cfg.dataset == "synthetic":
        full = D.synth_dataset(n, seed=cfg.data_seed)
    elif cfg.dataset == "idx":
        imgs, labs = _strs(cfg.data_path)
        full = D.load_idx(imgs, labs)
    else:
        full = D.load_cifar10_binary(cfg.data_path)
    full.require_nonempty()
    if len(full) < n:
        raise DatasetEmpty(f"dataset has {len(full)} samples, config needs {n}")
    train = full.subset(range(cfg.n_train))
    sur, att = D.balanced_halves(full.subset(range(cfg.n_train, n)), seed=cfg.data_seed)
    return train, sur, att


class Toy:
    """Target, deployments and surrogates for one config, built lazily and memoised."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.train, self.sur_data, self.att_data = load_data(cfg)
        if len(self.att_data) < 1 or len(self.sur_data) < cfg.queries:
            raise DatasetEmpty("not enough held-out samples for the query and attack sets")
        self._target = None
        self._queries = {}
        self._surrogates = {}
        self.estimates = {}

    @property
    def target(self) -> M.Model:
        if self._target is None:
            cfg = self.cfg
            if Path(cfg.target).suffix:
                self._target = M.load_checkpoint(cfg.target)
            else:
                self._target = M.build_model(M.preset(cfg.target), seed=cfg.target_seed)
                M.train_classifier(self._target, self.train, epochs=cfg.target_epochs, lr=cfg.target_lr)
        return self._target

    @property
    def target_name(self) -> str:
        return self.target.spec.name

    def deployment(self, tsplit: int, mode: str):
        split = M.split_at(self.target, self.target.spec.block_split(tsplit))
        wire_mode = "none" if mode == "label" else mode
        dep = SimulatedDeployment(split, self.target.spec.input_shape, wire_mode)
        return dep, split

    def oracle(self, tsplit: int | None = None) -> A.Oracle:
        dep, _ = self.deployment(tsplit or self.cfg.tsplit, self.cfg.feedback)
        return A.Oracle.from_client(Client(dep.open(), self.target.spec.input_shape, self.cfg.feedback))

    def _estimator(self, tsplit):
        fixed = self.cfg.feature_shape
        if fixed != "auto":
            c, h, w = _ints(fixed)
            return lambda rows: ShapeEstimate(w, h, [(c, h, w)], float("nan"), h / w, None)

        def run(rows):
            est = estimate_shape(rows)
            self.estimates[tsplit] = est
            return est

        return run

    def queries(self, tsplit: int, mode: str) -> G.QueryDataset:
        key = (tsplit, mode)
        if key not in self._queries:
            dep, _ = self.deployment(tsplit, mode)
            sniffer = Sniffer()
            dep.attach(sniffer)
            client = Client(dep.open(), self.target.spec.input_shape, "none" if mode == "label" else mode)
            n = self.cfg.queries
            labels = self.sur_data.labels[:n] if mode == "label" else None
            self._queries[key] = G.collect_queries(
                client, sniffer, list(self.sur_data.images[:n]), self._estimator(tsplit), labels
            )
        return self._queries[key]

    def surrogate(self, tsplit: int, ssplit: int, mode: str, fd: bool) -> G.SurrogateModel:
        key = (tsplit, ssplit, mode, fd)
        if key not in self._surrogates:
            cfg = self.cfg
            q = self.queries(tsplit, mode)
            spec = M.preset(cfg.surrogate)
            g = G.assemble_surrogate(spec, spec.block_split(ssplit), tuple(q.features.shape[1:]), seed=cfg.surrogate_seed)
            dcfg = G.DistillationConfig(
                alpha=cfg.alpha if fd else 0.0,
                beta=cfg.beta,
                mode=mode,
                lr=cfg.distill_lr,
                epochs=cfg.distill_epochs,
                batch_size=cfg.distill_batch,
                seed=cfg.surrogate_seed,
            )
            G.train_surrogate(g, q, dcfg)
            self._surrogates[key] = g
        return self._surrogates[key]

    def attack_set(self):
        n = min(self.cfg.n_attack, len(self.att_data))
        part = self.att_data.subset(range(n))
        return part.images, part.labels, part.ids

    def attack_config(self, **kw) -> A.AttackConfig:
        base = A.AttackConfig(norm=2, eps=self.cfg.eps, qmax=self.cfg.qmax, feedback=self.cfg.feedback, seed=self.cfg.attack_seed)
        return base.with_(**kw)

    def sweep(self, method, surrogate, **kw) -> A.SweepSummary:
        x, y, ids = self.attack_set()
        return A.run_attack_sweep(method, self.oracle(), surrogate, x, y, self.attack_config(**kw), ids)

    def transfer(self, surrogate, norm=math.inf) -> A.SweepSummary:
        x, y, ids = self.attack_set()
        eps = self.cfg.transfer_eps if norm == math.inf else self.cfg.transfer_eps_l2
        cfg = A.AttackConfig(norm=norm, eps=eps, iters=self.cfg.pgd_iters, seed=self.cfg.attack_seed)
        return A.pgd_results(surrogate, self.target, x, y, cfg, ids)


# ---------------------------------------------------------------- experiments


@dataclass
class Outcome:
    name: str
    tables: dict = field(default_factory=dict)  # file name -> (columns, rows)
    figures: dict = field(default_factory=dict)  # file name -> svg text
    images: dict = field(default_factory=dict)  # file name -> rgb array
    extra: dict = field(default_factory=dict)


def _fd_pairs(cfg):
    for mode in cfg.mode_list:
        for fd in (True, False):
            yield mode, fd


def sr_vs_queries(cfg: ExperimentConfig, toy: Toy | None = None) -> Outcome:
    """SR at each query budget, read off one sweep at the largest budget.

    A sample counts as a success within budget b when it succeeded using at
    most b queries, so every curve is non-decreasing by construction.
    """
    toy = toy or Toy(cfg)
    budgets = _ints(cfg.budgets)
    rows, series = [], {}
    for method in cfg.method_list:
        for mode, fd in _fd_pairs(cfg):
            g = toy.surrogate(cfg.tsplit, cfg.ssplit, mode, fd)
            summary = toy.sweep(method, g, qmax=max(budgets))
            live = [r for r in summary.results if r.initially_correct]
            curve = []
            for b in budgets:
                sr = sum(r.success and r.queries <= b for r in live) / len(live) if live else 0.0
                rows.append({"method": method, "mode": mode, "fd": fd, "query_budget": b, "sr": sr})
                curve.append((b, sr))
            series[f"{method} {mode}{' +FD' if fd else ''}"] = curve
    out = Outcome("sr-vs-queries")
    out.tables["sr_vs_queries.csv"] = (["method", "mode", "fd", "query_budget", "sr"], rows)
    out.figures["sr_vs_queries.svg"] = R.line_plot(series, "Success rate vs queries", "query budget", "SR")
    return out


def eps_table(cfg: ExperimentConfig, toy: Toy | None = None) -> Outcome:
    """One l2 SR table per query attack over the epsilon grid."""
    toy = toy or Toy(cfg)
    out = Outcome("eps-table")
    for method in cfg.method_list:
        rows = []
        for eps in _floats(cfg.eps_grid):
            for mode, fd in _fd_pairs(cfg):
                s = toy.sweep(method, toy.surrogate(cfg.tsplit, cfg.ssplit, mode, fd), eps=eps, qmax=cfg.qmax)
                rows.append({"model": toy.target_name, "eps": eps, "mode": mode, "fd": fd, "sr": s.sr, "avg_queries": s.aq})
        out.tables[f"eps_table_{method}.csv"] = (["model", "eps", "mode", "fd", "sr", "avg_queries"], rows)
    return out


def unbounded(cfg: ExperimentConfig, toy: Toy | None = None) -> Outcome:
    toy = toy or Toy(cfg)
    out = Outcome("unbounded")
    rows = []
    x, _, ids = toy.attack_set()
    by_id = {int(i): x[j] for j, i in enumerate(ids)}
    for method in cfg.method_list:
        for mode, fd in _fd_pairs(cfg):
            g = toy.surrogate(cfg.tsplit, cfg.ssplit, mode, fd)
            s = toy.sweep(method, g, eps=math.inf, qmax=cfg.unbounded_qmax)
            rows.append(
                {"model": toy.target_name, "method": method, "mode": mode, "fd": fd, "sr": s.sr, "avg_pert_l2": s.ap_l2, "avg_queries": s.aq}
            )
            wins = [r for r in s.results if r.success][: cfg.dump_images]
            if wins:
                grid = []
                for r in wins:
                    clean = by_id[r.sample_id].numpy()
                    adv = r.x_adv.detach().numpy()
                    grid.append([clean, adv, np.clip(np.abs(adv - clean) * 10, 0, 1)])
                out.images[f"unbounded_{method}_{mode}_{'fd' if fd else 'nofd'}.ppm"] = R.image_grid(grid)
    out.tables["unbounded.csv"] = (["model", "method", "mode", "fd", "sr", "avg_pert_l2", "avg_queries"], rows)
    return out


def _split_grid(cfg, toy, norm):
    mode = cfg.mode_list[0]
    x, y, _ = toy.attack_set()
    cells = []
    for t in _ints(cfg.tsplits):
        for s in _ints(cfg.ssplits):
            g_fd = toy.surrogate(t, s, mode, True)
            g_no = toy.surrogate(t, s, mode, False)
            sr_fd = toy.transfer(g_fd, norm).sr
            sr_no = toy.transfer(g_no, norm).sr
            acc = M.evaluate_accuracy(g_fd, D.Dataset(x, y))
            cells.append({"tsplit": t, "ssplit": s, "sr_fd": sr_fd, "sr_nofd": sr_no, "delta": sr_fd - sr_no, "clean_acc": acc})
    return cells


def split_matrix(cfg: ExperimentConfig, toy: Toy | None = None) -> Outcome:
    """Transfer SR for every (target split, surrogate split) pair, under both PGD norms."""
    toy = toy or Toy(cfg)
    out = Outcome("split-matrix")
    ts, ss = _ints(cfg.tsplits), _ints(cfg.ssplits)
    for tag, norm in (("linf", math.inf), ("l2", 2)):
        cells = _split_grid(cfg, toy, norm)
        out.tables[f"split_matrix_{tag}.csv"] = (["tsplit", "ssplit", "sr_fd", "sr_nofd", "delta", "clean_acc"], cells)
        grid = [[c["sr_fd"] for c in cells if c["tsplit"] == t] for t in ts]
        out.figures[f"split_matrix_{tag}.svg"] = R.heat_grid(
            grid, [str(t) for t in ts], [str(s) for s in ss], f"FD transfer SR (PGD {tag})", "surrogate split", "target split"
        )
    return out


def pearson(xs, ys) -> float | None:
    """Pearson r, or None when either side is constant or there are fewer than two points."""
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if len(x) < 2:
        return None
    x, y = x - x.mean(), y - y.mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    return None if den == 0 else float(x @ y) / den


def cleanacc_corr(cfg: ExperimentConfig, toy: Toy | None = None) -> Outcome:
    toy = toy or Toy(cfg)
    out = Outcome("cleanacc-corr")
    cells = _split_grid(cfg, toy, math.inf)
    points, corr = [], []
    for t in _ints(cfg.tsplits):
        mine = [c for c in cells if c["tsplit"] == t]
        for c in mine:
            points.append({"tsplit": t, "ssplit": c["ssplit"], "clean_acc": c["clean_acc"], "sr": c["sr_fd"]})
        corr.append({"tsplit": t, "pearson_r": pearson([c["clean_acc"] for c in mine], [c["sr_fd"] for c in mine])})
    out.tables["cleanacc_points.csv"] = (["tsplit", "ssplit", "clean_acc", "sr"], points)
    out.tables["cleanacc_corr.csv"] = (["tsplit", "pearson_r"], corr)
    out.figures["cleanacc_corr.svg"] = R.scatter_plot(
        [(p["clean_acc"], p["sr"]) for p in points], "Clean accuracy vs transfer SR", "surrogate clean acc", "SR"
    )
    return out


# ---------------------------------------------------------------- shape study


def random_edge(channels: int, width: int, size: int = 32, hidden: int = 16, seed: int = 0):
    """Random-weight conv/pool edge mapping (3, size, size) to (channels, width, width)."""
    pools = int(round(math.log2(size // width)))
    if size // (2**pools) != width:
        raise InvalidConfig(f"width {width} is not size {size} halved a whole number of times")
    layers, cin = [], 3
    for _ in range(pools):
        layers += [M.conv(cin, hidden), M.RELU, M.POOL]
        cin = hidden
    layers += [M.conv(cin, channels), M.RELU, M.FLATTEN, M.affine(channels * width * width, 10)]
    spec = M.ModelSpec(f"edge-c{channels}-w{width}", (3, size, size), tuple(layers), 10)
    model = M.build_model(spec, seed=seed)
    return M.split_at(model, len(layers) - 2).edge


def capture_features(edge, inputs) -> np.ndarray:
    """What the sniffer sees: flattened binary32 features, one row per input."""
    with torch.no_grad():
        return edge(inputs).reshape(len(inputs), -1).numpy().astype(np.float32)


def exactness_suite(n: int = 512, seed: int = 0, sizes=(4, 8, 16)) -> list[dict]:
    """Estimate W for random-weight edges over every (C, W) pair."""
    data = D.synth_dataset(n, shape=(3, 32, 32), seed=100 + seed)
    rows = []
    for c in sizes:
        for w in sizes:
            feats = capture_features(random_edge(c, w, seed=seed), data.images)
            try:
                west = estimate_shape(feats).width
            except SplitLeakError:
                west = None
            rows.append({"channels": c, "wtrue": w, "west": west, "correct": west == w})
    return rows


def _shape_cells(cfg):
    for item in _strs(cfg.shape_models):
        name, _, block = item.partition(":")
        yield name, int(block or 1)


def shape_batch(cfg: ExperimentConfig, toy=None) -> Outcome:
    """Width estimation vs capture size for random-weight preset edges, one model seed per data seed."""
    out = Outcome("shape-batch")
    rows, ns = [], _ints(cfg.shape_ns)
    for name, block in _shape_cells(cfg):
        spec = M.preset(name)
        k = spec.block_split(block)
        wtrue = spec.feature_shape(k)[2]
        for n in ns:
            for s in range(cfg.shape_seeds):
                edge = M.split_at(M.build_model(spec, seed=s), k).edge
                data = D.synth_dataset(n, shape=spec.input_shape, seed=100 + s)
                feats = capture_features(edge, data.images)
                try:
                    est = estimate_shape(feats)
                    west = est.width
                except SplitLeakError:
                    est, west = None, None
                rows.append({"model": name, "split": k, "n": n, "seed": s, "west": west, "wtrue": wtrue, "correct": west == wtrue})
                if s == 0 and est is not None and n == max(ns):
                    prof = est.profile
                    kmax = min(prof.k_max, 4 * wtrue + 2)
                    curve = [(int(l), float(v)) for l, v in zip(prof.lags[:kmax], prof.normalized[:kmax])]
                    out.figures[f"profile_{name}_{k}_n{n}.svg"] = R.line_plot(
                        {f"{name} split {k}": curve}, f"R(k)/R(0), N={n}", "lag k", "R(k)/R(0)"
                    )
    out.tables["shape_batch.csv"] = (["model", "split", "n", "west", "wtrue", "correct"], rows)
    out.extra["rates"] = correctness_rates(rows)
    return out


def correctness_rates(rows) -> dict:
    """{(model, split): {n: fraction correct}}."""
    acc = {}
    for r in rows:
        acc.setdefault((r["model"], r["split"]), {}).setdefault(r["n"], []).append(bool(r["correct"]))
    return {key: {n: sum(v) / len(v) for n, v in sorted(by_n.items())} for key, by_n in acc.items()}


RUNNERS = {
    "sr-vs-queries": sr_vs_queries,
    "eps-table": eps_table,
    "unbounded": unbounded,
    "split-matrix": split_matrix,
    "cleanacc-corr": cleanacc_corr,
    "shape-batch": shape_batch,
}


def write_outcome(outcome: Outcome, cfg: ExperimentConfig, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for name, (cols, rows) in outcome.tables.items():
        R.write_csv(out_dir / name, cols, rows)
        paths.append(out_dir / name)
    for name, svg in outcome.figures.items():
        R.write_svg(out_dir / name, svg)
        paths.append(out_dir / name)
    for name, rgb in outcome.images.items():
        R.write_ppm(out_dir / name, rgb)
        paths.append(out_dir / name)
    (out_dir / "run.cfg").write_text(config_text(cfg))
    paths.append(out_dir / "run.cfg")
    R.write_manifest(out_dir, outcome.name, cfg.to_dict(), paths)
    return paths


def run_experiment(cfg: ExperimentConfig, out_dir=None, toy: Toy | None = None) -> Outcome:
    """Run single-threaded and deterministic, then write CSV/SVG/PPM and the manifest.

    Nothing is written when the pipeline fails.
    """
    cfg.validate()
    deterministic()
    outcome = RUNNERS[cfg.experiment](cfg, toy)
    write_outcome(outcome, cfg, out_dir or cfg.out)
    return outcome


def rerun_from_manifest(manifest_path, out_dir) -> Outcome:
    import json

    body = json.loads(Path(manifest_path).read_text())
    cfg = ExperimentConfig(**body["config"]).validate()
    return run_experiment(cfg, out_dir)
