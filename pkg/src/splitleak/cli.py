"""Command-line entry point: ``splitleak <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import threading
from pathlib import Path

import numpy as np
import torch

from . import attacks as A
from . import data as D
from . import experiments as E
from . import models as M
from . import reports as R
from . import surrogate as G
from . import wire as W
from .errors import InvalidConfig, SplitLeakError
from .shape import ShapeEstimate, covariance_block, estimate_shape
from .tensor import deterministic

log = logging.getLogger("splitleak")


def _float(s: str) -> float:
    return math.inf if s.lower() in ("inf", "infinity") else float(s)


def _load_split(checkpoint, split):
    model = M.load_checkpoint(checkpoint)
    return model, M.split_at(model, split)


def _serve(server, what):
    host, port = server.server_address[:2]
    print(f"{what} listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def cmd_serve_edge(args):
    model, split = _load_split(args.checkpoint, args.split)
    _serve(W.edge_server(split.edge, model.spec.input_shape, args.listen, args.cloud), "edge")


def cmd_serve_cloud(args):
    model, split = _load_split(args.checkpoint, args.split)
    cfg = W.SessionConfig(W.OutputMode(args.mode), model.spec.input_shape, split.feature_shape)
    _serve(W.cloud_server(split.cloud, cfg, args.listen), "cloud")


def cmd_sniff(args):
    sniffer = W.Sniffer()
    tap = W.TapProxy(args.tap, args.upstream, sniffer)
    thread = threading.Thread(target=tap.serve_forever, daemon=True)
    thread.start()
    print(f"tap on {args.tap} -> {args.upstream}; writing {args.out}", flush=True)
    try:
        while args.count is None or sniffer.n < args.count:
            thread.join(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        tap.shutdown()
    rows = sniffer.matrix()
    W.write_capture(args.out, rows)
    print(f"captured {len(rows)} feature vectors (d={sniffer.d})")


def _read_inputs(path):
    """(images [N,C,H,W] float32, labels or None) from .slkq or .npy."""
    path = Path(path)
    if path.suffix == ".npy":
        x = np.load(path).astype(np.float32)
        return (x[None] if x.ndim == 3 else x), None
    x, _, labels = G.read_query_log(path)
    return x, labels


def cmd_infer(args):
    x, labels = _read_inputs(args.input)
    client = W.Client(W.SocketTransport(args.endpoint), x.shape[1:], args.mode)
    outputs = [client.infer(torch.from_numpy(v)) for v in x]
    client.close()
    for i, out in enumerate(outputs):
        shown = out.tolist() if isinstance(out, np.ndarray) else out
        print(json.dumps({"index": i, "output": shown}))
    if args.out:
        probs = np.stack(outputs) if args.mode == "score" else None
        hard = np.array(outputs) if args.mode == "hard" else labels
        G.write_query_log(args.out, x, probs, hard)


def _estimate(rows, args):
    if args.feature_shape:
        c, h, w = (int(v) for v in args.feature_shape.split(","))
        return ShapeEstimate(w, h, [(c, h, w)], float("nan"), h / w, None)
    return estimate_shape(rows, aspect=args.aspect)


def cmd_reconstruct_shape(args):
    rows = W.read_capture(args.capture)
    est = estimate_shape(rows, aspect=args.aspect, k_max=args.kmax)
    print(json.dumps({"n": int(rows.shape[0]), "d": int(rows.shape[1]), "width": est.width, "height": est.height,
                      "candidates": [list(c) for c in est.candidates], "peak_score": est.peak_score}))
    if args.emit_profile:
        prof = est.profile
        R.write_csv(args.emit_profile, ["k", "R", "R_norm"],
                    [{"k": 0, "R": prof.r0, "R_norm": 1.0}]
                    + [{"k": int(k), "R": float(v), "R_norm": float(v / prof.r0)} for k, v in zip(prof.lags, prof.values)])
    if args.emit_heatmap:
        i0, i1 = (int(v) for v in args.block.split(":"))
        block = covariance_block(rows, i0, i1)
        Path(args.emit_heatmap).write_text("".join(",".join(f"{v:.9g}" for v in row) + "\n" for row in block))


def _query_dataset(args, rows):
    x, probs, labels = G.read_query_log(args.queries)
    if len(rows) != len(x):
        raise InvalidConfig(f"capture has {len(rows)} rows but the query log has {len(x)} inputs")
    est = _estimate(rows, args)
    c, h, w = est.shape
    feats = torch.from_numpy(rows.astype(np.float32).reshape(len(rows), c, h, w))
    probs_t = None if probs is None else torch.from_numpy(probs)
    hard = None
    if args.mode == "hard":
        hard = torch.from_numpy(probs.argmax(1)) if probs is not None else (None if labels is None else torch.from_numpy(labels))
    lab = None if labels is None else torch.from_numpy(labels.astype(np.int64))
    return G.QueryDataset(torch.from_numpy(x), feats, probs_t, None if hard is None else hard.long(), lab), est


def cmd_train_surrogate(args):
    deterministic()
    rows = W.read_capture(args.capture)
    q, est = _query_dataset(args, rows)
    spec = M.preset(args.backbone)
    g = G.assemble_surrogate(spec, args.split, est.shape, seed=args.seed)
    cfg = G.DistillationConfig(args.alpha, args.beta, args.mode, args.lr, args.epochs, args.batch_size, args.seed)
    hist = G.train_surrogate(g, q, cfg)
    g.backbone.meta["distillation"] = {k: getattr(cfg, k) for k in ("alpha", "beta", "mode", "lr", "epochs", "batch_size", "seed")}
    G.save_surrogate(g, args.out)
    print(json.dumps({"feature_shape": list(est.shape), "final_loss": {k: v[-1] if v else None for k, v in hist.items()}}))


def cmd_attack(args):
    deterministic()
    x, labels = _read_inputs(args.inputs)
    if labels is None:
        raise InvalidConfig("attack inputs need ground-truth labels (write them into the query log)")
    images, labels = torch.from_numpy(x), torch.from_numpy(labels.astype(np.int64))
    g = G.load_surrogate(args.surrogate)
    cfg = A.AttackConfig(norm=_float(args.norm), eps=_float(args.eps), iters=args.iters, qmax=args.qmax,
                         feedback=args.feedback, seed=args.seed, q=args.q)
    ids = list(range(len(images)))
    if args.target:
        target = M.load_checkpoint(args.target)
        oracle = A.Oracle.from_model(target, args.feedback)
    else:
        client = W.Client(W.SocketTransport(args.endpoint), x.shape[1:], args.feedback)
        oracle = A.Oracle.from_client(client)
        target = None
    if args.method == "pgd":
        if target is None:
            raise InvalidConfig("pgd scores transfer offline and needs --target")
        summary = A.pgd_results(g, target, images, labels, cfg, ids)
    else:
        summary = A.run_attack_sweep(args.method, oracle, g, images, labels, cfg, ids)
    R.write_csv(args.out, A.RESULT_COLUMNS, A.result_rows(summary.results))
    print(json.dumps(A.summary_row(summary)))


def cmd_exp(args):
    if args.rerun:
        E.rerun_from_manifest(args.rerun, args.out)
    else:
        cfg = E.load_config(args.config, experiment=args.id, out=args.out) if args.config else E.parse_config("", experiment=args.id, out=args.out)
        E.run_experiment(cfg, args.out)
    print(f"wrote {args.out}")


def _dataset(args):
    if args.dataset == "pattern":
        return D.pattern_dataset(args.n, seed=args.data_seed)
    if args.dataset == "synthetic":
        return D.synth_dataset(args.n, seed=args.data_seed)
    if args.dataset == "idx":
        return D.load_idx(*args.data_path.split(","))
    return D.load_cifar10_binary(args.data_path)


def cmd_train_target(args):
    deterministic()
    data = _dataset(args)
    model = M.build_model(M.preset(args.preset), seed=args.seed)
    hist = M.train_classifier(model, data, epochs=args.epochs, lr=args.lr)
    model.meta["training"] = {"dataset": args.dataset, "n": len(data), "epochs": args.epochs, "lr": args.lr, "seed": args.seed}
    M.save_checkpoint(model, args.out)
    print(json.dumps({"train_accuracy": hist[-1] if hist else None, "block_splits": list(model.spec.block_ends)}))


def cmd_export_data(args):
    data = _dataset(args)
    part = data.subset(range(args.offset, min(args.offset + args.count, len(data))))
    G.write_query_log(args.out, part.images, None, part.labels if args.labels else None)
    print(f"wrote {len(part)} inputs to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitleak", description="Feature-leakage attacks on split inference.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve-edge", help="run the edge half; forwards features to the cloud")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", type=int, required=True)
    s.add_argument("--listen", required=True)
    s.add_argument("--cloud", required=True, help="upstream cloud (or tap) address")
    s.set_defaults(fn=cmd_serve_edge)

    s = sub.add_parser("serve-cloud", help="run the cloud half")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", type=int, required=True)
    s.add_argument("--mode", choices=["score", "hard", "none"], default="score")
    s.add_argument("--listen", required=True)
    s.set_defaults(fn=cmd_serve_cloud)

    s = sub.add_parser("sniff", help="passive tap between edge and cloud")
    s.add_argument("--tap", required=True, help="address the edge connects to")
    s.add_argument("--upstream", required=True, help="real cloud address")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, help="stop after this many feature frames")
    s.set_defaults(fn=cmd_sniff)

    s = sub.add_parser("infer", help="query a deployment")
    s.add_argument("--endpoint", required=True)
    s.add_argument("--input", required=True, help=".npy image(s) or .slkq query log")
    s.add_argument("--mode", choices=["score", "hard", "none"], default="score")
    s.add_argument("--out", help="write inputs and observed outputs as a query log")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("reconstruct-shape", help="estimate (C,H,W) from a capture")
    s.add_argument("--capture", required=True)
    s.add_argument("--aspect", type=float, default=1.0)
    s.add_argument("--kmax", type=int)
    s.add_argument("--emit-profile")
    s.add_argument("--emit-heatmap")
    s.add_argument("--block", default="0:64")
    s.set_defaults(fn=cmd_reconstruct_shape)

    s = sub.add_parser("train-surrogate", help="distill a surrogate from a capture and query log")
    s.add_argument("--backbone", required=True)
    s.add_argument("--split", type=int, required=True)
    s.add_argument("--capture", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--mode", choices=["score", "hard", "label"], default="score")
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--beta", type=float, default=0.5)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--aspect", type=float, default=1.0)
    s.add_argument("--feature-shape", help="C,H,W; skips shape estimation")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_surrogate)

    s = sub.add_parser("attack", help="run an attack sweep")
    s.add_argument("--method", choices=list(A.METHODS), required=True)
    s.add_argument("--surrogate", required=True)
    tgt = s.add_mutually_exclusive_group(required=True)
    tgt.add_argument("--endpoint")
    tgt.add_argument("--target")
    s.add_argument("--inputs", required=True, help=".slkq query log with labels")
    s.add_argument("--norm", default="2")
    s.add_argument("--eps", default="1.0")
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--qmax", type=int, default=100)
    s.add_argument("--q", type=int, default=16)
    s.add_argument("--feedback", choices=["score", "hard"], default="score")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_attack)

    s = sub.add_parser("exp", help="run a seeded experiment")
    s.add_argument("id", choices=E.EXPERIMENTS)
    s.add_argument("--config")
    s.add_argument("--rerun", help="manifest.json of an earlier run")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_exp)

    for name, fn, help_ in (("train-target", cmd_train_target, "train a preset target"), ("export-data", cmd_export_data, "write dataset images to a query log")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--dataset", choices=["pattern", "synthetic", "idx", "cifar10"], default="pattern")
        s.add_argument("--data-path", default="")
        s.add_argument("--data-seed", type=int, default=1)
        s.add_argument("--n", type=int, default=2000)
        s.add_argument("--out", required=True)
        if name == "train-target":
            s.add_argument("--preset", default="tinyres16")
            s.add_argument("--epochs", type=int, default=15)
            s.add_argument("--lr", type=float, default=3e-3)
            s.add_argument("--seed", type=int, default=0)
        else:
            s.add_argument("--offset", type=int, default=0)
            s.add_argument("--count", type=int, default=200)
            s.add_argument("--labels", action="store_true")
        s.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except SplitLeakError as exc:
        stage = getattr(exc, "stage", None)
        print(f"error: {type(exc).__name__}{f' [{stage}]' if stage else ''}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
