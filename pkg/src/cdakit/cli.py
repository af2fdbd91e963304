"""Command-line entry point: ``cdakit {mmd,cluster,adapt,eval,synth,pipeline}``.

Exit status is 0 on success, 1 when a computation fails and 2 for usage or
input errors. ``CDAKIT_NUM_THREADS`` caps BLAS threads.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import adaptation, kernels
from .adaptation import StageError, TrainingDiverged
from .clustering import ClusterConfig, cluster_quality, pseudo_label_pipeline, write_pseudo_labels
from .config import PipelineConfig, load_config
from .embedding_io import (FormatError, SynthConfig, load_embeddings, save_embeddings, split_holdout,
                           synthesize_domain_pair)
from .evaluation import evaluate
from .pipeline import format_sweep, parse_sweep, run_pipeline, sweep_alpha

log = logging.getLogger("cdakit")

_D = PipelineConfig()


class InputError(Exception):
    pass


def _load(path, fmt, has_labels=False):
    try:
        return load_embeddings(path, fmt, has_labels=has_labels)
    except (FileNotFoundError, FormatError) as exc:
        raise InputError(str(exc)) from exc


def _unit_interval(name):
    def conv(text):
        v = float(text)
        if not -1 < v < 1:
            raise argparse.ArgumentTypeError(f"{name} must lie in (-1, 1), got {v}")
        return v
    return conv


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _add_cluster_flags(p, required_defaults=True):
    p.add_argument("--alpha", type=_unit_interval("alpha"), default=_D.alpha if required_defaults else None,
                   help=f"edge threshold on cosine similarity (default {_D.alpha})")
    p.add_argument("--beta", type=_unit_interval("beta"), default=_D.beta if required_defaults else None,
                   help=f"scattered-point threshold (default {_D.beta})")
    p.add_argument("--min-size", type=_positive_int, default=_D.min_size if required_defaults else None,
                   help=f"minimum component size p (default {_D.min_size})")


def _add_train_flags(p, defaults=True):
    d = (lambda v: v) if defaults else (lambda v: None)
    p.add_argument("--lam", type=float, default=d(_D.lam), help=f"MMD penalty (default {_D.lam})")
    p.add_argument("--lr", type=float, default=d(_D.lr),
                   help=f"SGD learning rate (default {_D.lr})")
    p.add_argument("--iters", type=_positive_int, default=d(_D.iters), help=f"iterations per run (default {_D.iters})")
    p.add_argument("--batch", type=_positive_int, default=d(_D.batch), help=f"batch size (default {_D.batch})")
    p.add_argument("--seed", type=int, default=d(_D.seed), help="random seed")
    p.add_argument("--mmd-layers", choices=["last", "last_two"], default=d(_D.mmd_layers),
                   help="apply MMD to the hidden layer only or also to pre-activations (default last_two)")
    p.add_argument("--kernels", type=_positive_int, default=d(_D.kernels),
                   help=f"number of Gaussian kernels (default {_D.kernels})")
    p.add_argument("--momentum", type=float, default=d(_D.momentum), help="SGD momentum (default 0, off)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cdakit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mmd", help="MMD estimates between two embedding files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    p.add_argument("--kernels", type=_positive_int, default=_D.kernels,
                   help=f"number of Gaussian kernels (default {_D.kernels})")

    p = sub.add_parser("cluster", help="pseudo-label an embedding file")
    p.add_argument("embeddings")
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    _add_cluster_flags(p)
    p.add_argument("--out", required=True, help="output label file (LAB1)")

    p = sub.add_parser("adapt", help="run all adaptation stages on source/target files")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    _add_cluster_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="verification / identification metrics")
    p.add_argument("embeddings")
    p.add_argument("--checkpoint", help="map embeddings through an adapter checkpoint first")
    p.add_argument("--format", choices=["binary", "csv"], default="binary")
    p.add_argument("--far", type=float, nargs="+", default=[0.001, 0.01, 0.1])
    p.add_argument("--out", help="directory for eval.txt and ROC/CMC CSVs")

    p = sub.add_parser("synth", help="write a synthetic source/target pair")
    p.add_argument("--classes", type=_positive_int, default=_D.synth_classes)
    p.add_argument("--per-class", type=_positive_int, default=_D.synth_per_class)
    p.add_argument("--dim", type=_positive_int, default=_D.synth_dim)
    p.add_argument("--spread", type=float, default=_D.synth_spread)
    p.add_argument("--shift", type=float, default=_D.synth_shift)
    p.add_argument("--shift-noise", type=float, default=_D.synth_shift_noise)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=float, default=0.0, help="fraction of target rows written as target_eval")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pipeline", help="full run from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--sweep-alpha", metavar="LO:HI:STEP", help="rerun stages 3-4 per alpha and print a table")
    p.add_argument("--out", help="override the config's output directory")
    _add_cluster_flags(p, required_defaults=False)
    _add_train_flags(p, defaults=False)
    return ap


def cmd_mmd(args):
    a, b = _load(args.a, args.format), _load(args.b, args.format)
    if a.dim != b.dim:
        raise InputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    spec = kernels.bandwidth_ladder(kernels.median_bandwidth(a, b), args.kernels)
    print("bandwidths\t" + "\t".join(repr(g) for g in spec.bandwidths))
    print(f"biased\t{kernels.mmd_biased(a, b, spec).value:.12g}")
    if a.n >= 2 and b.n >= 2:
        print(f"unbiased_quadratic\t{kernels.mmd_unbiased_quadratic(a, b, spec).value:.12g}")
    if min(a.n, b.n) >= 2:
        lin = kernels.mmd_linear_streaming(a, b, spec)
        print(f"linear_streaming\t{lin.value:.12g}\ttruncated={lin.truncated}")


def cmd_cluster(args):
    es = _load(args.embeddings, args.format)
    lab = pseudo_label_pipeline(es, ClusterConfig(args.alpha, args.beta, args.min_size))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_pseudo_labels(lab, args.out)
    print(f"cluster_count\t{lab.cluster_count}")
    print(f"assigned_count\t{lab.assigned_count}")
    if es.truth is not None:
        for k, v in cluster_quality(lab, es.truth).items():
            print(f"{k}\t{v:.6f}")


def _pipeline_cfg_from_flags(args, cfg: PipelineConfig):
    mapping = {"alpha": "alpha", "beta": "beta", "min_size": "min_size", "lam": "lam", "lr": "lr",
               "iters": "iters", "batch": "batch", "seed": "seed", "mmd_layers": "mmd_layers",
               "kernels": "kernels", "momentum": "momentum", "out": "out"}
    for flag, key in mapping.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, key, v)
    return cfg


def cmd_adapt(args):
    for p in (args.source, args.target):
        if not Path(p).exists():
            raise InputError(f"no such file: {p}")
    cfg = _pipeline_cfg_from_flags(args, PipelineConfig(source=args.source, target=args.target,
                                                        format=args.format, holdout=0.0))
    summary = run_pipeline(cfg, args.out)
    _print_summary(summary)


def cmd_eval(args):
    es = _load(args.embeddings, args.format)
    labels = es.truth if es.truth is not None else es.labels
    if labels is None:
        raise InputError(f"{args.embeddings}: evaluation needs a .lab or .truth.lab file")
    x = es.vectors
    if args.checkpoint:
        try:
            params = adaptation.load_checkpoint(args.checkpoint)
        except (FileNotFoundError, ValueError) as exc:
            raise InputError(str(exc)) from exc
        x = adaptation.forward(params, x).hidden
    rep = evaluate(x, labels, far_targets=args.far)
    sys.stdout.write(rep.to_text())
    if args.out:
        rep.write(args.out)


def cmd_synth(args):
    cfg = SynthConfig(args.classes, args.per_class, args.dim, args.spread, args.shift, args.shift_noise, args.seed)
    source, target = synthesize_domain_pair(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(source, out / "source.emb")
    if args.holdout:
        target, held = split_holdout(target, args.holdout, args.seed)
        save_embeddings(held, out / "target_eval.emb")
    save_embeddings(target, out / "target.emb")
    print(f"wrote {source.n} source and {target.n} target vectors of dim {cfg.dim} to {out}")


def _print_summary(summary):
    for k, v in summary.items():
        if k in ("result", "data"):
            continue
        print(f"{k}\t{v}")


def cmd_pipeline(args):
    try:
        cfg = load_config(args.config)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    cfg = _pipeline_cfg_from_flags(args, cfg)
    try:
        cfg.validate()
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc
    if args.sweep_alpha:
        rows = sweep_alpha(cfg, parse_sweep(args.sweep_alpha), out_dir=cfg.out)
        sys.stdout.write(format_sweep(rows))
        return
    _print_summary(run_pipeline(cfg))


COMMANDS = {"mmd": cmd_mmd, "cluster": cmd_cluster, "adapt": cmd_adapt, "eval": cmd_eval,
            "synth": cmd_synth, "pipeline": cmd_pipeline}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("CDAKIT_NUM_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(int(threads)):
                COMMANDS[args.command](args)
        else:
            COMMANDS[args.command](args)
    except (InputError, FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StageError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # configuration / range problems surface as ValueError before any training
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
