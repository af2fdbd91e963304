"""End-to-end runs: data loading per config, the four stages, artifacts, alpha sweeps."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import adaptation
from .adaptation import AdapterParams, StageError, forward
from .clustering import cluster_quality, write_pseudo_labels
from .config import PipelineConfig
from .embedding_io import EmbeddingSet, load_embeddings, split_holdout, synthesize_domain_pair
from .evaluation import evaluate, tar_at_far, verification_scores
from .rng import stream

log = logging.getLogger(__name__)

SWEEP_FAR = 0.01


@dataclass
class Datasets:
    source: EmbeddingSet
    target: EmbeddingSet
    target_eval: EmbeddingSet | None


def load_datasets(cfg: PipelineConfig) -> Datasets:
    """Read the configured files, or synthesize a pair when no source is given.

    Without an explicit evaluation file, a ``holdout`` fraction of the target
    rows is split off for evaluation when ground truth is available.
    """
    if cfg.source:
        source = load_embeddings(cfg.source, cfg.format, has_labels=True)
        target = load_embeddings(cfg.target, cfg.format)
        target_eval = load_embeddings(cfg.target_eval, cfg.format) if cfg.target_eval else None
    else:
        source, target = synthesize_domain_pair(cfg.synth_config())
        target_eval = None
    if target_eval is None and target.truth is not None and cfg.holdout > 0:
        seed = int(stream(cfg.seed, "holdout").integers(2**32))
        target, target_eval = split_holdout(target, cfg.holdout, seed)
    return Datasets(source, target, target_eval)


def _eval_labels(es: EmbeddingSet):
    return es.truth if es.truth is not None else es.labels


def verification_tar(params: AdapterParams | None, es: EmbeddingSet, far: float = SWEEP_FAR) -> float:
    x = es.vectors if params is None else forward(params, es.vectors).hidden
    return tar_at_far(verification_scores(x, _eval_labels(es)), [far])[far]


def evaluate_params(params: AdapterParams | None, es: EmbeddingSet, seed: int = 0):
    x = es.vectors if params is None else forward(params, es.vectors).hidden
    return evaluate(x, _eval_labels(es), seed=seed)


def run_pipeline(cfg: PipelineConfig, out_dir=None, data: Datasets | None = None) -> dict:
    """Run all stages and write checkpoint, pseudo-labels, loss CSVs and reports."""
    cfg.validate()
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = data or load_datasets(cfg)
    tcfg, ccfg = cfg.train_config(), cfg.cluster_config()

    result = adaptation.run_cda(data.source, data.target, tcfg, ccfg)
    adaptation.save_checkpoint(result.params, out / "checkpoint.cdap")
    write_pseudo_labels(result.pseudo, out / "pseudo_labels.lab")
    for stage, hist in result.histories.items():
        adaptation.write_history_csv(hist, out / f"loss_{stage}.csv")

    summary = dict(result.reports)
    if data.target.truth is not None:
        summary.update({f"pseudo_{k}": v for k, v in cluster_quality(result.pseudo, data.target.truth).items()})
    if data.target_eval is not None and _eval_labels(data.target_eval) is not None:
        for name, params in (("source_only", result.source_only_params),
                             ("mmd_adapted", result.adapted_params), ("final", result.params)):
            rep = evaluate_params(params, data.target_eval, cfg.seed)
            rep.write(out, f"eval_{name}")
            summary[f"tar@far={SWEEP_FAR}_{name}"] = rep.tar_at_far[SWEEP_FAR]
    (out / "stage_report.txt").write_text("".join(f"{k}\t{v}\n" for k, v in summary.items()))
    summary["result"] = result
    summary["data"] = data
    return summary


def parse_sweep(spec: str) -> list[float]:
    """``lo:hi:step`` inclusive of ``hi`` (within half a step)."""
    try:
        lo, hi, step = (float(s) for s in spec.split(":"))
    except ValueError:
        raise ValueError(f"sweep must look like lo:hi:step, got {spec!r}") from None
    if step <= 0 or hi < lo:
        raise ValueError(f"bad sweep range {spec!r}")
    n = int(np.floor((hi - lo) / step + 0.5)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def sweep_alpha(cfg: PipelineConfig, alphas, data: Datasets | None = None, out_dir=None) -> list[dict]:
    """Rerun stages 3-4 from one MMD-adapted model for each alpha.

    Each row reports the pseudo-label statistics and the final verification
    TAR at FAR 0.01 on the evaluation split.
    """
    cfg.validate()
    data = data or load_datasets(cfg)
    if data.target_eval is None:
        raise ValueError("alpha sweep needs labeled evaluation data")
    tcfg = cfg.train_config()
    source_only, adapted, *_ = adaptation.run_source_and_mmd(data.source, data.target, tcfg)
    rows = []
    for a in alphas:
        ccfg = replace(cfg.cluster_config(), alpha=a)
        row = {"alpha": a, "cluster_count": 0, "assigned_count": 0, "final_tar": float("nan")}
        try:
            final, pseudo, _ = adaptation.run_pseudo_stages(data.target, adapted, tcfg, ccfg)
            row.update(cluster_count=pseudo.cluster_count, assigned_count=pseudo.assigned_count,
                       final_tar=verification_tar(final, data.target_eval))
            if data.target.truth is not None:
                row["pairwise_f"] = cluster_quality(pseudo, data.target.truth)["pairwise_f"]
        except StageError as exc:
            log.warning("alpha=%s: %s", a, exc)
            row["error"] = exc.stage
        rows.append(row)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "alpha_sweep.tsv").write_text(format_sweep(rows))
    return rows


def format_sweep(rows) -> str:
    cols = ["alpha", "cluster_count", "assigned_count", "pairwise_f", "final_tar"]
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join(
            f"{r[c]:.4f}" if isinstance(r.get(c), float) else str(r.get(c, "")) for c in cols))
    return "\n".join(lines) + "\n"


def has_interior_peak(values) -> bool:
    """True when the curve is not flat and its maximum is reached at an interior point."""
    v = np.asarray(values, dtype=float)
    if len(v) < 3 or not np.all(np.isfinite(v)):
        return False
    best = v[1:-1].max()
    return bool(best >= v[0] and best >= v[-1] and best > min(v[0], v[-1]))
