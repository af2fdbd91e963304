"""Embedding-scale adaptation network and the staged training procedure.

The network is ``hidden = tanh(W x + b)`` followed by two linear softmax
heads, one over source classes and one over target pseudo-classes. Training
runs in four stages: source pre-training, joint source classification + MMD
alignment, clustering of adapted target features into pseudo-labels, and
fine-tuning on those pseudo-labels.
"""
from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import kernels
from .clustering import ClusterConfig, PseudoLabeling, pseudo_label_pipeline
from .embedding_io import UNLABELED, EmbeddingSet, as_matrix
from .kernels import KernelSpec
from .rng import stream

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CDAP"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIIIII")

HISTORY_COLUMNS = ("iter", "source_cls", "mmd", "target_pseudo_cls", "total")


class TrainingDiverged(RuntimeError):
    pass


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class AdapterParams:
    weight: np.ndarray
    bias: np.ndarray
    source_classifier: np.ndarray
    source_bias: np.ndarray
    target_classifier: np.ndarray | None = None
    target_bias: np.ndarray | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                v = np.array(v, dtype=np.float64)
                if not np.all(np.isfinite(v)):
                    raise ValueError(f"{f.name} has non-finite entries")
                setattr(self, f.name, v)
        d_out = self.weight.shape[0]
        if self.weight.ndim != 2 or d_out < 1 or self.bias.shape != (d_out,):
            raise ValueError("adapter weight/bias shapes disagree")
        if self.source_classifier.shape[1] != d_out or self.source_bias.shape != (len(self.source_classifier),):
            raise ValueError("source head shape disagrees with adapter output")
        if (self.target_classifier is None) != (self.target_bias is None):
            raise ValueError("target head needs both weights and biases")
        if self.target_classifier is not None and (
                self.target_classifier.shape[1] != d_out
                or self.target_bias.shape != (len(self.target_classifier),)):
            raise ValueError("target head shape disagrees with adapter output")

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def n_source_classes(self) -> int:
        return len(self.source_classifier)

    @property
    def n_target_classes(self) -> int:
        return 0 if self.target_classifier is None else len(self.target_classifier)

    def arrays(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def copy(self) -> "AdapterParams":
        return AdapterParams(**{k: v.copy() for k, v in self.arrays().items()})


def init_params(d_in: int, n_source_classes: int, d_out: int | None = None, rng=None) -> AdapterParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    d_out = d_out or d_in
    return AdapterParams(
        weight=rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_out, d_in)),
        bias=np.zeros(d_out),
        source_classifier=rng.normal(0.0, 1.0 / math.sqrt(d_out), (n_source_classes, d_out)),
        source_bias=np.zeros(n_source_classes),
    )


@dataclass
class TrainConfig:
    lam: float = 0.5
    learning_rate: float = 0.1
    max_iters: int = 1500
    batch_size: int = 64
    plateau_tolerance: float = 1e-4
    plateau_window: int = 10
    seed: int = 0
    mmd_layers: str = "last_two"
    momentum: float = 0.0
    eval_interval: int = 10
    warmup_fraction: float = 0.2
    pseudo_iters: int | None = None
    hidden_dim: int | None = None
    n_kernels: int = 5

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_iters < 1 or self.batch_size < 1 or self.plateau_window < 1 or self.eval_interval < 1:
            raise ValueError("max_iters, batch_size, plateau_window, eval_interval must be positive")
        if self.plateau_tolerance < 0:
            raise ValueError("plateau_tolerance must be nonnegative")
        if self.mmd_layers not in ("last", "last_two"):
            raise ValueError(f"mmd_layers must be 'last' or 'last_two', got {self.mmd_layers!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.n_kernels < 1:
            raise ValueError("n_kernels must be >= 1")


@dataclass
class LossBreakdown:
    source_cls: float = 0.0
    mmd: float = 0.0
    target_pseudo_cls: float = 0.0
    total: float = 0.0


@dataclass
class Forward:
    pre: np.ndarray
    hidden: np.ndarray
    source_logits: np.ndarray
    target_logits: np.ndarray | None


def forward(params: AdapterParams, x) -> Forward:
    """Run the adapter on one vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.d_in:
        raise ValueError(f"dimension mismatch: input has {x.shape[1]} features, adapter expects {params.d_in}")
    pre = x @ params.weight.T + params.bias
    h = np.tanh(pre)
    s = h @ params.source_classifier.T + params.source_bias
    t = None
    if params.target_classifier is not None:
        t = h @ params.target_classifier.T + params.target_bias
    if single:
        return Forward(pre[0], h[0], s[0], None if t is None else t[0])
    return Forward(pre, h, s, t)


def _xent(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if len(logits) == 0 or len(labels) != len(logits):
        raise ValueError("need a nonempty batch with one label per row")
    c = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} out of range for {c} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = float(np.mean(lse - shifted[rows, labels]))
    grad = np.exp(shifted - lse[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / len(labels)


def softmax_cls_loss(logits_batch, labels) -> float:
    return _xent(logits_batch, labels)[0]


def _loss_and_grads(params, batch_s, batch_t, pseudo, spec, cfg, pre_spec=None, need_grads=True):
    lam = cfg.lam
    lb = LossBreakdown()
    grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    flows = []  # (x, forward, d_hidden, d_pre)

    fs = ft = None
    if batch_s is not None:
        xs, ys = batch_s
        xs = as_matrix(xs)
        fs = forward(params, xs)
        lb.source_cls, dl = _xent(fs.source_logits, ys)
        grads["source_classifier"] += dl.T @ fs.hidden
        grads["source_bias"] += dl.sum(axis=0)
        flows.append([xs, fs, dl @ params.source_classifier, np.zeros_like(fs.pre)])

    if batch_t is not None and spec is not None:
        if fs is None:
            raise ValueError("MMD term needs a source batch")
        xt = as_matrix(batch_t)
        ft = forward(params, xt)
        flows.append([xt, ft, np.zeros_like(ft.hidden), np.zeros_like(ft.pre)])
        val, gs, gt = kernels.mmd_biased_with_gradients(fs.hidden, ft.hidden, spec)
        flows[0][2] += lam * gs
        flows[-1][2] += lam * gt
        mmd = val
        if cfg.mmd_layers == "last_two":
            val2, gs2, gt2 = kernels.mmd_biased_with_gradients(fs.pre, ft.pre, pre_spec or spec)
            flows[0][3] += lam * gs2
            flows[-1][3] += lam * gt2
            mmd += val2
        lb.mmd = mmd

    if pseudo is not None:
        if params.target_classifier is None:
            raise ValueError("pseudo-label term needs a target head")
        xp, yp = pseudo
        xp = as_matrix(xp)
        fp = forward(params, xp)
        lb.target_pseudo_cls, dl = _xent(fp.target_logits, yp)
        grads["target_classifier"] += dl.T @ fp.hidden
        grads["target_bias"] += dl.sum(axis=0)
        flows.append([xp, fp, dl @ params.target_classifier, np.zeros_like(fp.pre)])

    lb.total = lb.source_cls + lam * lb.mmd + lb.target_pseudo_cls
    if need_grads:
        for x, f, dh, dz in flows:
            dz = dz + dh * (1.0 - f.hidden ** 2)
            grads["weight"] += dz.T @ x
            grads["bias"] += dz.sum(axis=0)
    return lb, grads


def total_loss(batch_s, batch_t, pseudo, params: AdapterParams, spec: KernelSpec | None,
               cfg: TrainConfig, pre_spec: KernelSpec | None = None) -> LossBreakdown:
    """Source cross-entropy + lam * MMD(source, target) + pseudo-label cross-entropy.

    ``batch_s`` is ``(x, labels)`` or None, ``batch_t`` an unlabeled matrix or
    None, ``pseudo`` ``(x, pseudo_labels)`` or None. Absent terms count 0. With
    ``mmd_layers == "last_two"`` MMD is also taken on the pre-activations
    (kernel ``pre_spec``, defaulting to ``spec``) and the two are summed.
    """
    return _loss_and_grads(params, batch_s, batch_t, pseudo, spec, cfg, pre_spec, need_grads=False)[0]


def backward(batch_s, batch_t, pseudo, params: AdapterParams, spec: KernelSpec | None,
             cfg: TrainConfig, pre_spec: KernelSpec | None = None) -> dict:
    """Gradients of :func:`total_loss` for every parameter array, keyed by field name."""
    return _loss_and_grads(params, batch_s, batch_t, pseudo, spec, cfg, pre_spec)[1]


# -- training loop ----------------------------------------------------------

class _Batcher:
    """Row indices drawn without replacement, reshuffled every epoch."""

    def __init__(self, n, size, rng):
        self.n, self.size, self.rng = n, min(size, n), rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next(self):
        if self.pos + self.size > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.size]
        self.pos += self.size
        return idx


def _plateaued(totals, window, tol):
    if len(totals) <= window:
        return False
    old, new = totals[-window - 1], totals[-1]
    return (old - new) / max(abs(old), 1e-12) < tol


def _sgd(params, make_batch, cfg, iters, stage, spec=None, pre_spec=None, trainable=None):
    params = params.copy()
    velocity = {}
    history = []
    acc = []
    totals = []
    for it in range(1, iters + 1):
        bs, bt, bp = make_batch()
        lb, grads = _loss_and_grads(params, bs, bt, bp, spec, cfg, pre_spec)
        if not math.isfinite(lb.total):
            raise TrainingDiverged(f"{stage}: loss became non-finite at iteration {it}")
        for name, g in grads.items():
            if trainable is not None and name not in trainable:
                continue
            if cfg.momentum:
                v = velocity.get(name, 0.0) * cfg.momentum + g
                velocity[name] = v
                g = v
            getattr(params, name)[...] -= cfg.learning_rate * g
        acc.append(lb)
        if it % cfg.eval_interval == 0 or it == iters:
            row = {"iter": it}
            for k in HISTORY_COLUMNS[1:]:
                row[k] = float(np.mean([getattr(b, k) for b in acc]))
            history.append(row)
            totals.append(row["total"])
            acc = []
            if _plateaued(totals, cfg.plateau_window, cfg.plateau_tolerance):
                log.info("%s: plateau reached at iteration %d", stage, it)
                break
    return params, history


def _supervised_stage(source, target, params, cfg, spec, pre_spec, iters, rng, stage):
    xs = as_matrix(source)
    ys = source.labels
    if ys is None or np.any(ys == UNLABELED):
        raise ValueError("source set must be fully labeled")
    sb = _Batcher(len(xs), cfg.batch_size, rng)
    if target is not None:
        xt = as_matrix(target)
        if len(xt) == 0:
            raise ValueError("target set is empty")
        tb = _Batcher(len(xt), cfg.batch_size, rng)

    def make_batch():
        i = sb.next()
        bt = None
        if target is not None:
            bt = xt[tb.next()]
        return (xs[i], ys[i]), bt, None

    return _sgd(params, make_batch, cfg, iters, stage, spec, pre_spec)


def stage2_mmd_adapt(source: EmbeddingSet, target: EmbeddingSet, params: AdapterParams,
                     cfg: TrainConfig, spec: KernelSpec, pre_spec: KernelSpec | None = None,
                     iters: int | None = None, rng=None):
    """Mini-batch SGD on source cross-entropy + lam * MMD.

    Returns ``(params, history)``; history rows hold interval-averaged losses.
    """
    cfg.validate()
    rng = rng if rng is not None else stream(cfg.seed, "stage2")
    return _supervised_stage(source, target, params, cfg, spec, pre_spec,
                             iters or cfg.max_iters, rng, "stage-2")


def target_head_from_clusters(params: AdapterParams, x, pseudo: PseudoLabeling) -> AdapterParams:
    """Fresh target head: row k is the unit-normalized mean adapter output of cluster k."""
    h = forward(params, as_matrix(x)).hidden
    a = pseudo.assignments
    k = int(a.max()) + 1
    protos = np.zeros((k, params.d_out))
    np.add.at(protos, a[a >= 0], h[a >= 0])
    norms = np.linalg.norm(protos, axis=1, keepdims=True)
    protos = protos / np.where(norms > 0, norms, 1.0)
    out = params.copy()
    out.target_classifier = protos
    out.target_bias = np.zeros(k)
    return out


def stage4_pseudo_adapt(target: EmbeddingSet, pseudo: PseudoLabeling, params: AdapterParams,
                        cfg: TrainConfig, iters: int | None = None, rng=None):
    """Fine-tune adapter + a fresh target head on pseudo-labeled rows only.

    The source head receives no gradient in this stage.
    """
    cfg.validate()
    a = np.asarray(pseudo.assignments)
    x = as_matrix(target)
    if len(a) != len(x):
        raise ValueError("pseudo-label count does not match target size")
    keep = np.flatnonzero(a != UNLABELED)
    n_clusters = len(np.unique(a[keep]))
    if n_clusters < 2:
        raise ValueError(f"need at least 2 pseudo-label clusters, got {n_clusters}")
    xa, ya = x[keep], a[keep]
    params = target_head_from_clusters(params, xa, PseudoLabeling(ya))
    rng = rng if rng is not None else stream(cfg.seed, "stage4")
    pb = _Batcher(len(xa), cfg.batch_size, rng)

    def make_batch():
        i = pb.next()
        return None, None, (xa[i], ya[i])

    iters = iters or cfg.pseudo_iters or cfg.max_iters
    return _sgd(params, make_batch, cfg, iters, "stage-4",
                trainable={"weight", "bias", "target_classifier", "target_bias"})


def kernel_specs_for(params: AdapterParams, xs, xt, m: int):
    """Median-ladder kernels for the hidden and pre-activation layers."""
    fs, ft = forward(params, xs), forward(params, xt)
    spec = kernels.bandwidth_ladder(kernels.median_bandwidth(fs.hidden, ft.hidden), m)
    pre_spec = kernels.bandwidth_ladder(kernels.median_bandwidth(fs.pre, ft.pre), m)
    return spec, pre_spec


def hidden_mmd(params: AdapterParams, source, target, spec: KernelSpec) -> float:
    return kernels.mmd_biased(forward(params, as_matrix(source)).hidden,
                              forward(params, as_matrix(target)).hidden, spec).value


@dataclass
class CdaResult:
    params: AdapterParams
    source_only_params: AdapterParams
    adapted_params: AdapterParams
    pseudo: PseudoLabeling
    spec: KernelSpec
    pre_spec: KernelSpec
    histories: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)


def run_source_and_mmd(source, target, cfg: TrainConfig):
    """Stages 1-2. Returns (source_only, adapted, spec, pre_spec, histories, reports)."""
    cfg.validate()
    if source.labels is None:
        raise StageError("stage-1", "source set has no labels")
    xs, xt = as_matrix(source), as_matrix(target)
    n_cls = int(source.labels.max()) + 1
    params = init_params(xs.shape[1], n_cls, cfg.hidden_dim, stream(cfg.seed, "init"))

    warm = int(round(cfg.warmup_fraction * cfg.max_iters))
    source_only, h1 = params, []
    if warm:
        source_only, h1 = _supervised_stage(source, None, params, cfg, None, None, warm,
                                            stream(cfg.seed, "stage1"), "stage-1")

    rng2 = stream(cfg.seed, "stage2")
    first_s = xs[rng2.permutation(len(xs))[:cfg.batch_size]]
    first_t = xt[rng2.permutation(len(xt))[:cfg.batch_size]]
    spec, pre_spec = kernel_specs_for(source_only, first_s, first_t, cfg.n_kernels)

    mmd_before = hidden_mmd(source_only, xs, xt, spec)
    adapted, h2 = stage2_mmd_adapt(source, target, source_only, cfg, spec, pre_spec,
                                   iters=max(cfg.max_iters - warm, 1), rng=rng2)
    mmd_after = hidden_mmd(adapted, xs, xt, spec)
    reports = {"mmd_initial": mmd_before, "mmd_adapted": mmd_after,
               "bandwidths": spec.bandwidths, "pre_bandwidths": pre_spec.bandwidths}
    return source_only, adapted, spec, pre_spec, {"stage1": h1, "stage2": h2}, reports


def run_pseudo_stages(target, adapted: AdapterParams, cfg: TrainConfig, ccfg: ClusterConfig):
    """Stages 3-4 starting from an MMD-adapted model."""
    ccfg.validate()
    hidden = forward(adapted, as_matrix(target)).hidden
    try:
        pseudo = pseudo_label_pipeline(hidden, ccfg)
    except ValueError as exc:
        raise StageError("stage-3", str(exc)) from exc
    if pseudo.cluster_count < 2:
        raise StageError(
            "stage-3",
            f"clustering produced {pseudo.cluster_count} cluster(s) at alpha={ccfg.alpha}; "
            "try a lower alpha",
        )
    try:
        final, h4 = stage4_pseudo_adapt(target, pseudo, adapted, cfg, rng=stream(cfg.seed, "stage4"))
    except TrainingDiverged as exc:
        raise StageError("stage-4", str(exc)) from exc
    return final, pseudo, h4


def run_cda(source: EmbeddingSet, target: EmbeddingSet, cfg: TrainConfig,
            ccfg: ClusterConfig) -> CdaResult:
    """All four stages; deterministic for a given ``cfg.seed``."""
    try:
        source_only, adapted, spec, pre_spec, hist, reports = run_source_and_mmd(source, target, cfg)
    except TrainingDiverged as exc:
        raise StageError("stage-2", str(exc)) from exc
    final, pseudo, h4 = run_pseudo_stages(target, adapted, cfg, ccfg)
    hist["stage4"] = h4
    reports.update(cluster_count=pseudo.cluster_count, assigned_count=pseudo.assigned_count)
    return CdaResult(final, source_only, adapted, pseudo, spec, pre_spec, hist, reports)


# -- persistence ------------------------------------------------------------

def save_checkpoint(params: AdapterParams, path) -> None:
    nt = params.n_target_classes
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, params.d_in, params.d_out,
                                   params.n_source_classes, nt))
        for arr in params.arrays().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> AdapterParams:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, d_in, d_out, ns, nt = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    shapes = [("weight", (d_out, d_in)), ("bias", (d_out,)),
              ("source_classifier", (ns, d_out)), ("source_bias", (ns,))]
    if nt:
        shapes += [("target_classifier", (nt, d_out)), ("target_bias", (nt,))]
    need = _CKPT_HEADER.size + 4 * sum(int(np.prod(s)) for _, s in shapes)
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    off = _CKPT_HEADER.size
    arrays = {}
    for name, shape in shapes:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, "<f4", count, off).astype(np.float64).reshape(shape)
        off += 4 * count
    return AdapterParams(**arrays)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["iter"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])
