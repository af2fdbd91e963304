"""Verification and identification metrics on cosine scores.

All thresholds are exact empirical order statistics and every comparison
against a threshold is strict (``score > t`` accepts).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .embedding_io import EmbeddingSet, as_matrix


@dataclass
class ScoreSet:
    genuine_scores: np.ndarray
    impostor_scores: np.ndarray

    def __post_init__(self):
        self.genuine_scores = np.asarray(self.genuine_scores, dtype=np.float64).ravel()
        self.impostor_scores = np.asarray(self.impostor_scores, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.genuine_scores)) and np.all(np.isfinite(self.impostor_scores))):
            raise ValueError("scores must be finite")


@dataclass
class EvalReport:
    roc_points: list = field(default_factory=list)
    tar_at_far: dict = field(default_factory=dict)
    cmc: dict = field(default_factory=dict)
    tpir_at_fpir: dict = field(default_factory=dict)
    notes: str = ""

    def to_text(self) -> str:
        lines = [f"tar_at_far\t{k:g}\t{v!r}" for k, v in self.tar_at_far.items()]
        lines += [f"cmc\trank-{k}\t{v!r}" for k, v in self.cmc.items()]
        lines += [f"tpir_at_fpir\t{k:g}\t{v!r}" for k, v in self.tpir_at_fpir.items()]
        if self.notes:
            lines += [f"note\t-\t{line}" for line in self.notes.splitlines()]
        return "\n".join(lines) + "\n"

    def write(self, directory, stem: str = "eval") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.txt").write_text(self.to_text())
        with open(d / f"{stem}_roc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["far", "tar"])
            w.writerows([repr(f), repr(t)] for f, t in self.roc_points)
        with open(d / f"{stem}_cmc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "rate"])
            w.writerows([k, repr(v)] for k, v in self.cmc.items())


def _unit(x):
    x = as_matrix(x)
    n = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(n == 0)
    if zero.size:
        raise ValueError(f"zero-norm vector at index {int(zero[0])}")
    return x / n[:, None]


def pair_scores(probe, gallery, pairs) -> ScoreSet:
    """Cosine score of each ``(i, j, same)`` pair, split by the ``same`` flag."""
    p, g = as_matrix(probe), as_matrix(gallery)
    pairs = list(pairs)
    if not pairs:
        return ScoreSet([], [])
    i = np.array([int(a) for a, _, _ in pairs])
    j = np.array([int(b) for _, b, _ in pairs])
    same = np.array([bool(s) for _, _, s in pairs])
    if i.min() < 0 or i.max() >= len(p) or j.min() < 0 or j.max() >= len(g):
        raise IndexError("pair index out of range")
    for name, mat, idx in (("probe", p, i), ("gallery", g, j)):
        zero = np.flatnonzero(np.linalg.norm(mat[idx], axis=1) == 0)
        if zero.size:
            raise ValueError(f"zero-norm {name} vector at index {int(idx[zero[0]])}")
    pv, gv = p[i], g[j]
    s = np.einsum("ij,ij->i", pv, gv) / (np.linalg.norm(pv, axis=1) * np.linalg.norm(gv, axis=1))
    return ScoreSet(s[same], s[~same])


def all_pairs(labels) -> list:
    """Every unordered pair ``(i, j, labels[i] == labels[j])`` with i < j."""
    labels = np.asarray(labels)
    return [(i, j, bool(labels[i] == labels[j])) for i, j in combinations(range(len(labels)), 2)]


def verification_scores(x, labels) -> ScoreSet:
    """All-pairs cosine scores within one labeled set."""
    u = _unit(x)
    labels = np.asarray(labels)
    i, j = np.triu_indices(len(u), k=1)
    s = (u @ u.T)[i, j]
    same = labels[i] == labels[j]
    return ScoreSet(s[same], s[~same])


def far_threshold(impostor, far: float) -> float:
    """Smallest impostor score t with ``mean(impostor > t) <= far``."""
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    if imp.size == 0:
        raise ValueError("need at least one impostor score")
    cand = np.unique(imp)
    above = imp.size - np.searchsorted(imp, cand, side="right")
    ok = np.flatnonzero(above / imp.size <= far)
    return float(cand[ok[0]])


def tar_at_far(scores: ScoreSet, far_targets) -> dict:
    if scores.impostor_scores.size == 0 or scores.genuine_scores.size == 0:
        raise ValueError("need genuine and impostor scores")
    out = {}
    for far in far_targets:
        if not 0 < far < 1:
            raise ValueError(f"far target must be in (0, 1), got {far}")
        t = far_threshold(scores.impostor_scores, far)
        out[far] = float(np.mean(scores.genuine_scores > t))
    return out


def roc_curve(scores: ScoreSet) -> list:
    """(far, tar) at every distinct impostor threshold, far ascending."""
    imp = np.sort(scores.impostor_scores)
    gen = np.sort(scores.genuine_scores)
    cand = np.unique(imp)[::-1]
    far = (imp.size - np.searchsorted(imp, cand, side="right")) / imp.size
    tar = (gen.size - np.searchsorted(gen, cand, side="right")) / max(gen.size, 1)
    return [(float(f), float(t)) for f, t in zip(far, tar)] + [(1.0, 1.0)]


def _ranked_gallery(probe, gallery):
    """Gallery indices sorted by descending cosine per probe; ties keep smaller index first."""
    s = _unit(probe) @ _unit(gallery).T
    order = np.argsort(-s, axis=1, kind="stable")
    return s, order


def cmc(probe: EmbeddingSet, gallery: EmbeddingSet, ranks) -> dict:
    pl, gl = _labels(probe, "probe"), _labels(gallery, "gallery")
    missing = set(pl.tolist()) - set(gl.tolist())
    if missing:
        raise ValueError(f"probe labels absent from gallery: {sorted(missing)[:5]}")
    _, order = _ranked_gallery(probe, gallery)
    hits = gl[order] == pl[:, None]
    first = hits.argmax(axis=1) + 1
    return {int(k): float(np.mean(first <= k)) for k in ranks}


def tpir_at_fpir(probe: EmbeddingSet, gallery: EmbeddingSet, fpir_targets) -> dict:
    """Open-set identification: unenrolled probes set the threshold on top-1 score."""
    pl, gl = _labels(probe, "probe"), _labels(gallery, "gallery")
    s, order = _ranked_gallery(probe, gallery)
    top = order[:, 0]
    top_score = s[np.arange(len(pl)), top]
    enrolled = np.isin(pl, gl)
    if not np.any(~enrolled):
        raise ValueError("no unenrolled probes")
    correct = gl[top] == pl
    out = {}
    for fpir in fpir_targets:
        t = far_threshold(top_score[~enrolled], fpir)
        hit = (top_score > t) & correct
        out[fpir] = float(hit[enrolled].mean()) if enrolled.any() else 0.0
    return out


def _labels(es, name):
    lab = es.labels if es.labels is not None else es.truth
    if lab is None:
        raise ValueError(f"{name} set needs labels")
    return np.asarray(lab)


def export_projection(x, dims: int = 2) -> np.ndarray:
    """Top principal components of centered data.

    Each axis is signed so its largest-magnitude loading is positive; axes
    beyond the data rank are zero.
    """
    x = as_matrix(x)
    if len(x) < 2:
        raise ValueError("need at least 2 samples")
    c = x - x.mean(axis=0)
    _, sv, vt = np.linalg.svd(c, full_matrices=False)
    out = np.zeros((len(x), dims))
    tol = sv.max() * max(c.shape) * np.finfo(float).eps if sv.size else 0.0
    for k in range(min(dims, len(sv))):
        if sv[k] <= tol:
            break
        v = vt[k]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out[:, k] = c @ v
    return out


def evaluate(x, labels, far_targets=(0.001, 0.01, 0.1), ranks=(1, 5, 10),
             fpir_targets=(0.01, 0.1), seed: int = 0) -> EvalReport:
    """Full report on one labeled set.

    Verification uses all pairs. For identification the first sample of each
    identity forms the gallery, the rest are probes, and a third of identities
    (chosen with ``seed``) are left out of the gallery for the open-set metric.
    """
    x = as_matrix(x)
    labels = np.asarray(labels)
    sc = verification_scores(x, labels)
    rep = EvalReport(roc_points=roc_curve(sc), tar_at_far=tar_at_far(sc, far_targets))
    ids, first = np.unique(labels, return_index=True)
    gal_mask = np.zeros(len(x), dtype=bool)
    gal_mask[first] = True
    if np.any(~gal_mask):
        gallery = EmbeddingSet(x[gal_mask], labels[gal_mask])
        probe = EmbeddingSet(x[~gal_mask], labels[~gal_mask])
        rep.cmc = cmc(probe, gallery, [r for r in ranks if r <= len(ids)])
        rng = np.random.default_rng(seed)
        drop = rng.choice(ids, size=max(1, len(ids) // 3), replace=False)
        keep = ~np.isin(gallery.labels, drop)
        if keep.any():
            rep.tpir_at_fpir = tpir_at_fpir(probe, gallery.subset(np.flatnonzero(keep)), fpir_targets)
    return rep
