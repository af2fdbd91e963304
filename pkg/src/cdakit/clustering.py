"""Threshold-graph clustering of embeddings into pseudo-labels.

Pipeline: cosine similarity matrix -> edges where similarity > alpha ->
connected components -> components of at least ``p`` nodes become clusters
-> cluster prototypes (mean vectors) -> every leftover point joins its most
similar prototype if that cosine is > beta.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .embedding_io import UNLABELED, as_matrix, save_labels

#: above this many samples, edges are generated blockwise without a full matrix
SIMILARITY_CACHE_CAP = 30_000


@dataclass
class ClusterConfig:
    alpha: float = 0.675
    beta: float = 0.8
    min_component_size: int = 3

    def validate(self) -> None:
        if not -1 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (-1, 1), got {self.alpha}")
        if not -1 < self.beta < 1:
            raise ValueError(f"beta must lie in (-1, 1), got {self.beta}")
        if int(self.min_component_size) != self.min_component_size or self.min_component_size < 1:
            raise ValueError(f"min_component_size must be a positive integer, got {self.min_component_size}")


@dataclass
class ClusterGraph:
    node_count: int
    edges: np.ndarray  # (E, 2) int64, i < j

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (np.any(e[:, 0] >= e[:, 1]) or e.min() < 0 or e.max() >= self.node_count):
            raise ValueError("edges must be pairs i < j of valid node indices")
        self.edges = e

    def edge_set(self) -> set:
        return {(int(i), int(j)) for i, j in self.edges}


@dataclass
class PseudoLabeling:
    """Per-sample cluster ids (``-1`` = unassigned) and cluster prototypes."""

    assignments: np.ndarray
    prototypes: np.ndarray | None = None
    warning: str | None = None
    stats: dict = field(default_factory=dict)

    @property
    def cluster_count(self) -> int:
        if self.prototypes is not None:
            return len(self.prototypes)
        a = self.assignments
        return int(a.max()) + 1 if a.size and a.max() >= 0 else 0

    @property
    def assigned_count(self) -> int:
        return int(np.sum(self.assignments != UNLABELED))

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)

    def size_histogram(self) -> dict:
        sizes = np.bincount(self.assignments[self.assignments >= 0], minlength=self.cluster_count)
        vals, counts = np.unique(sizes, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValueError(f"zero-norm vector at index {int(zero[0])}")
    return x / norms[:, None]


def cosine_similarity_matrix(x) -> np.ndarray:
    x = as_matrix(x)
    if len(x) < 1:
        raise ValueError("need at least one sample")
    u = _unit_rows(x)
    s = u @ u.T
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return np.clip(s, -1.0, 1.0)


def build_graph(sim, alpha: float) -> ClusterGraph:
    """Edge (i, j) iff ``sim[i, j] > alpha``; the diagonal is ignored."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {sim.shape}")
    i, j = np.nonzero(np.triu(sim > alpha, k=1))
    return ClusterGraph(sim.shape[0], np.column_stack([i, j]))


def build_graph_blockwise(x, alpha: float, block: int = 4096) -> ClusterGraph:
    """Same edges as ``build_graph(cosine_similarity_matrix(x))`` without the N x N matrix."""
    u = _unit_rows(as_matrix(x))
    n = len(u)
    parts = []
    for s in range(0, n, block):
        rows = u[s:s + block]
        sim = rows @ u.T
        i, j = np.nonzero(sim > alpha)
        i = i + s
        keep = j > i
        parts.append(np.column_stack([i[keep], j[keep]]))
    edges = np.vstack(parts) if parts else np.zeros((0, 2), dtype=np.int64)
    return ClusterGraph(n, edges)


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, i):
        p = self.parent
        root = i
        while p[root] != root:
            root = p[root]
        while p[i] != root:
            p[i], i = root, p[i]
        return root

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            # smaller index becomes the root
            if ri < rj:
                self.parent[rj] = ri
            else:
                self.parent[ri] = rj


def connected_components(graph: ClusterGraph) -> list[list[int]]:
    """Maximal connected node sets, each sorted, listed by smallest member."""
    uf = _UnionFind(graph.node_count)
    for i, j in graph.edges:
        uf.union(int(i), int(j))
    groups: dict[int, list[int]] = {}
    for v in range(graph.node_count):
        groups.setdefault(uf.find(v), []).append(v)
    return sorted(groups.values(), key=lambda c: c[0])


def components_to_clusters(components, p: int, n: int | None = None) -> PseudoLabeling:
    if p < 1:
        raise ValueError("p must be >= 1")
    comps = [sorted(int(v) for v in c) for c in components]
    total = sum(len(c) for c in comps)
    if n is None:
        n = total
    seen = np.zeros(n, dtype=bool)
    for c in comps:
        for v in c:
            if v < 0 or v >= n or seen[v]:
                raise ValueError(f"components overlap or contain invalid index {v}")
            seen[v] = True
    if not seen.all():
        raise ValueError(f"components miss index {int(np.argmin(seen))}")
    assign = np.full(n, UNLABELED, dtype=np.int64)
    k = 0
    for c in sorted(comps, key=lambda c: c[0]):
        if len(c) >= p:
            assign[c] = k
            k += 1
    return PseudoLabeling(assign)


def compute_prototypes(x, labeling: PseudoLabeling) -> PseudoLabeling:
    """Mean of the raw member vectors of each cluster."""
    x = as_matrix(x)
    a = labeling.assignments
    kc = labeling.cluster_count
    counts = np.bincount(a[a >= 0], minlength=kc)
    if np.any(counts == 0):
        raise ValueError(f"cluster {int(np.argmin(counts))} is empty")
    protos = np.zeros((kc, x.shape[1]))
    np.add.at(protos, a[a >= 0], x[a >= 0])
    protos /= counts[:, None]
    return replace(labeling, prototypes=protos)


def assign_scattered(x, labeling: PseudoLabeling, beta: float) -> PseudoLabeling:
    """Attach each unassigned point to its most cosine-similar prototype when
    that similarity exceeds ``beta``. Prototypes stay frozen during the pass."""
    x = as_matrix(x)
    if labeling.prototypes is None:
        raise ValueError("prototypes not computed")
    a = labeling.assignments.copy()
    scattered = np.flatnonzero(a == UNLABELED)
    if scattered.size == 0:
        return replace(labeling, assignments=a)
    if labeling.cluster_count == 0:
        msg = f"no clusters exist; {scattered.size} points left unassigned"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return replace(labeling, assignments=a, warning=msg)
    sims = _unit_rows(x[scattered]) @ _unit_rows(labeling.prototypes).T
    best = np.argmax(sims, axis=1)  # first maximum = smallest cluster id
    top = sims[np.arange(len(scattered)), best]
    ok = top > beta
    a[scattered[ok]] = best[ok]
    return replace(labeling, assignments=a)


def pseudo_label_pipeline(x, cfg: ClusterConfig, cap: int = SIMILARITY_CACHE_CAP) -> PseudoLabeling:
    cfg.validate()
    x = as_matrix(x)
    if len(x) < 1:
        raise ValueError("need at least one sample")
    if len(x) <= cap:
        graph = build_graph(cosine_similarity_matrix(x), cfg.alpha)
    else:
        graph = build_graph_blockwise(x, cfg.alpha)
    comps = connected_components(graph)
    lab = components_to_clusters(comps, cfg.min_component_size, len(x))
    pre = lab.assigned_count
    lab = compute_prototypes(x, lab)
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        lab = assign_scattered(x, lab, cfg.beta)
    lab.stats = {
        "edges": int(len(graph.edges)),
        "components": len(comps),
        "clustered_before_pickup": pre,
        "picked_up": lab.assigned_count - pre,
    }
    return lab


def cluster_quality(labeling, truth) -> dict:
    """Pairwise precision/recall/F and purity over assigned points."""
    assign = labeling.assignments if isinstance(labeling, PseudoLabeling) else np.asarray(labeling)
    truth = np.asarray(truth)
    if len(truth) != len(assign):
        raise ValueError(f"length mismatch: {len(assign)} assignments vs {len(truth)} truth labels")
    mask = assign != UNLABELED
    a, t = assign[mask], truth[mask]
    if a.size == 0:
        return {"pairwise_precision": 1.0, "pairwise_recall": 0.0, "pairwise_f": 0.0, "purity": 0.0}

    def pairs(counts):
        counts = counts.astype(np.int64)
        return int(np.sum(counts * (counts - 1) // 2))

    _, ai = np.unique(a, return_inverse=True)
    _, ti = np.unique(t, return_inverse=True)
    joint = np.zeros((ai.max() + 1, ti.max() + 1), dtype=np.int64)
    np.add.at(joint, (ai, ti), 1)
    both = pairs(joint.ravel())
    same_cluster = pairs(joint.sum(axis=1))
    same_truth = pairs(joint.sum(axis=0))
    precision = both / same_cluster if same_cluster else 1.0
    recall = both / same_truth if same_truth else 1.0
    f = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    purity = joint.max(axis=1).sum() / a.size
    return {"pairwise_precision": precision, "pairwise_recall": recall,
            "pairwise_f": f, "purity": float(purity)}


def write_pseudo_labels(labeling: PseudoLabeling, path) -> None:
    """LAB1 label file plus a ``.report.txt`` sidecar summary."""
    save_labels(labeling.assignments, path)
    lines = [
        f"cluster_count\t{labeling.cluster_count}",
        f"assigned_count\t{labeling.assigned_count}",
        f"sample_count\t{len(labeling.assignments)}",
    ]
    lines += [f"size_histogram\t{size}\t{count}" for size, count in labeling.size_histogram().items()]
    for k, v in labeling.stats.items():
        lines.append(f"{k}\t{v}")
    if labeling.warning:
        lines.append(f"warning\t{labeling.warning}")
    Path(str(path) + ".report.txt").write_text("\n".join(lines) + "\n")


class SimplifiedSpectralClustering(ClusterMixin, BaseEstimator):
    """Estimator wrapper around :func:`pseudo_label_pipeline`.

    Parameters
    ----------
    alpha : float, default=0.675
        Cosine threshold for graph edges.
    beta : float, default=0.8
        Cosine threshold for attaching scattered points to prototypes.
    min_component_size : int, default=3
        Components smaller than this are treated as scattered points.

    Attributes
    ----------
    labels_ : ndarray of shape (n_samples,)
        Cluster id per sample, ``-1`` for discarded points.
    cluster_centers_ : ndarray of shape (n_clusters, n_features)
        Prototypes computed before scattered-point pickup.
    n_clusters_ : int
    """

    def __init__(self, alpha=0.675, beta=0.8, min_component_size=3):
        self.alpha = alpha
        self.beta = beta
        self.min_component_size = min_component_size

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        cfg = ClusterConfig(self.alpha, self.beta, self.min_component_size)
        lab = pseudo_label_pipeline(X, cfg)
        self.labeling_ = lab
        self.labels_ = lab.assignments
        self.cluster_centers_ = lab.prototypes
        self.n_clusters_ = lab.cluster_count
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """Assign new points to the nearest prototype by cosine, ``-1`` if not above beta."""
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X, dtype=np.float64)
        empty = PseudoLabeling(np.full(len(X), UNLABELED, dtype=np.int64), self.cluster_centers_)
        if self.n_clusters_ == 0:
            return empty.assignments
        return assign_scattered(X, empty, self.beta).assignments
