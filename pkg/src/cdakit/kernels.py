"""Gaussian kernel mixtures and MMD estimators with analytic gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .embedding_io import as_matrix

#: largest N x M kernel block materialized at once
KERNEL_CACHE_CAP = 20_000


@dataclass(frozen=True)
class KernelSpec:
    """Convex mixture of Gaussian kernels ``exp(-||x-y||^2 / gamma_u)``."""

    bandwidths: tuple
    weights: tuple

    def __post_init__(self):
        bw = tuple(float(g) for g in self.bandwidths)
        w = tuple(float(b) for b in self.weights)
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "weights", w)
        if len(bw) < 1 or len(bw) != len(w):
            raise ValueError("need m >= 1 bandwidths and as many weights")
        if any(not (g > 0 and math.isfinite(g)) for g in bw):
            raise ValueError(f"bandwidths must be positive, got {bw}")
        if any(b < 0 for b in w):
            raise ValueError("weights must be nonnegative")
        if abs(math.fsum(w) - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {math.fsum(w)}")

    @property
    def m(self) -> int:
        return len(self.bandwidths)


@dataclass(frozen=True)
class MmdEstimate:
    value: float
    estimator: str
    kernel: KernelSpec
    n_used: int | None = None
    truncated: int = 0


def gaussian_kernel(x, y, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    d = x - y
    return math.exp(-float(d @ d) / gamma)


def multi_kernel(x, y, spec: KernelSpec) -> float:
    return math.fsum(b * gaussian_kernel(x, y, g) for g, b in zip(spec.bandwidths, spec.weights))


def kernel_matrix(a, b, spec: KernelSpec) -> np.ndarray:
    """Mixture kernel matrix between the rows of ``a`` and ``b``."""
    sq = cdist(a, b, "sqeuclidean")
    out = np.zeros_like(sq)
    for g, w in zip(spec.bandwidths, spec.weights):
        out += w * np.exp(-sq / g)
    return out


def _kernel_sum(a, b, spec, exclude_diagonal=False, cap=KERNEL_CACHE_CAP) -> float:
    """Sum of all kernel entries, blockwise in a fixed row order."""
    if len(a) <= cap and len(b) <= cap:
        k = kernel_matrix(a, b, spec)
        total = float(k.sum())
        return total - float(np.trace(k)) if exclude_diagonal else total
    total = 0.0
    for s in range(0, len(a), cap):
        blk = kernel_matrix(a[s:s + cap], b, spec)
        total += float(blk.sum())
        if exclude_diagonal:
            total -= float(np.trace(blk, offset=s))
    return total


def _canonical(a, b):
    """Order the pair by (size, bytes) so f(a, b) and f(b, a) share one code path."""
    ka = (a.shape, a.tobytes())
    kb = (b.shape, b.tobytes())
    return (b, a) if kb < ka else (a, b)


def _check_pair(a, b, min_n=1):
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < min_n or len(b) < min_n:
        raise ValueError(f"need at least {min_n} samples in each set, got {len(a)} and {len(b)}")
    return a, b


def median_bandwidth(a, b) -> float:
    """Median squared pairwise distance of the pooled samples.

    Falls back to the smallest positive squared distance when the median is
    zero, and to 1.0 when every point coincides.
    """
    a, b = _check_pair(a, b, min_n=0)
    pooled = np.vstack([a, b])
    if len(pooled) < 2:
        raise ValueError("need at least 2 pooled samples")
    sq = pdist(pooled, "sqeuclidean")
    med = float(np.median(sq))
    if med > 0:
        return med
    pos = sq[sq > 0]
    return float(pos.min()) if pos.size else 1.0


def bandwidth_ladder(gamma_m: float, m: int = 5) -> KernelSpec:
    """Bandwidths ``gamma_m * 2**j`` for ``j < m`` with uniform weights."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return KernelSpec(tuple(gamma_m * 2.0**j for j in range(m)), (1.0 / m,) * m)


def mmd_biased(a, b, spec: KernelSpec) -> MmdEstimate:
    a, b = _check_pair(a, b)
    a, b = _canonical(a, b)
    m, n = len(a), len(b)
    v = (_kernel_sum(a, a, spec) / (m * m) + _kernel_sum(b, b, spec) / (n * n)
         - 2.0 * _kernel_sum(a, b, spec) / (m * n))
    return MmdEstimate(v, "biased", spec, n_used=m + n)


def mmd_unbiased_quadratic(a, b, spec: KernelSpec) -> MmdEstimate:
    """U-statistic: within-set sums skip i == j."""
    a, b = _check_pair(a, b, min_n=2)
    a, b = _canonical(a, b)
    m, n = len(a), len(b)
    v = (_kernel_sum(a, a, spec, exclude_diagonal=True) / (m * (m - 1))
         + _kernel_sum(b, b, spec, exclude_diagonal=True) / (n * (n - 1))
         - 2.0 * _kernel_sum(a, b, spec) / (m * n))
    return MmdEstimate(v, "unbiased_quadratic", spec, n_used=m + n)


def _paired_kernel(x, y, spec):
    sq = np.sum((x - y) ** 2, axis=1)
    out = np.zeros(len(x))
    for g, w in zip(spec.bandwidths, spec.weights):
        out += w * np.exp(-sq / g)
    return out


def mmd_linear_streaming(a, b, spec: KernelSpec) -> MmdEstimate:
    """Linear-time estimate averaging h over disjoint sample quadruples.

    Both sets are cut to the largest common even length; the number of
    dropped rows is reported in ``truncated``.
    """
    a, b = _check_pair(a, b)
    n = min(len(a), len(b))
    n -= n % 2
    if n < 2:
        raise ValueError(f"need at least 2 usable samples per set, got {n}")
    dropped = (len(a) - n) + (len(b) - n)
    x, xp = a[0:n:2], a[1:n:2]
    y, yp = b[0:n:2], b[1:n:2]
    h = (_paired_kernel(x, xp, spec) + _paired_kernel(y, yp, spec)
         - _paired_kernel(x, yp, spec) - _paired_kernel(xp, y, spec))
    return MmdEstimate(float(h.mean()), "linear_streaming", spec, n_used=n, truncated=dropped)


def _dkernel_weights(a, b, spec):
    """sum_u beta_u (2/gamma_u) k_u(a_i, b_j): the scalar factor in dk/da_i."""
    sq = cdist(a, b, "sqeuclidean")
    out = np.zeros_like(sq)
    for g, w in zip(spec.bandwidths, spec.weights):
        out += w * (2.0 / g) * np.exp(-sq / g)
    return out


def _pull(x, y, w):
    # sum_j w_ij (x_i - y_j)
    return x * w.sum(axis=1, keepdims=True) - w @ y


def mmd_biased_gradient(a, b, spec: KernelSpec, wrt: str = "a") -> np.ndarray:
    """d mmd_biased(a, b) / d(rows of ``wrt``), same shape as that set."""
    a, b = _check_pair(a, b)
    if wrt == "b":
        a, b = b, a
    elif wrt != "a":
        raise ValueError("wrt must be 'a' or 'b'")
    m, n = len(a), len(b)
    return (-2.0 / (m * m)) * _pull(a, a, _dkernel_weights(a, a, spec)) \
        + (2.0 / (m * n)) * _pull(a, b, _dkernel_weights(a, b, spec))


def _kernel_and_derivative(x, y, spec):
    sq = cdist(x, y, "sqeuclidean")
    k = np.zeros_like(sq)
    dk = np.zeros_like(sq)
    for g, w in zip(spec.bandwidths, spec.weights):
        e = np.exp(-sq / g)
        k += w * e
        dk += w * (2.0 / g) * e
    return k, dk


def mmd_biased_with_gradients(a, b, spec: KernelSpec):
    """Biased MMD value plus gradients for both sets, sharing the distance work."""
    a, b = _check_pair(a, b)
    m, n = len(a), len(b)
    kaa, daa = _kernel_and_derivative(a, a, spec)
    kbb, dbb = _kernel_and_derivative(b, b, spec)
    kab, dab = _kernel_and_derivative(a, b, spec)
    val = kaa.sum() / (m * m) + kbb.sum() / (n * n) - 2.0 * kab.sum() / (m * n)
    ga = (-2.0 / (m * m)) * _pull(a, a, daa) + (2.0 / (m * n)) * _pull(a, b, dab)
    gb = (-2.0 / (n * n)) * _pull(b, b, dbb) + (2.0 / (m * n)) * _pull(b, a, dab.T)
    return float(val), ga, gb
