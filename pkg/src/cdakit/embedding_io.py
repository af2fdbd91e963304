"""Embedding datasets: the container type, binary/CSV readers and writers,
and a synthetic two-domain generator."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

UNLABELED = -1

EMB_MAGIC = b"EMB1"
LAB_MAGIC = b"LAB1"
_HEADER = struct.Struct("<4sII")
_LAB_HEADER = struct.Struct("<4sI")


class FormatError(ValueError):
    """Raised when an embedding or label file does not match its format."""


@dataclass
class EmbeddingSet:
    """N feature vectors of dimension ``dim`` with optional integer labels.

    ``labels`` is the supervision channel (``-1`` marks an unlabeled row).
    ``truth`` holds ground-truth ids kept for evaluation only; training code
    never reads it.
    """

    vectors: np.ndarray
    labels: np.ndarray | None = None
    truth: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        if v.ndim == 1 and v.size == 0:
            v = v.reshape(0, 0)
        if v.ndim != 2:
            raise ValueError(f"vectors must be a 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            bad = np.argwhere(~np.isfinite(v))[0]
            raise ValueError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        self.vectors = v
        self.labels = self._check_labels(self.labels, "labels")
        self.truth = self._check_labels(self.truth, "truth")

    def _check_labels(self, lab, name):
        if lab is None:
            return None
        lab = np.asarray(lab)
        if lab.ndim != 1 or len(lab) != len(self.vectors):
            raise ValueError(f"{name} length {lab.shape} does not match N={len(self.vectors)}")
        if lab.size and not np.issubdtype(lab.dtype, np.integer):
            if not np.all(lab == np.round(lab)):
                raise ValueError(f"{name} must be integers")
        lab = lab.astype(np.int64)
        if np.any(lab < UNLABELED):
            raise ValueError(f"{name} must be >= -1")
        return lab

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.n

    def subset(self, idx) -> "EmbeddingSet":
        idx = np.asarray(idx)
        return EmbeddingSet(
            self.vectors[idx],
            None if self.labels is None else self.labels[idx],
            None if self.truth is None else self.truth[idx],
        )


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Return the float64 sample matrix behind an EmbeddingSet or array."""
    if isinstance(x, EmbeddingSet):
        return x.vectors.astype(np.float64, copy=False)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


# -- binary -----------------------------------------------------------------

def label_path(path) -> Path:
    return Path(str(path) + ".lab")


def truth_path(path) -> Path:
    return Path(str(path) + ".truth.lab")


def save_labels(labels, path) -> None:
    labels = np.asarray(labels, dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(_LAB_HEADER.pack(LAB_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _LAB_HEADER.size:
        raise FormatError(f"{path}: truncated label header at byte {len(data)}")
    magic, n = _LAB_HEADER.unpack_from(data, 0)
    if magic != LAB_MAGIC:
        raise FormatError(f"{path}: bad label magic {magic!r} at byte 0")
    expected = _LAB_HEADER.size + 8 * n
    if len(data) != expected:
        raise FormatError(
            f"{path}: label payload size mismatch, expected {expected} bytes, "
            f"found {len(data)} (first bad byte {min(len(data), expected)})"
        )
    return np.frombuffer(data, dtype="<i8", offset=_LAB_HEADER.size, count=n).astype(np.int64)


def _save_binary(es: EmbeddingSet, path: Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMB_MAGIC, es.n, es.dim))
        fh.write(np.ascontiguousarray(es.vectors, dtype="<f4").tobytes())
    if es.labels is not None:
        save_labels(es.labels, label_path(path))
    if es.truth is not None:
        save_labels(es.truth, truth_path(path))


def _load_binary(path: Path) -> EmbeddingSet:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: malformed header, file is {len(data)} bytes (need {_HEADER.size})")
    magic, n, d = _HEADER.unpack_from(data, 0)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: malformed header, bad magic {magic!r} at byte 0")
    expected = _HEADER.size + 4 * n * d
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload size mismatch for N={n}, D={d}: expected {expected} bytes, "
            f"found {len(data)} (at byte {min(len(data), expected)})"
        )
    vec = np.frombuffer(data, dtype="<f4", offset=_HEADER.size, count=n * d).astype(np.float32)
    vec = vec.reshape(n, d)
    finite = np.isfinite(vec)
    if not finite.all():
        flat = int(np.argmin(finite.ravel()))
        raise FormatError(f"{path}: non-finite value at byte {_HEADER.size + 4 * flat} (row {flat // d})")
    labels = truth = None
    lp = label_path(path)
    if lp.exists():
        labels = load_labels(lp)
        if len(labels) != n:
            raise FormatError(f"{lp}: label count {len(labels)} does not match N={n} (byte 4)")
    tp = truth_path(path)
    if tp.exists():
        truth = load_labels(tp)
        if len(truth) != n:
            raise FormatError(f"{tp}: label count {len(truth)} does not match N={n} (byte 4)")
    return EmbeddingSet(vec, labels, truth)


# -- csv --------------------------------------------------------------------

def _save_csv(es: EmbeddingSet, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i in range(es.n):
            row = [repr(float(v)) for v in es.vectors[i]]
            if es.labels is not None:
                row.insert(0, str(int(es.labels[i])))
            w.writerow(row)


def _load_csv(path: Path, has_labels: bool, dim: int | None) -> EmbeddingSet:
    rows, labels = [], []
    with open(path, newline="") as fh:
        for lineno, fields in enumerate(csv.reader(fh), start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            if has_labels:
                try:
                    labels.append(int(fields[0]))
                except ValueError:
                    raise FormatError(f"{path}: bad label {fields[0]!r} at line {lineno}") from None
                fields = fields[1:]
            if dim is None:
                dim = len(fields)
            if len(fields) != dim:
                raise FormatError(
                    f"{path}: row length mismatch at line {lineno}: expected {dim} values, got {len(fields)}"
                )
            try:
                vals = [float(f) for f in fields]
            except ValueError as exc:
                raise FormatError(f"{path}: unparseable value at line {lineno}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise FormatError(f"{path}: non-finite value at line {lineno}")
            rows.append(vals)
    vec = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim or 0)
    return EmbeddingSet(vec, np.asarray(labels, dtype=np.int64) if has_labels else None)


def save_embeddings(es: EmbeddingSet, path, format: str = "binary") -> None:
    """Write ``es`` to ``path``; labels go to the ``.lab`` sidecar (binary)
    or the first CSV column."""
    path = Path(path)
    if format == "binary":
        _save_binary(es, path)
    elif format == "csv":
        _save_csv(es, path)
    else:
        raise ValueError(f"unknown format {format!r}")


def load_embeddings(path, format: str = "binary", *, has_labels: bool = False,
                    dim: int | None = None) -> EmbeddingSet:
    """Read an embedding file.

    For CSV, ``has_labels`` says whether the first field is a label and
    ``dim`` optionally pins the expected row width (otherwise the first row
    decides).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if format == "binary":
        return _load_binary(path)
    if format == "csv":
        return _load_csv(path, has_labels, dim)
    raise ValueError(f"unknown format {format!r}")


# -- synthetic data ---------------------------------------------------------

@dataclass
class SynthConfig:
    """Parameters of the synthetic source/target generator.

    Class means are random unit vectors shared by both domains. Source rows
    are ``mean + class_spread * noise``; target rows add one global offset of
    norm ``shift_vector_scale`` and per-sample noise of std ``shift_noise``.
    """

    num_classes: int = 10
    samples_per_class: int = 30
    dim: int = 16
    class_spread: float = 0.1
    shift_vector_scale: float = 0.0
    shift_noise: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.samples_per_class < 1 or self.dim < 1:
            raise ValueError("samples_per_class and dim must be positive")
        if self.class_spread <= 0:
            raise ValueError("class_spread must be positive")
        if self.shift_vector_scale < 0 or self.shift_noise < 0:
            raise ValueError("shift scales must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


def synthesize_domain_pair(cfg: SynthConfig) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Draw a labeled source set and a shifted, unlabeled target set.

    The target's class ids are returned in ``target.truth`` only.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    means = rng.standard_normal((cfg.num_classes, cfg.dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    direction = rng.standard_normal(cfg.dim)
    shift = cfg.shift_vector_scale * direction / np.linalg.norm(direction)

    n = cfg.num_classes * cfg.samples_per_class
    ids = np.repeat(np.arange(cfg.num_classes), cfg.samples_per_class)

    src_ids = ids[rng.permutation(n)]
    src = means[src_ids] + cfg.class_spread * rng.standard_normal((n, cfg.dim))

    tgt_ids = ids[rng.permutation(n)]
    tgt = (means[tgt_ids] + cfg.class_spread * rng.standard_normal((n, cfg.dim))
           + shift + cfg.shift_noise * rng.standard_normal((n, cfg.dim)))

    source = EmbeddingSet(src.astype(np.float32), labels=src_ids)
    target = EmbeddingSet(tgt.astype(np.float32), truth=tgt_ids)
    return source, target


def split_holdout(es: EmbeddingSet, fraction: float, seed: int = 0) -> tuple[EmbeddingSet, EmbeddingSet]:
    """Randomly split rows into (kept, held_out) with ``fraction`` held out."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(es.n)
    k = int(round(fraction * es.n))
    return es.subset(np.sort(perm[k:])), es.subset(np.sort(perm[:k]))
