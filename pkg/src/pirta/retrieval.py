"""Exact cosine retrieval over a frozen embedding database, plus ranking metrics.

Relevance defaults to territory-label equality between query and hit.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .data import StructuredFinding, TerritoryLabel


class RetrievalError(LookupError):
    """Empty index, duplicate ids or an invalid query."""


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class Hit:
    id: str
    similarity: float
    label: TerritoryLabel
    finding: Optional[StructuredFinding] = None


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    hits: tuple[Hit, ...]
    k: int
    query_label: Optional[TerritoryLabel] = None
    # relevant items in the whole database for this query's label
    n_relevant: Optional[int] = None

    def relevance(self, rule: Optional[Callable[[Hit], bool]] = None) -> np.ndarray:
        if rule is None:
            if self.query_label is None:
                raise ValueError("result has no query label; pass an explicit relevance rule")
            rule = lambda h: h.label is self.query_label  # noqa: E731
        return np.array([1 if rule(h) else 0 for h in self.hits], dtype=np.int64)


class EmbeddingIndex:
    """Row-normalized feature matrix with parallel ids, labels and findings."""

    def __init__(self, ids: Sequence[str], features: np.ndarray, labels: Sequence[TerritoryLabel],
                 findings: Optional[Sequence[StructuredFinding]] = None):
        ids = list(ids)
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise RetrievalError(f"duplicate ids in index: {dup[:5]}")
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            feats = feats.reshape(len(ids), -1)
        if len(feats) != len(ids) or len(labels) != len(ids):
            raise RetrievalError("ids, features and labels must have equal length")
        findings = list(findings) if findings is not None else [None] * len(ids)
        if len(findings) != len(ids):
            raise RetrievalError("findings must match ids in length")
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise RetrievalError("cannot index a zero feature vector")
        self._ids = tuple(ids)
        self._features = (feats / norms).astype(np.float32) if len(ids) else np.zeros((0, feats.shape[1]), np.float32)
        self._features.setflags(write=False)
        self._labels = tuple(TerritoryLabel(l) for l in labels)
        self._findings = tuple(findings)

    frozen = True

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def features(self) -> np.ndarray:
        return self._features

    @property
    def labels(self) -> tuple[TerritoryLabel, ...]:
        return self._labels

    @property
    def findings(self) -> tuple:
        return self._findings

    @property
    def feature_dim(self) -> int:
        return self._features.shape[1]

    def count_label(self, label: TerritoryLabel) -> int:
        return sum(1 for l in self._labels if l is label)

    def checksum(self) -> str:
        return hashlib.sha256(self._features.astype("<f4").tobytes()).hexdigest()


def query_top_k(idx: EmbeddingIndex, query_feature: Sequence[float], k: int,
                query_id: str = "query", query_label: Optional[TerritoryLabel] = None) -> RetrievalResult:
    """Exact top-k by cosine similarity; ties resolve to earlier insertion order."""
    if len(idx) == 0:
        raise RetrievalError("cannot query an empty index")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query_feature, dtype=np.float64).ravel()
    if q.shape[0] != idx.feature_dim:
        raise ValueError(f"query has dimension {q.shape[0]}, index has {idx.feature_dim}")
    qn = np.linalg.norm(q)
    if qn == 0:
        raise ValueError("cannot query with a zero vector")
    sims = np.clip(idx.features.astype(np.float64) @ (q / qn), -1.0, 1.0)
    # stable sort on -sim keeps insertion order among ties
    order = np.argsort(-sims, kind="stable")[:k]
    hits = tuple(Hit(idx.ids[i], float(sims[i]), idx.labels[i], idx.findings[i]) for i in order)
    label = TerritoryLabel(query_label) if query_label is not None else None
    n_rel = idx.count_label(label) if label is not None else None
    return RetrievalResult(query_id, hits, k, label, n_rel)


def query_batch(idx: EmbeddingIndex, features: np.ndarray, k: int, ids: Sequence[str],
                labels: Optional[Sequence[TerritoryLabel]] = None) -> list[RetrievalResult]:
    labels = labels if labels is not None else [None] * len(ids)
    return [query_top_k(idx, f, k, i, l) for f, i, l in zip(features, ids, labels)]


# ---------------------------------------------------------------------------
# metrics


def _rel(x) -> np.ndarray:
    if isinstance(x, RetrievalResult):
        return x.relevance()
    return np.asarray(x, dtype=np.int64)


def precision_at_k(result, k: Optional[int] = None) -> float:
    """Fraction of relevant items among the top ``k`` (default: all hits)."""
    rel = _rel(result)
    k = len(rel) if k is None else k
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(rel[:k].sum() / k)


def ap_at_n(result, n: int, total_relevant_in_db: Optional[int] = None) -> float:
    """(1/N) * sum_{k<=n} P@k * rel@k with N = min(n, relevant items in the database)."""
    rel = _rel(result)
    if total_relevant_in_db is None:
        if not isinstance(result, RetrievalResult) or result.n_relevant is None:
            raise ValueError("total_relevant_in_db is required for raw relevance lists")
        total_relevant_in_db = result.n_relevant
    if n > len(rel):
        raise ValueError(f"n={n} exceeds the {len(rel)} retrieved hits")
    N = min(n, total_relevant_in_db)
    if N == 0:
        return 0.0
    rel = rel[:n]
    prec = np.cumsum(rel) / np.arange(1, n + 1)
    return float((prec * rel).sum() / N)


def map_at_n(results: Sequence, n: int, totals: Optional[Sequence[int]] = None) -> float:
    if len(results) == 0:
        raise ValueError("need at least one query")
    totals = totals if totals is not None else [None] * len(results)
    return float(np.mean([ap_at_n(r, n, t) for r, t in zip(results, totals)]))


def acc_at_k(results: Sequence, k: int) -> float:
    """Fraction of queries with at least one relevant hit in the top ``k``."""
    if len(results) == 0:
        raise ValueError("need at least one query")
    return float(np.mean([1.0 if _rel(r)[:k].any() else 0.0 for r in results]))


def retrieval_table(results: Sequence[RetrievalResult], ks: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    row = {f"mAP@{n}": map_at_n(results, n) for n in ks}
    row.update({f"Acc@{k}": acc_at_k(results, k) for k in ks})
    return row


def silhouette_score(features: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette over points, Euclidean distance; singleton clusters score 0."""
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray([l.value if isinstance(l, TerritoryLabel) else l for l in labels])
    classes, inv = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two distinct labels")
    D = cdist(X, X)
    n = len(X)
    sums = np.stack([D[:, inv == c].sum(axis=1) for c in range(len(classes))], axis=1)
    sizes = np.bincount(inv, minlength=len(classes)).astype(np.float64)
    own = sizes[inv]
    a = np.where(own > 1, sums[np.arange(n), inv] / np.maximum(own - 1, 1), 0.0)
    other = sums / sizes
    other[np.arange(n), inv] = np.inf
    b = other.min(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = (b - a) / np.maximum(a, b)
    s = np.where(own > 1, np.nan_to_num(s, nan=0.0), 0.0)
    return float(s.mean())


def pca_2d(features: np.ndarray) -> np.ndarray:
    """Project rows onto the top two principal components."""
    X = np.asarray(features, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("cannot project an empty feature matrix")
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = np.zeros((2, X.shape[1]))
    comps[: min(2, len(vt))] = vt[:2]
    # deterministic sign: largest-magnitude loading positive
    for c in comps:
        j = np.argmax(np.abs(c))
        if c[j] < 0:
            c *= -1
    return Xc @ comps.T


# ---------------------------------------------------------------------------
# file formats


def save_index(idx: EmbeddingIndex, path: str | Path, extra: Optional[dict] = None) -> None:
    """Write ``<path>.f32`` (row-major f32le matrix) and ``<path>.json`` manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Path(str(path) + ".f32").write_bytes(idx.features.astype("<f4").tobytes())
    doc = {
        "ids": list(idx.ids),
        "labels": [l.value for l in idx.labels],
        "findings": [f.to_dict() if f is not None else None for f in idx.findings],
        "feature_dim": idx.feature_dim,
        "n": len(idx),
        "checksum": idx.checksum(),
        **(extra or {}),
    }
    Path(str(path) + ".json").write_text(json.dumps(doc, indent=1))


def index_exists(path: str | Path) -> bool:
    return Path(str(path) + ".json").exists() and Path(str(path) + ".f32").exists()


def load_index(path: str | Path) -> EmbeddingIndex:
    doc = json.loads(Path(str(path) + ".json").read_text())
    raw = np.frombuffer(Path(str(path) + ".f32").read_bytes(), dtype="<f4")
    feats = raw.reshape(doc["n"], doc["feature_dim"])
    digest = hashlib.sha256(feats.astype("<f4").tobytes()).hexdigest()
    if digest != doc["checksum"]:
        raise RetrievalError(f"{path}: feature checksum mismatch")
    findings = [StructuredFinding.from_dict(f) if f else None for f in doc["findings"]]
    idx = EmbeddingIndex(doc["ids"], feats, [TerritoryLabel(l) for l in doc["labels"]], findings)
    # rows were normalized at build time; keep the stored bits exactly
    idx._features = np.array(feats, dtype=np.float32)
    idx._features.setflags(write=False)
    return idx


RETRIEVAL_COLUMNS = ("mAP@1", "mAP@5", "mAP@10", "Acc@1", "Acc@5", "Acc@10")


def write_csv(path: str | Path, rows: Iterable[dict], columns: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: (f"{row[c]:.4f}" if isinstance(row.get(c), float) else row.get(c, ""))
                        for c in columns})
