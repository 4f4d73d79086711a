"""Class-similarity metrics, average-linkage agglomeration and 3-level hierarchies."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class EmbeddingTable:
    tokens: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.tokens) != self.vectors.shape[0]:
            raise ValueError("embedding table shape does not match token list")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate tokens in embedding table")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, names) -> np.ndarray:
        missing = [n for n in names if n not in self._index]
        if missing:
            raise KeyError(f"no embedding for: {', '.join(missing)}")
        return self.vectors[[self._index[n] for n in names]]

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        tokens, rows = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                tokens.append(parts[0])
                try:
                    rows.append([float(x) for x in parts[1:]])
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: bad number") from exc
        if rows and len({len(r) for r in rows}) != 1:
            raise ValueError(f"{path}: inconsistent vector dimensions")
        return cls(tokens, np.array(rows).reshape(len(rows), -1))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t, v in zip(self.tokens, self.vectors):
                fh.write(t + " " + " ".join(repr(float(x)) for x in v) + "\n")


@dataclass
class ConfusionMatrix:
    """Row = actual class, column = predicted class."""

    labels: list[str]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        c = len(self.labels)
        if self.matrix.shape != (c, c):
            raise ValueError(f"confusion matrix must be {c}x{c}, got {self.matrix.shape}")
        if np.any(self.matrix < 0) or np.any(self.matrix > 1):
            raise ValueError("confusion entries must lie in [0, 1]")
        if np.any(self.matrix.sum(axis=1) > 1 + 1e-6):
            raise ValueError("confusion rows must sum to at most 1")

    @classmethod
    def load(cls, path) -> "ConfusionMatrix":
        doc = json.loads(Path(path).read_text())
        return cls(list(doc["labels"]), np.array(doc["matrix"], dtype=np.float64))

    def to_json(self, **extra) -> dict:
        return {"labels": list(self.labels), "matrix": self.matrix.tolist(), **extra}

    def save(self, path, **extra) -> None:
        Path(path).write_text(json.dumps(self.to_json(**extra), sort_keys=True) + "\n")


@dataclass(frozen=True)
class Merge:
    a: int
    b: int
    similarity: float
    new_id: int


@dataclass
class Dendrogram:
    n_items: int
    merges: list[Merge] = field(default_factory=list)


@dataclass
class Hierarchy:
    target: str
    leaf_to_l2: np.ndarray
    l2_to_l1: np.ndarray
    leaf_names: list[str] | None = None

    def __post_init__(self):
        if self.target not in ("entity", "predicate"):
            raise ValueError(f"hierarchy target must be entity or predicate, got {self.target!r}")
        self.leaf_to_l2 = np.asarray(self.leaf_to_l2, dtype=np.int64)
        self.l2_to_l1 = np.asarray(self.l2_to_l1, dtype=np.int64)
        n2 = len(self.l2_to_l1)
        if self.leaf_to_l2.ndim != 1 or len(self.leaf_to_l2) == 0:
            raise ValueError("hierarchy needs at least one leaf")
        if self.leaf_to_l2.min() < 0 or self.leaf_to_l2.max() >= n2:
            raise ValueError("leaf_to_l2 references a missing level-2 group")
        if n2 == 0 or self.l2_to_l1.min() < 0:
            raise ValueError("l2_to_l1 references a missing level-1 group")
        if set(np.unique(self.leaf_to_l2)) != set(range(n2)):
            raise ValueError("every level-2 group needs at least one leaf")
        n1 = int(self.l2_to_l1.max()) + 1
        if set(np.unique(self.l2_to_l1)) != set(range(n1)):
            raise ValueError("every level-1 group needs at least one level-2 group")
        if self.leaf_names is not None and len(self.leaf_names) != len(self.leaf_to_l2):
            raise ValueError("leaf_names length does not match leaf count")

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_to_l2)

    @property
    def n_l2(self) -> int:
        return len(self.l2_to_l1)

    @property
    def n_l1(self) -> int:
        return int(self.l2_to_l1.max()) + 1

    @property
    def leaf_to_l1(self) -> np.ndarray:
        return self.l2_to_l1[self.leaf_to_l2]

    @classmethod
    def flat(cls, target: str, n_leaves: int, leaf_names=None) -> "Hierarchy":
        return cls(target, np.zeros(n_leaves, dtype=np.int64), np.zeros(1, dtype=np.int64), leaf_names)

    def to_json(self) -> dict:
        return {"target": self.target, "leaf_to_l2": self.leaf_to_l2.tolist(),
                "l2_to_l1": self.l2_to_l1.tolist(),
                "leaf_names": list(self.leaf_names) if self.leaf_names is not None else None}

    @classmethod
    def from_json(cls, doc: dict) -> "Hierarchy":
        for key in ("target", "leaf_to_l2", "l2_to_l1"):
            if key not in doc:
                raise ValueError(f"hierarchy file missing {key!r}")
        return cls(doc["target"], doc["leaf_to_l2"], doc["l2_to_l1"], doc.get("leaf_names"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, Hierarchy) and self.to_json() == other.to_json()


def semantic_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("vectors differ in dimension")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm vector has no direction")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pattern_similarity(r: ConfusionMatrix | np.ndarray, i: int, j: int) -> float:
    m = r.matrix if isinstance(r, ConfusionMatrix) else np.asarray(r)
    n = m.shape[0]
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"class index out of range for {n} classes")
    return float(m[i, j] + m[j, i])


def combined_similarity(sem: float, pat: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("blend weight must lie in [0, 1]")
    return lam * sem + (1.0 - lam) * pat


def similarity_matrix(vectors, confusion=None, lam: float = 0.5) -> np.ndarray:
    """Blended pairwise similarity for every class pair (diagonal left at 0)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("blend weight must lie in [0, 1]")
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding has no direction")
    u = v / norms[:, None]
    sem = np.clip(u @ u.T, -1.0, 1.0)
    if lam < 1.0:
        if confusion is None:
            raise ValueError("a confusion matrix is required when the blend weight is below 1")
        m = confusion.matrix if isinstance(confusion, ConfusionMatrix) else np.asarray(confusion)
        if m.shape != sem.shape:
            raise ValueError("confusion matrix size does not match class count")
        pat = m + m.T
        s = lam * sem + (1.0 - lam) * pat
    else:
        s = sem
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 0.0)
    return s


def agglomerate(s) -> Dendrogram:
    """Average-linkage agglomeration on a similarity matrix (highest first)."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError("similarity matrix must be square")
    if not np.all(np.isfinite(s)):
        raise ValueError("similarity matrix has non-finite entries")
    if not np.allclose(s, s.T, atol=1e-9, rtol=0):
        raise ValueError("similarity matrix must be symmetric")
    n = s.shape[0]
    merges: list[Merge] = []
    if n <= 1:
        return Dendrogram(n, merges)
    cap = 2 * n - 1
    sim = np.full((cap, cap), -np.inf)
    sim[:n, :n] = s
    np.fill_diagonal(sim, -np.inf)
    size = np.zeros(cap, dtype=np.int64)
    size[:n] = 1
    alive = np.zeros(cap, dtype=bool)
    alive[:n] = True
    for new in range(n, cap):
        ids = np.flatnonzero(alive)
        sub = sim[np.ix_(ids, ids)]
        best = sub.max()
        # lowest (a, b) pair among exact maxima, a < b
        rows, cols = np.nonzero(np.triu(sub == best, k=1))
        k = np.lexsort((cols, rows))[0]
        a, b = int(ids[rows[k]]), int(ids[cols[k]])
        merges.append(Merge(a, b, float(best), new))
        alive[a] = alive[b] = False
        others = np.flatnonzero(alive)
        na, nb = size[a], size[b]
        upd = (na * sim[a, others] + nb * sim[b, others]) / (na + nb)
        sim[new, others] = upd
        sim[others, new] = upd
        size[new] = na + nb
        alive[new] = True
    return Dendrogram(n, merges)


def clusters_after(d: Dendrogram, n_merges: int) -> list[list[int]]:
    """Leaf sets alive after the first ``n_merges`` merges, ordered by smallest leaf."""
    members = {i: [i] for i in range(d.n_items)}
    for m in d.merges[:n_merges]:
        members[m.new_id] = sorted(members.pop(m.a) + members.pop(m.b))
    return sorted(members.values(), key=lambda c: c[0])


def cut_levels(d: Dendrogram, n_leaves: int, n_l2: int, n_l1: int, target: str = "predicate",
               leaf_names=None) -> Hierarchy:
    """Cut a complete dendrogram into ``n_l2`` level-2 and ``n_l1`` level-1 groups."""
    if d.n_items != n_leaves or len(d.merges) != max(n_leaves - 1, 0):
        raise ValueError("dendrogram is not complete for the given leaf count")
    if n_l2 > n_leaves or n_l1 > n_leaves:
        raise ValueError("requested more groups than leaves")
    if n_l1 < 1 or n_l2 < 1 or n_l1 > n_l2:
        raise ValueError("group counts must satisfy 1 <= level-1 <= level-2")
    l2_groups = clusters_after(d, n_leaves - n_l2)
    l1_groups = clusters_after(d, n_leaves - n_l1)
    leaf_to_l2 = np.empty(n_leaves, dtype=np.int64)
    for g, members in enumerate(l2_groups):
        leaf_to_l2[members] = g
    leaf_to_l1 = np.empty(n_leaves, dtype=np.int64)
    for g, members in enumerate(l1_groups):
        leaf_to_l1[members] = g
    l2_to_l1 = np.array([leaf_to_l1[members[0]] for members in l2_groups], dtype=np.int64)
    return Hierarchy(target, leaf_to_l2, l2_to_l1, leaf_names)


def discover(vectors, confusion, lam: float, n_l2: int, n_l1: int, target: str,
             leaf_names=None) -> Hierarchy:
    s = similarity_matrix(vectors, confusion, lam)
    return cut_levels(agglomerate(s), len(s), n_l2, n_l1, target, leaf_names)


def load_manual_hierarchy(path, expected_leaves: int | None = None) -> Hierarchy:
    """Load a hierarchy file; validates coverage and parent references."""
    doc = json.loads(Path(path).read_text())
    h = Hierarchy.from_json(doc)
    if expected_leaves is not None and h.n_leaves != expected_leaves:
        raise ValueError(f"{path}: hierarchy covers {h.n_leaves} leaves, expected {expected_leaves}")
    return h


DEFAULT_GROUPS = {"predicate": (10, 3), "entity": (40, 12)}
