"""Dense kernels shared by every other module.

Kernels come in two flavours: ``*_apply`` functions work on :class:`~hikersgg.tape.Var`
and participate in reverse-mode gradients, while ``softmax``, ``mlp_forward`` and
``gru_step`` are the plain-array entry points with input validation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import tape
from .tape import Var


class Rng:
    """Counter-based generator keyed by ``(seed, stream)``.

    Backed by numpy's Philox, so a given key yields the same draws on every
    platform and independent streams never interfere.
    """

    def __init__(self, seed: int, stream: str | int = 0):
        self.seed = int(seed)
        self.stream = stream
        digest = hashlib.sha256(f"{self.seed}:{stream}".encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream: str | int) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{stream}")

    def normal(self, size=None, scale=1.0):
        return self.gen.normal(0.0, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def poisson(self, lam, size=None):
        return self.gen.poisson(lam, size)


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input contains non-finite entries")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cosine(a, b) -> Var:
    a, b = tape.as_var(a), tape.as_var(b)
    if np.any((a.value == 0).all(axis=-1)) or np.any((b.value == 0).all(axis=-1)):
        raise ValueError("cosine similarity of a zero-norm vector")
    sq = tape.log(tape.sum(a * a, axis=-1)) + tape.log(tape.sum(b * b, axis=-1))
    return tape.sum(a * b, axis=-1) * tape.exp(-0.5 * sq)


@dataclass
class MlpParams:
    """Three dense layers; rectifier after the first two, linear output."""

    w1: object
    b1: object
    w2: object
    b2: object
    w3: object
    b3: object

    @classmethod
    def init(cls, rng: Rng, dims, dtype=np.float64) -> "MlpParams":
        d0, d1, d2, d3 = dims
        out = {}
        for i, (a, b) in enumerate([(d0, d1), (d1, d2), (d2, d3)], start=1):
            out[f"w{i}"] = rng.normal((a, b), scale=np.sqrt(2.0 / a)).astype(dtype)
            out[f"b{i}"] = np.zeros(b, dtype=dtype)
        return cls(**out)

    @classmethod
    def zeros(cls, dims, dtype=np.float64) -> "MlpParams":
        d0, d1, d2, d3 = dims
        return cls(np.zeros((d0, d1), dtype), np.zeros(d1, dtype), np.zeros((d1, d2), dtype),
                   np.zeros(d2, dtype), np.zeros((d2, d3), dtype), np.zeros(d3, dtype))

    @property
    def in_dim(self) -> int:
        return _val(self.w1).shape[0]

    @property
    def out_dim(self) -> int:
        return _val(self.w3).shape[1]

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass
class GruParams:
    """Update gate (z), reset gate (r) and candidate (h) weights for message and state."""

    wz: object
    uz: object
    bz: object
    wr: object
    ur: object
    br: object
    wh: object
    uh: object
    bh: object

    @classmethod
    def init(cls, rng: Rng, d: int, dtype=np.float64) -> "GruParams":
        s = 1.0 / np.sqrt(d)
        out = {}
        for g in "zrh":
            out[f"w{g}"] = rng.normal((d, d), scale=s).astype(dtype)
            out[f"u{g}"] = rng.normal((d, d), scale=s).astype(dtype)
            out[f"b{g}"] = np.zeros(d, dtype=dtype)
        return cls(**out)

    @classmethod
    def zeros(cls, d: int, dtype=np.float64) -> "GruParams":
        z = lambda *s: np.zeros(s, dtype)  # noqa: E731
        return cls(z(d, d), z(d, d), z(d), z(d, d), z(d, d), z(d), z(d, d), z(d, d), z(d))

    @property
    def dim(self) -> int:
        return _val(self.wz).shape[0]

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def linear_apply(x, w, b=None) -> Var:
    y = tape.matmul(x, w)
    return y if b is None else y + b


def mlp_apply(p: MlpParams, x) -> Var:
    h = tape.relu(linear_apply(x, p.w1, p.b1))
    h = tape.relu(linear_apply(h, p.w2, p.b2))
    return linear_apply(h, p.w3, p.b3)


def gru_apply(p: GruParams, h, m) -> Var:
    h, m = tape.as_var(h), tape.as_var(m)
    z = tape.sigmoid(m @ p.wz + h @ p.uz + p.bz)
    r = tape.sigmoid(m @ p.wr + h @ p.ur + p.br)
    cand = tape.tanh(m @ p.wh + (r * h) @ p.uh + p.bh)
    return h + z * (cand - h)


def mlp_forward(p: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=_val(p.w1).dtype)
    if x.shape[-1] != p.in_dim:
        raise ValueError(f"input dim {x.shape[-1]} != first layer dim {p.in_dim}")
    return mlp_apply(p, x).value


def gru_step(p: GruParams, h, m) -> np.ndarray:
    h = np.asarray(h, dtype=_val(p.wz).dtype)
    m = np.asarray(m, dtype=_val(p.wz).dtype)
    d = p.dim
    if h.shape[-1] != d or m.shape[-1] != d:
        raise ValueError(f"state/message dims {h.shape[-1]}/{m.shape[-1]} != {d}")
    return gru_apply(p, h, m).value


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
               point, eps: float = 1e-6, coords=None) -> GradCheckReport:
    """Compare ``grad(point)`` with central differences of ``f``.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` restricts the comparison to a subset of flat indices.
    """
    x = np.array(point, dtype=np.float64).ravel()
    analytic = np.asarray(grad(x.copy()), dtype=np.float64).ravel()
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("analytic gradient is not finite")
    idx = np.arange(x.size) if coords is None else np.asarray(coords)
    numeric = np.zeros(len(idx))
    for n, i in enumerate(idx):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        numeric[n] = (fp - fm) / (2 * eps)
    a = analytic[idx]
    err = np.abs(a - numeric) / np.maximum(1.0, np.abs(numeric))
    worst = int(np.argmax(err)) if err.size else 0
    return GradCheckReport(float(err.max()) if err.size else 0.0, int(idx[worst]) if err.size else 0,
                           a, numeric)


def directional_check(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                      point, direction, eps: float = 1e-6) -> float:
    """Relative error between ``grad . v`` and the central difference along ``v``."""
    x = np.array(point, dtype=np.float64).ravel()
    v = np.asarray(direction, dtype=np.float64).ravel()
    v = v / np.linalg.norm(v)
    analytic = float(np.dot(np.asarray(grad(x.copy())).ravel(), v))
    fp, fm = float(f(x + eps * v)), float(f(x - eps * v))
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise FloatingPointError("non-finite evaluation along direction")
    numeric = (fp - fm) / (2 * eps)
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)
