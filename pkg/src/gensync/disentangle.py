"""Identity-aware factorization of audio embeddings.

``M(a, i) = C [(U1 a) * (U2 i)] + W2 a + W3 i`` with ``*`` the elementwise
product. The multiplicative path lets an identity rescale how audio drives
motion; the two additive paths carry each input on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, hadamard, matmul
from .errors import DimensionError, UnknownIdentityError


@dataclass
class DisentangleParams:
    U1: Tensor  # d_h x d_a
    U2: Tensor  # d_h x d_i
    C: Tensor   # d_m x d_h
    W2: Tensor  # d_m x d_a
    W3: Tensor  # d_m x d_i

    def __post_init__(self):
        d_h, d_a = self.U1.shape
        d_h2, d_i = self.U2.shape
        d_m = self.C.shape[0]
        if d_h != d_h2 or self.C.shape[1] != d_h:
            raise DimensionError(f"U1 {self.U1.shape}, U2 {self.U2.shape} and C {self.C.shape} disagree on d_h")
        if self.W2.shape != (d_m, d_a) or self.W3.shape != (d_m, d_i):
            raise DimensionError(f"W2 {self.W2.shape} / W3 {self.W3.shape} incompatible with d_m={d_m}")

    @classmethod
    def init(cls, rng, d_a=16, d_i=8, d_h=32, d_m=32):
        def mat(rows, cols):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(cols), (rows, cols)), requires_grad=True)

        return cls(mat(d_h, d_a), mat(d_h, d_i), mat(d_m, d_h), mat(d_m, d_a), mat(d_m, d_i))

    @property
    def dims(self):
        return {"d_a": self.U1.shape[1], "d_i": self.U2.shape[1],
                "d_h": self.U1.shape[0], "d_m": self.C.shape[0]}

    def named_parameters(self, prefix="disentangle"):
        return {f"{prefix}/{k}": getattr(self, k) for k in ("U1", "U2", "C", "W2", "W3")}

    def parameters(self):
        return list(self.named_parameters().values())


@dataclass
class AudioEmbedding:
    vector: np.ndarray
    frame: int = 0
    source: str = ""


@dataclass
class IdentityTable:
    """Learnable identity vectors keyed by label; lookups return the live tensor."""

    dim: int
    vectors: dict = field(default_factory=dict)

    def register(self, label, rng=None, vector=None):
        if vector is None:
            rng = rng if rng is not None else np.random.default_rng()
            vector = rng.normal(0.0, 0.01, self.dim)
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise DimensionError(f"identity vector must have shape ({self.dim},), got {vector.shape}")
        self.vectors[label] = Tensor(vector, requires_grad=True, name=label)
        return self.vectors[label]

    @property
    def labels(self):
        return list(self.vectors)

    def __contains__(self, label):
        return label in self.vectors

    def __len__(self):
        return len(self.vectors)


def lookup_identity(table, label):
    try:
        return table.vectors[label]
    except KeyError:
        raise UnknownIdentityError(label, table.vectors) from None


def _vec(x):
    if isinstance(x, AudioEmbedding):
        x = x.vector
    return x if isinstance(x, Tensor) else Tensor(x)


def disentangle(a, i, p):
    """Condition vector of width d_m for audio ``a`` spoken as identity ``i``."""
    a, i = _vec(a), _vec(i)
    if a.shape != (p.U1.shape[1],) or i.shape != (p.U2.shape[1],):
        raise DimensionError(
            f"expected a of shape ({p.U1.shape[1]},) and i of shape ({p.U2.shape[1]},), "
            f"got {a.shape} and {i.shape}")
    inter = matmul(p.C, hadamard(matmul(p.U1, a), matmul(p.U2, i)))
    return add(add(inter, matmul(p.W2, a)), matmul(p.W3, i))


def _m(a, i, p):
    return disentangle(np.asarray(a, float), np.asarray(i, float), p).data


def _close(x, y, tol):
    return float(np.max(np.abs(x - y))) <= tol * max(1.0, float(np.max(np.abs(x))), float(np.max(np.abs(y))))


def bilinear_residual_check(a1, a2, i, p, i2=None, tol=1e-9):
    """True when M is linear in ``a`` at fixed ``i`` (and in ``i`` at fixed ``a1`` if ``i2`` is given)."""
    a1, a2, i = (np.asarray(x, dtype=np.float64) for x in (a1, a2, i))
    w3i = p.W3.data @ i
    ok = _close(_m(a1 + a2, i, p), _m(a1, i, p) + _m(a2, i, p) - w3i, tol)
    if i2 is not None:
        i2 = np.asarray(i2, dtype=np.float64)
        w2a = p.W2.data @ a1
        ok = ok and _close(_m(a1, i + i2, p), _m(a1, i, p) + _m(a1, i2, p) - w2a, tol)
    return ok


def scaling_check(a, i, lam, p, tol=1e-9):
    """M(lam a, i) == lam (M(a, i) - W3 i) + W3 i."""
    a, i = np.asarray(a, dtype=np.float64), np.asarray(i, dtype=np.float64)
    w3i = p.W3.data @ i
    return _close(_m(lam * a, i, p), lam * (_m(a, i, p) - w3i) + w3i, tol)
