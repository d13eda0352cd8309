"""Reversed cumulative sum-product over cotangents and structured Jacobians.

``CumSumProd(a, K)_i = sum_{j >= i} a_j K_j K_{j-1} ... K_{i+1}``, i.e. the
linear recurrence ``u_i = a_i + u_{i+1} K_{i+1}`` solved from the end. Index 0
of a chain is never read: ``K_0`` would map past the start of the sequence.

Cotangents are row vectors, so ``u @ K`` applies ``K`` on the right. All
supported ``K`` are diagonal, so products commute numerically, but the code
keeps the ``outer . inner`` order anyway.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .layers import DIAGONAL, IDENTITY, SCALAR, ZERO, ResidualJacobian


def compose_K(outer: ResidualJacobian, inner: ResidualJacobian) -> ResidualJacobian:
    """The product ``outer . inner`` (apply ``outer`` first to a row vector)."""
    if outer.dim != inner.dim:
        raise ShapeError(f"compose_K: dims {outer.dim} and {inner.dim} differ")
    if outer.kind == ZERO or inner.kind == ZERO:
        return ResidualJacobian.zero(outer.dim)
    if outer.kind == IDENTITY:
        return inner
    if inner.kind == IDENTITY:
        return outer
    if outer.kind == SCALAR and inner.kind == SCALAR:
        return ResidualJacobian.scalar(outer.value * inner.value, outer.dim)
    return ResidualJacobian.diagonal(_diag_values(outer) * _diag_values(inner))


def _diag_values(K: ResidualJacobian):
    if K.kind == DIAGONAL:
        return K.value
    if K.kind == SCALAR:
        return np.full(K.dim, K.value)
    if K.kind == IDENTITY:
        return np.ones(K.dim)
    return np.zeros(K.dim)


def apply_K(K: ResidualJacobian, w) -> np.ndarray:
    """Row-vector product ``w @ K``."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != K.dim:
        raise ShapeError(f"apply_K: cotangent width {w.shape[-1]} but K has dim {K.dim}")
    if K.kind == IDENTITY:
        return w.copy()
    if K.kind == ZERO:
        return np.zeros_like(w)
    return w * K.value


class KChain:
    """A sequence of residual Jacobians stored as one array.

    Entries are promoted to a common representation: an identity chain keeps
    no values, a scalar chain keeps ``(n,)`` (Zero becomes 0), and a diagonal
    chain keeps ``(n, ..., dim)``. Dense matrices are not representable.
    """

    def __init__(self, kind: str, n: int, dim: int, values=None):
        if kind not in (IDENTITY, SCALAR, DIAGONAL):
            raise ValueError(f"KChain kind must be identity, scalar or diagonal, got {kind!r}")
        self.kind = kind
        self.n = n
        self.dim = dim
        self.values = values

    @classmethod
    def from_jacobians(cls, jacs) -> "KChain":
        jacs = list(jacs)
        if not jacs:
            raise ShapeError("KChain needs at least one entry")
        dim = jacs[0].dim
        for K in jacs:
            if not isinstance(K, ResidualJacobian):
                raise TypeError(f"KChain entries must be ResidualJacobian, got {type(K).__name__}")
            if K.dim != dim:
                raise ShapeError(f"KChain entries mix dims {dim} and {K.dim}")
        kinds = {K.kind for K in jacs}
        n = len(jacs)
        if kinds == {IDENTITY}:
            return cls(IDENTITY, n, dim)
        if DIAGONAL not in kinds:
            vals = np.array([{IDENTITY: 1.0, ZERO: 0.0}.get(K.kind, K.value) for K in jacs], dtype=np.float64)
            return cls(SCALAR, n, dim, vals)
        shape = np.broadcast_shapes(*[K.value.shape for K in jacs if K.kind == DIAGONAL])
        vals = np.empty((n,) + shape)
        for i, K in enumerate(jacs):
            vals[i] = _diag_values(K) if K.kind != DIAGONAL else K.value
        return cls(DIAGONAL, n, dim, vals)

    @classmethod
    def identity(cls, n: int, dim: int) -> "KChain":
        return cls(IDENTITY, n, dim)

    def __len__(self):
        return self.n

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            n = len(range(*idx.indices(self.n)))
            vals = None if self.values is None else self.values[idx]
            return KChain(self.kind, n, self.dim, vals)
        i = range(self.n)[idx]
        if self.kind == IDENTITY:
            return ResidualJacobian.identity(self.dim)
        if self.kind == SCALAR:
            return ResidualJacobian.scalar(self.values[i], self.dim)
        return ResidualJacobian.diagonal(self.values[i])

    def _expand(self, u):
        v = self.values
        if self.kind == SCALAR:
            return v.reshape((self.n,) + (1,) * (u.ndim - 1))
        if v.ndim < u.ndim:
            return v.reshape((self.n,) + (1,) * (u.ndim - v.ndim) + v.shape[1:])
        return v

    def apply(self, u) -> np.ndarray:
        """Entry-wise ``u[i] @ K[i]`` for a stack ``u`` of shape ``(n, ..., dim)``."""
        if len(u) != self.n:
            raise ShapeError(f"KChain.apply: {len(u)} cotangents for {self.n} entries")
        if self.kind == IDENTITY:
            return u
        return u * self._expand(u)

    def compose(self, inner: "KChain") -> "KChain":
        """Entry-wise ``self[i] . inner[i]``."""
        if len(inner) != self.n or inner.dim != self.dim:
            raise ShapeError("KChain.compose: chains do not line up")
        if self.kind == IDENTITY:
            return inner
        if inner.kind == IDENTITY:
            return self
        if self.kind == SCALAR and inner.kind == SCALAR:
            return KChain(SCALAR, self.n, self.dim, self.values * inner.values)
        a = self.values if self.kind == DIAGONAL else self.values.reshape((self.n,) + (1,) * (inner.values.ndim - 1))
        b = inner.values if inner.kind == DIAGONAL else inner.values.reshape((self.n,) + (1,) * (a.ndim - 1))
        return KChain(DIAGONAL, self.n, self.dim, a * b)

    def copy(self) -> "KChain":
        vals = None if self.values is None else self.values.copy()
        return KChain(self.kind, self.n, self.dim, vals)


def _as_chain(K) -> KChain:
    return K if isinstance(K, KChain) else KChain.from_jacobians(K)


def _check(a, chain):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise ShapeError(f"expected a stack of cotangents shaped (n, ..., dim), got {a.shape}")
    if len(a) != len(chain):
        raise ShapeError(f"{len(a)} cotangents but {len(chain)} Jacobians")
    if a.shape[-1] != chain.dim:
        raise ShapeError(f"cotangent width {a.shape[-1]} but chain dim {chain.dim}")
    return a


def cumsumprod_seq(a, K) -> np.ndarray:
    """Reference sweep ``u_i = a_i + u_{i+1} K_{i+1}``."""
    chain = _as_chain(K)
    a = _check(a, chain)
    u = a.copy()
    if chain.kind == IDENTITY:
        for i in range(len(a) - 2, -1, -1):
            u[i] += u[i + 1]
        return u
    Kv = chain._expand(u)
    for i in range(len(a) - 2, -1, -1):
        u[i] += u[i + 1] * Kv[i + 1]
    return u


def num_levels(n: int) -> int:
    return math.ceil(math.log2(n)) if n > 1 else 0


def cumsumprod_par(a, K, return_levels: bool = False):
    """Hillis-Steele scan of the same recurrence, ``ceil(log2 n)`` levels.

    ``P[i]`` holds the product mapping index ``i + 2**m`` back to ``i``; it
    starts as ``K[i + 1]``. Each level updates every ``i < n - 2**m`` from the
    previous level's values; all such updates are independent and run as one
    vectorized operation. ``u``, ``P`` and one scratch buffer are the only
    work arrays.
    """
    chain = _as_chain(K)
    a = _check(a, chain)
    n = len(a)
    u = a.copy()
    P = None
    if chain.kind != IDENTITY:
        # P[n-1] is never read by a u update; keep it as a placeholder
        P = np.concatenate([chain.values[1:], chain.values[:1]])
        P = KChain(chain.kind, n, chain.dim, P)._expand(u).copy()
    tmp = np.empty_like(u)
    levels = 0
    step = 1
    while step < n:
        m = n - step
        if P is None:
            np.add(u[:m], u[step:], out=tmp[:m])
        else:
            np.multiply(P[:m], u[step:], out=tmp[:m])
            tmp[:m] += u[:m]
            # P[i] <- P[i + step] . P[i]; numpy buffers the overlapping operands
            np.multiply(P[step:], P[:m], out=P[:m])
        tmp[m:] = u[m:]
        u, tmp = tmp, u
        step *= 2
        levels += 1
    if return_levels:
        return u, levels
    return u
