"""Independent checks on the engine and diagnostics of its convergence.

The path oracle sums the gradient contributions of individual backward paths.
A path from ``h_j`` down to ``h_i`` picks, at every layer ``m`` in
``i+1..j``, either the block Jacobian ``J_m`` (``m`` in the block set) or the
residual Jacobian ``K_m``. Summing every path reproduces ``dL/dh_i``; keeping
only paths through at most ``k`` blocks reproduces the ``k``-th Highway-BP
estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as lyr
from .engine import Batch, GradientSet, ModelGraph, Trace, run_forward
from .errors import CapacityError, ContractError, NumericError, ShapeError
from .scan import apply_K

MAX_ENUMERATION_L = 12


@dataclass(frozen=True)
class PathSpec:
    start: int
    end: int
    block_set: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "block_set", frozenset(self.block_set))
        if not 0 <= self.start <= self.end:
            raise ContractError(f"path needs 0 <= start <= end, got {self.start}, {self.end}")
        if any(not self.start < m <= self.end for m in self.block_set):
            raise ContractError(f"block set {sorted(self.block_set)} not inside {self.start + 1}..{self.end}")


def path_gradient(model: ModelGraph, trace: Trace, path: PathSpec) -> np.ndarray:
    """Gradient carried from the loss at ``path.end`` to ``h_{path.start}``."""
    if path.end not in model.attachments:
        raise ContractError(f"no loss attached at index {path.end}")
    if path.end > model.L:
        raise ContractError(f"path end {path.end} beyond L={model.L}")
    g = trace.cotangents[path.end].copy()
    for m in range(path.end, path.start, -1):
        tape = trace.tapes[m - 1]
        if m in path.block_set:
            g = lyr.vjp_block(model.spec, model.layer_params(m), tape, g)
        else:
            g = apply_K(tape.residual_jac, g)
    return g


def paths_from(model: ModelGraph, i: int):
    """All paths starting at ``i``, ordered by end index then by block set in
    binary-counter order (bit ``b`` selects layer ``i + 1 + b``)."""
    for j in sorted(model.attachments):
        if j < i:
            continue
        span = j - i
        for mask in range(2 ** span):
            yield PathSpec(i, j, frozenset(i + 1 + b for b in range(span) if mask >> b & 1))


def _guard(model):
    if model.L > MAX_ENUMERATION_L:
        raise CapacityError(
            f"path enumeration is limited to L <= {MAX_ENUMERATION_L} (2^L paths); model has L={model.L}"
        )


def path_sums_by_size(model: ModelGraph, trace: Trace, i: int) -> np.ndarray:
    """``out[s]`` is the sum of path gradients from ``i`` through exactly ``s``
    blocks, for ``s = 0 .. L - i``."""
    _guard(model)
    if not 0 <= i <= model.L:
        raise ContractError(f"index {i} outside 0..{model.L}")
    out = np.zeros((model.L - i + 1,) + trace.cotangents.shape[1:])
    for path in paths_from(model, i):
        out[len(path.block_set)] += path_gradient(model, trace, path)
    return out


def brute_force_estimate(model: ModelGraph, trace: Trace, i: int, k: int) -> np.ndarray:
    """Sum of every path from ``i`` through at most ``k`` blocks."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    return path_sums_by_size(model, trace, i)[: k + 1].sum(axis=0)


def finite_diff_gradient(model: ModelGraph, batch: Batch, eps: float = 1e-6) -> GradientSet:
    """Central differences of the total loss for every parameter coordinate
    and every coordinate of the initial state."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    params = {name: value.copy() for name, value in model.params.items()}
    probe = model.with_params(params)

    def loss_at(m, b):
        try:
            value = run_forward(m, b).loss
        except NumericError as exc:
            raise NumericError(f"non-finite loss while probing: {exc}", index=exc.index) from exc
        return value

    grads = {}
    for name, arr in params.items():
        g = np.empty_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + eps
            plus = loss_at(probe, batch)
            flat[c] = orig - eps
            minus = loss_at(probe, batch)
            flat[c] = orig
            gflat[c] = (plus - minus) / (2 * eps)
        grads[name] = g

    h0 = np.array(batch.h0, dtype=np.float64)
    shifted = Batch(h0, batch.xs, batch.targets)
    g0 = np.empty_like(h0)
    flat, gflat = h0.reshape(-1), g0.reshape(-1)
    for c in range(flat.size):
        orig = flat[c]
        flat[c] = orig + eps
        plus = loss_at(probe, shifted)
        flat[c] = orig - eps
        minus = loss_at(probe, shifted)
        flat[c] = orig
        gflat[c] = (plus - minus) / (2 * eps)
    return GradientSet(grads, g0)


def _flat(g, include_input):
    if isinstance(g, GradientSet):
        return g.flatten(include_input)
    return np.ravel(np.asarray(g, dtype=np.float64))


def cosine_similarity(g_a, g_b, include_input: bool = False) -> float:
    """Cosine of the angle between two GradientSets (parameter entries only by
    default) or two raw arrays such as hidden-state cotangents. Two all-zero
    arguments have similarity 1."""
    a, b = _flat(g_a, include_input), _flat(g_b, include_input)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: sizes {a.size} and {b.size} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a / na, b / nb))


def norm_profile(estimates, index=None) -> np.ndarray:
    """``out[k] = ||w^k - w^{k-1}|| / ||w^K||`` with ``w^{-1} = 0``.

    ``index`` restricts the norms to one hidden-state row. All entries are
    zero when the final estimate is zero.
    """
    if len(estimates) == 0:
        raise ContractError("norm_profile needs at least one estimate")
    ws = [np.asarray(w) if index is None else np.asarray(w)[index] for w in estimates]
    total = np.linalg.norm(ws[-1])
    steps = [np.linalg.norm(ws[0])] + [np.linalg.norm(b - a) for a, b in zip(ws, ws[1:])]
    steps = np.array(steps)
    if total == 0.0:
        return np.zeros_like(steps)
    return steps / total


def truncated_cotangents(model: ModelGraph, trace: Trace, depth: int) -> np.ndarray:
    """Reverse sweep from ``h_L`` that stops after ``depth`` layers; rows below
    ``L - depth`` are zero. Only meaningful for a final-only loss."""
    L = model.L
    w = np.zeros_like(trace.cotangents)
    w[L] = trace.cotangents[L]
    for i in range(L, max(L - depth, 0), -1):
        tape = trace.tapes[i - 1]
        w[i - 1] = trace.cotangents[i - 1] + lyr.vjp_block(model.spec, model.layer_params(i), tape, w[i]) \
            + apply_K(tape.residual_jac, w[i])
    return w


__all__ = [
    "PathSpec",
    "path_gradient",
    "paths_from",
    "path_sums_by_size",
    "brute_force_estimate",
    "finite_diff_gradient",
    "cosine_similarity",
    "norm_profile",
    "truncated_cotangents",
    "MAX_ENUMERATION_L",
]
