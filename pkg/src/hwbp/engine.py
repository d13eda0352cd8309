"""Highway backpropagation and its baselines.

Indexing: hidden states run ``h_0 .. h_L``; layer ``i`` (1-based) maps
``h_{i-1}`` to ``h_i``. A gradient estimate ``w`` is an array shaped
``(L+1, B, d)`` whose row ``i`` estimates ``dL/dh_i``. Row 0 is the input
cotangent.

One Highway-BP iteration is

1. ``v_i = w_{i+1} J_{i+1}`` for ``i = 0 .. L-1``, all layers at once;
2. ``u = CumSumProd(v, K)`` so that ``u_i = v_i + u_{i+1} K_{i+1}``, and
   ``w_i <- w0_i + u_i`` for ``i < L``; ``w_L`` stays at ``w0_L``.

Layer-parallel work is vectorized over a leading layer axis rather than
dispatched to threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import layers as lyr
from .errors import ContractError, NumericError, ShapeError
from .scan import KChain, apply_K, cumsumprod_par, cumsumprod_seq

LOSS_KINDS = ("mse", "xent", "dot")


@dataclass
class ModelGraph:
    """A homogeneous chain of ``L`` layers plus an optional linear readout.

    ``params`` is the ordered ParamSet; its key order is the flattening order
    of every GradientSet. Layer ``i`` reads ``cell.*`` when ``shared`` and
    ``layer{i}.*`` otherwise; the readout reads ``head.W`` and ``head.b``.
    """

    layers: list
    params: dict
    attachments: dict
    shared: bool = False
    head: bool = False
    loss_weight: float = 1.0

    def __post_init__(self):
        if not self.layers:
            raise ContractError("model needs at least one layer")
        first = self.layers[0]
        for spec in self.layers:
            if spec != first:
                raise ContractError("all layers of a chain must share one LayerSpec")
        if not self.attachments:
            raise ContractError("model needs at least one loss attachment")
        for i, kind in self.attachments.items():
            if not 1 <= i <= self.L:
                raise ContractError(f"loss attached at {i}, outside 1..{self.L}")
            if kind not in LOSS_KINDS:
                raise ContractError(f"unknown loss kind {kind!r}")
        for i in range(1, self.L + 1):
            lyr._check_input(first, self.layer_params(i), np.zeros(first.state_dim),
                             np.zeros(first.ext_dim) if first.ext_dim else None)

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def spec(self) -> lyr.LayerSpec:
        return self.layers[0]

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    def prefix(self, i: int) -> str:
        return "cell" if self.shared else f"layer{i}"

    def layer_params(self, i: int) -> dict:
        pre = self.prefix(i) + "."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def stacked_params(self) -> dict:
        if self.shared:
            return self.layer_params(1)
        per_layer = [self.layer_params(i) for i in range(1, self.L + 1)]
        return {name: np.stack([p[name] for p in per_layer]) for name in per_layer[0]}

    def with_params(self, params: dict) -> "ModelGraph":
        return ModelGraph(list(self.layers), params, dict(self.attachments), self.shared, self.head, self.loss_weight)


@dataclass
class Batch:
    h0: np.ndarray
    xs: Optional[np.ndarray]
    targets: dict


@dataclass
class Trace:
    """Everything the backward passes need from one forward run.

    ``chain[i]`` is ``K_i`` for ``i = 1..L``; ``chain[0]`` is an unused
    identity placeholder. ``cotangents[i]`` is ``dL_i/dh_i`` (zero where no
    loss is attached).
    """

    tapes: list
    stacked: lyr.LayerTape
    chain: KChain
    states: np.ndarray
    loss: float
    cotangents: np.ndarray
    head_grads: dict
    stacked_params: dict


@dataclass
class GradientEstimate:
    w: np.ndarray
    k: int


@dataclass
class GradientSet:
    params: dict
    input: np.ndarray

    def flatten(self, include_input: bool = False) -> np.ndarray:
        parts = [np.ravel(v) for v in self.params.values()]
        if include_input:
            parts.append(np.ravel(self.input))
        return np.concatenate(parts)


@dataclass
class Counters:
    vjp_block_calls: int = 0
    scan_calls: int = 0


@dataclass
class BackwardResult:
    grads: GradientSet
    loss: float
    w: np.ndarray
    estimates: Optional[list] = None
    counters: Counters = field(default_factory=Counters)


# ---------------------------------------------------------------------------
# losses

def loss_and_grad(kind: str, y, target, weight: float = 1.0):
    """Batch-mean loss and its gradient with respect to ``y``."""
    B = y.shape[0]
    if kind == "mse":
        diff = y - target
        return weight * float(np.sum(diff * diff)) / B, (2.0 * weight / B) * diff
    if kind == "dot":
        return weight * float(np.sum(y * target)) / B, (weight / B) * np.asarray(target, dtype=np.float64)
    target = np.asarray(target)
    lse = logsumexp(y, axis=-1)
    picked = np.take_along_axis(y, target[:, None], axis=-1)[:, 0]
    p = np.exp(y - lse[:, None])
    p[np.arange(B), target] -= 1.0
    return weight * float(np.sum(lse - picked)) / B, (weight / B) * p


def _readout(model, h):
    if not model.head:
        return h
    return h @ model.params["head.W"] + model.params["head.b"]


# ---------------------------------------------------------------------------
# forward

def run_forward(model: ModelGraph, batch: Batch) -> Trace:
    spec, L = model.spec, model.L
    h = np.asarray(batch.h0, dtype=np.float64)
    if h.ndim != 2 or h.shape[-1] != spec.state_dim:
        raise ShapeError(f"initial state must be (B, {spec.state_dim}), got {h.shape}")
    if spec.ext_dim and (batch.xs is None or batch.xs.shape[:2] != (L, h.shape[0])):
        raise ShapeError(f"external inputs must be shaped ({L}, {h.shape[0]}, {spec.ext_dim})")
    missing = set(model.attachments) - set(batch.targets)
    if missing:
        raise ContractError(f"batch has no targets for attached indices {sorted(missing)}")

    states = np.empty((L + 1,) + h.shape)
    states[0] = h
    tapes = []
    shared = model.layer_params(1) if model.shared else None
    # overflow surfaces as the NumericError below, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, L + 1):
            x = batch.xs[i - 1] if spec.ext_dim else None
            params = shared if model.shared else model.layer_params(i)
            h, tape = lyr.forward(spec, params, h, x, index=i, check=i == 1 or not model.shared)
            states[i] = h
            tapes.append(tape)
    if not np.isfinite(states).all():
        bad = int(np.argmax(~np.isfinite(states).reshape(L + 1, -1).all(axis=1)))
        raise NumericError(f"non-finite output at layer {bad}", index=bad)

    cot = np.zeros_like(states)
    total = 0.0
    head_grads = {}
    if model.head:
        head_grads = {"head.W": np.zeros_like(model.params["head.W"]), "head.b": np.zeros_like(model.params["head.b"])}
    for i in sorted(model.attachments):
        y = _readout(model, states[i])
        value, dy = loss_and_grad(model.attachments[i], y, batch.targets[i], model.loss_weight)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at index {i}", index=i)
        total += value
        if model.head:
            cot[i] = dy @ model.params["head.W"].T
            head_grads["head.W"] += states[i].T @ dy
            head_grads["head.b"] += dy.sum(axis=0)
        else:
            cot[i] = dy

    chain = KChain.from_jacobians([lyr.ResidualJacobian.identity(spec.state_dim)] + [t.residual_jac for t in tapes])
    return Trace(tapes, lyr.stack_tapes(tapes, states), chain, states, total, cot, head_grads, model.stacked_params())


# ---------------------------------------------------------------------------
# Highway-BP

def _scan(a, chain, scan, counters):
    if counters is not None:
        counters.scan_calls += 1
    if scan == "seq":
        return cumsumprod_seq(a, chain)
    return cumsumprod_par(a, chain)


def _zero_chain(chain: KChain) -> KChain:
    return KChain("scalar", len(chain), chain.dim, np.zeros(len(chain)))


def initial_estimate(model: ModelGraph, trace: Trace, counters: Optional[Counters] = None,
                     scan: str = "par", fpi: bool = False) -> GradientEstimate:
    """``w0_i = sum_{j >= i} dL_j/dh_j K_j ... K_{i+1}``: residual paths only."""
    chain = _zero_chain(trace.chain) if fpi else trace.chain
    return GradientEstimate(_scan(trace.cotangents, chain, scan, counters), 0)


def iterate(model: ModelGraph, trace: Trace, w_k: GradientEstimate, w0: GradientEstimate,
            counters: Optional[Counters] = None, scan: str = "par", fpi: bool = False) -> GradientEstimate:
    """One parallel block step followed by one residual-path scan."""
    L = model.L
    if w_k.w.shape != w0.w.shape or w_k.w.shape[0] != L + 1:
        raise ContractError("estimates do not belong to the same model")
    upper = w_k.w[1:]
    v = lyr.vjp_block(model.spec, trace.stacked_params, trace.stacked, upper)
    if counters is not None:
        counters.vjp_block_calls += L
    if fpi:
        v = v + trace.chain[1:].apply(upper)
        chain = _zero_chain(trace.chain[:L])
    else:
        chain = trace.chain[:L]
    u = _scan(v, chain, scan, counters)
    w = w0.w.copy()
    w[:L] += u
    return GradientEstimate(w, w_k.k + 1)


def finalize_params(model: ModelGraph, trace: Trace, w) -> GradientSet:
    """Parameter cotangents from per-layer output cotangents ``w[1:]``."""
    w = w.w if isinstance(w, GradientEstimate) else w
    raw = lyr.vjp_params(model.spec, trace.stacked_params, trace.stacked, w[1:])
    grads = {}
    if model.shared:
        for name, g in raw.items():
            grads[f"cell.{name}"] = g
    else:
        for name, g in raw.items():
            for i in range(1, model.L + 1):
                grads[f"layer{i}.{name}"] = g[i - 1]
    grads.update(trace.head_grads)
    return GradientSet({name: grads[name] for name in model.params}, w[0].copy())


def _highway(model, batch, k, retain, scan, fpi, trace=None):
    if k < 0:
        raise ValueError(f"iteration budget must be >= 0, got {k}")
    trace = run_forward(model, batch) if trace is None else trace
    counters = Counters()
    w0 = initial_estimate(model, trace, counters, scan, fpi)
    w = w0
    estimates = [w0.w] if retain else None
    for _ in range(k):
        w = iterate(model, trace, w, w0, counters, scan, fpi)
        if retain:
            estimates.append(w.w)
    return BackwardResult(finalize_params(model, trace, w), trace.loss, w.w, estimates, counters)


def highway_bp(model: ModelGraph, batch: Batch, k: int, retain: bool = False,
               scan: str = "par", trace: Optional[Trace] = None) -> BackwardResult:
    """Forward pass, ``w0``, ``k`` iterations, then parameter gradients.

    With ``retain`` every estimate ``w^0 .. w^k`` is kept in ``estimates``.
    Exact once ``k >= L``.
    """
    return _highway(model, batch, k, retain, scan, False, trace)


def fpi(model: ModelGraph, batch: Batch, k: int, retain: bool = False,
        scan: str = "par", trace: Optional[Trace] = None) -> BackwardResult:
    """Fixed-point iteration: Highway-BP with every ``K`` forced to zero and
    the block VJP replaced by the full layer VJP."""
    return _highway(model, batch, k, retain, scan, True, trace)


def exact_cotangents(model: ModelGraph, trace: Trace, counters: Optional[Counters] = None) -> np.ndarray:
    """Plain reverse sweep ``w_i = dL_i/dh_i + w_{i+1} (J_{i+1} + K_{i+1})``."""
    spec, L = model.spec, model.L
    w = trace.cotangents.copy()
    for i in range(L, 0, -1):
        tape = trace.tapes[i - 1]
        w[i - 1] += lyr.vjp_block(spec, model.layer_params(i), tape, w[i]) + apply_K(tape.residual_jac, w[i])
    if counters is not None:
        counters.vjp_block_calls += L
    return w


def exact_backprop(model: ModelGraph, batch: Batch, trace: Optional[Trace] = None) -> BackwardResult:
    trace = run_forward(model, batch) if trace is None else trace
    counters = Counters()
    w = exact_cotangents(model, trace, counters)
    return BackwardResult(finalize_params(model, trace, w), trace.loss, w, None, counters)


def compute_gradients(model: ModelGraph, batch: Batch, algorithm: str, k: int = 0,
                      scan: str = "par", trace: Optional[Trace] = None) -> BackwardResult:
    """Dispatch on ``algorithm`` in {"backprop", "highway", "fpi"}."""
    if algorithm == "backprop":
        return exact_backprop(model, batch, trace)
    if algorithm == "highway":
        return highway_bp(model, batch, k, scan=scan, trace=trace)
    if algorithm == "fpi":
        return fpi(model, batch, k, scan=scan, trace=trace)
    raise ValueError(f"unknown algorithm {algorithm!r}")
