"""Constructors for chains and random probe batches."""

from __future__ import annotations

import numpy as np

from .engine import Batch, ModelGraph
from .layers import LSTM, LayerSpec, init_params
from .numkit import Rng


def build_model(spec: LayerSpec, L: int, seed: int = 0, *, shared: bool = False,
                attach="final", loss: str = "mse", out_dim: int = 0,
                init_scale: float = 1.0, bias_scale: float = 0.0, loss_weight: float = 1.0,
                forget_bias: float = 0.0) -> ModelGraph:
    """Random chain of ``L`` copies of ``spec``.

    ``attach`` is "final", "all" or an explicit iterable of indices. A linear
    readout to ``out_dim`` outputs is added when ``out_dim > 0``.
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    rng = Rng(seed, ("model",))
    params = {}
    prefixes = ["cell"] if shared else [f"layer{i}" for i in range(1, L + 1)]
    for prefix in prefixes:
        for name, value in init_params(spec, rng.child(prefix), init_scale, bias_scale).items():
            params[f"{prefix}.{name}"] = value
        if spec.kind == LSTM and forget_bias:
            dc = spec.state_dim // 2
            params[f"{prefix}.b"][dc : 2 * dc] = forget_bias
    if out_dim:
        d = spec.state_dim
        params["head.W"] = rng.child("head").normal((d, out_dim), 1.0 / np.sqrt(d))
        params["head.b"] = np.zeros(out_dim)
    if attach == "final":
        indices = [L]
    elif attach == "all":
        indices = range(1, L + 1)
    else:
        indices = attach
    return ModelGraph(
        layers=[spec] * L,
        params=params,
        attachments={int(i): loss for i in indices},
        shared=shared,
        head=bool(out_dim),
        loss_weight=loss_weight,
    )


def random_batch(model: ModelGraph, batch_size: int, seed: int, scale: float = 1.0) -> Batch:
    """Gaussian initial state, external inputs and regression targets. Only
    valid for "mse" and "dot" attachments."""
    rng = Rng(seed, ("batch",))
    spec, L = model.spec, model.L
    h0 = rng.child("h0").normal((batch_size, spec.state_dim), scale)
    xs = rng.child("xs").normal((L, batch_size, spec.ext_dim), scale) if spec.ext_dim else None
    out = model.params["head.W"].shape[1] if model.head else spec.state_dim
    targets = {i: rng.child("t", i).normal((batch_size, out)) for i in sorted(model.attachments)}
    return Batch(h0, xs, targets)
