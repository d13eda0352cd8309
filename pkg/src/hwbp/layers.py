"""Layers split as ``f(x) = r(x, g(x))``: an expensive block ``g`` and a cheap
residual map ``r`` whose input-Jacobian ``K`` is identity, scalar, diagonal or
zero.

Every backward function works on a single layer (arrays shaped ``(B, ...)``)
and, unchanged, on a stack of homogeneous layers (arrays shaped
``(L, B, ...)``). Stacked parameters carry a leading ``L`` axis; shared
parameters do not, and their gradients are then summed over the stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, NumericError, ShapeError

PLAIN = "plain"
RELU = "relu"
GAMMA = "gamma"
GRU = "gru"
LSTM = "lstm"
KINDS = (PLAIN, RELU, GAMMA, GRU, LSTM)
ACTIVATIONS = ("tanh", "relu", "identity")

IDENTITY = "identity"
SCALAR = "scalar"
DIAGONAL = "diagonal"
ZERO = "zero"


@dataclass(frozen=True)
class ResidualJacobian:
    """Structured ``K = dr/dx``. ``value`` is the scalar for SCALAR and the
    diagonal (possibly with leading batch axes) for DIAGONAL."""

    kind: str
    dim: int
    value: object = None

    def __post_init__(self):
        if self.kind not in (IDENTITY, SCALAR, DIAGONAL, ZERO):
            raise ValueError(f"unknown residual Jacobian kind {self.kind!r}")
        if self.kind == DIAGONAL:
            v = np.asarray(self.value, dtype=np.float64)
            if v.ndim == 0 or v.shape[-1] != self.dim:
                raise ShapeError(f"diagonal of shape {v.shape} does not end in dim {self.dim}")
            object.__setattr__(self, "value", v)
        elif self.kind == SCALAR:
            object.__setattr__(self, "value", float(self.value))

    @classmethod
    def identity(cls, dim):
        return cls(IDENTITY, dim)

    @classmethod
    def zero(cls, dim):
        return cls(ZERO, dim)

    @classmethod
    def scalar(cls, c, dim):
        return cls(SCALAR, dim, c)

    @classmethod
    def diagonal(cls, d):
        d = np.asarray(d, dtype=np.float64)
        return cls(DIAGONAL, d.shape[-1], d)

    def dense(self) -> np.ndarray:
        """Materialize as a ``(..., dim, dim)`` matrix (tests only)."""
        if self.kind == IDENTITY:
            return np.eye(self.dim)
        if self.kind == ZERO:
            return np.zeros((self.dim, self.dim))
        if self.kind == SCALAR:
            return self.value * np.eye(self.dim)
        return self.value[..., :, None] * np.eye(self.dim)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    state_dim: int
    ext_dim: int = 0
    hidden: int = 0  # block hidden width; 0 means a single dense map
    activation: str = "tanh"
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.state_dim < 1 or self.ext_dim < 0 or self.hidden < 0:
            raise ValueError(f"bad dimensions in {self}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.kind == LSTM and self.state_dim % 2:
            raise ValueError("LSTM state is [c; h] and needs an even state_dim")

    @property
    def in_dim(self) -> int:
        """Width of the block input ``[h_prev; x_ext]``."""
        if self.kind == LSTM:
            return self.state_dim // 2 + self.ext_dim
        return self.state_dim + self.ext_dim


@dataclass
class LayerTape:
    input: np.ndarray
    output: np.ndarray
    residual_jac: Optional[ResidualJacobian]
    cache: dict = field(default_factory=dict)


def param_shapes(spec: LayerSpec) -> dict:
    """Ordered parameter names and shapes for one layer."""
    d, n_in = spec.state_dim, spec.in_dim
    if spec.kind == GRU:
        shapes = {"Wzr": (n_in, 2 * d), "bzr": (2 * d,), "Wnh": (d, d)}
        if spec.ext_dim:
            shapes["Wnx"] = (spec.ext_dim, d)
        shapes["bn"] = (d,)
        return shapes
    if spec.kind == LSTM:
        dc = d // 2
        return {"W": (n_in, 4 * dc), "b": (4 * dc,)}
    if spec.hidden:
        return {"W1": (n_in, spec.hidden), "b1": (spec.hidden,), "W2": (spec.hidden, d), "b2": (d,)}
    return {"W": (n_in, d), "b": (d,)}


def init_params(spec: LayerSpec, rng, scale: float = 1.0, bias_scale: float = 0.0) -> dict:
    """Gaussian weights with std ``scale / sqrt(fan_in)``; biases are zero
    unless ``bias_scale`` is set."""
    params = {}
    for name, shape in param_shapes(spec).items():
        if len(shape) == 1:
            params[name] = rng.child(name).normal(shape, bias_scale) if bias_scale else np.zeros(shape)
        else:
            params[name] = rng.child(name).normal(shape, scale / np.sqrt(shape[0]))
    return params


# ---------------------------------------------------------------------------
# small helpers

def _add_bias(z, b):
    return z + b.reshape(b.shape[:-1] + (1,) * (z.ndim - b.ndim) + b.shape[-1:])


def _weight_grad(x, dy, W):
    if W.ndim == 2:
        return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    return np.swapaxes(x, -1, -2) @ dy


def _bias_grad(dy, b):
    if b.ndim == 1:
        return dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy.sum(axis=1)


def _sigmoid(a, out=None):
    # 1/(1+exp(-a)) written through tanh: one fast ufunc, no overflow
    out = np.multiply(a, 0.5, out=out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def _concat(h, x):
    if x is None:
        return h
    return np.concatenate([h, x], axis=-1)


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _act_grad(name, a, out):
    if name == "tanh":
        return 1.0 - out * out
    if name == "relu":
        return (a > 0).astype(np.float64)
    return np.ones_like(a)


def _check_input(spec, params, h_prev, x_ext):
    if h_prev.shape[-1] != spec.state_dim:
        raise ShapeError(f"state has width {h_prev.shape[-1]}, layer expects {spec.state_dim}")
    if spec.ext_dim:
        if x_ext is None or x_ext.shape[-1] != spec.ext_dim:
            got = None if x_ext is None else x_ext.shape[-1]
            raise ShapeError(f"external input has width {got}, layer expects {spec.ext_dim}")
    elif x_ext is not None:
        raise ShapeError("layer takes no external input")
    for name, shape in param_shapes(spec).items():
        if name not in params or params[name].shape[-len(shape):] != shape:
            raise ShapeError(f"parameter {name!r} missing or not shaped {shape}")


# ---------------------------------------------------------------------------
# dense block used by the residual kinds

def _block_forward(spec, params, xin):
    if spec.hidden:
        a1 = _add_bias(xin @ params["W1"], params["b1"])
        h1 = _act(spec.activation, a1)
        z = _add_bias(h1 @ params["W2"], params["b2"])
        return z, {"xin": xin, "a1": a1, "h1": h1}
    a = _add_bias(xin @ params["W"], params["b"])
    z = _act(spec.activation, a)
    return z, {"xin": xin, "a": a, "z": z}


def _block_backward(spec, params, cache, dz, want_input, want_params):
    grads = {}
    if spec.hidden:
        if want_params:
            grads["W2"] = _weight_grad(cache["h1"], dz, params["W2"])
            grads["b2"] = _bias_grad(dz, params["b2"])
        da1 = (dz @ np.swapaxes(params["W2"], -1, -2)) * _act_grad(spec.activation, cache["a1"], cache["h1"])
        if want_params:
            grads["W1"] = _weight_grad(cache["xin"], da1, params["W1"])
            grads["b1"] = _bias_grad(da1, params["b1"])
        W_in, dpre = params["W1"], da1
    else:
        dpre = dz * _act_grad(spec.activation, cache["a"], cache["z"])
        if want_params:
            grads["W"] = _weight_grad(cache["xin"], dpre, params["W"])
            grads["b"] = _bias_grad(dpre, params["b"])
        W_in = params["W"]
    dx = None
    if want_input:
        W_h = W_in[..., : spec.state_dim, :]
        dx = dpre @ np.swapaxes(W_h, -1, -2)
    return dx, grads


# ---------------------------------------------------------------------------
# forward

def forward(spec: LayerSpec, params: dict, h_prev, x_ext=None, index=None, check=True):
    """Evaluate ``h = r(h_prev, g(h_prev))`` and record a tape for the backward
    pass. ``index`` only labels error messages. ``check=False`` skips the
    shape and finiteness checks for callers that validate the whole chain."""
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_ext is not None:
        x_ext = np.asarray(x_ext, dtype=np.float64)
    if check:
        _check_input(spec, params, h_prev, x_ext)
    d = spec.state_dim

    if spec.kind in (PLAIN, RELU, GAMMA):
        z, cache = _block_forward(spec, params, _concat(h_prev, x_ext))
        if spec.kind == PLAIN:
            h = h_prev + z
            K = ResidualJacobian.identity(d)
        elif spec.kind == RELU:
            pre = h_prev + z
            mask = (pre > 0).astype(np.float64)
            h = np.maximum(pre, 0.0)
            cache["mask"] = mask
            K = ResidualJacobian.diagonal(mask)
        else:
            g = spec.gamma
            h = (1.0 - g) * h_prev + (z + g * h_prev)
            K = ResidualJacobian.zero(d) if g == 1.0 else ResidualJacobian.scalar(1.0 - g, d)
    elif spec.kind == GRU:
        h, cache = _gru_forward(spec, params, h_prev, x_ext)
        K = ResidualJacobian.diagonal(cache.pop("keep"))
    else:
        h, cache = _lstm_forward(spec, params, h_prev, x_ext)
        K = ResidualJacobian.diagonal(np.concatenate([cache["f"], np.zeros_like(cache["f"])], axis=-1))

    if check and not np.all(np.isfinite(h)):
        where = "" if index is None else f" at layer {index}"
        raise NumericError(f"non-finite output{where}", index=index)
    return h, LayerTape(input=h_prev, output=h, residual_jac=K, cache=cache)


def _gru_forward(spec, params, h, x):
    d = spec.state_dim
    xin = _concat(h, x)
    zr = xin @ params["Wzr"]
    zr += params["bzr"]
    zr = _sigmoid(zr, out=zr)
    z, r = zr[..., :d], zr[..., d:]
    rh = r * h
    npre = rh @ params["Wnh"]
    if spec.ext_dim:
        npre += x @ params["Wnx"]
    npre += params["bn"]
    n = np.tanh(npre, out=npre)
    keep = 1.0 - z
    zn = n - h
    gz = zn * z
    zn *= z
    h_new = h + zn
    # local derivative factors, reused by every block VJP through this tape
    gz *= keep
    gn = n * n
    np.subtract(1.0, gn, out=gn)
    gn *= z
    gr = rh * (1.0 - r)
    return h_new, {"xin": xin, "r": r, "rh": rh, "gz": gz, "gn": gn, "gr": gr, "keep": keep}


def _lstm_forward(spec, params, state, x):
    dc = spec.state_dim // 2
    c, h = state[..., :dc], state[..., dc:]
    xin = _concat(h, x)
    pre = _add_bias(xin @ params["W"], params["b"])
    i = _sigmoid(pre[..., :dc])
    f = _sigmoid(pre[..., dc : 2 * dc])
    g = np.tanh(pre[..., 2 * dc : 3 * dc])
    o = _sigmoid(pre[..., 3 * dc :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    cache = {"xin": xin, "c": c, "i": i, "f": f, "g": g, "o": o, "tc": tc}
    return np.concatenate([c_new, h_new], axis=-1), cache


# ---------------------------------------------------------------------------
# backward

def backward(spec: LayerSpec, params: dict, tape: LayerTape, w, want_input=True, want_params=True):
    """Shared backward kernel: returns ``(w @ J, param_grads)``.

    Only the block path is differentiated; the residual term ``w @ K`` is left
    to the caller.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != tape.output.shape:
        raise ContractError(f"cotangent shape {w.shape} does not match layer output {tape.output.shape}")
    if w.ndim >= 3 and len(w) > CHUNK:
        return _chunked_backward(spec, params, tape, w, want_input, want_params)
    return _backward(spec, params, tape, w, want_input, want_params)


# leading-axis block size for stacked backward calls; keeps the work arrays
# of one block cache-resident
CHUNK = 16


def _chunked_backward(spec, params, tape, w, want_input, want_params):
    shapes = param_shapes(spec)
    stacked = {name: params[name].ndim > len(shapes[name]) for name in shapes}
    dx = np.empty_like(w) if want_input else None
    parts = []
    for a in range(0, len(w), CHUNK):
        sl = slice(a, a + CHUNK)
        sub = LayerTape(
            input=tape.input[sl],
            output=tape.output[sl],
            residual_jac=None,
            cache={k: None if v is None else v[sl] for k, v in tape.cache.items()},
        )
        p = {k: v[sl] if stacked.get(k) else v for k, v in params.items()}
        d, g = _backward(spec, p, sub, w[sl], want_input, want_params)
        if want_input:
            dx[sl] = d
        parts.append(g)
    grads = {}
    if want_params:
        for name in parts[0]:
            pieces = [g[name] for g in parts]
            grads[name] = np.concatenate(pieces) if stacked[name] else sum(pieces[1:], pieces[0])
    return dx, grads


def _backward(spec, params, tape, w, want_input, want_params):
    cache = tape.cache
    if spec.kind == PLAIN:
        return _block_backward(spec, params, cache, w, want_input, want_params)
    if spec.kind == RELU:
        return _block_backward(spec, params, cache, w * cache["mask"], want_input, want_params)
    if spec.kind == GAMMA:
        dx, grads = _block_backward(spec, params, cache, w, want_input, want_params)
        if want_input and spec.gamma:
            dx = dx + spec.gamma * w
        return dx, grads
    if spec.kind == GRU:
        return _gru_backward(spec, params, tape, w, want_input, want_params)
    return _lstm_backward(spec, params, tape, w, want_input, want_params)


def _gru_backward(spec, params, tape, w, want_input, want_params):
    d = spec.state_dim
    c = tape.cache
    dnpre = w * c["gn"]
    drh = dnpre @ np.swapaxes(params["Wnh"], -1, -2)
    dz = w * c["gz"]
    dr = drh * c["gr"]
    grads = {}
    if want_params:
        dzr = np.concatenate([dz, dr], axis=-1)
        grads["Wzr"] = _weight_grad(c["xin"], dzr, params["Wzr"])
        grads["bzr"] = _bias_grad(dzr, params["bzr"])
        grads["Wnh"] = _weight_grad(c["rh"], dnpre, params["Wnh"])
        if spec.ext_dim:
            grads["Wnx"] = _weight_grad(c["xin"][..., d:], dnpre, params["Wnx"])
        grads["bn"] = _bias_grad(dnpre, params["bn"])
    dx = None
    if want_input:
        Wzr_h = params["Wzr"][..., :d, :]
        dx = dz @ np.swapaxes(Wzr_h[..., :d], -1, -2) + dr @ np.swapaxes(Wzr_h[..., d:], -1, -2)
        dx += drh * c["r"]
    return dx, grads


def _lstm_backward(spec, params, tape, w, want_input, want_params):
    dc = spec.state_dim // 2
    c = tape.cache
    wc, wh = w[..., :dc], w[..., dc:]
    i, f, g, o, tc = c["i"], c["f"], c["g"], c["o"], c["tc"]
    dc_from_h = wh * o * (1.0 - tc * tc)
    dcell = wc + dc_from_h
    dpre = np.concatenate(
        [dcell * g * i * (1.0 - i), dcell * c["c"] * f * (1.0 - f), dcell * i * (1.0 - g * g), wh * tc * o * (1.0 - o)],
        axis=-1,
    )
    grads = {}
    if want_params:
        grads["W"] = _weight_grad(c["xin"], dpre, params["W"])
        grads["b"] = _bias_grad(dpre, params["b"])
    dx = None
    if want_input:
        dh = dpre @ np.swapaxes(params["W"][..., :dc, :], -1, -2)
        # the c -> c' edge through f * c is on the residual path only for wc;
        # the part reaching c' from h' belongs to the block
        dx = np.concatenate([dc_from_h * f, dh], axis=-1)
    return dx, grads


def vjp_block(spec: LayerSpec, params: dict, tape: LayerTape, w) -> np.ndarray:
    """``w @ J``: the cotangent routed through the block path only."""
    return backward(spec, params, tape, w, want_input=True, want_params=False)[0]


def vjp_params(spec: LayerSpec, params: dict, tape: LayerTape, w) -> dict:
    """Parameter cotangents of this layer (of the stack, when stacked)."""
    return backward(spec, params, tape, w, want_input=False, want_params=True)[1]


def residual_jacobian(spec: LayerSpec, tape: LayerTape) -> ResidualJacobian:
    if tape.residual_jac is None:
        raise ContractError("tape carries no residual Jacobian")
    return tape.residual_jac


def stack_tapes(tapes, states=None) -> LayerTape:
    """Stack per-layer tapes along a new leading axis. The residual Jacobians
    are not stacked; build a ``KChain`` from the per-layer tapes instead.
    ``states`` (``h_0 .. h_L`` already stacked) saves re-stacking inputs and
    outputs."""
    first = tapes[0]
    cache = {}
    for key, value in first.cache.items():
        if value is None:
            cache[key] = None
        else:
            cache[key] = np.stack([t.cache[key] for t in tapes])
    if states is None:
        inputs = np.stack([t.input for t in tapes])
        outputs = np.stack([t.output for t in tapes])
    else:
        inputs, outputs = states[:-1], states[1:]
    return LayerTape(input=inputs, output=outputs, residual_jac=None, cache=cache)
