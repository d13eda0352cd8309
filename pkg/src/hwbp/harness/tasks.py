"""Desk-scale sequence tasks.

Every task feeds one external input per cell into a recurrent chain started
from ``h_0 = 0``. Batches depend only on the task seed and the RNG path the
caller derives from it (e.g. ``("train", step)``).
"""

from __future__ import annotations

import functools
from pathlib import Path

import numpy as np

from ..engine import Batch, ModelGraph
from ..errors import InputError
from ..layers import LSTM, LayerSpec
from ..models import build_model
from ..numkit import Rng
from .config import ModelConfig, TaskSpec

BYTE_VOCAB = 257  # 256 byte values plus a padding symbol
PAD = 256


@functools.lru_cache(maxsize=8)
def _load_text(path: str) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read text corpus {path}: {exc}") from None
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InputError(f"{path} is not valid UTF-8: {exc}") from None
    if not raw:
        raise InputError(f"{path} is empty")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


@functools.lru_cache(maxsize=4)
def _load_images(path: str):
    try:
        with np.load(path) as data:
            images = np.asarray(data["images"], dtype=np.float64)
            labels = np.asarray(data["labels"], dtype=np.int64)
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read image archive {path} (needs arrays 'images' and 'labels'): {exc}") from None
    if images.ndim == 3:
        images = images[..., None]
    if images.ndim != 4 or len(images) != len(labels):
        raise InputError(f"{path}: images must be (N, H, W[, C]) with one label each")
    images = (images - images.mean()) / (images.std() or 1.0)
    return images, labels


def task_dims(task: TaskSpec):
    """``(ext_dim, out_dim, loss_kind, attach)`` for a task."""
    if task.kind == "adding":
        return 2, 1, "mse", "final"
    if task.kind == "copy":
        return task.n_symbols + 2, task.n_symbols + 1, "xent", "all"
    if task.kind == "charlm":
        return BYTE_VOCAB, BYTE_VOCAB, "xent", "all"
    if task.kind == "rowimage":
        images, labels = _load_images(task.path)
        return images.shape[2] * images.shape[3], int(labels.max()) + 1, "xent", "final"
    raise InputError(f"unknown task kind {task.kind!r}")


def _check(task: TaskSpec):
    if task.kind == "adding" and task.length < 2:
        raise InputError("the adding problem needs length >= 2")
    if task.kind == "copy" and task.length < 2 * task.n_copy + 1:
        raise InputError(f"copy task needs length >= 2 * n_copy + 1 = {2 * task.n_copy + 1}")
    if task.kind == "rowimage":
        images, _ = _load_images(task.path)
        if images.shape[1] != task.length:
            raise InputError(f"rowimage length must equal image height {images.shape[1]}, got {task.length}")
    if task.kind == "charlm":
        _load_text(task.path)


def _one_hot(idx, n):
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def generate_batch(task: TaskSpec, rng: Rng, batch_size: int = 0, state_dim: int = 0) -> Batch:
    """One batch. ``state_dim`` sizes the zero initial state (required)."""
    _check(task)
    B = batch_size or task.batch_size
    L = task.length
    h0 = np.zeros((B, state_dim))
    if task.kind == "adding":
        values = rng.child("values").uniform((L, B))
        half = L // 2
        first = rng.child("first").integers(0, half, B)
        second = rng.child("second").integers(half, L, B)
        markers = np.zeros((L, B))
        markers[first, np.arange(B)] = 1.0
        markers[second, np.arange(B)] = 1.0
        xs = np.stack([values, markers], axis=-1)
        target = (values[first, np.arange(B)] + values[second, np.arange(B)])[:, None]
        return Batch(h0, xs, {L: target})
    if task.kind == "copy":
        S, n = task.n_symbols, task.n_copy
        symbols = rng.child("symbols").integers(1, S + 1, (n, B))
        tokens = np.zeros((L, B), dtype=np.int64)
        tokens[:n] = symbols
        tokens[L - n - 1] = S + 1
        out = np.zeros((L, B), dtype=np.int64)
        out[L - n :] = symbols
        return Batch(h0, _one_hot(tokens, S + 2), {i + 1: out[i] for i in range(L)})
    if task.kind == "charlm":
        data = _load_text(task.path)
        if len(data) >= L + 1:
            starts = rng.child("starts").integers(0, len(data) - L, B)
            window = np.stack([data[s : s + L + 1] for s in starts], axis=1)
        else:
            padded = np.full(L + 1, PAD, dtype=np.int64)
            padded[: len(data)] = data
            window = np.repeat(padded[:, None], B, axis=1)
        inputs, targets = window[:-1], window[1:]
        return Batch(h0, _one_hot(inputs, BYTE_VOCAB), {i + 1: targets[i] for i in range(L)})
    if task.kind == "rowimage":
        images, labels = _load_images(task.path)
        idx = rng.child("idx").integers(0, len(images), B)
        rows = images[idx].reshape(B, images.shape[1], -1).transpose(1, 0, 2)
        return Batch(h0, np.ascontiguousarray(rows), {L: labels[idx]})
    raise InputError(f"unknown task kind {task.kind!r}")


def layer_spec(model: ModelConfig, ext_dim: int) -> LayerSpec:
    state = 2 * model.hidden if model.kind == LSTM else model.hidden
    return LayerSpec(
        kind=model.kind,
        state_dim=state,
        ext_dim=ext_dim,
        hidden=model.block_hidden,
        activation=model.activation,
        gamma=model.gamma,
    )


def build_task_model(model: ModelConfig, task: TaskSpec) -> ModelGraph:
    _check(task)
    ext, out, loss, attach = task_dims(task)
    spec = layer_spec(model, ext)
    weight = 1.0 / task.length if attach == "all" else 1.0
    return build_model(
        spec,
        task.length,
        seed=task.seed,
        shared=model.shared,
        attach=attach,
        loss=loss,
        out_dim=out,
        init_scale=model.init_scale,
        loss_weight=weight,
        forget_bias=model.forget_bias,
    )
