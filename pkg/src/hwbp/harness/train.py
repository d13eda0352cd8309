"""Training loop.

Batches come from ``Rng(task.seed, ("train", step))``; the eval and probe
batches use the paths ``("eval",)`` and ``("probe",)`` so that diagnostics
never touch training data. Steps are numbered from 0 and each metrics row
reports the loss measured before that step's update. ``wall_ms`` is the time
elapsed since the loop started, excluding diagnostics.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..engine import ModelGraph, compute_gradients, exact_backprop, highway_bp, run_forward
from ..errors import DivergenceError, InputError, NumericError
from ..numkit import Rng
from ..oracle import cosine_similarity, norm_profile
from .config import TrainConfig, dump_config, parse_config
from .io import MetricsRow, MetricsWriter, save_checkpoint
from .optim import lr_at, make_optimizer, step_optimizer
from .tasks import build_task_model, generate_batch


@dataclass
class TrainResult:
    rows: list
    model: ModelGraph
    final_eval_loss: Optional[float]
    norm_profiles: dict = field(default_factory=dict)


def _diagnose(model, probe, cfg: TrainConfig, k: int):
    """Cosine similarity of this run's gradient estimate with the exact one on
    the probe batch, plus the Highway-BP norm profile there."""
    alg = cfg.algorithm
    exact = exact_backprop(model, probe)
    if alg.name == "backprop":
        cos = 1.0
    else:
        est = compute_gradients(model, probe, alg.name, k, alg.scan)
        cos = cosine_similarity(est.grads, exact.grads)
    depth = model.L if cfg.schedule.diag_max_k < 0 else cfg.schedule.diag_max_k
    hw = highway_bp(model, probe, depth, retain=True, scan=alg.scan)
    return cos, norm_profile(hw.estimates)


def train(cfg: TrainConfig, out_dir=None, verbose: bool = False) -> TrainResult:
    """Run the configured loop. With ``out_dir`` writes ``metrics.csv``,
    ``manifest.ini``, ``norm_profile.csv`` (when diagnostics are on),
    ``init.ckpt`` and ``final.ckpt``.

    A non-finite loss writes a row for the offending step (``train_loss`` is
    nan) and raises ``DivergenceError`` carrying that step as ``index``.
    """
    cfg.validate()
    task, alg, sched = cfg.task, cfg.algorithm, cfg.schedule
    base = build_task_model(cfg.model, task)
    model = base.with_params({k: v.copy() for k, v in base.params.items()})
    opt = make_optimizer(cfg.optimizer)
    d = model.state_dim
    eval_batch = generate_batch(task, Rng(task.seed, ("eval",)), task.eval_size, d)
    probe = generate_batch(task, Rng(task.seed, ("probe",)), task.batch_size, d) if sched.diag_every else None

    writer = profile_fh = None
    config_text = dump_config(cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.ini").write_text(
            "; resolved configuration of this run; readable by `hwbp train --config`\n" + config_text,
            encoding="utf-8",
        )
        save_checkpoint(out / "init.ckpt", model.params, 0, config_text)
        writer = MetricsWriter(out / "metrics.csv")
        if sched.diag_every:
            profile_fh = open(out / "norm_profile.csv", "w", encoding="utf-8")
            profile_fh.write("step,k,norm_step\n")

    rows, profiles = [], {}
    final_eval = None
    start = time.perf_counter()
    diag_time = 0.0
    try:
        for step in range(sched.steps):
            k = alg.k_at(step)
            batch = generate_batch(task, Rng(task.seed, ("train", step)), task.batch_size, d)
            try:
                res = compute_gradients(model, batch, alg.name, k, alg.scan)
                loss = res.loss
            except NumericError:
                res, loss = None, math.nan
            last = step == sched.steps - 1
            if res is None or not math.isfinite(loss):
                row = MetricsRow(step, (time.perf_counter() - start - diag_time) * 1e3, math.nan, k_used=k)
                rows.append(row)
                if writer:
                    writer.write(row)
                raise DivergenceError(f"training diverged at step {step}: non-finite loss", index=step)

            lr = lr_at(step, cfg.optimizer.lr, sched)
            step_optimizer(model.params, res.grads.params, opt, cfg.optimizer, lr)

            logged = step % sched.log_every == 0 or last
            eval_loss = cos = None
            if last or (sched.eval_every and step % sched.eval_every == 0):
                eval_loss = run_forward(model, eval_batch).loss
                if last:
                    final_eval = eval_loss
                logged = True
            wall = (time.perf_counter() - start - diag_time) * 1e3
            if probe is not None and (step % sched.diag_every == 0 or last):
                t0 = time.perf_counter()
                cos, prof = _diagnose(model, probe, cfg, k)
                profiles[step] = prof
                if profile_fh:
                    for kk, value in enumerate(prof):
                        profile_fh.write(f"{step},{kk},{float(value)!r}\n")
                    profile_fh.flush()
                diag_time += time.perf_counter() - t0
                logged = True
            if logged:
                row = MetricsRow(step, wall, loss, eval_loss, k,
                                 res.counters.vjp_block_calls, res.counters.scan_calls, cos)
                rows.append(row)
                if writer:
                    writer.write(row)
                if verbose:
                    extra = "" if eval_loss is None else f" eval {eval_loss:.6g}"
                    print(f"step {step:6d}  loss {loss:.6g}{extra}  k {k}  {wall / 1e3:.1f}s", flush=True)
    finally:
        if writer:
            writer.close()
        if profile_fh:
            profile_fh.close()
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "final.ckpt", model.params, sched.steps, config_text)
    return TrainResult(rows, model, final_eval, profiles)


def model_from_checkpoint(params: dict, config_text: str):
    """Rebuild the model a checkpoint was written from."""
    cfg = parse_config(config_text)
    base = build_task_model(cfg.model, cfg.task)
    missing = set(base.params) ^ set(params)
    if missing:
        raise InputError(f"checkpoint arrays do not match the configured model: {sorted(missing)}")
    return cfg, base.with_params({k: np.array(params[k]) for k in base.params})
