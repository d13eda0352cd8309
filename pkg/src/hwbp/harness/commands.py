"""Bodies of the ``gradcheck``, ``analyze`` and ``bench`` subcommands.

Each returns a process exit code and writes its report to ``out``.
"""

from __future__ import annotations

import statistics
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..engine import (
    ModelGraph,
    compute_gradients,
    exact_backprop,
    exact_cotangents,
    finalize_params,
    fpi,
    highway_bp,
    initial_estimate,
    iterate,
    run_forward,
)
from ..errors import CapacityError, InputError
from ..layers import GAMMA, GRU, LSTM, PLAIN, RELU, LayerSpec
from ..models import build_model, random_batch
from ..numkit import Rng
from ..oracle import (
    MAX_ENUMERATION_L,
    brute_force_estimate,
    cosine_similarity,
    finite_diff_gradient,
    norm_profile,
    truncated_cotangents,
)
from .config import TrainConfig
from .io import load_checkpoint
from .tasks import build_task_model, generate_batch
from .train import model_from_checkpoint

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_CAPACITY = 0, 1, 2, 3

TOLERANCES = {
    "exactness": 1e-10,
    "path-oracle": 1e-12,
    "fpi-equivalence": 1e-12,
    "finite-difference": 1e-5,
}

PRESETS = {
    "gru": dict(kind=GRU),
    "lstm": dict(kind=LSTM),
    "plain": dict(kind=PLAIN, hidden=4),
    "relu": dict(kind=RELU, hidden=4),
    "gamma": dict(kind=GAMMA, gamma=0.2, hidden=4),
}


def preset_spec(name: str, d: int = 4, ext: int = 2) -> LayerSpec:
    if name not in PRESETS:
        raise InputError(f"unknown model preset {name!r}; choose from {', '.join(PRESETS)}")
    opts = dict(PRESETS[name])
    kind = opts.pop("kind")
    state = 2 * d if kind == LSTM else d
    return LayerSpec(kind, state, ext_dim=ext, **opts)


def _rel(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(b), np.linalg.norm(a))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b) / scale)


@dataclass
class SuiteResult:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def _corrupt(trace):
    """Test hook: scale every residual Jacobian the engine sees by 1.5 while
    the per-layer tapes (read by the oracles) keep the true values."""
    chain = trace.chain.copy()
    if chain.values is None:
        chain = type(chain)("scalar", chain.n, chain.dim, np.full(chain.n, 1.5))
    else:
        chain.values *= 1.5
    trace.chain = chain
    return trace


def gradcheck_suites(spec: LayerSpec, L: int, seed: int = 0, batch_size: int = 3,
                     corrupt_k: bool = False) -> list:
    if L > MAX_ENUMERATION_L:
        raise CapacityError(
            f"gradcheck enumerates 2^L backward paths and is limited to L <= {MAX_ENUMERATION_L}; got L={L}"
        )
    if L < 1:
        raise InputError("L must be >= 1")
    results = []
    models = {
        attach: build_model(spec, L, seed=seed, attach=attach, bias_scale=0.1)
        for attach in ("final", "all")
    }

    def traced(model, batch):
        trace = run_forward(model, batch)
        return _corrupt(trace) if corrupt_k else trace

    worst = 0.0
    for model in models.values():
        batch = random_batch(model, batch_size, seed)
        trace = traced(model, batch)
        exact = exact_backprop(model, batch, trace=run_forward(model, batch))
        hw = highway_bp(model, batch, L, trace=trace)
        worst = max(worst, _rel(hw.grads.flatten(True), exact.grads.flatten(True)))
    results.append(SuiteResult("exactness", worst, TOLERANCES["exactness"]))

    # absolute error relative to the size of the exact cotangents
    worst = 0.0
    for model in models.values():
        batch = random_batch(model, batch_size, seed + 1)
        trace = traced(model, batch)
        clean = run_forward(model, batch)
        scale = max(np.abs(exact_cotangents(model, clean)).max(), 1e-300)
        w0 = initial_estimate(model, trace)
        w = w0
        for k in range(L + 1):
            for i in range(L + 1):
                ref = brute_force_estimate(model, clean, i, k)
                worst = max(worst, float(np.abs(w.w[i] - ref).max()) / scale)
            if k < L:
                w = iterate(model, trace, w, w0)
    results.append(SuiteResult("path-oracle", worst, TOLERANCES["path-oracle"]))

    # fpi(k) against a reverse sweep cut after k layers, and, for the residual
    # kinds, against Highway-BP on a gamma=1 twin (same function, K = 0,
    # block Jacobian = full Jacobian)
    worst = 0.0
    model = models["final"]
    batch = random_batch(model, batch_size, seed + 2)
    clean = run_forward(model, batch)
    scale = max(np.abs(exact_cotangents(model, clean)).max(), 1e-300)
    trace = traced(model, batch)
    twin = None
    if spec.kind in (PLAIN, GAMMA):
        twin_spec = LayerSpec(GAMMA, spec.state_dim, ext_dim=spec.ext_dim, hidden=spec.hidden,
                              activation=spec.activation, gamma=1.0)
        twin = ModelGraph([twin_spec] * L, model.params, dict(model.attachments), model.shared,
                          model.head, model.loss_weight)
    for k in range(L + 1):
        got = fpi(model, batch, k, trace=trace).w
        worst = max(worst, float(np.abs(got - truncated_cotangents(model, clean, k)).max()) / scale)
        if twin is not None:
            worst = max(worst, float(np.abs(got - highway_bp(twin, batch, k).w).max()) / scale)
    results.append(SuiteResult("fpi-equivalence", worst, TOLERANCES["fpi-equivalence"]))

    worst = 0.0
    for model in models.values():
        batch = random_batch(model, 2, seed + 3)
        fd = finite_diff_gradient(model, batch).flatten(True)
        trace = traced(model, batch)
        exact = exact_backprop(model, batch).grads.flatten(True)
        hw = highway_bp(model, batch, L, trace=trace).grads.flatten(True)
        worst = max(worst, _rel(exact, fd), _rel(hw, fd))
    results.append(SuiteResult("finite-difference", worst, TOLERANCES["finite-difference"]))
    return results


def gradcheck(preset: str = "gru", L: int = 8, d: int = 4, seed: int = 0, corrupt_k: bool = False,
              out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        spec = preset_spec(preset, d)
        results = gradcheck_suites(spec, L, seed, corrupt_k=corrupt_k)
    except CapacityError as exc:
        print(f"refused: {exc}", file=out)
        return EXIT_CAPACITY
    print(f"gradcheck {preset} L={L} d={d} seed={seed}", file=out)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"  {r.name:<18} worst {r.worst:.3e}  tol {r.tolerance:.0e}  {status}", file=out)
    ok = all(r.passed for r in results)
    print("all suites passed" if ok else "FAILED", file=out)
    return EXIT_OK if ok else EXIT_FAIL


ANALYZE_COLUMNS = ["label", "k", "cos_sim", "cos_sim_state", "norm_step"]


def analyze_checkpoint(path, max_k: int, batch_size: int = 0, probe_seed=None) -> list:
    """Rows ``(k, cos_sim, cos_sim_state, norm_step)`` for ``k = 0..max_k`` on
    the probe batch of the checkpoint's task (the same one training
    diagnostics use unless ``probe_seed`` is given)."""
    if max_k < 0:
        raise InputError(f"max_k must be >= 0, got {max_k}")
    params, _, config_text = load_checkpoint(path)
    cfg, model = model_from_checkpoint(params, config_text)
    task = cfg.task
    seed = task.seed if probe_seed is None else probe_seed
    probe = generate_batch(task, Rng(seed, ("probe",)), batch_size or task.batch_size, model.state_dim)
    trace = run_forward(model, probe)
    exact = exact_backprop(model, probe, trace=trace)
    hw = highway_bp(model, probe, max_k, retain=True, trace=trace)
    profile = norm_profile(hw.estimates)
    rows = []
    for k, w in enumerate(hw.estimates):
        grads = finalize_params(model, trace, w)
        rows.append((k, cosine_similarity(grads, exact.grads), cosine_similarity(w, exact.w), float(profile[k])))
    return rows


def _labels(paths):
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [str(Path(p).with_suffix("")) for p in paths]


def analyze(paths, max_k: int, batch_size: int = 0, probe_seed=None, out=None) -> int:
    """CSV with one labeled block of rows per checkpoint."""
    out = sys.stdout if out is None else out
    print(",".join(ANALYZE_COLUMNS), file=out)
    for label, path in zip(_labels(paths), paths):
        for k, cos, cos_state, step in analyze_checkpoint(path, max_k, batch_size, probe_seed):
            print(f"{label},{k},{cos!r},{cos_state!r},{step!r}", file=out)
    return EXIT_OK


@dataclass
class BenchRow:
    algorithm: str
    k: int
    forward_ms: float
    backward_ms: float
    vjp_block_calls: int
    scan_calls: int
    expected_vjp: int
    expected_scans: int

    @property
    def step_ms(self) -> float:
        return self.forward_ms + self.backward_ms

    @property
    def counters_ok(self) -> bool:
        return self.vjp_block_calls == self.expected_vjp and self.scan_calls == self.expected_scans


def _median_ms(fn, trials):
    times = []
    result = None
    for _ in range(trials):
        t0 = time.perf_counter()
        result = fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times), result


def bench_rows(cfg: TrainConfig, ks, trials: int = 5) -> list:
    """Median forward and backward wall-clock time of one training step for
    backprop, then fpi(k) and highway(k) for every ``k``, on the first
    training batch. One untimed warm-up call precedes each measurement."""
    if trials < 1:
        raise InputError("trials must be >= 1")
    cfg.validate()
    model = build_task_model(cfg.model, cfg.task)
    L = model.L
    batch = generate_batch(cfg.task, Rng(cfg.task.seed, ("train", 0)), cfg.task.batch_size, model.state_dim)
    scan = cfg.algorithm.scan
    run_forward(model, batch)
    fwd_ms, trace = _median_ms(lambda: run_forward(model, batch), trials)
    variants = [("backprop", 0)] + [(alg, k) for alg in ("fpi", "highway") for k in ks]
    rows = []
    for alg, k in variants:
        run = lambda: compute_gradients(model, batch, alg, k, scan, trace=trace)  # noqa: E731
        run()
        ms, res = _median_ms(run, trials)
        if alg == "backprop":
            expected = (L, 0)
        else:
            expected = (k * L, k + 1)
        rows.append(BenchRow(alg, k, fwd_ms, ms, res.counters.vjp_block_calls, res.counters.scan_calls, *expected))
    return rows


def bench(cfg: TrainConfig, ks, trials: int = 5, out=None) -> int:
    """Timing table plus counter check. Exit code 1 if any counter is off;
    the timing trend in ``k`` is reported only."""
    out = sys.stdout if out is None else out
    rows = bench_rows(cfg, ks, trials)
    print("algorithm,k,step_ms,forward_ms,backward_ms,vjp_block_calls,scan_calls,counters_ok", file=out)
    for r in rows:
        print(f"{r.algorithm},{r.k},{r.step_ms:.3f},{r.forward_ms:.3f},{r.backward_ms:.3f},"
              f"{r.vjp_block_calls},{r.scan_calls},{'yes' if r.counters_ok else 'NO'}", file=out)
    hw = [r.step_ms for r in rows if r.algorithm == "highway"]
    trend = all(b >= a for a, b in zip(hw, hw[1:]))
    print(f"# highway step time non-decreasing in k: {'yes' if trend else 'no'} (reported, not enforced)", file=out)
    ok = all(r.counters_ok for r in rows)
    if not ok:
        print("# counter contract violated", file=out)
    return EXIT_OK if ok else EXIT_FAIL
