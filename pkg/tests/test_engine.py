import numpy as np
import pytest

from hwbp.engine import (
    Batch,
    Counters,
    GradientEstimate,
    ModelGraph,
    compute_gradients,
    exact_backprop,
    exact_cotangents,
    finalize_params,
    fpi,
    highway_bp,
    initial_estimate,
    iterate,
    loss_and_grad,
    run_forward,
)
from hwbp.errors import ContractError, NumericError, ShapeError
from hwbp.layers import LayerSpec, forward, vjp_params
from hwbp.models import build_model, random_batch
from hwbp.oracle import truncated_cotangents

from conftest import ALL_SPECS, rel_err, scalar_chain


def _ws(result):
    return [w[:, 0, 0].tolist() for w in result.estimates]


def test_scalar_chain_iterates():
    model, batch = scalar_chain()
    res = highway_bp(model, batch, 2, retain=True)
    assert _ws(res) == [[1.0, 1.0, 1.0], [6.0, 4.0, 1.0], [12.0, 4.0, 1.0]]


def test_scalar_chain_exact():
    model, batch = scalar_chain()
    res = exact_backprop(model, batch)
    assert res.w[:, 0, 0].tolist() == [12.0, 4.0, 1.0]
    hw = highway_bp(model, batch, 2)
    np.testing.assert_array_equal(hw.w, res.w)
    for name in model.params:
        np.testing.assert_array_equal(hw.grads.params[name], res.grads.params[name])


def test_k_beyond_L_is_idempotent(any_spec):
    model = build_model(any_spec, 5, seed=1, attach="all", bias_scale=0.1)
    batch = random_batch(model, 3, 2)
    at_L = highway_bp(model, batch, 5)
    past = highway_bp(model, batch, 8, retain=True)
    assert np.abs(past.estimates[6] - past.estimates[5]).max() <= 1e-12 * np.abs(at_L.w).max()
    assert np.abs(past.w - at_L.w).max() <= 1e-12 * np.abs(at_L.w).max()


def test_final_only_loss_cotangents():
    model = build_model(LayerSpec("gru", 3, ext_dim=1), 4, seed=0)
    trace = run_forward(model, random_batch(model, 2, 0))
    nonzero = [i for i in range(5) if np.any(trace.cotangents[i])]
    assert nonzero == [4]


def test_zero_model_zero_loss():
    spec = LayerSpec("plain", 2)
    params = {f"layer{i}.{k}": np.zeros(s) for i in (1, 2) for k, s in (("W", (2, 2)), ("b", (2,)))}
    model = ModelGraph([spec] * 2, params, {1: "mse", 2: "mse"})
    batch = Batch(np.zeros((3, 2)), None, {1: np.zeros((3, 2)), 2: np.zeros((3, 2))})
    res = exact_backprop(model, batch)
    assert res.loss == 0.0
    assert not res.w.any()
    assert not res.grads.flatten(True).any()


def test_initial_estimate_examples():
    model, batch = scalar_chain()
    trace = run_forward(model, batch)
    assert initial_estimate(model, trace).w[:, 0, 0].tolist() == [1.0, 1.0, 1.0]
    assert initial_estimate(model, trace, fpi=True).w[:, 0, 0].tolist() == [0.0, 0.0, 1.0]

    model1, batch1 = scalar_chain((2.0,))
    w0 = initial_estimate(model1, run_forward(model1, batch1)).w
    assert w0[:, 0, 0].tolist() == [1.0, 1.0]


def test_initial_estimate_single_layer_diagonal():
    model = build_model(LayerSpec("relu", 3), 1, seed=2, bias_scale=0.5)
    batch = random_batch(model, 2, 3)
    trace = run_forward(model, batch)
    w0 = initial_estimate(model, trace).w
    np.testing.assert_array_equal(w0[1], trace.cotangents[1])
    np.testing.assert_array_equal(w0[0], trace.cotangents[1] * trace.tapes[0].residual_jac.value)


def test_iterate_with_zero_estimates_returns_w0():
    model = build_model(LayerSpec("gru", 3), 3, seed=0)
    trace = run_forward(model, random_batch(model, 2, 0))
    zero = GradientEstimate(np.zeros_like(trace.cotangents), 0)
    np.testing.assert_array_equal(iterate(model, trace, zero, zero).w, 0.0)
    w0 = initial_estimate(model, trace)
    out = iterate(model, trace, GradientEstimate(np.zeros_like(w0.w), 0), w0)
    np.testing.assert_array_equal(out.w, w0.w)


def test_iterate_rejects_foreign_estimate():
    model = build_model(LayerSpec("gru", 3), 3, seed=0)
    trace = run_forward(model, random_batch(model, 2, 0))
    bad = GradientEstimate(np.zeros((7, 2, 3)), 0)
    with pytest.raises(ContractError):
        iterate(model, trace, bad, bad)


def test_highway_k0_uses_residual_paths_only():
    model = build_model(ALL_SPECS["gru"], 4, seed=3, attach="all")
    batch = random_batch(model, 2, 1)
    trace = run_forward(model, batch)
    res = highway_bp(model, batch, 0)
    np.testing.assert_array_equal(res.w, initial_estimate(model, trace).w)
    assert res.counters.vjp_block_calls == 0 and res.counters.scan_calls == 1


@pytest.mark.parametrize("k", [0, 1, 3, 6])
def test_counters(k):
    model = build_model(ALL_SPECS["lstm"], 6, seed=0)
    batch = random_batch(model, 2, 0)
    hw = highway_bp(model, batch, k)
    assert (hw.counters.vjp_block_calls, hw.counters.scan_calls) == (k * 6, k + 1)
    f = fpi(model, batch, k)
    assert (f.counters.vjp_block_calls, f.counters.scan_calls) == (k * 6, k + 1)
    assert exact_backprop(model, batch).counters.vjp_block_calls == 6


def test_exact_backprop_zero_cotangents():
    model = build_model(ALL_SPECS["plain"], 3, seed=0, attach="all", loss="dot")
    batch = random_batch(model, 2, 0)
    batch = Batch(batch.h0, batch.xs, {i: np.zeros_like(t) for i, t in batch.targets.items()})
    res = exact_backprop(model, batch)
    assert not res.grads.flatten(True).any()


@pytest.mark.parametrize("name", sorted(ALL_SPECS))
def test_fpi_truncation(name):
    L = 6
    model = build_model(ALL_SPECS[name], L, seed=4, bias_scale=0.1)
    batch = random_batch(model, 2, 5)
    trace = run_forward(model, batch)
    exact = exact_cotangents(model, trace)
    scale = np.abs(exact).max()
    for k in range(L + 2):
        w = fpi(model, batch, k, trace=trace).w
        assert np.abs(w - truncated_cotangents(model, trace, k)).max() <= 1e-12 * scale
        assert not w[: max(L - k, 0)].any()
        assert np.abs(w[L - min(k, L):] - exact[L - min(k, L):]).max() <= 1e-12 * scale


def test_fpi_k0_intermediate_losses():
    model = build_model(ALL_SPECS["gru"], 4, seed=0, attach="all")
    batch = random_batch(model, 2, 0)
    trace = run_forward(model, batch)
    np.testing.assert_array_equal(fpi(model, batch, 0).w, trace.cotangents)


@pytest.mark.parametrize("kind", ["plain", "gamma"])
def test_fpi_equals_highway_on_gamma_one_twin(kind):
    spec = ALL_SPECS[kind]
    L = 5
    model = build_model(spec, L, seed=6, bias_scale=0.1, attach="all")
    twin_spec = LayerSpec("gamma", spec.state_dim, ext_dim=spec.ext_dim, hidden=spec.hidden, gamma=1.0)
    twin = ModelGraph([twin_spec] * L, model.params, model.attachments)
    batch = random_batch(model, 2, 1)
    for k in range(L + 1):
        a, b = fpi(model, batch, k), highway_bp(twin, batch, k)
        assert np.abs(a.w - b.w).max() <= 1e-12 * max(np.abs(a.w).max(), 1.0)
        assert rel_err(a.grads.flatten(), b.grads.flatten()) <= 1e-12


def test_fpi_k_ge_L_is_exact():
    model = build_model(ALL_SPECS["lstm"], 4, seed=1, attach="all")
    batch = random_batch(model, 2, 1)
    assert rel_err(fpi(model, batch, 4).grads.flatten(True), exact_backprop(model, batch).grads.flatten(True)) < 1e-12


def test_shared_params_accumulate_per_cell():
    spec = ALL_SPECS["gru"]
    L = 4
    model = build_model(spec, L, seed=2, shared=True, attach="all", bias_scale=0.1)
    batch = random_batch(model, 3, 3)
    res = exact_backprop(model, batch)
    trace = run_forward(model, batch)
    cell = model.layer_params(1)
    for name in cell:
        total = sum(vjp_params(spec, cell, trace.tapes[i], res.w[i + 1])[name] for i in range(L))
        assert rel_err(res.grads.params[f"cell.{name}"], total) < 1e-13


def test_finalize_with_exact_cotangents_is_backprop():
    model = build_model(ALL_SPECS["relu"], 4, seed=3, bias_scale=0.1)
    batch = random_batch(model, 2, 2)
    trace = run_forward(model, batch)
    ref = exact_backprop(model, batch)
    got = finalize_params(model, trace, exact_cotangents(model, trace))
    np.testing.assert_array_equal(got.flatten(True), ref.grads.flatten(True))
    zero = finalize_params(model, trace, np.zeros_like(trace.cotangents))
    assert not zero.flatten(True).any()


def test_gradient_set_order_follows_params():
    model = build_model(ALL_SPECS["gru"], 3, seed=0, out_dim=2)
    res = exact_backprop(model, random_batch(model, 2, 0))
    assert list(res.grads.params) == list(model.params)
    assert res.grads.flatten().size == sum(p.size for p in model.params.values())
    assert res.grads.flatten(True).size == res.grads.flatten().size + res.grads.input.size


def test_run_forward_errors():
    model = build_model(LayerSpec("gru", 3, ext_dim=2), 3, seed=0)
    batch = random_batch(model, 2, 0)
    with pytest.raises(ShapeError):
        run_forward(model, Batch(np.zeros((2, 4)), batch.xs, batch.targets))
    with pytest.raises(ShapeError):
        run_forward(model, Batch(batch.h0, None, batch.targets))
    with pytest.raises(ContractError):
        run_forward(model, Batch(batch.h0, batch.xs, {}))


def test_run_forward_non_finite_reports_index():
    spec = LayerSpec("plain", 1, activation="identity")
    params = {f"layer{i}.W": np.array([[1e200]]) for i in (1, 2, 3)}
    params.update({f"layer{i}.b": np.zeros(1) for i in (1, 2, 3)})
    model = ModelGraph([spec] * 3, params, {3: "mse"})
    with pytest.raises(NumericError) as info:
        run_forward(model, Batch(np.ones((1, 1)), None, {3: np.zeros((1, 1))}))
    assert info.value.index == 2


def test_model_graph_validation():
    spec = LayerSpec("plain", 2)
    params = build_model(spec, 2).params
    with pytest.raises(ContractError):
        ModelGraph([spec, LayerSpec("plain", 2, hidden=3)], params, {2: "mse"})
    with pytest.raises(ContractError):
        ModelGraph([spec] * 2, params, {})
    with pytest.raises(ContractError):
        ModelGraph([spec] * 2, params, {3: "mse"})
    with pytest.raises(ContractError):
        ModelGraph([spec] * 2, params, {2: "hinge"})


def test_loss_and_grad_xent():
    y = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    t = np.array([1, 2])
    value, grad = loss_and_grad("xent", y, t)
    p = np.exp(y) / np.exp(y).sum(axis=1, keepdims=True)
    ref = -np.mean(np.log(p[[0, 1], t]))
    assert value == pytest.approx(ref, rel=1e-14)
    onehot = np.eye(3)[t]
    np.testing.assert_allclose(grad, (p - onehot) / 2, rtol=1e-14)


def test_head_gradients_match_finite_differences():
    from hwbp.oracle import finite_diff_gradient

    model = build_model(LayerSpec("gru", 3, ext_dim=2), 3, seed=1, attach="all", loss="xent", out_dim=4,
                        bias_scale=0.1)
    rng = np.random.default_rng(0)
    batch = Batch(rng.normal(size=(2, 3)), rng.normal(size=(3, 2, 2)), {i: rng.integers(0, 4, 2) for i in (1, 2, 3)})
    res = highway_bp(model, batch, 3)
    assert rel_err(res.grads.flatten(True), finite_diff_gradient(model, batch).flatten(True)) < 1e-6


def test_compute_gradients_dispatch():
    model, batch = scalar_chain()
    assert compute_gradients(model, batch, "highway", 1).w[0, 0, 0] == 6.0
    assert compute_gradients(model, batch, "backprop").w[0, 0, 0] == 12.0
    assert compute_gradients(model, batch, "fpi", 1, scan="seq").w[0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        compute_gradients(model, batch, "adjoint")
    with pytest.raises(ValueError):
        highway_bp(model, batch, -1)


def test_seq_and_par_scan_agree():
    model = build_model(ALL_SPECS["gru"], 20, seed=0, attach="all")
    batch = random_batch(model, 2, 0)
    a = highway_bp(model, batch, 3, scan="par")
    b = highway_bp(model, batch, 3, scan="seq")
    assert np.abs(a.w - b.w).max() <= 1e-12 * np.abs(a.w).max()
