import math

import numpy as np
import pytest

from hwbp.engine import compute_gradients
from hwbp.errors import DivergenceError, InputError, ShapeError
from hwbp.harness.config import OptimizerConfig, ScheduleConfig, TrainConfig, dump_config, load_config, parse_config
from hwbp.harness.io import MetricsRow, MetricsWriter, load_checkpoint, read_metrics, save_checkpoint
from hwbp.harness.optim import Adam, SGDMomentum, clip_by_global_norm, lr_at
from hwbp.harness.tasks import BYTE_VOCAB, build_task_model, generate_batch, task_dims
from hwbp.harness.train import model_from_checkpoint, train
from hwbp.numkit import Rng


def tiny(alg="highway", k=0, steps=6, **over):
    cfg = TrainConfig()
    cfg.model.hidden = 4
    cfg.task.length = 6
    cfg.task.batch_size = 4
    cfg.task.eval_size = 8
    cfg.algorithm.name, cfg.algorithm.k = alg, k
    cfg.schedule.steps = steps
    cfg.schedule.log_every = 1
    for key, value in over.items():
        section, name = key.split("__")
        setattr(getattr(cfg, section), name, value)
    return cfg.validate()


# config

def test_config_defaults_and_overrides():
    cfg = parse_config("[model]\nhidden = 8 ; width\n[algorithm]\nname = fpi\nk_schedule = 0:1, 500:4\n")
    assert cfg.model.hidden == 8 and cfg.model.kind == "gru"
    assert cfg.algorithm.name == "fpi"
    assert [cfg.algorithm.k_at(s) for s in (0, 499, 500, 1999)] == [1, 1, 4, 4]


@pytest.mark.parametrize("text", [
    "[model]\nwidth = 3\n",
    "[extras]\na = 1\n",
    "[model]\nhidden = three\n",
    "[model]\nshared = maybe\n",
    "[algorithm]\nname = sgd\n",
    "[algorithm]\nk = -1\n",
    "[algorithm]\nk_schedule = 10\n",
    "[algorithm]\nscan = tree\n",
    "[optimizer]\nlr = 0\n",
    "[schedule]\nwarmup = 1.0\n",
    "not ini at all",
])
def test_config_rejects(text):
    with pytest.raises(InputError):
        parse_config(text)


def test_config_dump_round_trip(tmp_path):
    cfg = tiny(alg="fpi", k=3, optimizer__name="sgd_momentum", model__shared=False)
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    (tmp_path / "c.ini").write_text(text)
    assert load_config(tmp_path / "c.ini") == cfg
    with pytest.raises(InputError):
        load_config(tmp_path / "missing.ini")


# tasks

def test_adding_batch():
    cfg = tiny(task__length=4, task__seed=7)
    batch = generate_batch(cfg.task, Rng(7, ("train", 0)), 5, 4)
    assert batch.xs.shape == (4, 5, 2)
    markers = batch.xs[..., 1]
    np.testing.assert_array_equal(markers.sum(axis=0), 2.0)
    np.testing.assert_allclose(batch.targets[4][:, 0], (batch.xs[..., 0] * markers).sum(axis=0), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(batch.h0, 0.0)


def test_batches_deterministic():
    cfg = tiny()
    a = generate_batch(cfg.task, Rng(0, ("train", 3)), 4, 4)
    b = generate_batch(cfg.task, Rng(0, ("train", 3)), 4, 4)
    c = generate_batch(cfg.task, Rng(0, ("train", 4)), 4, 4)
    np.testing.assert_array_equal(a.xs, b.xs)
    assert not np.array_equal(a.xs, c.xs)


def test_charlm_batch(tmp_path):
    text = ("the quick brown fox jumps over the lazy dog. " * 30)[:1024]
    path = tmp_path / "corpus.txt"
    path.write_text(text, encoding="utf-8")
    cfg = tiny(task__kind="charlm", task__path=str(path), task__length=16)
    batch = generate_batch(cfg.task, Rng(0, ("train", 0)), 3, 4)
    inputs = batch.xs.argmax(axis=-1)
    assert batch.xs.shape == (16, 3, BYTE_VOCAB)
    for i in range(1, 16):
        np.testing.assert_array_equal(batch.targets[i], inputs[i])
    data = np.frombuffer(text.encode(), dtype=np.uint8)
    for b in range(3):
        window = np.concatenate([inputs[:, b], [batch.targets[16][b]]])
        assert any(np.array_equal(window, data[s : s + 17]) for s in range(len(data) - 16))


def test_charlm_bad_path(tmp_path):
    cfg = tiny(task__kind="charlm", task__path=str(tmp_path / "nope.txt"))
    with pytest.raises(InputError):
        build_task_model(cfg.model, cfg.task)
    bad = tmp_path / "bad.txt"
    bad.write_bytes(b"\xff\xfe\x00")
    cfg.task.path = str(bad)
    with pytest.raises(InputError):
        generate_batch(cfg.task, Rng(0), 2, 4)


def test_copy_batch():
    cfg = tiny(task__kind="copy", task__length=9, task__n_copy=3, task__n_symbols=4)
    batch = generate_batch(cfg.task, Rng(1), 2, 4)
    tokens = batch.xs.argmax(axis=-1)
    np.testing.assert_array_equal(tokens[5], 5)
    for j in range(3):
        np.testing.assert_array_equal(batch.targets[6 + 1 + j], tokens[j])
    assert task_dims(cfg.task)[:2] == (6, 5)
    with pytest.raises(InputError):
        generate_batch(tiny(task__kind="copy", task__length=6, task__n_copy=3).task, Rng(1), 2, 4)


def test_rowimage_batch(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "img.npz"
    np.savez(path, images=rng.random((10, 5, 3)), labels=np.arange(10) % 3)
    cfg = tiny(task__kind="rowimage", task__path=str(path), task__length=5)
    model = build_task_model(cfg.model, cfg.task)
    batch = generate_batch(cfg.task, Rng(0), 4, model.state_dim)
    assert batch.xs.shape == (5, 4, 3) and list(batch.targets) == [5]
    with pytest.raises(InputError):
        generate_batch(tiny(task__kind="rowimage", task__path=str(path), task__length=4).task, Rng(0), 4, 4)


# optimizers

def test_zero_gradient_leaves_params():
    for opt in (SGDMomentum(), Adam()):
        p = {"w": np.array([1.0, -2.0])}
        opt.step(p, {"w": np.zeros(2)}, 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_sgd_step():
    p = {"w": np.array([1.0])}
    opt = SGDMomentum(momentum=0.9)
    opt.step(p, {"w": np.array([1.0])}, 0.1)
    assert p["w"][0] == pytest.approx(0.9, abs=1e-15)
    opt.step(p, {"w": np.array([1.0])}, 0.1)
    assert p["w"][0] == pytest.approx(0.9 - 0.19, abs=1e-15)


def test_adam_first_step():
    g = np.array([0.5, -3.0])
    p = {"w": np.array([1.0, 1.0])}
    Adam(0.9, 0.999, 1e-8).step(p, {"w": g}, 0.01)
    m = 0.1 * g / 0.1
    v = 0.001 * g * g / 0.001
    np.testing.assert_allclose(p["w"], 1.0 - 0.01 * m / (np.sqrt(v) + 1e-8), rtol=0, atol=1e-12)


def test_weight_decay_is_decoupled():
    p = {"w": np.array([2.0])}
    Adam(weight_decay=0.5).step(p, {"w": np.zeros(1)}, 0.1)
    assert p["w"][0] == pytest.approx(1.9, abs=1e-15)


def test_optimizer_shape_mismatch():
    for opt in (SGDMomentum(), Adam()):
        with pytest.raises(ShapeError):
            opt.step({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.1)


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == 5.0
    assert g["a"][0] == pytest.approx(0.6) and g["b"][0] == pytest.approx(0.8)


def test_lr_schedule():
    sched = ScheduleConfig(steps=100, warmup=0.1, final_lr_ratio=0.1)
    assert lr_at(0, 1.0, sched) == pytest.approx(0.1)
    assert lr_at(9, 1.0, sched) == pytest.approx(1.0)
    assert lr_at(10, 1.0, sched) == pytest.approx(1.0)
    assert lr_at(99, 1.0, sched) == pytest.approx(0.1)
    lrs = [lr_at(s, 1.0, sched) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# io

def test_checkpoint_round_trip_bytes(tmp_path):
    params = {"cell.W": Rng(0).normal((3, 4)), "cell.b": np.arange(4.0), "s": np.array(2.5)}
    save_checkpoint(tmp_path / "a.ckpt", params, 17, "[model]\n")
    loaded, step, text = load_checkpoint(tmp_path / "a.ckpt")
    assert step == 17 and text == "[model]\n"
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])
    save_checkpoint(tmp_path / "b.ckpt", loaded, step, text)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", {"w": np.ones(4)}, 0, "")
    raw = (tmp_path / "a.ckpt").read_bytes()
    for name, blob in [("magic", b"XXXX" + raw[4:]), ("short", raw[:-8]), ("long", raw + b"\0"),
                       ("header", raw[:16] + b"[" + raw[17:])]:
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(InputError):
            load_checkpoint(tmp_path / name)
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "missing")


def test_metrics_round_trip(tmp_path):
    rows = [MetricsRow(0, 1.5, 0.25, None, 2, 12, 3, None), MetricsRow(1, 3.0, 0.125, 0.5, 2, 12, 3, 0.99)]
    w = MetricsWriter(tmp_path / "m.csv")
    for r in rows:
        w.write(r)
    w.close()
    assert read_metrics(tmp_path / "m.csv") == rows


# training loop

def test_train_writes_outputs(tmp_path):
    cfg = tiny(steps=5, schedule__diag_every=2, schedule__log_every=2)
    res = train(cfg, tmp_path)
    for name in ("metrics.csv", "manifest.ini", "norm_profile.csv", "init.ckpt", "final.ckpt"):
        assert (tmp_path / name).exists()
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r.step for r in rows] == [0, 2, 4]
    assert rows[-1].eval_loss == res.final_eval_loss
    assert all(r.cos_sim is not None for r in rows)
    assert load_config(tmp_path / "manifest.ini") == cfg
    params, step, text = load_checkpoint(tmp_path / "final.ckpt")
    assert step == 5
    _, model = model_from_checkpoint(params, text)
    for name in model.params:
        np.testing.assert_array_equal(model.params[name], res.model.params[name])
    with pytest.raises(InputError):
        model_from_checkpoint({"x": np.ones(1)}, text)


def test_train_deterministic():
    a = train(tiny(steps=4))
    b = train(tiny(steps=4))
    assert [r.train_loss for r in a.rows] == [r.train_loss for r in b.rows]
    assert a.final_eval_loss == b.final_eval_loss


def test_k_schedule_switches():
    res = train(tiny(steps=6, algorithm__k_schedule="0:1, 3:4"))
    assert [r.k_used for r in res.rows] == [1, 1, 1, 4, 4, 4]
    L = 6
    assert [r.vjp_block_calls for r in res.rows] == [L, L, L, 4 * L, 4 * L, 4 * L]
    assert [r.scan_calls for r in res.rows] == [2, 2, 2, 5, 5, 5]


def test_fpi_zero_uses_only_last_cell():
    cfg = tiny(model__shared=False)
    model = build_task_model(cfg.model, cfg.task)
    batch = generate_batch(cfg.task, Rng(0, ("train", 0)), 4, model.state_dim)
    res = compute_gradients(model, batch, "fpi", 0)
    np.testing.assert_array_equal(res.w[:-1], 0.0)
    for name, g in res.grads.params.items():
        if name.startswith("layer") and not name.startswith("layer6."):
            np.testing.assert_array_equal(g, 0.0)
        elif name.startswith("layer6."):
            assert np.abs(g).max() > 0


def test_highway_full_depth_matches_backprop_trajectory():
    hw = train(tiny(alg="highway", k=6, steps=8))
    bp = train(tiny(alg="backprop", steps=8))
    np.testing.assert_allclose([r.train_loss for r in hw.rows], [r.train_loss for r in bp.rows], rtol=0, atol=1e-10)


def test_divergence_reported(tmp_path):
    cfg = tiny(alg="backprop", steps=40, optimizer__lr=1e6, optimizer__name="sgd_momentum",
               model__activation="identity", model__kind="plain", schedule__warmup=0.0)
    with pytest.raises(DivergenceError) as info:
        train(cfg, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert math.isnan(rows[-1].train_loss)
    assert rows[-1].step == info.value.index
