import dataclasses
import json
import math
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loadcnn import checkpoint, data, model
from loadcnn.gradcheck import random_sample
from loadcnn.nn import ShapeError
from loadcnn.training import (AdamState, Checkpoint, NonFiniteLossError, TrainConfig, TrainingError,
                              epoch_batches, init_optimizer_state, lr_schedule, optimizer_step, train)


@pytest.fixture(scope="module")
def tiny():
    series = data.gen_synthetic(2, 12, seed=0)
    windows = [w for s in series for w in data.build_windows(s)]
    batch = data.make_batch(windows, 2)
    return batch.subset(range(8)), batch.subset(range(8, 10))


# ---- config and schedule


def test_train_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.batch_size, c.max_epochs, c.learning_rate, c.decay_rate, c.validation_interval_steps) == \
        (64, 65, 0.0015, 0.96, 100)
    assert c.optimizer == "adam"
    for bad in ({"batch_size": 0}, {"decay_rate": 0.0}, {"decay_rate": 1.5}, {"learning_rate": 0.0},
                {"optimizer": "rmsprop"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_lr_schedule_values():
    assert lr_schedule(0.0015, 0.96, 0) == 0.0015
    assert lr_schedule(0.0015, 0.96, 1) == pytest.approx(0.00144)
    lr64 = lr_schedule(0.0015, 0.96, 64)
    assert lr64 == pytest.approx(1.1001456e-4, rel=1e-7)
    # the commonly quoted rounding (1.096e-4) is within half a percent
    assert lr64 == pytest.approx(1.096e-4, rel=5e-3)
    with pytest.raises(ValueError):
        lr_schedule(0.0015, 0.96, -1)


# ---- optimizers


def test_sgd_step_example():
    new, _ = optimizer_step({"p": np.array([1.0])}, {"p": np.array([0.5])}, None, 0.1, "sgd")
    assert new["p"][0] == pytest.approx(0.95)


def test_adam_first_step_magnitude_is_lr():
    r = np.random.default_rng(0)
    p = {"a": r.normal(size=(3, 4)), "b": r.normal(size=5)}
    g = {k: r.normal(size=v.shape) * 10 ** r.uniform(-3, 3, size=v.shape) for k, v in p.items()}
    new, state = optimizer_step(p, g, init_optimizer_state(p), 0.01)
    for k in p:
        np.testing.assert_allclose(np.abs(new[k] - p[k]), 0.01, rtol=1e-4)
    assert state.t == 1


def test_zero_gradients_leave_params():
    p = {"a": np.arange(4.0)}
    z = {"a": np.zeros(4)}
    for kind in ("adam", "sgd"):
        new, _ = optimizer_step(p, z, init_optimizer_state(p, kind), 0.1, kind)
        np.testing.assert_array_equal(new["a"], p["a"])


def test_optimizer_is_pure():
    p = {"a": np.ones(3)}
    g = {"a": np.full(3, 2.0)}
    s = init_optimizer_state(p)
    optimizer_step(p, g, s, 0.1)
    assert np.all(p["a"] == 1.0) and s.t == 0 and not s.m["a"].any()


def test_optimizer_shape_mismatch():
    with pytest.raises(ShapeError):
        optimizer_step({"a": np.ones(3)}, {"a": np.ones(4)}, None, 0.1, "sgd")


def test_adam_against_hand_rolled_reference():
    r = np.random.default_rng(1)
    p = r.normal(size=6)
    params, state = {"p": p.copy()}, init_optimizer_state({"p": p})
    m = v = np.zeros(6)
    for t in range(1, 6):
        g = r.normal(size=6)
        params, state = optimizer_step(params, {"p": g}, state, 0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(params["p"], p, rtol=1e-12)
    assert isinstance(state, AdamState)


# ---- epoch shuffling


@given(st.integers(1, 200), st.integers(1, 70), st.integers(0, 2**31))
def test_epoch_visits_every_sample_once(n, bs, seed):
    batches = epoch_batches(n, bs, np.random.default_rng(seed))
    assert Counter(np.concatenate(batches).tolist()) == Counter(range(n))
    assert all(len(b) == bs for b in batches[:-1]) and 1 <= len(batches[-1]) <= bs


# ---- training loop


def test_training_rejects_empty(tiny):
    tr, va = tiny
    cfg = model.default_config()
    with pytest.raises(TrainingError):
        train(tr.subset([]), va, cfg, TrainConfig())
    with pytest.raises(TrainingError):
        train(tr, va.subset([]), cfg, TrainConfig())


def test_determinism_and_log_structure(tiny):
    tr, va = tiny
    tc = TrainConfig(batch_size=3, max_epochs=4, validation_interval_steps=4, seed=9)
    c1, log1 = train(tr, va, model.default_config(), tc)
    c2, log2 = train(tr, va, model.default_config(), tc)
    strip = [dataclasses.replace(r, timestamp_ms=0.0) for r in log1.rows]
    assert strip == [dataclasses.replace(r, timestamp_ms=0.0) for r in log2.rows]
    for k in c1.params.names():
        np.testing.assert_array_equal(c1.params[k], c2.params[k])

    steps = [r.step for r in log1.rows]
    assert steps == list(range(len(steps)))
    assert len(steps) == 1 + 4 * 3  # 8 samples at batch 3 = 3 batches/epoch
    ts = [r.timestamp_ms for r in log1.rows]
    assert ts == sorted(ts)
    # lr trace follows the per-epoch schedule
    for r in log1.rows[1:]:
        assert r.lr == lr_schedule(tc.learning_rate, tc.decay_rate, r.epoch)
    # validation at step 0, every 4 steps and after the last step
    assert [r.step for r in log1.rows if not math.isnan(r.val_loss)] == [0, 4, 8, 12]
    assert c1.loss_best == min(log1.val_losses())
    assert c1.loss_best <= log1.rows[0].val_loss


def test_best_params_reproduce_best_loss(tiny):
    tr, va = tiny
    tc = TrainConfig(batch_size=4, max_epochs=6, validation_interval_steps=2, full_validation=True)
    ckpt, log = train(tr, va, model.default_config(), tc)
    assert ckpt.loss_best == min(log.val_losses())
    assert model.batch_loss(ckpt.params, va) == pytest.approx(ckpt.loss_best, rel=1e-12)
    row = next(r for r in log.rows if r.val_loss == ckpt.loss_best)
    assert (row.step, row.epoch) == (ckpt.step, ckpt.epoch)


def test_max_steps_and_final_short_batch(tiny):
    tr, va = tiny
    seen = []
    tc = TrainConfig(batch_size=5, max_epochs=10, max_steps=3)
    _, log = train(tr, va, model.default_config(), tc, on_step=seen.append)
    assert [r.step for r in log.rows] == [0, 1, 2, 3]
    assert seen == log.rows
    assert not math.isnan(log.rows[-1].val_loss)


def test_sgd_descent_sanity(tiny):
    tr, va = tiny
    batch = tr.subset(range(4))
    tc = TrainConfig(batch_size=4, max_epochs=51, learning_rate=0.002, decay_rate=1.0, optimizer="sgd")
    _, log = train(batch, va, model.default_config(), tc)
    losses = log.train_losses()
    steps_down = sum(b <= a for a, b in zip(losses, losses[1:]))
    assert steps_down >= 45


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(tiny):
    tr, va = tiny
    cfg = model.default_config()
    bad = tr.subset(range(8))
    bad.history[3, 0, 0] = np.inf
    with pytest.raises(NonFiniteLossError) as exc:
        train(bad, va, cfg, TrainConfig(batch_size=8, max_epochs=1, validation_interval_steps=50))
    assert exc.value.step == 1 and 3 in exc.value.batch_ids


def test_log_csv(tiny):
    tr, va = tiny
    _, log = train(tr, va, model.default_config(), TrainConfig(batch_size=8, max_epochs=2))
    lines = log.to_csv().splitlines()
    assert lines[0] == "step,epoch,lr,train_loss,val_loss,timestamp_ms"
    assert len(lines) == 1 + len(log.rows)
    assert lines[1].split(",")[3] == ""  # no training loss before the first update
    assert log.training_hours >= 0


# ---- checkpoints


@pytest.fixture(scope="module")
def ckpt():
    cfg = model.default_config()
    p = model.init_params(cfg, 4)
    p = p.replace({k: v + 0.01 for k, v in p.tensors.items()})
    return Checkpoint(p, TrainConfig(seed=3), 0.25, step=400, epoch=7, metadata={"id_map_sha256": "ab" * 32})


def test_checkpoint_round_trip(tmp_path, ckpt):
    path = tmp_path / "c.lcnn"
    checkpoint.save_checkpoint(ckpt, path)
    back = checkpoint.load_checkpoint(path)
    assert back.model_config == ckpt.model_config and back.train_config == ckpt.train_config
    assert (back.loss_best, back.step, back.epoch, back.metadata) == (0.25, 400, 7, ckpt.metadata)
    p32 = ckpt.params.as_float32()
    for k in p32.names():
        np.testing.assert_array_equal(back.params[k], p32[k])
    s = random_sample(np.random.default_rng(0), ckpt.model_config)
    np.testing.assert_array_equal(model.forward(back.params, s), model.forward(p32, s))
    assert checkpoint.dumps(back) == checkpoint.dumps(ckpt)
    assert not (tmp_path / "c.lcnn.tmp").exists()


def test_checkpoint_layout(ckpt):
    raw = checkpoint.dumps(ckpt)
    assert raw[:4] == b"LCNN"
    version, n = struct.unpack_from("<IQ", raw, 4)
    assert version == 1
    meta = json.loads(raw[16:16 + n])
    assert meta["tensors"] == ckpt.params.names()
    (nlen,) = struct.unpack_from("<I", raw, 16 + n)
    assert raw[20 + n:20 + n + nlen] == b"h0.w"


def test_checkpoint_truncation_detected(ckpt):
    raw = checkpoint.dumps(ckpt)
    for cut in (0, 3, 10, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(raw[:cut])
    with pytest.raises(checkpoint.CheckpointError, match="trailing"):
        checkpoint.loads(raw + b"\0")


def test_checkpoint_version_and_magic(ckpt):
    raw = bytearray(checkpoint.dumps(ckpt))
    bad_version = bytes(raw[:4]) + struct.pack("<I", 2) + bytes(raw[8:])
    with pytest.raises(checkpoint.UnsupportedVersionError):
        checkpoint.loads(bad_version)
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + bytes(raw[4:]))


def test_checkpoint_shape_mismatch(ckpt):
    # embed a config with a wider first horizontal kernel than the stored tensors
    d = ckpt.model_config.to_dict()
    d["horizontal_layers"][0][1] = 5
    other = model.LoadCNNConfig.from_dict(d)
    small = Checkpoint(model.init_params(other, 0), ckpt.train_config, 1.0)
    raw = checkpoint.dumps(small)
    n = struct.unpack_from("<Q", raw, 8)[0]
    meta = json.loads(raw[16:16 + n])
    meta["model_config"] = ckpt.model_config.to_dict()
    blob = json.dumps(meta, sort_keys=True).encode()
    forged = raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + n:]
    with pytest.raises(checkpoint.CheckpointError, match="do not match"):
        checkpoint.loads(forged)
