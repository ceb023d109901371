import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowtext import encoder as enc
from flowtext import trainer as tr
from flowtext.tokenizer import TokenSequence


def args(**kw):
    base = dict(learning_rate=1e-5, warmup_steps=500)
    base.update(kw)
    return tr.TrainingArguments(**base)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_lr_examples():
    a = args()
    assert tr.lr_at_step(0, a, 2000) == 0.0
    assert tr.lr_at_step(250, a, 2000) == pytest.approx(5e-6, abs=1e-18)
    assert tr.lr_at_step(500, a, 2000) == 1e-5
    assert tr.lr_at_step(2000, a, 2000) == 0.0
    assert tr.lr_at_step(1250, a, 2000) == pytest.approx(5e-6, abs=1e-18)


def test_lr_outside_range():
    with pytest.raises(ValueError):
        tr.lr_at_step(11, args(warmup_steps=2), 10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 50), st.integers(1, 200), st.floats(1e-6, 1.0))
def test_lr_piecewise_linear_and_peaks_at_learning_rate(warm, extra, peak):
    a = args(learning_rate=peak, warmup_steps=warm)
    total = warm + extra
    lrs = np.array([tr.lr_at_step(s, a, total) for s in range(total + 1)])
    assert lrs.max() == pytest.approx(peak, rel=1e-12)
    assert np.all(lrs >= 0)
    # continuity: neighbouring steps move by at most one slope unit
    slope = peak / max(min(warm, extra), 1)
    assert np.all(np.abs(np.diff(lrs)) <= slope * (1 + 1e-9))
    second = np.diff(lrs, 2)
    assert np.count_nonzero(np.abs(second) > 1e-12 * peak) <= 2


def test_warmup_longer_than_total_rejected():
    with pytest.raises(ValueError):
        args(warmup_steps=20).validate(10)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_adamw_decay_only():
    p = {"w": np.array([1.0])}
    state = tr.OptimizerState.zeros_like(p)
    tr.adamw_update(p, {"w": np.array([0.0])}, state, 0.1, weight_decay=0.01)
    assert p["w"][0] == pytest.approx(0.999, abs=1e-15)
    assert state.t == 1


def test_adamw_first_step():
    p = {"w": np.array([0.0])}
    state = tr.OptimizerState.zeros_like(p)
    tr.adamw_update(p, {"w": np.array([2.0])}, state, 0.1)
    assert p["w"][0] == pytest.approx(-0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)


def test_adamw_fixed_point():
    p = {"w": np.array([0.3, -2.0])}
    state = tr.OptimizerState.zeros_like(p)
    tr.adamw_update(p, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_array_equal(p["w"], [0.3, -2.0])


def test_adam_three_scalar_steps_against_hand_formula():
    grads = [0.5, -1.5, 2.0]
    p = {"w": np.array([1.0])}
    state = tr.OptimizerState.zeros_like(p)
    w, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        tr.adamw_update(p, {"w": np.array([g])}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.01 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p["w"][0] == pytest.approx(w, abs=1e-15)


def test_adamw_rejects_non_finite_gradient():
    p = {"w": np.array([1.0])}
    with pytest.raises(tr.TrainingDiverged):
        tr.adamw_update(p, {"w": np.array([np.nan])}, tr.OptimizerState.zeros_like(p), 0.1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = enc.EncoderConfig(37, n_layers=1, hidden_dim=8, n_heads=2, ffn_dim=16, max_positions=10)
    params = enc.init_params(cfg, 4)
    params["scalar"] = np.array(1.5, dtype=np.float32)
    tr.save_checkpoint(tmp_path, params, {"lr": 0.1, "name": "x", "steps": 3})
    loaded, config = tr.load_checkpoint(tmp_path)
    assert list(loaded) == list(params)
    for k in params:
        assert loaded[k].dtype == np.float32
        assert loaded[k].shape == params[k].shape
        assert loaded[k].tobytes() == params[k].tobytes()
    assert config == {"lr": "0.1", "name": "x", "steps": "3"}
    assert tr.params_digest(loaded) == tr.params_digest(params)
    # saving the loaded copy reproduces the files byte for byte
    tr.save_checkpoint(tmp_path / "again", loaded, {"lr": 0.1, "name": "x", "steps": 3})
    for f in ("tensors.bin", "manifest.txt", "config.txt"):
        assert (tmp_path / f).read_bytes() == (tmp_path / "again" / f).read_bytes()


def test_checkpoint_manifest_offsets(tmp_path):
    params = {"a": np.zeros((2, 3), np.float32), "b": np.ones(4, np.float32)}
    tr.save_checkpoint(tmp_path, params, {})
    assert (tmp_path / "manifest.txt").read_text() == "a 2x3 0\nb 4 24\n"
    blob = (tmp_path / "tensors.bin").read_bytes()
    assert len(blob) == 40
    assert blob[24:28] == b"\x00\x00\x80?"


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing checkpoint"):
        tr.load_checkpoint(tmp_path / "nope")


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

CFG = enc.EncoderConfig(12, n_layers=1, hidden_dim=8, n_heads=2, ffn_dim=16, max_positions=6,
                        dropout_rate=0.1)


def toy_set(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        label = int(rng.integers(0, 2))
        tok = 5 + label * 3 + int(rng.integers(0, 3))
        ids = (2, tok, int(rng.integers(5, 12)), 3, 0, 0)
        out.append(TokenSequence(ids, (1, 1, 1, 1, 0, 0), (0,) * 6, label))
    return out


def run(seed=0, **kw):
    base = dict(learning_rate=3e-2, batch_size=8, warmup_steps=5, eval_and_save_every=10,
                max_steps=60, seed=seed, patience=10)
    base.update(kw)
    return tr.fine_tune(enc.init_params(CFG, seed), CFG, toy_set(64, 1), toy_set(32, 2),
                        tr.TrainingArguments(**base))


def test_fine_tune_learns_and_logs(tmp_path):
    best, log = run()
    assert [r["step"] for r in log.rows] == [10, 20, 30, 40, 50, 60]
    assert best.val_loss <= min(r["val_loss"] for r in log.rows)
    assert best.step == log.best_step
    assert log.rows[-1]["accuracy"] >= 0.97
    log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,val_loss,accuracy,precision,recall,f1"
    assert len(lines) == 7


def test_fine_tune_is_deterministic():
    a_best, a_log = run(seed=3)
    b_best, b_log = run(seed=3)
    assert a_log.rows == b_log.rows
    assert tr.params_digest(a_best.params) == tr.params_digest(b_best.params)


def test_early_stopping_at_first_non_improving_eval():
    one = toy_set(1, 5)
    a = tr.TrainingArguments(learning_rate=0.1, batch_size=1, warmup_steps=0, eval_and_save_every=1,
                             max_steps=500, patience=1, weight_decay=0.0)
    best, log = tr.fine_tune(enc.init_params(CFG, 0), CFG, one, one, a)
    assert log.stopped_early
    losses = [r["val_loss"] for r in log.rows]
    assert all(x < y for x, y in zip(losses[1:-1], losses[:-2]))
    assert losses[-1] >= losses[-2]
    assert best.step == log.rows[-2]["step"]
    assert len(log.rows) < 500


def test_checkpoint_written_for_best(tmp_path):
    _, log = tr.fine_tune(enc.init_params(CFG, 0), CFG, toy_set(64, 1), toy_set(32, 2),
                          tr.TrainingArguments(learning_rate=1e-2, batch_size=8, warmup_steps=5,
                                               eval_and_save_every=10, max_steps=20),
                          checkpoint_dir=tmp_path, checkpoint_meta={"kind": "test"})
    params, config = tr.load_checkpoint(tmp_path)
    assert config["kind"] == "test"
    assert int(config["step"]) == log.best_step


def test_divergence_aborts_with_last_good_checkpoint(monkeypatch):
    real = enc.loss_and_gradients
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        loss, grads = real(*a, **kw)
        return (float("nan") if calls["n"] > 25 else loss), grads

    monkeypatch.setattr(enc, "loss_and_gradients", flaky)
    with pytest.raises(tr.TrainingDiverged) as info:
        run()
    assert info.value.checkpoint is not None
    assert info.value.checkpoint.step == 20 or info.value.checkpoint.step == 10


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        tr.fine_tune(enc.init_params(CFG, 0), CFG, [], toy_set(2, 0), tr.TrainingArguments())
