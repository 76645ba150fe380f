import math

import numpy as np
import pytest

from ahmf import training
from ahmf.data_synth import FormatError, SceneSpec, generate
from ahmf.model import ModelConfig
from ahmf.numerics import ConfigurationError, Tensor, grad_check, parameter, precision, softplus
from ahmf.training import (
    HISTORY_COLUMNS,
    Checkpoint,
    NumericError,
    TrainConfig,
    Trainer,
    early_stop,
    joint_schedule,
    kld_loss,
    loss,
    lr_at,
    pool_map,
    sgd_step,
    train,
)


def small_model_cfg(**kw):
    base = dict(frame_height=16, frame_width=16, stub_channels=(2, 2, 2), grid=8, gru_hidden=2,
                n_priors=1, mem_channels=2, heads=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    out = {}
    for i, (d, rule) in enumerate([("A", "attend_leftmost"), ("B", "attend_rightmost")]):
        out[d] = generate(SceneSpec(H0=16, W0=16, T=3, n_movers=2, domain_rule=rule, seed=10 + i), 4, d)
    return out


def tiny_cfg(**kw):
    base = dict(seq_len=3, max_epochs=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- schedule and optimizer


def test_lr_schedule_values():
    cfg = TrainConfig()
    assert [lr_at(e, cfg) for e in range(4)] == pytest.approx([0.01, 0.008, 0.0064, 0.00512], abs=1e-15)
    lrs = [lr_at(e, cfg) for e in range(30)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_sgd_null_step():
    p = {"w": parameter(np.array([1.0, -2.0]))}
    sgd_step(p, {"w": np.zeros(2)}, {}, 0.1, TrainConfig(weight_decay=0.0))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_sgd_vanilla_step():
    with precision(np.float64):
        p = {"w": parameter(np.array(1.0))}
    sgd_step(p, {"w": np.array(1.0)}, {}, 0.1, TrainConfig(momentum=0.0, weight_decay=0.0))
    assert float(p["w"].data) == pytest.approx(0.9, abs=1e-15)


def test_sgd_momentum_recurrence():
    with precision(np.float64):
        p = {"w": parameter(np.array(0.0))}
    state, cfg = {}, TrainConfig(momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        sgd_step(p, {"w": np.array(1.0)}, state, 0.1, cfg)
    assert float(p["w"].data) == pytest.approx(-0.29, abs=1e-12)


def test_sgd_weight_decay_couples_into_gradient():
    with precision(np.float64):
        p = {"w": parameter(np.array(2.0))}
    sgd_step(p, {"w": np.array(0.5)}, {}, 0.1, TrainConfig(momentum=0.0, weight_decay=0.25))
    assert float(p["w"].data) == pytest.approx(2.0 - 0.1 * (0.5 + 0.5))


def test_sgd_zero_lr_is_noop(rng):
    p = {"w": parameter(rng.standard_normal(5))}
    before = p["w"].data.copy()
    sgd_step(p, {"w": rng.standard_normal(5)}, {}, 0.0, TrainConfig())
    np.testing.assert_array_equal(p["w"].data, before)


def test_sgd_skips_missing_and_names_bad_gradient():
    p = {"a": parameter(np.ones(2)), "b": parameter(np.ones(2))}
    sgd_step(p, {"a": None, "b": np.ones(2)}, {}, 0.1, TrainConfig())
    np.testing.assert_array_equal(p["a"].data, 1.0)
    with pytest.raises(NumericError, match="'b'"):
        sgd_step(p, {"b": np.array([1.0, np.inf])}, {}, 0.1, TrainConfig())


# ---------------------------------------------------------------- loss


def test_loss_minimum_at_ground_truth(rng):
    gt = rng.random((4, 4)) + 0.1
    gt /= gt.sum()
    with precision(np.float64):
        pred = Tensor(gt.copy(), requires_grad=True)
        L = loss(pred, gt)
        L.backward()
    assert abs(float(L.data)) < 1e-5
    # d/dpred of Σ gt·log(gt/pred) at pred = gt is -1 everywhere; it vanishes along the simplex
    g = pred.grad
    assert np.max(np.abs(g - g.mean())) < 1e-3


def test_loss_gradcheck_on_logits(rng):
    gt = rng.random((4, 4)) + 0.05
    gt /= gt.sum()

    def op(z):
        s = softplus(z)
        return loss(s / s.sum(), gt)

    rep = grad_check(op, [rng.standard_normal((4, 4))], tol=1e-3)
    assert rep.passed, str(rep)


def test_loss_descends_monotonically(rng):
    gt = rng.random((4, 4)) ** 3 + 0.01
    gt /= gt.sum()
    with precision(np.float64):
        z = parameter(rng.standard_normal((4, 4)))
        values = []
        for _ in range(20):
            z.grad = None
            s = softplus(z)
            L = loss(s / s.sum(), gt)
            L.backward()
            values.append(float(L.data))
            z.data -= 0.5 * z.grad
    assert all(b < a for a, b in zip(values, values[1:]))


def test_frame_reduction_modes(rng):
    gt = rng.random((2, 3, 4, 4)) + 0.1
    gt /= gt.sum(axis=(-2, -1), keepdims=True)
    pred = rng.random((2, 3, 4, 4)) + 0.1
    pred /= pred.sum(axis=(-2, -1), keepdims=True)
    with precision(np.float64):
        total = float(kld_loss(Tensor(pred), gt, frame_reduction="sum").data)
        mean = float(kld_loss(Tensor(pred), gt, frame_reduction="mean").data)
    per_frame = np.sum(gt * np.log(1e-7 + gt / (1e-7 + pred)), axis=(-2, -1))
    assert total == pytest.approx(per_frame.sum(axis=1).mean(), rel=1e-12)
    assert mean == pytest.approx(per_frame.mean(), rel=1e-12)


# ---------------------------------------------------------------- early stop


@pytest.mark.parametrize("history, expected", [
    ([0.5, 0.6, 0.7], False),
    ([0.7, 0.6, 0.5, 0.4], True),
    ([0.7, 0.6, 0.65, 0.6, 0.55], False),
    ([0.7, 0.6, 0.5], False),
    ([0.7, 0.7, 0.6, 0.5], False),
    ([0.9, 0.1, 0.8, 0.7, 0.6, 0.5], True),
])
def test_early_stop_examples(history, expected):
    assert early_stop(history, 3) is expected


def test_early_stop_never_before_patience_plus_one():
    for patience in (1, 2, 3, 5):
        falling = list(np.linspace(1, 0, patience))
        assert not early_stop(falling, patience)
        assert early_stop(falling + [-1.0], patience)


# ---------------------------------------------------------------- joint schedule


def test_schedule_single_domain_partition():
    batches = joint_schedule({"A": 8}, 4, seed=0)
    assert len(batches) == 2
    assert sorted(np.concatenate([b for _, b in batches]).tolist()) == list(range(8))


def test_schedule_two_domains_interleave():
    batches = joint_schedule({"A": 4, "B": 4}, 4, seed=0)
    assert sorted(d for d, _ in batches) == ["A", "B"]
    orders = {tuple(d for d, _ in joint_schedule({"A": 4, "B": 4}, 4, seed=s)) for s in range(20)}
    assert orders == {("A", "B"), ("B", "A")}


def test_schedule_determinism_and_ceil():
    a = joint_schedule({"A": 5, "B": 9}, 4, seed=7, epoch=2)
    b = joint_schedule({"A": 5, "B": 9}, 4, seed=7, epoch=2)
    assert [(d, i.tolist()) for d, i in a] == [(d, i.tolist()) for d, i in b]
    assert sum(d == "A" for d, _ in a) == 2 and sum(d == "B" for d, _ in a) == 3
    assert all(len(set(d for d, _ in [x])) == 1 for x in a)


def test_schedule_errors():
    with pytest.raises(ConfigurationError):
        joint_schedule({}, 4, 0)
    with pytest.raises(ConfigurationError):
        joint_schedule({"A": 0}, 4, 0)


def test_pool_map_keeps_mass(rng):
    m = rng.random((2, 8, 8))
    np.testing.assert_allclose(pool_map(m, 4).sum(axis=(-2, -1)), m.sum(axis=(-2, -1)))
    with pytest.raises(ConfigurationError):
        pool_map(m, 3)


def test_config_validation():
    for bad in (dict(lr0=0), dict(patience=0), dict(ablation="no_x"), dict(frame_reduction="max"), dict(max_epochs=-1)):
        with pytest.raises(ConfigurationError):
            TrainConfig(**bad).validate()


# ---------------------------------------------------------------- trainer


def params_of(model):
    return {k: v.data.copy() for k, v in model.named_parameters().items()}


def test_zero_epochs_returns_initial_checkpoint(tiny_data, tmp_path):
    res = train(tiny_cfg(max_epochs=0), tiny_data, model_cfg=small_model_cfg(), out_dir=tmp_path)
    assert res.history == []
    assert res.checkpoint.epoch == 0 and res.checkpoint.step == 0
    ref = Trainer(tiny_cfg(max_epochs=0), small_model_cfg(), tiny_data).checkpoint()
    for k, v in ref.tensors.items():
        np.testing.assert_array_equal(res.checkpoint.tensors[k], v)
    assert (tmp_path / "history.csv").read_text().strip() == ",".join(HISTORY_COLUMNS)
    assert (tmp_path / "checkpoint.bin").exists()


def test_epoch_zero_losses_are_reproducible(tiny_data):
    runs = [Trainer(tiny_cfg(max_epochs=1), small_model_cfg(), tiny_data) for _ in range(2)]
    losses = [r.run_epoch()[1] for r in runs]
    assert losses[0] == losses[1]
    assert all(math.isfinite(v) for v in losses[0])


def test_history_rows_and_csv(tiny_data, tmp_path):
    res = train(tiny_cfg(), tiny_data, model_cfg=small_model_cfg(), val_data=tiny_data, out_dir=tmp_path)
    assert [h["epoch"] for h in res.history] == [0, 1]
    assert res.history[1]["lr"] == pytest.approx(0.008)
    lines = (tmp_path / "history.csv").read_text().splitlines()
    assert lines[0].split(",") == list(HISTORY_COLUMNS) and len(lines) == 3
    assert all(math.isfinite(h["val_cc"]) for h in res.history)


def test_no_hmf_leaves_bank_untouched(tiny_data):
    tr = Trainer(tiny_cfg(ablation="no_hmf", max_epochs=1), small_model_cfg(), tiny_data)
    tr.run()
    assert tr.step_count > 0
    np.testing.assert_array_equal(tr.model.fusion.bank.slots.data, tr.initial_bank)
    assert tr.model.fusion.bank.pending is None


def test_full_model_moves_bank(tiny_data):
    tr = Trainer(tiny_cfg(max_epochs=1), small_model_cfg(), tiny_data)
    tr.run()
    assert np.any(tr.model.fusion.bank.slots.data != tr.initial_bank)


def test_early_stop_inside_run(tiny_data, monkeypatch):
    scores = iter([0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
    monkeypatch.setattr(Trainer, "validate", lambda self: dict.fromkeys(("auc_j", "sim", "kld", "nss"), 0.0) | {"cc": next(scores)})
    monkeypatch.setattr(Trainer, "run_epoch", lambda self: (1.0, [1.0]))
    tr = Trainer(tiny_cfg(max_epochs=10), small_model_cfg(), tiny_data, val_data=tiny_data)
    tr.run()
    assert len(tr.history) == 4


def test_checkpoint_bytes_round_trip(tiny_data, tmp_path):
    tr = Trainer(tiny_cfg(max_epochs=1, max_steps=2), small_model_cfg(), tiny_data)
    tr.run()
    ck = tr.checkpoint()
    path = tmp_path / "c.bin"
    ck.save(path)
    back = Checkpoint.load(path)
    assert back.to_bytes() == ck.to_bytes()
    assert back.domains == ["A", "B"] and back.step == 2
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == v.dtype
        np.testing.assert_array_equal(back.tensors[k], v)
    model = back.build_model()
    for k, v in params_of(model).items():
        np.testing.assert_array_equal(v, tr.model.named_parameters()[k].data)


def test_checkpoint_format_errors(tiny_data):
    raw = Trainer(tiny_cfg(max_epochs=0), small_model_cfg(), tiny_data).checkpoint().to_bytes()
    with pytest.raises(FormatError, match="byte 0"):
        Checkpoint.from_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(raw[:-3])
    with pytest.raises(FormatError, match="trailing"):
        Checkpoint.from_bytes(raw + b"\0")


@pytest.mark.parametrize("stop_at", [2, 3])  # epoch boundary and mid-epoch (2 batches per epoch)
def test_resume_reproduces_next_step(tiny_data, stop_at):
    mcfg = small_model_cfg()
    straight = Trainer(tiny_cfg(max_epochs=3, max_steps=stop_at + 1), mcfg, tiny_data)
    straight.run()
    first = Trainer(tiny_cfg(max_epochs=3, max_steps=stop_at), small_model_cfg(), tiny_data)
    first.run()
    ck = Checkpoint.from_bytes(first.checkpoint().to_bytes())
    resumed = Trainer(tiny_cfg(max_epochs=3, max_steps=stop_at + 1), small_model_cfg(), tiny_data, checkpoint=ck)
    resumed.run()
    assert resumed.step_count == straight.step_count == stop_at + 1
    a, b = params_of(straight.model), params_of(resumed.model)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)
    for k in straight.velocity:
        np.testing.assert_array_equal(straight.velocity[k], resumed.velocity[k])


def test_nan_loss_aborts_and_keeps_last_good(tiny_data, tmp_path, monkeypatch):
    real = training.kld_loss
    calls = {"n": 0}

    def flaky(pred, gt, **kw):
        calls["n"] += 1
        out = real(pred, gt, **kw)
        return out * math.nan if calls["n"] > 2 else out

    monkeypatch.setattr(training, "kld_loss", flaky)
    # 2 batches per epoch: epoch 0 completes, epoch 1 fails on its first step
    with pytest.raises(NumericError):
        train(tiny_cfg(max_epochs=3), tiny_data, model_cfg=small_model_cfg(), out_dir=tmp_path)
    ck = Checkpoint.load(tmp_path / "checkpoint.bin")
    assert ck.epoch == 1 and ck.step == 2
    assert all(np.all(np.isfinite(v)) for v in ck.tensors.values())
    assert len((tmp_path / "history.csv").read_text().splitlines()) == 2


def test_degenerate_ground_truth_is_skipped(tiny_data, caplog):
    data = {"A": list(tiny_data["A"])}
    bad = data["A"][0]
    data["A"][0] = type(bad)(bad.frames, np.zeros_like(bad.gt), bad.fixations, "A", bad.seq_id, bad.meta)
    tr = Trainer(tiny_cfg(max_epochs=1, batch_size=1), small_model_cfg(), data)
    with caplog.at_level("WARNING"):
        mean, losses = tr.run_epoch()
    assert len(losses) == 3 and math.isfinite(mean)
    assert "degenerate" in caplog.text


def test_trainer_rejects_empty_data():
    with pytest.raises(ConfigurationError):
        Trainer(tiny_cfg(), small_model_cfg(), {})
    with pytest.raises(ConfigurationError):
        Trainer(tiny_cfg(), small_model_cfg(), {"A": []})
