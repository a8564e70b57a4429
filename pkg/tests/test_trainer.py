"""Optimizer, clipping, schedule, checkpoints, resumable training and evaluation."""

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecnet.checkpoint import (MAGIC, VERSION, Checkpoint, CheckpointError, load_checkpoint, load_state,
                              save_checkpoint, state_dict)
from ecnet.data import make_synthetic_pairs
from ecnet.losses import LossWeights, PSNR_CAP
from ecnet.models import EcNet, NetworkConfig, RainAutoencoder
from ecnet.tensor import Tensor
from ecnet.trainer import (AdamState, NonFiniteError, TrainConfig, Trainer, adam_step, clip_gradients, evaluate,
                           global_norm, load_model, lr_at, pad_to_multiple, save_model, train_autoencoder,
                           train_ecnet)

DESK = (8, 16, 32, 64)


def param(value, grad):
    p = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
    p.grad = np.asarray(grad, dtype=np.float64)
    return p


@pytest.fixture(scope="module")
def pairs():
    return make_synthetic_pairs(8, (24, 24), seed=21)


def small_config(**kw):
    base = TrainConfig(epochs=20, decay_epochs=(10,), batch=4, patch=16, seed=3)
    return replace(base, **kw)


# ---------------------------------------------------------------- Adam

def test_adam_first_step_hand_value():
    p = param([0.0], [1.0])
    adam_step({"p": p}, AdamState(), lr=0.1)
    assert abs(p.data[0] - (-0.1)) < 1e-6
    np.testing.assert_array_equal(p.grad, [1.0])


def test_adam_zero_gradient_keeps_parameters():
    p = param(np.arange(4.0), np.zeros(4))
    adam_step({"p": p}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, np.arange(4.0))


def test_adam_no_cross_talk():
    a, b = param([1.0, 2.0], [0.5, -2.0]), param([3.0], [0.0])
    alone = param([1.0, 2.0], [0.5, -2.0])
    state = AdamState()
    adam_step({"a": a, "b": b}, state, lr=0.01)
    adam_step({"a": alone}, AdamState(), lr=0.01)
    np.testing.assert_array_equal(a.data, alone.data)
    assert b.data[0] == 3.0 and state.step == 1


def test_adam_rejects_bad_gradients():
    p = param([0.0, 0.0], [1.0, np.nan])
    with pytest.raises(NonFiniteError, match="p"):
        adam_step({"p": p}, AdamState(), 0.1)
    q = param([0.0, 0.0], [1.0])
    with pytest.raises(ValueError):
        adam_step({"q": q}, AdamState(), 0.1)


def test_adam_bias_correction_matches_reference():
    rng = np.random.default_rng(0)
    theta = rng.standard_normal(5)
    grads = rng.standard_normal((4, 5))
    p = param(theta.copy(), grads[0])
    state = AdamState()
    m = v = np.zeros(5)
    ref = theta.copy()
    for t, g in enumerate(grads, 1):
        p.grad = g.copy()
        adam_step({"p": p}, state, 1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


# ---------------------------------------------------------------- clipping

def test_clip_norm_ten_to_five():
    params = {"a": param([0.0, 0.0], [6.0, 8.0])}
    scale, norm = clip_gradients(params, 5.0)
    assert scale == 0.5 and norm == 10.0
    assert global_norm(params) == pytest.approx(5.0, abs=1e-12)


def test_clip_below_threshold_untouched():
    params = {"a": param([0.0], [3.0]), "b": param([0.0], [4.0])}
    scale, norm = clip_gradients(params, 5.0)
    assert scale == 1.0 and norm == 5.0
    assert params["a"].grad[0] == 3.0 and params["b"].grad[0] == 4.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_clip_bounds_norm(seed):
    rng = np.random.default_rng(seed)
    params = {f"p{k}": param(np.zeros(n), rng.standard_normal(n) * rng.uniform(0.01, 20))
              for k, n in enumerate(rng.integers(1, 30, rng.integers(1, 6)))}
    before = {k: p.grad.copy() for k, p in params.items()}
    scale, norm = clip_gradients(params, 5.0)
    assert global_norm(params) <= 5.0 * (1 + 1e-12)
    assert 0 < scale <= 1
    for k, p in params.items():
        np.testing.assert_allclose(p.grad, before[k] * scale, rtol=1e-15)


# ---------------------------------------------------------------- schedule

def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert lr_at(10, cfg) == pytest.approx(1e-3, rel=1e-12)
    assert lr_at(24, cfg) == pytest.approx(1e-3, rel=1e-12)
    assert lr_at(25, cfg) == pytest.approx(2e-4, rel=1e-12)
    assert lr_at(26, cfg) == pytest.approx(2e-4, rel=1e-12)
    assert lr_at(51, cfg) == pytest.approx(4e-5, rel=1e-12)
    assert lr_at(76, cfg) == pytest.approx(8e-6, rel=1e-12)
    for bad in (0, 101):
        with pytest.raises(ValueError):
            lr_at(bad, cfg)


def test_train_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(decay_epochs=(50, 25))
    with pytest.raises(ValueError):
        TrainConfig(epochs=20)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    cfg = TrainConfig(weights=LossWeights(stages=[1.0, 2.0]))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    short = cfg.with_epochs(8)
    assert short.epochs == 8 and short.decay_epochs == (2, 4, 6)


# ---------------------------------------------------------------- checkpoint archive

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b": rng.standard_normal(4),
               "scalar": np.array(2.5, dtype=np.float32)}
    save_checkpoint(tmp_path / "c.ckpt", Checkpoint({"x": [1, 2]}, tensors))
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.meta == {"x": [1, 2]} and list(back.tensors) == list(tensors)
    for k in tensors:
        assert back.tensors[k].dtype == tensors[k].dtype
        np.testing.assert_array_equal(back.tensors[k], tensors[k])
    assert (tmp_path / "c.ckpt").read_bytes()[:4] == MAGIC


def test_checkpoint_rejections(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, Checkpoint({}, {"a": np.zeros(3, np.float32)}))
    buf = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic")
    (tmp_path / "ver").write_bytes(buf[:4] + (VERSION + 1).to_bytes(4, "little") + buf[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver")
    (tmp_path / "trunc").write_bytes(buf[:-1])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "trunc")
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "int", Checkpoint({}, {"a": np.zeros(2, np.int32)}))


def test_model_state_round_trip_and_unknown_names(tmp_path):
    ae = RainAutoencoder(DESK, seed=4)
    save_model(tmp_path / "ae.ckpt", ae)
    back = load_model(tmp_path / "ae.ckpt")
    for k, p in ae.parameters().items():
        np.testing.assert_array_equal(back.parameters()[k].data, p.data)
    tensors = state_dict(ae)
    tensors["model.bogus"] = np.zeros(1, np.float32)
    with pytest.raises(CheckpointError, match="unknown"):
        load_state(RainAutoencoder(DESK), tensors)
    tensors = state_dict(ae)
    del tensors["model.decoder.head.b"]
    with pytest.raises(CheckpointError, match="lacks"):
        load_state(RainAutoencoder(DESK), tensors)


# ---------------------------------------------------------------- training loops

def params_of(model):
    return {k: p.data.copy() for k, p in model.parameters().items()}


def test_resume_reproduces_uninterrupted_run(tmp_path, pairs):
    cfg = small_config(epochs=40, decay_epochs=(5,))
    net_cfg = NetworkConfig(DESK, stages=2, seed=2)
    teacher = RainAutoencoder(DESK, seed=9)

    full = Trainer(EcNet(net_cfg), cfg, pairs, teacher)
    full.run(50)

    part = Trainer(EcNet(net_cfg), cfg, pairs, teacher)
    part.run(23)
    part.save(tmp_path / "mid.ckpt")
    resumed = Trainer.resume(tmp_path / "mid.ckpt", pairs, teacher)
    assert resumed.iteration == 23
    resumed.run(50)

    a, b = params_of(full.model), params_of(resumed.model)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert [r["total"] for r in full.log[23:]] == [r["total"] for r in resumed.log]
    for k in full.adam.m:
        np.testing.assert_array_equal(full.adam.m[k], resumed.adam.m[k])


def test_training_is_deterministic(pairs):
    cfg = small_config()
    _, a = train_autoencoder(pairs, cfg, DESK, max_iterations=6)
    _, b = train_autoencoder(pairs, cfg, DESK, max_iterations=6)
    assert [r["total"] for r in a.log] == [r["total"] for r in b.log]


def test_teacher_is_frozen_and_log_recomposes(tmp_path, pairs):
    ae = RainAutoencoder(DESK, seed=5)
    before = params_of(ae)
    weights = LossWeights()
    net, tr = train_ecnet(pairs, ae, small_config(weights=weights), NetworkConfig(DESK, stages=3, seed=1),
                          out_dir=tmp_path, max_iterations=4)
    for k, v in params_of(ae).items():
        np.testing.assert_array_equal(v, before[k])
    sw = weights.stage_weights(3)
    for rec in tr.log:
        for parts, total in zip(rec["components"], rec["stage_totals"]):
            recomposed = weights.embed * parts["embed"] + weights.att * parts["att"] + weights.image * parts["image"]
            assert abs(recomposed - total) < 1e-6
        assert abs(sum(w * t for w, t in zip(sw, rec["stage_totals"])) - rec["total"]) < 1e-6
    lines = (tmp_path / "ecnet_train.log").read_text().splitlines()
    assert lines[0].startswith("#") and len(lines) == 5
    fields = lines[1].split("\t")
    assert len(fields) == 1 + 3 + 4 and int(fields[0]) == 1
    assert (tmp_path / "ecnet.ckpt").is_file()


def test_frozen_decoder_only_trains_projections(pairs):
    cfg = small_config(freeze_decoder=True)
    net = EcNet(NetworkConfig(DESK, stages=1, recurrent=False, layered_lstm=False, seed=3))
    before = params_of(net)
    tr = Trainer(net, cfg, pairs)
    tr.run(2)
    after = params_of(net)
    assert all(np.array_equal(after[k], before[k]) for k in after if k.startswith("decoder.")
               and not k.startswith("decoder.proj."))
    assert any(not np.array_equal(after[k], before[k]) for k in after if k.startswith("encoder."))


def test_ae_loss_decreases_over_first_epochs(pairs):
    drops = []
    for seed in range(3):
        _, tr = train_autoencoder(pairs, small_config(seed=seed, ae_epochs=10, ae_plateau_epochs=0), DESK)
        per_epoch = np.array([r["total"] for r in tr.log]).reshape(10, -1).mean(axis=1)
        drops.append(per_epoch[0] - per_epoch[-1])
    assert np.median(drops) > 0


def test_callback_stops_training(pairs):
    _, tr = train_autoencoder(pairs, small_config(), DESK, callback=lambda t, rec: rec["iter"] >= 3)
    assert tr.iteration == 3 and tr.stopped_early


def test_non_finite_loss_aborts_with_checkpoint(tmp_path, pairs):
    ae = RainAutoencoder(DESK, seed=1)
    ae.decoder.head.b.data[0] = np.nan
    tr = Trainer(ae, small_config(), pairs, out_dir=tmp_path)
    with pytest.raises(NonFiniteError) as err:
        tr.step()
    assert err.value.iteration == 1 and len(err.value.batch) == 4
    assert (tmp_path / "last_good.ckpt").is_file()


def test_trainer_input_checks(pairs):
    with pytest.raises(ValueError):
        Trainer(RainAutoencoder(DESK), small_config(patch=32), pairs)
    with pytest.raises(ValueError):
        Trainer(RainAutoencoder(DESK), small_config(patch=12), pairs)
    with pytest.raises(ValueError):
        Trainer(RainAutoencoder(DESK), small_config(), [])


# ---------------------------------------------------------------- evaluation

def test_padding_reflects_and_crops():
    x = np.random.default_rng(0).random((1, 3, 13, 10))
    xp, (h, w) = pad_to_multiple(x, 8)
    assert xp.shape == (1, 3, 16, 16) and (h, w) == (13, 10)
    np.testing.assert_array_equal(xp[:, :, :13, :10], x)
    np.testing.assert_array_equal(xp[:, :, 13, :10], x[:, :, 11])


def test_gt_against_gt_hits_the_caps(pairs):
    from ecnet.trainer import image_metrics, summarize

    rows = [image_metrics(p.name, p.background, p.background) for p in pairs]
    assert all(r["psnr"] == PSNR_CAP and r["ssim"] == pytest.approx(1.0, abs=1e-12) for r in rows)
    summary = summarize(rows)
    assert summary["mean_psnr"] == PSNR_CAP


def test_evaluate_full_images(pairs):
    odd = make_synthetic_pairs(3, (21, 27), seed=2)
    net = EcNet(NetworkConfig(DESK, stages=2, seed=4))
    a = evaluate(net, odd)
    b = evaluate(net, odd)
    assert a == b and len(a["per_image"]) == 3
    assert a["mean_psnr"] == pytest.approx(np.mean([r["psnr"] for r in a["per_image"]]), abs=1e-12)
    assert a["mean_ssim"] == pytest.approx(np.mean([r["ssim"] for r in a["per_image"]]), abs=1e-12)
    y = evaluate(net, odd, y_channel=True)
    assert y["mean_psnr"] != a["mean_psnr"]
