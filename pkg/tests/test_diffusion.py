import dataclasses

import numpy as np
import pytest

from prospect_lab import nn
from prospect_lab.diffusion import (ConditionGap, DiffusionModel, SamplerConfig, TrainConfig,
                                    constant_provider, ddim_sample, ddim_sample_batch, make_schedule,
                                    output_to_eps, predict_x0, q_sample, sample_timesteps, train,
                                    v_target)
from prospect_lab.numerics import RngStream
from prospect_lab.synth import ALL_LABELS, sample_dataset


def test_schedule_examples(sched):
    assert sched.alpha_bar[1] == pytest.approx(0.9999, abs=1e-12)
    assert np.all(np.diff(sched.alpha_bar[1:]) < 0)
    assert np.all(np.diff(sched.beta[1:]) > 0)
    assert 1e-5 < sched.alpha_bar[1000] < 1e-4


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (1000, 0.02, 1e-4), (1000, 0.0, 0.02),
                                  (1000, 1e-4, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_q_sample_special_cases(sched):
    x0 = RngStream(1).gaussian((32, 32))
    z = np.zeros_like(x0)
    out = q_sample(x0, 400, z, sched)
    np.testing.assert_allclose(out, np.sqrt(sched.alpha_bar[400]) * x0, rtol=1e-6)
    ident = dataclasses.replace(sched, alpha_bar=np.ones_like(sched.alpha_bar))
    assert np.array_equal(q_sample(x0, 7, RngStream(2).gaussian((32, 32)), ident), x0)
    for bad in (0, 1001):
        with pytest.raises(ValueError):
            q_sample(x0, bad, z, sched)


def test_closed_form_matches_iterated_noising(sched):
    rng = RngStream(11)
    worst = 0.0
    for i in range(100):
        r = rng.child(i)
        x0 = r.uniform((8, 8)) * 2 - 1
        t = int(r.integers(1000, 1)[0]) + 1
        x = x0.copy()
        acc = np.zeros_like(x0)  # noise accumulated along the chain
        for s in range(1, t + 1):
            z = r.gaussian((8, 8)).astype(np.float64)
            a = sched.alpha[s]
            x = np.sqrt(a) * x + np.sqrt(1 - a) * z
            acc = np.sqrt(a) * acc + np.sqrt(1 - a) * z
        z_eff = acc / np.sqrt(1 - sched.alpha_bar[t])
        worst = max(worst, float(np.abs(q_sample(x0, t, z_eff, sched) - x).max()))
    assert worst < 1e-4


def test_predict_x0_round_trip(sched):
    rng = RngStream(12)
    worst = 0.0
    for i in range(100):
        r = rng.child(i)
        x0 = (r.uniform((32, 32)) * 2 - 1).astype(np.float32)
        z = r.gaussian((32, 32))
        t = int(r.integers(1000, 1)[0]) + 1
        worst = max(worst, float(np.abs(predict_x0(q_sample(x0, t, z, sched), t, z, sched) - x0).max()))
    assert worst < 1e-4
    xt = RngStream(3).gaussian((4, 4))
    np.testing.assert_allclose(predict_x0(xt, 10, np.zeros_like(xt), sched),
                               xt / np.sqrt(sched.alpha_bar[10]), rtol=1e-6)
    assert np.abs(predict_x0(xt * 50, 900, np.zeros_like(xt), sched, clamp=True)).max() <= 1


def test_velocity_converts_back_to_noise(sched):
    rng = RngStream(13)
    x0 = (rng.child(0).uniform((5, 32, 32)) * 2 - 1).astype(np.float32)
    z = rng.child(1).gaussian((5, 32, 32))
    t = np.array([1, 10, 300, 700, 1000])
    x_t = q_sample(x0, t, z, sched)
    eps = output_to_eps(v_target(x0, t, z, sched), x_t, t, sched, "v")
    np.testing.assert_allclose(eps, z, atol=2e-5)
    np.testing.assert_allclose(predict_x0(x_t[:4], t[:4], eps[:4], sched), x0[:4], atol=2e-3)
    assert output_to_eps(z, x_t, t, sched, "eps") is z


def test_v_model_trains_and_round_trips(tmp_path, sched):
    cfg = dataclasses.replace(nn.REDUCED, prediction="v")
    res = train(_tiny_data(), TrainConfig(batch_size=4, steps=3), sched, RngStream(3), model_cfg=cfg)
    assert all(np.isfinite(res.losses))
    res.model.save(tmp_path / "v.psar")
    back = DiffusionModel.load(tmp_path / "v.psar")
    assert back.cfg.prediction == "v"
    x = RngStream(4).gaussian((8, 8))
    c = back.label_embedding(ALL_LABELS[0])
    np.testing.assert_allclose(back.predict_eps(x, 500, c), res.model.predict_eps(x, 500, c), atol=1e-6)
    with pytest.raises(ValueError):
        dataclasses.replace(nn.REDUCED, prediction="x0")


def test_predict_eps_contract(tiny_model):
    x = RngStream(4).gaussian((8, 8))
    c = tiny_model.label_embedding(ALL_LABELS[0])
    for t in (1, 500, 1000):
        e1 = tiny_model.predict_eps(x, t, c)
        assert e1.shape == x.shape
        assert np.array_equal(e1, tiny_model.predict_eps(x, t, c))


def _tiny_data(n=16):
    data = sample_dataset(n, RngStream(1), stratified=True)
    return [(img[::4, ::4].copy(), lab) for img, lab in data]  # 8x8 thumbnails for the reduced net


def test_train_with_zero_lr_leaves_params(sched):
    cfg = TrainConfig(lr=0.0, batch_size=4, steps=3)
    init = DiffusionModel.init(nn.REDUCED, sched, RngStream(42).child(0xC0FFEE))
    res = train(_tiny_data(), cfg, sched, RngStream(42), model_cfg=nn.REDUCED)
    for k in nn.param_names(nn.REDUCED):
        assert np.array_equal(res.model.params[k], init.params[k])
    assert np.array_equal(res.model.embed, init.embed)


def _first_losses(cfg, sched):
    return [train(_tiny_data(), TrainConfig(batch_size=32, steps=1), sched, RngStream(seed),
                  model_cfg=cfg).losses[0] for seed in range(8)]


def test_initial_loss_near_one(sched):
    # an untrained noise predictor outputs ~0, so the loss is E[z^2]
    losses = _first_losses(dataclasses.replace(nn.REDUCED, prediction="eps"), sched)
    assert 0.9 < np.mean(losses) < 1.1


def test_initial_velocity_loss(sched):
    # for a v model the untrained loss is E[abar z^2 + (1 - abar) x0^2]
    x0 = np.stack([img for img, _ in _tiny_data()]).astype(np.float64)
    ab = sched.alpha_bar[1:]
    expected = ab.mean() + (1 - ab).mean() * np.mean(x0 ** 2)
    losses = _first_losses(dataclasses.replace(nn.REDUCED, prediction="v"), sched)
    assert abs(np.mean(losses) - expected) < 0.1 * expected


def test_train_reproducible_and_rejects_empty(sched):
    cfg = TrainConfig(batch_size=4, steps=5, optimizer="adam")
    a = train(_tiny_data(), cfg, sched, RngStream(3), model_cfg=nn.REDUCED)
    b = train(_tiny_data(), cfg, sched, RngStream(3), model_cfg=nn.REDUCED)
    assert a.losses == b.losses
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in nn.param_names(nn.REDUCED))
    with pytest.raises(ValueError):
        train([], cfg, sched, RngStream(3), model_cfg=nn.REDUCED)


def test_train_config_validation():
    for kw in ({"steps": 0}, {"lr": -1}, {"cond_dropout": 1.0}, {"optimizer": "lbfgs"}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_sample_timesteps():
    taus = sample_timesteps(1000, 50)
    assert len(taus) == 50 and taus[0] == 1000 and taus[-1] == 20
    assert taus == sorted(set(taus), reverse=True)
    assert sample_timesteps(10, 10) == list(range(10, 0, -1))
    assert sample_timesteps(1000, 3) == [1000, 667, 333]


SMALL = SamplerConfig(steps=10, w=7.5)


def test_sampler_deterministic(tiny_model):
    c = constant_provider(tiny_model.label_embedding(ALL_LABELS[3]))
    a, _ = ddim_sample(tiny_model, c, SMALL, RngStream(5))
    b, _ = ddim_sample(tiny_model, c, SMALL, RngStream(5))
    assert np.array_equal(a, b)
    assert a.shape == (8, 8) and np.abs(a).max() <= 1


def test_guidance_zero_ignores_condition(tiny_model):
    cfg = dataclasses.replace(SMALL, w=0.0)
    a, _ = ddim_sample(tiny_model, constant_provider(tiny_model.label_embedding(ALL_LABELS[0])), cfg, RngStream(6))
    b, _ = ddim_sample(tiny_model, constant_provider(tiny_model.label_embedding(ALL_LABELS[40])), cfg, RngStream(6))
    assert np.array_equal(a, b)


def test_guidance_one_ignores_null(tiny_model):
    cfg = dataclasses.replace(SMALL, w=1.0)
    cond = constant_provider(tiny_model.label_embedding(ALL_LABELS[9]))
    other = dataclasses.replace(tiny_model, null=tiny_model.null + 3.0)
    a, _ = ddim_sample(tiny_model, cond, cfg, RngStream(7))
    b, _ = ddim_sample(other, cond, cfg, RngStream(7))
    assert np.array_equal(a, b)


def test_condition_gap(tiny_model):
    table = {t: tiny_model.null for t in sample_timesteps(1000, 10)[:-1]}
    with pytest.raises(ConditionGap, match="condition gap"):
        ddim_sample(tiny_model, table, SMALL, RngStream(1))
    with pytest.raises(ConditionGap):
        ddim_sample(tiny_model, lambda t: None, SMALL, RngStream(1))


def test_trajectory_record(tiny_model):
    cfg = dataclasses.replace(SMALL, record_trajectory=True)
    _, rec = ddim_sample(tiny_model, constant_provider(tiny_model.null), cfg, RngStream(2))
    assert len(rec) == 10
    assert rec.timesteps == sample_timesteps(1000, 10)
    assert all(np.abs(im).max() <= 1 for im in rec.images)


def test_batch_rows_match_their_own_seeds(tiny_model):
    cond = constant_provider(tiny_model.label_embedding(ALL_LABELS[1]))
    imgs, _ = ddim_sample_batch(tiny_model, [cond, cond], SMALL, [RngStream(1), RngStream(2)])
    assert not np.array_equal(imgs[0], imgs[1])


def test_sampler_config_validation(sched):
    for kw in ({"steps": 0}, {"steps": 1001}, {"w": -1}, {"eta": 2}):
        with pytest.raises(ValueError):
            SamplerConfig(**kw).check(sched.T)


def test_checkpoint_round_trip(tmp_path, tiny_model):
    m = dataclasses.replace(tiny_model, params={k: v.astype(np.float32) for k, v in tiny_model.params.items()})
    m.save(tmp_path / "m.psar")
    back = DiffusionModel.load(tmp_path / "m.psar")
    assert back.cfg == m.cfg
    assert all(np.array_equal(back.params[k], m.params[k]) for k in nn.param_names(nn.REDUCED))
    assert np.array_equal(back.embed, m.embed) and np.array_equal(back.null, m.null)
    assert back.sched.T == 1000
