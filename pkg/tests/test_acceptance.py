"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line that is printed in an "acceptance"
section at the end of the pytest run. Criteria 5 to 10 measure the shipped
checkpoint with the shipped default configuration and take several minutes
on one core.
"""
import itertools
import time

import numpy as np
import pytest

from prospect_lab import nn
from prospect_lab.cli import main, run_suite
from prospect_lab.config import LabConfig
from prospect_lab.diffusion import (EMBED_ROWS, DiffusionModel, batch_loss_grad, make_schedule,
                                    predict_x0, q_sample)
from prospect_lab.eval import HOLDOUT_SEED
from prospect_lab.inversion import embedding_loss_grad
from prospect_lab.numerics import RngStream
from prospect_lab.spectral import dft2, naive_dft2
from prospect_lab.synth import ALL_LABELS, MAX_JITTER, SceneSpec, classify, render

from conftest import perturbed_params, record

DEFAULT = LabConfig.default()


# ---------------------------------------------------------------- 1
def test_forward_process():
    start = time.perf_counter()
    sched = make_schedule()
    rng = RngStream(101)
    worst_iter = worst_round = 0.0
    for i in range(100):
        r = rng.child(i)
        x0 = r.uniform((32, 32)) * 2 - 1
        t = int(r.integers(sched.T, 1)[0]) + 1
        x = x0.copy()
        acc = np.zeros_like(x0)
        zs = r.gaussian((t, 32, 32)).astype(np.float64)
        for s in range(1, t + 1):
            z = zs[s - 1]
            a = sched.alpha[s]
            x = np.sqrt(a) * x + np.sqrt(1 - a) * z
            acc = np.sqrt(a) * acc + np.sqrt(1 - a) * z
        z_eff = acc / np.sqrt(1 - sched.alpha_bar[t])
        worst_iter = max(worst_iter, float(np.abs(q_sample(x0, t, z_eff, sched) - x).max()))

        x0f = x0.astype(np.float32)
        zf = r.gaussian((32, 32))
        back = predict_x0(q_sample(x0f, t, zf, sched), t, zf, sched)
        worst_round = max(worst_round, float(np.abs(back - x0f).max()))
    elapsed = time.perf_counter() - start
    ok = worst_iter < 1e-4 and worst_round < 1e-4 and elapsed < 10
    record(1, ok, f"forward process: iterated vs closed form {worst_iter:.1e}, "
                  f"x0 round trip {worst_round:.1e} (tol 1e-4), {elapsed:.1f} s (< 10 s)")
    assert ok


# ---------------------------------------------------------------- 2
def test_dft():
    start = time.perf_counter()
    rng = RngStream(102)
    worst = sym = pars = 0.0
    for i in range(20):
        img = rng.child(i).uniform((32, 32)) * 2 - 1
        F = dft2(img).F
        ref = naive_dft2(img)
        worst = max(worst, float(np.abs(F - ref).max() / np.abs(ref).max()))
        pars = max(pars, abs(np.sum(img ** 2) - np.sum(np.abs(F) ** 2) / img.size) / np.sum(img ** 2))
        mirrored = F[(-np.arange(32)) % 32][:, (-np.arange(32)) % 32]
        sym = max(sym, float(np.abs(F - np.conj(mirrored)).max() / np.abs(F).max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and pars < 1e-6 and sym < 1e-6 and elapsed < 30
    record(2, ok, f"DFT vs naive double sum rel {worst:.1e}, Parseval rel {pars:.1e}, "
                  f"conjugate symmetry rel {sym:.1e} (tol 1e-6), {elapsed:.1f} s (< 30 s)")
    assert ok


# ---------------------------------------------------------------- 3
def _fd_rel(f, arr, grad, h=1e-3):
    num = np.zeros_like(arr)
    flat, nflat = arr.reshape(-1), num.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        lp = f()
        flat[j] = orig - h
        lm = f()
        flat[j] = orig
        nflat[j] = (lp - lm) / (2 * h)
    return float(np.linalg.norm(num - grad) / max(np.linalg.norm(num), 1e-12))


def test_gradients():
    start = time.perf_counter()
    cfg = nn.REDUCED
    sched = make_schedule()
    model = DiffusionModel.init(cfg, sched, RngStream(103))
    model.params = perturbed_params(cfg, seed=103)
    rng = RngStream(104)
    model.embed = rng.child(0).gaussian(model.embed.shape).astype(np.float64)
    model.null = rng.child(1).gaussian(model.d).astype(np.float64)
    b = 4
    x0 = rng.child(2).uniform((b, 8, 8)) * 2 - 1
    t = np.array([3, 250, 600, 990])
    z = rng.child(3).gaussian((b, 8, 8)).astype(np.float64)
    x_t = q_sample(x0, t, z, sched)
    rows = np.array([[EMBED_ROWS[(f, getattr(lab, f))] for f in ("layout", "content", "material")]
                     for lab in ALL_LABELS[:b]])
    drop = np.array([False, True, False, False])
    target = model.target(x0, t, z)
    _, grads, cache = batch_loss_grad(model, x_t, t, target, rows, drop)
    masks = cache["masks"]

    def train_loss():
        c = model.embed[rows].sum(axis=1)
        c[drop] = model.null
        return nn.mse_loss(model.params, cfg, x_t, t, c, target, relu_masks=masks)

    errs = {}
    for name in nn.param_names(cfg):
        errs[name] = _fd_rel(train_loss, model.params[name], grads[name])
    errs["embed.table"] = _fd_rel(train_loss, model.embed, grads["embed.table"])
    errs["embed.null"] = _fd_rel(train_loss, model.null, grads["embed.null"])

    # inversion loss w.r.t. the embedding, with a dropout mask applied
    p = rng.child(4).gaussian(model.d).astype(np.float64)
    scale = np.where(rng.child(5).uniform(model.d) >= 0.25, 1 / 0.75, 0.0)
    _, g = embedding_loss_grad(model, x0[0], 420, z[:1], p, scale)
    t1 = np.array([420])
    x01 = x0[:1].astype(np.float32)
    xt1, tg1 = q_sample(x01, t1, z[:1], sched), model.target(x01, t1, z[:1])
    inv_masks = nn.mse_loss_grad(model.params, cfg, xt1, t1, (p * scale)[None], tg1)[3]["masks"]
    errs["inversion p"] = _fd_rel(
        lambda: nn.mse_loss(model.params, cfg, xt1, t1, (p * scale)[None], tg1, relu_masks=inv_masks), p, g)
    elapsed = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-3 and elapsed < 300
    record(3, ok, f"gradients vs central differences: worst {worst} rel {errs[worst]:.1e} over "
                  f"{len(errs)} tensors (tol 1e-3), {elapsed:.1f} s (< 300 s)")
    assert ok


# ---------------------------------------------------------------- 4
def test_oracle_closure():
    start = time.perf_counter()
    grid = range(-MAX_JITTER, MAX_JITTER + 1)
    total = wrong = 0
    for lab in ALL_LABELS:
        for dx, dy, ds in itertools.chain([(0, 0, 0)], itertools.product(grid, grid, grid)):
            total += 1
            try:
                wrong += classify(render(SceneSpec(lab, 0, dx, dy, ds))) != lab
            except Exception:
                wrong += 1
    elapsed = time.perf_counter() - start
    ok = wrong == 0 and elapsed < 60
    record(4, ok, f"oracle closure: {total - wrong}/{total} renders classified exactly "
                  f"(48 base + full +-{MAX_JITTER} px grid), {elapsed:.1f} s (< 60 s)")
    assert ok


# ---------------------------------------------------------------- 5-10
def _suite(criterion, suite, trained_model, trials=None):
    ok, lines, _, _ = run_suite(suite, trained_model, DEFAULT, HOLDOUT_SEED, 1, trials)
    record(criterion, ok, f"{suite}: " + "; ".join(line.strip() for line in lines))
    return ok


@pytest.mark.slow
def test_conditioning_accuracy(trained_model):
    assert _suite(5, "accuracy", trained_model, 200)


@pytest.mark.slow
def test_frequency_progression(trained_model):
    assert _suite(6, "frequency", trained_model, 20)


@pytest.mark.slow
def test_stage_band_transfer(trained_model):
    assert _suite(7, "transfer", trained_model, 200)


@pytest.mark.slow
def test_broadcast_stage_frequency(trained_model):
    assert _suite(8, "broadcast", trained_model, 20)


@pytest.mark.slow
def test_inversion_fidelity(trained_model):
    assert _suite(9, "compare", trained_model, 10)


@pytest.mark.slow
def test_triple_mix(trained_model):
    assert _suite(10, "mix3", trained_model, 100)


# ---------------------------------------------------------------- 11
TINY = """\
model.channels = 4
model.mid_channels = 4
model.temb_dim = 8
model.cond_dim = 8
train.steps = 6
train.batch_size = 4
invert.iterations = 20
"""


def test_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("PROSPECT_LAB_THREADS", "1")
    (tmp_path / "tiny.cfg").write_text(TINY)
    cfg = tmp_path / "tiny.cfg"
    same = {}
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["gen-data", "--out", str(d / "data"), "--count", "30", "--seed", "5"]) == 0
        assert main(["train", "--data", str(d / "data"), "--config", str(cfg),
                     "--out", str(d / "m.psar")]) == 0
        assert main(["sample", "--model", str(d / "m.psar"), "--seed", "9", "--steps", "20",
                     "--label", "layout=BL,content=cross,material=vstripe", "--out", str(d / "s.pgm")]) == 0
        assert main(["invert", "--model", str(d / "m.psar"), "--image", str(d / "data" / "img_00003.pgm"),
                     "--mode", "prospect", "--config", str(cfg), "--out", str(d / "p.psar")]) == 0
        for jobs in ("1", "2"):
            main(["evaluate", "--model", str(tmp_path / "a" / "m.psar"), "--config", str(cfg),
                  "--suite", "accuracy", "--trials", "60", "--jobs", jobs,
                  "--out-dir", str(d / f"eval{jobs}")])
    files = ["data/manifest.csv", "data/img_00000.pgm", "data/img_00029.pgm", "m.psar", "m.loss.csv",
             "s.pgm", "p.psar", "p.loss.csv"]
    for f in files:
        same[f] = (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    for f in ("accuracy.csv", "accuracy.txt"):
        same[f"--jobs 1 vs 2 {f}"] = ((tmp_path / "a" / "eval1" / f).read_bytes()
                                      == (tmp_path / "a" / "eval2" / f).read_bytes())
    bad = [k for k, v in same.items() if not v]
    record(11, not bad, f"determinism: {len(same) - len(bad)}/{len(same)} outputs byte-identical"
                        + (f"; differing: {', '.join(bad)}" if bad else ""))
    assert not bad
