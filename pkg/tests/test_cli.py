"""End-to-end runs of the command line on a tiny freshly trained model."""
import csv

import numpy as np
import pytest

from prospect_lab.cli import main
from prospect_lab.io import read_pgm, read_psar
from prospect_lab.spectrum import PromptSpectrum, load_spectrum, save_spectrum

TINY_CFG = """\
model.channels = 4
model.mid_channels = 4
model.temb_dim = 8
model.cond_dim = 8
train.steps = 4
train.batch_size = 4
invert.iterations = 12
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    root = tmp_path_factory.mktemp("lab")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert run("gen-data", "--out", root / "data", "--count", 12, "--seed", 3, "--stratified") == 0
    assert run("train", "--data", root / "data", "--config", root / "tiny.cfg",
               "--out", root / "m.psar") == 0
    return root


def test_gen_data_is_deterministic(tmp_path, lab):
    assert run("gen-data", "--out", tmp_path / "d", "--count", 12, "--seed", 3, "--stratified") == 0
    for name in ("manifest.csv", "img_00000.pgm", "img_00011.pgm"):
        assert (tmp_path / "d" / name).read_bytes() == (lab / "data" / name).read_bytes()
    with open(tmp_path / "d" / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 12
    assert list(rows[0])[:5] == ["index", "layout", "content", "material", "jitter_seed"]
    assert read_pgm(tmp_path / "d" / rows[0]["file"]).shape == (32, 32)
    assert run("gen-data", "--out", tmp_path / "e", "--count", 12, "--seed", 4) == 0
    assert (tmp_path / "e" / "img_00000.pgm").read_bytes() != (lab / "data" / "img_00000.pgm").read_bytes()


def test_gen_data_argument_errors(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--count", 0, "--seed", 1) == 1
    assert run("gen-data", "--count", 3, "--seed", 1) == 1
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("gen-data", "--out", blocker / "sub", "--count", 1, "--seed", 1) == 2


def test_train_outputs(lab, tmp_path):
    arrays = read_psar(lab / "m.psar")
    assert "embed.table" in arrays and "meta.config" in arrays
    assert arrays["embed.table"].shape[1] == 8
    lines = (lab / "m.loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss,ema_loss" and len(lines) == 5
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "x.psar") == 2
    (tmp_path / "bad.cfg").write_text("train.steps = 0\n")
    assert run("train", "--data", lab / "data", "--config", tmp_path / "bad.cfg",
               "--out", tmp_path / "x.psar") == 1


def test_sample_is_byte_identical(lab, tmp_path):
    args = ("sample", "--model", lab / "m.psar", "--steps", 10, "--seed", 7,
            "--label", "layout=TL,content=circle,material=checker")
    assert run(*args, "--out", tmp_path / "a.pgm") == 0
    assert run(*args, "--out", tmp_path / "b.pgm") == 0
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_null_plan_equals_unguided(lab, tmp_path):
    m = lab / "m.psar"
    assert run("sample", "--model", m, "--steps", 10, "--seed", 2, "--plan", "1-10:null",
               "--out", tmp_path / "p.pgm") == 0
    assert run("sample", "--model", m, "--steps", 10, "--seed", 2, "--w", 0,
               "--label", "layout=BR,content=cross,material=solid", "--out", tmp_path / "w.pgm") == 0
    assert (tmp_path / "p.pgm").read_bytes() == (tmp_path / "w.pgm").read_bytes()


def test_sample_usage_errors(lab, tmp_path):
    m = lab / "m.psar"
    out = tmp_path / "o.pgm"
    assert run("sample", "--model", m, "--seed", 1, "--out", out) == 1
    assert run("sample", "--model", m, "--seed", 1, "--out", out, "--label",
               "layout=TL,content=circle,material=solid", "--plan", "1-10:null") == 1
    assert run("sample", "--model", m, "--seed", 1, "--out", out, "--label", "layout=XX") == 1
    assert run("sample", "--model", m, "--seed", 1, "--out", out, "--plan", "1-5:null;4-10:null") == 1
    assert run("sample", "--model", tmp_path / "none.psar", "--seed", 1, "--out", out,
               "--plan", "1-10:null") == 2
    save_spectrum(tmp_path / "wide.psar", PromptSpectrum(np.zeros((10, 9))))
    assert run("sample", "--model", m, "--seed", 1, "--out", out, "--spectrum", tmp_path / "wide.psar") == 2


def test_trajectory_recording_and_analyze(lab, tmp_path):
    tdir = tmp_path / "traj"
    assert run("sample", "--model", lab / "m.psar", "--steps", 50, "--seed", 1, "--out", tmp_path / "s.pgm",
               "--label", "layout=TL,content=square,material=vstripe", "--record-trajectory", tdir) == 0
    steps = sorted(tdir.glob("step_*.pgm"))
    assert len(steps) == 50 and steps[0].name == "step_000_t1000.pgm"
    rows = (tdir / "trajectory.csv").read_text().splitlines()
    assert rows[0] == "step,t,hf_ratio" and len(rows) == 51
    assert run("analyze", "--trajectory", tdir, "--out", tmp_path / "curve.csv") == 0
    assert (tmp_path / "curve.csv").read_text().splitlines()[0] == "step,t,hf_ratio"


def test_analyze_edge_cases(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("analyze", "--trajectory", tmp_path / "empty", "--out", tmp_path / "c.csv") == 2
    assert run("analyze", "--trajectory", tmp_path / "nope", "--out", tmp_path / "c.csv") == 2
    flat = tmp_path / "flat"
    flat.mkdir()
    from prospect_lab.io import write_pgm
    for k in range(3):
        write_pgm(flat / f"step_{k:03d}_t{1000 - k:04d}.pgm", np.full((32, 32), 0.2))
    assert run("analyze", "--trajectory", flat, "--out", tmp_path / "c.csv") == 0
    body = (tmp_path / "c.csv").read_text().splitlines()[1:]
    assert body and all(line.endswith(",missing") for line in body)


def test_invert_and_mix(lab, tmp_path):
    m, img = lab / "m.psar", lab / "data" / "img_00000.pgm"
    cfg = lab / "tiny.cfg"
    assert run("invert", "--model", m, "--image", img, "--mode", "prospect", "--config", cfg,
               "--out", tmp_path / "p.psar") == 0
    assert run("invert", "--model", m, "--image", img, "--mode", "ti", "--config", cfg,
               "--out", tmp_path / "t.psar") == 0
    P, T = load_spectrum(tmp_path / "p.psar"), load_spectrum(tmp_path / "t.psar")
    assert (P.n, P.d) == (10, 8)
    assert np.array_equal(T.P, np.broadcast_to(T.P[0], T.P.shape))
    assert len((tmp_path / "p.loss.csv").read_text().splitlines()) == 13
    # default config has cond_dim 64, the tiny model 8
    assert run("invert", "--model", m, "--image", img, "--mode", "ti", "--out", tmp_path / "x.psar") == 2

    out = tmp_path / "mix.psar"
    assert run("mix", "--a", tmp_path / "p.psar", "--bands", "layout=a", "--out", out) == 0
    assert load_spectrum(out) == P
    assert run("mix", "--a", tmp_path / "p.psar", "--b", tmp_path / "t.psar",
               "--bands", "layout=a,content=a,material=b", "--out", out) == 0
    mixed = load_spectrum(out)
    assert np.array_equal(mixed.P[:7], P.P[:7]) and np.array_equal(mixed.P[7:], T.P[7:])
    assert run("mix", "--a", tmp_path / "p.psar", "--bands", "material=b", "--out", out) == 1
    assert run("mix", "--a", tmp_path / "p.psar", "--bands", "colour=a", "--out", out) == 1
    save_spectrum(tmp_path / "short.psar", PromptSpectrum(np.zeros((9, 8))))
    assert run("mix", "--a", tmp_path / "p.psar", "--b", tmp_path / "short.psar",
               "--bands", "material=b", "--out", out) == 2


def test_evaluate_reports_threshold_failure(lab, tmp_path, capsys):
    code = run("evaluate", "--model", lab / "m.psar", "--config", lab / "tiny.cfg",
               "--suite", "accuracy", "--trials", 4, "--out-dir", tmp_path)
    out = capsys.readouterr().out
    assert code == 3
    assert "result: FAIL" in out and "suite: accuracy" in out
    assert (tmp_path / "accuracy.csv").is_file() and (tmp_path / "accuracy.txt").is_file()
    assert run("evaluate", "--model", lab / "m.psar", "--suite", "nonsense") == 1
