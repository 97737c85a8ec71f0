"""prospect-lab command line.

Exit codes: 0 success, 1 usage or config error, 2 runtime or data error,
3 an evaluate suite missed its threshold.
"""
from __future__ import annotations

import argparse
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__, shipped
from .config import ConfigError, LabConfig, load_config
from .diffusion import DiffusionModel, SamplerConfig, ddim_sample, train
from .eval import (HOLDOUT_SEED, attribute_accuracy, broadcast_hf, calibrate_bands,
                   compare_inversions, frequency_progression, holdout_set, mix_triple,
                   TransferReport, resolve_jobs, run_mix3, run_transfer, stratified_labels)
from .inversion import invert
from .io import FormatError, read_csv, read_pgm, str_to_array, write_csv, write_pgm, write_psar
from .numerics import RngStream
from .spectral import (ZeroEnergyError, curve_spearman, image_hf_ratio, trajectory_rows,
                       write_curve_csv)
from .spectrum import (AttributeBands, PlanError, StageSchedule, assemble, condition_provider,
                       label_spectrum, load_spectrum, parse_plan, plan_to_spectrum, save_spectrum)
from .synth import FACTORS, AttributeLabel, render, sample_specs

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _config(path) -> LabConfig:
    return load_config(path) if path else LabConfig.default()


def _model(path) -> DiffusionModel:
    p = Path(path) if path else shipped.model_path()
    if not p.is_file():
        raise FileNotFoundError(f"model file not found: {p}")
    return DiffusionModel.load(p)


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------

MANIFEST = "manifest.csv"
MANIFEST_HEADER = ["index", "layout", "content", "material", "jitter_seed", "file", "dx", "dy", "ds"]


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror}") from None
    specs = sample_specs(args.count, RngStream(args.seed, 0xDA7A), stratified=args.stratified)
    rows = []
    for i, spec in enumerate(specs):
        name = f"img_{i:05d}.pgm"
        write_pgm(out / name, render(spec))
        lab = spec.label
        rows.append((i, lab.layout, lab.content, lab.material, spec.jitter_seed, name,
                     spec.dx, spec.dy, spec.ds))
    write_csv(out / MANIFEST, MANIFEST_HEADER, rows)
    print(f"wrote {len(rows)} images to {out}")
    return EXIT_OK


def read_dataset(path) -> list:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    man = d / MANIFEST
    if not man.is_file():
        raise FileNotFoundError(f"manifest not found: {man}")
    data = []
    for row in read_csv(man):
        lab = AttributeLabel(row["layout"], row["content"], row["material"])
        data.append((read_pgm(d / row["file"]), lab))
    if not data:
        raise ValueError(f"empty dataset: {d}")
    return data


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args.config)
    data = read_dataset(args.data)
    tcfg = cfg.train_config()
    seed = cfg["train.seed"] if args.seed is None else args.seed
    ema = []

    def progress(step, loss):
        ema.append(loss if not ema else 0.99 * ema[-1] + 0.01 * loss)
        if args.verbose and (step + 1) % 500 == 0:
            print(f"step {step + 1}/{tcfg.steps} ema_loss {ema[-1]:.5f}", flush=True)

    res = train(data, tcfg, cfg.schedule(), RngStream(seed), model_cfg=cfg.model_config(),
                progress=progress)
    arrays = res.model.state_arrays()
    arrays["meta.config"] = str_to_array(cfg.serialize())
    arrays["meta.seed"] = np.array(seed, dtype=np.float32)
    out = Path(args.out)
    write_psar(out, arrays)
    write_csv(out.with_suffix(".loss.csv"), ["step", "loss", "ema_loss"],
              [(k, repr(l), repr(e)) for k, (l, e) in enumerate(zip(res.losses, ema))])
    print(f"final ema_loss {ema[-1]:.6f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# sample
# --------------------------------------------------------------------------

def cmd_sample(args) -> int:
    sources = [s for s in (args.label, args.plan, args.spectrum) if s is not None]
    if len(sources) != 1:
        raise UsageError("give exactly one of --label, --plan, --spectrum")
    model = _model(args.model)
    n = args.stages
    if args.label is not None:
        try:
            label = AttributeLabel.parse(args.label)
        except ValueError as exc:
            raise UsageError(f"--label: {exc}") from None
        spectrum = label_spectrum(model, label, n)
    elif args.plan is not None:
        spectrum = plan_to_spectrum(parse_plan(args.plan, n), model, n)
    else:
        spectrum = load_spectrum(args.spectrum)
        if spectrum.d != model.d:
            raise ValueError(f"{args.spectrum}: embedding dimension {spectrum.d} != model {model.d}")
    sched = StageSchedule(model.sched.T, spectrum.n)
    sampler = SamplerConfig(args.steps, args.w, 0.0, args.record_trajectory is not None)
    img, traj = ddim_sample(model, condition_provider(spectrum, sched, model), sampler,
                            RngStream(args.seed))
    write_pgm(args.out, img)
    if traj is not None:
        tdir = Path(args.record_trajectory)
        tdir.mkdir(parents=True, exist_ok=True)
        for k, (t, x0) in enumerate(traj.steps):
            write_pgm(tdir / f"step_{k:03d}_t{t:04d}.pgm", x0)
        write_curve_csv(tdir / "trajectory.csv", trajectory_rows(traj))
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# invert / mix
# --------------------------------------------------------------------------

def cmd_invert(args) -> int:
    cfg = _config(args.config)
    model = _model(args.model)
    if cfg["model.cond_dim"] != model.d:
        raise ValueError(f"config model.cond_dim = {cfg['model.cond_dim']} but model has d = {model.d}")
    img = read_pgm(args.image)
    if img.shape != (model.cfg.image_size,) * 2:
        raise ValueError(f"{args.image}: expected {model.cfg.image_size}x{model.cfg.image_size} image")
    inv = cfg.inversion_config(args.mode)
    if args.seed is not None:
        inv = type(inv)(inv.mode, inv.iterations, inv.lr, inv.dropout, inv.init, args.seed,
                        inv.stages, inv.optimizer)
    res = invert(model, [img], inv)
    out = Path(args.out)
    res.save(out, out.with_suffix(".loss.csv"))
    print(f"wrote {out} (final ema_loss {res.ema_loss[-1]:.6f})")
    return EXIT_OK


_BAND_SPEC = re.compile(r"^\s*(layout|content|material)\s*=\s*([abc])\s*$")


def parse_band_sources(text: str) -> dict:
    out = {}
    for part in text.split(","):
        m = _BAND_SPEC.match(part)
        if not m:
            raise UsageError(f"bad --bands entry {part!r}; expected factor=a|b|c")
        if m.group(1) in out:
            raise UsageError(f"factor {m.group(1)} given twice in --bands")
        out[m.group(1)] = m.group(2)
    return out


def cmd_mix(args) -> int:
    choice = parse_band_sources(args.bands)
    files = {"a": args.a, "b": args.b, "c": args.c}
    for f in FACTORS:
        choice.setdefault(f, "a")
    for f, src in choice.items():
        if files[src] is None:
            raise UsageError(f"--bands uses source {src} for {f} but --{src} was not given")
    spectra = {k: load_spectrum(p) for k, p in files.items() if p is not None}
    ref = spectra["a"]
    for k, sp in spectra.items():
        if (sp.n, sp.d) != (ref.n, ref.d):
            raise ValueError(f"{files[k]}: shape {sp.n}x{sp.d} does not match {files['a']} ({ref.n}x{ref.d})")
    bands = _config(args.config).bands() if args.config else AttributeBands().validate(ref.n)
    mixed = assemble(bands, spectra[choice["layout"]], spectra[choice["content"]],
                     spectra[choice["material"]])
    save_spectrum(args.out, mixed)
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# analyze
# --------------------------------------------------------------------------

_STEP_FILE = re.compile(r"^step_(\d+)_t(\d+)\.pgm$")


def cmd_analyze(args) -> int:
    tdir = Path(args.trajectory)
    if not tdir.is_dir():
        raise FileNotFoundError(f"trajectory directory not found: {tdir}")
    entries = sorted((int(m.group(1)), int(m.group(2)), p) for p in tdir.iterdir()
                     if (m := _STEP_FILE.match(p.name)))
    if not entries:
        raise ValueError(f"empty trajectory directory: {tdir}")
    rows = []
    for k, t, p in entries:
        try:
            ratio = image_hf_ratio(read_pgm(p), args.cutoff)
        except ZeroEnergyError:
            ratio = None
        rows.append((k, t, ratio))
    write_curve_csv(args.out, rows)
    curve = [(k, r) for k, _, r in rows if r is not None]
    missing = len(rows) - len(curve)
    rho = curve_spearman(curve) if len(curve) >= 2 else float("nan")
    print(f"{len(rows)} steps, {missing} missing, spearman {rho:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

SUITES = ("accuracy", "transfer", "mix3", "calibrate", "compare", "frequency", "broadcast")


def _check(lines, name, value, op, threshold) -> bool:
    ok = value >= threshold if op == ">=" else value <= threshold
    ok = ok and not (isinstance(value, float) and math.isnan(value))
    lines.append(f"{'PASS' if ok else 'FAIL'} {name} = {value:.4f} ({op} {threshold})")
    return ok


def run_suite(suite: str, model: DiffusionModel, cfg: LabConfig, seed: int, jobs: int,
              trials: int | None = None):
    """Returns (passed, summary lines, csv header, csv rows)."""
    sampler = cfg.sampler_config()
    bands = cfg.bands()
    n = cfg["stages.n"]
    rng = RngStream(seed, 0xE7A1)
    lines, ok = [], True
    if suite == "accuracy":
        count = trials or 200
        rep = attribute_accuracy(model, stratified_labels(count), 1, sampler, rng, jobs)
        for f in FACTORS:
            ok &= _check(lines, f"accuracy.{f}", rep.accuracy(f), ">=", cfg["eval.accuracy_min"])
            lines.append(f"  oracle errors ({f}): {rep.oracle_errors(f)}")
        return ok, lines, rep.header, rep.rows()
    if suite == "transfer":
        count = trials or 200
        rows = []
        cases = (("material", AttributeLabel("TL", "circle", "solid"),
                  AttributeLabel("TL", "circle", "checker"), "layout"),
                 ("layout", AttributeLabel("TL", "circle", "checker"),
                  AttributeLabel("BR", "circle", "checker"), "material"))
        for k, (factor, a, b, keep) in enumerate(cases):
            rep = run_transfer(model, a, b, bands.band(factor), count, sampler, rng.child(k), jobs, n)
            ok &= _check(lines, f"{factor}_swap.target", rep.target_rate, ">=", cfg["eval.transfer_min"])
            ok &= _check(lines, f"{factor}_swap.retain.{keep}", rep.retention(keep), ">=",
                         cfg["eval.transfer_min"])
            lines.append(f"  oracle errors: {rep.oracle_errors}/{rep.trials}")
            rows += [(factor,) + r for r in rep.rows()]
        return ok, lines, ("swap",) + TransferReport.header, rows
    if suite == "mix3":
        triple = mix_triple()
        inv = cfg.inversion_config("prospect")
        spectra = [invert(model, [img], inv).spectrum for img, _ in triple]
        rep = run_mix3(model, spectra, [lab for _, lab in triple], bands, trials or 100, sampler,
                       rng, jobs)
        ok &= _check(lines, "mix3.all_three", rep.target_rate, ">=", cfg["eval.mix3_min"])
        lines.append(f"  oracle errors: {rep.oracle_errors}/{rep.trials}")
        return ok, lines, rep.header, rep.rows()
    if suite == "calibrate":
        cal = calibrate_bands(model, trials or 20, sampler, rng, n, jobs)
        best = cal.best
        lines.append(f"best partition: {best.as_text()}")
        ok &= _check(lines, "best.material_start", float(best.material[0]), ">=", 7.0)
        return ok, lines, cal.header, cal.rows()
    if suite == "compare":
        inv = cfg.inversion_config()
        ratios, psnrs, rows = [], [], []
        for k, (img, lab) in enumerate(holdout_set(trials or 10)):
            cmp = compare_inversions(model, img, lab, inv, sampler, rng.child(k), bands, 20, jobs)
            ratios.append(cmp.mse_ratio)
            psnrs.append(cmp.prospect.psnr)
            rows.append((k, lab.as_text(), repr(cmp.ti.mse), repr(cmp.prospect.mse),
                         f"{cmp.ti.psnr:.3f}", f"{cmp.prospect.psnr:.3f}",
                         f"{cmp.ti_edit.target_rate:.4f}", f"{cmp.prospect_edit.target_rate:.4f}"))
        ok &= _check(lines, "median mse ratio prospect/ti", float(np.median(ratios)), "<=",
                     cfg["eval.fidelity_ratio_max"])
        ok &= _check(lines, "median prospect psnr", float(np.median(psnrs)), ">=", cfg["eval.psnr_min_db"])
        return ok, lines, ("image", "label", "ti_mse", "prospect_mse", "ti_psnr", "prospect_psnr",
                           "ti_edit_target", "prospect_edit_target"), rows
    if suite == "frequency":
        labels = stratified_labels(48)[::max(1, 48 // (trials or 20))][:trials or 20]
        rhos = frequency_progression(model, labels, sampler, rng, cfg["analysis.cutoff"], jobs)
        ok &= _check(lines, "mean spearman", float(np.nanmean(rhos)), ">=", cfg["eval.spearman_min"])
        return ok, lines, ("trajectory", "spearman"), [(k, f"{r:.4f}") for k, r in enumerate(rhos)]
    if suite == "broadcast":
        inv = cfg.inversion_config("prospect")
        rows, late_all, early_all = [], [], []
        for k, (img, lab) in enumerate(holdout_set(10)):
            sp = invert(model, [img], inv).spectrum
            late, early = broadcast_hf(model, sp, trials or 20, sampler, rng.child(k),
                                       cfg["analysis.cutoff"], jobs)
            late_all.append(late)
            early_all.append(early)
            rows.append((k, lab.as_text(), f"{late:.5f}", f"{early:.5f}"))
        diff = float(np.mean(late_all) - np.mean(early_all))
        ok &= _check(lines, "mean hf(last stage) - mean hf(first stage)", diff, ">=", 1e-12)
        return ok, lines, ("image", "label", "hf_last_stage", "hf_first_stage"), rows
    raise UsageError(f"unknown suite {suite!r}")


def cmd_evaluate(args) -> int:
    cfg = _config(args.config)
    model = _model(args.model)
    jobs = resolve_jobs(args.jobs)
    ok, lines, header, rows = run_suite(args.suite, model, cfg, args.seed, jobs, args.trials)
    meta = [f"suite: {args.suite}", f"seed: {args.seed}", f"config: {cfg.digest()}",
            f"model: {args.model or 'shipped'}", f"trials: {args.trials or 'default'}"]
    text = "\n".join(meta + lines + [f"result: {'PASS' if ok else 'FAIL'}"]) + "\n"
    print(text, end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / f"{args.suite}.csv", header, rows)
        (out / f"{args.suite}.txt").write_text(text)
    return EXIT_OK if ok else EXIT_THRESHOLD


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prospect-lab", description="Per-stage prompt conditioning lab on a toy diffusion model.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=_positive, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--stratified", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the denoiser and label embeddings")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw one image")
    s.add_argument("--model")
    s.add_argument("--steps", type=_positive, default=50)
    s.add_argument("--w", type=float, default=7.5)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--label")
    s.add_argument("--plan")
    s.add_argument("--spectrum")
    s.add_argument("--stages", type=_positive, default=10)
    s.add_argument("--record-trajectory", metavar="DIR")
    s.set_defaults(func=cmd_sample)

    i = sub.add_parser("invert", help="recover a spectrum from an image")
    i.add_argument("--model")
    i.add_argument("--image", required=True)
    i.add_argument("--mode", choices=("prospect", "ti"), required=True)
    i.add_argument("--config")
    i.add_argument("--seed", type=int)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_invert)

    m = sub.add_parser("mix", help="assemble a spectrum from per-band sources")
    m.add_argument("--a", required=True)
    m.add_argument("--b")
    m.add_argument("--c")
    m.add_argument("--bands", required=True)
    m.add_argument("--config")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mix)

    a = sub.add_parser("analyze", help="high-frequency curve of a recorded trajectory")
    a.add_argument("--trajectory", required=True)
    a.add_argument("--cutoff", type=float, default=0.25)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("evaluate", help="run an evaluation suite against thresholds")
    e.add_argument("--model")
    e.add_argument("--suite", choices=SUITES, required=True)
    e.add_argument("--seed", type=int, default=HOLDOUT_SEED)
    e.add_argument("--config")
    e.add_argument("--trials", type=_positive)
    e.add_argument("--jobs", type=_positive)
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError, PlanError) as exc:
        print(f"prospect-lab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ValueError, KeyError) as exc:
        print(f"prospect-lab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
