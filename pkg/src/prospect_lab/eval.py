"""Measurable experiments on a trained model: attribute accuracy, stage-band
transfer, triple mixing, band calibration, inversion comparisons and the
frequency-progression statistics.

Every trial ``i`` samples with ``rng.child(i)``. Work is cut into fixed
chunks of trials before any parallel split, so results do not depend on the
number of jobs.
"""
from __future__ import annotations

import itertools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionModel, SamplerConfig, sample_many
from .inversion import InversionConfig, invert, reconstruct
from .numerics import ImageMetrics, RngStream
from .spectral import ZeroEnergyError, curve_spearman, image_hf_ratio, trajectory_hf_curve
from .spectrum import (AttributeBands, PromptSpectrum, StageSchedule, assemble, broadcast_stage,
                       condition_provider, label_spectrum, replace_band)
from .synth import (ALL_LABELS, FACTORS, VALUES, AttributeLabel, OracleError, SceneSpec, classify,
                    oracle_content, oracle_layout, oracle_material, render)

CHUNK = 25
HOLDOUT_SEED = 20240
MIX_LABELS = (AttributeLabel("TL", "circle", "hstripe"),
              AttributeLabel("TR", "square", "vstripe"),
              AttributeLabel("BL", "cross", "checker"))
_ORACLES = {"layout": oracle_layout, "content": oracle_content, "material": oracle_material}


def resolve_jobs(jobs: int | None) -> int:
    if jobs is None:
        jobs = int(os.environ.get("PROSPECT_LAB_THREADS", "1") or 1)
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    return jobs


# --------------------------------------------------------------------------
# sampling from spectra
# --------------------------------------------------------------------------

def _sample_chunk(model, spectra, sampler, rngs):
    stage_scheds = {}
    providers = []
    for sp in spectra:
        sched = stage_scheds.setdefault(sp.n, StageSchedule(model.sched.T, sp.n))
        providers.append(condition_provider(sp, sched, model))
    return sample_many(model, providers, sampler, rngs, chunk=CHUNK)


def sample_spectra(model: DiffusionModel, spectra, sampler: SamplerConfig, rngs, jobs: int = 1):
    """Sample one image per (spectrum, rng); returns (images, trajectories or None)."""
    if len(spectra) != len(rngs):
        raise ValueError("need one rng per spectrum")
    if not spectra:
        raise ValueError("nothing to sample")
    bounds = [(s, min(s + CHUNK, len(spectra))) for s in range(0, len(spectra), CHUNK)]
    tasks = [(model, list(spectra[a:b]), sampler, list(rngs[a:b])) for a, b in bounds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            results = list(pool.map(_sample_chunk, *zip(*tasks)))
    else:
        results = [_sample_chunk(*t) for t in tasks]
    imgs = np.concatenate([r[0] for r in results])
    trajs = None
    if sampler.record_trajectory:
        trajs = [tr for r in results for tr in r[1]]
    return imgs, trajs


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _rate(hits: int, valid: int) -> float:
    return hits / valid if valid else float("nan")


@dataclass
class AccuracyReport:
    samples: int
    hits: dict = field(default_factory=lambda: {f: 0 for f in FACTORS})
    valid: dict = field(default_factory=lambda: {f: 0 for f in FACTORS})

    def accuracy(self, factor: str) -> float:
        return _rate(self.hits[factor], self.valid[factor])

    def oracle_errors(self, factor: str) -> int:
        return self.samples - self.valid[factor]

    def rows(self):
        return [(f, self.hits[f], self.valid[f], self.oracle_errors(f), f"{self.accuracy(f):.4f}")
                for f in FACTORS]

    header = ("factor", "hits", "valid", "oracle_errors", "accuracy")


@dataclass
class TransferReport:
    trials: int
    target_hits: int = 0
    retained_hits: dict = field(default_factory=dict)
    oracle_errors: int = 0

    @property
    def valid(self) -> int:
        return self.trials - self.oracle_errors

    @property
    def target_rate(self) -> float:
        return _rate(self.target_hits, self.valid)

    def retention(self, factor: str) -> float:
        return _rate(self.retained_hits[factor], self.valid)

    @property
    def oracle_error_rate(self) -> float:
        return self.oracle_errors / self.trials

    def rows(self):
        out = [("target", self.target_hits, self.valid, f"{self.target_rate:.4f}")]
        out += [(f"retain.{f}", h, self.valid, f"{self.retention(f):.4f}")
                for f, h in self.retained_hits.items()]
        out.append(("oracle_errors", self.oracle_errors, self.trials, f"{self.oracle_error_rate:.4f}"))
        return out

    header = ("measure", "hits", "of", "rate")


def _score_transfer(imgs, pairs, changed_factors) -> TransferReport:
    """pairs[i] = (source label, target label); hit = every changed factor shows the target."""
    retained = [f for f in FACTORS if f not in changed_factors]
    rep = TransferReport(len(imgs), retained_hits={f: 0 for f in retained})
    for img, (a, b) in zip(imgs, pairs):
        try:
            got = classify(img)
        except OracleError:
            rep.oracle_errors += 1
            continue
        if all(getattr(got, f) == getattr(b, f) for f in changed_factors):
            rep.target_hits += 1
        for f in retained:
            rep.retained_hits[f] += getattr(got, f) == getattr(a, f)
    return rep


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------

def attribute_accuracy(model: DiffusionModel, labels, samples_per_label: int, sampler: SamplerConfig,
                       rng: RngStream, jobs: int = 1, images_out: list | None = None) -> AccuracyReport:
    """Sample each label ``samples_per_label`` times; per-factor oracle accuracy.

    Each factor's oracle runs on its own, so a failure of one oracle only
    removes that sample from that factor's denominator.
    """
    labels = list(labels)
    trial_labels = [lab for lab in labels for _ in range(samples_per_label)]
    spectra = [label_spectrum(model, lab) for lab in trial_labels]
    rngs = [rng.child(i) for i in range(len(spectra))]
    imgs, _ = sample_spectra(model, spectra, sampler, rngs, jobs)
    rep = AccuracyReport(len(imgs))
    for img, lab in zip(imgs, trial_labels):
        for f, oracle in _ORACLES.items():
            try:
                got = oracle(img)
            except OracleError:
                continue
            rep.valid[f] += 1
            rep.hits[f] += got == getattr(lab, f)
    if images_out is not None:
        images_out.extend(imgs)
    return rep


def stratified_labels(count: int) -> list:
    return [ALL_LABELS[i % len(ALL_LABELS)] for i in range(count)]


def changed_factors(a: AttributeLabel, b: AttributeLabel) -> tuple:
    return tuple(f for f in FACTORS if getattr(a, f) != getattr(b, f))


def run_transfer(model: DiffusionModel, a: AttributeLabel, b: AttributeLabel, band, trials: int,
                 sampler: SamplerConfig, rng: RngStream, jobs: int = 1, n: int = 10) -> TransferReport:
    """A's labels on every stage except ``band``, where B's labels apply."""
    changed = changed_factors(a, b)
    if not changed:
        raise ValueError("source and target labels are identical")
    spectrum = replace_band(label_spectrum(model, a, n), label_spectrum(model, b, n), band)
    rngs = [rng.child(i) for i in range(trials)]
    imgs, _ = sample_spectra(model, [spectrum] * trials, sampler, rngs, jobs)
    return _score_transfer(imgs, [(a, b)] * trials, changed)


def run_transfer_pairs(model: DiffusionModel, pairs, band, sampler: SamplerConfig, rng: RngStream,
                       factor: str, jobs: int = 1, n: int = 10) -> TransferReport:
    """Transfer with a different (A, B) pair per trial; B differs from A in ``factor`` only."""
    spectra = [replace_band(label_spectrum(model, a, n), label_spectrum(model, b, n), band)
               for a, b in pairs]
    rngs = [rng.child(i) for i in range(len(pairs))]
    imgs, _ = sample_spectra(model, spectra, sampler, rngs, jobs)
    return _score_transfer(imgs, pairs, (factor,))


def random_pairs(factor: str, count: int, rng: RngStream) -> list:
    """Random source labels, each paired with a target differing only in ``factor``."""
    out = []
    for i in range(count):
        r = rng.child(i)
        a = ALL_LABELS[int(r.integers(len(ALL_LABELS), 1)[0])]
        others = [v for v in VALUES[factor] if v != getattr(a, factor)]
        b = a.replace(**{factor: others[int(r.integers(len(others), 1)[0])]})
        out.append((a, b))
    return out


def run_mix3(model: DiffusionModel, spectra, labels, bands: AttributeBands, trials: int,
             sampler: SamplerConfig, rng: RngStream, jobs: int = 1) -> TransferReport:
    """Assemble layout from A, content from B, material from C and check all three."""
    a, b, c = spectra
    mixed = assemble(bands, a, b, c)
    target = AttributeLabel(labels[0].layout, labels[1].content, labels[2].material)
    rngs = [rng.child(i) for i in range(trials)]
    imgs, _ = sample_spectra(model, [mixed] * trials, sampler, rngs, jobs)
    rep = TransferReport(trials, retained_hits={f: 0 for f in FACTORS})
    for img in imgs:
        try:
            got = classify(img)
        except OracleError:
            rep.oracle_errors += 1
            continue
        rep.target_hits += got == target
        for f in FACTORS:
            rep.retained_hits[f] += getattr(got, f) == getattr(target, f)
    return rep


def all_partitions(n: int = 10) -> list:
    """Every split of stages 1..n into three ordered, contiguous, non-empty bands."""
    return [AttributeBands((1, i), (i + 1, j), (j + 1, n))
            for i, j in itertools.combinations(range(1, n), 2)]


@dataclass
class BandCalibration:
    cells: list  # (AttributeBands, {factor: TransferReport})

    @staticmethod
    def factor_score(rep: TransferReport) -> float:
        rets = [rep.retention(f) for f in rep.retained_hits]
        vals = [rep.target_rate] + rets
        if any(v != v for v in vals):
            return 0.0
        return rep.target_rate * float(np.mean(rets))

    def score(self, reports: dict) -> float:
        return min(self.factor_score(r) for r in reports.values())

    @property
    def best(self) -> AttributeBands:
        return max(self.cells, key=lambda c: self.score(c[1]))[0]

    def rows(self):
        out = []
        for bands, reps in self.cells:
            row = [bands.as_text()]
            for f in FACTORS:
                r = reps[f]
                row += [f"{r.target_rate:.4f}", f"{self.factor_score(r):.4f}"]
            row.append(f"{self.score(reps):.4f}")
            out.append(tuple(row))
        return out

    header = ("bands", "layout_target", "layout_score", "content_target", "content_score",
              "material_target", "material_score", "min_score")


def calibrate_bands(model: DiffusionModel, trials_per_cell: int, sampler: SamplerConfig,
                    rng: RngStream, n: int = 10, jobs: int = 1) -> BandCalibration:
    """Sweep all three-band partitions; each factor's swap uses its own band.

    The label pairs for a factor are the same in every partition, so cells
    differ only by the band.
    """
    pairs = {f: random_pairs(f, trials_per_cell, rng.child(k)) for k, f in enumerate(FACTORS)}
    cells = []
    for bands in all_partitions(n):
        reps = {f: run_transfer_pairs(model, pairs[f], bands.band(f), sampler,
                                      rng.child(100 + k), f, jobs, n)
                for k, f in enumerate(FACTORS)}
        cells.append((bands, reps))
    return BandCalibration(cells)


# --------------------------------------------------------------------------
# inversion experiments
# --------------------------------------------------------------------------

def holdout_set(count: int = 10, seed: int = HOLDOUT_SEED) -> list:
    """Deterministic jittered renders with distinct labels: [(image, label)]."""
    rng = RngStream(seed, 0x7E57)
    order = np.argsort(rng.uniform(len(ALL_LABELS)), kind="stable")
    out = []
    for k, idx in enumerate(order[:count]):
        spec = SceneSpec.from_seed(ALL_LABELS[int(idx)], (seed << 8) + k)
        out.append((render(spec), spec.label))
    return out


def mix_triple(seed: int = HOLDOUT_SEED) -> list:
    """Three renders whose labels differ in every factor: [(image, label)]."""
    return [(render(SceneSpec.from_seed(lab, (seed << 8) + 100 + k)), lab)
            for k, lab in enumerate(MIX_LABELS)]


@dataclass
class InversionComparison:
    ti: ImageMetrics
    prospect: ImageMetrics
    ti_edit: TransferReport
    prospect_edit: TransferReport
    ti_spectrum: PromptSpectrum = field(repr=False)
    prospect_spectrum: PromptSpectrum = field(repr=False)

    @property
    def mse_ratio(self) -> float:
        return self.prospect.mse / self.ti.mse if self.ti.mse > 0 else float("inf")


def material_swap_target(label: AttributeLabel) -> AttributeLabel:
    vals = VALUES["material"]
    return label.replace(material=vals[(vals.index(label.material) + 2) % len(vals)])


def edit_transfer(model: DiffusionModel, spectrum: PromptSpectrum, label: AttributeLabel,
                  band, trials: int, sampler: SamplerConfig, rng: RngStream, jobs: int = 1):
    """Swap the material band of an inverted spectrum for a label-built one."""
    target = material_swap_target(label)
    edited = replace_band(spectrum, label_spectrum(model, target, spectrum.n), band)
    rngs = [rng.child(i) for i in range(trials)]
    imgs, _ = sample_spectra(model, [edited] * trials, sampler, rngs, jobs)
    return _score_transfer(imgs, [(label, target)] * trials, ("material",))


def compare_inversions(model: DiffusionModel, image, label: AttributeLabel, inv: InversionConfig,
                       sampler: SamplerConfig, rng: RngStream, bands: AttributeBands = AttributeBands(),
                       edit_trials: int = 20, jobs: int = 1) -> InversionComparison:
    """TI and per-stage inversion of one image, same budget and seed."""
    out = {}
    for mode in ("ti", "prospect"):
        cfg = InversionConfig(mode, inv.iterations, inv.lr, inv.dropout, inv.init, inv.seed,
                              inv.stages, inv.optimizer)
        res = invert(model, [image], cfg)
        rec = reconstruct(model, res, sampler, rng.child(0))
        edit = edit_transfer(model, res.spectrum, label, bands.material, edit_trials, sampler,
                             rng.child(1), jobs)
        out[mode] = (ImageMetrics.compare(rec, image), edit, res.spectrum)
    return InversionComparison(out["ti"][0], out["prospect"][0], out["ti"][1], out["prospect"][1],
                               out["ti"][2], out["prospect"][2])


# --------------------------------------------------------------------------
# frequency statistics
# --------------------------------------------------------------------------

def frequency_progression(model: DiffusionModel, labels, sampler: SamplerConfig, rng: RngStream,
                          cutoff: float = 0.25, jobs: int = 1) -> list:
    """Spearman rho(step, hf_ratio) of each recorded trajectory."""
    rec_cfg = SamplerConfig(sampler.steps, sampler.w, sampler.eta, True, sampler.clip_x0)
    spectra = [label_spectrum(model, lab) for lab in labels]
    rngs = [rng.child(i) for i in range(len(spectra))]
    _, trajs = sample_spectra(model, spectra, rec_cfg, rngs, jobs)
    rhos = []
    for tr in trajs:
        curve = trajectory_hf_curve(tr, cutoff)
        rhos.append(curve_spearman(curve) if len(curve) >= 2 else float("nan"))
    return rhos


def mean_hf(imgs, cutoff: float = 0.25) -> float:
    vals = []
    for img in imgs:
        try:
            vals.append(image_hf_ratio(img, cutoff))
        except ZeroEnergyError:
            pass
    return float(np.mean(vals)) if vals else float("nan")


def broadcast_hf(model: DiffusionModel, spectrum: PromptSpectrum, samples: int,
                 sampler: SamplerConfig, rng: RngStream, cutoff: float = 0.25, jobs: int = 1):
    """(mean hf_ratio under broadcast of the last stage, same under the first stage).

    Both arms share the per-sample noise seeds.
    """
    rngs = [rng.child(i) for i in range(samples)]
    late, _ = sample_spectra(model, [broadcast_stage(spectrum, spectrum.n)] * samples, sampler, rngs, jobs)
    early, _ = sample_spectra(model, [broadcast_stage(spectrum, 1)] * samples, sampler, rngs, jobs)
    return mean_hf(late, cutoff), mean_hf(early, cutoff)
