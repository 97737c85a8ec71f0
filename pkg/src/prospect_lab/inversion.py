"""Recover conditioning from images against a frozen model.

``ti`` learns one embedding shared by all timesteps; ``prospect`` learns one
embedding per stage and each iteration updates only the stage of its sampled
timestep.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .diffusion import (DiffusionModel, EMBED_ROWS, Optimizer, SamplerConfig, ddim_sample,
                        q_sample)
from .io import write_csv
from .numerics import RngStream
from .spectrum import PromptSpectrum, StageSchedule, condition_provider, save_spectrum
from .synth import FACTORS

MODES = ("ti", "prospect")
INITS = ("null", "zeros", "label-mean")
EMA_DECAY = 0.99


@dataclass(frozen=True)
class InversionConfig:
    mode: str = "prospect"
    iterations: int = 2000
    lr: float = 0.001
    dropout: float = 0.1
    init: str = "null"
    seed: int = 0
    stages: int = 10
    optimizer: str = "adam"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")


@dataclass
class InversionResult:
    spectrum: PromptSpectrum
    raw_loss: list = field(default_factory=list)
    ema_loss: list = field(default_factory=list)
    stages: list = field(default_factory=list)       # stage of the sampled t, per iteration
    update_counts: list = field(default_factory=list)  # per stage

    def loss_rows(self):
        return [(k, repr(r), repr(e), s) for k, (r, e, s) in
                enumerate(zip(self.raw_loss, self.ema_loss, self.stages))]

    def save(self, spectrum_path, loss_csv_path=None) -> None:
        save_spectrum(spectrum_path, self.spectrum)
        if loss_csv_path is not None:
            write_csv(loss_csv_path, ["iter", "raw_loss", "ema_loss", "stage"], self.loss_rows())


def initial_embedding(model: DiffusionModel, init: str) -> np.ndarray:
    if init == "null":
        return model.null.copy()
    if init == "zeros":
        return np.zeros(model.d, np.float32)
    per_factor = []
    for f in FACTORS:
        rows = [r for (ff, _), r in EMBED_ROWS.items() if ff == f]
        per_factor.append(model.embed[rows].mean(axis=0, dtype=np.float64))
    return np.sum(per_factor, axis=0).astype(np.float32)


def _draw(rng: RngStream, n_images: int, T: int, d: int, size: int, dropout: float):
    """Image index, timestep, noise and inverted-dropout scale for one iteration."""
    idx = int(rng.integers(n_images, 1)[0])
    t = int(rng.integers(T, 1)[0]) + 1
    z = rng.gaussian((1, size, size))
    if dropout > 0:
        keep = rng.uniform(d) >= dropout
        scale = keep.astype(np.float32) / np.float32(1.0 - dropout)
    else:
        scale = np.ones(d, np.float32)
    return idx, t, z, scale


def embedding_loss_grad(model: DiffusionModel, x0, t: int, z, p, scale=None):
    """Denoising MSE at (x0, t, z) under condition ``p * scale`` and its gradient in p."""
    scale = np.ones_like(p) if scale is None else scale
    x0 = np.asarray(x0, np.float32)[None]
    tb = np.array([t])
    x_t = q_sample(x0, tb, z, model.sched)
    c = (p * scale)[None]
    loss, _, dc, _ = nn.mse_loss_grad(model.params, model.cfg, x_t, tb, c, model.target(x0, tb, z))
    return loss, dc[0] * scale


def _check_images(images, model: DiffusionModel) -> np.ndarray:
    if len(images) == 0:
        raise ValueError("inversion needs at least one image")
    arr = np.stack([np.asarray(im, np.float32) for im in images])
    size = model.cfg.image_size
    if arr.shape[1:] != (size, size):
        raise ValueError(f"images must be {size}x{size}")
    return arr


def invert(model: DiffusionModel, images, cfg: InversionConfig, progress=None) -> InversionResult:
    imgs = _check_images(images, model)
    T, d = model.sched.T, model.d
    stage_sched = StageSchedule(T, cfg.stages)
    n_slots = cfg.stages if cfg.mode == "prospect" else 1
    p0 = initial_embedding(model, cfg.init)
    P = {f"p_{i + 1}": p0.copy() for i in range(n_slots)}
    opt = Optimizer(cfg.optimizer, cfg.lr, momentum=0.9)
    rng = RngStream(cfg.seed, 0x1A7E)
    res = InversionResult(spectrum=None, update_counts=[0] * cfg.stages)
    ema = None
    for k in range(cfg.iterations):
        idx, t, z, scale = _draw(rng.child(k), len(imgs), T, d, model.cfg.image_size, cfg.dropout)
        stage = stage_sched.stage_of(t)
        key = f"p_{stage}" if cfg.mode == "prospect" else "p_1"
        loss, g = embedding_loss_grad(model, imgs[idx], t, z, P[key], scale)
        if cfg.lr > 0:
            opt.step(P, {key: g})
        ema = loss if ema is None else EMA_DECAY * ema + (1 - EMA_DECAY) * loss
        res.raw_loss.append(loss)
        res.ema_loss.append(ema)
        res.stages.append(stage)
        res.update_counts[stage - 1] += 1
        if progress is not None:
            progress(k, loss, ema)
    rows = [P[f"p_{i + 1}"] for i in range(n_slots)]
    if cfg.mode == "ti":
        rows = rows * cfg.stages
    res.spectrum = PromptSpectrum(np.stack(rows), "inverted", T)
    return res


def ti_invert(model: DiffusionModel, images, cfg: InversionConfig = InversionConfig(mode="ti"),
              progress=None) -> InversionResult:
    if cfg.mode != "ti":
        raise ValueError("ti_invert needs mode='ti'")
    return invert(model, images, cfg, progress)


def prospect_invert(model: DiffusionModel, images, cfg: InversionConfig = InversionConfig(),
                    progress=None) -> InversionResult:
    if cfg.mode != "prospect":
        raise ValueError("prospect_invert needs mode='prospect'")
    return invert(model, images, cfg, progress)


def reconstruct(model: DiffusionModel, result, sampler: SamplerConfig, rng: RngStream) -> np.ndarray:
    spectrum = result.spectrum if isinstance(result, InversionResult) else result
    if spectrum.d != model.d:
        raise ValueError(f"spectrum dimension {spectrum.d} != model dimension {model.d}")
    provider = condition_provider(spectrum, StageSchedule(model.sched.T, spectrum.n), model)
    img, _ = ddim_sample(model, provider, sampler, rng)
    return img
