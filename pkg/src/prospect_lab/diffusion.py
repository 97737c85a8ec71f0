"""Noise schedule, forward noising, training and guided DDIM sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .io import read_psar, write_psar
from .numerics import RngStream
from .synth import FACTORS, VALUES, AttributeLabel

log = logging.getLogger(__name__)


class ConditionGap(LookupError):
    """A condition provider has no embedding for a sampled timestep."""


# --------------------------------------------------------------------------
# schedule and forward process
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; arrays are indexed by t = 0..T with t = 0 the clean image."""

    T: int
    beta_min: float
    beta_max: float
    beta: np.ndarray = field(repr=False, compare=False)
    alpha: np.ndarray = field(repr=False, compare=False)
    alpha_bar: np.ndarray = field(repr=False, compare=False)

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}")
        return t


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ValueError("need 0 < beta_min < beta_max < 1")
    beta = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, float(beta_min), float(beta_max), beta, alpha, alpha_bar)


def _bcast(v, x):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (np.ndim(x) - v.ndim))


def q_sample(x0, t, z, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) z; ``t`` scalar or per-row (B,)."""
    t = sched.check_t(t)
    x0 = np.asarray(x0, dtype=np.float32)
    z = np.asarray(z, dtype=np.float32)
    if x0.shape != z.shape:
        raise ValueError("noise shape must match image shape")
    ab = sched.alpha_bar[t]
    if t.ndim:
        ab = _bcast(ab, x0)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z).astype(np.float32)


def v_target(x0, t, z, sched: NoiseSchedule) -> np.ndarray:
    """Velocity sqrt(abar_t) z - sqrt(1 - abar_t) x0, the regression target of a v model."""
    ab = _bcast(sched.alpha_bar[sched.check_t(t)], x0)
    return (np.sqrt(ab) * np.asarray(z, np.float64)
            - np.sqrt(1.0 - ab) * np.asarray(x0, np.float64)).astype(np.float32)


def output_to_eps(out, x_t, t, sched: NoiseSchedule, prediction: str) -> np.ndarray:
    """Turn raw network output into a noise estimate; ``t`` scalar or per-row."""
    if prediction == "eps":
        return out
    ab = _bcast(sched.alpha_bar[sched.check_t(t)], x_t)
    return (np.sqrt(ab) * np.asarray(out, np.float64)
            + np.sqrt(1.0 - ab) * np.asarray(x_t, np.float64)).astype(np.float32)


def predict_x0(x_t, t, eps, sched: NoiseSchedule, clamp: bool = False) -> np.ndarray:
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    if t.ndim:
        ab = _bcast(ab, x_t)
    x0 = ((np.asarray(x_t, np.float64) - np.sqrt(1.0 - ab) * np.asarray(eps, np.float64))
          / np.sqrt(ab)).astype(np.float32)
    return np.clip(x0, -1.0, 1.0) if clamp else x0


# --------------------------------------------------------------------------
# model container
# --------------------------------------------------------------------------

# rows of the label-embedding table: 4 layouts, 3 contents, 4 materials
EMBED_ROWS = {(f, v): i for i, (f, v) in enumerate((f, v) for f in FACTORS for v in VALUES[f])}


@dataclass
class DiffusionModel:
    cfg: nn.ModelConfig
    params: dict
    embed: np.ndarray        # (11, d) per-attribute-value embeddings
    null: np.ndarray         # (d,) learned unconditional embedding
    sched: NoiseSchedule

    @property
    def d(self) -> int:
        return self.cfg.cond_dim

    def label_embedding(self, label: AttributeLabel) -> np.ndarray:
        rows = [EMBED_ROWS[(f, getattr(label, f))] for f in FACTORS]
        return self.embed[rows].sum(axis=0, dtype=np.float64).astype(np.float32)

    def predict_eps(self, x_t, t, c) -> np.ndarray:
        """Noise prediction for one image (H, W) or a batch (B, H, W)."""
        x_t = np.asarray(x_t, np.float32)
        single = x_t.ndim == 2
        xb = x_t[None] if single else x_t
        tb = np.broadcast_to(np.asarray(t), (xb.shape[0],))
        self.sched.check_t(tb)
        cb = np.broadcast_to(np.asarray(c, np.float32), (xb.shape[0], self.d))
        eps = self.eps(xb, tb, cb)
        return eps[0] if single else eps

    def eps(self, x_t, t, c) -> np.ndarray:
        """Batched noise estimate; ``t`` holds one timestep per row."""
        out = nn.forward(self.params, self.cfg, x_t, t, c)[0]
        return output_to_eps(out, x_t, t, self.sched, self.cfg.prediction)

    def target(self, x0, t, z) -> np.ndarray:
        """What the network is regressed onto for clean images x0 noised with z at t."""
        return z if self.cfg.prediction == "eps" else v_target(x0, t, z, self.sched)

    def state_arrays(self) -> dict:
        arrays = {f"param.{k}": v for k, v in self.params.items()}
        arrays["embed.table"] = self.embed
        arrays["embed.null"] = self.null
        c = self.cfg
        arrays["meta.schedule"] = np.array([self.sched.T, self.sched.beta_min, self.sched.beta_max])
        arrays["meta.model"] = np.array([c.image_size, c.channels, c.mid_channels, c.temb_dim,
                                         c.cond_dim, int(c.coord_channels), int(c.skip), c.mid_blocks, c.depth,
                                         nn.PREDICTIONS.index(c.prediction)])
        arrays["T"] = np.array([self.sched.T])
        arrays["d"] = np.array([c.cond_dim])
        return arrays

    def save(self, path) -> None:
        write_psar(path, self.state_arrays())

    @classmethod
    def from_arrays(cls, arrays: dict) -> "DiffusionModel":
        try:
            size, ch, mid, temb, d, coord, skip, *rest = (int(v) for v in arrays["meta.model"])
            T, bmin, bmax = arrays["meta.schedule"]
            mid_blocks, depth, pred = rest + [0, 1, 0][len(rest):]  # plain eps net if unrecorded
            cfg = nn.ModelConfig(size, ch, mid, temb, d, bool(coord), bool(skip), mid_blocks, depth,
                                 nn.PREDICTIONS[pred])
            params = {k: arrays[f"param.{k}"].copy() for k in nn.param_names(cfg)}
        except KeyError as exc:
            raise ValueError(f"checkpoint missing array {exc}") from None
        # beta bounds were stored as f32; the schedule is rebuilt from those values
        sched = make_schedule(int(T), float(bmin), float(bmax))
        return cls(cfg, params, arrays["embed.table"].copy(), arrays["embed.null"].copy(), sched)

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        return cls.from_arrays(read_psar(path))

    @classmethod
    def init(cls, cfg: nn.ModelConfig, sched: NoiseSchedule, rng: RngStream,
             embed_std: float = 0.5) -> "DiffusionModel":
        params = nn.init_params(cfg, rng.child(0))
        embed = rng.child(1).gaussian((len(EMBED_ROWS), cfg.cond_dim)) * np.float32(embed_std)
        null = rng.child(2).gaussian((cfg.cond_dim,)) * np.float32(embed_std)
        return cls(cfg, params, embed.astype(np.float32), null.astype(np.float32), sched)


def canonical_schedule(sched: NoiseSchedule) -> NoiseSchedule:
    """Schedule as it will be after a PSAR round trip (f32 beta bounds)."""
    return make_schedule(sched.T, float(np.float32(sched.beta_min)), float(np.float32(sched.beta_max)))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    steps: int = 20000
    cond_dropout: float = 0.1
    momentum: float = 0.9          # heavy-ball for sgd, beta1 for adam
    optimizer: str = "adam"
    beta2: float = 0.999
    grad_clip: float = 1.0         # global L2 norm; 0 disables

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.steps < 1:
            raise ValueError("lr must be >= 0, batch_size and steps >= 1")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must be in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class Optimizer:
    """SGD with heavy-ball momentum, or Adam; updates a dict of arrays in place."""

    def __init__(self, kind: str, lr: float, momentum: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.kind, self.lr, self.momentum, self.beta2, self.eps = kind, lr, momentum, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.steps: dict = {}

    def step(self, arrays: dict, grads: dict) -> None:
        for k, g in grads.items():
            p = arrays[k]
            g = g.astype(p.dtype, copy=False)
            if self.kind == "sgd":
                buf = self.m.get(k)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.m[k] = buf
                p -= np.asarray(self.lr, p.dtype) * buf
                continue
            n = self.steps.get(k, 0) + 1
            self.steps[k] = n
            m = self.m.get(k, np.zeros_like(p))
            v = self.v.get(k, np.zeros_like(p))
            m = self.momentum * m + (1 - self.momentum) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.momentum ** n)
            vhat = v / (1 - self.beta2 ** n)
            p -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


@dataclass
class TrainResult:
    model: DiffusionModel
    losses: list


def _stack_data(data):
    if len(data) == 0:
        raise ValueError("empty data")
    images = np.stack([np.asarray(img, np.float32) for img, _ in data])
    rows = np.array([[EMBED_ROWS[(f, getattr(lab, f))] for f in FACTORS] for _, lab in data])
    return images, rows


def batch_condition(model: DiffusionModel, rows, drop) -> np.ndarray:
    c = model.embed[rows].sum(axis=1, dtype=np.float64).astype(model.embed.dtype)
    c[drop] = model.null
    return c


def batch_loss_grad(model: DiffusionModel, x_t, t, target, rows, drop):
    """Training loss and gradients for every parameter, the label table and the null embedding.

    ``rows`` holds each sample's three label-table rows; samples with ``drop``
    set use the null embedding instead.  ``target`` comes from
    ``model.target``.  Returns (loss, grads, cache).
    """
    c = batch_condition(model, rows, drop)
    loss, grads, dc, cache = nn.mse_loss_grad(model.params, model.cfg, x_t, t, c, target)
    g_table = np.zeros_like(model.embed)
    keep = ~drop
    for j in range(rows.shape[1]):
        np.add.at(g_table, rows[keep, j], dc[keep])
    grads["embed.table"] = g_table
    grads["embed.null"] = dc[drop].sum(axis=0).astype(model.null.dtype)
    return loss, grads, cache


def train(data: Sequence, cfg: TrainConfig, sched: NoiseSchedule, rng: RngStream,
          model_cfg: nn.ModelConfig | None = None, model: DiffusionModel | None = None,
          progress: Callable | None = None) -> TrainResult:
    """Fit the noise predictor and label embeddings on (image, label) pairs.

    Each step draws its batch, timesteps, noise and dropout mask from
    ``rng.child(step)``, so a run is reproducible step by step.
    """
    images, rows = _stack_data(data)
    if model is None:
        model = DiffusionModel.init(model_cfg or nn.ModelConfig(), sched, rng.child(0xC0FFEE))
    else:
        model = DiffusionModel(model.cfg, {k: v.copy() for k, v in model.params.items()},
                               model.embed.copy(), model.null.copy(), sched)
    state = dict(model.params)
    state["embed.table"] = model.embed
    state["embed.null"] = model.null
    opt = Optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.beta2)
    n, bsz = images.shape[0], cfg.batch_size
    losses = []
    for step in range(cfg.steps):
        srng = rng.child(step)
        idx = srng.integers(n, bsz)
        t = srng.integers(sched.T, bsz) + 1
        z = srng.gaussian((bsz,) + images.shape[1:])
        drop = srng.uniform(bsz) < cfg.cond_dropout
        x_t = q_sample(images[idx], t, z, sched)
        target = model.target(images[idx], t, z)
        loss, grads, _ = batch_loss_grad(model, x_t, t, target, rows[idx], drop)
        if cfg.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                grads = {k: g * np.float32(scale) for k, g in grads.items()}
        opt.step(state, grads)
        losses.append(loss)
        if progress is not None:
            progress(step, loss)
    return TrainResult(model, losses)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    w: float = 7.5
    eta: float = 0.0
    record_trajectory: bool = False
    clip_x0: bool = True

    def check(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise ValueError(f"sampler steps must be in 1..{T}")
        if self.w < 0:
            raise ValueError("guidance scale must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")


def sample_timesteps(T: int, steps: int) -> list:
    """tau_k = round(k T / S) for k = 1..S, deduplicated, descending."""
    taus = {int(math.floor(k * T / steps + 0.5)) for k in range(1, steps + 1)}
    return sorted((t for t in taus if t >= 1), reverse=True)


@dataclass
class TrajectoryRecord:
    """(t, clamped predicted x0) per sampler step, earliest generation first."""

    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def timesteps(self) -> list:
        return [t for t, _ in self.steps]

    @property
    def images(self) -> list:
        return [img for _, img in self.steps]


ConditionProvider = Callable[[int], np.ndarray]


def _resolve(provider, t, d):
    try:
        c = provider[t] if isinstance(provider, dict) else provider(t)
    except LookupError:
        raise ConditionGap(f"condition gap at t={t}") from None
    if c is None:
        raise ConditionGap(f"condition gap at t={t}")
    c = np.asarray(c, np.float32)
    if c.shape != (d,):
        raise ValueError(f"condition must have shape ({d},), got {c.shape}")
    return c


def ddim_sample_batch(model: DiffusionModel, providers: Sequence, cfg: SamplerConfig,
                      rngs: Sequence[RngStream]):
    """Guided DDIM for a batch; row i uses ``providers[i]`` and ``rngs[i]``.

    Returns (images (B, H, W), list of TrajectoryRecord or None).
    """
    sched = model.sched
    cfg.check(sched.T)
    if len(providers) != len(rngs):
        raise ValueError("need one rng per provider")
    size = model.cfg.image_size
    b = len(providers)
    x = np.stack([r.gaussian((size, size)) for r in rngs])
    taus = sample_timesteps(sched.T, cfg.steps)
    null = np.broadcast_to(model.null, (b, model.d))
    trajs = [TrajectoryRecord() for _ in range(b)] if cfg.record_trajectory else None
    for i, t in enumerate(taus):
        t_prev = taus[i + 1] if i + 1 < len(taus) else 0
        tb = np.full(b, t)
        c = np.stack([_resolve(p, t, model.d) for p in providers])
        if cfg.w == 0:
            eps = model.eps(x, tb, null)
        else:
            eps_c = model.eps(x, tb, c)
            if cfg.w == 1:
                eps = eps_c
            else:
                eps_u = model.eps(x, tb, null)
                eps = eps_u + np.float32(cfg.w) * (eps_c - eps_u)
        ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t_prev]
        x64 = x.astype(np.float64)
        x0 = (x64 - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        e64 = eps.astype(np.float64)
        if cfg.clip_x0:
            x0 = np.clip(x0, -1.0, 1.0)
            e64 = (x64 - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
        if trajs is not None:
            x0c = np.clip(x0, -1.0, 1.0).astype(np.float32)
            for j in range(b):
                trajs[j].steps.append((t, x0c[j]))
        sigma = 0.0
        if cfg.eta > 0 and t_prev > 0:
            sigma = cfg.eta * math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))
        x_new = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * e64
        if sigma > 0:
            x_new = x_new + sigma * np.stack([r.gaussian((size, size)) for r in rngs])
        x = x_new.astype(np.float32)
    return np.clip(x, -1.0, 1.0), trajs


def ddim_sample(model: DiffusionModel, cond, cfg: SamplerConfig, rng: RngStream):
    """Single image; returns (image, TrajectoryRecord or None)."""
    imgs, trajs = ddim_sample_batch(model, [cond], cfg, [rng])
    return imgs[0], (trajs[0] if trajs else None)


def sample_many(model: DiffusionModel, providers: Sequence, cfg: SamplerConfig,
                rngs: Sequence[RngStream], chunk: int = 25):
    """Sample in fixed-size chunks so each row's result does not depend on the
    total batch size (and hence not on how work is split across jobs)."""
    imgs, trajs = [], []
    for s in range(0, len(providers), chunk):
        im, tr = ddim_sample_batch(model, providers[s:s + chunk], cfg, rngs[s:s + chunk])
        imgs.append(im)
        if tr is not None:
            trajs.extend(tr)
    return np.concatenate(imgs), (trajs if cfg.record_trajectory else None)


def constant_provider(c) -> ConditionProvider:
    c = np.asarray(c, np.float32)
    return lambda t: c
