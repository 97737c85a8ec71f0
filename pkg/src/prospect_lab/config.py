"""``key = value`` configuration files.

Every tunable default of the pipeline has a dotted key here. Unknown keys,
duplicate keys and out-of-range values are errors that name the line.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from . import nn
from .diffusion import NoiseSchedule, SamplerConfig, TrainConfig, make_schedule
from .inversion import INITS, MODES, InversionConfig
from .spectrum import AttributeBands


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


def _band(text: str) -> tuple:
    a, sep, b = text.partition("-")
    if not sep:
        raise ValueError(f"expected a stage range a-b, got {text!r}")
    a, b = int(a), int(b)
    if a < 1 or b < a:
        raise ValueError(f"invalid stage range {text!r}")
    return (a, b)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _int(lo=None, hi=None):
    def parse(text):
        v = int(text)
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise ValueError(f"{v} outside [{lo}, {hi if hi is not None else 'inf'}]")
        return v
    return parse


def _float(lo=None, hi=None, hi_open=False):
    def parse(text):
        v = float(text)
        if v != v:
            raise ValueError("nan is not allowed")
        if lo is not None and v < lo:
            raise ValueError(f"{v} below {lo}")
        if hi is not None and (v >= hi if hi_open else v > hi):
            raise ValueError(f"{v} above {'or equal to ' if hi_open else ''}{hi}")
        return v
    return parse


_M = nn.ModelConfig()
_TR = TrainConfig()
_SA = SamplerConfig()
_INV = InversionConfig()
_BANDS = AttributeBands()

# key -> (default, parser)
SCHEMA = {
    "data.count": (4800, _int(1)),
    "data.stratified": (True, _bool),
    "data.seed": (1, _int(0)),
    "schedule.T": (1000, _int(1)),
    "schedule.beta_min": (1e-4, _float(0.0, 1.0, True)),
    "schedule.beta_max": (0.02, _float(0.0, 1.0, True)),
    "model.channels": (_M.channels, _int(1)),
    "model.mid_channels": (_M.mid_channels, _int(1)),
    "model.temb_dim": (_M.temb_dim, _int(2)),
    "model.cond_dim": (_M.cond_dim, _int(1)),
    "model.coord_channels": (_M.coord_channels, _bool),
    "model.skip": (_M.skip, _bool),
    "model.mid_blocks": (_M.mid_blocks, _int(0)),
    "model.depth": (_M.depth, _int(1, 5)),
    "model.prediction": (_M.prediction, _choice("eps", "v")),
    "train.lr": (_TR.lr, _float(0.0)),
    "train.batch_size": (_TR.batch_size, _int(1)),
    "train.steps": (_TR.steps, _int(1)),
    "train.cond_dropout": (_TR.cond_dropout, _float(0.0, 1.0, True)),
    "train.momentum": (_TR.momentum, _float(0.0, 1.0, True)),
    "train.optimizer": (_TR.optimizer, _choice("sgd", "adam")),
    "train.beta2": (_TR.beta2, _float(0.0, 1.0, True)),
    "train.grad_clip": (_TR.grad_clip, _float(0.0)),
    "train.seed": (42, _int(0)),
    "sample.steps": (_SA.steps, _int(1)),
    "sample.w": (3.0, _float(0.0)),  # 7.5 oversaturates the 32x32 model
    "sample.eta": (_SA.eta, _float(0.0)),
    "sample.clip_x0": (_SA.clip_x0, _bool),
    "stages.n": (10, _int(1)),
    "bands.layout": (_BANDS.layout, _band),
    "bands.content": (_BANDS.content, _band),
    "bands.material": (_BANDS.material, _band),
    "invert.mode": (_INV.mode, _choice(*MODES)),
    "invert.iterations": (20000, _int(1)),  # 2000 per stage embedding
    "invert.lr": (_INV.lr, _float(0.0)),
    "invert.dropout": (_INV.dropout, _float(0.0, 1.0, True)),
    "invert.init": (_INV.init, _choice(*INITS)),
    "invert.optimizer": (_INV.optimizer, _choice("adam", "sgd")),
    "invert.seed": (_INV.seed, _int(0)),
    "analysis.cutoff": (0.25, _float(0.0, 1.0, True)),
    "eval.accuracy_min": (0.8, _float(0.0, 1.0)),
    "eval.transfer_min": (0.7, _float(0.0, 1.0)),
    "eval.mix3_min": (0.6, _float(0.0, 1.0)),
    "eval.spearman_min": (0.8, _float(-1.0, 1.0)),
    "eval.fidelity_ratio_max": (0.7, _float(0.0)),
    "eval.psnr_min_db": (20.0, _float(0.0)),
}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return f"{v[0]}-{v[1]}"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass(frozen=True)
class LabConfig:
    values: tuple  # ((key, value), ...) in schema order

    def __getitem__(self, key: str):
        return dict(self.values)[key]

    @classmethod
    def default(cls) -> "LabConfig":
        return cls(tuple((k, d) for k, (d, _) in SCHEMA.items()))

    def replace(self, overrides: dict) -> "LabConfig":
        vals = dict(self.values)
        for key, v in overrides.items():
            if key not in vals:
                raise ConfigError(f"unknown key {key!r}")
            vals[key] = v
        return LabConfig(tuple(vals.items()))

    # ---- views --------------------------------------------------------
    def model_config(self) -> nn.ModelConfig:
        g = self.__getitem__
        return nn.ModelConfig(32, g("model.channels"), g("model.mid_channels"), g("model.temb_dim"),
                              g("model.cond_dim"), g("model.coord_channels"), g("model.skip"),
                              g("model.mid_blocks"), g("model.depth"), g("model.prediction"))

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self["schedule.T"], self["schedule.beta_min"], self["schedule.beta_max"])

    def train_config(self) -> TrainConfig:
        g = self.__getitem__
        return TrainConfig(g("train.lr"), g("train.batch_size"), g("train.steps"),
                           g("train.cond_dropout"), g("train.momentum"), g("train.optimizer"),
                           g("train.beta2"), g("train.grad_clip"))

    def sampler_config(self, record_trajectory: bool = False) -> SamplerConfig:
        return SamplerConfig(self["sample.steps"], self["sample.w"], self["sample.eta"],
                             record_trajectory, self["sample.clip_x0"])

    def inversion_config(self, mode: str | None = None) -> InversionConfig:
        g = self.__getitem__
        return InversionConfig(mode or g("invert.mode"), g("invert.iterations"), g("invert.lr"),
                               g("invert.dropout"), g("invert.init"), g("invert.seed"),
                               g("stages.n"), g("invert.optimizer"))

    def bands(self) -> AttributeBands:
        return AttributeBands(self["bands.layout"], self["bands.content"],
                              self["bands.material"]).validate(self["stages.n"])

    # ---- text ---------------------------------------------------------
    def serialize(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.values)

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:12]


def parse_config(text: str) -> LabConfig:
    vals = dict(LabConfig.default().values)
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno)
        seen[key] = lineno
        try:
            vals[key] = SCHEMA[key][1](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
    cfg = LabConfig(tuple(vals.items()))
    try:
        cfg.bands()
        cfg.schedule()
        if cfg["stages.n"] > cfg["schedule.T"] or cfg["sample.steps"] > cfg["schedule.T"]:
            raise ValueError("stages.n and sample.steps must not exceed schedule.T")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> LabConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
