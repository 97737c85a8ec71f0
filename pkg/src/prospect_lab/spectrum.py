"""Per-stage conditioning: stage partition of the timestep axis, spectrum
containers and band algebra, stage-prompt plans, and condition providers."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import array_to_str, read_psar, str_to_array, write_psar
from .synth import AttributeLabel

PROVENANCES = ("inverted", "label-built", "mixed", "broadcast")


@dataclass(frozen=True)
class StageSchedule:
    """``n`` equal-width stages over timesteps 1..T; stage 1 holds the noisiest steps."""

    T: int = 1000
    n: int = 10

    def __post_init__(self):
        if not 1 <= self.n <= self.T:
            raise ValueError("need 1 <= n <= T")

    def stage_of(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range 1..{self.T}")
        return (self.T - t) * self.n // self.T + 1

    def timesteps(self, stage: int) -> range:
        """Timesteps belonging to ``stage``, ascending."""
        self._check_stage(stage)
        ts = [t for t in range(1, self.T + 1) if self.stage_of(t) == stage]
        return range(ts[0], ts[-1] + 1)

    def _check_stage(self, i: int) -> None:
        if not 1 <= i <= self.n:
            raise ValueError(f"stage {i} out of range 1..{self.n}")


def stage_of(t: int, sched: StageSchedule) -> int:
    return sched.stage_of(t)


def band_indices(band, n: int) -> list:
    """0-based stage indices of an inclusive 1-based band; None or () is empty."""
    if band is None or len(band) == 0:
        return []
    a, b = band
    if a > b:
        return []
    if a < 1 or b > n:
        raise ValueError(f"band {a}-{b} outside stages 1..{n}")
    return list(range(a - 1, b))


@dataclass(frozen=True)
class PromptSpectrum:
    P: np.ndarray = field(repr=False)
    provenance: str = "inverted"
    T: int = 1000

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float32)
        if P.ndim != 2 or P.shape[0] < 1:
            raise ValueError("spectrum must be an (n, d) array")
        if not np.all(np.isfinite(P)):
            raise ValueError("spectrum has non-finite values")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def d(self) -> int:
        return self.P.shape[1]

    def stage(self, i: int) -> np.ndarray:
        if not 1 <= i <= self.n:
            raise ValueError(f"stage {i} out of range 1..{self.n}")
        return self.P[i - 1]

    @classmethod
    def constant(cls, c, n: int = 10, provenance: str = "label-built", T: int = 1000):
        c = np.asarray(c, np.float32)
        return cls(np.tile(c, (n, 1)), provenance, T)

    def __eq__(self, other):
        return (isinstance(other, PromptSpectrum) and self.P.shape == other.P.shape
                and np.array_equal(self.P.view(np.uint32), other.P.view(np.uint32)))

    __hash__ = None


def broadcast_stage(P: PromptSpectrum, i: int) -> PromptSpectrum:
    """Every stage set to stage ``i``'s embedding."""
    return PromptSpectrum(np.tile(P.stage(i), (P.n, 1)), "broadcast", P.T)


def _check_compatible(*specs, names=None):
    ref = specs[0]
    for k, s in enumerate(specs[1:], start=1):
        if (s.n, s.d) != (ref.n, ref.d):
            who = names[k] if names else f"source {k}"
            raise ValueError(f"dimension mismatch: {who} is {s.n}x{s.d}, expected {ref.n}x{ref.d}")


def replace_band(A: PromptSpectrum, B: PromptSpectrum, band) -> PromptSpectrum:
    _check_compatible(A, B)
    P = A.P.copy()
    idx = band_indices(band, A.n)
    P[idx] = B.P[idx]
    prov = A.provenance if not idx else "mixed"
    return PromptSpectrum(P, prov, A.T)


@dataclass(frozen=True)
class AttributeBands:
    layout: tuple = (1, 2)
    content: tuple = (3, 7)
    material: tuple = (8, 10)

    def validate(self, n: int = 10) -> "AttributeBands":
        ranges = [tuple(self.layout), tuple(self.content), tuple(self.material)]
        expect = 1
        for a, b in ranges:
            if a != expect or b < a:
                raise ValueError(f"bands must be ordered, contiguous and non-empty: {ranges}")
            expect = b + 1
        if expect != n + 1:
            raise ValueError(f"bands must cover stages 1..{n}")
        return self

    def band(self, factor: str) -> tuple:
        return tuple(getattr(self, factor))

    def as_text(self) -> str:
        return ",".join(f"{f}={a}-{b}" for f, (a, b) in
                        (("layout", self.layout), ("content", self.content), ("material", self.material)))


def assemble(bands: AttributeBands, layout_src: PromptSpectrum, content_src: PromptSpectrum,
             material_src: PromptSpectrum) -> PromptSpectrum:
    """Per-band copy: layout band from ``layout_src`` and so on."""
    _check_compatible(layout_src, content_src, material_src,
                      names=("layout source", "content source", "material source"))
    bands.validate(layout_src.n)
    P = np.empty_like(layout_src.P)
    for src, band in ((layout_src, bands.layout), (content_src, bands.content),
                      (material_src, bands.material)):
        idx = band_indices(band, src.n)
        P[idx] = src.P[idx]
    return PromptSpectrum(P, "mixed", layout_src.T)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def spectrum_arrays(P: PromptSpectrum) -> dict:
    arrays = {f"p_{i + 1}": P.P[i] for i in range(P.n)}
    arrays["n"] = np.array(P.n, dtype=np.float32)
    arrays["d"] = np.array(P.d, dtype=np.float32)
    arrays["T"] = np.array(P.T, dtype=np.float32)
    arrays["provenance"] = str_to_array(P.provenance)
    return arrays


def save_spectrum(path, P: PromptSpectrum) -> None:
    write_psar(path, spectrum_arrays(P))


def spectrum_from_arrays(arrays: dict) -> PromptSpectrum:
    try:
        n = int(arrays["n"])
        d = int(arrays["d"])
        T = int(arrays["T"])
        P = np.stack([arrays[f"p_{i + 1}"] for i in range(n)])
    except KeyError as exc:
        raise ValueError(f"spectrum file missing {exc}") from None
    if P.shape != (n, d):
        raise ValueError(f"spectrum arrays have shape {P.shape}, header says {n}x{d}")
    prov = array_to_str(arrays["provenance"]) if "provenance" in arrays else "inverted"
    return PromptSpectrum(P, prov, T)


def load_spectrum(path) -> PromptSpectrum:
    return spectrum_from_arrays(read_psar(path))


# --------------------------------------------------------------------------
# stage-prompt plans
# --------------------------------------------------------------------------

class PlanError(ValueError):
    def __init__(self, message: str, pos: int | None = None):
        self.pos = pos
        super().__init__(message if pos is None else f"{message} (at position {pos})")


@dataclass(frozen=True)
class NullSource:
    def __str__(self):
        return "null"


@dataclass(frozen=True)
class LabelSource:
    label: AttributeLabel

    def __str__(self):
        return f"label({self.label.as_text()})"


@dataclass(frozen=True)
class SpectrumSource:
    path: str
    stage: int

    def __str__(self):
        return f"spec({self.path}#{self.stage})"


@dataclass(frozen=True)
class StagePromptPlan:
    entries: tuple  # ((start, end, source), ...) sorted by start

    def source_for(self, stage: int):
        for a, b, src in self.entries:
            if a <= stage <= b:
                return src
        return NullSource()

    def __str__(self):
        return ";".join(f"{a}-{b}:{src}" for a, b, src in self.entries)


_TOKEN_RANGE = re.compile(r"\s*(\d+)\s*-\s*(\d+)\s*:\s*")
_TOKEN_LABEL = re.compile(r"label\(([^()]*)\)\s*")
_TOKEN_SPEC = re.compile(r"spec\(([^#()]+)#(\d+)\)\s*")
_TOKEN_NULL = re.compile(r"null\s*")


def parse_plan(text: str, n: int = 10) -> StagePromptPlan:
    """Parse ``a-b:source(;a-b:source)*`` with source ``null``,
    ``label(layout=..,content=..,material=..)`` or ``spec(file#stage)``."""
    pos, entries = 0, []
    while True:
        m = _TOKEN_RANGE.match(text, pos)
        if not m:
            raise PlanError("expected stage range 'a-b:'", pos)
        a, b = int(m.group(1)), int(m.group(2))
        if a < 1 or b < a or b > n:
            raise PlanError(f"invalid stage range {a}-{b} for {n} stages", m.start(1))
        pos = m.end()
        if m2 := _TOKEN_NULL.match(text, pos):
            src = NullSource()
        elif m2 := _TOKEN_LABEL.match(text, pos):
            try:
                src = LabelSource(AttributeLabel.parse(m2.group(1)))
            except ValueError as exc:
                raise PlanError(str(exc), m2.start(1)) from None
        elif m2 := _TOKEN_SPEC.match(text, pos):
            src = SpectrumSource(m2.group(1).strip(), int(m2.group(2)))
        else:
            raise PlanError("expected source null | label(...) | spec(file#stage)", pos)
        pos = m2.end()
        entries.append((a, b, src))
        if pos == len(text):
            break
        if text[pos] != ";":
            raise PlanError("expected ';' or end of plan", pos)
        pos += 1
    taken = {}
    for a, b, _ in entries:
        for s in range(a, b + 1):
            if s in taken:
                raise PlanError(f"overlapping ranges at stage {s}")
            taken[s] = True
    return StagePromptPlan(tuple(sorted(entries, key=lambda e: e[0])))


def label_spectrum(model, label: AttributeLabel, n: int = 10) -> PromptSpectrum:
    return PromptSpectrum.constant(model.label_embedding(label), n, "label-built", model.sched.T)


def null_spectrum(model, n: int = 10) -> PromptSpectrum:
    return PromptSpectrum.constant(model.null, n, "label-built", model.sched.T)


def plan_to_spectrum(plan: StagePromptPlan, model, n: int = 10, base_dir=None) -> PromptSpectrum:
    """Resolve every stage of a plan against a model's embeddings."""
    cache = {}
    rows = []
    for s in range(1, n + 1):
        src = plan.source_for(s)
        if isinstance(src, NullSource):
            rows.append(model.null)
        elif isinstance(src, LabelSource):
            rows.append(model.label_embedding(src.label))
        else:
            path = Path(src.path)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            if path not in cache:
                cache[path] = load_spectrum(path)
            sp = cache[path]
            if sp.d != model.d:
                raise ValueError(f"{src.path}: embedding dimension {sp.d} != model dimension {model.d}")
            rows.append(sp.stage(src.stage))
    return PromptSpectrum(np.stack(rows), "mixed", model.sched.T)


def condition_provider(source, sched: StageSchedule, model=None):
    """Map t -> embedding. ``source`` is a PromptSpectrum or a StagePromptPlan
    (plans need ``model`` to resolve labels and the null embedding)."""
    if isinstance(source, StagePromptPlan):
        if model is None:
            raise ValueError("a plan needs a model to resolve its sources")
        source = plan_to_spectrum(source, model, sched.n)
    if not isinstance(source, PromptSpectrum):
        raise TypeError("source must be a PromptSpectrum or StagePromptPlan")
    if source.n != sched.n:
        raise ValueError(f"spectrum has {source.n} stages, schedule has {sched.n}")
    if model is not None and source.d != model.d:
        raise ValueError(f"embedding dimension {source.d} != model dimension {model.d}")
    P = source.P
    return lambda t: P[sched.stage_of(int(t)) - 1]
