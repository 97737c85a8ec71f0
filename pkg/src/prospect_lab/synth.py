"""Procedural 32x32 scenes with independent layout / content / material factors,
plus rule-based oracles that read each factor back."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .kernels import template_iou
from .numerics import RngStream

SIZE = 32
QUAD = 16
BACKGROUND = -0.8
FG_HIGH = 0.8
FG_LOW = 0.4
BASE_OBJECT = 10
MAX_JITTER = 2
THRESHOLD = 0.0
MIN_IOU = 0.6
SOLID_FACTOR = 3.0
# separates the jitter-seed draw from any user stream on the same seed
JITTER_STREAM = 0x6A17

LAYOUTS = ("TL", "TR", "BL", "BR")
CONTENTS = ("circle", "square", "cross")
MATERIALS = ("solid", "hstripe", "vstripe", "checker")
FACTORS = ("layout", "content", "material")
VALUES = {"layout": LAYOUTS, "content": CONTENTS, "material": MATERIALS}

# quadrant origin as (x, y) = (column, row)
_ORIGIN = {"TL": (0, 0), "TR": (QUAD, 0), "BL": (0, QUAD), "BR": (QUAD, QUAD)}


class OracleError(ValueError):
    """An oracle could not read an attribute from the image."""


@dataclass(frozen=True)
class AttributeLabel:
    layout: str
    content: str
    material: str

    def __post_init__(self):
        for f in FACTORS:
            if getattr(self, f) not in VALUES[f]:
                raise ValueError(f"unknown {f} value {getattr(self, f)!r}")

    @property
    def index(self) -> int:
        return ((LAYOUTS.index(self.layout) * len(CONTENTS) + CONTENTS.index(self.content))
                * len(MATERIALS) + MATERIALS.index(self.material))

    @classmethod
    def from_index(cls, i: int) -> "AttributeLabel":
        m = i % len(MATERIALS)
        c = (i // len(MATERIALS)) % len(CONTENTS)
        lay = i // (len(MATERIALS) * len(CONTENTS))
        return cls(LAYOUTS[lay], CONTENTS[c], MATERIALS[m])

    def replace(self, **kw) -> "AttributeLabel":
        d = {f: getattr(self, f) for f in FACTORS}
        d.update(kw)
        return AttributeLabel(**d)

    def as_text(self) -> str:
        return f"layout={self.layout},content={self.content},material={self.material}"

    @classmethod
    def parse(cls, text: str) -> "AttributeLabel":
        """Parse ``layout=TL,content=circle,material=checker``."""
        kv = {}
        for part in text.split(","):
            if "=" not in part:
                raise ValueError(f"bad label field {part!r}")
            k, v = (s.strip() for s in part.split("=", 1))
            if k not in FACTORS:
                raise ValueError(f"unknown label key {k!r}")
            if k in kv:
                raise ValueError(f"duplicate label key {k!r}")
            kv[k] = v
        missing = [f for f in FACTORS if f not in kv]
        if missing:
            raise ValueError(f"label missing {', '.join(missing)}")
        return cls(**kv)


ALL_LABELS = tuple(AttributeLabel.from_index(i) for i in range(48))


@dataclass(frozen=True)
class SceneSpec:
    label: AttributeLabel
    jitter_seed: int = 0
    dx: int = 0
    dy: int = 0
    ds: int = 0

    def __post_init__(self):
        for v in (self.dx, self.dy, self.ds):
            if abs(v) > MAX_JITTER:
                raise ValueError("jitter out of range")

    @classmethod
    def from_seed(cls, label: AttributeLabel, jitter_seed: int) -> "SceneSpec":
        d = RngStream(jitter_seed, JITTER_STREAM).integers(2 * MAX_JITTER + 1, 3) - MAX_JITTER
        return cls(label, int(jitter_seed), int(d[0]), int(d[1]), int(d[2]))


def shape_mask(content: str, size: int) -> np.ndarray:
    """Boolean (size, size) mask of a shape filling its bounding box."""
    if content == "square":
        return np.ones((size, size), dtype=bool)
    ii, jj = np.mgrid[0:size, 0:size]
    if content == "circle":
        c = size / 2.0
        return (ii + 0.5 - c) ** 2 + (jj + 0.5 - c) ** 2 <= c * c
    if content == "cross":
        th = int(round(size * 0.4))
        lo = (size - th) // 2
        bar_r = (ii >= lo) & (ii < lo + th)
        bar_c = (jj >= lo) & (jj < lo + th)
        return bar_r | bar_c
    raise ValueError(f"unknown content {content!r}")


def _placement(ds: int, dx: int, dy: int):
    size = BASE_OBJECT + ds
    off = (QUAD - size) // 2
    return size, off + dx, off + dy


def quadrant_mask(content: str, dx: int = 0, dy: int = 0, ds: int = 0) -> np.ndarray:
    size, ox, oy = _placement(ds, dx, dy)
    out = np.zeros((QUAD, QUAD), dtype=bool)
    out[oy:oy + size, ox:ox + size] = shape_mask(content, size)
    return out


def material_pattern(material: str) -> np.ndarray:
    """Full-frame foreground level (32x32) for a material; global phase."""
    yy, xx = np.mgrid[0:SIZE, 0:SIZE]
    if material == "solid":
        on = np.ones((SIZE, SIZE), dtype=bool)
    elif material == "hstripe":
        on = (yy // 2) % 2 == 0
    elif material == "vstripe":
        on = (xx // 2) % 2 == 0
    elif material == "checker":
        on = ((xx // 2) + (yy // 2)) % 2 == 0
    else:
        raise ValueError(f"unknown material {material!r}")
    return np.where(on, FG_HIGH, FG_LOW).astype(np.float32)


def render(spec: SceneSpec) -> np.ndarray:
    lab = spec.label
    img = np.full((SIZE, SIZE), BACKGROUND, dtype=np.float32)
    qx, qy = _ORIGIN[lab.layout]
    mask = np.zeros((SIZE, SIZE), dtype=bool)
    mask[qy:qy + QUAD, qx:qx + QUAD] = quadrant_mask(lab.content, spec.dx, spec.dy, spec.ds)
    img[mask] = material_pattern(lab.material)[mask]
    return img


def render_label(label: AttributeLabel, dx=0, dy=0, ds=0) -> np.ndarray:
    return render(SceneSpec(label, 0, dx, dy, ds))


def jitter_grid():
    r = range(-MAX_JITTER, MAX_JITTER + 1)
    return itertools.product(r, r, r)


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------

def _check_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.shape != (SIZE, SIZE):
        raise ValueError(f"expected {SIZE}x{SIZE} image, got {img.shape}")
    return img


def oracle_layout(img) -> str:
    img = _check_image(img)
    ys, xs = np.nonzero(img > THRESHOLD)
    if xs.size == 0:
        raise OracleError("no object")
    cx, cy = xs.mean(), ys.mean()
    col = "L" if cx < (SIZE - 1) / 2 else "R"
    row = "T" if cy < (SIZE - 1) / 2 else "B"
    return row + col


def _quadrant(img, layout):
    qx, qy = _ORIGIN[layout]
    return img[qy:qy + QUAD, qx:qx + QUAD]


@lru_cache(maxsize=1)
def _templates():
    masks, names = [], []
    for content in CONTENTS:
        for dx, dy, ds in jitter_grid():
            masks.append(quadrant_mask(content, dx, dy, ds))
            names.append(content)
    return np.stack(masks), tuple(names)


def content_scores(img, layout: str | None = None) -> dict:
    """Best template IoU per content class within the object's quadrant."""
    img = _check_image(img)
    layout = layout or oracle_layout(img)
    binary = _quadrant(img, layout) > THRESHOLD
    templates, names = _templates()
    iou = template_iou(binary, templates)
    return {c: float(max(v for v, n in zip(iou, names) if n == c)) for c in CONTENTS}


def _pick_content(scores: dict) -> str:
    best = max(CONTENTS, key=lambda c: scores[c])
    if scores[best] < MIN_IOU:
        raise OracleError("unrecognized content")
    return best


def oracle_content(img) -> str:
    return _pick_content(content_scores(img))


_PEAKS = {
    "hstripe": ((8, 0), (24, 0)),
    "vstripe": ((0, 8), (0, 24)),
    "checker": ((8, 8), (8, 24), (24, 8), (24, 24)),
}


def material_energies(img, layout: str | None = None) -> dict:
    """Mean |F|^2 per texture band and the mean off-peak (non-DC) energy.

    Array indices are [row frequency, column frequency]; horizontal stripes
    vary down the rows and so peak at row frequency 8.
    """
    img = _check_image(img)
    layout = layout or oracle_layout(img)
    qx, qy = _ORIGIN[layout]
    mask = np.zeros((SIZE, SIZE), dtype=bool)
    mask[qy:qy + QUAD, qx:qx + QUAD] = _quadrant(img, layout) > THRESHOLD
    g = np.zeros((SIZE, SIZE), dtype=np.float64)
    vals = img[mask].astype(np.float64)
    if vals.size:
        g[mask] = vals - vals.mean()
    energy = np.abs(np.fft.fft2(g)) ** 2
    peak = np.zeros_like(mask)
    out = {}
    for name, bins in _PEAKS.items():
        out[name] = float(np.mean([energy[b] for b in bins]))
        for b in bins:
            peak[b] = True
    peak[0, 0] = True
    out["off_peak"] = float(energy[~peak].mean())
    return out


def _pick_material(e: dict) -> str:
    best = max(_PEAKS, key=lambda k: e[k])
    return best if e[best] > SOLID_FACTOR * e["off_peak"] else "solid"


def oracle_material(img) -> str:
    return _pick_material(material_energies(img))


def classify(img) -> AttributeLabel:
    """All three oracles; raises :class:`OracleError` on a degenerate image."""
    img = _check_image(img)
    layout = oracle_layout(img)
    return AttributeLabel(layout, _pick_content(content_scores(img, layout)),
                          _pick_material(material_energies(img, layout)))


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def sample_specs(count: int, rng: RngStream, stratified: bool = False) -> list:
    if count < 1:
        raise ValueError("count must be >= 1")
    if stratified:
        idx = np.arange(count) % len(ALL_LABELS)
    else:
        idx = rng.integers(len(ALL_LABELS), count)
    words = rng.uint32(2 * count).astype(np.uint64).reshape(count, 2)
    seeds = (words[:, 0] << np.uint64(32)) | words[:, 1]
    return [SceneSpec.from_seed(ALL_LABELS[int(i)], int(s)) for i, s in zip(idx, seeds)]


def sample_dataset(count: int, rng: RngStream, stratified: bool = False) -> list:
    """List of (image, label) pairs; jitter drawn per item from ``rng``."""
    return [(render(s), s.label) for s in sample_specs(count, rng, stratified)]
