"""Conditional noise predictor with a hand-written backward pass.

Layout is NHWC throughout. Convolutions go through im2col + GEMM so the
heavy lifting lands in BLAS; the patch gather/scatter are the compiled
kernels in :mod:`prospect_lab.kernels`.

Architecture::

    t -> sinusoid(temb_dim) -> Linear -> SiLU -> Linear(d) --+-- + c --> SiLU --> a
    a -> Linear -> (gamma, beta) for every modulated layer

    [x, xcoord, ycoord] -> conv3x3(C1) -> FiLM -> ReLU = r1          full res
    r1 -> conv3x3/2(C2) -> FiLM -> ReLU = e1                         1/2
    e_{j-1} -> conv3x3/2(C2) -> FiLM -> ReLU = e_j                   j = 2..depth
    q <- q + ReLU(FiLM(conv3x3(q)))      mid_blocks times, on e_depth
    q -> convT2x2/2(C2) -> FiLM -> ReLU, + e_{j-1}                   j = depth..2
    q -> convT2x2/2(C1) -> FiLM -> ReLU = r3
    r1 + r3 -> conv3x3(1)

``depth=1, mid_blocks=0`` is the plain three-layer network. The default
(two levels, two residual blocks at 1/4 resolution) lets each output pixel
see the whole 32x32 image, which a shape-level decision needs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .kernels import col2im, film_relu_bwd, film_relu_fwd, im2col
from .numerics import RngStream


PREDICTIONS = ("eps", "v")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    channels: int = 32
    mid_channels: int = 64
    temb_dim: int = 32
    cond_dim: int = 64
    coord_channels: bool = True
    skip: bool = True
    mid_blocks: int = 2
    depth: int = 2
    prediction: str = "v"     # what the network outputs: "eps" or "v"

    def __post_init__(self):
        if self.prediction not in PREDICTIONS:
            raise ValueError(f"prediction must be one of {', '.join(PREDICTIONS)}")
        if self.depth < 1 or self.image_size % (2 ** self.depth):
            raise ValueError(f"image_size {self.image_size} is not divisible by 2**{self.depth}")
        if self.mid_blocks < 0:
            raise ValueError("mid_blocks must be >= 0")

    @property
    def in_channels(self) -> int:
        return 3 if self.coord_channels else 1

    @property
    def film_dim(self) -> int:
        return 2 * (2 * self.channels + self.n_mid_layers * self.mid_channels)

    @property
    def n_mid_layers(self) -> int:
        """Modulated layers with C2 channels: downs, residual blocks, inner ups."""
        return 1 + 2 * (self.depth - 1) + self.mid_blocks

    def as_dict(self) -> dict:
        return asdict(self)


REDUCED = ModelConfig(image_size=8, channels=8, mid_channels=8, temb_dim=8, cond_dim=8,
                      mid_blocks=1, depth=2)


def param_names(cfg: ModelConfig) -> tuple:
    return tuple(param_shapes(cfg))


def param_shapes(cfg: ModelConfig) -> dict:
    c1, c2, d = cfg.channels, cfg.mid_channels, cfg.cond_dim
    return {
        "temb.w1": (cfg.temb_dim, d), "temb.b1": (d,),
        "temb.w2": (d, d), "temb.b2": (d,),
        "film.w": (d, cfg.film_dim), "film.b": (cfg.film_dim,),
        "conv1.w": (9 * cfg.in_channels, c1), "conv1.b": (c1,),
        "conv2.w": (9 * c1, c2), "conv2.b": (c2,),
        **_pairs("down", range(2, cfg.depth + 1), (9 * c2, c2), c2),
        **_pairs("mid", range(cfg.mid_blocks), (9 * c2, c2), c2),
        **_pairs("up", range(cfg.depth, 1, -1), (c2, 4 * c2), c2),
        "up.w": (c2, 4 * c1), "up.b": (c1,),
        "out.w": (9 * c1, 1), "out.b": (1,),
    }


def _pairs(prefix, idx, wshape, bsize) -> dict:
    out = {}
    for i in idx:
        out[f"{prefix}{i}.w"] = wshape
        out[f"{prefix}{i}.b"] = (bsize,)
    return out


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, rng: RngStream, out_scale: float = 0.0) -> dict:
    """He-normal weights, zero biases, zero FiLM (identity modulation).

    ``out_scale`` scales the output conv's He init; 0 gives an exactly-zero
    initial prediction.
    """
    params = {}
    for i, (name, shape) in enumerate(param_shapes(cfg).items()):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, np.float32)
            continue
        std = math.sqrt(2.0 / shape[0])
        if name == "film.w":
            std = 0.0
        if name == "out.w":
            std *= out_scale
        params[name] = (rng.child(i).gaussian(shape) * np.float32(std)).astype(np.float32)
    return params


def timestep_embedding(t, dim: int, dtype=np.float32) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _coords(b, size, dtype):
    lin = np.linspace(-1.0, 1.0, size, dtype=np.float64).astype(dtype)
    xc = np.broadcast_to(lin[None, None, :], (b, size, size))
    yc = np.broadcast_to(lin[None, :, None], (b, size, size))
    return xc, yc


def _conv_fwd(x, w, b, stride):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = im2col(xp, 3, 3, stride)
    bsz, ho, wo = cols.shape[:3]
    y = cols.reshape(bsz * ho * wo, -1) @ w + b
    return y.reshape(bsz, ho, wo, -1), cols


def _conv_bwd(dy, cols, w, in_shape, stride, need_dx=True):
    bsz, ho, wo, cout = dy.shape
    dyf = dy.reshape(-1, cout)
    colf = cols.reshape(dyf.shape[0], -1)
    dw = colf.T @ dyf
    db = dyf.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dyf @ w.T).reshape(cols.shape)
    _, h, wd, _ = in_shape
    dxp = col2im(dcols, h + 2, wd + 2, stride)
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _head_fwd(x, w, b):
    """3x3 conv to a single channel as one GEMM plus nine shifted adds."""
    bsz, h, wd, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = (xp.reshape(-1, cin) @ w.reshape(9, cin).T).reshape(bsz, h + 2, wd + 2, 9)
    y = np.zeros((bsz, h, wd), dtype=x.dtype)
    for k in range(9):
        ki, kj = divmod(k, 3)
        y += taps[:, ki:ki + h, kj:kj + wd, k]
    return y + b[0], xp


def _head_bwd(dy, xp, w):
    bsz, h, wd = dy.shape
    cin = xp.shape[-1]
    shifted = np.zeros((bsz, h + 2, wd + 2, 9), dtype=dy.dtype)
    for k in range(9):
        ki, kj = divmod(k, 3)
        shifted[:, ki:ki + h, kj:kj + wd, k] = dy
    sf = shifted.reshape(-1, 9)
    dw = (xp.reshape(-1, cin).T @ sf).T.reshape(9 * cin, 1)
    dxp = (sf @ w.reshape(9, cin)).reshape(xp.shape)
    return dxp[:, 1:-1, 1:-1, :], dw, np.array([dy.sum()], dtype=dy.dtype)


def _up_fwd(x, w, b, cout):
    """2x2 stride-2 transposed conv: one GEMM and a pixel shuffle."""
    bsz, h, wd, cin = x.shape
    y = (x.reshape(-1, cin) @ w).reshape(bsz, h, wd, 2, 2, cout)
    return y.transpose(0, 1, 3, 2, 4, 5).reshape(bsz, 2 * h, 2 * wd, cout) + b


def _up_bwd(dy, x, w):
    bsz, h, wd, cin = x.shape
    cout = dy.shape[-1]
    dyr = dy.reshape(bsz, h, 2, wd, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
    xf = x.reshape(-1, cin)
    dw = xf.T @ dyr
    dx = (dyr @ w.T).reshape(x.shape)
    db = dy.reshape(-1, cout).sum(axis=0)
    return dx, dw, db


def _film_split(fp, cfg):
    """(gamma, beta) pairs in layer order: conv1, downs, mid blocks, inner ups, up."""
    c1, c2 = cfg.channels, cfg.mid_channels
    sizes = (c1, c1) + (c2, c2) * cfg.n_mid_layers + (c1, c1)
    out, k = [], 0
    for s in sizes:
        out.append(fp[:, k:k + s])
        k += s
    return list(zip(out[::2], out[1::2]))


def forward(params: dict, cfg: ModelConfig, x, t, c, keep: bool = False,
            relu_masks=None):
    """Predict noise for a batch.

    x: (B, H, W) noisy images; t: (B,) integer timesteps; c: (B, d) conditions.
    Returns (eps, cache) where cache is None unless ``keep``.

    ``relu_masks`` pins the ReLU gates (one per modulated layer) to a given activation pattern
    (as stored in ``cache["masks"]``); finite-difference checks use it so a
    perturbation never straddles a kink.
    """
    dtype = params["conv1.w"].dtype
    x = np.asarray(x, dtype=dtype)
    c = np.asarray(c, dtype=dtype)
    bsz, size = x.shape[0], x.shape[1]
    if cfg.coord_channels:
        xc, yc = _coords(bsz, size, dtype)
        xin = np.stack([x, xc, yc], axis=-1)
    else:
        xin = x[..., None]

    temb = timestep_embedding(t, cfg.temb_dim, dtype)
    u1 = temb @ params["temb.w1"] + params["temb.b1"]
    s1 = _silu(u1)
    m = s1 @ params["temb.w2"] + params["temb.b2"]
    comb = m + c
    a = _silu(comb)
    fp = a @ params["film.w"] + params["film.b"]
    films = _film_split(fp, cfg)
    n_mod = len(films)
    masks = relu_masks if relu_masks is not None else (None,) * n_mod

    def modulate(h, g, be, mask):
        if mask is None:
            return film_relu_fwd(h, g, be)
        f = h * (1 + g[:, None, None, :]) + be[:, None, None, :]
        return f * mask, mask

    hs, ms = [], []

    def layer(h, k):
        r, m = modulate(h, *films[k], masks[k])
        hs.append(h)
        ms.append(m)
        return r

    # ops records what backward needs, in forward order
    ops = []
    h, cols = _conv_fwd(xin, params["conv1.w"], params["conv1.b"], 1)
    ops.append(("conv", "conv1", cols, xin.shape, 1))
    r1 = layer(h, 0)
    q = r1
    enc = []
    for j in range(1, cfg.depth + 1):
        name = "conv2" if j == 1 else f"down{j}"
        h, cols = _conv_fwd(q, params[f"{name}.w"], params[f"{name}.b"], 2)
        ops.append(("conv", name, cols, q.shape, 2))
        q = layer(h, len(hs))
        enc.append(q)
    for i in range(cfg.mid_blocks):
        h, cols = _conv_fwd(q, params[f"mid{i}.w"], params[f"mid{i}.b"], 1)
        ops.append(("res", f"mid{i}", cols, q.shape, 1))
        q = q + layer(h, len(hs))
    for j in range(cfg.depth, 1, -1):
        h = _up_fwd(q, params[f"up{j}.w"], params[f"up{j}.b"], cfg.mid_channels)
        ops.append(("up", f"up{j}", q))
        q = layer(h, len(hs))
        if cfg.skip:
            q = q + enc[j - 2]
            ops.append(("skip", j - 2))
    h = _up_fwd(q, params["up.w"], params["up.b"], cfg.channels)
    ops.append(("up", "up", q))
    r3 = layer(h, n_mod - 1)
    s = r3 + r1 if cfg.skip else r3
    eps, sp = _head_fwd(s, params["out.w"], params["out.b"])
    if not keep:
        return eps, None
    cache = dict(temb=temb, u1=u1, s1=s1, comb=comb, a=a, g=[g for g, _ in films], h=hs,
                 masks=tuple(ms), ops=ops, sp=sp)
    return eps, cache


def backward(params: dict, cfg: ModelConfig, cache: dict, deps):
    """Gradients of sum(deps * eps) w.r.t. every parameter and the condition."""
    dtype = params["conv1.w"].dtype
    deps = np.asarray(deps, dtype=dtype)
    gs, hs, ms = cache["g"], cache["h"], cache["masks"]
    grads = {}
    dfilm = [None] * len(gs)
    k = len(gs)

    def unlayer(dr):
        nonlocal k
        k -= 1
        dh, *dfilm[k] = film_relu_bwd(dr, hs[k], gs[k], ms[k])
        return dh

    ds, grads["out.w"], grads["out.b"] = _head_bwd(deps, cache["sp"], params["out.w"])
    dq = ds
    d_enc = {}  # gradient reaching encoder outputs through the inner skips
    for op in reversed(cache["ops"]):
        kind, name = op[0], op[1]
        if kind == "skip":
            d_enc[name] = dq
            continue
        if kind == "up":
            dq, grads[f"{name}.w"], grads[f"{name}.b"] = _up_bwd(unlayer(dq), op[2], params[f"{name}.w"])
        elif kind == "res":
            dx, grads[f"{name}.w"], grads[f"{name}.b"] = _conv_bwd(
                unlayer(dq), op[2], params[f"{name}.w"], op[3], 1)
            dq = dq + dx
        else:  # conv, plain or strided
            if name != "conv1":
                level = 0 if name == "conv2" else int(name[4:]) - 1
                if level in d_enc:
                    dq = dq + d_enc[level]
            dh = unlayer(dq)
            dq, grads[f"{name}.w"], grads[f"{name}.b"] = _conv_bwd(
                dh, op[2], params[f"{name}.w"], op[3], op[4], need_dx=name != "conv1")
            if name == "conv2" and cfg.skip:
                dq = dq + ds
    dfp = np.concatenate([d for pair in dfilm for d in pair], axis=1)
    grads["film.w"] = cache["a"].T @ dfp
    grads["film.b"] = dfp.sum(axis=0)
    da = dfp @ params["film.w"].T
    dcomb = da * _silu_grad(cache["comb"])
    dc = dcomb
    grads["temb.w2"] = cache["s1"].T @ dcomb
    grads["temb.b2"] = dcomb.sum(axis=0)
    du1 = (dcomb @ params["temb.w2"].T) * _silu_grad(cache["u1"])
    grads["temb.w1"] = cache["temb"].T @ du1
    grads["temb.b1"] = du1.sum(axis=0)
    return grads, dc


def mse_loss(params: dict, cfg: ModelConfig, x, t, c, target, relu_masks=None) -> float:
    eps, _ = forward(params, cfg, x, t, c, relu_masks=relu_masks)
    diff = eps.astype(np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff * diff))


def mse_loss_grad(params: dict, cfg: ModelConfig, x, t, c, target):
    """Mean squared error of predicted noise vs ``target`` and its gradients.

    Returns (loss, param_grads, cond_grad, cache).
    """
    eps, cache = forward(params, cfg, x, t, c, keep=True)
    diff = eps - np.asarray(target, dtype=eps.dtype)
    n = diff.size
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    grads, dc = backward(params, cfg, cache, diff * (2.0 / n))
    cache["eps"] = eps
    return loss, grads, dc, cache
