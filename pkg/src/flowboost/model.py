"""Permutation-equivariant conditional velocity network in plain numpy.

Each point is a token. A time/condition embedding modulates every block via
FiLM; attention has no positional terms, so permuting the input tokens
permutes the output identically. The reverse pass is written out by hand for
this fixed architecture.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"FLOWBST1"
RMS_EPS = 1e-6
BUFFERS = ("time.freqs",)


@dataclass(frozen=True)
class Architecture:
    dim: int
    cond_dim: int
    width: int = 64
    depth: int = 2
    heads: int = 4
    freqs: int = 16
    ff_mult: int = 4

    def __post_init__(self):
        for k in ("dim", "width", "depth", "heads", "freqs", "ff_mult"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.cond_dim < 0:
            raise ValueError("cond_dim must be >= 0")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def embed_dim(self) -> int:
        return 2 * self.freqs + 4


class ModelParams:
    """Named float64 tensors plus the architecture they belong to."""

    def __init__(self, arch: Architecture, tensors: dict[str, np.ndarray]):
        self.arch = arch
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def trainable(self) -> list[str]:
        return [k for k in self.names() if k not in BUFFERS]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def flat_trainable(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].reshape(-1) for k in self.trainable()])


def init_params(arch: Architecture, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    w, m = arch.width, arch.ff_mult * arch.width

    def dense(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))

    t: dict[str, np.ndarray] = {}
    t["time.freqs"] = rng.normal(0.0, 10.0, size=arch.freqs)
    t["embed.W"] = dense(arch.embed_dim + arch.cond_dim, w)
    t["embed.b"] = np.zeros(w)
    t["in.W"] = dense(arch.dim, w)
    t["in.b"] = np.zeros(w)
    for l in range(arch.depth):
        p = f"L{l}."
        for k in ("1", "2"):
            t[p + f"norm{k}.g"] = np.ones(w)
            # small FiLM init keeps early blocks close to unmodulated
            t[p + f"film{k}.W"] = 0.1 * dense(w, 2 * w)
            t[p + f"film{k}.b"] = np.zeros(2 * w)
        for k in ("q", "k", "v", "o"):
            t[p + f"attn.W{k}"] = dense(w, w)
        t[p + "ff.W1"] = dense(w, 2 * m)
        t[p + "ff.W2"] = dense(m, w)
    t["out.norm.g"] = np.ones(w)
    t["head.W"] = np.zeros((w, arch.dim))
    t["head.b"] = np.zeros(arch.dim)
    return ModelParams(arch, t)


# --------------------------------------------------------------------------
# building blocks


def time_embedding(t, freqs: np.ndarray) -> np.ndarray:
    """Random Fourier features plus (t, t^2, t^3, log(1+t)); t has shape (B,)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any((t < 0.0) | (t > 1.0)):
        log.warning("time outside [0, 1] clamped")
        t = np.clip(t, 0.0, 1.0)
    ang = 2.0 * np.pi * t[:, None] * freqs[None, :]
    poly = np.stack([t, t * t, t ** 3, np.log1p(t)], axis=1)
    return np.concatenate([np.sin(ang), np.cos(ang), poly], axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _silu(z):
    return z * _sigmoid(z)


def _silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _rms_fwd(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    xh = x * r
    return xh * g, (xh, r)


def _rms_bwd(dy, g, cache):
    xh, r = cache
    dg = (dy * xh).reshape(-1, dy.shape[-1]).sum(axis=0)
    dxh = dy * g
    dx = r * (dxh - xh * np.mean(dxh * xh, axis=-1, keepdims=True))
    return dx, dg


# --------------------------------------------------------------------------
# forward / backward


def _check_inputs(params: ModelParams, x, t, cond):
    arch = params.arch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != arch.dim:
        raise ValueError(f"expected points of shape (B, N, {arch.dim}), got {x.shape}")
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)).copy()
    cond = np.asarray(cond if cond is not None else np.zeros((B, 0)), dtype=np.float64)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (B, cond.shape[0]))
    if cond.shape != (B, arch.cond_dim):
        raise ValueError(f"expected condition of shape ({B}, {arch.cond_dim}), got {cond.shape}")
    return x, t, cond


def forward(params: ModelParams, x, t, cond, keep_cache: bool = False):
    """Velocity for a batch: x (B, N, d), t (B,), cond (B, C) -> (B, N, d)."""
    x, t, cond = _check_inputs(params, x, t, cond)
    P = params.tensors
    arch = params.arch
    B, N, _ = x.shape
    H = arch.heads
    dh = arch.width // H
    cache: dict = {"x": x}

    phi = time_embedding(t, P["time.freqs"])
    e_in = np.concatenate([phi, cond], axis=1)
    e_pre = e_in @ P["embed.W"] + P["embed.b"]
    e = _silu(e_pre)
    cache.update(e_in=e_in, e_pre=e_pre, e=e)

    h = x @ P["in.W"] + P["in.b"]
    layers = []
    for l in range(arch.depth):
        p = f"L{l}."
        lc = {}
        # attention sub-block
        a, lc["n1"] = _rms_fwd(h, P[p + "norm1.g"])
        gb = e @ P[p + "film1.W"] + P[p + "film1.b"]
        gam, bet = gb[:, : arch.width], gb[:, arch.width :]
        lc["a_norm"], lc["gam1"] = a, gam
        a = a * (1.0 + gam[:, None, :]) + bet[:, None, :]
        lc["a"] = a
        q = (a @ P[p + "attn.Wq"]).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        k = (a @ P[p + "attn.Wk"]).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        v = (a @ P[p + "attn.Wv"]).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
        s = s - s.max(axis=-1, keepdims=True)
        pr = np.exp(s)
        pr /= pr.sum(axis=-1, keepdims=True)
        o = (pr @ v).transpose(0, 2, 1, 3).reshape(B, N, arch.width)
        lc.update(q=q, k=k, v=v, pr=pr, o=o)
        h = h + o @ P[p + "attn.Wo"]
        # gated feed-forward sub-block
        f, lc["n2"] = _rms_fwd(h, P[p + "norm2.g"])
        gb = e @ P[p + "film2.W"] + P[p + "film2.b"]
        gam, bet = gb[:, : arch.width], gb[:, arch.width :]
        lc["f_norm"], lc["gam2"] = f, gam
        f = f * (1.0 + gam[:, None, :]) + bet[:, None, :]
        lc["f"] = f
        u = f @ P[p + "ff.W1"]
        m = u.shape[-1] // 2
        ug, uv = u[..., :m], u[..., m:]
        z = _silu(ug) * uv
        lc.update(ug=ug, uv=uv, z=z)
        h = h + z @ P[p + "ff.W2"]
        layers.append(lc)
    hn, ncache = _rms_fwd(h, P["out.norm.g"])
    out = hn @ P["head.W"] + P["head.b"]
    if keep_cache:
        cache.update(layers=layers, hn=hn, ncache=ncache)
        return out, cache
    return out


def velocity(params: ModelParams, x, t, cond) -> np.ndarray:
    return forward(params, x, t, cond)


def backward(params: ModelParams, cache: dict, d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of sum(d_out * out) with respect to every trainable tensor."""
    P = params.tensors
    arch = params.arch
    x = cache["x"]
    B, N, _ = x.shape
    H = arch.heads
    dh = arch.width // H
    w = arch.width
    g: dict[str, np.ndarray] = {}

    g["head.W"] = np.einsum("bnk,bnj->kj", cache["hn"], d_out)
    g["head.b"] = d_out.sum(axis=(0, 1))
    dhn = d_out @ P["head.W"].T
    dh_, g["out.norm.g"] = _rms_bwd(dhn, P["out.norm.g"], cache["ncache"])
    de = np.zeros_like(cache["e"])

    for l in reversed(range(arch.depth)):
        p = f"L{l}."
        lc = cache["layers"][l]
        # feed-forward
        dz = dh_ @ P[p + "ff.W2"].T
        g[p + "ff.W2"] = np.einsum("bnm,bnk->mk", lc["z"], dh_)
        dug = dz * lc["uv"] * _silu_grad(lc["ug"])
        duv = dz * _silu(lc["ug"])
        du = np.concatenate([dug, duv], axis=-1)
        g[p + "ff.W1"] = np.einsum("bnk,bnm->km", lc["f"], du)
        df = du @ P[p + "ff.W1"].T
        dgam = np.einsum("bnk,bnk->bk", df, lc["f_norm"])
        dbet = df.sum(axis=1)
        dgb = np.concatenate([dgam, dbet], axis=1)
        g[p + "film2.W"] = cache["e"].T @ dgb
        g[p + "film2.b"] = dgb.sum(axis=0)
        de += dgb @ P[p + "film2.W"].T
        dfn = df * (1.0 + lc["gam2"][:, None, :])
        dx2, g[p + "norm2.g"] = _rms_bwd(dfn, P[p + "norm2.g"], lc["n2"])
        dh_ = dh_ + dx2
        # attention
        do = dh_ @ P[p + "attn.Wo"].T
        g[p + "attn.Wo"] = np.einsum("bnk,bnj->kj", lc["o"], dh_)
        do = do.reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        pr, q, k, v = lc["pr"], lc["q"], lc["k"], lc["v"]
        dpr = do @ v.transpose(0, 1, 3, 2)
        dv = pr.transpose(0, 1, 3, 2) @ do
        ds = pr * (dpr - np.sum(dpr * pr, axis=-1, keepdims=True)) / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q

        def merge(t_):
            return t_.transpose(0, 2, 1, 3).reshape(B, N, w)

        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        a = lc["a"]
        g[p + "attn.Wq"] = np.einsum("bnk,bnj->kj", a, dq)
        g[p + "attn.Wk"] = np.einsum("bnk,bnj->kj", a, dk)
        g[p + "attn.Wv"] = np.einsum("bnk,bnj->kj", a, dv)
        da = dq @ P[p + "attn.Wq"].T + dk @ P[p + "attn.Wk"].T + dv @ P[p + "attn.Wv"].T
        dgam = np.einsum("bnk,bnk->bk", da, lc["a_norm"])
        dbet = da.sum(axis=1)
        dgb = np.concatenate([dgam, dbet], axis=1)
        g[p + "film1.W"] = cache["e"].T @ dgb
        g[p + "film1.b"] = dgb.sum(axis=0)
        de += dgb @ P[p + "film1.W"].T
        dan = da * (1.0 + lc["gam1"][:, None, :])
        dx1, g[p + "norm1.g"] = _rms_bwd(dan, P[p + "norm1.g"], lc["n1"])
        dh_ = dh_ + dx1

    g["in.W"] = np.einsum("bnd,bnk->dk", x, dh_)
    g["in.b"] = dh_.sum(axis=(0, 1))
    de_pre = de * _silu_grad(cache["e_pre"])
    g["embed.W"] = cache["e_in"].T @ de_pre
    g["embed.b"] = de_pre.sum(axis=0)
    return g


# --------------------------------------------------------------------------
# optimisation


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(v * v)) for _, v in sorted(grads.items())))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most max_norm; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] *= scale
    return norm


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices only."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for name in sorted(grads):
            p = params.tensors[name]
            gr = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.b1
            m += (1.0 - self.b1) * gr
            v *= self.b2
            v += (1.0 - self.b2) * gr * gr
            if p.ndim >= 2 and self.wd:
                p -= self.lr * self.wd * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(path, params: ModelParams, metadata: Optional[dict] = None, seed: int = 0) -> None:
    """Write the FLOWBST1 format: magic, u64 manifest length, JSON manifest, f64 payload."""
    table = []
    offset = 0
    chunks = []
    for name in params.names():
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
        chunks.append(arr.tobytes())
    manifest = {
        "architecture": asdict(params.arch),
        "tensors": table,
        "metadata": metadata or {},
        "seed": int(seed),
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt manifest") from exc
    payload = data[16 + mlen :]
    expected = sum(8 * math.prod(e["shape"]) for e in manifest["tensors"])
    if len(payload) != expected:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    arch = Architecture(**manifest["architecture"])
    tensors = {}
    for e in manifest["tensors"]:
        size = math.prod(e["shape"])
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=e["offset"])
        tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return ModelParams(arch, tensors), manifest
