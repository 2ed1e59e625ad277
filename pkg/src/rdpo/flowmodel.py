"""Conditional rectified-flow generator on flattened trajectories.

Convention: t = 0 is data, t = 1 is noise, and discrete step ``s`` of ``T``
sits at t = s / T. The velocity network is a residual MLP written directly
in numpy with hand-derived backward and forward-mode passes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngs
from .dynamics import COND_DIM, STATE_DIM, Kind, WorldFamily, default_families
from .formats import (
    F32,
    FormatError,
    Reader,
    dump_header,
    f32_bytes,
    read_container,
    sha256_bytes,
    to_f32,
    write_atomic,
)

CKPT_MAGIC = b"RDPOCKPT1\n"
CKPT_SCHEMA = 1
MAX_FREQ = 200.0


class Divergence(FloatingPointError):
    """Raised when a loss or a sampled latent stops being finite."""


@dataclass(eq=False)
class ModelParams:
    width: int
    depth: int
    emb: int
    frames: int
    dim: int
    T: int
    tensors: dict = field(default_factory=dict)
    worlds: dict = field(default_factory=default_families)

    @property
    def latent_dim(self) -> int:
        return self.frames * self.dim

    @property
    def in_dim(self) -> int:
        return self.latent_dim + self.emb + COND_DIM

    def shapes(self) -> dict:
        s = {"in.W": (self.in_dim, self.width), "in.b": (self.width,)}
        for i in range(self.depth):
            s[f"block{i}.W"] = (self.width, self.width)
            s[f"block{i}.b"] = (self.width,)
        s["out.W"] = (self.width, self.latent_dim)
        s["out.b"] = (self.latent_dim,)
        return s

    def replace(self, tensors: dict) -> "ModelParams":
        return ModelParams(self.width, self.depth, self.emb, self.frames, self.dim, self.T,
                           tensors, self.worlds)

    def copy(self) -> "ModelParams":
        return self.replace({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return self.replace({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def header(self) -> dict:
        return {
            "schema": CKPT_SCHEMA,
            "width": self.width,
            "depth": self.depth,
            "emb": self.emb,
            "frames": self.frames,
            "dim": self.dim,
            "T": self.T,
            "worlds": [self.worlds[k].to_dict() for k in sorted(self.worlds)],
            "tensors": [[name, list(shape)] for name, shape in self.shapes().items()],
        }

    def to_bytes(self) -> bytes:
        parts = [CKPT_MAGIC, dump_header(self.header())]
        parts += [f32_bytes(self.tensors[name].reshape(-1)) for name in self.shapes()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        h, payload = read_container(data, CKPT_MAGIC)
        if h.get("schema") != CKPT_SCHEMA:
            raise FormatError(f"unsupported checkpoint schema {h.get('schema')!r}")
        worlds = {Kind(w["id"]): WorldFamily.from_dict(w) for w in h["worlds"]}
        p = cls(h["width"], h["depth"], h["emb"], h["frames"], h["dim"], h["T"], {}, worlds)
        if [[n, list(s)] for n, s in p.shapes().items()] != h["tensors"]:
            raise FormatError("tensor table does not match the architecture")
        r = Reader(payload)
        for name, shape in p.shapes().items():
            p.tensors[name] = r.floats(int(np.prod(shape))).reshape(shape)
        r.done()
        return p

    def save(self, path) -> str:
        data = self.to_bytes()
        write_atomic(path, data)
        return sha256_bytes(data)

    @classmethod
    def load(cls, path) -> "ModelParams":
        from pathlib import Path

        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return sha256_bytes(self.to_bytes())


def init_params(width: int, depth: int, emb: int, frames: int, T: int,
                rng: np.random.Generator, dim: int = STATE_DIM, worlds=None) -> ModelParams:
    """Scaled-normal hidden weights, zero output head (so the initial field is 0)."""
    p = ModelParams(width, depth, emb, frames, dim, T, {}, worlds or default_families())
    shapes = p.shapes()
    p.tensors["in.W"] = rng.standard_normal(shapes["in.W"]) / math.sqrt(p.in_dim)
    p.tensors["in.b"] = np.zeros(width)
    for i in range(depth):
        p.tensors[f"block{i}.W"] = rng.standard_normal((width, width)) / math.sqrt(width * depth)
        p.tensors[f"block{i}.b"] = np.zeros(width)
    p.tensors["out.W"] = np.zeros(shapes["out.W"])
    p.tensors["out.b"] = np.zeros(shapes["out.b"])
    return p.replace({k: to_f32(v) for k, v in p.tensors.items()})


# ---------------------------------------------------------------------------
# network

def time_embedding(t: np.ndarray, size: int) -> np.ndarray:
    half = size // 2
    freqs = np.exp(np.linspace(0.0, math.log(MAX_FREQ), half))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _batch_inputs(params, x, t, c):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    if x.shape[1] != params.latent_dim:
        raise ValueError(f"latent has dimension {x.shape[1]}, model expects {params.latent_dim}")
    if c.shape != (x.shape[0], COND_DIM):
        raise ValueError(f"condition batch has shape {c.shape}, expected {(x.shape[0], COND_DIM)}")
    return np.concatenate([x, time_embedding(t, params.emb), c], axis=1)


def _forward(params: ModelParams, inp: np.ndarray):
    P = params.tensors
    h = inp @ P["in.W"] + P["in.b"]
    cache = [inp]
    for i in range(params.depth):
        a = h @ P[f"block{i}.W"] + P[f"block{i}.b"]
        sig = _sigmoid(a)
        cache.append((h, a, sig))
        h = h + a * sig
    cache.append(h)
    return h @ P["out.W"] + P["out.b"], cache


def _backward(params: ModelParams, cache, dv: np.ndarray):
    P = params.tensors
    g = {}
    h_last = cache[-1]
    g["out.W"] = h_last.T @ dv
    g["out.b"] = dv.sum(axis=0)
    dh = dv @ P["out.W"].T
    for i in reversed(range(params.depth)):
        h, a, sig = cache[1 + i]
        da = dh * (sig * (1.0 + a * (1.0 - sig)))
        g[f"block{i}.W"] = h.T @ da
        g[f"block{i}.b"] = da.sum(axis=0)
        dh = dh + da @ P[f"block{i}.W"].T
    g["in.W"] = cache[0].T @ dh
    g["in.b"] = dh.sum(axis=0)
    dinp = dh @ P["in.W"].T
    return params.replace({k: g[k] for k in params.shapes()}), dinp[:, : params.latent_dim]


def velocity(params: ModelParams, x, t, c) -> np.ndarray:
    """v(x, t, c) for a batch; a single latent gives a ``(1, n)`` result."""
    v, _ = _forward(params, _batch_inputs(params, x, t, c))
    return v


def velocity_jvp(params: ModelParams, x, t, c, dx) -> np.ndarray:
    """Forward-mode directional derivative of the velocity along ``dx``."""
    P = params.tensors
    inp = _batch_inputs(params, x, t, c)
    dinp = np.zeros_like(inp)
    dinp[:, : params.latent_dim] = np.atleast_2d(dx)
    h = inp @ P["in.W"] + P["in.b"]
    dh = dinp @ P["in.W"]
    for i in range(params.depth):
        a = h @ P[f"block{i}.W"] + P[f"block{i}.b"]
        da = dh @ P[f"block{i}.W"]
        sig = _sigmoid(a)
        h = h + a * sig
        dh = dh + da * (sig * (1.0 + a * (1.0 - sig)))
    return dh @ P["out.W"]


def velocity_vjp(params: ModelParams, x, t, c, dv):
    """Pull ``dv`` back through the network: (parameter grads, latent grad)."""
    _, cache = _forward(params, _batch_inputs(params, x, t, c))
    return _backward(params, cache, np.atleast_2d(dv))


# ---------------------------------------------------------------------------
# forward noising

@dataclass
class NoisySample:
    x_s: np.ndarray
    s: int
    T: int
    eps: np.ndarray
    source_id: int = -1

    @property
    def t(self) -> float:
        return self.s / self.T


def interpolate(x0, eps, s: int, T: int) -> np.ndarray:
    if not 0 <= s <= T:
        raise ValueError(f"step {s} outside [0, {T}]")
    t = s / T
    return (1.0 - t) * np.asarray(x0, dtype=np.float64) + t * np.asarray(eps, dtype=np.float64)


def noising(x0, s: int, T: int, rng: np.random.Generator, source_id: int = -1) -> NoisySample:
    if not 0 <= s <= T:
        raise ValueError(f"step {s} outside [0, {T}]")
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    eps = rng.standard_normal(x0.shape)
    return NoisySample(interpolate(x0, eps, s, T), s, T, eps, source_id)


# ---------------------------------------------------------------------------
# losses

def flow_errors(params: ModelParams, x0, c, t, eps, weights=None):
    """Per-element squared flow errors ``||(eps - x0) - v(x_t, t, c)||^2``.

    With ``weights`` also returns the gradient of ``sum(weights * errors)``
    with respect to the parameters.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    eps = np.atleast_2d(eps)
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * eps
    v, cache = _forward(params, _batch_inputs(params, xt, t, c))
    r = (eps - x0) - v
    errors = np.einsum("ij,ij->i", r, r)
    if weights is None:
        return errors, None
    grads, _ = _backward(params, cache, -2.0 * np.asarray(weights)[:, None] * r)
    return errors, grads


def draw_flow_noise(rng: np.random.Generator, batch: int, dim: int):
    t = rng.random(batch)
    eps = rng.standard_normal((batch, dim))
    return t, eps


def flow_loss_and_grad(params: ModelParams, x0, c, rng: np.random.Generator):
    """Monte-Carlo rectified-flow loss over a batch and its exact gradient."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t, eps = draw_flow_noise(rng, x0.shape[0], x0.shape[1])
    errors, grads = flow_errors(params, x0, c, t, eps, np.full(x0.shape[0], 1.0 / x0.shape[0]))
    loss = float(errors.mean())
    if not math.isfinite(loss):
        raise Divergence("flow loss is not finite")
    return loss, grads


def heldout_noise(seed: int, n: int, dim: int, draws: int):
    g = rngs.stream(seed, rngs.HELDOUT, n, draws)
    return draw_flow_noise(g, n * draws, dim)


def heldout_flow_loss(params: ModelParams, x0, c, seed: int, draws: int = 4) -> float:
    """Flow loss on fixed (t, eps) draws so values are comparable across checkpoints."""
    x0 = np.atleast_2d(x0)
    t, eps = heldout_noise(seed, x0.shape[0], x0.shape[1], draws)
    errors, _ = flow_errors(params, np.repeat(x0, draws, axis=0), np.repeat(c, draws, axis=0), t, eps)
    return float(errors.mean())


# ---------------------------------------------------------------------------
# sampling

@dataclass
class SampleChain:
    """Latents from step ``start`` down to 0; ``latents[j]`` sits at step ``start - j``."""

    latents: np.ndarray
    start: int
    condition: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.latents[-1]

    def at_step(self, s: int) -> np.ndarray:
        return self.latents[self.start - s]


Field = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _field(params, T):
    if isinstance(params, ModelParams):
        return (lambda x, t, c: velocity(params, x, t, c)), (T or params.T)
    if T is None:
        raise ValueError("T is required when sampling with a plain velocity function")
    return params, T


def integrate(params: ModelParams | Field, x, s_from: int, s_to: int, c, T: int | None = None,
              keep: bool = False):
    """Euler steps ``x_{k-1} = x_k - v(x_k, k/T, c) / T`` for k = s_from .. s_to + 1."""
    fn, T = _field(params, T)
    if not 0 <= s_to <= s_from <= T:
        raise ValueError(f"cannot integrate from step {s_from} to {s_to} with T={T}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
    c = np.atleast_2d(c)
    chain = [x] if keep else None
    dt = 1.0 / T
    for k in range(s_from, s_to, -1):
        t = np.full(x.shape[0], k / T)
        x = x - dt * fn(x, t, c)
        if not np.all(np.isfinite(x)):
            raise Divergence(f"non-finite latent at step {k - 1}")
        if keep:
            chain.append(x)
    return np.stack(chain) if keep else x


def reverse_sample(params: ModelParams | Field, start, s: int, c, T: int | None = None) -> SampleChain:
    """Integrate the flow backward from step ``s`` to data, keeping every latent.

    ``start`` is either a :class:`NoisySample` (its step must equal ``s``) or
    a latent batch assumed to sit at step ``s``.
    """
    if isinstance(start, NoisySample):
        if start.s != s:
            raise ValueError("NoisySample step does not match s")
        T = T or start.T
        start = start.x_s
    fn_T = T if T is not None else (params.T if isinstance(params, ModelParams) else None)
    if fn_T is None or not 1 <= s <= fn_T:
        raise ValueError(f"reverse step {s} outside [1, T]")
    latents = integrate(params, start, s, 0, c, fn_T, keep=True)
    return SampleChain(latents, s, np.atleast_2d(c))


def sample(params: ModelParams, c, rng: np.random.Generator) -> np.ndarray:
    """Generate from pure noise at t = 1."""
    c = np.atleast_2d(c)
    x = rng.standard_normal((c.shape[0], params.latent_dim))
    return integrate(params, x, params.T, 0, c)


# ---------------------------------------------------------------------------
# optimisation

class AdamW:
    """Adam with decoupled weight decay; parameters stay float32-representable."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams, lr: float | None = None) -> ModelParams:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        new = {}
        for k, p in params.tensors.items():
            g = grads.tensors[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * (g * g)
            if lr == 0.0:
                new[k] = p
                continue
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            new[k] = to_f32(p - lr * (update + self.weight_decay * p))
        return params.replace(new)


@dataclass
class TrainConfig:
    width: int = 128
    depth: int = 4
    emb: int = 16
    T: int = 50
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch: int = 64
    steps: int = 6000
    eval_every: int = 500
    heldout_draws: int = 4
    warmup: int = 200


def lr_at(step: int, base: float, total: int, warmup: int) -> float:
    """Linear warmup then cosine decay to zero."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(total - warmup, 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def train_base(dataset, cfg: TrainConfig, seed: int, curve_path=None, log=None) -> tuple[ModelParams, list]:
    """Fit the base generator with AdamW on the flow loss.

    Returns the params and the loss-curve rows ``(step, train_loss, heldout_loss)``.
    """
    train = dataset.train
    if not train:
        raise ValueError("dataset has no training trajectories")
    x_train = dataset.latents(train)
    c_train = dataset.conditions(train)
    heldout = dataset.heldout or train
    x_held, c_held = dataset.latents(heldout), dataset.conditions(heldout)

    params = init_params(cfg.width, cfg.depth, cfg.emb, dataset.frames, cfg.T,
                         rngs.stream(seed, rngs.INIT), worlds=dataset.families)
    opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
    g = rngs.stream(seed, rngs.TRAIN)
    rows = [(0, "", heldout_flow_loss(params, x_held, c_held, seed, cfg.heldout_draws))]
    window = []
    for step in range(1, cfg.steps + 1):
        idx = g.integers(0, len(train), cfg.batch)
        try:
            loss, grads = flow_loss_and_grad(params, x_train[idx], c_train[idx], g)
        except Divergence as exc:
            raise Divergence(f"base training diverged at step {step}: {exc}") from exc
        params = opt.step(params, grads, lr_at(step - 1, cfg.lr, cfg.steps, cfg.warmup))
        window.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            held = heldout_flow_loss(params, x_held, c_held, seed, cfg.heldout_draws)
            rows.append((step, float(np.mean(window)), held))
            window = []
            if log:
                log(f"train-base step {step}: train {rows[-1][1]:.4f} heldout {held:.4f}")
    if curve_path is not None:
        write_curve(curve_path, rows)
    return params, rows


def write_curve(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "train_loss", "heldout_loss"])
        for step, tr, held in rows:
            w.writerow([step, "" if tr == "" else f"{tr:.8g}", f"{held:.8g}"])
