"""Annotation-free preference pairs built from noised real trajectories.

For each real latent the model generates one sample from pure noise and,
separately, re-samples from a noised copy of the real latent at step ``s``.
Among ``K`` noised copies the one nearest (squared L2) to the model's own
latent at step ``s`` is used, which keeps the preferred chain close to the
model's manifold.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .dynamics import COND_DIM, Kind, WorldFamily, residuals
from .flowmodel import Divergence, ModelParams, integrate, interpolate
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

PAIR_MAGIC = b"RDPOPR1\n"
PAIR_SCHEMA = 1
CHUNK = 128
MAX_K = 64


@dataclass(eq=False)
class PreferencePair:
    x_preferred: np.ndarray
    x_model: np.ndarray
    condition: np.ndarray
    s: int
    T: int
    candidate_distances: np.ndarray
    selected_index: int
    source_id: int
    kind: int


@dataclass(eq=False)
class PairDataset:
    """Column-oriented pair storage; ``pairs()`` gives row objects."""

    x_preferred: np.ndarray
    x_model: np.ndarray
    conditions: np.ndarray
    s: np.ndarray
    distances: np.ndarray
    selected: np.ndarray
    source_ids: np.ndarray
    kinds: np.ndarray
    T: int
    K: int
    seed: int
    checkpoint: str
    frames: int
    dim: int
    dt: float
    worlds: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.s)

    @property
    def schedule(self) -> list:
        return sorted(set(int(v) for v in self.s))

    def pair(self, i: int) -> PreferencePair:
        return PreferencePair(self.x_preferred[i], self.x_model[i], self.conditions[i], int(self.s[i]),
                              self.T, self.distances[i], int(self.selected[i]), int(self.source_ids[i]),
                              int(self.kinds[i]))

    def pairs(self) -> list:
        return [self.pair(i) for i in range(len(self))]

    def subset(self, idx) -> "PairDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PairDataset(self.x_preferred[idx], self.x_model[idx], self.conditions[idx], self.s[idx],
                           self.distances[idx], self.selected[idx], self.source_ids[idx], self.kinds[idx],
                           self.T, self.K, self.seed, self.checkpoint, self.frames, self.dim, self.dt,
                           self.worlds)

    def header(self) -> dict:
        return {
            "schema": PAIR_SCHEMA,
            "checkpoint": self.checkpoint,
            "T": self.T,
            "s_schedule": self.schedule,
            "K": self.K,
            "seed": self.seed,
            "count": len(self),
            "frames": self.frames,
            "dim": self.dim,
            "dt": self.dt,
            "worlds": [self.worlds[k].to_dict() for k in sorted(self.worlds)],
        }

    def to_bytes(self) -> bytes:
        out = [PAIR_MAGIC, dump_header(self.header())]
        for i in range(len(self)):
            out.append(int(self.source_ids[i]).to_bytes(4, "little"))
            out.append(int(self.kinds[i]).to_bytes(1, "little"))
            out.append(int(self.s[i]).to_bytes(2, "little"))
            out.append(int(self.K).to_bytes(2, "little"))
            out.append(int(self.selected[i]).to_bytes(2, "little"))
            out.append(f32_bytes(self.distances[i]))
            out.append(f32_bytes(self.conditions[i]))
            out.append(f32_bytes(self.x_preferred[i]))
            out.append(f32_bytes(self.x_model[i]))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PairDataset":
        h, payload = read_container(data, PAIR_MAGIC)
        if h.get("schema") != PAIR_SCHEMA:
            raise FormatError(f"unsupported pair schema {h.get('schema')!r}")
        n, K, latent = h["count"], h["K"], h["frames"] * h["dim"]
        r = Reader(payload)
        cols = {k: [] for k in ("src", "kind", "s", "sel", "d", "c", "w", "l")}
        for _ in range(n):
            cols["src"].append(r.uint(4))
            cols["kind"].append(r.uint(1))
            cols["s"].append(r.uint(2))
            if r.uint(2) != K:
                raise FormatError("per-pair K disagrees with the header")
            cols["sel"].append(r.uint(2))
            cols["d"].append(r.floats(K))
            cols["c"].append(r.floats(COND_DIM))
            cols["w"].append(r.floats(latent))
            cols["l"].append(r.floats(latent))
        r.done()
        worlds = {Kind(w["id"]): WorldFamily.from_dict(w) for w in h["worlds"]}
        return cls(np.array(cols["w"]).reshape(n, latent), np.array(cols["l"]).reshape(n, latent),
                   np.array(cols["c"]).reshape(n, COND_DIM), np.array(cols["s"], dtype=np.int64),
                   np.array(cols["d"]).reshape(n, K), np.array(cols["sel"], dtype=np.int64),
                   np.array(cols["src"], dtype=np.int64), np.array(cols["kind"], dtype=np.int64),
                   h["T"], K, h["seed"], h["checkpoint"], h["frames"], h["dim"], h["dt"], worlds)

    def save(self, path) -> str:
        data = self.to_bytes()
        write_atomic(path, data)
        return sha256_bytes(data)

    @classmethod
    def load(cls, path) -> "PairDataset":
        from pathlib import Path

        return cls.from_bytes(Path(path).read_bytes())


def concat(parts: list) -> PairDataset:
    """Join pair datasets drawn from the same model family into one."""
    first = parts[0]
    if any(p.K != first.K or p.T != first.T for p in parts):
        raise ValueError("cannot concatenate pair datasets with different K or T")
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    checkpoints = sorted(set(p.checkpoint for p in parts))
    return PairDataset(cat("x_preferred"), cat("x_model"), cat("conditions"), cat("s"), cat("distances"),
                       cat("selected"), cat("source_ids"), cat("kinds"), first.T, first.K, first.seed,
                       "+".join(checkpoints), first.frames, first.dim, first.dt, first.worlds)


def select_candidate(distances) -> int:
    """Index of the smallest distance, lowest index on ties."""
    return int(np.argmin(np.asarray(distances)))


def verify_selection(pairs: PairDataset) -> np.ndarray:
    """Per-pair check that the stored index is the argmin of the stored distances."""
    return np.array([select_candidate(d) == s for d, s in zip(pairs.distances, pairs.selected)], dtype=bool)


def _generate_chunk(params: ModelParams, x0, c, s: int, K: int, eps_T, cands):
    """Batched core of :func:`generate_pair` given pre-drawn noise."""
    T = params.T
    x_hat_T = interpolate(x0, eps_T, T, T)
    x_s_model = integrate(params, x_hat_T, T, s, c)
    x0_model = integrate(params, x_s_model, s, 0, c)
    noised = interpolate(x0[:, None, :], cands, s, T)
    diff = noised - x_s_model[:, None, :]
    # selection happens on the stored (float32) distances so it re-verifies exactly
    dist = to_f32(np.einsum("bkn,bkn->bk", diff, diff))
    sel = np.argmin(dist, axis=1)
    x0_pref = integrate(params, noised[np.arange(len(x0)), sel], s, 0, c)
    return to_f32(x0_pref), to_f32(x0_model), dist, sel


def _check_range(s, K, T):
    if not 1 <= s <= T:
        raise ValueError(f"reverse step {s} outside [1, {T}]")
    if not 1 <= K <= MAX_K:
        raise ValueError(f"K={K} outside [1, {MAX_K}]")


def generate_pair(params: ModelParams, x0_real, c, s: int, K: int, rng: np.random.Generator,
                  source_id: int = -1, kind: int = -1) -> PreferencePair:
    _check_range(s, K, params.T)
    x0 = np.asarray(x0_real, dtype=np.float64).reshape(1, -1)
    n = x0.shape[1]
    eps_T = rng.standard_normal((1, n))
    cands = rng.standard_normal((1, K, n))
    w, l, d, sel = _generate_chunk(params, x0, np.atleast_2d(c), s, K, eps_T, cands)
    return PreferencePair(w[0], l[0], to_f32(np.asarray(c, dtype=np.float64).reshape(-1)), s, params.T,
                          d[0], int(sel[0]), source_id, kind)


def build_pair_dataset(params: ModelParams, dataset, s: int, K: int, count: int, seed: int,
                       jobs: int = 1, checkpoint: str | None = None, path=None, stage: int = 0) -> PairDataset:
    """Generate ``count`` pairs from train trajectories sampled with replacement.

    Pair ``i`` draws its noise from the substream ``(seed, stage, s, i)``,
    and work is split into fixed-size chunks, so ``jobs`` only changes
    wall-clock time, never the bytes produced.
    """
    _check_range(s, K, params.T)
    if count < 1:
        raise ValueError("count must be at least 1")
    train = dataset.train
    if not train:
        raise ValueError("dataset has no training trajectories")
    picks = rngs.stream(seed, rngs.PAIRS, stage, s).integers(0, len(train), count)
    trajs = [train[i] for i in picks]
    x0 = dataset.latents(trajs)
    c = to_f32(dataset.conditions(trajs))
    n = x0.shape[1]

    def run(lo):
        hi = min(lo + CHUNK, count)
        eps_T = np.empty((hi - lo, n))
        cands = np.empty((hi - lo, K, n))
        for j, i in enumerate(range(lo, hi)):
            g = rngs.stream(seed, rngs.PAIRS, stage, s, i + 1, int(trajs[i].id))
            eps_T[j] = g.standard_normal(n)
            cands[j] = g.standard_normal((K, n))
        return _generate_chunk(params, x0[lo:hi], c[lo:hi], s, K, eps_T, cands)

    starts = list(range(0, count, CHUNK))
    try:
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as ex:
                chunks = list(ex.map(run, starts))
        else:
            chunks = [run(lo) for lo in starts]
    except Divergence as exc:
        raise Divergence(f"pair generation diverged at s={s}: {exc}") from exc

    pairs = PairDataset(
        np.concatenate([ch[0] for ch in chunks]), np.concatenate([ch[1] for ch in chunks]), c,
        np.full(count, s, dtype=np.int64), np.concatenate([ch[2] for ch in chunks]),
        np.concatenate([ch[3] for ch in chunks]).astype(np.int64),
        np.array([t.id for t in trajs], dtype=np.int64), np.array([int(t.world.kind) for t in trajs]),
        params.T, K, seed, checkpoint or params.digest(), dataset.frames, 4, dataset.dt, dict(dataset.families),
    )
    if path is not None:
        pairs.save(path)
    return pairs


# ---------------------------------------------------------------------------
# audit

def score_latents(latents, kinds, worlds: dict, frames: int, dt: float) -> np.ndarray:
    """Physics residual for a batch of latents of mixed world kinds."""
    latents = np.asarray(latents)
    kinds = np.asarray(kinds)
    out = np.empty(len(latents))
    for k in np.unique(kinds):
        if int(k) not in worlds:
            raise KeyError(f"unknown world kind {int(k)}")
        m = kinds == k
        out[m] = residuals(latents[m].reshape(m.sum(), frames, -1), worlds[Kind(int(k))], dt)
    return out


def ci95(p: float, n: int) -> float:
    return 1.96 * math.sqrt(p * (1.0 - p) / n) if n else float("nan")


def preference_agreement(r_preferred, r_model) -> np.ndarray:
    """1 where the preferred sample has the lower residual, 0.5 on exact ties."""
    r_preferred, r_model = np.asarray(r_preferred), np.asarray(r_model)
    return np.where(r_preferred < r_model, 1.0, np.where(r_preferred == r_model, 0.5, 0.0))


@dataclass
class AuditRow:
    s: int
    n: int
    accuracy: float
    ci95: float


def pair_audit(pairs: PairDataset, worlds: dict | None = None, path=None) -> list:
    """Oracle accuracy of the preference labels, one row per reverse step."""
    worlds = worlds or pairs.worlds
    r_w = score_latents(pairs.x_preferred, pairs.kinds, worlds, pairs.frames, pairs.dt)
    r_l = score_latents(pairs.x_model, pairs.kinds, worlds, pairs.frames, pairs.dt)
    agree = preference_agreement(r_w, r_l)
    rows = []
    for s in pairs.schedule:
        m = pairs.s == s
        acc = float(agree[m].mean())
        rows.append(AuditRow(s, int(m.sum()), acc, ci95(acc, int(m.sum()))))
    if path is not None:
        write_audit(path, rows)
    return rows


def write_audit(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "n", "accuracy", "ci95"])
        for r in rows:
            w.writerow([r.s, r.n, f"{r.accuracy:.6f}", f"{r.ci95:.6f}"])
