"""Flow-DPO fine-tuning on generated preference pairs, with a reverse-step curriculum.

The preference margin compares how much better the trained model explains
the preferred latent than the reference does, against the same quantity
for the model's own sample:

    m = -(beta / 2) * [(e_theta(w) - e_ref(w)) - (e_theta(l) - e_ref(l))]

where ``e`` is the flow-matching error at a shared ``t`` and independent
noise for winner and loser. The loss is ``mean(softplus(-m))``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngs
from .flowmodel import (
    AdamW,
    Divergence,
    ModelParams,
    _backward,
    _batch_inputs,
    _forward,
    flow_loss_and_grad,
    heldout_flow_loss,
)
from .pairgen import PairDataset, build_pair_dataset, concat

DEFAULT_SCHEDULE = ((42,), (40,), (42, 40))


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class DpoDraws:
    t: np.ndarray
    eps_w: np.ndarray
    eps_l: np.ndarray

    def swapped(self) -> "DpoDraws":
        return DpoDraws(self.t, self.eps_l, self.eps_w)


def draw_dpo_noise(rng: np.random.Generator, batch: int, dim: int) -> DpoDraws:
    t = rng.random(batch)
    return DpoDraws(t, rng.standard_normal((batch, dim)), rng.standard_normal((batch, dim)))


def _errors(params: ModelParams, x0, c, t, eps):
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * eps
    v, cache = _forward(params, _batch_inputs(params, xt, t, c))
    r = (eps - x0) - v
    return np.einsum("ij,ij->i", r, r), r, cache


def dpo_margins(theta: ModelParams, theta_ref: ModelParams, x_w, x_l, c, beta: float, draws: DpoDraws,
                with_grad: bool = False):
    """Per-pair margins under explicit draws; with ``with_grad`` also the loss gradient.

    Winner and loser rows go through the network as one stacked batch.
    """
    x_w = np.atleast_2d(np.asarray(x_w, dtype=np.float64))
    x_l = np.atleast_2d(np.asarray(x_l, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if x_w.shape != x_l.shape or x_w.shape[0] != c.shape[0]:
        raise ValueError("winner, loser and condition batches must line up")
    if x_w.shape[0] == 0:
        raise ValueError("empty batch")
    n = x_w.shape[0]
    x = np.concatenate([x_w, x_l])
    cc = np.concatenate([c, c])
    t = np.concatenate([draws.t, draws.t])
    eps = np.concatenate([draws.eps_w, draws.eps_l])
    e_theta, r, cache = _errors(theta, x, cc, t, eps)
    e_ref, _, _ = _errors(theta_ref, x, cc, t, eps)
    d = e_theta - e_ref
    m = -0.5 * beta * (d[:n] - d[n:])
    if not with_grad:
        return m, None
    # dL/de_theta for the winner and loser halves
    s = _sigmoid(-m) * beta / (2.0 * n)
    w = np.concatenate([s, -s])
    grads, _ = _backward(theta, cache, -2.0 * w[:, None] * r)
    return m, grads


def dpo_loss(margins) -> float:
    return float(np.mean(_softplus(-np.asarray(margins))))


def flow_dpo_loss_and_grad(theta: ModelParams, theta_ref: ModelParams, batch, beta: float,
                           rng: np.random.Generator):
    """Loss and exact gradient wrt ``theta`` for a batch ``(x_w, x_l, c)``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    x_w, x_l, c = batch
    x_w = np.atleast_2d(x_w)
    draws = draw_dpo_noise(rng, x_w.shape[0], x_w.shape[1])
    m, grads = dpo_margins(theta, theta_ref, x_w, x_l, c, beta, draws, with_grad=True)
    loss = dpo_loss(m)
    if not math.isfinite(loss):
        raise Divergence("preference loss is not finite")
    return loss, grads


def implicit_reward_accuracy(theta: ModelParams, theta_ref: ModelParams, pairs: PairDataset,
                             rng: np.random.Generator, n_eval_draws: int = 4, beta: float = 1.0) -> float:
    """Share of pairs whose margin (averaged over draws) favours the preferred sample; ties 0.5."""
    if n_eval_draws < 1:
        raise ValueError("n_eval_draws must be at least 1")
    n, dim = pairs.x_preferred.shape
    total = np.zeros(n)
    for _ in range(n_eval_draws):
        draws = draw_dpo_noise(rng, n, dim)
        m, _ = dpo_margins(theta, theta_ref, pairs.x_preferred, pairs.x_model, pairs.conditions, beta, draws)
        total += m
    return float(np.mean(np.where(total > 0, 1.0, np.where(total == 0, 0.5, 0.0))))


# ---------------------------------------------------------------------------
# progressive training

@dataclass
class RdpoConfig:
    beta: float = 1.0
    lr: float = 1e-6
    weight_decay: float = 0.0
    steps_per_iter: int = 2000
    batch: int = 32
    schedule: tuple = DEFAULT_SCHEDULE
    pairs_per_iter: int = 2000
    K: int = 8
    sft_interleave: bool = True
    accuracy_every: int = 100
    accuracy_pairs: int = 256
    accuracy_draws: int = 4
    residual_every: int = 500
    residual_conditions: int = 128

    def validate(self, T: int) -> None:
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.steps_per_iter < 0 or self.batch < 1 or self.pairs_per_iter < 1:
            raise ValueError("steps_per_iter, batch and pairs_per_iter must be positive")
        if not self.schedule:
            raise ValueError("schedule must be nonempty")
        for entry in self.schedule:
            if not entry or any(not 1 <= int(s) <= T for s in entry):
                raise ValueError(f"schedule entry {entry!r} needs steps in [1, {T}]")


def parse_schedule(text: str) -> tuple:
    """``"42,40,42+40"`` -> ``((42,), (40,), (42, 40))``."""
    return tuple(tuple(int(s) for s in item.split("+")) for item in text.split(",") if item.strip())


def format_schedule(schedule) -> str:
    return ",".join("+".join(str(s) for s in entry) for entry in schedule)


@dataclass
class TrainState:
    theta: ModelParams
    theta_ref: ModelParams
    iteration: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def _mixture(entry, made: dict, count: int, g: np.random.Generator) -> PairDataset:
    """Equal shares of the earlier pair sets, drawn without replacement."""
    parts = []
    share = [count // len(entry) + (1 if j < count % len(entry) else 0) for j in range(len(entry))]
    for s, n in zip(entry, share):
        src = made[s]
        parts.append(src.subset(np.sort(g.choice(len(src), size=min(n, len(src)), replace=False))))
    return concat(parts)


def residual_monitor(theta: ModelParams, conds, seed: int, jobs: int = 1) -> float:
    from .evaluation import generate, score_samples

    res = score_samples(generate(theta, conds, 1, seed, tag=2, jobs=jobs), conds)
    return float(np.nanmedian(res))


REPORT_COLUMNS = ("step", "branch", "loss", "implicit_reward_accuracy", "heldout_physics_residual_median")


def write_report(path, rows, meta: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if meta:
            for k in sorted(meta):
                fh.write(f"# {k}: {meta[k]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for step, branch, loss, acc, res in rows:
            w.writerow([step, branch, f"{loss:.8g}", "" if acc is None else f"{acc:.6f}",
                        "" if res is None else f"{res:.8g}"])


def progressive_train(theta_init: ModelParams, dataset, cfg: RdpoConfig, seed: int, out_dir=None,
                      pair_source=None, jobs: int = 1, log=None) -> tuple[ModelParams, list]:
    """Curriculum of preference iterations; returns the final params and per-iteration checkpoints.

    Each iteration freezes a reference copy of the current params, obtains
    its pairs (fresh from the current params for a single step, or equal
    shares of the earlier sets for a mixture), then runs ``steps_per_iter``
    updates. With ``sft_interleave`` even steps are preference steps and
    odd steps are flow-matching steps on real data.

    ``pair_source(iteration, s, theta)`` may supply pair sets instead of
    generating them.
    """
    from .evaluation import heldout_conditions

    cfg.validate(theta_init.T)
    train = dataset.train
    x_train, c_train = dataset.latents(train), dataset.conditions(train)
    conds = heldout_conditions(dataset, min(cfg.residual_conditions, len(dataset.heldout)))
    out = Path(out_dir) if out_dir is not None else None
    state = TrainState(theta_init, theta_init)
    made, checkpoints = {}, []
    for i, entry in enumerate(cfg.schedule, start=1):
        state.iteration = i
        state.theta_ref = state.theta.copy()
        if len(entry) == 1:
            s = entry[0]
            if pair_source is not None:
                made[s] = pair_source(i, s, state.theta)
            else:
                made[s] = build_pair_dataset(state.theta, dataset, s, cfg.K, cfg.pairs_per_iter, seed, jobs,
                                             stage=i)
            pairs = made[s]
        else:
            for s in entry:
                if s not in made:
                    made[s] = build_pair_dataset(state.theta, dataset, s, cfg.K, cfg.pairs_per_iter, seed,
                                                 jobs, stage=i)
            pairs = _mixture(entry, made, cfg.pairs_per_iter, rngs.stream(seed, rngs.RDPO, i, 0))
        if out is not None:
            pairs.save(out / f"pairs_iter{i}.bin")

        mon = pairs.subset(np.arange(min(cfg.accuracy_pairs, len(pairs))))
        g = rngs.stream(seed, rngs.RDPO, i, 1)
        opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
        rows = []
        for step in range(cfg.steps_per_iter):
            state.step = step
            dpo = not cfg.sft_interleave or step % 2 == 0
            try:
                if dpo:
                    idx = g.integers(0, len(pairs), cfg.batch)
                    batch = (pairs.x_preferred[idx], pairs.x_model[idx], pairs.conditions[idx])
                    loss, grads = flow_dpo_loss_and_grad(state.theta, state.theta_ref, batch, cfg.beta, g)
                else:
                    idx = g.integers(0, len(train), cfg.batch)
                    loss, grads = flow_loss_and_grad(state.theta, x_train[idx], c_train[idx], g)
            except Divergence as exc:
                raise Divergence(f"preference training diverged in iteration {i} at step {step}: {exc}") from exc
            state.theta = opt.step(state.theta, grads)
            done = step + 1
            acc = res = None
            if done % cfg.accuracy_every == 0 or done == cfg.steps_per_iter:
                acc = implicit_reward_accuracy(state.theta, state.theta_ref, mon,
                                               rngs.stream(seed, rngs.MONITOR, i, done), cfg.accuracy_draws,
                                               cfg.beta)
            if done % cfg.residual_every == 0 or done == cfg.steps_per_iter:
                res = residual_monitor(state.theta, conds, seed, jobs)
                if log:
                    log(f"train-rdpo iter {i} step {done}: loss {loss:.4f} acc {acc} residual {res:.5f}")
            rows.append((step, "dpo" if dpo else "sft", loss, acc, res))
        state.history.append(rows)
        checkpoints.append(state.theta)
        if out is not None:
            state.theta.save(out / f"iter{i}.ckpt")
            meta = {"iteration": i, "s": "+".join(map(str, entry)), "beta": cfg.beta,
                    "sft_interleave": cfg.sft_interleave, "reference": "reset at iteration start",
                    "reference_sha256": state.theta_ref.digest()}
            write_report(out / f"report_iter{i}.csv", rows, meta)
    return state.theta, checkpoints


@dataclass
class SftConfig:
    lr: float = 1e-6
    weight_decay: float = 0.0
    steps: int = 2000
    batch: int = 32
    eval_every: int = 100
    heldout_draws: int = 4


def sft_train(theta: ModelParams, dataset, cfg: SftConfig, seed: int, curve_path=None,
              log=None) -> tuple[ModelParams, list]:
    """Plain flow-matching fine-tuning on real data.

    Returns the params and ``(step, heldout_loss)`` rows.
    """
    train = dataset.train
    x_train, c_train = dataset.latents(train), dataset.conditions(train)
    held = dataset.heldout or train
    x_held, c_held = dataset.latents(held), dataset.conditions(held)
    opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
    g = rngs.stream(seed, rngs.RDPO, 0xFFFF)
    rows = [(0, heldout_flow_loss(theta, x_held, c_held, seed, cfg.heldout_draws))]
    for step in range(1, cfg.steps + 1):
        idx = g.integers(0, len(train), cfg.batch)
        try:
            _, grads = flow_loss_and_grad(theta, x_train[idx], c_train[idx], g)
        except Divergence as exc:
            raise Divergence(f"fine-tuning diverged at step {step}: {exc}") from exc
        theta = opt.step(theta, grads)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            rows.append((step, heldout_flow_loss(theta, x_held, c_held, seed, cfg.heldout_draws)))
            if log and step % (cfg.eval_every * 5) == 0:
                log(f"train-sft step {step}: heldout {rows[-1][1]:.4f}")
    if curve_path is not None:
        with open(curve_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "heldout_loss"])
            for step, loss in rows:
                w.writerow([step, f"{loss:.8g}"])
    return theta, rows
