"""Oracle-based evaluation: residual statistics, paired win rates, ablation tables."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .dynamics import KIND_NAMES, Kind
from .flowmodel import ModelParams, heldout_flow_loss, velocity
from .formats import to_f32
from .pairgen import CHUNK, ci95, score_latents

MAX_DIVERGED = 0.01
ABLATION_ROWS = ("base", "sft", "rdpo_wo_sft", "rdpo_w_sft", "iter1", "iter2", "iter3")
ABLATION_COLUMNS = ("checkpoint", "status", "sha256", "median_residual", "mean_residual",
                    "heldout_flow_loss", "win_rate_vs_base", "win_rate_ci95")


class TooManyDiverged(FloatingPointError):
    pass


@dataclass(eq=False)
class ConditionSet:
    """Held-out conditions plus what is needed to score samples drawn for them."""

    ids: np.ndarray
    kinds: np.ndarray
    conditions: np.ndarray
    latents: np.ndarray
    frames: int
    dt: float
    families: dict

    def __len__(self) -> int:
        return len(self.ids)


def heldout_conditions(dataset, n: int = 300) -> ConditionSet:
    """The first ``n`` held-out trajectories (ids are already shuffled across kinds)."""
    held = dataset.heldout
    if not held:
        raise ValueError("dataset has no held-out split")
    if n > len(held):
        raise ValueError(f"asked for {n} held-out conditions, dataset has {len(held)}")
    trajs = held[:n]
    return ConditionSet(np.array([t.id for t in trajs], dtype=np.int64), dataset.kinds(trajs),
                        to_f32(dataset.conditions(trajs)), dataset.latents(trajs),
                        dataset.frames, dataset.dt, dict(dataset.families))


def _draw_sample_noise(seed: int, ids, per: int, dim: int, tag: int) -> np.ndarray:
    return np.stack([rngs.stream(seed, rngs.EVAL, tag, int(i)).standard_normal((per, dim)) for i in ids])


def _integrate_rows(params: ModelParams, x, c) -> np.ndarray:
    """Euler from t = 1 to 0; rows that blow up come back as NaN instead of raising."""
    T = params.T
    with np.errstate(all="ignore"):
        for k in range(T, 0, -1):
            x = x - velocity(params, x, np.full(len(x), k / T), c) / T
    x[~np.all(np.isfinite(x), axis=1)] = np.nan
    return x


def generate(params: ModelParams, conds: ConditionSet, per: int, seed: int, tag: int = 0,
             jobs: int = 1) -> np.ndarray:
    """``per`` samples for every condition, shape ``(n, per, latent_dim)``.

    Noise for condition ``i`` comes from its own substream, and the work is
    chunked by a fixed size, so ``jobs`` never changes the result.
    """
    n, dim = len(conds), params.latent_dim

    def run(lo):
        hi = min(lo + CHUNK, n)
        eps = _draw_sample_noise(seed, conds.ids[lo:hi], per, dim, tag).reshape(-1, dim)
        c = np.repeat(conds.conditions[lo:hi], per, axis=0)
        return _integrate_rows(params, eps, c).reshape(hi - lo, per, dim)

    starts = list(range(0, n, CHUNK))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    return np.concatenate(parts)


def score_samples(samples: np.ndarray, conds: ConditionSet) -> np.ndarray:
    """Residual per sample, shape ``(n, per)``; diverged samples score NaN."""
    n, per, dim = samples.shape
    flat = samples.reshape(n * per, dim)
    kinds = np.repeat(conds.kinds, per)
    ok = np.all(np.isfinite(flat), axis=1)
    out = np.full(n * per, np.nan)
    if ok.any():
        out[ok] = score_latents(flat[ok], kinds[ok], conds.families, conds.frames, conds.dt)
    return out.reshape(n, per)


def summarize(values: np.ndarray) -> dict:
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"n": 0, "median": None, "mean": None, "iqr": None}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "median": float(med), "mean": float(v.mean()), "iqr": float(q3 - q1)}


@dataclass
class EvalReport:
    overall: dict
    per_kind: dict
    heldout_flow_loss: float
    diverged: int
    n_samples: int
    provenance: dict = field(default_factory=dict)
    residuals: np.ndarray | None = None

    @property
    def median(self) -> float:
        return self.overall["median"]

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_kind": self.per_kind,
            "heldout_flow_loss": self.heldout_flow_loss,
            "diverged": self.diverged,
            "n_samples": self.n_samples,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def report_from_residuals(res: np.ndarray, conds: ConditionSet, flow_loss: float,
                          provenance: dict | None = None) -> EvalReport:
    """Aggregate a ``(n, per)`` residual table; more than 1% diverged is an error."""
    diverged = int(np.count_nonzero(~np.isfinite(res)))
    if diverged > MAX_DIVERGED * res.size:
        raise TooManyDiverged(f"{diverged} of {res.size} samples diverged")
    per_kind = {}
    for k in Kind:
        m = conds.kinds == int(k)
        if m.any():
            per_kind[KIND_NAMES[k]] = summarize(res[m])
    return EvalReport(summarize(res), per_kind, flow_loss, diverged, int(res.size),
                      dict(provenance or {}), res)


def evaluate_model(params: ModelParams, conds: ConditionSet, n_samples: int = 4, seed: int = 0,
                   jobs: int = 1, flow_draws: int = 4, provenance: dict | None = None) -> EvalReport:
    """Sample every held-out condition from pure noise and score with the oracle."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    samples = generate(params, conds, n_samples, seed, tag=0, jobs=jobs)
    res = score_samples(samples, conds)
    flow = heldout_flow_loss(params, conds.latents, conds.conditions, seed, flow_draws)
    prov = {"checkpoint": params.digest(), "seed": seed, "conditions": len(conds),
            "samples_per_condition": n_samples}
    prov.update(provenance or {})
    return report_from_residuals(res, conds, flow, prov)


def score_reference(conds: ConditionSet) -> EvalReport:
    """Scores the held-out trajectories themselves: the oracle's lower bound."""
    res = score_samples(conds.latents[:, None, :], conds)
    return report_from_residuals(res, conds, float("nan"), {"source": "simulated"})


# ---------------------------------------------------------------------------
# paired comparison

@dataclass
class WinRate:
    rate: float
    ci95: float
    n: int
    wins: int
    ties: int


def win_rate(res_a, res_b) -> WinRate:
    """Fraction of conditions where ``a`` scores strictly lower; ties (and double divergence) count 0.5."""
    a = np.where(np.isfinite(res_a), res_a, np.inf)
    b = np.where(np.isfinite(res_b), res_b, np.inf)
    wins = int(np.count_nonzero(a < b))
    ties = int(np.count_nonzero(a == b))
    n = len(a)
    rate = (wins + 0.5 * ties) / n
    return WinRate(rate, ci95(rate, n), n, wins, ties)


def paired_residuals(params: ModelParams, conds: ConditionSet, seed: int, jobs: int = 1) -> np.ndarray:
    """One sample per condition on the shared comparison noise."""
    return score_samples(generate(params, conds, 1, seed, tag=1, jobs=jobs), conds)[:, 0]


def compare_models(params_a: ModelParams, params_b: ModelParams, conds: ConditionSet, seed: int = 0,
                   jobs: int = 1) -> WinRate:
    """Win rate of ``a`` over ``b``; both models see the same noise for each condition."""
    return win_rate(paired_residuals(params_a, conds, seed, jobs), paired_residuals(params_b, conds, seed, jobs))


# ---------------------------------------------------------------------------
# ablation table

@dataclass
class AblationRow:
    checkpoint: str
    status: str
    sha256: str = ""
    median: float = math.nan
    mean: float = math.nan
    flow_loss: float = math.nan
    win: float = math.nan
    win_ci: float = math.nan


def ablation_table(checkpoints: dict, conds: ConditionSet, n_samples: int = 4, seed: int = 0,
                   jobs: int = 1, path=None) -> tuple[list, dict]:
    """Evaluate each named checkpoint on identical conditions and seeds.

    Rows follow ``ABLATION_ROWS``; a missing or ``None`` entry yields an
    ``absent`` row. Checkpoints that share bytes are evaluated once.
    Returns the rows and the per-checkpoint reports.
    """
    cache, reports, paired = {}, {}, {}
    base = checkpoints.get("base")
    base_paired = None
    if base is not None:
        base_paired = paired[base.digest()] = paired_residuals(base, conds, seed, jobs)
    rows = []
    for name in ABLATION_ROWS:
        p = checkpoints.get(name)
        if p is None:
            rows.append(AblationRow(name, "absent"))
            continue
        digest = p.digest()
        if digest not in cache:
            cache[digest] = evaluate_model(p, conds, n_samples, seed, jobs)
        rep = reports[name] = cache[digest]
        row = AblationRow(name, "ok", digest, rep.overall["median"], rep.overall["mean"], rep.heldout_flow_loss)
        if base_paired is not None:
            if digest not in paired:
                paired[digest] = paired_residuals(p, conds, seed, jobs)
            w = win_rate(paired[digest], base_paired)
            row.win, row.win_ci = w.rate, w.ci95
        rows.append(row)
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(ablation_csv(rows))
    return rows, reports


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.9g}"


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r.checkpoint, r.status, r.sha256, _fmt(r.median), _fmt(r.mean), _fmt(r.flow_loss),
                    _fmt(r.win), _fmt(r.win_ci)])
    return buf.getvalue()


def plot_summary(path, audit_rows, ablation_rows) -> bool:
    """Two-panel SVG: audit accuracy against s, median residual against iteration.

    Returns False when matplotlib is not installed.
    """
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        matplotlib.rcParams["svg.hashsalt"] = "rdpo"
    except ImportError:
        return False
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    if audit_rows:
        ax1.errorbar([r.s for r in audit_rows], [r.accuracy for r in audit_rows],
                     yerr=[r.ci95 for r in audit_rows], marker="o", capsize=3)
        ax1.axhline(0.5, color="grey", lw=0.8, ls="--")
    ax1.set_xlabel("reverse step s")
    ax1.set_ylabel("pair accuracy (oracle)")
    iters = [r for r in ablation_rows if r.checkpoint in ("base", "iter1", "iter2", "iter3") and r.status == "ok"]
    ax2.plot(range(len(iters)), [r.median for r in iters], marker="o")
    ax2.set_xticks(range(len(iters)), [r.checkpoint for r in iters])
    ax2.set_xlabel("training stage")
    ax2.set_ylabel("median physics residual")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True
