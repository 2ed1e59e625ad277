"""Command-line entry point: one subcommand per pipeline stage.

All outputs land in ``<out>/<config-hash-12>-seed<seed>/``. Every stage
builds its missing prerequisites first, and an existing artifact is reused
(its hash is printed again) unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as C
from .formats import FormatError, sha256_file

EXIT_USAGE = 2
EXIT_FAILURE = 1
EXIT_DIVERGED = 3


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code
        self.status = status


class Run:
    """A run directory plus the resolved config and seed that name it."""

    def __init__(self, cfg: dict, seed: int, out: Path, jobs: int, force: bool, quiet: bool = False):
        self.cfg = cfg
        self.seed = seed
        self.jobs = jobs
        self.force = force
        self.quiet = quiet
        self.hash = C.config_hash(cfg)
        self.dir = out / f"{self.hash[:12]}-seed{seed}"
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_path = self.dir / "config.json"
        if not cfg_path.exists():
            cfg_path.write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
        self._dataset = None
        self._emitted = set()

    def log(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)

    def path(self, name: str) -> Path:
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def fresh(self, *names) -> bool:
        """True when every artifact exists and ``--force`` was not given."""
        return not self.force and all((self.dir / n).exists() for n in names)

    def record(self, name: str) -> str:
        """Hash an artifact into the manifest and return the hash."""
        digest = sha256_file(self.dir / name)
        manifest_path = self.dir / "manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {
            "config_hash": self.hash, "seed": self.seed, "artifacts": {}}
        manifest["artifacts"][name] = digest
        manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        return digest

    def emit(self, name: str) -> str:
        digest = self.record(name)
        if name not in self._emitted:
            self._emitted.add(name)
            print(f"{name} sha256={digest}")
        return digest


# ---------------------------------------------------------------------------
# stages

def stage_data(run: Run):
    from .dynamics import Dataset, make_dataset

    name = "data.bin"
    if not run.fresh(name):
        run.log("generating dataset")
        make_dataset(C.dataset_config(run.cfg, run.seed), run.path(name))
    run.emit(name)
    if run._dataset is None:
        run._dataset = Dataset.load(run.dir / name)
    return run._dataset


def stage_base(run: Run):
    from .flowmodel import ModelParams, train_base

    ds = stage_data(run)
    name = "base.ckpt"
    if not run.fresh(name, "base_curve.csv"):
        run.log("training base model")
        params, _ = train_base(ds, C.train_config(run.cfg), run.seed, run.path("base_curve.csv"), run.log)
        params.save(run.path(name))
        run.record("base_curve.csv")
    run.emit(name)
    return ModelParams.load(run.dir / name)


def stage_pairs(run: Run, s: int, K: int):
    from .pairgen import PairDataset, build_pair_dataset, verify_selection

    base = stage_base(run)
    ds = stage_data(run)
    name = f"pairs_s{s}_k{K}.bin"
    if not run.fresh(name):
        run.log(f"generating {run.cfg['pairs.count']} pairs at s={s}, K={K}")
        build_pair_dataset(base, ds, s, K, run.cfg["pairs.count"], run.seed, run.jobs,
                           checkpoint=sha256_file(run.dir / "base.ckpt"), path=run.path(name))
    run.emit(name)
    pairs = PairDataset.load(run.dir / name)
    ok = verify_selection(pairs)
    print(f"selection verified {int(ok.sum())}/{len(ok)}")
    return pairs


def stage_audit(run: Run, K: int):
    from .pairgen import PairDataset, build_pair_dataset, concat, pair_audit, write_audit

    base = stage_base(run)
    ds = stage_data(run)
    name = f"audit_k{K}.csv"
    if not run.fresh(name):
        parts = []
        for s in run.cfg["audit.s"]:
            pname = f"audit/pairs_s{s}_k{K}.bin"
            if not run.fresh(pname):
                run.log(f"audit pairs at s={s}")
                build_pair_dataset(base, ds, s, K, run.cfg["audit.count"], run.seed, run.jobs,
                                   checkpoint=sha256_file(run.dir / "base.ckpt"), path=run.path(pname))
            run.record(pname)
            parts.append(PairDataset.load(run.dir / pname))
        write_audit(run.path(name), pair_audit(concat(parts)))
    run.emit(name)
    return read_audit(run.dir / name)


def read_audit(path):
    import csv

    from .pairgen import AuditRow

    with open(path) as fh:
        return [AuditRow(int(r["s"]), int(r["n"]), float(r["accuracy"]), float(r["ci95"]))
                for r in csv.DictReader(fh)]


def rdpo_dir(sft: bool) -> str:
    return "rdpo_sft" if sft else "rdpo_nosft"


def stage_rdpo(run: Run, sft: bool):
    from .flowmodel import ModelParams
    from .preference import progressive_train

    base = stage_base(run)
    ds = stage_data(run)
    rcfg = C.rdpo_config(run.cfg, sft)
    sub = rdpo_dir(sft)
    names = [f"{sub}/iter{i}.ckpt" for i in range(1, len(rcfg.schedule) + 1)]
    if not run.fresh(*names):
        run.log(f"preference training ({'with' if sft else 'without'} interleaved fine-tuning)")
        run.path(names[0])
        progressive_train(base, ds, rcfg, run.seed, run.dir / sub, jobs=run.jobs, log=run.log)
        for i in range(1, len(rcfg.schedule) + 1):
            run.record(f"{sub}/report_iter{i}.csv")
            run.record(f"{sub}/pairs_iter{i}.bin")
    for n in names:
        run.emit(n)
    return [ModelParams.load(run.dir / n) for n in names]


def stage_sft(run: Run):
    from .flowmodel import ModelParams
    from .preference import sft_train

    base = stage_base(run)
    ds = stage_data(run)
    name = "sft.ckpt"
    if not run.fresh(name, "sft_curve.csv"):
        run.log("supervised fine-tuning")
        params, _ = sft_train(base, ds, C.sft_config(run.cfg), run.seed, run.path("sft_curve.csv"), run.log)
        params.save(run.path(name))
        run.record("sft_curve.csv")
    run.emit(name)
    return ModelParams.load(run.dir / name)


CHECKPOINT_NAMES = {
    "base": "base.ckpt",
    "sft": "sft.ckpt",
    "rdpo_wo_sft": "rdpo_nosft/iter1.ckpt",
    "rdpo_w_sft": "rdpo_sft/iter1.ckpt",
    "iter1": "rdpo_sft/iter1.ckpt",
    "iter2": "rdpo_sft/iter2.ckpt",
    "iter3": "rdpo_sft/iter3.ckpt",
}


def resolve_checkpoint(run: Run, ref: str):
    """A named run checkpoint (built on demand) or a path to a checkpoint file."""
    from .flowmodel import ModelParams

    if ref in CHECKPOINT_NAMES:
        if ref == "base":
            return stage_base(run)
        if ref == "sft":
            return stage_sft(run)
        if not (run.dir / CHECKPOINT_NAMES[ref]).exists():
            stage_rdpo(run, ref != "rdpo_wo_sft")
        return ModelParams.load(run.dir / CHECKPOINT_NAMES[ref])
    path = Path(ref)
    if not path.exists():
        raise CliError("missing_checkpoint", f"no checkpoint named or at {ref}")
    return ModelParams.load(path)


def conditions(run: Run):
    from .evaluation import heldout_conditions

    ds = stage_data(run)
    try:
        return heldout_conditions(ds, run.cfg["eval.conditions"])
    except ValueError as exc:
        raise CliError("bad_config", str(exc), EXIT_USAGE) from exc


def stage_eval(run: Run, ref: str):
    from .evaluation import evaluate_model

    params = resolve_checkpoint(run, ref)
    conds = conditions(run)
    name = f"eval/{Path(ref).stem if ref not in CHECKPOINT_NAMES else ref}.json"
    if not run.fresh(name):
        rep = evaluate_model(params, conds, run.cfg["eval.samples"], run.seed, run.jobs,
                             run.cfg["eval.flow_draws"], {"config_hash": run.hash})
        run.path(name).write_text(rep.to_json())
    run.emit(name)
    return json.loads((run.dir / name).read_text())


def stage_compare(run: Run, a: str, b: str):
    from .evaluation import compare_models

    pa, pb = resolve_checkpoint(run, a), resolve_checkpoint(run, b)
    w = compare_models(pa, pb, conditions(run), run.seed, run.jobs)
    out = {"a": a, "b": b, "a_sha256": pa.digest(), "b_sha256": pb.digest(), "win_rate": w.rate,
           "ci95": w.ci95, "n": w.n, "wins": w.wins, "ties": w.ties, "seed": run.seed,
           "config_hash": run.hash}
    print(json.dumps(out, sort_keys=True))
    return out


def stage_ablation(run: Run):
    from .evaluation import ABLATION_ROWS, ablation_csv, ablation_table, plot_summary
    from .flowmodel import ModelParams

    name = "ablation.csv"
    if not run.fresh(name):
        stage_base(run)
        stage_sft(run)
        stage_rdpo(run, False)
        stage_rdpo(run, True)
        cks = {}
        for row in ABLATION_ROWS:
            p = run.dir / CHECKPOINT_NAMES[row]
            cks[row] = ModelParams.load(p) if p.exists() else None
        run.log("evaluating checkpoints")
        rows, reports = ablation_table(cks, conditions(run), run.cfg["eval.samples"], run.seed, run.jobs)
        for row_name, rep in reports.items():
            rep.provenance["config_hash"] = run.hash
            run.path(f"eval/{row_name}.json").write_text(rep.to_json())
            run.record(f"eval/{row_name}.json")
        run.path(name).write_text(ablation_csv(rows))
        if run.cfg["eval.plot"]:
            audit = read_audit(run.dir / f"audit_k{run.cfg['pairs.K']}.csv") \
                if (run.dir / f"audit_k{run.cfg['pairs.K']}.csv").exists() else []
            if plot_summary(run.path("summary.svg"), audit, rows):
                run.record("summary.svg")
    run.emit(name)
    return (run.dir / name).read_text()


def stage_repro(run: Run):
    stage_data(run)
    stage_base(run)
    stage_audit(run, run.cfg["pairs.K"])
    stage_rdpo(run, True)
    stage_rdpo(run, False)
    stage_sft(run)
    text = stage_ablation(run)
    print(text, end="")
    return text


# ---------------------------------------------------------------------------
# argument handling

COMMANDS = {
    "gen-data": "simulate and split the trajectory dataset",
    "train-base": "train the base flow model",
    "gen-pairs": "build a preference pair set at one reverse step",
    "pair-audit": "score pair labels with the physics oracle at several reverse steps",
    "train-rdpo": "progressive preference training",
    "train-sft": "plain flow-matching fine-tuning (ablation arm)",
    "eval": "residual statistics of one checkpoint on held-out conditions",
    "compare": "paired win rate of one checkpoint over another",
    "ablation": "evaluate every ablation checkpoint and write ablation.csv",
    "repro": "run the whole pipeline and print the ablation table",
    "config": "print the resolved config and its hash",
}


def build_parser() -> argparse.ArgumentParser:
    epilog = ("config keys (YAML, flat dotted or nested; unknown keys are rejected):\n" + C.describe()
              + "\n\ncheckpoint names: " + ", ".join(CHECKPOINT_NAMES))
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file (defaults when omitted)")
    common.add_argument("--seed", type=int, default=0, metavar="U64", help="run seed (default 0)")
    common.add_argument("--out", default="runs", metavar="DIR", help="output root (default ./runs)")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker threads (default 1)")
    common.add_argument("--force", action="store_true", help="recompute and overwrite existing artifacts")
    common.add_argument("--quiet", action="store_true", help="no progress messages")

    parser = argparse.ArgumentParser(prog="rdpo", description=__doc__.splitlines()[0], epilog=epilog,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for cmd, text in COMMANDS.items():
        p = sub.add_parser(cmd, parents=[common], help=text, description=text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if cmd in ("gen-pairs", "pair-audit"):
            p.add_argument("--k", type=int, metavar="K", help="override pairs.K")
        if cmd == "gen-pairs":
            p.add_argument("--s", type=int, metavar="S", help="override pairs.s")
        if cmd == "train-rdpo":
            p.add_argument("--beta", type=float, help="override rdpo.beta")
            p.add_argument("--iters", metavar="SCHEDULE", help="override rdpo.schedule, e.g. 42,40,42+40")
            g = p.add_mutually_exclusive_group()
            g.add_argument("--sft", dest="sft", action="store_true", default=None,
                           help="interleave flow-matching steps (default from rdpo.sft_interleave)")
            g.add_argument("--no-sft", dest="sft", action="store_false", help="preference steps only")
        if cmd == "eval":
            p.add_argument("--ckpt", default="base", help="checkpoint name or path (default base)")
        if cmd == "compare":
            p.add_argument("--a", required=True, help="checkpoint name or path")
            p.add_argument("--b", default="base", help="checkpoint name or path (default base)")
    return parser


def _overrides(args) -> dict:
    """Config keys changed by flags; these feed the config hash."""
    out = {}
    if getattr(args, "k", None) is not None:
        out["pairs.K"] = args.k
    if getattr(args, "s", None) is not None:
        out["pairs.s"] = args.s
    if getattr(args, "beta", None) is not None:
        out["rdpo.beta"] = args.beta
    if getattr(args, "iters", None) is not None:
        out["rdpo.schedule"] = args.iters
    return out


def run_command(args) -> None:
    cfg = C.load(args.config) if args.config else C.resolve()
    over = _overrides(args)
    if over:
        cfg = C.resolve({**cfg, **over})
    if args.seed < 0 or args.seed >= 2**64:
        raise CliError("bad_seed", "seed must be an unsigned 64-bit integer", EXIT_USAGE)
    if args.jobs < 1:
        raise CliError("bad_jobs", "--jobs must be at least 1", EXIT_USAGE)
    if args.command == "config":
        print(json.dumps({"config_hash": C.config_hash(cfg), "config": cfg}, sort_keys=True, indent=2))
        return
    run = Run(cfg, args.seed, Path(args.out), args.jobs, args.force, args.quiet)
    print(f"run_dir={run.dir}")
    cmd = args.command
    if cmd == "gen-data":
        stage_data(run)
    elif cmd == "train-base":
        stage_base(run)
    elif cmd == "gen-pairs":
        stage_pairs(run, cfg["pairs.s"], cfg["pairs.K"])
    elif cmd == "pair-audit":
        for r in stage_audit(run, cfg["pairs.K"]):
            print(f"s={r.s} n={r.n} accuracy={r.accuracy:.4f} ci95={r.ci95:.4f}")
    elif cmd == "train-rdpo":
        sft = cfg["rdpo.sft_interleave"] if args.sft is None else args.sft
        stage_rdpo(run, sft)
    elif cmd == "train-sft":
        stage_sft(run)
    elif cmd == "eval":
        print(json.dumps(stage_eval(run, args.ckpt)["overall"], sort_keys=True))
    elif cmd == "compare":
        stage_compare(run, args.a, args.b)
    elif cmd == "ablation":
        print(stage_ablation(run), end="")
    elif cmd == "repro":
        stage_repro(run)


def _fail(code: str, message: str, status: int) -> int:
    line = json.dumps({"error": code, "message": " ".join(str(message).split())}, sort_keys=True)
    print(line, file=sys.stderr)
    return status


def main(argv=None) -> int:
    from .evaluation import TooManyDiverged
    from .flowmodel import Divergence

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run_command(args)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.status)
    except C.ConfigError as exc:
        return _fail("bad_config", str(exc), EXIT_USAGE)
    except (Divergence, TooManyDiverged) as exc:
        return _fail("diverged", str(exc), EXIT_DIVERGED)
    except FormatError as exc:
        return _fail("bad_file", str(exc), EXIT_FAILURE)
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''} {exc.strerror or exc}", EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
