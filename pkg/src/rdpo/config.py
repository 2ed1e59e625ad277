"""Run configuration: flat dotted keys with documented defaults.

A config file is YAML. Keys may be written flat (``rdpo.beta: 2.0``) or
nested; both flatten to the same dotted names. Unknown keys are an error.
The hash of a config is the sha256 of its canonical JSON (all keys,
defaults filled in, sorted), so it does not depend on key order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .dynamics import DEFAULT_RANGES, KIND_NAMES, PARAM_NAMES, DatasetConfig, Kind, WorldFamily


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    default: object
    help: str


def _kind_slug(kind: Kind) -> str:
    return {
        Kind.CONSTANT_VELOCITY: "constant_velocity",
        Kind.PROJECTILE: "projectile",
        Kind.BOUNCING_BALL: "bouncing_ball",
        Kind.SPRING: "spring_oscillator",
    }[kind]


def _keys() -> list:
    keys = []
    for k in Kind:
        keys.append(Key(f"data.count.{_kind_slug(k)}", 1000, f"{KIND_NAMES[k]} trajectories"))
    keys += [
        Key("data.frames", 16, "frames per trajectory"),
        Key("data.dt", 0.0625, "seconds between frames"),
        Key("data.heldout_fraction", 0.1, "share of trajectories held out"),
    ]
    for k in Kind:
        for name, rng_ in zip(PARAM_NAMES[k], DEFAULT_RANGES[k]):
            keys.append(Key(f"world.{_kind_slug(k)}.{name}", list(rng_), f"[lo, hi] range of {name}"))
    keys += [
        Key("model.width", 128, "hidden width"),
        Key("model.depth", 4, "residual blocks"),
        Key("model.emb", 16, "time embedding size"),
        Key("model.T", 50, "reverse sampling steps"),
        Key("train.lr", 1e-3, "base learning rate (AdamW)"),
        Key("train.weight_decay", 1e-4, "AdamW decoupled weight decay"),
        Key("train.batch", 64, "base training batch"),
        Key("train.steps", 6000, "base training steps"),
        Key("train.warmup", 200, "linear warmup steps before cosine decay"),
        Key("train.eval_every", 500, "steps between held-out loss evaluations"),
        Key("train.heldout_draws", 4, "noise draws per held-out latent"),
        Key("pairs.s", 42, "reverse step for gen-pairs"),
        Key("pairs.K", 8, "noised candidates per pair"),
        Key("pairs.count", 2000, "pairs written by gen-pairs"),
        Key("audit.s", [20, 40, 50], "reverse steps audited by pair-audit"),
        Key("audit.count", 300, "pairs per audited step"),
        Key("rdpo.beta", 1.0, "preference strength"),
        Key("rdpo.lr", 1e-6, "fine-tuning learning rate (AdamW)"),
        Key("rdpo.weight_decay", 0.0, "AdamW decoupled weight decay"),
        Key("rdpo.steps_per_iter", 2000, "optimizer steps per curriculum iteration"),
        Key("rdpo.batch", 32, "batch for both branches"),
        Key("rdpo.schedule", "42,40,42+40", "reverse step per iteration; a+b mixes earlier sets"),
        Key("rdpo.pairs_per_iter", 2000, "pairs generated per iteration"),
        Key("rdpo.K", 8, "noised candidates per pair"),
        Key("rdpo.sft_interleave", True, "alternate preference and flow-matching steps"),
        Key("rdpo.accuracy_every", 100, "steps between implicit reward accuracy checks"),
        Key("rdpo.accuracy_pairs", 256, "pairs used for the accuracy check"),
        Key("rdpo.accuracy_draws", 4, "noise draws per pair for the accuracy check"),
        Key("rdpo.residual_every", 500, "steps between held-out residual checks"),
        Key("rdpo.residual_conditions", 128, "held-out conditions for the residual check"),
        Key("sft.lr", 1e-6, "fine-tuning learning rate (AdamW)"),
        Key("sft.weight_decay", 0.0, "AdamW decoupled weight decay"),
        Key("sft.steps", 2000, "fine-tuning steps"),
        Key("sft.batch", 32, "fine-tuning batch"),
        Key("sft.eval_every", 100, "steps between held-out loss evaluations"),
        Key("eval.conditions", 300, "held-out conditions"),
        Key("eval.samples", 4, "samples per condition"),
        Key("eval.flow_draws", 4, "noise draws per latent for held-out flow loss"),
        Key("eval.plot", True, "write summary.svg when matplotlib is available"),
    ]
    return keys


KEYS = {k.name: k for k in _keys()}


def defaults() -> dict:
    return {name: (list(k.default) if isinstance(k.default, list) else k.default) for name, k in KEYS.items()}


def _flatten(doc, prefix="") -> dict:
    out = {}
    for k, v in doc.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, name + "."))
        else:
            out[name] = v
    return out


def _coerce(name: str, value):
    default = KEYS[name].default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                  for v in value):
            raise ConfigError(f"{name} must be a list of numbers")
        if name == "audit.s":
            if not all(isinstance(v, int) for v in value):
                raise ConfigError(f"{name} must be a list of integers")
            return list(value)
        return [float(v) for v in value]
    if isinstance(default, str):
        if not isinstance(value, (str, int)):
            raise ConfigError(f"{name} must be a string")
        return str(value)
    raise ConfigError(f"{name}: unsupported type")


def resolve(doc: dict | None = None) -> dict:
    """Defaults overlaid with ``doc``; rejects unknown keys and bad types."""
    cfg = defaults()
    for name, value in _flatten(doc or {}).items():
        if name not in KEYS:
            raise ConfigError(f"unknown key {name}")
        cfg[name] = _coerce(name, value)
    validate(cfg)
    return cfg


def load(path) -> dict:
    import yaml

    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {str(exc).splitlines()[0]}") from exc
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a mapping of keys to values")
    return resolve(doc)


def validate(cfg: dict) -> None:
    from .preference import parse_schedule

    for name in ("model.T", "model.width", "model.depth", "model.emb", "data.frames", "train.steps",
                 "train.batch", "pairs.count", "audit.count", "rdpo.batch", "rdpo.pairs_per_iter",
                 "sft.batch", "eval.conditions", "eval.samples", "eval.flow_draws", "train.eval_every",
                 "train.heldout_draws", "sft.eval_every", "rdpo.accuracy_every", "rdpo.residual_every",
                 "rdpo.accuracy_pairs", "rdpo.accuracy_draws", "rdpo.residual_conditions"):
        if cfg[name] < 1:
            raise ConfigError(f"{name} must be at least 1")
    for name in ("rdpo.steps_per_iter", "sft.steps", "train.warmup"):
        if cfg[name] < 0:
            raise ConfigError(f"{name} must be non-negative")
    if cfg["model.emb"] % 2:
        raise ConfigError("model.emb must be even")
    if cfg["data.frames"] < 3:
        raise ConfigError("data.frames must be at least 3")
    T = cfg["model.T"]
    for name in ("pairs.K", "rdpo.K"):
        if not 1 <= cfg[name] <= 64:
            raise ConfigError(f"{name} must lie in [1, 64]")
    if not 1 <= cfg["pairs.s"] <= T:
        raise ConfigError(f"pairs.s must lie in [1, {T}]")
    if not cfg["audit.s"] or any(not 1 <= s <= T for s in cfg["audit.s"]):
        raise ConfigError(f"audit.s must be a nonempty list of steps in [1, {T}]")
    try:
        sched = parse_schedule(cfg["rdpo.schedule"])
    except ValueError as exc:
        raise ConfigError(f"rdpo.schedule: {exc}") from exc
    if not sched or any(not 1 <= s <= T for entry in sched for s in entry):
        raise ConfigError(f"rdpo.schedule needs steps in [1, {T}]")
    if cfg["rdpo.beta"] <= 0:
        raise ConfigError("rdpo.beta must be positive")
    for name in ("train.lr", "rdpo.lr", "sft.lr", "data.dt"):
        if cfg[name] < 0 or (name == "data.dt" and cfg[name] == 0):
            raise ConfigError(f"{name} must be positive")
    if not 0 <= cfg["data.heldout_fraction"] < 1:
        raise ConfigError("data.heldout_fraction must lie in [0, 1)")
    if sum(cfg[f"data.count.{_kind_slug(k)}"] for k in Kind) < 1 or \
            any(cfg[f"data.count.{_kind_slug(k)}"] < 0 for k in Kind):
        raise ConfigError("data counts must be non-negative with a positive total")
    try:
        families(cfg)
    except ValueError as exc:
        raise ConfigError(f"world ranges: {exc}") from exc


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# typed views

def families(cfg: dict) -> dict:
    out = {}
    for k in Kind:
        ranges = []
        for name in PARAM_NAMES[k]:
            r = cfg[f"world.{_kind_slug(k)}.{name}"]
            if len(r) != 2:
                raise ValueError(f"{_kind_slug(k)}.{name} needs [lo, hi]")
            ranges.append(tuple(r))
        out[k] = WorldFamily(k, tuple(ranges))
    return out


def dataset_config(cfg: dict, seed: int) -> DatasetConfig:
    return DatasetConfig(
        counts={k: cfg[f"data.count.{_kind_slug(k)}"] for k in Kind},
        frames=cfg["data.frames"], dt=cfg["data.dt"], seed=seed,
        heldout_fraction=cfg["data.heldout_fraction"], families=families(cfg),
    )


def train_config(cfg: dict):
    from .flowmodel import TrainConfig

    return TrainConfig(
        width=cfg["model.width"], depth=cfg["model.depth"], emb=cfg["model.emb"], T=cfg["model.T"],
        lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"], batch=cfg["train.batch"],
        steps=cfg["train.steps"], eval_every=cfg["train.eval_every"],
        heldout_draws=cfg["train.heldout_draws"], warmup=cfg["train.warmup"],
    )


def rdpo_config(cfg: dict, sft_interleave: bool | None = None):
    from .preference import RdpoConfig, parse_schedule

    return RdpoConfig(
        beta=cfg["rdpo.beta"], lr=cfg["rdpo.lr"], weight_decay=cfg["rdpo.weight_decay"],
        steps_per_iter=cfg["rdpo.steps_per_iter"], batch=cfg["rdpo.batch"],
        schedule=parse_schedule(cfg["rdpo.schedule"]), pairs_per_iter=cfg["rdpo.pairs_per_iter"],
        K=cfg["rdpo.K"], sft_interleave=cfg["rdpo.sft_interleave"] if sft_interleave is None else sft_interleave,
        accuracy_every=cfg["rdpo.accuracy_every"], accuracy_pairs=cfg["rdpo.accuracy_pairs"],
        accuracy_draws=cfg["rdpo.accuracy_draws"], residual_every=cfg["rdpo.residual_every"],
        residual_conditions=cfg["rdpo.residual_conditions"],
    )


def sft_config(cfg: dict):
    from .preference import SftConfig

    return SftConfig(lr=cfg["sft.lr"], weight_decay=cfg["sft.weight_decay"], steps=cfg["sft.steps"],
                     batch=cfg["sft.batch"], eval_every=cfg["sft.eval_every"],
                     heldout_draws=cfg["train.heldout_draws"])


def describe() -> str:
    """One line per key: name, default, meaning."""
    width = max(len(k) for k in KEYS)
    lines = []
    for name, k in KEYS.items():
        lines.append(f"  {name:<{width}}  {json.dumps(k.default):<14}  {k.help}")
    return "\n".join(lines)
