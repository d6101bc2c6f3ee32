"""One declarative config file drives every subcommand.

The file is JSON.  Unknown keys are rejected rather than ignored, and
validation reports every problem in one pass so a bad config needs one
edit cycle, not ten.  Flag overrides use dotted paths (train.epochs=3)
with JSON-parsed values.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .errors import ConfigError

WORKERS_ENV = "REMAP_WORKERS"


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class EntropySection:
    bins: int = 64
    epsilon: float = 1e-6
    pair_budget: int = 1000
    min_samples: int = 50


@dataclass
class WhiteningSection:
    out_dim: int = 128
    eigen_floor: float | None = None


@dataclass
class TrainSection:
    margin: float = 0.1
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-5
    accumulate: int = 64
    remine_every: int = 3000
    epochs: int = 1
    checkpoint_every: int = 0


@dataclass
class PQSection:
    m: int = 16
    k: int = 256
    iters: int = 25


@dataclass
class EvalSection:
    search: str = "exhaustive"
    truncate_dim: int | None = None
    qe_topk: int = 0
    multiscale: bool = False
    include_self: bool = True
    recall4: bool = False


@dataclass
class SynthSection:
    classes: int = 5
    per_class: int = 20


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = field(default_factory=_default_workers)
    layers: list[int] = field(default_factory=lambda: [1])
    grid_scales: int = 4
    method: str = "REMAP"
    alpha_init: str = "ones"
    entropy: EntropySection = field(default_factory=EntropySection)
    whitening: WhiteningSection = field(default_factory=WhiteningSection)
    train: TrainSection = field(default_factory=TrainSection)
    pq: PQSection = field(default_factory=PQSection)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)

    def as_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


_SECTIONS = {
    "entropy": EntropySection,
    "whitening": WhiteningSection,
    "train": TrainSection,
    "pq": PQSection,
    "eval": EvalSection,
    "synth": SynthSection,
}

_SCALAR_TYPES = {
    int: "integer",
    float: "number",
    str: "string",
    bool: "boolean",
}


def _check_value(path: str, value, expected, problems: list[str]):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        problems.append(f"{path}: expected integer, got boolean")
        return value
    if not isinstance(value, expected):
        problems.append(
            f"{path}: expected {_SCALAR_TYPES.get(expected, expected)}, "
            f"got {type(value).__name__}")
    return value


def _apply_section(section_obj, data: dict, prefix: str, problems: list[str]):
    fields = {f: type(getattr(section_obj, f)) for f in vars(section_obj)}
    for key, value in data.items():
        if key not in fields:
            problems.append(f"{prefix}{key}: unknown key")
            continue
        current = getattr(section_obj, key)
        if current is None:
            # optional field: accept int/float or null
            if value is not None and not isinstance(value, (int, float)):
                problems.append(f"{prefix}{key}: expected number or null")
            setattr(section_obj, key, value)
        elif value is None and key in ("truncate_dim", "eigen_floor"):
            setattr(section_obj, key, None)
        else:
            setattr(section_obj, key, _check_value(prefix + key, value,
                                                   type(current), problems))


def _semantic_checks(cfg: RunConfig, problems: list[str]):
    if cfg.method not in ("MAC", "SPoC", "RMAC", "REMAP"):
        problems.append(f"method: unknown method {cfg.method!r}")
    if cfg.alpha_init not in ("ones", "entropy"):
        problems.append(f"alpha_init: must be 'ones' or 'entropy', got {cfg.alpha_init!r}")
    if cfg.grid_scales < 1:
        problems.append(f"grid_scales: must be >= 1, got {cfg.grid_scales}")
    if not cfg.layers:
        problems.append("layers: must list at least one layer id")
    if len(set(cfg.layers)) != len(cfg.layers):
        problems.append("layers: duplicate layer ids")
    if cfg.workers < 1:
        problems.append(f"workers: must be >= 1, got {cfg.workers}")
    if cfg.entropy.bins < 1:
        problems.append(f"entropy.bins: must be >= 1, got {cfg.entropy.bins}")
    if cfg.entropy.epsilon <= 0:
        problems.append(f"entropy.epsilon: must be > 0, got {cfg.entropy.epsilon}")
    if cfg.entropy.pair_budget < 1:
        problems.append("entropy.pair_budget: must be >= 1")
    if cfg.whitening.out_dim < 1:
        problems.append(f"whitening.out_dim: must be >= 1, got {cfg.whitening.out_dim}")
    if cfg.train.learning_rate <= 0:
        problems.append("train.learning_rate: must be > 0")
    if not 0 <= cfg.train.momentum < 1:
        problems.append(f"train.momentum: must be in [0, 1), got {cfg.train.momentum}")
    if cfg.train.accumulate < 1:
        problems.append("train.accumulate: must be >= 1")
    if cfg.train.remine_every < 1:
        problems.append("train.remine_every: must be >= 1")
    if cfg.train.epochs < 1:
        problems.append("train.epochs: must be >= 1")
    if cfg.pq.m < 1:
        problems.append(f"pq.m: must be >= 1, got {cfg.pq.m}")
    if not 1 <= cfg.pq.k <= 256:
        problems.append(f"pq.k: must be in [1, 256], got {cfg.pq.k}")
    if cfg.eval.search not in ("exhaustive", "truncate", "pq"):
        problems.append(f"eval.search: unknown mode {cfg.eval.search!r}")
    if cfg.eval.search == "truncate" and not cfg.eval.truncate_dim:
        problems.append("eval.truncate_dim: required when eval.search is 'truncate'")
    if cfg.eval.qe_topk < 0:
        problems.append("eval.qe_topk: must be >= 0")
    if cfg.synth.classes < 2:
        problems.append("synth.classes: must be >= 2")
    if cfg.synth.per_class < 2:
        problems.append("synth.per_class: must be >= 2")


def build_config(data: dict) -> RunConfig:
    """Validate a raw dict into a RunConfig, collecting every problem."""
    problems: list[str] = []
    cfg = RunConfig()
    top_scalars = {"seed": int, "workers": int, "grid_scales": int,
                   "method": str, "alpha_init": str}
    for key, value in data.items():
        if key in top_scalars:
            setattr(cfg, key, _check_value(key, value, top_scalars[key], problems))
        elif key == "layers":
            if (not isinstance(value, list) or not value
                    or not all(isinstance(x, int) and not isinstance(x, bool)
                               for x in value)):
                problems.append("layers: expected a non-empty list of integers")
            else:
                cfg.layers = list(value)
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                problems.append(f"{key}: expected an object")
            else:
                _apply_section(getattr(cfg, key), value, f"{key}.", problems)
        else:
            problems.append(f"{key}: unknown key")
    if not problems:
        _semantic_checks(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    """Read the JSON config file and apply key=value overrides on top."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"])
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config {path} is not valid JSON: {exc.msg} "
                               f"(line {exc.lineno})"])
        if not isinstance(data, dict):
            raise ConfigError([f"config {path} must hold a JSON object"])
    problems = []
    for item in overrides or ():
        if "=" not in item:
            problems.append(f"override {item!r}: expected key.path=value")
            continue
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings are fine
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                problems.append(f"override {key!r}: {part} is not an object")
                break
        else:
            node[parts[-1]] = value
    if problems:
        raise ConfigError(problems)
    return build_config(data)
