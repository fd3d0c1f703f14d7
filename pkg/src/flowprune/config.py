"""Experiment configuration: JSON documents plus dotted-path overrides.

A configuration is six blocks (dataset, model, solver, train, prune,
divergence) plus an output directory and a determinism flag. Every field has
a per-dataset default, so `default_config("moons")` is a complete runnable
experiment; a JSON file and `--set` style overrides (`train.lr=0.005`,
values parsed as JSON with a string fallback) selectively replace fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

from .cnf import DivergenceMode
from .data import KINDS
from .net import MlpSpec
from .odeint import SolverConfig
from .prune import PruneConfig, TrainConfig


class ConfigError(ValueError):
    """A configuration document that cannot be realized."""


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "gaussians"
    n: int = 2560
    seed: int = 0
    geometry: dict = field(default_factory=dict)
    fractions: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.n < 3:
            raise ConfigError("dataset.n must be >= 3")
        object.__setattr__(self, "fractions", tuple(self.fractions))
        object.__setattr__(self, "geometry", dict(self.geometry))
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ConfigError("fractions must be three positive numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError("fractions must sum to 1")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    model: MlpSpec
    solver: SolverConfig
    train: TrainConfig
    prune: PruneConfig
    divergence: DivergenceMode
    out_dir: str = "runs/exp"
    deterministic: bool = True

    def __post_init__(self):
        if self.solver.backprop == "bptt" and self.solver.method == "dopri5":
            raise ConfigError(
                "bptt cannot differentiate through the adaptive dopri5 grid; "
                "use backprop=adjoint or a fixed-step method")


# hidden widths, optimizer, tolerances per dataset kind. n is ours (the
# upstream work does not state toy sample counts); sized so a full
# prune/retrain sweep stays desktop-friendly.
_KIND_DEFAULTS = {
    "gaussians": {
        "dataset": {"n": 2560},
        "model": {"layer_sizes": (3, 128, 128, 2), "activation": "sigmoid"},
        "solver": {"method": "dopri5", "rtol": 1e-5, "atol": 1e-5,
                   "backprop": "adjoint"},
        "train": {"optimizer": "adamw", "lr": 5e-3, "weight_decay": 1e-5,
                  "batch_size": 1024, "epochs": 100},
        "prune": {"pr_per_iter": 0.1, "epochs_per_cycle": 100},
        "divergence": {"kind": "hutchinson", "noise": "rademacher",
                       "probes_per_sample": 1},
    },
    "gaussian_spiral": {
        "dataset": {"n": 2560},
        "model": {"layer_sizes": (3, 64, 64, 64, 64, 2), "activation": "sigmoid"},
        "solver": {"method": "dopri5", "rtol": 1e-5, "atol": 1e-5,
                   "backprop": "adjoint"},
        "train": {"optimizer": "adamw", "lr": 5e-2, "weight_decay": 1e-2,
                  "batch_size": 1024, "epochs": 100},
        "prune": {"pr_per_iter": 0.1, "epochs_per_cycle": 100},
        "divergence": {"kind": "hutchinson", "noise": "rademacher",
                       "probes_per_sample": 1},
    },
    "spirals": {
        "dataset": {"n": 2560},
        "model": {"layer_sizes": (3, 64, 64, 64, 64, 2), "activation": "sigmoid"},
        "solver": {"method": "dopri5", "rtol": 1e-5, "atol": 1e-5,
                   "backprop": "adjoint"},
        "train": {"optimizer": "adamw", "lr": 5e-2, "weight_decay": 1e-6,
                  "batch_size": 1024, "epochs": 100},
        "prune": {"pr_per_iter": 0.1, "epochs_per_cycle": 100},
        "divergence": {"kind": "hutchinson", "noise": "rademacher",
                       "probes_per_sample": 1},
    },
    "moons": {
        "dataset": {"n": 1280},
        "model": {"layer_sizes": (3, 128, 128, 2), "activation": "tanh"},
        "solver": {"method": "dopri5", "rtol": 1e-4, "atol": 1e-4,
                   "backprop": "adjoint"},
        "train": {"optimizer": "adam", "lr": 1e-2, "weight_decay": 1e-4,
                  "batch_size": 128, "epochs": 50},
        "prune": {"pr_per_iter": 0.1, "epochs_per_cycle": 50},
        "divergence": {"kind": "hutchinson", "noise": "rademacher",
                       "probes_per_sample": 1},
    },
}

_BLOCK_TYPES = {
    "dataset": DatasetConfig,
    "model": MlpSpec,
    "solver": SolverConfig,
    "train": TrainConfig,
    "prune": PruneConfig,
    "divergence": DivergenceMode,
}
_SCALAR_KEYS = {"out_dir": str, "deterministic": bool}


def _default_doc(kind: str) -> dict:
    if kind not in _KIND_DEFAULTS:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    doc = {name: {} for name in _BLOCK_TYPES}
    doc["dataset"]["kind"] = kind
    for block, values in _KIND_DEFAULTS[kind].items():
        doc[block].update(values)
    doc["out_dir"] = f"runs/{kind}"
    doc["deterministic"] = True
    return doc


def _merge(base: dict, over: dict, path="") -> dict:
    out = dict(base)
    for k, v in over.items():
        here = f"{path}.{k}" if path else k
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, here)
        else:
            out[k] = v
    return out


def parse_override(text: str):
    """'train.lr=0.005' -> (['train','lr'], 0.005); values parsed as JSON."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form path=value")
    path, raw = text.split("=", 1)
    keys = [p for p in path.strip().split(".") if p]
    if not keys:
        raise ConfigError(f"override {text!r} has an empty path")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def _apply_override(doc: dict, keys, value):
    node = doc
    for k in keys[:-1]:
        nxt = node.get(k)
        if not isinstance(nxt, dict):
            nxt = {}
            node[k] = nxt
        node = nxt
    node[keys[-1]] = value


def _build_block(name: str, values: dict):
    cls = _BLOCK_TYPES[name]
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown {name} fields: {sorted(unknown)}")
    kwargs = dict(values)
    for key in ("layer_sizes", "lr_steps", "fractions"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(
                tuple(x) if isinstance(x, list) else x for x in kwargs[key])
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {name} block: {exc}") from exc


def config_from_doc(doc: dict) -> ExperimentConfig:
    kind = doc.get("dataset", {}).get("kind", "gaussians")
    merged = _merge(_default_doc(kind), doc)
    unknown = set(merged) - set(_BLOCK_TYPES) - set(_SCALAR_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    blocks = {name: _build_block(name, merged[name]) for name in _BLOCK_TYPES}
    try:
        return ExperimentConfig(out_dir=str(merged["out_dir"]),
                                deterministic=bool(merged["deterministic"]),
                                **blocks)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def default_config(kind: str) -> ExperimentConfig:
    return config_from_doc({"dataset": {"kind": kind}})


def load_config(path: str = None, kind: str = None, overrides=()) -> ExperimentConfig:
    """File -> overrides -> full config; `kind` seeds the defaults if no file."""
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
    else:
        doc = {}
    if kind is not None:
        doc.setdefault("dataset", {})
        doc["dataset"]["kind"] = kind
    for text in overrides:
        _apply_override(doc, *parse_override(text))
    return config_from_doc(doc)


def config_to_doc(cfg: ExperimentConfig) -> dict:
    """Plain-JSON document that reproduces cfg via config_from_doc."""

    def plain(x):
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        return x

    doc = {}
    for name, cls in _BLOCK_TYPES.items():
        block = getattr(cfg, name)
        doc[name] = {f.name: plain(getattr(block, f.name)) for f in fields(cls)}
    doc["out_dir"] = cfg.out_dir
    doc["deterministic"] = cfg.deterministic
    return doc


def with_train_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, train=replace(cfg.train, seed=int(seed)))
