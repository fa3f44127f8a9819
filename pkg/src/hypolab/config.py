"""Flat key = value experiment configuration with strict schema checking."""
from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParameterError
from .weights import FAMILIES, WeightSpec

__all__ = ["TASKS", "TASK_DEFAULTS", "ExperimentConfig", "parse_config", "load_config", "dump_config"]

TASKS = ("symbols", "spectrum", "evolve", "dyson", "poincare", "nash", "twisted",
         "regularization", "wasserstein", "appendix-moments")

# task option name -> (type, default)
TASK_DEFAULTS: dict[str, dict[str, tuple[type, object]]] = {
    "symbols": {"symbol": (str, "Psi0"), "p": (float, 2.0), "eps": (float, 0.1)},
    "spectrum": {"count": (int, 6), "method": (str, "auto"), "radius": (float, 0.5)},
    "evolve": {"t_end": (float, 8.0), "n_times": (int, 41), "scheme": (str, "cn"),
               "p": (float, 2.0), "space": (str, "Lp")},
    "dyson": {"size": (int, 10), "n": (int, 2), "t": (float, 1.0), "nodes": (int, 1000), "z_samples": (int, 10)},
    "poincare": {"nv": (int, 512)},
    "nash": {"draws": (int, 100)},
    "twisted": {"count": (int, 20), "t_end": (float, 8.0)},
    "regularization": {"sigma_x": (float, 0.0), "sigma_v": (float, 0.0)},
    "wasserstein": {"n": (int, 24), "t_end": (float, 8.0), "n_times": (int, 17)},
    "appendix-moments": {"a": (float, 1.0), "b": (float, 1.0), "c": (float, 0.5)},
}

_RUN_KEYS = {"tasks": (list, []), "output": (str, "hypolab-out"), "seed": (int, 0), "threads": (int, 1)}
_MODEL_KEYS = {"kind": (str, "TorusKFP"), "gamma": (float, 2.0), "beta": (float, 2.0), "d": (int, 1),
               "nx": (int, 64), "nv": (int, 64), "vmax": (float, 7.0), "xmax": (float, 4.0)}
_SPLIT_KEYS = {"M": (float, 4.0), "R": (float, 2.83), "target": (float, None)}
_WEIGHT_KEYS = {"family": str, "k": float, "kappa": float, "s": float, "theta": float,
                "gamma": float, "beta": float, "d": int}


def _convert(section: str, key: str, typ, raw: str):
    try:
        if typ is list:
            return [t.strip() for t in raw.replace("\n", ",").split(",") if t.strip()]
        if typ is float:
            val = float(raw)
            if math.isnan(val):
                raise ValueError
            return val
        if typ is int:
            return int(raw)
        return raw.strip()
    except ValueError as exc:
        raise ParameterError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from exc


def _fmt(val) -> str:
    if isinstance(val, list):
        return ", ".join(val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


@dataclass
class ExperimentConfig:
    """Model, weights, splitting, task list and run options."""

    model: dict = field(default_factory=dict)
    weights: dict[str, WeightSpec] = field(default_factory=dict)
    splitting: dict = field(default_factory=dict)
    tasks: list[str] = field(default_factory=list)
    options: dict[str, dict] = field(default_factory=dict)
    output: str = "hypolab-out"
    seed: int = 0
    threads: int = 1

    def task_options(self, task: str) -> dict:
        base = {k: d for k, (_, d) in TASK_DEFAULTS[task].items()}
        base.update(self.options.get(task, {}))
        return base

    def to_text(self) -> str:
        return dump_config(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _section_values(cp, name, schema) -> dict:
    out = {}
    for key, raw in cp[name].items():
        if key not in schema:
            raise ParameterError(f"[{name}] unknown key {key!r}")
        typ = schema[key][0] if isinstance(schema[key], tuple) else schema[key]
        out[key] = _convert(name, key, typ, raw)
    return out


def _validate(cfg: ExperimentConfig):
    m = cfg.model
    if m["kind"] not in ("HomogeneousFP", "TorusKFP", "PotentialKFP"):
        raise ParameterError(f"[model] kind: unknown model {m['kind']!r}")
    for key in ("nv", "nx", "d"):
        if m[key] < 1:
            raise ParameterError(f"[model] {key} must be positive, got {m[key]}")
    for key in ("vmax", "xmax", "gamma", "beta"):
        if not m[key] > 0:
            raise ParameterError(f"[model] {key} must be positive, got {m[key]}")
    for key in ("M", "R"):
        if not cfg.splitting[key] > 0:
            raise ParameterError(f"[splitting] {key} must be positive, got {cfg.splitting[key]}")
    tgt = cfg.splitting.get("target")
    if tgt is not None and not tgt < 0:
        raise ParameterError(f"[splitting] target must be negative, got {tgt}")
    for t in cfg.tasks:
        if t not in TASKS:
            raise ParameterError(f"[run] tasks: unknown task {t!r}")
    if len(set(cfg.tasks)) != len(cfg.tasks):
        raise ParameterError("[run] tasks: duplicate task names")
    if cfg.threads < 1:
        raise ParameterError(f"[run] threads must be >= 1, got {cfg.threads}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse configuration text; unknown sections or keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParameterError(f"malformed config: {exc}") from exc
    cfg = ExperimentConfig()
    run = {k: d for k, (_, d) in _RUN_KEYS.items()}
    model = {k: d for k, (_, d) in _MODEL_KEYS.items()}
    split = {k: d for k, (_, d) in _SPLIT_KEYS.items()}
    for name in cp.sections():
        if name == "run":
            run.update(_section_values(cp, name, _RUN_KEYS))
        elif name == "model":
            model.update(_section_values(cp, name, _MODEL_KEYS))
        elif name == "splitting":
            split.update(_section_values(cp, name, _SPLIT_KEYS))
        elif name.startswith("weight."):
            label = name.split(".", 1)[1]
            vals = _section_values(cp, name, _WEIGHT_KEYS)
            if "family" not in vals:
                raise ParameterError(f"[{name}] family is required")
            if vals["family"] not in FAMILIES:
                raise ParameterError(f"[{name}] family: unknown family {vals['family']!r}")
            try:
                cfg.weights[label] = WeightSpec.from_dict(vals)
            except ParameterError as exc:
                raise ParameterError(f"[{name}] {exc}") from exc
        elif name.startswith("task."):
            task = name.split(".", 1)[1]
            if task not in TASK_DEFAULTS:
                raise ParameterError(f"[{name}] unknown task")
            cfg.options[task] = _section_values(cp, name, TASK_DEFAULTS[task])
        else:
            raise ParameterError(f"unknown section [{name}]")
    cfg.model, cfg.splitting = model, split
    cfg.tasks = list(run["tasks"])
    cfg.output, cfg.seed, cfg.threads = run["output"], run["seed"], run["threads"]
    _validate(cfg)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ParameterError(f"config file {path} does not exist")
    return parse_config(path.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parse_config(dump_config(c)) == c."""
    buf = io.StringIO()
    buf.write("[run]\n")
    buf.write(f"tasks = {_fmt(cfg.tasks)}\noutput = {cfg.output}\nseed = {cfg.seed}\nthreads = {cfg.threads}\n\n")
    buf.write("[model]\n")
    for k in _MODEL_KEYS:
        buf.write(f"{k} = {_fmt(cfg.model[k])}\n")
    buf.write("\n[splitting]\n")
    for k in _SPLIT_KEYS:
        if cfg.splitting.get(k) is not None:
            buf.write(f"{k} = {_fmt(cfg.splitting[k])}\n")
    for label in sorted(cfg.weights):
        buf.write(f"\n[weight.{label}]\n")
        for k, v in cfg.weights[label].to_dict().items():
            if v is not None:
                buf.write(f"{k} = {_fmt(v)}\n")
    for task in sorted(cfg.options):
        buf.write(f"\n[task.{task}]\n")
        for k in sorted(cfg.options[task]):
            buf.write(f"{k} = {_fmt(cfg.options[task][k])}\n")
    return buf.getvalue()
