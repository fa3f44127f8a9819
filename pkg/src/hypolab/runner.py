"""Experiment orchestration: task DAG, artifacts and run manifests."""
from __future__ import annotations

import csv
import json
import math
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import TASKS, ExperimentConfig
from .errors import CapabilityError, HypolabError, UsageError
from .grid import Grid, velocity_bound
from .inequalities import (band_limited_samples, mass_zero_samples, moment_gain, nash_check,
                           poincare_constant, search_energy_coefficients, spike, twisted_decay, w1_decay)
from .operators import ModelSpec, assemble, equilibrium
from .semigroup import fit_decay, iterated_AS_B, duhamel_reconstruct, propagate
from .spectral import apply_projector, spectral_projector, spectrum, verify_factorization
from .symbols import SymbolSpec, certify, search_cutoff
from .weights import NormSpec, WeightSpec, mass, norm

__all__ = ["TaskResult", "RunManifest", "run", "run_config", "compare", "STAGES"]

STAGES = (("symbols",), ("spectrum", "evolve", "dyson"),
          ("poincare", "nash", "twisted", "regularization", "wasserstein", "appendix-moments"))


@dataclass
class TaskResult:
    status: str = "OK"
    seconds: float = 0.0
    files: list[str] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return {"status": self.status, "seconds": self.seconds, "files": self.files,
                "metrics": {k: _num(v) for k, v in self.metrics.items()}, "checks": {k: bool(v) for k, v in self.checks.items()},
                "error": self.error}


@dataclass
class RunManifest:
    """Config hash, tool version, per-task status, files and wall-clock times."""

    config_hash: str
    version: str
    seed: int
    tasks: dict[str, TaskResult]
    files: list[str]
    output: str

    @property
    def ok(self) -> bool:
        return all(t.status == "OK" for t in self.tasks.values())

    def to_dict(self) -> dict:
        return {"schema_version": 1, "config_hash": self.config_hash, "version": self.version,
                "seed": self.seed, "output": self.output, "files": self.files,
                "tasks": {k: v.to_dict() for k, v in self.tasks.items()}}


def _num(v):
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v


class _Context:
    """Shared state for one run; file writes are serialized by a lock."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.lock = threading.Lock()
        self.M = cfg.splitting["M"]
        self.R = cfg.splitting["R"]
        self._ops: dict = {}

    def rng(self, task: str) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, TASKS.index(task)])

    def model_spec(self, nx=None, nv=None) -> ModelSpec:
        m = self.cfg.model
        nx = m["nx"] if nx is None else nx
        nv = m["nv"] if nv is None else nv
        if m["kind"] == "HomogeneousFP":
            grid = Grid.velocity(nv, m["vmax"], m["d"])
        elif m["kind"] == "TorusKFP":
            grid = Grid.torus(nx, nv, m["vmax"])
        else:
            grid = Grid.line(nx, nv, m["xmax"], m["vmax"])
        return ModelSpec(m["kind"], grid, gamma=m["gamma"], beta=m["beta"], M=self.M, R=self.R)

    def operator(self, nx=None, nv=None):
        key = (nx, nv, self.M, self.R)
        with self.lock:
            if key not in self._ops:
                self._ops[key] = assemble(self.model_spec(nx, nv))
            return self._ops[key]

    def weights(self) -> dict[str, WeightSpec]:
        if self.cfg.weights:
            return self.cfg.weights
        return {"poly3": WeightSpec("PolyV", k=3.0)}

    def write_json(self, name: str, data: dict) -> str:
        path = self.out / name
        with self.lock:
            path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_num))
        return name

    def write_csv(self, name: str, header: list[str], rows) -> str:
        path = self.out / name
        with self.lock:
            with open(path, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(header)
                for row in rows:
                    wr.writerow([repr(float(x)) for x in row])
        return name


def _l2_mu_weight(spec: ModelSpec) -> WeightSpec:
    if spec.kind == "PotentialKFP":
        return WeightSpec("GaussianInv", theta=1.0, beta=spec.beta)
    return WeightSpec("GaussianInv", theta=1.0, gamma=spec.gamma)


def _random_state(ctx: _Context, op, rng) -> np.ndarray:
    if op.has_blocks:
        return mass_zero_samples(op, 1, rng)[0]
    mu = equilibrium(op.spec)
    f = np.sqrt(mu) * band_limited_samples(op.grid, mu, 1, rng)[0]
    return f - mass(f, op.grid) * mu


# tasks -------------------------------------------------------------------------------

def _task_symbols(ctx: _Context, res: TaskResult):
    opts = ctx.cfg.task_options("symbols")
    m = ctx.cfg.model
    target = ctx.cfg.splitting.get("target")
    for label, w in ctx.weights().items():
        spec = SymbolSpec(opts["symbol"], w, opts["p"], M=ctx.M, R=ctx.R, gamma=m["gamma"], beta=m["beta"],
                          d=m["d"], eps=opts["eps"] if opts["symbol"] in ("Psi1", "Psi3") else 0.0)
        if target is not None:
            found = search_cutoff(spec, target)
            spec = replace(spec, M=found[0], R=found[1], **({"alpha": found[2]} if len(found) == 3 else {}))
            ctx.M, ctx.R = spec.M, spec.R
        rep = certify(spec)
        data = rep.to_dict()
        data["M"], data["R"] = spec.M, spec.R
        res.files.append(ctx.write_json(f"symbols_{label}.json", data))
        res.files.append(ctx.write_csv(f"symbols_{label}.csv", ["radius", "value"], zip(rep.radii, rep.values)))
        res.metrics[f"certified_{label}"] = float(rep.certified)
        res.metrics[f"M_{label}"] = float(spec.M)
        res.metrics[f"R_{label}"] = float(spec.R)
        bound = target if target is not None else 0.0
        res.checks[f"certified_{label}"] = bool(rep.certified <= bound)


def _task_spectrum(ctx: _Context, res: TaskResult):
    opts = ctx.cfg.task_options("spectrum")
    op = ctx.operator()
    rep = spectrum(op, opts["count"], opts["method"])
    radius = min(opts["radius"], 0.5 * rep.gap) if math.isfinite(rep.gap) else opts["radius"]
    rng = ctx.rng("spectrum")
    f = rng.random(op.n)
    if op.has_blocks:
        f = op.nyquist_filter(f)
        _, pres = spectral_projector(op, 0.0, radius, return_residual=True)
    elif op.n <= 600:
        _, pres = spectral_projector(op.matrix("L"), 0.0, radius, return_residual=True)
    else:
        pres = float("nan")
    pf = apply_projector(op, f, 0.0, radius)
    mu = equilibrium(op.spec)
    perr = float(np.abs(pf - mass(f, op.grid) * mu).max() / np.abs(mu).max())
    rep.projector_residual = float(pres)
    rep.restriction_residual = perr
    res.files += [p.name for p in rep.write(ctx.out / "spectrum")]
    res.metrics.update({"gap": rep.gap, "zero_modes": float(rep.zero_modes), "projector_residual": float(pres),
                        "projector_error": perr})
    for i, z in enumerate(rep.eigenvalues[:4]):
        res.metrics[f"eig{i}_re"] = float(z.real)
    res.checks["single_zero_mode"] = rep.zero_modes == 1
    res.checks["projector_idempotent"] = bool(not pres > 1e-8)
    res.checks["projector_mass"] = perr < 1e-3


def _task_evolve(ctx: _Context, res: TaskResult):
    opts = ctx.cfg.task_options("evolve")
    op = ctx.operator()
    f0 = _random_state(ctx, op, ctx.rng("evolve"))
    norms = [NormSpec("Lp", 2.0, _l2_mu_weight(op.spec))]
    for w in ctx.weights().values():
        norms.append(NormSpec(opts["space"], opts["p"], w))
    times = np.linspace(0.0, opts["t_end"], opts["n_times"])
    traj = propagate(op, f0, times, scheme=opts["scheme"], norms=norms, store=False)
    res.files.append(ctx.write_csv("evolve.csv", ["t", "mass"] + list(traj.norms),
                                   zip(traj.times, traj.masses, *traj.norms.values())))
    l1 = float(np.dot(op.grid.weights, np.abs(f0)))
    drift = float(np.abs(traj.masses - traj.masses[0]).max() / l1)
    fits = {}
    for col in traj.norms:
        fit = fit_decay(traj, col)
        fits[col] = fit.to_dict()
        res.metrics[f"rate_{col}"] = fit.rate
        res.checks[f"decay_{col}"] = fit.rate < 0
    res.files.append(ctx.write_json("evolve_fits.json", {"schema_version": 1, "fits": fits}))
    res.metrics["mass_drift"] = drift
    res.checks["mass_conserved"] = drift < 1e-9


def _task_dyson(ctx: _Context, res: TaskResult):
    opts = ctx.cfg.task_options("dyson")
    rng = ctx.rng("dyson")
    n = opts["size"]
    a = np.diag(rng.random(n))
    b = rng.standard_normal((n, n)) / math.sqrt(n) - 2.0 * np.eye(n)
    l = a + b
    _, dres = duhamel_reconstruct((l, a, b), opts["n"], opts["t"], nodes_per_unit=opts["nodes"])
    zs = 1.0 + rng.standard_normal(opts["z_samples"]) + 1j * rng.standard_normal(opts["z_samples"])
    fac = verify_factorization(l, a, b, zs, orders=(1, 2, 3, 4))
    # scalar closed form (a S_b)^{(*2)}(t) = a² t e^{bt}
    sa, sb, t = 0.7, -0.4, opts["t"]
    conv = iterated_AS_B((np.array([[sa + sb]]), np.array([[sa]]), np.array([[sb]])), 2, t,
                         nodes_per_unit=opts["nodes"])[0, 0]
    serr = abs(conv - sa * sa * t * math.exp(sb * t))
    res.files.append(ctx.write_json("dyson.json", {"schema_version": 1, "duhamel_residual": dres,
                                                   "factorization": fac.to_dict(), "scalar_error": serr}))
    res.metrics.update({"duhamel_residual": dres, "factorization_worst": fac.worst, "scalar_error": serr})
    res.checks.update({"duhamel": dres < 1e-6, "factorization": fac.worst < 1e-10, "scalar": serr < 1e-8})


def _task_poincare(ctx: _Context, res: TaskResult):
    opts = ctx.cfg.task_options("poincare")
    m = ctx.cfg.model
    grid = Grid.velocity(opts["nv"], max(velocity_bound(m["gamma"]), 6.0), 1)
    rep = poincare_constant(m["gamma"], 1, grid)
    res.files.append(rep.write(ctx.out / "poincare.json").name)
    res.metrics["lambda_P"] = rep.constant
    res.checks["positive"] = rep.constant > 0


def _task_nash(ctx: _Context, res: TaskResult):
    opts = ctx.cfg.task_options("nash")
    op = ctx.operator()
    mu = equilibrium(op.spec)
    samples = band_limited_samples(op.grid, mu, opts["draws"], ctx.rng("nash"))
    rep = nash_check([mu] + samples, op.grid, mu)
    res.files.append(rep.write(ctx.out / "nash.json").name)
    res.metrics["worst_ratio"] = rep.constant
    res.checks["finite"] = bool(np.isfinite(rep.constant))


def _task_twisted(ctx: _Context, res: TaskResult):
    opts = ctx.cfg.task_options("twisted")
    op = ctx.operator()
    rep = twisted_decay(op, count=opts["count"], t_end=opts["t_end"], seed=ctx.cfg.seed)
    res.files.append(ctx.write_json("twisted.json", rep.to_dict()))
    res.metrics.update({"rate": rep.fit.rate, "a": rep.spec.a, "b": rep.spec.b, "c": rep.spec.c,
                        "worst_increase": rep.worst_increase})
    res.checks["monotone"] = rep.monotone
    res.checks["decay"] = rep.fit.rate < 0


def _task_regularization(ctx: _Context, res: TaskResult):
    opts = ctx.cfg.task_options("regularization")
    op = ctx.operator()
    if not op.has_blocks:
        raise CapabilityError("regularization runs on the torus model")
    g = op.grid
    if opts["sigma_x"] > 0 and opts["sigma_v"] > 0:
        f0 = spike(op, sigma_x=opts["sigma_x"], sigma_v=opts["sigma_v"])
    else:
        f0 = np.zeros(g.size)
        f0[(g.nx // 2) * g.nv + g.nv // 2] = 1.0
    rep = search_energy_coefficients(op, f0)
    res.files.append(ctx.write_csv("regularization.csv", ["t", "t32_h1_ratio"],
                                   zip(rep.times[rep.times >= 1e-3 - 1e-15], rep.h1_curve)))
    res.files.append(ctx.write_json("regularization.json", rep.to_dict()))
    res.metrics.update({"h1_gain": rep.h1_gain, "energy_excess": rep.excess})
    res.checks["finite"] = bool(np.isfinite(rep.h1_gain))


def _task_wasserstein(ctx: _Context, res: TaskResult):
    opts = ctx.cfg.task_options("wasserstein")
    m = ctx.cfg.model
    rng = ctx.rng("wasserstein")
    if m["kind"] == "TorusKFP":
        op = ctx.operator(opts["n"], opts["n"])
    elif m["kind"] == "HomogeneousFP" and m["d"] == 1:
        op = ctx.operator()
    else:
        raise CapabilityError("W1 decay runs on the torus or the 1D homogeneous model")
    mu = equilibrium(op.spec)
    f0 = _random_state(ctx, op, rng) + mu
    times = np.linspace(0.0, opts["t_end"], opts["n_times"])
    fit, traj = w1_decay(op, f0, times=times)
    col = list(traj.norms)[0]
    res.files.append(ctx.write_csv("wasserstein.csv", ["t", col], zip(traj.times, traj.norms[col])))
    res.files.append(ctx.write_json("wasserstein_fit.json", fit.to_dict()))
    res.metrics["rate"] = fit.rate
    res.checks["decay"] = fit.rate < 0


def _task_moments(ctx: _Context, res: TaskResult):
    opts = ctx.cfg.task_options("appendix-moments")
    op = ctx.operator()
    abc = (opts["a"], opts["b"], opts["c"]) if op.spec.kind == "PotentialKFP" else None
    rep = moment_gain(op, abc)
    res.files.append(ctx.write_json("appendix_moments.json", rep.to_dict()))
    res.metrics.update({"ratio": rep.ratio, "equilibrium_ratio": rep.equilibrium_ratio})
    res.checks["finite"] = bool(np.isfinite(rep.ratio))


_TASK_FUNCS = {
    "symbols": _task_symbols, "spectrum": _task_spectrum, "evolve": _task_evolve, "dyson": _task_dyson,
    "poincare": _task_poincare, "nash": _task_nash, "twisted": _task_twisted,
    "regularization": _task_regularization, "wasserstein": _task_wasserstein,
    "appendix-moments": _task_moments,
}


def _execute(ctx: _Context, task: str) -> TaskResult:
    res = TaskResult()
    t0 = time.perf_counter()
    try:
        _TASK_FUNCS[task](ctx, res)
        if not all(res.checks.values()):
            res.status = "FAILED"
            res.error = "checks failed: " + ", ".join(k for k, v in res.checks.items() if not v)
    except HypolabError as exc:
        res.status = "FAILED"
        res.error = f"{task}: {type(exc).__name__}: {exc}"
    except Exception as exc:  # keep partial results of other tasks
        res.status = "FAILED"
        res.error = f"{task}: {type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"
    res.seconds = time.perf_counter() - t0
    return res


def run_config(cfg: ExperimentConfig, out: str | Path | None = None, seed: int | None = None,
               threads: int | None = None) -> RunManifest:
    """Execute the task list stage by stage and write manifest.json."""
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if threads is not None:
        if threads < 1:
            raise UsageError("threads must be >= 1")
        cfg = replace(cfg, threads=int(threads))
    out_dir = Path(out if out is not None else cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, out_dir)
    results: dict[str, TaskResult] = {}
    for stage in STAGES:
        todo = [t for t in stage if t in cfg.tasks]
        if not todo:
            continue
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for task, res in zip(todo, pool.map(lambda t: _execute(ctx, t), todo)):
                results[task] = res
    ordered = {t: results[t] for t in cfg.tasks}
    (out_dir / "config.cfg").write_text(cfg.to_text())
    files = ["config.cfg"] + [f for r in ordered.values() for f in r.files] + ["manifest.json"]
    manifest = RunManifest(cfg.digest(), __version__, cfg.seed, ordered, files, str(out_dir))
    (out_dir / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True, default=_num))
    return manifest


def run(config_path: str | Path, out=None, seed=None, threads=None) -> RunManifest:
    from .config import load_config
    return run_config(load_config(config_path), out, seed, threads)


def _load_manifest(m) -> dict:
    if isinstance(m, RunManifest):
        return m.to_dict()
    if isinstance(m, dict):
        return m
    path = Path(m)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise UsageError(f"manifest {path} does not exist")
    return json.loads(path.read_text())


def compare(a, b) -> dict:
    """Per-metric relative differences |x − y| / max(|x|, |y|) between two manifests."""
    ma, mb = _load_manifest(a), _load_manifest(b)
    ta, tb = set(ma["tasks"]), set(mb["tasks"])
    if ta != tb:
        raise UsageError(f"task sets differ: {sorted(ta ^ tb)}")
    diffs: dict[str, dict[str, float]] = {}
    worst = 0.0
    for task in sorted(ta):
        xa, xb = ma["tasks"][task]["metrics"], mb["tasks"][task]["metrics"]
        out = {}
        for key in sorted(set(xa) & set(xb)):
            x, y = xa[key], xb[key]
            if not isinstance(x, (int, float)) or not isinstance(y, (int, float)):
                out[key] = 0.0 if x == y else float("inf")
            elif x == y:
                out[key] = 0.0
            else:
                out[key] = abs(x - y) / max(abs(x), abs(y))
            worst = max(worst, out[key])
        diffs[task] = out
    return {"schema_version": 1, "diffs": diffs, "max_diff": worst}
