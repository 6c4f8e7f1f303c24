"""Configuration-driven experiment runner.

    sktfv run <config.yaml | preset>     run an experiment
    sktfv validate <config.yaml | preset>  build mesh and model only
    sktfv presets list                    list bundled presets

The environment variable SKTFV_OUTPUT_DIR replaces ``output.directory``.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import initial as init_mod
from .analysis import (NormKind, convergence_harness, decay_analysis, discrete_norm, mass_average,
                       relative_entropy, stability_predicate)
from .io import emit_plotdata, emit_snapshot
from .mesh import (MeshError, build_interval_mesh, build_rectangle_mesh, export_mesh_summary,
                   import_triangulation, load_triangulation, square_triangulation)
from .model import (ModelError, SKTCoefficients, fluid_mixture_model, keller_segel_model,
                    seawater_model, skt_model, verify_hypotheses)
from .scheme import State, project_initial
from .solver import EntropyInequalityWarning, SolverConfig, SolverError, StepReport, advance

log = logging.getLogger("sktfv")

OUTPUT_ENV = "SKTFV_OUTPUT_DIR"
EXPERIMENTS = ("convergence", "pattern", "niche", "decay", "custom")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    name: str
    experiment: str
    model: dict
    mesh: dict
    initial: list
    solver: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    time: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # experiment-specific sections
    base_dir: Path = field(default=Path("."), repr=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "RunConfig":
        data = copy.deepcopy(data)
        missing = [k for k in ("model", "mesh", "initial") if k not in data]
        if missing:
            raise ConfigError(f"missing sections: {missing}")
        exp = data.pop("experiment", "custom")
        if exp not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")
        known = {"name", "description", "model", "mesh", "initial", "solver", "output", "time"}
        extra = {k: v for k, v in data.items() if k not in known}
        if not isinstance(data["initial"], list):
            raise ConfigError("initial must be a list with one entry per species")
        return cls(name=str(data.get("name", "run")), experiment=exp, model=data["model"],
                   mesh=data["mesh"], initial=data["initial"], solver=data.get("solver") or {},
                   output=data.get("output") or {}, time=data.get("time") or {}, extra=extra,
                   base_dir=Path(base_dir))

    def to_dict(self) -> dict:
        d = {"name": self.name, "experiment": self.experiment, "model": self.model,
             "mesh": self.mesh, "initial": self.initial, "solver": self.solver,
             "output": self.output, "time": self.time}
        d.update(self.extra)
        return d


# -- presets and loading -------------------------------------------------------

def preset_names() -> list:
    files = resources.files("sktfv") / "presets"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml"))


def load_config(source) -> RunConfig:
    """A YAML file path or the name of a bundled preset."""
    path = Path(source)
    if path.is_file():
        text = path.read_text()
        base = path.parent
    elif str(source) in preset_names():
        text = (resources.files("sktfv") / "presets" / f"{source}.yaml").read_text()
        base = Path(".")
    else:
        raise ConfigError(f"no config file or preset named {source!r}")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source} does not contain a mapping")
    return RunConfig.from_dict(data, base)


# -- builders ------------------------------------------------------------------

def build_mesh(spec: dict, base_dir=Path(".")):
    spec = dict(spec)
    kind = spec.pop("builder", None)
    try:
        if kind == "interval":
            return build_interval_mesh(float(spec["a"]), float(spec["b"]), int(spec["n_cells"]))
        if kind == "rectangle":
            return build_rectangle_mesh(tuple(spec.get("x_range", (0, 1))), tuple(spec.get("y_range", (0, 1))),
                                        int(spec["nx"]), int(spec["ny"]))
        if kind == "square_triangulation":
            X, T = square_triangulation(int(spec["nx"]), int(spec["ny"]),
                                        tuple(spec.get("x_range", (0, 1))), tuple(spec.get("y_range", (0, 1))),
                                        float(spec.get("inset", 0.92)))
            return import_triangulation(X, T)
        if kind == "file":
            path = Path(spec["path"])
            if not path.is_absolute():
                path = Path(base_dir) / path
            if not path.is_file():
                raise ConfigError(f"mesh file {path} does not exist")
            return load_triangulation(path)
    except KeyError as exc:
        raise ConfigError(f"mesh section lacks {exc}") from None
    raise ConfigError(f"unknown mesh builder {kind!r}")


def build_model(spec: dict):
    spec = dict(spec)
    kind = spec.get("type")
    try:
        if kind == "skt":
            coeffs = SKTCoefficients(spec["a0"], spec["a"], spec.get("b0", [0.0] * len(spec["a0"])),
                                     spec.get("b", np.zeros((len(spec["a0"]),) * 2)))
            model = skt_model(coeffs, spec.get("pi"))
            if not spec.get("sources", True):
                model = model.without_source()
        elif kind == "seawater":
            model = seawater_model(float(spec["delta"]))
        elif kind == "keller_segel":
            model = keller_segel_model(float(spec["delta"]))
        elif kind == "fluid_mixture":
            model = fluid_mixture_model(spec["a0"], spec["a"], spec["pi"])
        else:
            raise ConfigError(f"unknown model type {kind!r}")
    except KeyError as exc:
        raise ConfigError(f"model section lacks {exc}") from None
    drift = spec.get("drift")
    if drift:
        model = model.with_drift(drift["coefficients"], init_mod.from_spec(drift["potential"]))
    return model


def skt_coefficients(spec: dict) -> SKTCoefficients:
    n = len(spec["a0"])
    return SKTCoefficients(spec["a0"], spec["a"], spec.get("b0", [0.0] * n), spec.get("b", np.zeros((n, n))))


def build_initial(spec: list, model, mesh):
    if len(spec) != model.n_species:
        raise ConfigError(f"initial data for {len(spec)} species, model has {model.n_species}")
    try:
        funcs = [init_mod.from_spec(s) for s in spec]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return project_initial(mesh, funcs, signed=model.signed)


def build_solver_config(spec: dict, dimension: int) -> SolverConfig:
    try:
        return SolverConfig.for_dimension(dimension, **spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"solver section: {exc}") from None


# -- running -------------------------------------------------------------------

@dataclass
class RunResult:
    status: int
    directory: Path
    metadata: dict
    reports: list = field(default_factory=list)
    final: Optional[State] = None
    artifacts: dict = field(default_factory=dict)


def _output_dir(cfg: RunConfig, override=None) -> Path:
    d = override or os.environ.get(OUTPUT_ENV) or cfg.output.get("directory") or f"runs/{cfg.name}"
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _model_meta(model) -> dict:
    return {"name": model.name, "n_species": model.n_species, "pi": model.pi.tolist(),
            "c_A": model.c_A, "C_f": None if math.isnan(model.C_f) else model.C_f,
            "entropic": model.entropic, "relaxed": list(model.relaxed), "params": model.params}


def _dt_status(model, dt_max: float) -> dict:
    if math.isnan(model.C_f) or model.C_f == 0:
        return {"inverse_C_f": None, "dt_max": dt_max, "dt_below_inverse_C_f": True}
    inv = 1.0 / model.C_f
    return {"inverse_C_f": inv, "dt_max": dt_max, "dt_below_inverse_C_f": dt_max < inv}


def _snapshot_times(cfg: RunConfig, t0: float, t_end: float) -> list:
    times = cfg.output.get("snapshot_times")
    if times is None and cfg.experiment == "decay":
        times = (t_end * np.geomspace(1e-3, 1.0, 13)).tolist()
    # the final state is always kept
    return sorted({float(t) for t in (times or []) if t0 < float(t) <= t_end} | {float(t_end)})


class _StepWriter:
    def __init__(self, path, n):
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(StepReport.header(n))

    def __call__(self, state, rep):
        self.w.writerow([repr(x) if isinstance(x, float) else x
                         for x in (v.item() if isinstance(v, np.generic) else v for v in rep.row())])

    def close(self):
        self.fh.close()


def execute(cfg: RunConfig, output_dir=None) -> RunResult:
    """Run one configured experiment and write all artifacts."""
    out = _output_dir(cfg, output_dir)
    model = build_model(cfg.model)
    meta = {"config": cfg.to_dict(), "experiment": cfg.experiment, "model": _model_meta(model),
            "status": "running"}

    if cfg.experiment == "convergence":
        return _run_convergence(cfg, model, out, meta)

    mesh = build_mesh(cfg.mesh, cfg.base_dir)
    state = build_initial(cfg.initial, model, mesh)
    scfg = build_solver_config(cfg.solver, mesh.dimension)
    t_end = float(cfg.time.get("t_end", 1.0))
    meta["mesh"] = {"kind": mesh.kind, "n_cells": mesh.n_cells, "n_edges": mesh.n_edges,
                    "zeta": mesh.zeta, "domain_measure": mesh.domain_measure}
    meta["solver"] = scfg.to_dict()
    meta["dt_vs_C_f"] = _dt_status(model, scfg.dt_max if scfg.adaptive else scfg.dt_init)
    if cfg.output.get("mesh_summary", True):
        export_mesh_summary(mesh, out / "mesh")

    fmts = cfg.output.get("formats", ["csv"] if mesh.dimension == 1 else ["vtk"])
    snap_times = _snapshot_times(cfg, state.time, t_end)
    snapdir = out / "snapshots"
    snapdir.mkdir(exist_ok=True)

    def snap(s, label):
        for f in fmts:
            emit_snapshot(mesh, s, f, snapdir / label)

    snap(state, "t0")
    artifacts = {"snapshots": {}, "times": [state.time], "mass": [state.mass(mesh)]}
    history = [(state.time, state)]
    pending = list(snap_times)
    ustar = None
    if cfg.experiment == "pattern":
        st = cfg.extra.get("stability", {})
        ustar = np.asarray(st.get("ustar", [2.0, 0.5]), dtype=float)
        rep = stability_predicate(skt_coefficients(cfg.model), ustar,
                                  mode_cap=int(st.get("mode_cap", 20)),
                                  root_form=st.get("root_form", "printed"))
        _write_json(out / "stability.json", rep.to_dict())
        artifacts["stability"] = rep
        artifacts["distance"] = [(state.time, _distance(mesh, state, ustar))]

    def on_step(s, r):
        artifacts["times"].append(s.time)
        artifacts["mass"].append(r.mass_per_species)
        if cfg.experiment == "decay":
            history.append((s.time, s))
        if ustar is not None:
            artifacts["distance"].append((s.time, _distance(mesh, s, ustar)))
        while pending and abs(s.time - pending[0]) <= 1e-12 * max(1.0, t_end):
            t = pending.pop(0)
            label = f"t{t:g}".replace(".", "p")
            snap(s, label)
            artifacts["snapshots"][t] = s

    writer = _StepWriter(out / "steps.csv", model.n_species)
    status = 0
    final = None
    reports = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EntropyInequalityWarning)
        try:
            final, reports = advance(mesh, model, state, t_end, scfg, callbacks=[writer, on_step],
                                     stop_times=snap_times)
            meta["status"] = "ok"
        except SolverError as exc:
            status = 1
            meta["status"] = "solver_failure"
            meta["failure"] = {"message": str(exc), "time": getattr(exc, "time", None),
                               "failed_step": len(artifacts["times"])}
            log.error("%s", exc)
        finally:
            writer.close()
    meta["entropy_warnings"] = [str(w.message) for w in caught
                                if issubclass(w.category, EntropyInequalityWarning)]
    meta["steps"] = len(reports)

    if len(artifacts["times"]) > 1:
        emit_plotdata({"times": artifacts["times"], "mass": np.array(artifacts["mass"])}, "mass",
                      out / "plot")
    if ustar is not None:
        with open(out / "distance.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "distance_L2"])
            for t, d in artifacts["distance"]:
                w.writerow([repr(float(t)), repr(float(d))])
    if cfg.experiment == "niche" and final is not None:
        ni = cfg.extra.get("niche", {})
        meta["niche"] = niche_statistics(mesh, final, ni.get("center", [0.5, 0.5]),
                                         float(ni.get("radius", 0.15)))
    if cfg.experiment == "decay" and status == 0:
        ubar = cfg.extra.get("decay", {}).get("ubar", "auto")
        ubar = mass_average(mesh, history[0][1]) if ubar == "auto" else np.asarray(ubar, dtype=float)
        drep = decay_analysis(history, model, ubar, mesh)
        drep.write_csv(out / "decay.csv")
        emit_plotdata({"times": drep.times, "relative_entropy": drep.relative_entropy,
                       "weighted_L1_sq": drep.weighted_L1_sq}, "decay", out / "plot")
        meta["decay"] = {"ubar": ubar.tolist(), "fitted_lambda": drep.fitted_lambda,
                         "r_squared": drep.r_squared, "kappa_bound_ok": drep.kappa_bound_ok,
                         "monotone": drep.monotone, "C3": drep.C3, "window": list(drep.window)}
        artifacts["decay"] = drep
    _write_json(out / "metadata.json", meta)
    return RunResult(status, out, meta, reports, final, artifacts)


def _distance(mesh, state, ustar) -> float:
    u = state.values
    return math.sqrt(sum(discrete_norm(mesh, u[i] - ustar[i], NormKind.Lq(2)) ** 2 for i in range(len(ustar))))


def niche_statistics(mesh, state, center, radius) -> dict:
    """Cell averages of each species inside a disc versus over the whole domain."""
    r = np.linalg.norm(mesh.cell_centers - np.asarray(center, dtype=float), axis=1)
    inside = r < radius
    w = mesh.cell_measures
    u = state.values
    return {
        "center": list(center), "radius": radius,
        "center_average": (u[:, inside] @ w[inside] / w[inside].sum()).tolist(),
        "domain_average": (u @ w / w.sum()).tolist(),
    }


def _run_convergence(cfg, model, out, meta) -> RunResult:
    conv = cfg.extra.get("convergence", {})
    mesh_spec = cfg.mesh
    if mesh_spec.get("builder") != "interval":
        raise ConfigError("the convergence experiment uses an interval mesh")
    funcs = [init_mod.from_spec(s) for s in cfg.initial]
    if len(funcs) != model.n_species:
        raise ConfigError("initial data do not match the number of species")
    scfg = build_solver_config(cfg.solver, 1)
    counts = conv.get("cell_counts", [40, 80, 160, 320, 640, 1280])
    ref = int(conv.get("reference_cells", 5120))
    dt = float(conv.get("dt", (1.0 / ref) ** 2))
    t_end = float(conv.get("t_end", cfg.time.get("t_end", 1e-3)))
    meta["dt_vs_C_f"] = _dt_status(model, dt)
    try:
        table = convergence_harness(model, (float(mesh_spec["a"]), float(mesh_spec["b"])), counts, dt,
                                    t_end, funcs, reference_cells=ref, config=scfg,
                                    progress=lambda N, k: log.info("%d cells: %d steps", N, k))
    except SolverError as exc:
        meta["status"] = "solver_failure"
        meta["failure"] = {"message": str(exc)}
        _write_json(out / "metadata.json", meta)
        return RunResult(1, out, meta)
    table.write_csv(out / "convergence.csv")
    emit_plotdata({"cells": table.cells, "errors": table.errors}, "convergence", out / "plot")
    meta["status"] = "ok"
    meta["convergence"] = {"cells": table.cells, "errors": table.errors.tolist(),
                           "orders": [[None if np.isnan(x) else x for x in r] for r in table.orders.tolist()],
                           "reference_cells": ref, "dt": table.dt, "steps": table.steps}
    _write_json(out / "metadata.json", meta)
    return RunResult(0, out, meta, artifacts={"table": table})


# -- entry points --------------------------------------------------------------

def run(config_path, output_dir=None) -> int:
    try:
        cfg = load_config(config_path)
        return execute(cfg, output_dir).status
    except (ConfigError, ModelError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def validate(config_path) -> int:
    try:
        cfg = load_config(config_path)
        model = build_model(cfg.model)
        out = {"name": cfg.name, "experiment": cfg.experiment, "model": _model_meta(model)}
        if cfg.experiment != "convergence":
            mesh = build_mesh(cfg.mesh, cfg.base_dir)
            build_initial(cfg.initial, model, mesh)
            out["mesh"] = {"kind": mesh.kind, "n_cells": mesh.n_cells, "zeta": mesh.zeta,
                           "orthogonality_residual": mesh.orthogonality_residual()}
        rep = verify_hypotheses(model, samples=2000, seed=0)
        out["hypotheses"] = {"violations": rep.violations, "definiteness_margin": rep.definiteness_margin,
                             "relaxed": list(rep.relaxed)}
    except (ConfigError, ModelError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(out, indent=2, default=_json_default))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sktfv", description="Finite-volume cross-diffusion experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a configuration or preset")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output", help="output directory (overrides config and environment)")
    p_val = sub.add_parser("validate", help="check mesh and model of a configuration")
    p_val.add_argument("config")
    p_pre = sub.add_parser("presets", help="bundled presets")
    p_pre.add_argument("action", choices=["list"])
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    if args.command == "run":
        return run(args.config, args.output)
    if args.command == "validate":
        return validate(args.config)
    for name in preset_names():
        cfg = load_config(name)
        desc = yaml.safe_load((resources.files("sktfv") / "presets" / f"{name}.yaml").read_text()).get("description", "")
        print(f"{name:12s} {cfg.experiment:12s} {desc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
