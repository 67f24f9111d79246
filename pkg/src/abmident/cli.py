"""Config-driven command line front end.

``abmident run --config run.json [--set key=value ...] [--threads N] [--output DIR]``
runs one protocol and writes its artifacts plus ``manifest.json``;
``abmident report DIR`` prints a summary of a finished run without
recomputing anything.

Exit codes: 0 success, 2 configuration error, 3 numerical error (also a
corrupt report file), 4 missing model capability.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bayes import MCMCConfig, Prior, posterior_ident_check, posterior_sample
from .dgp import SimConfig, default_threads, derive, replicate, simulate
from .errors import AbmIdentError, CapabilityError, ConfigError, NumericalError
from .indirect import ii_ident_test
from .models import get_model
from .moments import MomentSpec, MomentVector, ergodicity_check, pooled
from .oracle import (analytic_objective, ergodic_limit, fp_stationary_density, kirman_fp_spec,
                     model_moments, stationary_distribution, transition_matrix)
from .smd import (SCHEMA_VERSION, GridSpec, Thresholds, WeightMatrix, config_hash, dump_json, fmt,
                  identify, objective, refine)

PROTOCOLS = ("simulate", "ergodicity", "smd", "bayes", "indirect", "oracle")
TOP_KEYS = {"model", "model_options", "params", "sim", "protocol", "output_dir", "master_seed", *PROTOCOLS}
TARGET_SEED_OFFSET = 1 << 33
DATA_SEED_OFFSET = (1 << 33) + 1

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CAPABILITY = 0, 2, 3, 4


# ----------------------------------------------------------------------------- config


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def apply_override(cfg: dict, item: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as JSON, else kept as a string."""
    if "=" not in item:
        raise ConfigError(f"--set: expected key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"--set: empty key in {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set: {'.'.join(parts)} descends into non-object field {p!r}")
        node = nxt
    node[parts[-1]] = value


def _require(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"{where}.{key}: required field missing")
    return block[key]


def _sim_config(block: dict, where: str, master_seed: int | None = None) -> SimConfig:
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {"n_agents", "horizon", "burn_in", "replications", "master_seed", "noise_scale"}
    extra = set(block) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {sorted(extra)}")
    kw = dict(block)
    if master_seed is not None:
        kw["master_seed"] = master_seed
    try:
        return SimConfig(**kw)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _grid(model, base, block, where: str) -> GridSpec:
    if not isinstance(block, dict) or not block:
        raise ConfigError(f"{where}: expected an object mapping parameter -> [lo, hi, count]")
    spec = {}
    for name, axis in block.items():
        if name not in base.names:
            raise ConfigError(f"{where}.{name}: unknown parameter for model {model.name!r}")
        if not isinstance(axis, (list, tuple)) or len(axis) != 3:
            raise ConfigError(f"{where}.{name}: expected [lo, hi, count]")
        spec[name] = (float(axis[0]), float(axis[1]), int(axis[2]))
    try:
        return GridSpec.linspace(base, spec)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _moment_spec(block: dict, where: str) -> MomentSpec:
    try:
        return MomentSpec(int(block.get("M", 2)), tuple(block.get("lags", ())), bool(block.get("central", False)))
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


class Run:
    """Resolved configuration shared by the protocol runners."""

    def __init__(self, cfg: dict, threads: int | None):
        extra = set(cfg) - TOP_KEYS
        if extra:
            raise ConfigError(f"config: unknown top-level field(s) {sorted(extra)}")
        protocol = cfg.get("protocol")
        if protocol not in PROTOCOLS:
            raise ConfigError(f"protocol: expected one of {list(PROTOCOLS)}, got {protocol!r}")
        name = cfg.get("model")
        if not isinstance(name, str):
            raise ConfigError("model: required string field missing")
        try:
            self.model = get_model(name, **cfg.get("model_options", {}))
        except ConfigError as exc:
            raise ConfigError(f"model: {exc}") from None
        self.cfg = cfg
        self.protocol = protocol
        seed = cfg.get("master_seed", cfg.get("sim", {}).get("master_seed", 0))
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"master_seed: expected an integer, got {seed!r}")
        self.sim = _sim_config(cfg.get("sim", {}), "sim", seed)
        params = cfg.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError("params: expected an object")
        for k in params:
            if k not in self.model.default_params().names:
                raise ConfigError(f"params.{k}: unknown parameter for model {name!r}")
        self.params = self.model.default_params().with_values(params)
        try:
            self.params.check_bounds()
        except ConfigError as exc:
            raise ConfigError(f"params: {exc}") from None
        self.threads = threads
        self.block = cfg.get(protocol, {})
        if not isinstance(self.block, dict):
            raise ConfigError(f"{protocol}: expected an object")
        self.outputs: list = []
        self.seeds = {"master_seed": int(self.sim.master_seed)}


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def _plot(path: Path, lines: list) -> None:
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------- protocols


def run_simulate(r: Run, out: Path) -> None:
    reps = replicate(r.model, r.params, r.sim, threads=r.threads)
    cols = np.vstack([t.observables for t in reps]).T
    _write_rows(out / "trajectories.csv", ["t"] + [f"rep{i}" for i in range(len(reps))],
                ([j] + [fmt(v) for v in row] for j, row in enumerate(cols)))
    r.seeds["replicate_seeds"] = [t.seed_used for t in reps]
    _plot(out / "plot.gp", ["set datafile separator ','", "set key autotitle columnhead",
                            "set xlabel 't'", "set ylabel 'Y'",
                            "plot 'trajectories.csv' using 1:2 with lines"])
    r.outputs += ["trajectories.csv", "plot.gp"]


def run_ergodicity(r: Run, out: Path) -> None:
    b = r.block
    starts = b.get("starts")
    rep = ergodicity_check(r.model, r.params, r.sim, starts, int(b.get("M", 2)),
                           float(b.get("threshold", 2.0)), r.threads)
    dump_json({"schema_version": SCHEMA_VERSION, "starts": starts, **rep.as_dict()}, out / "ergodicity.json")
    r.outputs.append("ergodicity.json")


def _target(r: Run, spec: MomentSpec):
    b = r.block.get("target", {})
    source = b.get("source", "simulate")
    if source == "analytic":
        return model_moments(r.model, r.params, r.sim, spec), None
    if source == "values":
        vals = np.asarray(_require(b, "values", "smd.target"), float)
        if vals.size != spec.size:
            raise ConfigError(f"smd.target.values: {vals.size} values for {spec.size} moments")
        return MomentVector(vals[: spec.M], spec.M, 0, vals[spec.M:], spec.lags), None
    if source != "simulate":
        raise ConfigError(f"smd.target.source: expected simulate, analytic or values, got {source!r}")
    seed = b.get("seed")
    seed = derive(r.sim.master_seed, TARGET_SEED_OFFSET) if seed is None else int(seed)
    sim = r.sim.with_(replications=int(b.get("replications", r.sim.replications)))
    reps = replicate(r.model, r.params, sim, threads=r.threads, seed_base=seed)
    r.seeds["target_seed_base"] = int(seed)
    return pooled(reps, spec), reps


def _surface_plot(names: list) -> list:
    lines = ["set datafile separator ','", "set key off"]
    if len(names) == 1:
        lines += [f"set xlabel '{names[0]}'", "set ylabel 'J'", "plot 'surface.csv' every ::1 using 1:2 with linespoints"]
    else:
        lines += [f"set xlabel '{names[0]}'", f"set ylabel '{names[1]}'", "set zlabel 'J'",
                  "splot 'surface.csv' every ::1 using 1:2:($" + str(len(names) + 1) + ") with points"]
    return lines


def _thresholds(b: dict) -> Thresholds:
    try:
        return Thresholds(**b.get("thresholds", {}))
    except TypeError as exc:
        raise ConfigError(f"thresholds: {exc}") from None


def run_smd(r: Run, out: Path) -> None:
    b = r.block
    spec = _moment_spec(b.get("moments", {}), "smd.moments")
    grid = _grid(r.model, r.params, _require(b, "grid", "smd"), "smd.grid")
    target, target_reps = _target(r, spec)
    kind = b.get("weight", "Identity")
    if kind == "Identity":
        W = WeightMatrix.identity(spec.size)
    elif target_reps is None:
        raise ConfigError(f"smd.weight: {kind} needs a simulated target")
    else:
        W = WeightMatrix.from_replications(kind, target_reps, spec)
    th = _thresholds(b)
    surface, report = identify(r.model, grid, r.sim, target, W, spec, bool(b.get("crn", True)), th,
                               b.get("step"), r.threads)
    for _ in range(int(b.get("refine", 0))):
        surface = refine(surface, float(b.get("shrink", 0.5)), r.model, r.sim, target, W, r.threads)
        surface, report = identify(r.model, surface.grid, r.sim, target, W, spec, surface.crn, th,
                                   b.get("step"), r.threads, surface=surface)
    surface.write(out / "surface.csv", out / "surface.json")
    dump_json(report.as_dict(), out / "ident_report.json")
    _plot(out / "plot.gp", _surface_plot(surface.names))
    r.outputs += ["surface.csv", "surface.json", "ident_report.json", "plot.gp"]


def run_bayes(r: Run, out: Path) -> None:
    b = r.block
    priors_cfg = _require(b, "priors", "bayes")
    try:
        priors = {k: Prior.from_dict(v) for k, v in priors_cfg.items()}
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bayes.priors: missing field {exc}") from None
    data = b.get("data", {})
    data_seed = data.get("seed")
    data_seed = derive(r.sim.master_seed, DATA_SEED_OFFSET) if data_seed is None else int(data_seed)
    y = simulate(r.model, r.params, r.sim.with_(horizon=int(data.get("horizon", r.sim.horizon))), data_seed)
    m = dict(b.get("mcmc", {}))
    sim = _sim_config(m.pop("sim", {"horizon": 2000, "replications": 5}), "bayes.mcmc.sim")
    m.setdefault("seed", r.sim.master_seed)
    try:
        mc = MCMCConfig(sim=sim, **m)
    except TypeError as exc:
        raise ConfigError(f"bayes.mcmc: {exc}") from None
    base = r.params
    chain = posterior_sample(r.model, priors, y, mc, base=base, threads=r.threads)
    report = posterior_ident_check(chain)
    r.seeds.update({"data_seed": int(data_seed), "mcmc_seed": int(mc.seed)})
    chain.write_csv(out / "chain.csv")
    dump_json(report.as_dict() | {"source": "posterior"}, out / "ident_report.json")
    dump_json(chain.provenance(), out / "chain.json")
    n = len(chain.names)
    _plot(out / "plot.gp", ["set datafile separator ','", "set key autotitle columnhead",
                            "set multiplot layout 1," + str(n)]
          + [f"plot 'chain.csv' using 1:{3 + i} with lines" for i in range(n)] + ["unset multiplot"])
    r.outputs += ["chain.csv", "chain.json", "ident_report.json", "plot.gp"]


def run_indirect(r: Run, out: Path) -> None:
    b = r.block
    grid = _grid(r.model, r.params, _require(b, "grid", "indirect"), "indirect.grid")
    rep = ii_ident_test(r.model, r.params, grid, r.sim, int(b.get("p", 2)), b.get("match_tol"),
                        b.get("exclusion_radius"), None, bool(b.get("include_resid_var", True)), r.threads)
    dump_json(rep.as_dict(), out / "ii_report.json")
    rep.write_matches_csv(out / "ii_matches.csv")
    names = grid.names
    _write_rows(out / "ii_surface.csv", names + ["distance"],
                ([fmt(grid.point(i)[n]) for n in names] + [fmt(rep.distances[i])] for i in grid.indices()))
    _plot(out / "plot.gp", ["set datafile separator ','", "set key off",
                            f"set xlabel '{names[0]}'", "set ylabel 'distance'",
                            "plot 'ii_surface.csv' every ::1 using 1:" + str(len(names) + 1) + " with points"])
    r.outputs += ["ii_report.json", "ii_matches.csv", "ii_surface.csv", "plot.gp"]


def run_oracle(r: Run, out: Path) -> None:
    b = r.block
    spec = _moment_spec(b.get("moments", {}), "oracle.moments")
    P = transition_matrix(r.model, r.params, r.sim)
    pi = stationary_distribution(P, float(b.get("tol", 1e-10)))
    mom = model_moments(r.model, r.params, r.sim, spec)
    n, dist = ergodic_limit(P, pi)
    pi.write_csv(out / "stationary.csv")
    result = {"schema_version": SCHEMA_VERSION, "stationary": pi.as_dict(), "moments": mom.vector().tolist(),
              "moment_labels": spec.labels(), "ergodic_limit": {"n": n, "max_row_l1": dist}}
    r.outputs += ["stationary.csv"]
    fp = b.get("fp")
    if fp is not None:
        if r.model.name != "kirman":
            raise CapabilityError(f"oracle.fp: no mean-field drift/diffusion for model {r.model.name!r}")
        spec_fp = kirman_fp_spec(r.sim.n_agents, r.params["epsilon"], r.params["delta"],
                                 int(fp.get("grid_points", 2001)))
        dens = fp_stationary_density(spec_fp)
        dens.write_csv(out / "fp_density.csv")
        lattice = np.arange(r.sim.n_agents + 1) / r.sim.n_agents
        w = dens(lattice)
        result["fp"] = {"l1_vs_chain": float(np.abs(w / w.sum() - pi.pi).sum()), **dens.spec_info}
        r.outputs.append("fp_density.csv")
    if "grid" in b:
        grid = _grid(r.model, r.params, b["grid"], "oracle.grid")
        surface = analytic_objective(r.model, grid, r.sim, mom, None, spec, r.threads)
        _, report = identify(r.model, grid, r.sim, mom, surface.W, spec, False, _thresholds(b), b.get("step"),
                             r.threads, surface=surface,
                             objective_fn=lambda th: _analytic_J(r, th, mom, surface.W, spec))
        surface.write(out / "surface.csv", out / "surface.json")
        dump_json(report.as_dict(), out / "ident_report.json")
        _plot(out / "plot.gp", _surface_plot(surface.names))
        r.outputs += ["surface.csv", "surface.json", "ident_report.json", "plot.gp"]
    dump_json(result, out / "oracle.json")
    r.outputs.append("oracle.json")


def _analytic_J(r: Run, theta, target, W, spec) -> float:
    return objective(target, model_moments(r.model, theta, r.sim, spec), W)


RUNNERS = {"simulate": run_simulate, "ergodicity": run_ergodicity, "smd": run_smd,
           "bayes": run_bayes, "indirect": run_indirect, "oracle": run_oracle}


def execute(cfg: dict, output: str | None = None, threads: int | None = None) -> Path:
    """Run the configured protocol and write its artifacts; returns the output dir."""
    cfg = copy.deepcopy(cfg)
    r = Run(cfg, threads)
    out = Path(output or cfg.get("output_dir") or "abmident-out")
    out.mkdir(parents=True, exist_ok=True)
    RUNNERS[r.protocol](r, out)
    resolved = {k: v for k, v in cfg.items() if k != "output_dir"}
    resolved["sim"] = r.sim.as_dict()
    resolved["params"] = r.params.as_dict()
    manifest = {"schema_version": SCHEMA_VERSION, "tool": "abmident", "version": __version__,
                "protocol": r.protocol, "model": r.model.name, "config": resolved,
                "config_hash": config_hash(resolved), "seeds": r.seeds, "outputs": sorted(r.outputs)}
    dump_json(manifest, out / "manifest.json")
    return out


# ----------------------------------------------------------------------------- report


def _load_json(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise NumericalError(f"{path.name}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def report_lines(directory) -> list:
    d = Path(directory)
    man_path = d / "manifest.json"
    if not man_path.is_file():
        raise ConfigError(f"report: no manifest.json in {str(d)!r}")
    man = _load_json(man_path)
    lines = [f"protocol: {man.get('protocol')}  model: {man.get('model')}  version: {man.get('version')}",
             f"config_hash: {man.get('config_hash')}",
             "seeds: " + json.dumps(man.get("seeds", {}), sort_keys=True)]
    if (d / "ident_report.json").is_file():
        rep = _load_json(d / "ident_report.json")
        lines.append("classification: " + ", ".join(rep.get("classification", [])))
        if rep.get("flat_dimensions"):
            lines.append("UnderIdentified: " + ", ".join(rep["flat_dimensions"]))
        for ridge in rep.get("evidence", {}).get("ridges", []):
            lines.append("PartiallyIdentified: ridge over " + ", ".join(ridge["params"]))
        minima = rep.get("global_minima", [])
        if minima:
            lines.append("minima:")
            for m in minima:
                params = ", ".join(f"{k}={v:.6g}" for k, v in m.get("params", {}).items())
                value = m.get("J")
                lines.append(f"  {params}" + ("" if value is None else f"  J={value:.6g}"))
        if rep.get("eigenvalues") is not None:
            lines.append("hessian eigenvalues: " + ", ".join(f"{v:.6g}" for v in rep["eigenvalues"]))
        for w in rep.get("warnings", []):
            lines.append(f"warning: {w}")
    if (d / "chain.json").is_file():
        ch = _load_json(d / "chain.json")
        lines.append(f"acceptance rate: {ch.get('acceptance_rate'):.4f}")
        for w in ch.get("warnings", []):
            lines.append(f"warning: {w}")
    if (d / "ii_report.json").is_file():
        ii = _load_json(d / "ii_report.json")
        lines.append(f"indirect inference verdict: {ii.get('verdict')}  matches: {len(ii.get('matches', []))}"
                     f"  match_tol: {ii.get('match_tol'):.6g}")
        for m in ii.get("matches", []):
            lines.append("  " + ", ".join(f"{k}={v:.6g}" for k, v in m["params"].items())
                         + f"  distance={m['distance']:.6g}")
        for w in ii.get("warnings", []):
            lines.append(f"warning: {w}")
    if (d / "ergodicity.json").is_file():
        e = _load_json(d / "ergodicity.json")
        ratios = ", ".join("inf" if v is None else f"{v:.4g}" for v in e.get("per_moment_ratio", []))
        lines.append(f"ergodicity: {e.get('verdict')}  ratios: {ratios}  threshold: {e.get('threshold')}")
    if (d / "oracle.json").is_file():
        o = _load_json(d / "oracle.json")
        lines.append("analytic moments: " + ", ".join(f"{l}={v:.10g}" for l, v in
                                                      zip(o.get("moment_labels", []), o.get("moments", []))))
        lines.append(f"stationary residual: {o['stationary']['residual']:.3e}")
        if "fp" in o:
            lines.append(f"Fokker-Planck l1 distance to the exact chain: {o['fp']['l1_vs_chain']:.4g}")
    return lines


# ----------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abmident", description="Identification diagnostics for agent-based models.")
    p.add_argument("--version", action="version", version=f"abmident {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one protocol from a JSON config")
    run.add_argument("config_pos", nargs="?", metavar="CONFIG", help="config file (same as --config)")
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a (dotted) config field; repeatable")
    run.add_argument("--threads", type=int, default=None,
                     help="worker threads (default: $ABMIDENT_THREADS or the CPU count)")
    run.add_argument("--output", help="output directory (overrides output_dir)")
    rep = sub.add_parser("report", help="summarise a finished run")
    rep.add_argument("directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            print("\n".join(report_lines(args.directory)))
            return EXIT_OK
        path = args.config or args.config_pos
        if not path:
            raise ConfigError("config: pass a config file with --config")
        cfg = load_config(path)
        if not isinstance(cfg, dict):
            raise ConfigError("config: top level must be a JSON object")
        for item in args.set:
            apply_override(cfg, item)
        threads = args.threads if args.threads is not None else default_threads()
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = execute(cfg, args.output, threads)
        print(f"wrote {out}")
        return EXIT_OK
    except CapabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AbmIdentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
