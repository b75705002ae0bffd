"""Batch front end: ``curvflow --config run.toml --out results/``.

Exit codes: 0 success, 1 failed certificate or other numerical failure,
2 flow hit max_steps, 3 lost admissibility or spacelikeness (or the flow
otherwise broke down), 4 IMCF mean-curvature floor, 64 bad config, 74 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import platform
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .ambient import DEFAULT_SEED, Region, convexity_certificate, make_model
from .curvature_estimates_suite import (SampleSpec, run_concavity_battery,
                                        run_gradient_order_battery, standard_composite)
from .curvfunc import CurvatureSpec, parse_deform
from .errors import (ConfigError, CurvflowError, FlowError, LostAdmissibility, LostSpacelike,
                     MeanCurvatureFloor)
from .flow import (FlowConfig, PrescribedCurvature, barrier_classify, identity_residuals,
                   imcf_run, run, slice_decay_check)
from .foliation import cmc_sweep, newton_polish, time_function
from .geometry import GraphState
from .grid import make_grid

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_FAIL, EXIT_MAXSTEPS, EXIT_LOST, EXIT_FLOOR = 0, 1, 2, 3, 4
EXIT_CONFIG, EXIT_IO = 64, 74
SCHEMA_VERSION = 1


def load_schema() -> dict:
    return json.loads(resources.files("curvflow").joinpath("config_schema.json").read_text())


def _where(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    return path or "<top level>"


def parse_config_text(text: str, fmt: str) -> dict:
    try:
        if fmt == "json":
            return json.loads(text)
        return tomllib.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from exc


def validate_config(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = [f"field {_where(e)}: {e.message}" for e in errors]
        raise ConfigError("; ".join(msgs))


def load_config(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
    fmt = "json" if p.suffix.lower() == ".json" else "toml"
    cfg = parse_config_text(text, fmt)
    if not isinstance(cfg, dict):
        raise ConfigError("top level must be a table/object")
    return cfg


# --- building blocks from a validated config ----------------------------------------

def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"field {key}: required for command {cfg['command']!r}")
    return cfg[key]


def build_model(cfg):
    m = _require(cfg, "model")
    params = {"T": m["T"]} if "T" in m else {}
    try:
        return make_model(m["id"], n=m.get("n", 1), base=m.get("base", "flat"), **params)
    except ValueError as exc:
        raise ConfigError(f"field model: {exc}") from exc


def build_grid(cfg):
    g = _require(cfg, "grid")
    try:
        return make_grid(g["topology"], g["resolution"], g.get("order"))
    except (ValueError, CurvflowError) as exc:
        raise ConfigError(f"field grid: {exc}") from exc


def build_state(cfg, model, grid):
    init = _require(cfg, "initial")
    x = grid.points()
    u = np.full(grid.size, float(init["value"]))
    a = float(init.get("amplitude", 0.0))
    k = int(init.get("mode", 1))
    shape = init.get("shape", "none")
    if shape == "sin":
        u = u + a * np.sin(k * x[:, 0])
    elif shape == "cos":
        u = u + a * np.cos(k * x[:, 0])
    elif shape == "sin-product":
        if grid.n < 2 or grid.topology != "torus2":
            raise ConfigError("field initial.shape: sin-product needs the torus2 grid")
        u = u + a * np.sin(k * x[:, 0]) * np.sin(k * x[:, 1])
    if model.base_dim != grid.n or model.base != grid.base_kind:
        raise ConfigError("fields model/grid: base dimension or base kind do not match")
    try:
        return GraphState(u, model, grid)
    except CurvflowError as exc:
        raise ConfigError(f"field initial: {exc}") from exc


def build_curvature(cfg, n):
    c = _require(cfg, "curvature")
    try:
        return CurvatureSpec(c["F"], n), parse_deform(c.get("Phi", "id"))
    except ValueError as exc:
        raise ConfigError(f"field curvature: {exc}") from exc


def build_f(cfg):
    fc = _require(cfg, "f")
    if fc["kind"] == "constant":
        return PrescribedCurvature.constant(fc["value"])
    if "r0" not in fc or "p" not in fc:
        raise ConfigError("field f: radial-power needs r0 and p")
    return PrescribedCurvature.radial_power(fc["value"], fc["r0"], fc["p"])


def build_flow_config(cfg, **defaults):
    opts = dict(defaults)
    opts.update(cfg.get("flow", {}))
    opts["seed"] = cfg.get("seed", DEFAULT_SEED)
    try:
        return FlowConfig(**opts)
    except ValueError as exc:
        raise ConfigError(f"field flow: {exc}") from exc


# --- output -------------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv(columns, rows) -> str:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(x if isinstance(x, str) else format(float(x), ".17g") for x in r))
    return "\n".join(lines) + "\n"


class Writer:
    """Collects output files and writes them in one go, sorted by name."""

    def __init__(self, out: Path):
        self.out = out
        self.files = {}

    def json(self, name, obj):
        self.files[name] = _dumps(dict(obj, schema_version=SCHEMA_VERSION))

    def text(self, name, text):
        self.files[name] = text

    def flush(self):
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            for name in sorted(self.files):
                (self.out / name).write_text(self.files[name])
        except OSError as exc:
            raise OSError(f"cannot write to {self.out}: {exc.strerror}") from exc


def emit_report(writer: Writer, trace=None, plot_column=None):
    """Trace CSV plus an optional two-column plot file (t against one monitor)."""
    if trace is None:
        return
    writer.text("trace.csv", trace.to_csv())
    if plot_column:
        if plot_column not in trace.columns:
            raise ConfigError(f"field output.plot: no trace column {plot_column!r}")
        t = trace.column("t")
        y = trace.column(plot_column)
        writer.text("plot.dat", "".join(f"{a:.17g} {b:.17g}\n" for a, b in zip(t, y)))


def _state_json(state):
    return {"model": {"id": state.model.model_id, "n": state.model.base_dim,
                      "base": state.model.base, "params": state.model.params},
            "grid": {"topology": state.grid.topology, "resolution": list(state.grid.shape),
                     "order": state.grid.order},
            "u": state.u, "t": state.t}


# --- commands -------------------------------------------------------------------------

def _cmd_flow(cfg, w):
    model = build_model(cfg)
    grid = build_grid(cfg)
    state = build_state(cfg, model, grid)
    spec, deform = build_curvature(cfg, model.base_dim)
    f = build_f(cfg)
    config = build_flow_config(cfg)
    final, trace, verdict = run(state, spec, deform, f, config)
    emit_report(w, trace, cfg.get("output", {}).get("plot"))
    report = {"verdict": verdict, "monitors": trace.monitors}
    nt = cfg.get("newton", {})
    if verdict == "converged" and nt.get("enabled", False):
        pol = newton_polish(final, spec, deform, f, tol=nt.get("tol", 1e-12),
                            max_iter=nt.get("max_iter", 10))
        final = pol.state
        report["newton"] = {"iterations": pol.iterations, "residual": pol.residual,
                            "history": list(pol.history)}
    w.json("final_state.json", _state_json(final))
    w.json("report.json", report)
    return EXIT_OK if verdict in ("converged", "t_end") else EXIT_MAXSTEPS


def _cmd_imcf(cfg, w):
    model = build_model(cfg)
    grid = build_grid(cfg)
    state = build_state(cfg, model, grid)
    config = build_flow_config(cfg, t_end=1.0)
    if config.t_end is None:
        raise ConfigError("field flow.t_end: required for imcf")
    trace, rep = imcf_run(state, config)
    emit_report(w, trace, cfg.get("output", {}).get("plot"))
    w.text("volume_law.csv", _csv(("t", "tau", "volume_ratio", "expected", "deviation"),
                                  rep.table))
    w.json("final_state.json", _state_json(rep.final_state))
    w.json("report.json", {"verdict": rep.verdict, "M0": rep.M0, "max_error": rep.max_error,
                           "table_deviation": rep.table_deviation, "monitors": trace.monitors})
    return EXIT_OK


def _cmd_foliate(cfg, w):
    model = build_model(cfg)
    grid = build_grid(cfg)
    state = build_state(cfg, model, grid)
    taus = _require(cfg, "foliation")["taus"]
    config = build_flow_config(cfg, tol_stationary=1e-7)
    try:
        res = cmc_sweep(state, taus, config, newton_tol=cfg.get("newton", {}).get("tol", 1e-12))
    except ValueError as exc:
        raise ConfigError(f"field foliation.taus: {exc}") from exc
    w.text("leaves.csv", _csv(("tau", "u_min", "u_max", "residual", "udot_min"),
                              res.leaf_table()))
    out = {"model": model.model_id, "taus": res.taus, "ordering_ok": res.ordering_ok,
           "positivity_ok": res.positivity_ok, "failures": res.failures,
           "leaves": [{"tau": lf.tau, "u": lf.u, "residual": lf.residual,
                       "udot_min": lf.min_udot, "newton_iterations": lf.newton_iterations,
                       "flow_steps": lf.flow_steps} for lf in res.leaves]}
    if res.ordering_ok:
        tf = time_function(res)
        out["time_function"] = {"monotone": tf.monotone, "min_slope": tf.min_slope}
    w.json("foliation.json", out)
    return EXIT_OK if res.passed else EXIT_FAIL


def _cmd_identities(cfg, w):
    model = build_model(cfg)
    grid = build_grid(cfg)
    state = build_state(cfg, model, grid)
    spec, deform = build_curvature(cfg, model.base_dim)
    f = build_f(cfg) if "f" in cfg else None
    ic = cfg.get("identities", {})
    rep = identity_residuals(state, spec, deform, f, ic.get("dt_probe", 1e-4),
                             scheme=ic.get("scheme", "forward"), identities=ic.get("which"))
    w.text("identities.csv", _csv(("identity", "residual", "residual_half", "ratio"),
                                  [(a, b, c, d) for a, b, c, d in rep.table()]))
    w.json("report.json", {"dt_probe": rep.dt_probe, "scheme": rep.scheme,
                           "skipped": list(rep.skipped),
                           "entries": {e.name: {"residual": e.residual,
                                                "residual_half": e.residual_half,
                                                "ratio": e.ratio}
                                       for e in rep.entries.values()}})
    return EXIT_OK


DEFAULT_CONCAVITY = ({"F": "K", "n": 2}, {"F": "H2", "n": 2})


def _cmd_concavity(cfg, w):
    cc = cfg.get("concavity", {})
    seed = cfg.get("seed", DEFAULT_SEED)
    count = cc.get("samples", 10_000)
    cases = cc.get("cases", list(DEFAULT_CONCAVITY))
    results = []
    ok = True
    for case in cases:
        try:
            comp = standard_composite(case["F"], case["n"])
        except ValueError as exc:
            raise ConfigError(f"field concavity.cases: {exc}") from exc
        floor = 1e-2 if comp.cone == "gamma_2" else 1e-3
        sample = SampleSpec(comp, count, floor, seed)
        conc = run_concavity_battery(sample)
        order = run_gradient_order_battery(sample)
        passed = conc.passed and order.passed and conc.decomposition_residual < 1e-5
        ok = ok and passed
        results.append({"F": case["F"], "n": case["n"], "samples": count,
                        "pass_count": conc.pass_count, "worst_gap": conc.worst_gap,
                        "decomposition_residual": conc.decomposition_residual,
                        "gradient_order_pass": order.pass_count,
                        "gradient_order_worst": order.worst_violation, "passed": passed})
    w.json("concavity.json", {"seed": seed, "cases": results, "passed": ok})
    return EXIT_OK if ok else EXIT_FAIL


def _cmd_barrier(cfg, w):
    model = build_model(cfg)
    grid = build_grid(cfg)
    state = build_state(cfg, model, grid)
    spec, deform = build_curvature(cfg, model.base_dim)
    rep = barrier_classify(state, spec, deform, build_f(cfg))
    w.json("barrier.json", {"kind": rep.kind, "margin": rep.margin})
    return EXIT_OK


def _cmd_decay(cfg, w):
    model = build_model(cfg)
    dc = _require(cfg, "decay")
    rep = slice_decay_check(model, dc["x0_interval"], dc.get("n_tau_samples", 20),
                            seed=cfg.get("seed", DEFAULT_SEED))
    if rep.rescaled_time is None:
        cols, rows = ("tau", "phi"), list(zip(rep.taus, rep.phi))
    else:
        cols = ("tau", "phi", "rescaled_time")
        rows = list(zip(rep.taus, rep.phi, rep.rescaled_time))
    w.text("decay.csv", _csv(cols, rows))
    w.json("decay.json", {"identity_residual": rep.identity_residual,
                          "phi_integral": rep.phi_integral, "divergent": rep.divergent,
                          "closed_form_error": rep.closed_form_error,
                          "rescaled_min_ratio": rep.rescaled_min_ratio})
    return EXIT_OK if rep.identity_residual <= 1e-8 else EXIT_FAIL


def _cmd_convex(cfg, w):
    model = build_model(cfg)
    cc = _require(cfg, "convexity")
    region = Region(tuple(cc["x0_interval"]))
    try:
        region.check(model)
    except (ValueError, CurvflowError) as exc:
        raise ConfigError(f"field convexity.x0_interval: {exc}") from exc
    seed = cfg.get("seed", DEFAULT_SEED)
    cert = convexity_certificate(model, region, cc.get("lambda_max", 2.0 ** 16),
                                 cc.get("n_samples", 1000), seed)
    w.json("convexity.json", {"success": cert.success, "lambda": cert.lam,
                              "margin": cert.margin, "ladder": [list(r) for r in cert.ladder],
                              "seed": seed})
    return EXIT_OK if cert.success else EXIT_FAIL


COMMANDS = {"flow": _cmd_flow, "imcf": _cmd_imcf, "foliate": _cmd_foliate,
            "validate-identities": _cmd_identities, "validate-concavity": _cmd_concavity,
            "check-barrier": _cmd_barrier, "check-decay": _cmd_decay,
            "cert-convex": _cmd_convex}


def manifest(cfg: dict) -> dict:
    return {"config": cfg, "seed": cfg.get("seed", DEFAULT_SEED),
            "versions": {"curvflow": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "python": platform.python_version()}}


def run_command(cfg: dict, out: str | Path) -> int:
    """Validate, dispatch and write every output file; returns the exit code."""
    cfg = copy.deepcopy(cfg)
    validate_config(cfg)
    w = Writer(Path(out))
    w.json("manifest.json", manifest(cfg))
    code = EXIT_FAIL
    error = None
    try:
        code = COMMANDS[cfg["command"]](cfg, w)
    except ConfigError:
        raise
    except MeanCurvatureFloor as exc:
        code, error = EXIT_FLOOR, exc
    except (LostAdmissibility, LostSpacelike, FlowError) as exc:
        code, error = EXIT_LOST, exc
    except CurvflowError as exc:
        code, error = EXIT_FAIL, exc
    if error is not None:
        trace = getattr(error, "trace", None)
        if trace is not None:
            emit_report(w, trace)
        w.json("error.json", {"error": type(error).__name__, "message": str(error)})
    w.flush()
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curvflow", description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True, help="experiment file (.toml or .json)")
    p.add_argument("--out", required=True, help="directory for outputs")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--resolution", type=int, help="override grid.resolution")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.resolution is not None:
            if not isinstance(cfg.get("grid"), dict):
                raise ConfigError("field grid: --resolution needs a grid table")
            cfg["grid"]["resolution"] = args.resolution
        return run_command(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
