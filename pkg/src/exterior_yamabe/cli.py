"""exterior-yamabe: JSON experiment configs in, report.json and CSV tables out.

Exit codes
    0  success (for prescribe: solution found and read-back verified)
    1  usage or configuration error
    2  gate failed: the requested curvatures are not attainable
    3  solver non-convergence
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from ._io import write_csv, write_json
from .calculus import probe_inequalities
from .conformal import mms_case
from .domain import (
    CurvatureTarget,
    Metric,
    RegionPair,
    build_grid,
    bump_field,
    flat_metric,
    full_region,
    region_from_intervals,
    well_metric,
)
from .energy import probe_coercivity
from .normalize import ConstraintError, ExponentTriple
from .prescribe import (
    NonCoerciveError,
    OrderingError,
    PrescribeOptions,
    prescribe_pipeline,
)
from .spectral import (
    NonConvergenceError,
    find_crossing,
    lambda_delta,
    lambda_delta_dense_oracle,
)
from .yamabe import (
    SignInconsistencyError,
    YamabeOptions,
    classify_sign,
    sign_independence_suite,
    yamabe_infimum,
)

COMMANDS = ("classify", "eigen", "yamabe", "prescribe", "mms", "sweep", "probe")

EXIT_OK, EXIT_USAGE, EXIT_GATE, EXIT_SOLVER = 0, 1, 2, 3

_NUM = {"type": "number"}
_NUMS = {"type": "array", "items": _NUM, "minItems": 1}

_WELL = {
    "type": "object",
    "properties": {"type": {"const": "well"}, "r_lo": _NUM, "r_hi": _NUM, "depth": _NUM},
    "required": ["type"],
    "additionalProperties": False,
}
_INLINE = {
    "type": "object",
    "properties": {
        "type": {"const": "inline"},
        "phi": {"oneOf": [_NUM, _NUMS]},
        "R": {"oneOf": [_NUM, _NUMS]},
        "H": _NUM,
    },
    "required": ["type", "phi", "R", "H"],
    "additionalProperties": False,
}
_RP = {
    "oneOf": [
        _NUM,
        _NUMS,
        {
            "type": "object",
            "properties": {"type": {"const": "bump"}, "r_lo": _NUM, "r_hi": _NUM, "amplitude": _NUM},
            "required": ["type", "r_lo", "r_hi", "amplitude"],
            "additionalProperties": False,
        },
    ]
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "grid": {
            "type": "object",
            "properties": {
                "n": {"type": "integer", "minimum": 3},
                "R_max": {"type": "number", "exclusiveMinimum": 1},
                "N": {"type": "integer", "minimum": 16},
                "spacing": {"enum": ["log", "uniform"]},
            },
            "required": ["n", "R_max", "N"],
            "additionalProperties": False,
        },
        "metric": {
            "oneOf": [
                {"type": "string", "pattern": r"^(flat|well(:[^,]+,[^,]+,[^,]+)?)$"},
                _WELL,
                _INLINE,
            ]
        },
        "target": {
            "oneOf": [
                {
                    "type": "object",
                    "properties": {"Rp": _RP, "Hp": _NUM},
                    "required": ["Rp", "Hp"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {"mms": _NUM},
                    "required": ["mms"],
                    "additionalProperties": False,
                },
            ]
        },
        "region": {
            "type": "object",
            "properties": {
                "intervals": {
                    "type": "array",
                    "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
                },
                "include_boundary": {"type": "boolean"},
            },
            "required": ["intervals", "include_boundary"],
            "additionalProperties": False,
        },
        "params": {
            "type": "object",
            "properties": {
                "delta": _NUM,
                "delta_list": _NUMS,
                "oracle": {"type": "boolean"},
                "q": _NUM,
                "r": _NUM,
                "b": _NUM,
                "b_list": _NUMS,
                "r_list": _NUMS,
                "max_iters": {"type": "integer", "minimum": 1},
                "restarts": {"type": "integer", "minimum": 1},
                "tol_grad": {"type": "number", "exclusiveMinimum": 0},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "schedule": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
                "r_cut": _NUM,
                "a": _NUM,
                "axis": {"enum": ["depth"]},
                "values": {"type": "array", "items": _NUM},
                "r_lo": _NUM,
                "r_hi": _NUM,
                "kind": {"enum": ["inequalities", "coercivity"]},
                "samples": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "B_list": _NUMS,
                "q0": _NUM,
                "r0": _NUM,
            },
            "additionalProperties": False,
        },
    },
    "required": ["grid"],
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config -> objects


def load_config(path: str | Path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    return cfg


def build_metric(cfg: dict, grid) -> Metric:
    spec = cfg.get("metric", "flat")
    if spec == "flat":
        return flat_metric(grid)
    if isinstance(spec, str):
        if spec == "well":
            return well_metric(grid)
        try:
            lo, hi, depth = (float(x) for x in spec.split(":", 1)[1].split(","))
        except ValueError:
            raise ConfigError(f"cannot parse metric {spec!r}") from None
        return well_metric(grid, lo, hi, depth)
    if spec["type"] == "well":
        return well_metric(grid, spec.get("r_lo", 1.0), spec.get("r_hi", 2.0), spec.get("depth", 50.0))
    for key in ("phi", "R"):
        if isinstance(spec[key], list) and len(spec[key]) != grid.nodes.size:
            raise ConfigError(f"metric.{key} needs {grid.nodes.size} values")
    return Metric(grid, spec["phi"], spec["R"], spec["H"])


def build_target(cfg: dict, grid) -> CurvatureTarget:
    spec = cfg.get("target")
    if spec is None:
        raise ConfigError("this command needs a target")
    if "mms" in spec:
        return mms_case(grid, spec["mms"]).target
    Rp = spec["Rp"]
    if isinstance(Rp, dict):
        Rp = Rp["amplitude"] * bump_field(grid, Rp["r_lo"], Rp["r_hi"])
    elif isinstance(Rp, list):
        if len(Rp) != grid.nodes.size:
            raise ConfigError(f"target.Rp needs {grid.nodes.size} values")
        Rp = np.asarray(Rp, float)
    else:
        Rp = np.full(grid.nodes.size, float(Rp))
    return CurvatureTarget(Rp, spec["Hp"])


def build_region(cfg: dict, grid) -> RegionPair:
    spec = cfg.get("region")
    if spec is None:
        return full_region(grid)
    return region_from_intervals(grid, spec["intervals"], spec["include_boundary"])


def _grid(cfg: dict):
    g = cfg["grid"]
    return build_grid(g["n"], g["R_max"], g["N"], g.get("spacing", "log"))


# ---------------------------------------------------------------------------
# commands; each returns (exit code, report dict) and writes its own CSVs


def cmd_classify(cfg, out: Path, jobs: int, seed: int):
    grid = _grid(cfg)
    metric, region = build_metric(cfg, grid), build_region(cfg, grid)
    deltas = cfg.get("params", {}).get("delta_list", [0.0])
    reps = [lambda_delta(metric, region, d) for d in deltas]
    rows = [(d, rep.value, rep.sign) for d, rep in zip(deltas, reps)]
    write_csv(out / "lambda.csv", ["delta", "lambda", "sign"], rows)
    sign = classify_sign(metric, region, deltas)
    return EXIT_OK, {"sign": sign, "lambda": [rep.as_record() | {"delta": d} for d, rep in zip(deltas, reps)]}


def cmd_eigen(cfg, out: Path, jobs: int, seed: int):
    grid = _grid(cfg)
    metric, region = build_metric(cfg, grid), build_region(cfg, grid)
    params = cfg.get("params", {})
    delta = params.get("delta", 0.0)
    rep = lambda_delta(metric, region, delta)
    result = {"delta": delta, **rep.as_record()}
    if params.get("oracle", False):
        result["oracle"] = lambda_delta_dense_oracle(metric, region, delta)
    u = rep.minimizer.values if rep.minimizer is not None else np.zeros_like(grid.nodes)
    write_csv(out / "minimizer.csv", ["r", "u"], zip(grid.nodes, u))
    return EXIT_OK, result


def cmd_yamabe(cfg, out: Path, jobs: int, seed: int):
    grid = _grid(cfg)
    metric, region = build_metric(cfg, grid), build_region(cfg, grid)
    p = cfg.get("params", {})
    opts = YamabeOptions(
        max_iters=p.get("max_iters", 2000),
        tol_grad=p.get("tol_grad", YamabeOptions.tol_grad),
        restarts=p.get("restarts", 4),
        seed=seed,
    )
    if "b_list" in p or "r_list" in p:
        table = sign_independence_suite(metric, region, p.get("b_list", [1.0]), p.get("r_list", [grid.dims.qbar_plus_1]), opts)
        (out / "signs.csv").write_text(table.to_csv(), encoding="utf-8", newline="\n")
        return EXIT_OK, {"all_equal": table.all_equal, "rows": [list(r) for r in table.rows]}
    tri = ExponentTriple(p.get("q", grid.dims.two_qbar), p.get("r", grid.dims.qbar_plus_1), p.get("b", 1.0))
    rep = yamabe_infimum(metric, region, tri, opts)
    return EXIT_OK, {"q": tri.q, "r": tri.r, "b": tri.b, "value_upper_bound": rep.value, **rep.as_record()}


def _prescribe_options(p: dict) -> PrescribeOptions:
    kw: dict[str, Any] = {}
    if "tol" in p:
        kw["tol"] = p["tol"]
    if "schedule" in p:
        kw["schedule"] = tuple(tuple(s) for s in p["schedule"])
    if "r_cut" in p:
        kw["r_cut"] = p["r_cut"]
    if "delta_list" in p:
        kw["deltas"] = tuple(p["delta_list"])
    return PrescribeOptions(**kw)


def _run_pipeline(metric, target, opts, out: Path, extra_cols=None):
    rep = prescribe_pipeline(metric, target, opts)
    record = rep.as_record()
    if rep.gate == "failed":
        return EXIT_GATE, record | {"outcome": "not attainable"}, rep
    if not rep.converged:
        return EXIT_SOLVER, record | {"outcome": "non-convergence"}, rep
    grid = metric.grid
    cols = [grid.nodes, rep.solution.values, rep.metric.R]
    header = ["r", "u", "R_readback"]
    for name, values in (extra_cols or {}).items():
        header.append(name)
        cols.append(values)
    write_csv(out / "solution.csv", header, zip(*cols))
    return EXIT_OK, record | {"outcome": "attainable"}, rep


def cmd_prescribe(cfg, out: Path, jobs: int, seed: int):
    grid = _grid(cfg)
    metric, target = build_metric(cfg, grid), build_target(cfg, grid)
    code, record, _ = _run_pipeline(metric, target, _prescribe_options(cfg.get("params", {})), out)
    return code, record


def cmd_mms(cfg, out: Path, jobs: int, seed: int):
    grid = _grid(cfg)
    p = cfg.get("params", {})
    case = mms_case(grid, p.get("a", -0.5))
    (out / "mms.json").write_text(case.to_json(), encoding="utf-8", newline="\n")
    code, record, rep = _run_pipeline(flat_metric(grid), case.target, _prescribe_options(p), out, {"u_exact": case.u_exact.values})
    if code == EXIT_OK:
        record["error_inf"] = float(np.max(np.abs(rep.solution.values - case.u_exact.values)))
    return code, {"a": case.a, "Hp": case.target.Hp, **record}


def cmd_sweep(cfg, out: Path, jobs: int, seed: int):
    grid = _grid(cfg)
    p = cfg.get("params", {})
    values = [float(v) for v in p.get("values", [])]
    if not values:
        raise ConfigError("sweep needs a nonempty params.values axis")
    region = build_region(cfg, grid)
    delta = p.get("delta", 0.0)
    r_lo, r_hi = p.get("r_lo", 1.0), p.get("r_hi", 2.0)

    def family(s: float) -> Metric:
        return well_metric(grid, r_lo, r_hi, s)

    def row(s: float):
        return lambda_delta(family(s), region, delta)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        reps = list(pool.map(row, values))
    s_star = None
    star_row = None
    for i in range(1, len(values)):
        l0, l1 = reps[i - 1].value, reps[i].value
        if math.isfinite(l0) and math.isfinite(l1) and np.sign(l0) != np.sign(l1) and l0 != 0.0:
            s_star = find_crossing(family, region, delta, values[i - 1], values[i])
            star_row = i
            break
    rows = [(s, rep.value, rep.sign, s_star if i == star_row else None) for i, (s, rep) in enumerate(zip(values, reps))]
    write_csv(out / "sweep.csv", ["value", "lambda", "sign", "s_star"], rows)
    result: dict[str, Any] = {"axis": p.get("axis", "depth"), "rows": len(rows), "s_star": s_star}
    if s_star is not None:
        rep = lambda_delta(family(s_star), region, delta)
        result |= {"lambda_star": rep.value, "scale_star": rep.scale, "sign_star": rep.sign}
    return EXIT_OK, result


def cmd_probe(cfg, out: Path, jobs: int, seed: int):
    grid = _grid(cfg)
    p = cfg.get("params", {})
    samples = p.get("samples", 200)
    if p.get("kind", "inequalities") == "inequalities":
        c1, c2 = probe_inequalities(grid, samples, seed)
        write_csv(out / "probe.csv", ["C1_hat", "C2_hat"], [(c1, c2)])
        return EXIT_OK, {"C1_hat": c1, "C2_hat": c2}
    metric, target = build_metric(cfg, grid), build_target(cfg, grid)
    qc, rc = grid.dims.critical_pair
    rows = probe_coercivity(metric, target, p.get("q0", 2 + (qc - 2) / 4), p.get("r0", 2 + (rc - 2) / 4), p.get("B_list", [10.0, 100.0]), samples, seed)
    write_csv(out / "probe.csv", ["B", "K_hat", "count"], rows)
    return EXIT_OK, {"rows": [list(r) for r in rows]}


HANDLERS = {
    "classify": cmd_classify,
    "eigen": cmd_eigen,
    "yamabe": cmd_yamabe,
    "prescribe": cmd_prescribe,
    "mms": cmd_mms,
    "sweep": cmd_sweep,
    "probe": cmd_probe,
}


# ---------------------------------------------------------------------------
# entry points


def run(config_path: str | Path, out_dir: str | Path, command: str | None = None, jobs: int = 1, seed: int | None = None) -> int:
    """Execute one experiment; always leaves a report.json in out_dir when possible."""
    out = Path(out_dir)
    report: dict[str, Any] = {"command": command, "config": str(config_path)}
    code = EXIT_USAGE
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(config_path)
        cmd = command or cfg.get("command")
        if cmd is None:
            raise ConfigError("no command given")
        if cfg.get("command", cmd) != cmd:
            raise ConfigError(f"config is for {cfg['command']!r}, not {cmd!r}")
        report["command"] = cmd
        run_seed = seed if seed is not None else cfg.get("params", {}).get("seed", 0)
        report["seed"] = run_seed
        code, result = HANDLERS[cmd](cfg, out, jobs, run_seed)
        report["result"] = result
    except (ConfigError, ConstraintError, ValueError, KeyError) as exc:
        code = EXIT_USAGE
        report["error"] = f"{type(exc).__name__}: {exc}"
    except (NonConvergenceError, SignInconsistencyError, OrderingError, NonCoerciveError) as exc:
        code = EXIT_SOLVER
        report["error"] = f"{type(exc).__name__}: {exc}"
    report["exit_code"] = code
    write_json(out / "report.json", report)
    if "error" in report:
        print(f"error: {report['error']}", file=sys.stderr)
    return code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="exterior-yamabe",
        description="Yamabe classification and prescribed curvature on radial exteriors.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, metavar="JSON")
    parser.add_argument("--out", required=True, metavar="DIR")
    parser.add_argument("--jobs", type=int, default=1, metavar="K")
    parser.add_argument("--seed", type=int, default=None, metavar="S")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    return run(args.config, args.out, args.command, args.jobs, args.seed)


if __name__ == "__main__":
    sys.exit(main())
