"""Command-line runner.

    smworlds run <config.json> [--seed S] [--out DIR] [--threads N]
    smworlds compare <config.json> [--seed S] [--out DIR] [--threads N]
    smworlds list [--json]

Exit codes: 0 success, 2 configuration error, 3 numerical abort or violated
invariant.  Every run directory ends with a manifest.json whose ``status``
is ``ok`` or ``failed``.
"""
from __future__ import annotations

import argparse
import inspect
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from . import __version__
from .errors import NumericalAbort
from .export import hash_tree, jsonable, write_csv, write_json, write_smf
from .scenarios import SCENARIOS, ScenarioInfo, ScenarioResult

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
U64_MAX = 2 ** 64 - 1
GRID_KEYS = {"points_per_axis": "n", "extent": "L", "dt": "dt"}
OUTPUT_KEYS = ("fields", "branches", "trajectories", "summary")
BRANCH_COLUMNS = ("time", "id", "parent_id", "weight", "norm_sq", "support_cell_count")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str
    params: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None
    outputs: dict = field(default_factory=lambda: {k: True for k in OUTPUT_KEYS})
    ontologies: list | None = None


_JSON_TYPES = {"integer": {"type": "integer"}, "number": {"type": "number"}, "boolean": {"type": "boolean"},
               "string": {"type": "string"},
               "array": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2}}


def _param_schema(params: dict) -> dict:
    return {"type": "object", "additionalProperties": False,
            "properties": {k: dict(_JSON_TYPES[t], description=d) for k, (t, _, d) in params.items()}}


def _compare_params(info: ScenarioInfo) -> dict:
    out = {}
    for name, par in inspect.signature(info.compare).parameters.items():
        if name in ("ontologies", "seed", "threads"):
            continue
        d = par.default
        t = ("boolean" if isinstance(d, bool) else "integer" if isinstance(d, int)
             else "number" if isinstance(d, float) else "array")
        out[name] = (t, d, "")
    return out


def config_schema(compare: bool = False) -> dict:
    props = {
        "scenario": {"type": "string", "enum": sorted(SCENARIOS)},
        "params": {"type": "object"},
        "grid": {"type": "object", "additionalProperties": False,
                 "properties": {"points_per_axis": {"type": "integer", "minimum": 8},
                                "extent": {"type": "number", "exclusiveMinimum": 0},
                                "dt": {"type": "number", "exclusiveMinimum": 0}}},
        "seed": {"type": "integer", "minimum": 0, "maximum": U64_MAX},
        "out": {"type": "string"},
        "outputs": {"type": "object", "additionalProperties": False,
                    "properties": {k: {"type": "boolean"} for k in OUTPUT_KEYS}},
    }
    required = ["scenario"]
    if compare:
        props["ontologies"] = {"type": "array", "minItems": 1, "uniqueItems": True,
                               "items": {"type": "string", "enum": ["sm", "bohm", "sip", "grwm"]}}
        required.append("ontologies")
    return {"type": "object", "additionalProperties": False, "properties": props, "required": required}


def _validate(instance, schema, where: str) -> None:
    try:
        jsonschema.validate(instance, schema)
    except jsonschema.ValidationError as e:
        loc = "/".join(str(p) for p in e.absolute_path)
        raise ConfigError(f"{where}{'/' + loc if loc else ''}: {e.message}") from None


def load_config(path: str | Path, compare: bool = False) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return parse_config(raw, compare)


def parse_config(raw: dict, compare: bool = False) -> RunConfig:
    _validate(raw, config_schema(compare), "config")
    info = SCENARIOS[raw["scenario"]]
    if compare:
        if info.compare is None:
            raise ConfigError(f"scenario {raw['scenario']!r} has no ontology comparison")
        _validate(raw.get("params", {}), _param_schema(_compare_params(info)), "config/params")
    else:
        _validate(raw.get("params", {}), _param_schema(info.params), "config/params")
    if raw.get("grid") and not info.grid:
        raise ConfigError(f"config/grid: scenario {raw['scenario']!r} has no grid to override")
    outputs = {k: True for k in OUTPUT_KEYS}
    outputs.update(raw.get("outputs", {}))
    return RunConfig(raw["scenario"], dict(raw.get("params", {})), dict(raw.get("grid", {})),
                     int(raw.get("seed", 0)), raw.get("out"), outputs, raw.get("ontologies"))


def execute(cfg: RunConfig) -> ScenarioResult:
    info = SCENARIOS[cfg.scenario]
    kwargs = dict(cfg.params)
    kwargs.update({GRID_KEYS[k]: v for k, v in cfg.grid.items()})
    for k in ("weights",):
        if k in kwargs:
            kwargs[k] = tuple(kwargs[k])
    try:
        return info.func(seed=cfg.seed, **kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"config/params: {e}") from None


def _summary_scalars(summary: dict) -> dict:
    return {k: v for k, v in jsonable(summary).items() if isinstance(v, (int, float, bool, str)) or v is None}


class RunWriter:
    """Writes artifacts one by one and always finishes with a manifest."""

    def __init__(self, out: Path, cfg_echo: dict, command: str):
        self.out = out
        self.files: list[str] = []
        self.cfg = cfg_echo
        self.command = command
        self.start = time.time()
        out.mkdir(parents=True, exist_ok=True)

    def add(self, rel: str, writer, *args) -> None:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        writer(p, *args)
        self.files.append(rel)

    def finish(self, status: str, summary: dict | None = None, diagnostic: str | None = None) -> None:
        manifest = {
            "artifact": "smworlds", "version": __version__, "command": self.command,
            "config": self.cfg, "status": status, "diagnostic": diagnostic,
            "start_time": self.start, "end_time": time.time(),
            "files": hash_tree(self.out, self.files),
            "summary": _summary_scalars(summary or {}),
        }
        write_json(self.out / "manifest.json", manifest)


def _cfg_echo(cfg: RunConfig) -> dict:
    d = {"scenario": cfg.scenario, "params": cfg.params, "grid": cfg.grid, "seed": cfg.seed,
         "outputs": cfg.outputs}
    if cfg.ontologies is not None:
        d["ontologies"] = cfg.ontologies
    return d


def _out_dir(cfg: RunConfig, override: str | None, suffix: str = "") -> Path:
    if override:
        return Path(override)
    if cfg.out:
        return Path(cfg.out)
    return Path("runs") / f"{cfg.scenario}{suffix}-{cfg.seed}"


def cmd_run(cfg: RunConfig, out: Path) -> int:
    writer = RunWriter(out, _cfg_echo(cfg), "run")
    res = None
    try:
        res = execute(cfg)
        sel = cfg.outputs
        if sel["summary"]:
            writer.add("summary.json", write_json, {"scenario": res.scenario_id, "params": res.params,
                                                    "seed": res.seed, "summary": res.summary,
                                                    "checks": res.checks})
        if sel["branches"]:
            writer.add("branches.csv", write_csv, res.branch_rows, BRANCH_COLUMNS)
        if sel["trajectories"] and res.trajectories:
            writer.add("trajectories.csv", write_csv, res.trajectories)
        if sel["fields"]:
            for name, m in sorted(res.fields.items()):
                writer.add(f"fields/{name}.smf", write_smf, m)
    except ConfigError:
        writer.finish("failed", diagnostic="configuration error")
        raise
    except NumericalAbort as e:
        writer.finish("failed", diagnostic=f"numerical abort: invariant {e.invariant}: {e}")
        print(f"numerical abort: invariant {e.invariant}: {e}", file=sys.stderr)
        return EXIT_ABORT
    failed = res.failed_checks()
    if failed:
        msg = "invariant violated: " + ", ".join(failed)
        writer.finish("failed", res.summary, msg)
        print(msg, file=sys.stderr)
        return EXIT_ABORT
    writer.finish("ok", res.summary)
    print(json.dumps(_summary_scalars(res.summary), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_compare(cfg: RunConfig, out: Path) -> int:
    info = SCENARIOS[cfg.scenario]
    writer = RunWriter(out, _cfg_echo(cfg), "compare")
    kwargs = dict(cfg.params)
    if "weights" in kwargs:
        kwargs["weights"] = tuple(kwargs["weights"])
    try:
        rows = info.compare(cfg.ontologies, seed=cfg.seed, **kwargs)
    except NumericalAbort as e:
        writer.finish("failed", diagnostic=f"numerical abort: invariant {e.invariant}: {e}")
        print(f"numerical abort: invariant {e.invariant}: {e}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as e:
        writer.finish("failed", diagnostic="configuration error")
        raise ConfigError(str(e)) from None
    cols = ["ontology", "outcome", "value", "expected", "std_error", "agree"]
    extra = sorted({k for r in rows for k in r} - set(cols))
    writer.add("comparison.csv", write_csv, rows, cols + extra)
    agree = all(r["agree"] for r in rows)
    summary = {"rows": len(rows), "all_agree": agree, "ontologies": ",".join(cfg.ontologies)}
    writer.add("summary.json", write_json, {"scenario": cfg.scenario, "seed": cfg.seed, "summary": summary,
                                            "table": rows})
    writer.finish("ok", summary)
    print(_table(rows, cols + extra))
    return EXIT_OK


def _table(rows: list[dict], cols: list[str]) -> str:
    cells = [[str(c) for c in cols]]
    for r in rows:
        cells.append([f"{r.get(c):.6g}" if isinstance(r.get(c), float) else str(r.get(c, "")) for c in cols])
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells)


def catalog() -> list[dict]:
    out = []
    for sid in sorted(SCENARIOS):
        info = SCENARIOS[sid]
        params = {k: {"type": t, "default": d, "description": desc} for k, (t, d, desc) in info.params.items()}
        if info.grid:
            params.update({k: {"type": "grid", "description": f"grid override '{k}'"} for k in GRID_KEYS})
        out.append({"id": sid, "section": info.section, "description": info.description,
                    "parameters": params, "compare": info.compare is not None})
    return out


def cmd_list(as_json: bool) -> int:
    cat = catalog()
    if as_json:
        print(json.dumps(jsonable(cat), indent=2))
        return EXIT_OK
    for e in cat:
        print(f"{e['id']}  [{e['section']}]  {e['description']}")
        for k, p in e["parameters"].items():
            if p["type"] != "grid":
                print(f"    {k} ({p['type']}, default {p['default']}): {p['description']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smworlds", description="Matter-density many-worlds simulator")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "compare"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--threads", type=int)
    p = sub.add_parser("list")
    p.add_argument("--json", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list":
        return cmd_list(args.json)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            os.environ["SM_THREADS"] = str(args.threads)
        if args.seed is not None and not 0 <= args.seed <= U64_MAX:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config, compare=args.command == "compare")
        if args.seed is not None:
            cfg.seed = args.seed
        out = _out_dir(cfg, args.out, "-compare" if args.command == "compare" else "")
        return cmd_run(cfg, out) if args.command == "run" else cmd_compare(cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
