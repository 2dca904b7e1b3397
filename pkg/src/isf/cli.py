"""
Command line entry point.

    isf gen      --spec F [--out F]
    isf encode   --trace F --out F
    isf decode   --packets F --out F
    isf hl7      --packets F --out F [--xml]
    isf simulate --scenario F
    isf sweep    --scenario F --param K --values V1,V2,...

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Data goes to stdout (or --out); the effective configuration and diagnostics
go to stderr. ``ISF_SEED`` overrides every seed in a spec or scenario.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import codec, hl7
from .codec import BaselineSample, Side
from .errors import ConfigError, InputError, IsfError, SequenceError
from .netsim import REPORT_FIELDS, ScenarioConfig, run_scenario, with_seed
from .traces import TraceSpec, generate, read_trace_csv, trace_to_csv

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2

SEED_ENV = "ISF_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _env_seed() -> Optional[int]:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError([(SEED_ENV, f"must be an integer, got {raw!r}")]) from None


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError([(path, "file not found")]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([(path, f"invalid JSON: {exc}")]) from None


def _echo_config(name: str, cfg: dict) -> None:
    print(f"# effective {name}: " + json.dumps(cfg, sort_keys=True), file=sys.stderr)


def bundled_scenarios() -> list[str]:
    return sorted(p.name for p in resources.files("isf").joinpath("scenarios").iterdir()
                  if p.name.endswith(".json"))


def resolve_scenario(path: str) -> str:
    """A filesystem path, or the name of a bundled scenario such as ``mitm.json``."""
    if Path(path).exists():
        return path
    name = path if path.endswith(".json") else path + ".json"
    bundled = resources.files("isf").joinpath("scenarios", name)
    if bundled.is_file():
        return str(bundled)
    return path


def load_scenario_config(path: str) -> ScenarioConfig:
    cfg = ScenarioConfig.from_dict(_load_json(resolve_scenario(path)))
    seed = _env_seed()
    return cfg if seed is None else with_seed(cfg, seed)


def _write_text(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    data = _load_json(args.spec)
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "trace spec must be a JSON object")])
    seed = _env_seed()
    if seed is not None:
        data = dict(data, seed=seed)
    spec = TraceSpec.from_dict(data)
    _echo_config("trace spec", spec.to_dict())
    _write_text(trace_to_csv(generate(spec), spec.quant), args.out)
    return EXIT_OK


def cmd_encode(args) -> int:
    quant = codec.QuantizationSpec()
    with open(args.trace, encoding="utf-8", newline="") as fh:
        readings = read_trace_csv(fh, quant)
    _echo_config("encoder", {"scale_digits": quant.scale_digits,
                             "baseline_n": codec.DEFAULT_BASELINE_N,
                             "meta_every": codec.DEFAULT_META_EVERY})
    sessions: dict = {}
    messages = []
    for r in readings:
        session = sessions.get(r.sensor_id)
        if session is None:
            session = sessions[r.sensor_id] = codec.new_session(Side.AGENT, r.sensor_id, quant)
        messages.append(codec.encode_reading(session, r))
    with open(args.out, "wb") as fh:
        codec.write_dump(fh, messages, quant, codec.DEFAULT_BASELINE_N)
    return EXIT_OK


def cmd_decode(args) -> int:
    with open(args.packets, "rb") as fh:
        quant, baseline_n, messages = codec.read_dump(fh)
    _echo_config("decoder", {"scale_digits": quant.scale_digits, "baseline_n": baseline_n})
    sessions: dict = {}
    out = []
    for msg in messages:
        session = sessions.get(msg.sensor_id)
        if session is None:
            session = sessions[msg.sensor_id] = codec.new_session(
                Side.MANAGER, msg.sensor_id, quant, baseline_n)
        if isinstance(msg, BaselineSample):
            out.append(codec.accept_baseline(session, msg))
        else:
            out.append(codec.decode_packet(session, msg))
    _write_text(trace_to_csv(out, quant), args.out)
    return EXIT_OK


def cmd_hl7(args) -> int:
    with open(args.packets, "rb") as fh:
        _, _, messages = codec.read_dump(fh)
    _echo_config("hl7", {"profile": hl7.DEFAULT_PROFILE.__dict__, "xml": args.xml})
    chunks = []
    for msg in messages:
        if isinstance(msg, BaselineSample):
            continue
        if args.xml:
            chunks.append(hl7.render_xml(hl7.build_oru(msg)) + "\n")
        else:
            chunks.append(hl7.to_oru(msg) + "\n")
    _write_text("".join(chunks), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_scenario_config(args.scenario)
    _echo_config("scenario", cfg.to_dict())
    report = run_scenario(cfg)
    sys.stdout.write(report.to_json() + "\n")
    return EXIT_OK


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _locate(data: dict, key: str) -> tuple[dict, str]:
    """Find the dict holding ``key`` (dotted path, or a leaf name unique across sections)."""
    if "." in key:
        *parents, leaf = key.split(".")
        node = data
        for p in parents:
            node = node.get(p) if isinstance(node, dict) else None
            if not isinstance(node, dict):
                raise ConfigError([(key, "unknown parameter")])
        return node, leaf
    if key in data and not isinstance(data[key], dict):
        return data, key
    hits: list[tuple[str, dict]] = []

    def walk(node: dict, prefix: str) -> None:
        for name, sub in node.items():
            if isinstance(sub, dict):
                if key in sub and not isinstance(sub[key], dict):
                    hits.append((prefix + name, sub))
                walk(sub, prefix + name + ".")

    walk(data, "")
    if len(hits) != 1:
        raise ConfigError([(key, "unknown parameter" if not hits else
                            f"ambiguous parameter, qualify it as one of "
                            f"{', '.join(h + '.' + key for h, _ in hits)}")])
    return hits[0][1], key


def sweep_rows(base: ScenarioConfig, param: str, values: Sequence) -> list[list]:
    # keys resolve against the fully defaulted config, not just the file
    full = base.to_dict()
    node, leaf = _locate(full, param)
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError([(param, "unknown parameter")])
    configs = []
    for value in values:
        node[leaf] = value
        configs.append(ScenarioConfig.from_dict(copy.deepcopy(full)))
    return [[param, json.dumps(v)] + run_scenario(c).csv_row() for v, c in zip(values, configs)]


def cmd_sweep(args) -> int:
    base = load_scenario_config(args.scenario)
    values = [_parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError([("--values", "no values given")])
    _echo_config("sweep", {"scenario": base.to_dict(), "param": args.param, "values": values})
    rows = sweep_rows(base, args.param, values)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["param", "value", *REPORT_FIELDS])
    writer.writerows(rows)
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="isf", description="Residual obfuscation toolkit for sensor telemetry")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic trace CSV from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("encode", help="encode a trace CSV into a packet dump")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct a trace CSV from a packet dump")
    p.add_argument("--packets", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("hl7", help="render the obfuscated packets of a dump as ORU^R01")
    p.add_argument("--packets", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--xml", action="store_true")
    p.set_defaults(func=cmd_hl7)

    p = sub.add_parser("simulate", help="run one scenario, print the JSON report")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a scenario over values of one parameter (CSV)")
    p.add_argument("--scenario", required=True)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"isf: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"isf: invalid {path}: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (InputError, SequenceError, hl7.Hl7ParseError, FileNotFoundError) as exc:
        print(f"isf: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (IsfError, OSError, ValueError) as exc:
        print(f"isf: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort exit code contract
        print(f"isf: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
