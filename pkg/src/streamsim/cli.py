"""Command-line front end: gen, run, eval and sweep.

Exit codes: 0 success, 1 finished with failed sub-runs, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

from .core import InvalidConfiguration, InvalidInput
from .evalkit import EvalConfig, map_offset, offline_predictions, streaming_ap
from .formats import (
    LogFormatError,
    build_dataclass,
    parse_eval_config,
    read_json,
    load_run_config,
    load_scenario,
    read_log,
    save_scenario,
    write_csv,
    write_log,
)
from .forecaster import make_detector
from .scene import ScenarioConfig, generate_scenario
from .simrt import log_summary, run_jobs, run_stream, with_delay_factor

EXIT_OK, EXIT_FAILURES, EXIT_USAGE = 0, 1, 2
SAP_COLUMNS = ["method", "d", "sAP", "sAP50", "sAP75", "sAP_S", "sAP_M", "sAP_L", "status"]


class UsageError(Exception):
    pass


def _floats(text: str, flag: str) -> list[float]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError(f"{flag}: empty list")
    try:
        vals = [float(t) for t in items]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if any(not v > 0 for v in vals):
        raise UsageError(f"{flag}: values must be positive")
    return vals


def _names(text: str, flag: str) -> list[str]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError(f"{flag}: empty list")
    return items


def _num(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.2f}"


def cmd_gen(args) -> int:
    doc = read_json(args.config, "scenario config") if args.config else {}
    doc.pop("schema", None)
    cfg = build_dataclass(ScenarioConfig, doc, "scenario config")
    try:
        scenario = generate_scenario(cfg, args.seed)
    except InvalidConfiguration as e:
        raise InvalidConfiguration(f"scenario config: {e}") from None
    save_scenario(scenario, args.out)
    print(
        f"scenario: {len(scenario.tracks)} tracks, L={scenario.length}, "
        f"k={scenario.frame_rate:g} -> {args.out}"
    )
    return EXIT_OK


def cmd_run(args) -> int:
    rc = load_run_config(args.config, args.seed)
    out = args.out or rc.log_path
    if out is None:
        raise UsageError("run: no output path (use --out or out.log in the config)")
    spec = replace(rc.spec, dump_features=args.dump_features)
    log = run_stream(spec)
    write_log(log, out)
    info = log_summary(log)
    print(
        f"dispatched {info['dispatched']} predictions; "
        f"mean realized delay {1000 * info['mean_delay']:.1f} ms -> {out}"
    )
    if info["errors"]:
        print(f"warning: {info['errors']} detector error(s) logged", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    log = read_log(args.log)
    scenario = load_scenario(args.scenario)
    cfg = parse_eval_config(read_json(args.config, "eval config")) if args.config else EvalConfig()
    report = streaming_ap(log, scenario, cfg)
    row = {
        "method": args.method or log.header.get("detector", ""),
        "d": log.header["delay_model"]["delay_factor"],
        **report.row(),
        "status": "ok",
    }
    print(
        "sAP {sAP} | sAP50 {sAP50} | sAP75 {sAP75} | S {sAP_S} | M {sAP_M} | L {sAP_L}".format(
            **{k: _num(v) for k, v in report.row().items()}
        )
    )
    print(
        f"frames scored {report.frames_scored}, warm-up excluded {report.frames_excluded}, "
        f"unmatched {report.frames_unmatched}, reused predictions {report.reused_predictions}"
    )
    if args.out:
        write_csv([row], args.out, SAP_COLUMNS, append=True)
    return EXIT_OK


def cmd_sweep(args) -> int:
    rc = load_run_config(args.config, args.seed)
    factors = _floats(args.delay_factors, "--delay-factors")
    raw = _floats(args.offsets, "--offsets")
    if any(v != int(v) for v in raw):
        raise UsageError("--offsets: values must be integers")
    offsets = [int(v) for v in raw]
    detectors = _names(args.detectors, "--detectors") if args.detectors else [rc.spec.detector]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenario = rc.spec.scenario

    tags = [(m, d) for m in detectors for d in factors]
    specs = [with_delay_factor(replace(rc.spec, detector=m), d) for m, d in tags]
    logs = run_jobs(specs, args.workers)
    failures = 0
    rows = []
    for (m, d), log in zip(tags, logs):
        if isinstance(log, Exception):
            failures += 1
            print(f"run {m} d={d:g} failed: {log}", file=sys.stderr)
            rows.append({"method": m, "d": d, "status": f"failed: {log}"})
            continue
        write_log(log, out / f"run_{m}_d{d:g}.jsonl")
        rows.append({"method": m, "d": d, **streaming_ap(log, scenario, rc.eval).row(), "status": "ok"})
    write_csv(rows, out / "sap.csv", SAP_COLUMNS)

    map_cols = ["method"] + [f"mAP{d}" for d in offsets] + ["status"]
    map_rows = []
    for m in detectors:
        row = {"method": m}
        status = "ok"
        for d in offsets:
            try:
                model = make_detector(
                    m, scenario, rc.spec.stage_costs, rc.spec.num_classes,
                    **rc.spec.detector_options,
                )
                preds = offline_predictions(
                    scenario, model, d, rc.spec.noise, rc.spec.noise_seed, rc.spec.scheduler.max_past
                )
                row[f"mAP{d}"] = map_offset(preds, scenario, d, rc.eval).ap
            except (InvalidInput, InvalidConfiguration, RuntimeError) as e:
                failures += 1
                status = f"failed: {e}"
                print(f"offline {m} d={d} failed: {e}", file=sys.stderr)
        row["status"] = status
        map_rows.append(row)
    write_csv(map_rows, out / "map.csv", map_cols)

    for r in rows:
        if r["status"] == "ok":
            print(f"{r['method']:>10} d={r['d']:<5g} sAP {_num(r['sAP'])}")
    for r in map_rows:
        cells = " ".join(f"mAP{d} {_num(r.get(f'mAP{d}', float('nan')))}" for d in offsets)
        print(f"{r['method']:>10} {cells}")
    print(f"wrote {out / 'sap.csv'} and {out / 'map.csv'}")
    return EXIT_FAILURES if failures else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamsim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a scenario file")
    g.add_argument("--config", help="scenario config JSON (defaults to the standard scene)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="simulate one streaming run")
    r.add_argument("--config", required=True, help="run config JSON")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--out", help="run log path (JSONL)")
    r.add_argument("--dump-features", action="store_true", help="log feature-map summaries")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a run log")
    e.add_argument("--log", required=True)
    e.add_argument("--scenario", required=True)
    e.add_argument("--config", help="eval config JSON")
    e.add_argument("--method", help="method label for the CSV row")
    e.add_argument("--out", help="CSV file to append the report row to")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="delay-factor and offset sweeps")
    s.add_argument("--config", required=True, help="base run config JSON")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--delay-factors", default="2,4,8,16")
    s.add_argument("--offsets", default="2,4,8,16")
    s.add_argument("--detectors", default=None, help="comma-separated detector names")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, InvalidConfiguration, InvalidInput, LogFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
