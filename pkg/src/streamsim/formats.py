"""File formats: JSON scenario and run-config documents, JSONL run logs, CSV tables."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import InvalidConfiguration, InvalidInput, SizeThresholds
from .evalkit import EvalConfig
from .forecaster import DETECTORS, StageCosts
from .scene import ObservationNoise, Scenario, ScenarioConfig, generate_scenario
from .scheduler import SchedulerConfig
from .simrt import SCHEMA_VERSION, DelayModel, Distribution, RunLog, RunSpec


class LogFormatError(InvalidInput):
    """A run log is malformed or truncated; the message names the line."""


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def read_json(path: str | Path, what: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise InvalidConfiguration(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise InvalidConfiguration(f"{what} file {path}: line {e.lineno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise InvalidConfiguration(f"{what} file {path}: expected a JSON object")
    return doc


def _write_text(path: str | Path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def save_scenario(s: Scenario, path: str | Path) -> None:
    doc = {"schema": SCHEMA_VERSION, "kind": "scenario", **s.to_dict()}
    _write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_scenario(path: str | Path) -> Scenario:
    doc = read_json(path, "scenario")
    if doc.get("kind") != "scenario":
        raise InvalidConfiguration(f"{path}: not a scenario document")
    _check_schema(doc, path)
    try:
        return Scenario.from_dict(doc)
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidConfiguration(f"{path}: invalid scenario: {e}") from None


def _check_schema(doc: dict, where) -> None:
    if doc.get("schema") != SCHEMA_VERSION:
        raise InvalidConfiguration(
            f"{where}: unsupported schema {doc.get('schema')!r} (expected {SCHEMA_VERSION})"
        )


def write_log(log: RunLog, path: str | Path) -> None:
    _write_text(path, "".join(_dumps(r) + "\n" for r in log.records))


def read_log(path: str | Path) -> RunLog:
    """Parse a JSONL run log; raises ``LogFormatError`` naming the bad line."""
    try:
        with open(path) as fh:
            lines = fh.read().split("\n")
    except FileNotFoundError:
        raise InvalidConfiguration(f"log file not found: {path}") from None
    if lines and lines[-1] == "":
        lines.pop()
    records = []
    for n, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise LogFormatError(f"{path}: line {n}: malformed record ({e.msg})") from None
        if not isinstance(rec, dict) or "type" not in rec:
            raise LogFormatError(f"{path}: line {n}: record without a type tag")
        records.append(rec)
    if not records or records[0]["type"] != "header":
        raise LogFormatError(f"{path}: line 1: missing header record")
    if records[0].get("schema") != SCHEMA_VERSION:
        raise LogFormatError(f"{path}: line 1: unsupported schema {records[0].get('schema')!r}")
    if records[-1]["type"] != "end":
        raise LogFormatError(f"{path}: line {len(records) + 1}: truncated log (no end record)")
    return RunLog(records)


def _fmt(v: Any) -> Any:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 6))
    return v


def write_csv(rows: Sequence[dict], path: str | Path, columns: Sequence[str], append: bool = False) -> None:
    """Write (or append) rows; the header goes only into a new or empty file."""
    new = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_dataclass(cls, d: Any, where: str):
    """Instantiate dataclass ``cls`` from ``d``, naming the field on error."""
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise InvalidConfiguration(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise InvalidConfiguration(f"{where}.{key}: unknown field")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**kw)
    except InvalidConfiguration as e:
        raise InvalidConfiguration(f"{where}: {e}") from None
    except (TypeError, ValueError) as e:
        raise InvalidConfiguration(f"{where}: {e}") from None


def _delay_model(d: Any, seed: int) -> DelayModel:
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise InvalidConfiguration("delay_model: expected an object")
    d = dict(d)
    for stage in ("d1", "d2b", "d2n", "d2h"):
        v = d.get(stage)
        if isinstance(v, (int, float)):
            d[stage] = Distribution("constant", float(v))
        elif isinstance(v, dict):
            d[stage] = build_dataclass(Distribution, v, f"delay_model.{stage}")
        elif v is not None:
            raise InvalidConfiguration(f"delay_model.{stage}: expected a number or object")
    d.setdefault("seed", seed)
    return build_dataclass(DelayModel, d, "delay_model")


def parse_eval_config(d: Any) -> EvalConfig:
    d = dict(d or {})
    if "sizes" in d:
        d["sizes"] = build_dataclass(SizeThresholds, d["sizes"], "eval.sizes")
    return build_dataclass(EvalConfig, d, "eval")


def fan_out_seeds(seed: int, n: int = 3) -> list[int]:
    """Independent child seeds for scenario, delays and observation noise."""
    if seed < 0:
        raise InvalidConfiguration("seed must be non-negative")
    return [int(v) for v in np.random.SeedSequence(seed).generate_state(n)]


@dataclass
class RunConfig:
    spec: RunSpec
    eval: EvalConfig
    seed: int
    log_path: str | None = None
    csv_path: str | None = None


_TOP_KEYS = {
    "schema", "seed", "scenario", "detector", "scheduler", "delay_model",
    "noise", "eval", "clock", "out",
}


def parse_run_config(doc: dict, base_dir: str | Path = ".", seed: int | None = None) -> RunConfig:
    """Validate a run-config document; relative paths resolve against ``base_dir``."""
    _check_schema(doc, "config")
    for key in doc:
        if key not in _TOP_KEYS:
            raise InvalidConfiguration(f"{key}: unknown field")
    seed = int(doc.get("seed", 0)) if seed is None else seed
    s_scene, s_delay, s_noise = fan_out_seeds(seed)
    base = Path(base_dir)

    sc = doc.get("scenario")
    if not isinstance(sc, dict):
        raise InvalidConfiguration("scenario: expected an object with 'path' or 'config'")
    if "path" in sc:
        scenario = load_scenario(base / sc["path"])
    elif "config" in sc:
        cfg = build_dataclass(ScenarioConfig, sc["config"], "scenario.config")
        try:
            scenario = generate_scenario(cfg, int(sc.get("seed", s_scene)))
        except InvalidConfiguration as e:
            raise InvalidConfiguration(f"scenario.config: {e}") from None
    else:
        raise InvalidConfiguration("scenario: needs 'path' or 'config'")

    det = doc.get("detector") or {}
    name = det.get("name", "identity")
    if name not in DETECTORS:
        raise InvalidConfiguration(f"detector.name: unknown detector {name!r}")
    for key in det:
        if key not in ("name", "stage_costs", "options", "num_classes"):
            raise InvalidConfiguration(f"detector.{key}: unknown field")
    clock = doc.get("clock", "virtual")
    if clock not in ("virtual", "wall"):
        raise InvalidConfiguration("clock: must be 'virtual' or 'wall'")
    spec = RunSpec(
        scenario=scenario,
        detector=name,
        detector_options=dict(det.get("options") or {}),
        stage_costs=build_dataclass(StageCosts, det.get("stage_costs"), "detector.stage_costs"),
        scheduler=build_dataclass(SchedulerConfig, doc.get("scheduler"), "scheduler"),
        delay_model=_delay_model(doc.get("delay_model"), s_delay),
        noise=build_dataclass(ObservationNoise, doc.get("noise"), "noise"),
        noise_seed=s_noise,
        num_classes=det.get("num_classes"),
        clock=clock,
    )
    out = doc.get("out") or {}
    resolve = lambda p: None if p is None else str(base / p)  # noqa: E731
    return RunConfig(spec, parse_eval_config(doc.get("eval")), seed, resolve(out.get("log")), resolve(out.get("csv")))


def load_run_config(path: str | Path, seed: int | None = None) -> RunConfig:
    doc = read_json(path, "config")
    return parse_run_config(doc, Path(path).parent, seed)
