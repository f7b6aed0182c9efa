"""Deterministic virtual-clock streaming runtime.

Frames are emitted at ``i/k`` and reach the detector after a sampled
communication delay (or never, when dropped). A single loop repeatedly takes
the newest pending frame, runs backbone/neck/head with sampled durations,
plans temporal cues and submits predictions to the output buffer, which
releases one prediction at every frame-emission instant.

Time is kept as exact ``Fraction`` values so equal instants compare equal;
the log stores floats.
"""

from __future__ import annotations

import heapq
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Any, Iterable, Sequence

import numpy as np

from .core import BBox, Detection, FramePrediction, InvalidConfiguration, InvalidInput
from .forecaster import (
    DetectorModel,
    ModelError,
    ObservationWindow,
    StageCosts,
    make_detector,
)
from .scene import ObservationNoise, Scenario, observe
from .scheduler import (
    CorrPastBuffer,
    DelayEstimate,
    DelayRecord,
    HistoricalFeatureBuffer,
    OutputBuffer,
    SchedulerConfig,
    SchedulerError,
    plan_cues,
    should_skip,
    total_delay,
    update_estimate,
)

SCHEMA_VERSION = 1
STAGES = ("d1", "d2b", "d2n", "d2h")
_STAGE_CODE = {"d1": 1, "d2b": 2, "d2n": 3, "d2h": 4}
_DROP_CODE = 5


def _exact(x: float) -> Fraction:
    # shortest decimal repr, so 0.1 becomes exactly 1/10
    return Fraction(repr(float(x)))


@dataclass(frozen=True)
class Distribution:
    """Per-stage delay law in seconds.

    ``constant``: ``a``. ``uniform``: on ``[a, b]``.
    ``lognormal``: median ``a``, log-space sigma ``b``.
    """

    kind: str = "constant"
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "uniform", "lognormal"):
            raise InvalidConfiguration(f"unknown distribution kind {self.kind!r}")
        if self.a < 0 or self.b < 0:
            raise InvalidConfiguration("distribution parameters must be non-negative")
        if self.kind == "uniform" and self.b < self.a:
            raise InvalidConfiguration("uniform needs a <= b")

    def draw(self, rng: np.random.Generator | None) -> float:
        if self.kind == "constant":
            return self.a
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b))
        if self.a == 0:
            return 0.0
        return float(self.a * math.exp(self.b * rng.standard_normal()))


@dataclass(frozen=True)
class DelayModel:
    d1: Distribution = Distribution()
    d2b: Distribution = Distribution()
    d2n: Distribution = Distribution()
    d2h: Distribution = Distribution()
    delay_factor: float = 1.0
    drop_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.delay_factor > 0:
            raise InvalidConfiguration("delay_factor must be positive")
        if not 0 <= self.drop_probability <= 1:
            raise InvalidConfiguration("drop_probability must be in [0, 1]")
        if self.seed < 0:
            raise InvalidConfiguration("seed must be non-negative")

    @classmethod
    def constant(cls, d1=0.0, d2b=0.0, d2n=0.0, d2h=0.0, **kw) -> "DelayModel":
        c = lambda v: Distribution("constant", v)  # noqa: E731
        return cls(c(d1), c(d2b), c(d2n), c(d2h), **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DelayModel":
        d = dict(d)
        for s in STAGES:
            if s in d and isinstance(d[s], dict):
                d[s] = Distribution(**d[s])
        return cls(**d)


def _sample_exact(m: DelayModel, stage: str, i: int) -> Fraction:
    if stage not in _STAGE_CODE:
        raise InvalidInput(f"unknown stage {stage!r}")
    dist: Distribution = getattr(m, stage)
    rng = None
    if dist.kind != "constant":
        rng = np.random.default_rng([m.seed, _STAGE_CODE[stage], i])
    return _exact(m.delay_factor) * _exact(max(dist.draw(rng), 0.0))


def sample_delay(m: DelayModel, stage: str, i: int) -> float:
    """Stage delay for frame/iteration ``i``, scaled by the delay factor."""
    return float(_sample_exact(m, stage, i))


def is_dropped(m: DelayModel, i: int) -> bool:
    """Frame 0 always arrives so the buffers can be primed."""
    if i == 0 or m.drop_probability == 0:
        return False
    if m.drop_probability == 1:
        return True
    return bool(np.random.default_rng([m.seed, _DROP_CODE, i]).uniform() < m.drop_probability)


def _det_to_list(d: Detection) -> list:
    return [*d.bbox.as_list(), d.class_id, d.confidence]


def det_from_list(v: Sequence) -> Detection:
    return Detection(BBox(*map(float, v[:4])), int(v[4]), float(v[5]))


@dataclass
class RunLog:
    """Ordered, type-tagged records of one run."""

    records: list[dict] = field(default_factory=list)

    @property
    def header(self) -> dict:
        if not self.records or self.records[0].get("type") != "header":
            raise InvalidInput("run log has no header record")
        return self.records[0]

    @property
    def frame_rate(self) -> float:
        return float(self.header["frame_rate"])

    @property
    def length(self) -> int:
        return int(self.header["length"])

    def of_type(self, kind: str) -> list[dict]:
        return [r for r in self.records if r.get("type") == kind]

    def dispatched(self) -> list[FramePrediction]:
        return [
            FramePrediction(
                r["target"],
                tuple(det_from_list(v) for v in r["detections"]),
                r["created_at"],
                r["output_at"],
            )
            for r in self.of_type("Dispatched")
        ]


@dataclass(frozen=True)
class RunSpec:
    """Everything needed to reproduce one run; picklable for worker pools."""

    scenario: Scenario
    detector: str = "identity"
    detector_options: dict = field(default_factory=dict)
    stage_costs: StageCosts = StageCosts()
    scheduler: SchedulerConfig = SchedulerConfig()
    delay_model: DelayModel = DelayModel()
    noise: ObservationNoise = ObservationNoise()
    noise_seed: int = 0
    num_classes: int | None = None
    dump_features: bool = False
    clock: str = "virtual"


class _Runtime:
    def __init__(self, spec: RunSpec, model: DetectorModel):
        s = spec.scenario
        self.spec = spec
        self.s = s
        self.model = model
        self.cfg = spec.scheduler
        self.dm = spec.delay_model
        self.k = _exact(s.frame_rate)
        self.factor = _exact(self.dm.delay_factor)
        self.log: list[dict] = []
        self.now = Fraction(0)
        self.corr = CorrPastBuffer(enabled=self.cfg.corr_buffer)
        self.feats = HistoricalFeatureBuffer(self.cfg.buffer_capacity, self.corr.invalidate)
        self.out = OutputBuffer()
        self.est = DelayEstimate.from_prior(float(self.k), self.cfg.ema_prior)
        self.next_dispatch = 0
        self.events: list[tuple[Fraction, int]] = []
        self.d1: dict[int, Fraction] = {}
        self.dropped: set[int] = set()
        self.pending: set[int] = set()
        self.handled = -1
        self.last_skipped = False
        self.errors = 0
        for i in range(s.length):
            d1 = _sample_exact(self.dm, "d1", i)
            self.d1[i] = d1
            if is_dropped(self.dm, i):
                self.dropped.add(i)
            heapq.heappush(self.events, (self.emit(i) + d1, i))

    def emit(self, i: int) -> Fraction:
        return Fraction(i) / self.k

    def record(self, kind: str, t: Fraction, **fields) -> None:
        self.log.append({"type": kind, "t": float(t), **fields})

    def _dispatch_at(self, j: int) -> None:
        t = self.emit(j)
        pred = self.out.dispatch(float(t), float(self.k))
        if pred is not None:
            self.record(
                "Dispatched",
                t,
                target=pred.target_index,
                created_at=pred.created_at,
                output_at=pred.output_at,
                detections=[_det_to_list(d) for d in pred.detections],
            )

    def advance_to(self, T: Fraction) -> None:
        """Deliver arrivals at or before ``T`` and dispatch instants before ``T``."""
        while True:
            t_arr = self.events[0][0] if self.events else None
            t_disp = self.emit(self.next_dispatch) if self.next_dispatch < self.s.length else None
            arr_ok = t_arr is not None and t_arr <= T
            disp_ok = t_disp is not None and t_disp < T
            if arr_ok and (not disp_ok or t_arr <= t_disp):
                t, i = heapq.heappop(self.events)
                if i in self.dropped:
                    self.record("FrameDropped", t, frame=i)
                else:
                    self.record("FrameArrival", t, frame=i)
                if i > self.handled:
                    self.pending.add(i)
                elif i not in self.dropped:
                    self.record("FrameSuperseded", t, frame=i)
            elif disp_ok:
                self._dispatch_at(self.next_dispatch)
                self.next_dispatch += 1
            else:
                break
        self.now = max(self.now, T)

    def stage(self, name: str, dur: Fraction, **extra) -> None:
        self.advance_to(self.now + dur)
        self.record("StageDone", self.now, stage=name, duration=float(dur), **extra)

    def duration(self, stage: str, i: int, cost: float, measured: float | None = None) -> Fraction:
        base = _sample_exact(self.dm, stage, i)
        if measured is not None:
            return base + _exact(measured)
        return base + self.factor * _exact(cost)

    def run(self) -> RunLog:
        self.log.append(self._header())
        while True:
            self.advance_to(self.now)
            if not self.pending:
                if not self.events:
                    break
                self.advance_to(self.events[0][0])
                continue
            i = max(self.pending)
            for j in sorted(self.pending - {i}):
                if j not in self.dropped:
                    self.record("FrameSuperseded", self.now, frame=j)
            self.pending.clear()
            self.handled = i
            self.iterate(i)
        self.advance_to(self.emit(self.s.length - 1) + 1)
        self.record(
            "end",
            self.now,
            dispatched=len(self.out.dispatched),
            errors=self.errors,
            corr_computes=sum(self.corr.compute_counts.values()),
            max_pair_computes=max(self.corr.compute_counts.values(), default=0),
        )
        return RunLog(self.log)

    def iterate(self, i: int) -> None:
        available = i not in self.dropped
        notice = self.emit(i) + self.d1[i]
        d3 = self.now - notice
        delta_hat = total_delay(self.est, float(d3), available)
        if not available and not self.last_skipped and self.events:
            if should_skip(
                float(self.now), float(self.events[0][0]), delta_hat, self.cfg.skip_fraction
            ):
                self.record("LoopSkipped", self.now, frame=i, reason="next-frame-imminent")
                self.last_skipped = True
                return
        self.last_skipped = False
        self.record(
            "LoopStart",
            self.now,
            frame=i,
            available=available,
            d1=float(self.d1[i]),
            d3=float(d3),
            delta_hat=delta_hat,
        )
        wall = self.spec.clock == "wall"
        costs = self.model.stage_costs

        d2b = None
        if available:
            t0 = time.perf_counter()
            dets = observe(self.s, i, self.spec.noise, self.spec.noise_seed)
            entry = self.model.extract(i, dets)
            measured = time.perf_counter() - t0 if wall else None
            d2b = self.duration("d2b", i, costs.backbone, measured)
            self.stage("backbone", d2b, frame=i)
            self.feats.insert(i, entry)
            if self.spec.dump_features and entry.features is not None:
                data = entry.features.data
                self.record(
                    "FeatureDump",
                    self.now,
                    frame=i,
                    shape=list(data.shape),
                    total=float(data.sum()),
                    peak=float(data.max()),
                )

        try:
            cues = plan_cues(
                i,
                self.feats.indices(),
                delta_hat,
                float(self.k),
                self.cfg.max_past,
                self.cfg.max_future,
                fixed=self.cfg.planner == "fixed",
            )
        except SchedulerError as e:
            self.record("LoopSkipped", self.now, frame=i, reason=str(e))
            return
        self.record("CuesPlanned", self.now, anchor=i, past=list(cues.past), future=list(cues.future))

        window = ObservationWindow(tuple(self.feats[j] for j in cues.past))
        t0 = time.perf_counter()
        cached, fresh = {}, 0
        try:
            if self.model.uses_correlation:
                for a, b in zip(window.entries, window.entries[1:]):
                    vol, computed = self.corr.get_or_compute(
                        (a.index, b.index), lambda a=a, b=b: self.model.correlate_pair(a, b)
                    )
                    cached[(a.index, b.index)] = vol
                    fresh += computed
            forecasts = self.model.infer(window, list(cues.future), cached)
        except (ModelError, InvalidInput) as e:
            self.errors += 1
            self.record("DetectorError", self.now, frame=i, message=str(e))
            return
        measured = time.perf_counter() - t0 if wall else None
        d2n = self.duration("d2n", i, costs.neck, measured)
        if not wall:
            d2n += self.factor * _exact(costs.corr_pair) * fresh
        self.stage("neck", d2n, frame=i, corr_computed=fresh)
        d2h = self.duration("d2h", i, costs.head, 0.0 if wall else None)
        self.stage("head", d2h, frame=i)

        created = float(self.now)
        preds = [
            FramePrediction(f.target_index, f.detections, created, created) for f in forecasts
        ]
        accepted = self.out.submit(preds)
        self.record(
            "PredictionsSubmitted",
            self.now,
            anchor=i,
            anchor_time=float(self.emit(i)),
            targets=[p.target_index for p in preds],
            accepted=accepted,
            created_at=created,
        )
        rec = DelayRecord(
            i,
            float(self.d1[i]),
            None if d2b is None else float(d2b),
            float(d2n),
            float(d2h),
            float(d3),
        )
        self.est = update_estimate(self.est, rec)

    def _header(self) -> dict:
        spec = self.spec
        return {
            "type": "header",
            "t": 0.0,
            "schema": SCHEMA_VERSION,
            "scenario_digest": spec.scenario.digest(),
            "frame_rate": spec.scenario.frame_rate,
            "length": spec.scenario.length,
            "detector": spec.detector,
            "detector_options": spec.detector_options,
            "stage_costs": asdict(spec.stage_costs),
            "scheduler": asdict(spec.scheduler),
            "delay_model": spec.delay_model.to_dict(),
            "noise": asdict(spec.noise),
            "noise_seed": spec.noise_seed,
            "clock": spec.clock,
        }


def build_model(spec: RunSpec) -> DetectorModel:
    return make_detector(
        spec.detector, spec.scenario, spec.stage_costs, spec.num_classes, **spec.detector_options
    )


def run_stream(spec: RunSpec, model: DetectorModel | None = None) -> RunLog:
    """Simulate one streaming run and return its log."""
    if spec.clock not in ("virtual", "wall"):
        raise InvalidConfiguration("clock must be 'virtual' or 'wall'")
    if model is None:
        model = build_model(spec)
    return _Runtime(spec, model).run()


def with_delay_factor(spec: RunSpec, d: float, seed: int | None = None) -> RunSpec:
    dm = replace(spec.delay_model, delay_factor=d)
    if seed is not None:
        dm = replace(dm, seed=seed)
    return replace(spec, delay_model=dm)


def _run_safe(spec: RunSpec) -> RunLog | Exception:
    try:
        return run_stream(spec)
    except Exception as e:  # reported per job by the caller
        return e


def run_jobs(specs: Sequence[RunSpec], workers: int = 1) -> list[RunLog | Exception]:
    """Run independent specs, in a process pool when ``workers > 1``.

    Failures come back as the raised exception in that job's slot.
    """
    if workers <= 1 or len(specs) <= 1:
        return [_run_safe(s) for s in specs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_safe, specs))


def run_sweep(
    base: RunSpec,
    d_values: Iterable[float],
    seeds: Iterable[int] = (0,),
    workers: int = 1,
) -> list[tuple[float, int, RunLog]]:
    """One independent run per ``(d, seed)``; the scenario is shared by all."""
    d_values = list(d_values)
    if any(not d > 0 for d in d_values):
        raise InvalidConfiguration("delay factors must be positive")
    tags = [(d, s) for d in d_values for s in seeds]
    logs = run_jobs([with_delay_factor(base, d, s) for d, s in tags], workers)
    for log in logs:
        if isinstance(log, Exception):
            raise log
    return [(d, s, log) for (d, s), log in zip(tags, logs)]


def frame_outcomes(log: RunLog) -> dict[int, str]:
    """Classify every frame as processed, superseded or dropped."""
    out: dict[int, str] = {}
    for r in log.records:
        kind = r["type"]
        if kind == "FrameDropped":
            out[r["frame"]] = "dropped"
        elif kind == "FrameSuperseded":
            out[r["frame"]] = "superseded"
        elif kind == "StageDone" and r["stage"] == "backbone":
            out[r["frame"]] = "processed"
    return out


def log_summary(log: RunLog) -> dict[str, Any]:
    """Counts and mean realized delay (output_at minus anchor emission)."""
    subs = {r["created_at"]: r for r in log.of_type("PredictionsSubmitted")}
    delays = []
    for r in log.of_type("Dispatched"):
        sub = subs.get(r["created_at"])
        if sub is not None:
            delays.append(r["output_at"] - sub["anchor_time"])
    return {
        "dispatched": len(log.of_type("Dispatched")),
        "errors": len(log.of_type("DetectorError")),
        "mean_delay": float(np.mean(delays)) if delays else float("nan"),
    }
