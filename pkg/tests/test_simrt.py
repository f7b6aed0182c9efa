import math

import pytest

from streamsim.core import InvalidConfiguration
from streamsim.forecaster import IdentityDetector, ModelError, StageCosts
from streamsim.scene import Scenario, TrackState, ground_truth_detections
from streamsim.scheduler import SchedulerConfig
from streamsim.simrt import (
    DelayModel,
    Distribution,
    RunSpec,
    frame_outcomes,
    log_summary,
    run_stream,
    run_sweep,
    sample_delay,
)

IMG = (1920, 1200)


def moving_scene(length=60, v=(3.0, 0.0)):
    tracks = tuple(
        TrackState(t, 0, (200.0 + 500 * t, 400.0), (80.0, 60.0), v, spawn=0, despawn=10**6)
        for t in range(3)
    )
    return Scenario(30, length, IMG, tracks)


def test_sample_delay_constant_and_factor():
    m = DelayModel.constant(d2b=0.010)
    assert sample_delay(m, "d2b", 7) == pytest.approx(0.010)
    m4 = DelayModel.constant(d2b=0.010, delay_factor=4)
    assert sample_delay(m4, "d2b", 7) == pytest.approx(0.040)


def test_sample_delay_deterministic():
    m = DelayModel(d1=Distribution("lognormal", 0.01, 0.5), d2b=Distribution("uniform", 0.0, 0.02), seed=3)
    a = [sample_delay(m, s, i) for s in ("d1", "d2b") for i in range(50)]
    b = [sample_delay(m, s, i) for s in ("d1", "d2b") for i in range(50)]
    assert a == b and len(set(a)) > 50
    other = DelayModel(d1=m.d1, d2b=m.d2b, seed=4)
    assert [sample_delay(other, "d1", i) for i in range(50)] != a[:50]


def test_distribution_validation():
    with pytest.raises(InvalidConfiguration):
        Distribution("gamma", 1.0)
    with pytest.raises(InvalidConfiguration):
        Distribution("uniform", 0.2, 0.1)
    with pytest.raises(InvalidConfiguration):
        DelayModel(delay_factor=0)
    with pytest.raises(InvalidConfiguration):
        DelayModel(drop_probability=1.5)


def test_zero_delay_oracle_covers_every_frame():
    s = moving_scene(30)
    # a zero prior keeps the cold-start estimate consistent with zero delays
    log = run_stream(RunSpec(s, detector="oracle", scheduler=SchedulerConfig(ema_prior=0.0)))
    out = frame_outcomes(log)
    assert all(out[i] == "processed" for i in range(s.length))
    disp = log.dispatched()
    # predictions always target a later frame, so frame 0 has no own-target output
    assert [p.target_index for p in disp] == list(range(1, s.length))
    for p in disp:
        assert p.output_at == pytest.approx(p.target_index / 30)
        assert list(p.detections) == ground_truth_detections(s, p.target_index)


def test_constant_100ms_processes_one_in_three():
    s = moving_scene(60)
    dm = DelayModel.constant(0.0, 0.05, 0.03, 0.02)
    log = run_stream(RunSpec(s, delay_model=dm))
    out = frame_outcomes(log)
    processed = [i for i in range(s.length) if out[i] == "processed"]
    # the loop over frame 57 ends at 60/30, when 58 and 59 are pending
    assert processed == list(range(0, s.length, 3)) + [59]
    assert all(out[i] == "superseded" for i in range(s.length - 1) if i % 3)


def test_default_prior_skips_first_target():
    s = moving_scene(30)
    log = run_stream(RunSpec(s, detector="oracle"))
    assert [p.target_index for p in log.dispatched()] == list(range(2, s.length))


def test_large_prior_delays_first_target():
    s = moving_scene(30)
    log = run_stream(RunSpec(s, detector="oracle", scheduler=SchedulerConfig(ema_prior=0.1)))
    # estimates 100, 50, 25 ms at frames 0, 1, 2 all put the first target at 3
    assert [c["future"][0] for c in log.of_type("CuesPlanned")[:4]] == [3, 3, 3, 4]
    assert log.dispatched()[0].target_index == 3


def test_all_dropped_runs_unavailable_branch():
    s = moving_scene(30)
    dm = DelayModel.constant(0.005, 0.01, 0.01, 0.01, drop_probability=1.0)
    log = run_stream(RunSpec(s, delay_model=dm))
    starts = log.of_type("LoopStart")
    assert starts[0]["frame"] == 0 and starts[0]["available"]
    assert all(not r["available"] for r in starts[1:])
    backbone = [r for r in log.of_type("StageDone") if r["stage"] == "backbone"]
    assert [r["frame"] for r in backbone] == [0]
    assert len(log.of_type("FrameDropped")) == s.length - 1


STRESS = [
    DelayModel.constant(0.01, 0.02, 0.01, 0.01),
    DelayModel.constant(0.0, 0.05, 0.03, 0.02),
    DelayModel(
        Distribution("uniform", 0.0, 0.03),
        Distribution("lognormal", 0.02, 0.6),
        Distribution("uniform", 0.005, 0.02),
        Distribution("constant", 0.01),
        drop_probability=0.2,
        seed=11,
    ),
]


@pytest.mark.parametrize("dm", STRESS)
@pytest.mark.parametrize("planner", ["adaptive", "fixed"])
def test_log_invariants(dm, planner):
    s = moving_scene(90)
    log = run_stream(RunSpec(s, detector="cv", delay_model=dm, scheduler=SchedulerConfig(planner=planner)))
    ts = [r["t"] for r in log.records]
    assert ts == sorted(ts)
    out = frame_outcomes(log)
    assert sorted(out) == list(range(s.length))
    targets = [r["target"] for r in log.of_type("Dispatched")]
    assert targets == sorted(set(targets))
    for r in log.of_type("Dispatched"):
        assert r["output_at"] >= r["created_at"] - 1e-12
        assert r["target"] / 30 <= r["output_at"] + 1e-12
    assert log.records[-1]["type"] == "end"
    assert log.records[-1]["dispatched"] == len(targets)


@pytest.mark.parametrize("dm", STRESS)
def test_created_at_decomposes_into_measured_delays(dm):
    s = moving_scene(60)
    log = run_stream(RunSpec(s, detector="cv", delay_model=dm))
    start, stages = None, 0.0
    checked = 0
    for r in log.records[1:]:
        if r["type"] == "LoopStart":
            start, stages = r, 0.0
        elif r["type"] == "StageDone":
            stages += r["duration"]
        elif r["type"] == "PredictionsSubmitted":
            want = r["anchor_time"] + start["d1"] + start["d3"] + stages
            assert r["created_at"] == pytest.approx(want, abs=1e-9)
            checked += 1
    assert checked > 10


def test_identity_lag_matches_motion_oracle():
    s = moving_scene(60, v=(3.0, 0.0))
    log = run_stream(RunSpec(s, delay_model=DelayModel.constant(0.0, 0.05, 0.03, 0.02)))
    subs = {r["created_at"]: r["anchor"] for r in log.of_type("PredictionsSubmitted")}
    for r in log.of_type("Dispatched"):
        anchor = subs[r["created_at"]]
        pred = sorted(d[0] for d in r["detections"])
        gt = sorted(g.bbox.x_min for g in ground_truth_detections(s, r["target"]))
        lag = 3.0 * (r["target"] - anchor)
        assert [g - p for g, p in zip(gt, pred)] == pytest.approx([lag] * len(gt))


class FlakyDetector(IdentityDetector):
    def infer(self, window, future, cached_corrs=None):
        if window.newest.index % 2:
            raise ModelError("odd frame")
        return super().infer(window, future, cached_corrs)


def test_detector_errors_are_logged_and_loop_continues():
    s = moving_scene(30)
    spec = RunSpec(s, delay_model=DelayModel.constant(0.0, 0.01, 0.01, 0.01))
    log = run_stream(spec, FlakyDetector(StageCosts()))
    errs = log.of_type("DetectorError")
    assert errs and all(r["frame"] % 2 for r in errs)
    assert log.of_type("Dispatched")
    assert log_summary(log)["errors"] == len(errs) == log.records[-1]["errors"]


def test_run_sweep_tags_and_determinism():
    s = moving_scene(30)
    base = RunSpec(s, delay_model=DelayModel.constant(0.005, 0.01, 0.005, 0.005))
    runs = run_sweep(base, [2, 4, 8, 16])
    assert [(d, seed) for d, seed, _ in runs] == [(2, 0), (4, 0), (8, 0), (16, 0)]
    assert [log.header["delay_model"]["delay_factor"] for _, _, log in runs] == [2, 4, 8, 16]
    a, b = run_sweep(base, [4], seeds=(0, 1))
    strip = lambda log: [r for r in log.records if r["type"] != "header"]  # noqa: E731
    assert strip(a[2]) == strip(b[2])
    assert run_sweep(base, []) == []
    with pytest.raises(InvalidConfiguration):
        run_sweep(base, [0])


def test_run_sweep_parallel_matches_serial():
    s = moving_scene(30)
    base = RunSpec(s, delay_model=DelayModel.constant(0.005, 0.01, 0.005, 0.005))
    serial = run_sweep(base, [1, 3])
    par = run_sweep(base, [1, 3], workers=2)
    assert [log.records for *_, log in serial] == [log.records for *_, log in par]


def test_wall_clock_mode_runs():
    s = moving_scene(20)
    log = run_stream(RunSpec(s, clock="wall"))
    assert log.header["clock"] == "wall" and log.records[-1]["type"] == "end"
    with pytest.raises(InvalidConfiguration):
        run_stream(RunSpec(s, clock="sundial"))


def test_larger_delay_factor_increases_realized_delay():
    s = moving_scene(60)
    base = RunSpec(s, delay_model=DelayModel.constant(0.005, 0.01, 0.005, 0.005))
    delays = [log_summary(log)["mean_delay"] for _, _, log in run_sweep(base, [1, 4, 16])]
    assert all(not math.isnan(v) for v in delays)
    assert delays == sorted(delays)
