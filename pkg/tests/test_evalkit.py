import random

import pytest

from oracles import box_iou, greedy_labels, interpolated_ap
from streamsim.core import BBox, Detection, FramePrediction, InvalidInput
from streamsim.evalkit import (
    EvalConfig,
    average_precision,
    map_offset,
    match_detections,
    offline_predictions,
    pair_predictions,
    score_frames,
    streaming_ap,
    summarize_sweep,
)
from streamsim.forecaster import CVForecaster, IdentityDetector
from streamsim.scene import Scenario, TrackState, ground_truth_detections
from streamsim.simrt import RunLog, RunSpec, run_stream

IMG = (1920, 1200)


def det(x0, y0, x1, y1, conf=1.0, cls=0):
    return Detection(BBox(x0, y0, x1, y1), cls, conf)


def fp(output_at, j=0):
    return FramePrediction(j, (), output_at, output_at)


def line_scene(v=3.0, w=60.0, length=60, n=4):
    tracks = tuple(
        TrackState(t, 0, (200.0 + 400 * t, 300.0 + 150 * t), (w, w), (v, 0.0), spawn=0, despawn=10**6)
        for t in range(n)
    )
    return Scenario(30, length, IMG, tracks)


def test_pairing_example():
    a, b = fp(0.035, 1), fp(0.070, 2)
    paired = pair_predictions([b, a], 4, 30)
    assert [p.prediction for p in paired] == [None, None, a, b]


def test_single_output_at_zero_pairs_everywhere():
    a = fp(0.0)
    assert all(p.prediction is a for p in pair_predictions([a], 5, 30))


def test_match_identical_and_empty():
    gts = [det(0, 0, 10, 10), det(20, 20, 40, 40)]
    m = match_detections(gts, gts, 0.5)
    assert m.outcomes == ("tp", "tp") and m.fn == 0
    m = match_detections([], gts, 0.5)
    assert m.outcomes == () and m.fn == 2


def test_match_higher_confidence_wins():
    g = det(0, 0, 100, 100)
    p_hi_iou = det(0, 0, 90, 100, conf=0.8)   # IoU 0.9
    p_lo_iou = det(0, 0, 60, 100, conf=0.9)   # IoU 0.6
    assert box_iou((0, 0, 90, 100), (0, 0, 100, 100)) == pytest.approx(0.9)
    m = match_detections([p_hi_iou, p_lo_iou], [g], 0.5)
    assert m.outcomes == ("fp", "tp")


def test_match_respects_class():
    m = match_detections([det(0, 0, 10, 10, cls=1)], [det(0, 0, 10, 10, cls=0)], 0.5)
    assert m.outcomes == ("fp",) and m.fn == 1


def test_ap_trivial_cases():
    assert average_precision([1.0], [True], 1) == 1.0
    assert average_precision([], [], 1) == 0.0
    assert average_precision([], [], 0) is None


def test_ap_tp_fp_tp_matches_interpolation_oracle():
    want = interpolated_ap([True, False, True], 2)
    assert want == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-12)
    assert average_precision([0.9, 0.8, 0.7], [True, False, True], 2) == pytest.approx(want, abs=1e-9)


def test_ap_against_oracle_random():
    rng = random.Random(5)
    for _ in range(200):
        n = rng.randint(0, 8)
        ng = rng.randint(1, 5)
        confs = [rng.choice([0.2, 0.4, 0.6, 0.8]) + rng.random() * 1e-3 for _ in range(n)]
        hits = [rng.random() < 0.5 for _ in range(n)]
        hits = hits if sum(hits) <= ng else [False] * n
        ranked = [h for _, h in sorted(zip(confs, hits), key=lambda x: -x[0])]
        assert average_precision(confs, hits, ng) == pytest.approx(interpolated_ap(ranked, ng), abs=1e-9)


def test_greedy_matching_against_oracle():
    rng = random.Random(9)
    for _ in range(200):
        gts = []
        for _ in range(rng.randint(0, 4)):
            x, y = rng.randint(0, 40), rng.randint(0, 40)
            gts.append((x, y, x + rng.randint(5, 20), y + rng.randint(5, 20)))
        dets = []
        for _ in range(rng.randint(0, 6)):
            x, y = rng.randint(0, 40), rng.randint(0, 40)
            dets.append((rng.random(), (x, y, x + rng.randint(5, 20), y + rng.randint(5, 20))))
        m = match_detections([det(*b, conf=c) for c, b in dets], [det(*b) for b in gts], 0.5)
        got = sorted(zip(m.confidences, (o == "tp" for o in m.outcomes)))
        assert got == sorted(greedy_labels(dets, gts, 0.5))


def test_size_buckets_ignore_out_of_bucket():
    small = det(0, 0, 20, 20)       # 400 px
    large = det(100, 100, 300, 300)
    frames = [([small, large], [small, large])]
    r = score_frames(frames, EvalConfig())
    assert r.ap == r.ap_small == r.ap_large == 100.0
    assert r.ap_medium != r.ap_medium  # nan: no medium ground truth


def test_score_frames_penalises_misses():
    g = det(0, 0, 100, 100)
    r = score_frames([([g], [g]), ([], [g])], EvalConfig())
    # recall reaches 0.5 at precision 1
    assert r.ap50 == pytest.approx(100 * 51 / 101)


def test_streaming_ap_oracle_and_static():
    s = line_scene()
    assert streaming_ap(run_stream(RunSpec(s, detector="oracle")), s).ap == pytest.approx(100.0, abs=1e-9)
    static = line_scene(v=0.0)
    log = run_stream(RunSpec(static))
    assert streaming_ap(log, static).ap == pytest.approx(100.0, abs=1e-9)


def test_streaming_ap_empty_log():
    s = line_scene(length=10)
    log = run_stream(RunSpec(s))
    empty = RunLog([log.records[0], log.records[-1]])
    assert streaming_ap(empty, s).ap == 0.0
    scored = streaming_ap(empty, s, EvalConfig(warmup="score"))
    assert scored.ap == 0.0 and scored.frames_scored == 10


def test_streaming_ap_rejects_mismatched_scene():
    s = line_scene(length=20)
    log = run_stream(RunSpec(s))
    with pytest.raises(InvalidInput):
        streaming_ap(log, line_scene(length=21))


def test_warmup_exclusion_counts():
    s = line_scene(length=30)
    log = run_stream(RunSpec(s, detector="oracle"))
    r = streaming_ap(log, s)
    assert r.frames_excluded + r.frames_scored == 30 and r.frames_excluded >= 1
    r2 = streaming_ap(log, s, EvalConfig(warmup="score"))
    assert r2.frames_scored == 30 and r2.ap < r.ap


def test_map_offset_cv_noiseless_is_perfect():
    s = line_scene(v=5.0, length=80)
    for d in (2, 4, 8, 16):
        preds = offline_predictions(s, CVForecaster(image_size=IMG), d)
        assert map_offset(preds, s, d).ap == pytest.approx(100.0, abs=1e-9)


def test_map_offset_identity_shift_threshold():
    # equal w x w boxes shifted by s overlap with IoU (w-s)/(w+s): below 0.5 once s > w/3
    w, v = 60.0, 3.0
    s = line_scene(v=v, w=w, length=80)
    for d in (2, 4, 8, 16):
        shift = v * d
        iou_shift = box_iou((0, 0, w, w), (shift, 0, w + shift, w))
        assert iou_shift == pytest.approx((w - shift) / (w + shift))
        r = map_offset(offline_predictions(s, IdentityDetector(), d), s, d)
        if shift > w / 3:
            assert r.ap == 0.0
        else:
            assert r.ap > 0.0


def test_map_offset_errors():
    s = line_scene(length=10)
    with pytest.raises(InvalidInput):
        map_offset({}, s, 0)
    with pytest.raises(InvalidInput):
        map_offset({}, s, 10)


def test_summarize_sweep_rows_and_digest_check():
    s = line_scene(length=20)
    log = run_stream(RunSpec(s))
    rows = summarize_sweep([("identity", 1.0, log)], s)
    assert len(rows) == 1 and rows[0]["method"] == "identity"
    other = line_scene(length=20, n=2)
    with pytest.raises(InvalidInput):
        summarize_sweep([("identity", 1.0, log)], other)


def test_eval_config_validation():
    with pytest.raises(Exception):
        EvalConfig(warmup="sometimes")
    with pytest.raises(Exception):
        EvalConfig(iou_thresholds=())


def test_ground_truth_count_matches_pairs():
    s = line_scene(length=12)
    frames = [(ground_truth_detections(s, j), ground_truth_detections(s, j)) for j in range(12)]
    r = score_frames(frames, EvalConfig())
    assert r.frames_scored == 12 and r.ap == 100.0
