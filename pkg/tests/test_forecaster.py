import copy

import numpy as np
import pytest

from streamsim.core import BBox, Detection, InvalidInput, iou
from streamsim.forecaster import (
    CVForecaster,
    IdentityDetector,
    KernelDetector,
    ModelError,
    ObservationWindow,
    OracleDetector,
    StageCosts,
    associate,
    fit_constant_velocity,
    make_detector,
)
from streamsim.scene import Scenario, TrackState, ground_truth_detections

IMG = (1920, 1200)


def box(cx, cy=500.0, w=80.0, h=60.0, cls=0, conf=1.0):
    return Detection(BBox.from_center(cx, cy, w, h), cls, conf)


def linear_scene(v=(4.0, 1.5), n=3, length=60):
    tracks = tuple(
        TrackState(t, t % 2, (300.0 + 400 * t, 200.0 + 250 * t), (90.0, 70.0), v, spawn=0, despawn=10**6)
        for t in range(n)
    )
    return Scenario(30, length, IMG, tracks)


def window_from(scene, idx):
    return ObservationWindow.of([(j, ground_truth_detections(scene, j)) for j in idx])


def test_window_requires_increasing_indices():
    with pytest.raises(InvalidInput):
        ObservationWindow.of([(3, []), (3, [])])
    with pytest.raises(ModelError):
        ObservationWindow(()).newest


def test_identity_copies_newest():
    a = box(100)
    w = ObservationWindow.of([(4, [box(90)]), (5, [a])])
    out = IdentityDetector().infer(w, [6, 7])
    assert [f.target_index for f in out] == [6, 7]
    assert all(f.detections == (a,) for f in out)
    assert IdentityDetector().infer(w, []) == []


def test_identity_error_grows_linearly_with_horizon():
    s = linear_scene(v=(4.0, 0.0), n=1)
    w = window_from(s, [10])
    for f in IdentityDetector().infer(w, [11, 13, 17]):
        (p,) = f.detections
        (g,) = ground_truth_detections(s, f.target_index)
        assert g.bbox.center[0] - p.bbox.center[0] == pytest.approx(4.0 * (f.target_index - 10))


def test_empty_window_is_model_error():
    for m in (IdentityDetector(), CVForecaster(), KernelDetector()):
        with pytest.raises(ModelError):
            m.infer(ObservationWindow(()), [1])


def test_least_squares_two_points():
    w = ObservationWindow.of([(9, [box(90)]), (10, [box(100)])])
    (f,) = CVForecaster(image_size=IMG).infer(w, [11])
    assert f.detections[0].bbox.center[0] == pytest.approx(110.0)


def test_least_squares_matches_closed_form():
    rng = np.random.default_rng(0)
    idx = [2, 3, 5, 8]
    xs = [100 + 3 * i + rng.normal() for i in idx]
    obs = [(i, box(x)) for i, x in zip(idx, xs)]
    a, b = fit_constant_velocity(obs)
    t = np.array(idx, float)
    slope = np.polyfit(t, xs, 1)
    assert b[0] == pytest.approx(slope[0]) and a[0] == pytest.approx(slope[1])


def test_single_frame_is_zero_velocity():
    w = ObservationWindow.of([(10, [box(100)])])
    (f,) = CVForecaster(image_size=IMG).infer(w, [15])
    assert f.detections[0].bbox == box(100).bbox


@pytest.mark.parametrize("past", [[8, 9], [3, 5, 6, 9], [0, 4, 9]])
def test_cv_exact_on_noiseless_linear_motion(past):
    s = linear_scene()
    out = CVForecaster(image_size=IMG).infer(window_from(s, past), [10, 14, 30])
    for f in out:
        got = sorted((d.class_id, d.bbox.center) for d in f.detections)
        want = sorted((g.class_id, g.bbox.center) for g in ground_truth_detections(s, f.target_index))
        assert len(got) == len(want)
        for (gc, gp), (wc, wp) in zip(got, want):
            assert gc == wc and gp == pytest.approx(wp, abs=1e-6)


def test_cv_drops_tracks_missing_from_newest():
    w = ObservationWindow.of([(1, [box(100), box(900)]), (2, [box(104)])])
    (f,) = CVForecaster(image_size=IMG).infer(w, [3])
    assert len(f.detections) == 1


def test_association_greedy_floor():
    w = ObservationWindow.of([(1, [box(100), box(600)]), (2, [box(110), box(1200)])])
    tracks = associate(w, floor=0.3)
    lens = sorted(len(t) for t in tracks)
    assert lens == [1, 1, 2]


def test_association_respects_class():
    w = ObservationWindow.of([(1, [box(100, cls=0)]), (2, [box(101, cls=1)])])
    assert sorted(len(t) for t in associate(w)) == [1, 1]


def test_kernel_zero_motion_keeps_centres():
    s = linear_scene(v=(0.0, 0.0))
    m = KernelDetector(image_size=IMG, num_classes=2)
    entries = [m.extract(j, ground_truth_detections(s, j)) for j in (2, 3, 4, 5)]
    out = m.infer(ObservationWindow(tuple(entries)), [6, 8, 10])
    assert [f.target_index for f in out] == [6, 8, 10]
    want = sorted(g.bbox.center for g in ground_truth_detections(s, 5))
    for f in out:
        got = sorted(d.bbox.center for d in f.detections)
        assert np.allclose(got, want, atol=1.0)


def test_kernel_single_track_one_cell_per_frame():
    cell = IMG[0] / 60
    t = TrackState(0, 0, (400.0, 600.0), (96.0, 96.0), (cell, 0.0), spawn=0, despawn=10**6)
    s = Scenario(30, 40, IMG, (t,))
    m = KernelDetector(image_size=IMG, num_classes=1)
    i = 10
    entries = [m.extract(j, ground_truth_detections(s, j)) for j in range(i - 3, i + 1)]
    (f,) = m.infer(ObservationWindow(tuple(entries)), [i + 1])
    (d,) = f.detections
    (g,) = ground_truth_detections(s, i + 1)
    assert abs(d.bbox.center[0] - g.bbox.center[0]) <= cell
    assert abs(d.bbox.center[1] - g.bbox.center[1]) <= IMG[1] / 38


def test_kernel_uses_cached_correlations():
    s = linear_scene()
    m = KernelDetector(image_size=IMG, num_classes=2)
    entries = [m.extract(j, ground_truth_detections(s, j)) for j in (1, 2, 3)]
    cache = {(1, 2): m.correlate_pair(entries[0], entries[1])}
    m.infer(ObservationWindow(tuple(entries)), [4], cache)
    assert m.computed_pairs == [(2, 3)]


@pytest.mark.parametrize("name", ["identity", "cv", "kernel", "oracle"])
def test_one_payload_per_future_index_and_window_untouched(name):
    s = linear_scene()
    m = make_detector(name, s, StageCosts(0.01, 0.01, 0.01))
    entries = tuple(m.extract(j, ground_truth_detections(s, j)) for j in (3, 4, 5))
    w = ObservationWindow(entries)
    before = copy.deepcopy([(e.index, e.detections) for e in w.entries])
    out = m.infer(w, [6, 7, 9])
    assert [f.target_index for f in out] == [6, 7, 9]
    assert [(e.index, e.detections) for e in w.entries] == before


def test_oracle_returns_ground_truth():
    s = linear_scene()
    (f,) = OracleDetector(s).infer(window_from(s, [1]), [12])
    assert list(f.detections) == ground_truth_detections(s, 12)


def test_make_detector_rejects_unknown():
    with pytest.raises(InvalidInput):
        make_detector("yolo", linear_scene())


def test_stage_costs_non_negative():
    with pytest.raises(InvalidInput):
        StageCosts(backbone=-1.0)


def test_cv_boxes_stay_in_image():
    w = ObservationWindow.of([(1, [box(1800)]), (2, [box(1850)])])
    (f,) = CVForecaster(image_size=IMG).infer(w, [20])
    b = f.detections[0].bbox
    assert b.x_max <= IMG[0] and iou(b, b) == 1.0


def test_association_links_small_fast_object_across_gap():
    # 28 px step per 4-frame gap exceeds the 30 px box, so IoU alone never links
    w = ObservationWindow.of([(0, [box(100, w=30, h=30)]), (4, [box(128, w=30, h=30)]), (8, [box(156, w=30, h=30)])])
    (track,) = associate(w)
    assert [i for i, _ in track] == [0, 4, 8]
    (f,) = CVForecaster(image_size=IMG).infer(w, [12])
    assert f.detections[0].bbox.center[0] == pytest.approx(184.0)


def test_association_distance_pass_respects_size_and_gate():
    w = ObservationWindow.of([(0, [box(100, w=30, h=30)]), (1, [box(130, w=90, h=90)])])
    assert len(associate(w)) == 2
    w = ObservationWindow.of([(0, [box(100, w=30, h=30)]), (1, [box(140, w=30, h=30)])])
    assert len(associate(w, max_speed=12.0)) == 2
    assert len(associate(w, max_speed=50.0)) == 1
