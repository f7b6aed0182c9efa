"""Streaming and offline detection metrics.

Streaming pairing gives each ground-truth frame the latest prediction that
was output no later than the frame's emission time. Scores then follow the
usual COCO recipe: greedy confidence-ordered matching per class, 101-point
interpolated AP, averaged over classes and IoU thresholds 0.50:0.05:0.95,
with small/medium/large breakdowns that ignore out-of-range objects.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    Detection,
    FramePrediction,
    InvalidConfiguration,
    InvalidInput,
    SizeThresholds,
    iou,
    size_class,
)
from .forecaster import DetectorModel, ObservationWindow
from .scene import ObservationNoise, Scenario, ground_truth_detections, observe
from .simrt import RunLog

SIZE_BUCKETS = ("all", "S", "M", "L")


def default_thresholds() -> tuple[float, ...]:
    return tuple(round(0.5 + 0.05 * n, 2) for n in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = field(default_factory=default_thresholds)
    recall_points: int = 101
    sizes: SizeThresholds = SizeThresholds()
    # "exclude": frames before the first output are not scored; "score": all-FN
    warmup: str = "exclude"

    def __post_init__(self):
        th = list(self.iou_thresholds)
        if not th or any(not 0 < t < 1 for t in th):
            raise InvalidConfiguration("IoU thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise InvalidConfiguration("IoU thresholds must be strictly increasing")
        if self.recall_points < 2:
            raise InvalidConfiguration("recall_points must be >= 2")
        if self.warmup not in ("exclude", "score"):
            raise InvalidConfiguration("warmup must be 'exclude' or 'score'")


@dataclass(frozen=True)
class PairedFrame:
    gt_index: int
    prediction: FramePrediction | None


def pair_predictions(
    preds: Sequence[FramePrediction], length: int, k: float
) -> list[PairedFrame]:
    """For each frame, the dispatched prediction with the largest ``output_at <= t_j``."""
    if length < 0 or not k > 0:
        raise InvalidInput("need length >= 0 and k > 0")
    ordered = sorted(preds, key=lambda p: p.output_at)
    times = [p.output_at for p in ordered]
    out = []
    for j in range(length):
        pos = bisect.bisect_right(times, j / k)
        out.append(PairedFrame(j, ordered[pos - 1] if pos else None))
    return out


@dataclass(frozen=True)
class FrameMatch:
    """Per-detection outcome at one threshold: ``tp``, ``fp`` or ``ignore``."""

    confidences: tuple[float, ...]
    outcomes: tuple[str, ...]
    num_gt: int
    fn: int


def _candidates(preds: Sequence[Detection], gts: Sequence[Detection]) -> list[list[tuple[float, int]]]:
    """Per detection, same-class GTs with positive IoU, best first (stable)."""
    out = []
    for p in preds:
        c = [(iou(p.bbox, g.bbox), gi) for gi, g in enumerate(gts) if g.class_id == p.class_id]
        c = [x for x in c if x[0] > 0]
        c.sort(key=lambda x: -x[0])
        out.append(c)
    return out


def _greedy(
    order: Sequence[int],
    cands: Sequence[Sequence[tuple[float, int]]],
    gt_ignore: Sequence[bool],
    det_ignore: Sequence[bool],
    iou_t: float,
) -> dict[int, str]:
    taken: set[int] = set()
    res = {}
    for di in order:
        hit = None
        # prefer a scored GT, then an ignored one
        for want_ignored in (False, True):
            for v, gi in cands[di]:
                if v < iou_t:
                    break
                if gi in taken or gt_ignore[gi] != want_ignored:
                    continue
                hit = gi
                break
            if hit is not None:
                break
        if hit is not None:
            taken.add(hit)
            res[di] = "ignore" if gt_ignore[hit] else "tp"
        else:
            res[di] = "ignore" if det_ignore[di] else "fp"
    return res


def match_detections(
    preds: Sequence[Detection],
    gts: Sequence[Detection],
    iou_t: float,
    gt_ignore: Sequence[bool] | None = None,
    det_ignore: Sequence[bool] | None = None,
) -> FrameMatch:
    """Greedy confidence-descending matching; each GT used at most once."""
    if not 0 < iou_t < 1:
        raise InvalidInput("iou threshold must lie in (0, 1)")
    gt_ignore = list(gt_ignore) if gt_ignore is not None else [False] * len(gts)
    det_ignore = list(det_ignore) if det_ignore is not None else [False] * len(preds)
    order = sorted(range(len(preds)), key=lambda n: -preds[n].confidence)
    res = _greedy(order, _candidates(preds, gts), gt_ignore, det_ignore, iou_t)
    outcomes = tuple(res[n] for n in range(len(preds)))
    num_gt = sum(not x for x in gt_ignore)
    return FrameMatch(
        tuple(p.confidence for p in preds), outcomes, num_gt, num_gt - outcomes.count("tp")
    )


def average_precision(
    confidences: Sequence[float],
    is_tp: Sequence[bool],
    num_gt: int,
    recall_points: int = 101,
) -> float | None:
    """Interpolated AP in [0, 1]; ``None`` when there is no ground truth."""
    if num_gt < 0 or len(confidences) != len(is_tp):
        raise InvalidInput("inconsistent AP inputs")
    if num_gt == 0:
        return None
    if not len(confidences):
        return 0.0
    order = np.argsort(-np.asarray(confidences, dtype=float), kind="mergesort")
    tp = np.asarray(is_tp, dtype=bool)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.linspace(0.0, 1.0, recall_points)
    idx = np.searchsorted(recall, levels, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


class _Accumulator:
    """Per (threshold, size bucket, class) scored detections and GT counts."""

    def __init__(self, cfg: EvalConfig):
        self.cfg = cfg
        self.conf: dict[tuple, list[float]] = {}
        self.tp: dict[tuple, list[bool]] = {}
        self.ngt: dict[tuple, int] = {}
        self.classes: set[int] = set()

    def add_frame(self, preds: Sequence[Detection], gts: Sequence[Detection]) -> None:
        cfg = self.cfg
        gsize = [size_class(g.bbox, cfg.sizes) for g in gts]
        psize = [size_class(p.bbox, cfg.sizes) if p.bbox.is_valid else "S" for p in preds]
        self.classes.update(g.class_id for g in gts)
        self.classes.update(p.class_id for p in preds)
        cands = _candidates(preds, gts)
        order = sorted(range(len(preds)), key=lambda n: -preds[n].confidence)
        for bucket in SIZE_BUCKETS:
            g_ign = [bucket != "all" and s != bucket for s in gsize]
            d_ign = [bucket != "all" and s != bucket for s in psize]
            for gi, g in enumerate(gts):
                if not g_ign[gi]:
                    key = (bucket, g.class_id)
                    self.ngt[key] = self.ngt.get(key, 0) + 1
            for t in cfg.iou_thresholds:
                res = _greedy(order, cands, g_ign, d_ign, t)
                for di in order:
                    if res[di] == "ignore":
                        continue
                    key = (t, bucket, preds[di].class_id)
                    self.conf.setdefault(key, []).append(preds[di].confidence)
                    self.tp.setdefault(key, []).append(res[di] == "tp")

    def ap(self, t: float, bucket: str) -> float | None:
        vals = []
        for c in sorted(self.classes):
            key = (t, bucket, c)
            v = average_precision(
                self.conf.get(key, []),
                self.tp.get(key, []),
                self.ngt.get((bucket, c), 0),
                self.cfg.recall_points,
            )
            if v is not None:
                vals.append(v)
        return float(np.mean(vals)) if vals else None


def _pct(v: float | None) -> float:
    return float("nan") if v is None else 100.0 * v


def _mean_over(acc: _Accumulator, ths: Iterable[float], bucket: str) -> float | None:
    vals = [acc.ap(t, bucket) for t in ths]
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))


@dataclass(frozen=True)
class MetricsReport:
    """AP figures in percent; ``nan`` when a bucket has no ground truth."""

    ap: float
    ap50: float
    ap75: float
    ap_small: float
    ap_medium: float
    ap_large: float
    per_threshold: dict[float, float]
    frames_scored: int = 0
    frames_excluded: int = 0
    frames_unmatched: int = 0
    reused_predictions: int = 0
    exact_pairings: int = 0

    def row(self) -> dict:
        return {
            "sAP": self.ap,
            "sAP50": self.ap50,
            "sAP75": self.ap75,
            "sAP_S": self.ap_small,
            "sAP_M": self.ap_medium,
            "sAP_L": self.ap_large,
        }


def _report(acc: _Accumulator, cfg: EvalConfig, **coverage) -> MetricsReport:
    ths = cfg.iou_thresholds
    per = {t: _pct(acc.ap(t, "all")) for t in ths}

    def at(x: float) -> float:
        for t in ths:
            if math.isclose(t, x):
                return per[t]
        return float("nan")

    return MetricsReport(
        ap=_pct(_mean_over(acc, ths, "all")),
        ap50=at(0.5),
        ap75=at(0.75),
        ap_small=_pct(_mean_over(acc, ths, "S")),
        ap_medium=_pct(_mean_over(acc, ths, "M")),
        ap_large=_pct(_mean_over(acc, ths, "L")),
        per_threshold=per,
        **coverage,
    )


def score_frames(
    frames: Iterable[tuple[Sequence[Detection], Sequence[Detection]]], cfg: EvalConfig
) -> MetricsReport:
    """AP over ``(predictions, ground truth)`` frame pairs."""
    acc = _Accumulator(cfg)
    n = 0
    for preds, gts in frames:
        acc.add_frame(preds, gts)
        n += 1
    return _report(acc, cfg, frames_scored=n)


def streaming_ap(log: RunLog, scenario: Scenario, cfg: EvalConfig = EvalConfig()) -> MetricsReport:
    """Streaming AP of a run log against its scenario."""
    if log.length != scenario.length or not math.isclose(log.frame_rate, scenario.frame_rate):
        raise InvalidInput(
            f"log (L={log.length}, k={log.frame_rate}) does not match scenario "
            f"(L={scenario.length}, k={scenario.frame_rate})"
        )
    paired = pair_predictions(log.dispatched(), scenario.length, scenario.frame_rate)
    first = next((p.gt_index for p in paired if p.prediction is not None), None)
    acc = _Accumulator(cfg)
    scored = excluded = unmatched = exact = 0
    uses: dict[float, int] = {}
    for pf in paired:
        if cfg.warmup == "exclude" and first is not None and pf.gt_index < first:
            excluded += 1
            continue
        gts = ground_truth_detections(scenario, pf.gt_index)
        if pf.prediction is None:
            unmatched += 1
            preds = ()
        else:
            preds = pf.prediction.detections
            uses[pf.prediction.output_at] = uses.get(pf.prediction.output_at, 0) + 1
            exact += pf.prediction.target_index == pf.gt_index
        acc.add_frame(preds, gts)
        scored += 1
    return _report(
        acc,
        cfg,
        frames_scored=scored,
        frames_excluded=excluded,
        frames_unmatched=unmatched,
        reused_predictions=sum(1 for v in uses.values() if v > 1),
        exact_pairings=exact,
    )


def map_offset(
    preds: Mapping[int, Sequence[Detection]],
    scenario: Scenario,
    d: int,
    cfg: EvalConfig = EvalConfig(),
) -> MetricsReport:
    """Offline AP of predictions made at frame ``i`` against ground truth at ``i + d``.

    ``preds`` maps source frame to detections; sources whose target falls
    outside the sequence are skipped.
    """
    if d < 1:
        raise InvalidInput("offset d must be >= 1")
    if d >= scenario.length:
        raise InvalidInput(f"offset {d} exceeds sequence length {scenario.length}")
    frames = [
        (preds[i], ground_truth_detections(scenario, i + d))
        for i in sorted(preds)
        if 0 <= i and i + d < scenario.length
    ]
    return score_frames(frames, cfg)


def offline_predictions(
    scenario: Scenario,
    model: DetectorModel,
    d: int,
    noise: ObservationNoise = ObservationNoise(),
    noise_seed: int = 0,
    history: int = 4,
) -> dict[int, tuple[Detection, ...]]:
    """Predictions for ``i + d`` from the ``history`` frames ending at ``i``.

    Only frames with a full history and an in-sequence target are used.
    """
    if d < 1 or history < 1:
        raise InvalidInput("need d >= 1 and history >= 1")
    L = scenario.length
    entries = [model.extract(j, observe(scenario, j, noise, noise_seed)) for j in range(L)]
    corrs: dict = {}
    out = {}
    for i in range(history - 1, L - d):
        win = entries[i - history + 1 : i + 1]
        if model.uses_correlation:
            for a, b in zip(win, win[1:]):
                if (a.index, b.index) not in corrs:
                    corrs[(a.index, b.index)] = model.correlate_pair(a, b)
        (fc,) = model.infer(ObservationWindow(tuple(win)), [i + d], corrs)
        out[i] = fc.detections
    return out


def summarize_sweep(
    runs: Sequence[tuple[str, float, RunLog]],
    scenario: Scenario,
    cfg: EvalConfig = EvalConfig(),
) -> list[dict]:
    """One row per ``(method, d, log)``: CSV-ready sAP figures."""
    digest = scenario.digest()
    rows = []
    for method, d, log in runs:
        if log.header.get("scenario_digest") != digest:
            raise InvalidInput(f"log for {method} d={d} was produced on a different scenario")
        rows.append({"method": method, "d": d, **streaming_ap(log, scenario, cfg).row()})
    return rows
