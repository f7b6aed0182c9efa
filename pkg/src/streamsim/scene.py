"""Synthetic driving-like scenarios: kinematic tracks, exact ground truth and
noisy per-frame observations standing in for a detector's raw output."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import (
    BBox,
    Detection,
    GroundTruthObject,
    InvalidConfiguration,
    InvalidInput,
)


@dataclass(frozen=True)
class TrackState:
    """One object's kinematics.

    ``center``/``velocity``/``acceleration`` describe the motion on the
    unscaled timeline with origin at frame 0, so the center at scenario frame
    ``j`` is ``center + v*(m*j) + a*(m*j)**2 / 2`` for speed multiplier ``m``.
    The track is alive while ``spawn <= m*j < despawn``.
    """

    track_id: int
    class_id: int
    center: tuple[float, float]
    size: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    acceleration: tuple[float, float] = (0.0, 0.0)
    spawn: int = 0
    despawn: int = 1

    def __post_init__(self):
        if not self.spawn < self.despawn:
            raise InvalidConfiguration(
                f"track {self.track_id}: spawn {self.spawn} must precede despawn {self.despawn}"
            )
        if not (self.size[0] > 0 and self.size[1] > 0):
            raise InvalidConfiguration(f"track {self.track_id}: size must be positive")


@dataclass(frozen=True)
class Scenario:
    frame_rate: float
    length: int
    image_size: tuple[int, int]
    tracks: tuple[TrackState, ...] = ()
    speed_multiplier: float = 1.0

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise InvalidConfiguration("frame_rate must be positive")
        if self.length <= 0:
            raise InvalidConfiguration("length must be positive")
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise InvalidConfiguration("image_size must be positive")
        if not self.speed_multiplier > 0:
            raise InvalidConfiguration("speed_multiplier must be positive")

    def to_dict(self) -> dict:
        return {
            "frame_rate": self.frame_rate,
            "length": self.length,
            "image_size": list(self.image_size),
            "speed_multiplier": self.speed_multiplier,
            "tracks": [
                {
                    "track_id": t.track_id,
                    "class_id": t.class_id,
                    "center": list(t.center),
                    "size": list(t.size),
                    "velocity": list(t.velocity),
                    "acceleration": list(t.acceleration),
                    "spawn": t.spawn,
                    "despawn": t.despawn,
                }
                for t in self.tracks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        tracks = tuple(
            TrackState(
                track_id=int(t["track_id"]),
                class_id=int(t["class_id"]),
                center=tuple(float(v) for v in t["center"]),
                size=tuple(float(v) for v in t["size"]),
                velocity=tuple(float(v) for v in t.get("velocity", (0.0, 0.0))),
                acceleration=tuple(float(v) for v in t.get("acceleration", (0.0, 0.0))),
                spawn=int(t["spawn"]),
                despawn=int(t["despawn"]),
            )
            for t in d.get("tracks", [])
        )
        return cls(
            frame_rate=float(d["frame_rate"]),
            length=int(d["length"]),
            image_size=tuple(int(v) for v in d["image_size"]),
            tracks=tracks,
            speed_multiplier=float(d.get("speed_multiplier", 1.0)),
        )

    def digest(self) -> str:
        """Content hash used to check that logs and reports share a scenario."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ScenarioConfig:
    frame_rate: float = 30.0
    length: int = 600
    image_size: tuple[int, int] = (1920, 1200)
    num_tracks: int = 20
    num_classes: int = 3
    speed_range: tuple[float, float] = (2.0, 8.0)  # px / frame
    width_range: tuple[float, float] = (24.0, 320.0)
    aspect_range: tuple[float, float] = (0.6, 1.4)  # height / width
    lifetime_range: tuple[int, int] = (120, 600)
    accel_sigma: float = 0.0  # px / frame^2
    speed_multiplier: float = 1.0

    def validate(self) -> None:
        if not self.frame_rate > 0:
            raise InvalidConfiguration("frame_rate must be positive")
        if self.length <= 0:
            raise InvalidConfiguration("length must be positive")
        if self.image_size[0] <= 0 or self.image_size[1] <= 0:
            raise InvalidConfiguration("image_size must be positive")
        if self.num_tracks < 0:
            raise InvalidConfiguration("num_tracks must be non-negative")
        if self.num_classes <= 0:
            raise InvalidConfiguration("num_classes must be positive")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise InvalidConfiguration("speed_range must satisfy 0 <= min <= max")
        lo, hi = self.width_range
        if not 0 < lo <= hi:
            raise InvalidConfiguration("width_range must satisfy 0 < min <= max")
        lo, hi = self.aspect_range
        if not 0 < lo <= hi:
            raise InvalidConfiguration("aspect_range must satisfy 0 < min <= max")
        lo, hi = self.lifetime_range
        if not 1 <= lo <= hi:
            raise InvalidConfiguration("lifetime_range must satisfy 1 <= min <= max")
        if self.accel_sigma < 0:
            raise InvalidConfiguration("accel_sigma must be non-negative")
        if not self.speed_multiplier > 0:
            raise InvalidConfiguration("speed_multiplier must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfiguration(f"unknown scenario field(s): {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def standard_scene_config(**overrides) -> ScenarioConfig:
    """The moving scene used by sweeps and the acceptance suite."""
    return ScenarioConfig(**overrides)


def _axis_travel(v: float, a: float, life: float) -> tuple[float, float]:
    # min/max of v*t + a*t^2/2 over t in [0, life]
    cands = [0.0, v * life + 0.5 * a * life * life]
    if a != 0:
        t = -v / a
        if 0 < t < life:
            cands.append(v * t + 0.5 * a * t * t)
    return min(cands), max(cands)


def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Deterministic scenario from ``(config, seed)``.

    Each track's start point is drawn so its whole lifetime stays inside the
    image; if the sampled speed makes that impossible the speed is halved
    until it fits. Track draws do not depend on ``speed_multiplier``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    W, H = config.image_size
    L = config.length
    tracks = []
    for tid in range(config.num_tracks):
        cls_id = int(rng.integers(config.num_classes))
        w = float(rng.uniform(*config.width_range))
        h = w * float(rng.uniform(*config.aspect_range))
        w, h = min(w, W * 0.9), min(h, H * 0.9)
        life = int(rng.integers(config.lifetime_range[0], config.lifetime_range[1] + 1))
        life = max(1, min(life, L))
        spawn = int(rng.integers(0, L - life + 1))
        speed = float(rng.uniform(*config.speed_range))
        angle = float(rng.uniform(0, 2 * math.pi))
        acc = rng.normal(0.0, config.accel_sigma, 2) if config.accel_sigma > 0 else np.zeros(2)
        u = rng.uniform(0, 1, 2)

        # velocity at spawn; shrink until the trajectory fits the image
        vs = np.array([math.cos(angle), math.sin(angle)]) * speed
        for _ in range(60):
            lo_x, hi_x = _axis_travel(vs[0], acc[0], life)
            lo_y, hi_y = _axis_travel(vs[1], acc[1], life)
            room_x = (W - w) - (hi_x - lo_x)
            room_y = (H - h) - (hi_y - lo_y)
            if room_x >= 0 and room_y >= 0:
                break
            vs = vs / 2
            acc = acc / 2
        else:
            vs, acc = np.zeros(2), np.zeros(2)
            lo_x = hi_x = lo_y = hi_y = 0.0
            room_x, room_y = W - w, H - h
        px = w / 2 - lo_x + u[0] * max(room_x, 0.0)
        py = h / 2 - lo_y + u[1] * max(room_y, 0.0)

        # re-express relative to frame 0 on the unscaled timeline
        s = float(spawn)
        v0 = vs - acc * s
        c0 = np.array([px, py]) - v0 * s - 0.5 * acc * s * s
        tracks.append(
            TrackState(
                track_id=tid,
                class_id=cls_id,
                center=(float(c0[0]), float(c0[1])),
                size=(w, h),
                velocity=(float(v0[0]), float(v0[1])),
                acceleration=(float(acc[0]), float(acc[1])),
                spawn=spawn,
                despawn=spawn + life,
            )
        )
    return Scenario(
        frame_rate=config.frame_rate,
        length=L,
        image_size=(W, H),
        tracks=tuple(tracks),
        speed_multiplier=config.speed_multiplier,
    )


def _alive(t: TrackState, tau: float) -> bool:
    return t.spawn <= tau < t.despawn


def track_center(t: TrackState, tau: float) -> tuple[float, float]:
    """Unclamped center at unscaled time ``tau``."""
    x = t.center[0] + t.velocity[0] * tau + 0.5 * t.acceleration[0] * tau * tau
    y = t.center[1] + t.velocity[1] * tau + 0.5 * t.acceleration[1] * tau * tau
    return x, y


def _box_at(t: TrackState, tau: float, image_size) -> BBox:
    W, H = image_size
    w, h = t.size
    x, y = track_center(t, tau)
    x = min(max(x, w / 2), W - w / 2) if w < W else W / 2
    y = min(max(y, h / 2), H - h / 2) if h < H else H / 2
    return BBox.from_center(x, y, w, h).clamp(W, H)


def ground_truth_at(s: Scenario, j: int) -> list[GroundTruthObject]:
    if not 0 <= j < s.length:
        raise IndexError(f"frame {j} outside [0, {s.length})")
    tau = s.speed_multiplier * j
    return [
        GroundTruthObject(t.track_id, t.class_id, _box_at(t, tau, s.image_size))
        for t in s.tracks
        if _alive(t, tau)
    ]


@dataclass(frozen=True)
class ObservationNoise:
    center_sigma: float = 0.0
    size_sigma: float = 0.0
    miss_probability: float = 0.0
    confidence_floor: float = 0.0

    def __post_init__(self):
        if self.center_sigma < 0 or self.size_sigma < 0:
            raise InvalidConfiguration("noise sigmas must be non-negative")
        if not 0 <= self.miss_probability <= 1:
            raise InvalidConfiguration("miss_probability must be in [0, 1]")
        if not 0 <= self.confidence_floor <= 1:
            raise InvalidConfiguration("confidence_floor must be in [0, 1]")


def observe(s: Scenario, j: int, n: ObservationNoise, seed: int = 0) -> list[Detection]:
    """Noisy detections of the objects alive at frame ``j``.

    Centers and sizes get independent Gaussian noise; each object is missed
    with ``miss_probability``. Confidence decays from 1 with the normalized
    localization error, floored at ``confidence_floor``, so noiseless
    observations have confidence exactly 1.
    """
    gts = ground_truth_at(s, j)
    if seed < 0:
        raise InvalidInput("seed must be non-negative")
    rng = np.random.default_rng([seed, j])
    W, H = s.image_size
    out = []
    for gt in gts:
        miss = rng.uniform()
        dc = rng.normal(0.0, 1.0, 2) * n.center_sigma
        ds = rng.normal(0.0, 1.0, 2) * n.size_sigma
        if miss < n.miss_probability:
            continue
        g = gt.bbox
        w, h = g.width, g.height
        # offset the true corners so zero noise reproduces the box exactly
        gx = (max(w + float(ds[0]), 1.0) - w) / 2
        gy = (max(h + float(ds[1]), 1.0) - h) / 2
        ox, oy = float(dc[0]), float(dc[1])
        box = BBox(g.x_min + ox - gx, g.y_min + oy - gy, g.x_max + ox + gx, g.y_max + oy + gy)
        box = box.clamp(W, H)
        if not box.is_valid:
            continue
        err2 = float(dc @ dc + ds @ ds)
        if err2 > 0:
            scale = 0.05 * math.hypot(w, h)
            conf = n.confidence_floor + (1 - n.confidence_floor) * math.exp(
                -err2 / (2 * scale * scale)
            )
        else:
            conf = 1.0
        out.append(Detection(box, gt.class_id, float(min(max(conf, 0.0), 1.0))))
    return out


def ground_truth_detections(s: Scenario, j: int) -> list[Detection]:
    """Ground truth at ``j`` as confidence-1 detections; empty outside the sequence."""
    if not 0 <= j < s.length:
        return []
    return [Detection(g.bbox, g.class_id, 1.0) for g in ground_truth_at(s, j)]


__all__ = [
    "ObservationNoise",
    "Scenario",
    "ScenarioConfig",
    "TrackState",
    "generate_scenario",
    "ground_truth_at",
    "ground_truth_detections",
    "observe",
    "standard_scene_config",
    "track_center",
]
