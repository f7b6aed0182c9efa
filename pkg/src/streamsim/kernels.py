"""Numerical kernels of the correlation/difference neck.

Feature maps are dense ``[C, H, W]`` grids rasterized from detections.
Channel 0 carries occupancy; channel ``1 + c`` carries class ``c``. The
learned convolutions of the original neck are replaced by fixed 1x1
channel-mixing maps (``LinearMapParams``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import BBox, Detection, InvalidInput

DEFAULT_GRID = (38, 60)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # [C, H, W]
    frame_index: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise InvalidInput(f"feature data must be [C,H,W], got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInput("feature map contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class CorrVolume:
    data: np.ndarray  # [(2*R1+1)**2, H, W]
    radius: int
    pair: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.data.shape[0] != (2 * self.radius + 1) ** 2:
            raise InvalidInput("correlation channel count must be (2*R1+1)^2")


def displacements(r1: int) -> list[tuple[int, int]]:
    """Displacement ``(dy, dx)`` for each correlation channel, row-major."""
    return [(dy, dx) for dy in range(-r1, r1 + 1) for dx in range(-r1, r1 + 1)]


def _cell_size(image_size, grid_hw) -> tuple[float, float]:
    W, H = image_size
    gh, gw = grid_hw
    return W / gw, H / gh


def rasterize(
    dets: Sequence[Detection],
    grid: tuple[int, int, int],
    image_size: tuple[int, int],
    frame_index: int = 0,
    sigma_scale: float = 0.05,
) -> FeatureMap:
    """Sum of isotropic Gaussian blobs, one per detection.

    Blob amplitude is the detection confidence and its width is
    ``sigma_scale`` times the box diagonal (in grid cells, floor 0.5).
    """
    C, H, W = grid
    if C <= 0 or H <= 0 or W <= 0:
        raise InvalidInput("grid dimensions must be positive")
    cw, ch = _cell_size(image_size, (H, W))
    data = np.zeros((C, H, W))
    ys = np.arange(H)[:, None]
    xs = np.arange(W)[None, :]
    for det in dets:
        cx, cy = det.bbox.center
        # cell n is centred on pixel n * cell size
        gx, gy = cx / cw, cy / ch
        diag = math.hypot(det.bbox.width / cw, det.bbox.height / ch)
        sigma = max(0.5, sigma_scale * diag)
        blob = det.confidence * np.exp(-((xs - gx) ** 2 + (ys - gy) ** 2) / (2 * sigma * sigma))
        data[0] += blob
        ch_idx = 1 + det.class_id
        if ch_idx < C:
            data[ch_idx] += blob
    return FeatureMap(data, frame_index)


def grid_to_image(gy: float, gx: float, image_size, grid_hw) -> tuple[float, float]:
    cw, ch = _cell_size(image_size, grid_hw)
    return gx * cw, gy * ch


def correlate(fa: FeatureMap, fb: FeatureMap, r1: int = 3, r2: int = 1) -> CorrVolume:
    """Local spatial correlation between two feature maps.

    Channel ``(dy, dx)`` at cell ``x`` holds the sum over the ``r2`` window of
    the channel dot product ``fa(x + w) . fb(x + (dy, dx) + w)``, divided by
    ``C * (2*r2 + 1)**2``. Reads outside the grid are zero.
    """
    if fa.shape != fb.shape:
        raise InvalidInput(f"shape mismatch {fa.shape} vs {fb.shape}")
    if r1 < 0 or r2 < 0:
        raise InvalidInput("correlation radii must be non-negative")
    C, H, W = fa.shape
    a = np.pad(fa.data, ((0, 0), (r2, r2), (r2, r2)))
    p = r1 + r2
    b = np.pad(fb.data, ((0, 0), (p, p), (p, p)))
    norm = C * (2 * r2 + 1) ** 2
    n2 = 2 * r2 + 1
    out = np.zeros(((2 * r1 + 1) ** 2, H, W))
    for n, (dy, dx) in enumerate(displacements(r1)):
        # channel product over the window-padded grid, then an r2 box sum
        sb = b[:, r1 + dy : r1 + dy + H + 2 * r2, r1 + dx : r1 + dx + W + 2 * r2]
        prod = (a * sb).sum(axis=0)
        acc = np.zeros((H, W))
        for wy in range(n2):
            for wx in range(n2):
                acc += prod[wy : wy + H, wx : wx + W]
        out[n] = acc / norm
    return CorrVolume(out, r1, (fa.frame_index, fb.frame_index))


def softmax(x: Sequence[float]) -> np.ndarray:
    z = np.asarray(x, dtype=float)
    z = np.exp(z - z.max())
    return z / z.sum()


def fusion_weights(sources: Sequence[int], anchor: int) -> np.ndarray:
    """Softmax over the past offsets ``source - anchor``."""
    return softmax([s - anchor for s in sources])


def fuse_correlations(
    vols: Sequence[CorrVolume],
    past: Sequence[int],
    future: Sequence[int],
    anchor: int,
) -> list[np.ndarray]:
    """Blend adjacent-pair correlations and scale by each future offset.

    Returns one fused volume per index in ``future``, equal to
    ``(j - anchor) * sum_p w_p * vol_p`` where the weights are a softmax of
    each volume's source-frame offset from ``anchor``.
    """
    if len(past) > 1 and not vols:
        raise InvalidInput("no correlation volumes for a multi-frame past")
    if len(vols) != max(len(past) - 1, 0):
        raise InvalidInput(f"expected {len(past) - 1} volumes, got {len(vols)}")
    if not vols:
        return []
    w = fusion_weights([v.pair[0] for v in vols], anchor)
    fused = sum(wi * v.data for wi, v in zip(w, vols))
    return [(j - anchor) * fused for j in future]


@dataclass(frozen=True, eq=False)
class LinearMapParams:
    """Fixed 1x1 channel maps standing in for the neck's convolutions.

    ``w1, b1``: first difference map (C -> C). ``w2, b2``: second map
    (C -> C). ``proj``: correlation projection ((2*R1+1)^2 -> C), no bias.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    proj: np.ndarray
    seed: int | None = None

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def identity(cls, channels: int, r1: int = 3) -> "LinearMapParams":
        k = (2 * r1 + 1) ** 2
        return cls(
            np.eye(channels),
            np.zeros(channels),
            np.eye(channels),
            np.zeros(channels),
            np.zeros((channels, k)),
        )

    @classmethod
    def seeded(
        cls,
        channels: int,
        r1: int = 3,
        seed: int = 0,
        diff_gain: float = 1.0,
        jitter: float = 0.05,
        proj_scale: float = 0.01,
        bias_scale: float = 0.0,
    ) -> "LinearMapParams":
        """Near-identity maps with seeded perturbations.

        The projection is made symmetric under ``r1 -> -r1`` so a static
        symmetric blob stays centred.
        """
        rng = np.random.default_rng(seed)
        k = (2 * r1 + 1) ** 2
        w1 = np.eye(channels) + jitter * rng.standard_normal((channels, channels))
        w2 = diff_gain * np.eye(channels) + jitter * rng.standard_normal((channels, channels))
        raw = rng.standard_normal((channels, k))
        proj = proj_scale * 0.5 * (raw + raw[:, ::-1])
        b1 = bias_scale * rng.standard_normal(channels)
        b2 = bias_scale * rng.standard_normal(channels)
        return cls(w1, b1, w2, b2, proj, seed)


def apply_channel_map(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    y = np.einsum("oc,chw->ohw", w, x)
    if b is not None:
        y = y + b[:, None, None]
    return y


def diff_now(f_now: FeatureMap, f_near: FeatureMap, p: LinearMapParams) -> FeatureMap:
    """``map2(map1(f_now) - map1(f_near))`` applied pointwise over the grid."""
    if f_now.shape != f_near.shape:
        raise InvalidInput(f"shape mismatch {f_now.shape} vs {f_near.shape}")
    d = apply_channel_map(f_now.data, p.w1, p.b1) - apply_channel_map(f_near.data, p.w1, p.b1)
    return FeatureMap(apply_channel_map(d, p.w2, p.b2), f_now.frame_index)


def project_correlation(fused: np.ndarray, p: LinearMapParams) -> np.ndarray:
    if fused.shape[0] != p.proj.shape[1]:
        raise InvalidInput("correlation channels do not match the projection")
    return apply_channel_map(fused, p.proj)


def combine(
    f_now: FeatureMap,
    f_diff: FeatureMap,
    fused: Sequence[np.ndarray],
    future: Sequence[int],
    p: LinearMapParams,
) -> list[FeatureMap]:
    """Residual combination: ``(f_now + f_diff) + proj(fused_j)`` for each future j.

    An empty ``fused`` list means no correlation term (single-frame past).
    """
    if f_now.shape != f_diff.shape:
        raise InvalidInput("f_now and f_diff shapes differ")
    if fused and len(fused) != len(future):
        raise InvalidInput(f"{len(fused)} fused volumes for {len(future)} future indices")
    base = f_now.data + f_diff.data
    out = []
    for n, j in enumerate(future):
        data = base + project_correlation(fused[n], p) if fused else base.copy()
        out.append(FeatureMap(data, j))
    return out


@dataclass(frozen=True)
class CarriedBox:
    center: tuple[float, float]
    size: tuple[float, float]
    class_id: int


def local_maxima(x: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Cells above ``threshold`` that are >= all 8 neighbours.

    Plateaus yield one cell: a cell must be strictly greater than the
    neighbours that precede it in raster order.
    """
    H, W = x.shape
    pad = np.pad(x, 1, constant_values=-np.inf)
    c = pad[1:-1, 1:-1]
    ok = c > threshold
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            nb = pad[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
            before = dy < 0 or (dy == 0 and dx < 0)
            ok &= (c > nb) if before else (c >= nb)
    return [(int(y), int(x_)) for y, x_ in zip(*np.nonzero(ok))]


def _subcell(lft: float, mid: float, rgt: float) -> tuple[float, float]:
    """Vertex offset and log-gain of the parabola through three log samples.

    Exact for a sampled Gaussian; falls back to no refinement when any
    sample is non-positive or the samples are not concave.
    """
    if not (lft > 0 and mid > 0 and rgt > 0):
        return 0.0, 0.0
    lft, mid, rgt = math.log(lft), math.log(mid), math.log(rgt)
    den = lft - 2 * mid + rgt
    if den >= 0:
        return 0.0, 0.0
    off = min(max(0.5 * (lft - rgt) / den, -0.5), 0.5)
    # parabola value at the (clipped) vertex, relative to the centre sample
    gain = 0.5 * (rgt - lft) * off + 0.5 * den * off * off
    return off, gain


def decode_peaks(
    f: FeatureMap,
    threshold: float,
    carried: Sequence[CarriedBox],
    image_size: tuple[int, int],
    refine: bool = True,
) -> list[Detection]:
    """Turn occupancy peaks into detections.

    Each peak takes the size of the nearest carried box (same class when
    available); class comes from the strongest class channel at the peak.
    """
    if not threshold > 0:
        raise InvalidInput("threshold must be positive")
    if not carried:
        return []
    occ = f.data[0]
    H, W = occ.shape
    C = f.data.shape[0]
    Wimg, Himg = image_size
    out = []
    for gy, gx in local_maxima(occ, threshold):
        oy = ox = gain = 0.0
        if refine:
            if 0 < gx < W - 1:
                ox, gx_gain = _subcell(occ[gy, gx - 1], occ[gy, gx], occ[gy, gx + 1])
                gain += gx_gain
            if 0 < gy < H - 1:
                oy, gy_gain = _subcell(occ[gy - 1, gx], occ[gy, gx], occ[gy + 1, gx])
                gain += gy_gain
        px, py = grid_to_image(gy + oy, gx + ox, image_size, (H, W))
        cls_id = int(np.argmax(f.data[1:, gy, gx])) if C > 1 else carried[0].class_id
        pool = [c for c in carried if c.class_id == cls_id] or list(carried)
        near = min(pool, key=lambda c: (c.center[0] - px) ** 2 + (c.center[1] - py) ** 2)
        w, h = near.size
        box = BBox.from_center(px, py, w, h).clamp(Wimg, Himg)
        if not box.is_valid:
            continue
        # refined peak height: exact amplitude for a separable Gaussian blob
        conf = float(min(max(occ[gy, gx] * math.exp(gain), 0.0), 1.0))
        out.append(Detection(box, cls_id, conf))
    return out


def neck_forward(
    maps: Sequence[FeatureMap],
    past: Sequence[int],
    future: Sequence[int],
    anchor: int,
    p: LinearMapParams,
    corr_for: Mapping[tuple[int, int], CorrVolume],
) -> list[FeatureMap]:
    """Full neck over chronologically ordered ``maps`` at indices ``past``."""
    if len(maps) != len(past) or not maps:
        raise InvalidInput("need one feature map per past index")
    pairs = list(zip(past[:-1], past[1:]))
    vols = [corr_for[pr] for pr in pairs]
    fused = fuse_correlations(vols, past, future, anchor)
    f_now = maps[-1]
    f_near = maps[-2] if len(maps) > 1 else maps[-1]
    f_diff = diff_now(f_now, f_near, p)
    return combine(f_now, f_diff, fused, future, p)
