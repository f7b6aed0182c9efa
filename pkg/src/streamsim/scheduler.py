"""Delay-aware planning and the three buffers around the detector.

The planner turns measured stage delays into an EMA estimate of the total
delay, and from that picks which buffered past frames to feed the detector
and which future frames to predict. The buffers cache per-frame features,
pairwise correlations and not-yet-dispatched predictions.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Callable, Generic, Hashable, Iterable, Sequence, TypeVar

from .core import FramePrediction, InvalidConfiguration, InvalidInput, input_timestamp

EMA_DECAY = 0.5
CLIP_RADIUS = 30
# slack when rounding k * delay up to a frame index
_CEIL_EPS = 1e-9


class SchedulerError(RuntimeError):
    pass


@dataclass(frozen=True)
class DelayRecord:
    """Measured delays (seconds) of one loop iteration.

    ``d2b`` is ``None`` when the backbone did not run (frame unavailable).
    """

    frame: int
    d1: float
    d2b: float | None
    d2n: float
    d2h: float
    d3: float = 0.0

    def __post_init__(self):
        vals = [self.d1, self.d2n, self.d2h, self.d3]
        if self.d2b is not None:
            vals.append(self.d2b)
        if any(v < 0 for v in vals):
            raise InvalidInput(f"negative delay in record {self}")

    @property
    def total(self) -> float:
        return self.d1 + (self.d2b or 0.0) + self.d2n + self.d2h + self.d3


@dataclass(frozen=True)
class DelayEstimate:
    d1_hat: float
    d2b_hat: float
    d2n_hat: float
    d2h_hat: float

    @classmethod
    def from_prior(cls, k: float, prior: float | None = None) -> "DelayEstimate":
        """Cold-start estimate.

        Default: one frame interval for communication and one frame interval
        for computation, the latter split evenly across the three stages.
        An explicit ``prior`` is a total in seconds, split the same way.
        """
        total = 2.0 / k if prior is None else float(prior)
        if total < 0:
            raise InvalidConfiguration("EMA prior must be non-negative")
        comm = total / 2
        return cls(comm, comm / 3, comm / 3, comm / 3)

    @property
    def compute_total(self) -> float:
        return self.d2b_hat + self.d2n_hat + self.d2h_hat


def _ema(old: float, new: float) -> float:
    return EMA_DECAY * old + (1 - EMA_DECAY) * new


def update_estimate(e: DelayEstimate, r: DelayRecord) -> DelayEstimate:
    """One EMA step (decay 0.5) per measured component."""
    return DelayEstimate(
        d1_hat=_ema(e.d1_hat, r.d1),
        d2b_hat=e.d2b_hat if r.d2b is None else _ema(e.d2b_hat, r.d2b),
        d2n_hat=_ema(e.d2n_hat, r.d2n),
        d2h_hat=_ema(e.d2h_hat, r.d2h),
    )


def total_delay(
    e: DelayEstimate, d3: float, frame_available: bool, skipped_costs: float = 0.0
) -> float:
    """Estimated input-to-output delay of the current loop.

    Without a fresh frame the backbone term is replaced by the cost of the
    skipped frames, since buffered features are reused.
    """
    if d3 < 0 or skipped_costs < 0:
        raise InvalidInput("delays must be non-negative")
    shared = e.d1_hat + e.d2n_hat + e.d2h_hat + d3
    if frame_available:
        return shared + e.d2b_hat
    return skipped_costs + shared


@dataclass(frozen=True)
class TemporalCues:
    anchor: int
    past: tuple[int, ...]
    future: tuple[int, ...]

    def violations(self, max_past: int, max_future: int, clip: int = CLIP_RADIUS) -> list[str]:
        bad = []
        i = self.anchor
        if list(self.past) != sorted(set(self.past)):
            bad.append("past not strictly increasing")
        if list(self.future) != sorted(set(self.future)):
            bad.append("future not strictly increasing")
        if len(self.past) > max_past:
            bad.append("too many past indices")
        if len(self.future) > max_future:
            bad.append("too many future indices")
        if any(not i - clip <= v <= i + clip for v in self.past + self.future):
            bad.append("index outside clip window")
        if self.past and max(self.past) > i:
            bad.append("past index after anchor")
        if self.future and min(self.future) < i + 1:
            bad.append("future index not after anchor")
        return bad


def first_future_index(i: int, delta_hat: float, k: float) -> int:
    """First frame whose emission is not before ``t_i + delta_hat``, at least ``i+1``."""
    ahead = math.ceil(k * delta_hat - _CEIL_EPS)
    return i + max(1, ahead)


def plan_cues(
    i: int,
    available: Iterable[int],
    delta_hat: float,
    k: float,
    max_past: int = 4,
    max_future: int = 4,
    clip: int = CLIP_RADIUS,
    fixed: bool = False,
) -> TemporalCues:
    """Pick past inputs and future targets for anchor frame ``i``.

    ``fixed=True`` gives the one-frame-ahead baseline (``future == (i+1,)``).
    """
    if delta_hat < 0:
        raise InvalidInput("estimated delay must be non-negative")
    if max_past < 1 or max_future < 1:
        raise InvalidConfiguration("max_past and max_future must be >= 1")
    usable = sorted({j for j in available if i - clip <= j <= i})
    if not usable:
        raise SchedulerError(f"no buffered frame available for anchor {i}")
    past = tuple(usable[-max_past:])
    if fixed:
        return TemporalCues(i, past, (i + 1,))
    start = min(first_future_index(i, delta_hat, k), i + clip)
    future = tuple(j for j in range(start, start + max_future) if j <= i + clip)
    return TemporalCues(i, past, future)


def should_skip(now: float, next_arrival: float, delta_hat: float, theta: float = 0.5) -> bool:
    """Skip a run when the next frame arrives sooner than ``theta * delta_hat``."""
    if next_arrival < now:
        raise InvalidInput("next arrival lies in the past")
    return (next_arrival - now) < theta * delta_hat


K = TypeVar("K", bound=Hashable)
V = TypeVar("V")


class HistoricalFeatureBuffer(Generic[V]):
    """FIFO cache of per-frame features; oldest index evicted when full."""

    def __init__(self, capacity: int = 31, on_evict: Callable[[int], None] | None = None):
        if capacity < 1:
            raise InvalidConfiguration("feature buffer capacity must be >= 1")
        self.capacity = capacity
        self.on_evict = on_evict
        self._entries: OrderedDict[int, V] = OrderedDict()

    def insert(self, index: int, feature: V) -> list[int]:
        if self._entries and index <= next(reversed(self._entries)):
            raise InvalidInput(f"out-of-order insert {index} after {list(self._entries)[-1]}")
        self._entries[index] = feature
        evicted = []
        while len(self._entries) > self.capacity:
            old, _ = self._entries.popitem(last=False)
            evicted.append(old)
            if self.on_evict is not None:
                self.on_evict(old)
        return evicted

    def indices(self) -> list[int]:
        return list(self._entries)

    def __getitem__(self, index: int) -> V:
        return self._entries[index]

    def __contains__(self, index) -> bool:
        return index in self._entries

    def __len__(self) -> int:
        return len(self._entries)


class CorrPastBuffer(Generic[V]):
    """Memo of pairwise correlation results keyed by ``(j, j')``.

    With ``enabled=False`` nothing is stored, so every request recomputes.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._entries: dict[tuple[int, int], V] = {}
        self.compute_counts: dict[tuple[int, int], int] = {}

    def get_or_compute(self, pair: tuple[int, int], compute: Callable[[], V]) -> tuple[V, bool]:
        if self.enabled and pair in self._entries:
            return self._entries[pair], False
        vol = compute()
        self.compute_counts[pair] = self.compute_counts.get(pair, 0) + 1
        if self.enabled:
            self._entries[pair] = vol
        return vol, True

    def invalidate(self, index: int) -> None:
        for key in [k for k in self._entries if index in k]:
            del self._entries[key]

    def keys(self) -> list[tuple[int, int]]:
        return list(self._entries)

    def __contains__(self, pair) -> bool:
        return pair in self._entries


class OutputBuffer:
    """Freshest not-yet-dispatched prediction per target frame.

    A dispatch at time ``t`` releases the entry whose target time is the
    latest one not after ``t`` (the nearest that is already due). Entries for
    future frames wait for their own instant, and entries older than a
    released one are discarded, since they can never be nearer.
    """

    def __init__(self):
        self._live: dict[int, FramePrediction] = {}
        self.dispatched: set[int] = set()
        self.discarded: set[int] = set()

    def submit(self, preds: Sequence[FramePrediction]) -> list[int]:
        """Store predictions; targets at or before the last dispatch are ignored."""
        last = max(self.dispatched, default=-1)
        accepted = []
        for p in preds:
            j = p.target_index
            if j <= last or j in self.discarded:
                continue
            self._live[j] = p
            accepted.append(j)
        return accepted

    def dispatch(self, t: float, k: float) -> FramePrediction | None:
        if t < 0:
            raise InvalidInput("dispatch time must be non-negative")
        due = [j for j in self._live if input_timestamp(j, k) <= t]
        if not due:
            return None
        # nearest due target; ties cannot occur among due targets except equal
        # indices, so the smaller-index rule is implicit
        j = max(due)
        pred = self._live.pop(j)
        self.dispatched.add(j)
        for old in [o for o in self._live if o < j]:
            del self._live[old]
            self.discarded.add(old)
        return replace(pred, output_at=max(t, pred.created_at))

    def live_targets(self) -> list[int]:
        return sorted(self._live)

    def __len__(self) -> int:
        return len(self._live)


@dataclass(frozen=True)
class SchedulerConfig:
    max_past: int = 4
    max_future: int = 4
    skip_fraction: float = 0.5
    buffer_capacity: int = 31
    ema_prior: float | None = None
    planner: str = "adaptive"  # or "fixed"
    corr_buffer: bool = True

    def __post_init__(self):
        if self.max_past < 1 or self.max_future < 1:
            raise InvalidConfiguration("max_past and max_future must be >= 1")
        if self.skip_fraction < 0:
            raise InvalidConfiguration("skip_fraction must be non-negative")
        if self.buffer_capacity < 1:
            raise InvalidConfiguration("buffer_capacity must be >= 1")
        if self.ema_prior is not None and self.ema_prior < 0:
            raise InvalidConfiguration("ema_prior must be non-negative")
        if self.planner not in ("adaptive", "fixed"):
            raise InvalidConfiguration("planner must be 'adaptive' or 'fixed'")
