"""History-token planning: how many tokens, where, and whether to apply them.

Insertion position ``k`` (1-based) means "immediately after event k", so a
planned token inherits the timestamp of event ``k``.  At inference a single
token is appended after the last event.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import masks
from .seqdata import ConfigError, PaddedBatch

PLACEMENT_UNIFORM = "uniform"
PLACEMENT_BIAS_END = "bias-end"


@dataclass(frozen=True)
class HTConfig:
    """Frequency, per-batch application probability, and placement/selection."""

    frequency: float = 0.1
    probability: float = 0.5
    placement: str = PLACEMENT_BIAS_END
    selection: str = masks.STRATEGY_RANDOM

    def validate(self):
        if self.frequency < 0:
            raise ConfigError("ht frequency must be >= 0")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("ht probability must be in [0, 1]")
        if self.placement not in (PLACEMENT_UNIFORM, PLACEMENT_BIAS_END):
            raise ConfigError(f"unknown placement {self.placement!r}")
        if self.selection not in (masks.STRATEGY_LAST, masks.STRATEGY_RANDOM):
            raise ConfigError(f"unknown selection {self.selection!r}")
        return self


@dataclass(frozen=True)
class HTPlan:
    """Strictly increasing insertion points with the timestamps they inherit."""

    positions: np.ndarray             # (n,) int64, 1-based, sorted
    timestamps: np.ndarray | None = None

    def __len__(self):
        return len(self.positions)

    def bound(self, row_timestamps):
        """Attach timestamps (that of the event right before each insertion point)."""
        ts = np.asarray(row_timestamps, dtype=np.float64)[self.positions - 1]
        return replace(self, timestamps=ts)


def empty_plan():
    return HTPlan(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64))


def ht_count(length, frequency):
    """Number of history tokens for a row: max(1, floor(f * L))."""
    if length < 1:
        raise ConfigError("length must be >= 1")
    if frequency < 0:
        raise ConfigError("frequency must be >= 0")
    return max(1, int(frequency * length + 1e-9))


def plan_uniform(length, n, rng):
    """n distinct insertion points drawn uniformly from {1..L}."""
    if not 1 <= n <= length:
        raise ConfigError(f"cannot place {n} tokens in a row of length {length}")
    positions = np.sort(rng.choice(np.arange(1, length + 1), size=n, replace=False))
    return HTPlan(positions.astype(np.int64))


def plan_bias_end(length, mean_len, n, rng):
    """n distinct insertion points uniform on {ceil(mean_len / 2)..L}.

    Rows too short for that window (or a window smaller than n) fall back to
    the full range {1..L}.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if n > length:
        raise ConfigError(f"cannot place {n} tokens in a row of length {length}")
    lo = max(1, math.ceil(mean_len / 2.0))
    if lo > length or length - lo + 1 < n:
        lo = 1
    positions = np.sort(rng.choice(np.arange(lo, length + 1), size=n, replace=False))
    return HTPlan(positions.astype(np.int64))


def should_apply(probability, rng):
    """Per-batch coin flip; always consumes exactly one draw."""
    return bool(rng.random() < probability)


def inference_plan(length, last_timestamp):
    """Single history token appended after the final event."""
    if length < 1:
        raise ConfigError("length must be >= 1")
    return HTPlan(np.array([length], dtype=np.int64), np.array([last_timestamp], dtype=np.float64))


def plan_batch(batch, config, rng):
    """One placement plan per row of ``batch`` according to ``config``."""
    mean_len = float(batch.lengths.mean())
    plans = []
    for b in range(batch.batch_size):
        length = int(batch.lengths[b])
        n = ht_count(length, config.frequency)
        if config.placement == PLACEMENT_UNIFORM:
            plan = plan_uniform(length, n, rng)
        else:
            plan = plan_bias_end(length, mean_len, n, rng)
        plans.append(plan.bound(batch.timestamps[b]))
    return plans


@dataclass
class AugmentedBatch:
    """A PaddedBatch with history tokens spliced in, plus per-row layouts."""

    base: PaddedBatch
    tags: np.ndarray          # (B, L') int8
    event_index: np.ndarray   # (B, L') int64, -1 at non-events
    timestamps: np.ndarray    # (B, L') float64
    lengths: np.ndarray       # (B,) int64 augmented lengths

    @property
    def batch_size(self):
        return self.base.batch_size

    @property
    def total_len(self):
        return self.tags.shape[1]

    @property
    def pad_rows(self):
        return self.tags == masks.TAG_PAD

    def layout(self, b):
        return masks.TokenLayout(self.tags[b], self.event_index[b], self.timestamps[b])

    def layouts(self):
        return [self.layout(b) for b in range(self.batch_size)]

    def history_position(self, b):
        pos = np.flatnonzero(self.tags[b] == masks.TAG_HISTORY)
        if pos.size == 0:
            raise ValueError(f"row {b} has no history token")
        return int(pos[-1])

    def flat_source_index(self):
        """Gather indices into [flattened base events | ht slot | zero slot]."""
        b_count, base_len = self.base.timestamps.shape
        rows = np.arange(b_count)[:, None]
        idx = np.full(self.tags.shape, b_count * base_len + 1, dtype=np.int64)  # pad -> zero slot
        is_event = self.tags == masks.TAG_EVENT
        idx = np.where(is_event, rows * base_len + np.maximum(self.event_index, 0), idx)
        idx[self.tags == masks.TAG_HISTORY] = b_count * base_len
        return idx

    def augmented_categorical(self, field):
        """Field codes laid out over augmented positions; 0 at non-events (for inspection)."""
        out = np.zeros(self.tags.shape, dtype=np.int64)
        is_event = self.tags == masks.TAG_EVENT
        rows = np.nonzero(is_event)[0]
        out[is_event] = self.base.categorical[field][rows, self.event_index[is_event]]
        return out

    def augmented_numerical(self, field):
        out = np.zeros(self.tags.shape, dtype=np.float64)
        is_event = self.tags == masks.TAG_EVENT
        rows = np.nonzero(is_event)[0]
        out[is_event] = self.base.numerical[field][rows, self.event_index[is_event]]
        return out

    def strip_history(self):
        """Recover the original padded arrays from the augmented ones."""
        b_count, base_len = self.base.timestamps.shape
        timestamps = np.zeros((b_count, base_len), dtype=np.float64)
        cat = {f: self.augmented_categorical(f) for f in self.base.categorical}
        num = {f: self.augmented_numerical(f) for f in self.base.numerical}
        out_cat = {f: np.zeros((b_count, base_len), dtype=np.int64) for f in cat}
        out_num = {f: np.zeros((b_count, base_len), dtype=np.float64) for f in num}
        for b in range(b_count):
            keep = self.tags[b] == masks.TAG_EVENT
            ev = self.event_index[b][keep]
            timestamps[b, ev] = self.timestamps[b][keep]
            for f in cat:
                out_cat[f][b, ev] = cat[f][b][keep]
            for f in num:
                out_num[f][b, ev] = num[f][b][keep]
        return timestamps, out_cat, out_num


def apply_plan(batch, plans):
    """Splice planned history tokens into a padded batch.

    Event order is preserved; every history token sits right after its
    insertion-point event and carries that event's timestamp.  Returns the
    augmented batch whose per-row layouts drive mask construction; history
    positions are never next-event-prediction targets (they have no
    ``event_index``).
    """
    b_count = batch.batch_size
    if len(plans) != b_count:
        raise ValueError("one plan per batch row required")
    aug_lengths = np.array(
        [int(batch.lengths[b]) + len(plans[b]) for b in range(b_count)], dtype=np.int64
    )
    total = int(aug_lengths.max()) if b_count else 1
    tags = np.full((b_count, total), masks.TAG_PAD, dtype=np.int8)
    event_index = np.full((b_count, total), -1, dtype=np.int64)
    timestamps = np.zeros((b_count, total), dtype=np.float64)

    for b, plan in enumerate(plans):
        length = int(batch.lengths[b])
        pos = np.asarray(plan.positions, dtype=np.int64)
        if pos.size:
            if (np.diff(pos) <= 0).any():
                raise ValueError(f"row {b}: plan positions must be strictly increasing")
            if pos[0] < 1 or pos[-1] > length:
                raise ValueError(f"row {b}: plan positions out of range 1..{length}")
        plan_ts = plan.timestamps
        if plan_ts is None:
            plan_ts = batch.timestamps[b][pos - 1]
        ev = np.arange(length)
        ev_slots = ev + np.searchsorted(pos, ev, side="right")
        ht_slots = pos + np.arange(pos.size)
        tags[b, ev_slots] = masks.TAG_EVENT
        event_index[b, ev_slots] = ev
        timestamps[b, ev_slots] = batch.timestamps[b, :length]
        tags[b, ht_slots] = masks.TAG_HISTORY
        timestamps[b, ht_slots] = plan_ts
    return AugmentedBatch(batch, tags, event_index, timestamps, aug_lengths)


def augment_causal(batch):
    """Identity augmentation: pure causal layouts, no history tokens."""
    return apply_plan(batch, [empty_plan() for _ in range(batch.batch_size)])


def augment_inference(batch):
    """Append one history token at the end of every row."""
    plans = [
        inference_plan(int(batch.lengths[b]), float(batch.timestamps[b, batch.lengths[b] - 1]))
        for b in range(batch.batch_size)
    ]
    return apply_plan(batch, plans)


def build_masks(aug, strategy=None, rng=None):
    """Stack per-row attention masks: ht masks when history tokens exist, else causal."""
    out = np.zeros((aug.batch_size, aug.total_len, aug.total_len), dtype=bool)
    for b in range(aug.batch_size):
        layout = aug.layout(b)
        if (layout.tags == masks.TAG_HISTORY).any():
            out[b] = masks.ht_mask(layout, strategy, rng)
        else:
            out[b] = masks.causal_mask(layout)
    return out
