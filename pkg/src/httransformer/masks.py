"""Attention masks: plain causal, and the history-token bottleneck variants.

A :class:`TokenLayout` tags every position of an augmented row as Event,
History, or Pad.  Masks are boolean allow-matrices with rows attending
columns.  The history-token mask wires the bottleneck:

* a History row attends every preceding Event (never another History token);
* an Event row attends the Events after its most recent preceding History
  token, plus exactly one History token: the most recent one (``last``
  strategy) or one preceding History token drawn uniformly (``random``);
* Events before the first History token fall back to causal attention;
* every non-pad row attends itself, so a token's own content always reaches
  its output.

Under these rules, content older than an Event row's most recent History
token can influence that row only through a History node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TAG_EVENT = 0
TAG_HISTORY = 1
TAG_PAD = 2

STRATEGY_LAST = "last"
STRATEGY_RANDOM = "random"


@dataclass
class TokenLayout:
    """Per-position tags of one augmented row, with provenance and timestamps."""

    tags: np.ndarray          # (L',) int8
    event_index: np.ndarray   # (L',) int64, original event index; -1 for non-events
    timestamps: np.ndarray    # (L',) float64; 0 at pads

    def __len__(self):
        return len(self.tags)

    def validate(self):
        pads = np.flatnonzero(self.tags == TAG_PAD)
        if pads.size and (np.diff(pads) != 1).any() or (pads.size and pads[-1] != len(self.tags) - 1):
            raise ValueError("pad tags must form a suffix")
        if ((self.tags == TAG_EVENT) != (self.event_index >= 0)).any():
            raise ValueError("event_index must be set exactly at Event tags")
        return self

    def history_positions(self):
        return np.flatnonzero(self.tags == TAG_HISTORY)


def causal_layout(timestamps, length, total_len=None):
    """Layout of a plain event row padded to ``total_len``."""
    total_len = length if total_len is None else total_len
    tags = np.full(total_len, TAG_PAD, dtype=np.int8)
    tags[:length] = TAG_EVENT
    event_index = np.full(total_len, -1, dtype=np.int64)
    event_index[:length] = np.arange(length)
    ts = np.zeros(total_len, dtype=np.float64)
    ts[:length] = timestamps[:length]
    return TokenLayout(tags, event_index, ts)


def last_history_before(layout):
    """Position of the most recent History token strictly before each slot (-1 if none)."""
    ht = layout.history_positions()
    counts = np.searchsorted(ht, np.arange(len(layout)), side="left")
    return np.where(counts > 0, ht[np.maximum(counts - 1, 0)], -1)


def causal_mask(layout):
    """Lower-triangular attention over non-pad positions."""
    if (layout.tags == TAG_HISTORY).any():
        raise ValueError("causal_mask is for pure event layouts; use ht_mask")
    n = len(layout)
    pos = np.arange(n)
    nonpad = layout.tags != TAG_PAD
    return (pos[None, :] <= pos[:, None]) & nonpad[:, None] & nonpad[None, :]


def ht_mask(layout, strategy, rng=None):
    """Bottleneck attention mask for a layout containing History tokens.

    ``last`` is deterministic; ``random`` draws one uniform per row from
    ``rng`` (consumption depends only on the layout length).
    """
    if strategy not in (STRATEGY_LAST, STRATEGY_RANDOM):
        raise ValueError(f"unknown strategy {strategy!r}")
    ht_pos = layout.history_positions()
    if ht_pos.size == 0:
        raise ValueError("layout has no History token; use causal_mask")

    n = len(layout)
    pos = np.arange(n)
    is_event = layout.tags == TAG_EVENT
    is_hist = layout.tags == TAG_HISTORY
    nonpad = layout.tags != TAG_PAD
    counts = np.searchsorted(ht_pos, pos, side="left")
    last_ht = np.where(counts > 0, ht_pos[np.maximum(counts - 1, 0)], -1)

    row = pos[:, None]
    col = pos[None, :]
    allow = is_event[:, None] & is_event[None, :] & (col > last_ht[:, None]) & (col <= row)
    allow |= is_hist[:, None] & is_event[None, :] & (col < row)

    chooser_rows = is_event & (counts > 0)
    if strategy == STRATEGY_LAST:
        chosen = last_ht
    else:
        if rng is None:
            raise ValueError("random strategy needs an rng")
        u = rng.random(n)
        idx = np.minimum((u * counts).astype(np.int64), np.maximum(counts - 1, 0))
        chosen = ht_pos[idx]
    rows = pos[chooser_rows]
    allow[rows, chosen[chooser_rows]] = True

    allow[pos[nonpad], pos[nonpad]] = True
    return allow


def validate_mask(mask, layout):
    """Assert the structural invariants every constructed mask must satisfy."""
    n = len(layout)
    pos = np.arange(n)
    if (mask & (pos[None, :] > pos[:, None])).any():
        raise AssertionError("future attention edge")
    pad = layout.tags == TAG_PAD
    if mask[pad].any() or mask[:, pad].any():
        raise AssertionError("pad row or column attended")
    hist = layout.tags == TAG_HISTORY
    off_diag = ~np.eye(n, dtype=bool)
    if (mask & hist[:, None] & hist[None, :] & off_diag).any():
        raise AssertionError("history token attends another history token")
    return True


@dataclass
class ReachabilityReport:
    violations: list
    checked_pairs: int

    @property
    def ok(self):
        return not self.violations


def _closure(adj):
    """Transitive closure (paths of length >= 1) of a boolean adjacency matrix."""
    reach = adj.astype(np.uint8)
    np.fill_diagonal(reach, 0)
    while True:
        new = ((reach + reach @ reach) > 0).astype(np.uint8)
        if (new == reach).all():
            return new.astype(bool)
        reach = new


def bottleneck_reachability(mask, layout):
    """Verify history tokens are true bottlenecks.

    Builds the attention digraph (edge j -> i iff ``mask[i, j]``), deletes the
    History nodes, and checks that no path leads from an Event at or before a
    row's most recent History token to that row.  Violating (source, target)
    position pairs are reported.
    """
    ev = np.flatnonzero(layout.tags == TAG_EVENT)
    if ev.size == 0:
        return ReachabilityReport([], 0)
    sub = mask[np.ix_(ev, ev)]
    reach = _closure(sub)  # reach[i, j]: path from event j to event i

    last_ht = last_history_before(layout)[ev]
    blocked = ev[None, :] <= last_ht[:, None]  # pair (target i, source j) that must be unreachable
    bad = blocked & reach
    violations = [(int(ev[j]), int(ev[i])) for i, j in zip(*np.nonzero(bad))]
    return ReachabilityReport(violations, checked_pairs=int(blocked.sum()))


def render_mask(mask, layout=None):
    """Text rendering: one line per row of 0/1 characters, plus a tag header."""
    lines = []
    if layout is not None:
        lines.append("".join("EHP"[t] for t in layout.tags))
        lines.append("-" * len(layout))
    lines.extend("".join("1" if x else "0" for x in row) for row in np.asarray(mask, dtype=bool))
    return "\n".join(lines)
