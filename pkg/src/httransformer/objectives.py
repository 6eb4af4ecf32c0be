"""Training objectives: multi-field next-event prediction, contrastive pairs,
and supervised cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import masks as masks_mod
from .model import DT_KEY
from .seqdata import ConfigError, EventSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weight per event field plus the inter-event-time weight."""

    fields: dict = field(default_factory=dict)   # field name -> weight; missing -> 1.0
    dt: float = 1.0

    def weight(self, name):
        return float(self.fields.get(name, 1.0))

    def validate(self, schema):
        values = [self.weight(f.name) for f in schema] + [self.dt]
        if any(v < 0 for v in values):
            raise ConfigError("loss weights must be nonnegative")
        if not any(v > 0 for v in values):
            raise ConfigError("at least one loss weight must be positive")
        return self


def ntp_targets(aug):
    """Next-event targets over augmented positions.

    A position is a valid prediction source iff it is an Event whose successor
    event exists in the row; the target is always the next *event*, so
    positions right before a history token skip over it.  Returns
    (categorical targets, numerical targets, dt target, valid mask).
    """
    base = aug.base
    lengths = base.lengths
    is_event = aug.tags == masks_mod.TAG_EVENT
    next_exists = aug.event_index + 1 < lengths[:, None]
    valid = is_event & next_exists

    nxt = np.where(valid, aug.event_index + 1, 0)
    rows = np.arange(aug.batch_size)[:, None]
    cat = {name: col[rows, nxt] for name, col in base.categorical.items()}
    num = {name: col[rows, nxt] for name, col in base.numerical.items()}
    cur = np.where(valid, aug.event_index, 0)
    dt = base.timestamps[rows, nxt] - base.timestamps[rows, cur]
    return cat, num, dt, valid


def ntp_loss(predictions, aug, weights=None):
    """Weighted sum of per-field losses, each averaged over valid positions.

    Categorical fields use cross-entropy, numerical fields and the
    inter-event time use mean absolute error.  Pad positions, history tokens,
    and final events contribute nothing.
    """
    weights = weights or LossWeights()
    cat_t, num_t, dt_t, valid = ntp_targets(aug)
    if not valid.any():
        raise ConfigError("ntp_loss: no valid prediction positions")

    total = None
    for name in sorted(cat_t):
        w = weights.weight(name)
        if w == 0.0:
            continue
        term = dc.cross_entropy(predictions[name], cat_t[name], valid) * w
        total = term if total is None else total + term
    for name in sorted(num_t):
        w = weights.weight(name)
        if w == 0.0:
            continue
        term = dc.mae(predictions[name], num_t[name], valid) * w
        total = term if total is None else total + term
    if weights.dt > 0.0:
        term = dc.mae(predictions[DT_KEY], dt_t, valid) * weights.dt
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("ntp_loss: all weights are zero")
    return total, int(valid.sum())


def sample_subsequences(seq, k, rng, min_len=10, max_len=None):
    """K contiguous views of one sequence, keeping the parent id.

    Lengths are uniform on [min(min_len, N), min(N, max_len)] and starts
    uniform given the length; an unset ``max_len`` allows full-length views.
    Short windows keep the contrastive task about entity identity rather than
    the shared recent context of two nearly-complete copies.  Sequences
    shorter than 2 events are skipped with a warning.
    """
    n = len(seq)
    if n < 2:
        log.warning("skipping sequence %s: too short for subsequence sampling", seq.id)
        return []
    lo = min(min_len, n)
    hi = n if max_len is None else max(lo, min(n, max_len))
    out = []
    for _ in range(k):
        length = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, n - length + 1))
        out.append(
            EventSequence(
                id=seq.id,
                timestamps=seq.timestamps[start:start + length],
                categorical_values={
                    f: v[start:start + length] for f, v in seq.categorical_values.items()
                },
                numerical_values={
                    f: v[start:start + length] for f, v in seq.numerical_values.items()
                },
                labels=seq.labels,
            )
        )
    return out


def contrastive_loss(emb_i, emb_j, same_id, eps=0.5):
    """Squared distance for same-entity views, squared hinge otherwise."""
    if eps <= 0:
        raise ConfigError("contrastive margin must be positive")
    emb_i, emb_j = dc.as_tensor(emb_i), dc.as_tensor(emb_j)
    diff = emb_i - emb_j
    sq = dc.tensor_sum(diff * diff)
    if same_id:
        return sq
    hinge = dc.relu(dc.sub(eps, dc.sqrt(sq)))
    return hinge * hinge


def coles_batch_loss(embeddings, ids, eps=0.5):
    """Mean contrastive loss over all unordered pairs in a batch of views."""
    ids = np.asarray(ids)
    n = len(ids)
    if n < 2 or len(set(ids.tolist())) < 2:
        raise ConfigError("contrastive batch needs views of at least two entities")
    e = dc.as_tensor(embeddings)
    d = e.shape[-1]
    diff = dc.reshape(e, (n, 1, d)) - dc.reshape(e, (1, n, d))
    sq = dc.tensor_sum(diff * diff, axis=-1)
    dist = dc.sqrt(sq)
    hinge = dc.relu(dc.sub(eps, dist))
    same = (ids[:, None] == ids[None, :]).astype(np.float64)
    upper = np.triu(np.ones((n, n)), k=1)
    pair_loss = sq * dc.Tensor(same) + hinge * hinge * dc.Tensor(1.0 - same)
    n_pairs = n * (n - 1) // 2
    return dc.tensor_sum(pair_loss * dc.Tensor(upper)) * (1.0 / n_pairs), n_pairs


def supervised_loss(logits, labels):
    """Cross-entropy on pooled classification logits."""
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if (labels < 0).any() or (labels >= n_classes).any():
        raise ConfigError("label out of range for classification head")
    return dc.cross_entropy(logits, labels)
