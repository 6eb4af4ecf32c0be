"""Synthetic nonstationary Markov sequences with local and global labels.

Each sequence concatenates 1..5 segments, every segment walking a different
transition matrix drawn from a shared pool.  The global task is the number of
segments (class = count - 1); the local task is the pool index of the matrix
that generated the final segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seqdata import ConfigError, Dataset, EventSequence, FieldSchema

STATE_FIELD = "label"
GLOBAL_TASK = "global"
LOCAL_TASK = "local"


@dataclass(frozen=True)
class ToyConfig:
    num_matrices: int = 10
    label_vocab: int = 8
    parts_range: tuple = (1, 5)
    segment_length_range: tuple = (30, 70)
    num_sequences: int = 1000
    seed: int = 0
    dirichlet_alpha: float = 0.3

    def validate(self):
        if self.label_vocab < 2:
            raise ConfigError("label_vocab must be >= 2")
        if self.parts_range[0] < 1 or self.parts_range[0] > self.parts_range[1]:
            raise ConfigError("parts_range must be an increasing range starting at >= 1")
        if self.num_matrices < self.parts_range[1]:
            raise ConfigError("num_matrices must cover the largest segment count")
        if self.segment_length_range[0] < 1 or self.segment_length_range[0] > self.segment_length_range[1]:
            raise ConfigError("segment_length_range must be an increasing range of positive ints")
        return self

    def schema(self):
        return [FieldSchema(STATE_FIELD, "categorical", self.label_vocab)]


def total_variation(a, b):
    """Plain TV distance between two matrices flattened to vectors."""
    return 0.5 * float(np.abs(np.asarray(a) - np.asarray(b)).sum())


def sample_transition_matrices(k, vocab, rng, alpha=0.3, min_tv=0.05, max_tries=100):
    """Draw k row-stochastic matrices, resampling until pairwise TV > min_tv."""
    if k < 1 or vocab < 2:
        raise ConfigError("need k >= 1 and vocab >= 2")
    matrices = []
    for _ in range(k):
        for attempt in range(max_tries + 1):
            if attempt == max_tries:
                raise RuntimeError(
                    f"could not sample {k} distinct {vocab}x{vocab} matrices (vocab too small?)"
                )
            m = rng.dirichlet(np.full(vocab, alpha), size=vocab)
            m /= m.sum(axis=1, keepdims=True)
            if all(total_variation(m, prev) > min_tv for prev in matrices):
                matrices.append(m)
                break
    return matrices


def walk_segments(matrices, chosen, seg_lens, start_state, rng, vocab):
    """Concatenated Markov walks; the state chain continues across boundaries."""
    states = np.empty(int(np.sum(seg_lens)), dtype=np.int64)
    state = int(start_state)
    pos = 0
    for m_idx, seg_len in zip(chosen, seg_lens):
        probs = matrices[m_idx]
        cum = np.cumsum(probs, axis=1)
        draws = rng.random(int(seg_len))
        for u in draws:
            states[pos] = state
            state = min(int(np.searchsorted(cum[state], u, side="right")), vocab - 1)
            pos += 1
    return states


def build_sequence(matrices, chosen, seg_lens, start_state, rng, vocab, seq_id):
    """Assemble one labeled sequence from explicit segment choices."""
    states = walk_segments(matrices, chosen, seg_lens, start_state, rng, vocab)
    return EventSequence(
        id=seq_id,
        timestamps=np.arange(len(states), dtype=np.float64),
        categorical_values={STATE_FIELD: states},
        numerical_values={},
        labels={GLOBAL_TASK: len(chosen) - 1, LOCAL_TASK: int(chosen[-1])},
    )


def generate_sequence(config, matrices, rng, seq_id):
    parts = int(rng.integers(config.parts_range[0], config.parts_range[1] + 1))
    chosen = rng.choice(config.num_matrices, size=parts, replace=False)
    lo, hi = config.segment_length_range
    seg_lens = rng.integers(lo, hi + 1, size=parts)
    start_state = int(rng.integers(config.label_vocab))
    return build_sequence(matrices, chosen, seg_lens, start_state, rng,
                          config.label_vocab, seq_id)


def generate_dataset(config):
    """Full toy dataset; fixed config.seed fixes every byte of the output."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    matrices = sample_transition_matrices(
        config.num_matrices, config.label_vocab, rng, alpha=config.dirichlet_alpha
    )
    width = len(str(max(config.num_sequences - 1, 1)))
    sequences = [
        generate_sequence(config, matrices, rng, f"toy-{i:0{width}d}")
        for i in range(config.num_sequences)
    ]
    return Dataset(sequences, config.schema()), matrices
