"""Synthetic Markov dataset: matrix sampling, labels, determinism, walk statistics."""

import io

import numpy as np
import pytest

from httransformer.seqdata import ConfigError, save_dataset
from httransformer.toygen import (
    GLOBAL_TASK,
    LOCAL_TASK,
    STATE_FIELD,
    ToyConfig,
    build_sequence,
    generate_dataset,
    sample_transition_matrices,
    total_variation,
    walk_segments,
)


def test_matrices_are_row_stochastic():
    rng = np.random.default_rng(0)
    mats = sample_transition_matrices(10, 8, rng)
    assert len(mats) == 10
    for m in mats:
        np.testing.assert_allclose(m.sum(axis=1), np.ones(8), rtol=0, atol=1e-12)
        assert (m >= 0).all()


def test_single_matrix_trivially_distinct():
    mats = sample_transition_matrices(1, 4, np.random.default_rng(1))
    assert len(mats) == 1


def test_matrix_sampling_deterministic():
    a = sample_transition_matrices(5, 6, np.random.default_rng(42))
    b = sample_transition_matrices(5, 6, np.random.default_rng(42))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_matrices_pairwise_distinct():
    mats = sample_transition_matrices(10, 8, np.random.default_rng(3))
    for i in range(len(mats)):
        for j in range(i + 1, len(mats)):
            assert total_variation(mats[i], mats[j]) > 0.05


def test_explicit_segments_fix_labels():
    rng = np.random.default_rng(5)
    mats = sample_transition_matrices(10, 8, rng)
    seq = build_sequence(mats, chosen=[3, 7], seg_lens=[20, 20], start_state=0,
                         rng=np.random.default_rng(9), vocab=8, seq_id="x")
    assert len(seq) == 40
    assert seq.labels[LOCAL_TASK] == 7
    assert seq.labels[GLOBAL_TASK] == 1
    np.testing.assert_array_equal(seq.timestamps, np.arange(40.0))


def test_single_segment_labels():
    mats = sample_transition_matrices(10, 8, np.random.default_rng(5))
    seq = build_sequence(mats, chosen=[4], seg_lens=[15], start_state=2,
                         rng=np.random.default_rng(1), vocab=8, seq_id="y")
    assert seq.labels[GLOBAL_TASK] == 0
    assert seq.labels[LOCAL_TASK] == 4


def test_walk_statistics_match_matrix_rows():
    # Monte-Carlo: empirical transition frequencies of a 10k-step
    # single-matrix walk stay within 0.02 TV of the true rows, for rows
    # visited often enough that sampling noise sits below the tolerance.
    vocab = 5
    mats = sample_transition_matrices(1, vocab, np.random.default_rng(11))
    states = walk_segments(mats, [0], [10_000], start_state=0,
                           rng=np.random.default_rng(12), vocab=vocab)
    counts = np.zeros((vocab, vocab))
    for a, b in zip(states[:-1], states[1:]):
        counts[a, b] += 1
    visits = counts.sum(axis=1)
    checked = 0
    for row in range(vocab):
        if visits[row] < 2000:
            continue
        emp = counts[row] / visits[row]
        assert 0.5 * np.abs(emp - mats[0][row]).sum() < 0.02
        checked += 1
    assert checked >= 1


def test_dataset_labels_in_range_and_segments_distinct():
    cfg = ToyConfig(num_sequences=40, segment_length_range=(5, 10), seed=3)
    ds, _ = generate_dataset(cfg)
    assert len(ds) == 40
    for seq in ds:
        assert 0 <= seq.labels[GLOBAL_TASK] <= 4
        assert 0 <= seq.labels[LOCAL_TASK] <= 9
        assert seq.categorical_values[STATE_FIELD].max() < cfg.label_vocab
        np.testing.assert_array_equal(seq.timestamps, np.arange(len(seq), dtype=np.float64))


def test_dataset_byte_for_byte_deterministic(tmp_path):
    cfg = ToyConfig(num_sequences=25, segment_length_range=(4, 9), seed=17)
    for name in ("a", "b"):
        ds, _ = generate_dataset(cfg)
        save_dataset(tmp_path / name, ds)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_config_validation():
    with pytest.raises(ConfigError):
        ToyConfig(num_matrices=3, parts_range=(1, 5)).validate()
    with pytest.raises(ConfigError):
        ToyConfig(label_vocab=1).validate()
    with pytest.raises(ConfigError):
        ToyConfig(segment_length_range=(0, 5)).validate()


def test_distinctness_failure_raises():
    # one-state-ish chains cannot produce TV > 0.05 pairs forever
    rng = np.random.default_rng(0)
    with pytest.raises(RuntimeError):
        sample_transition_matrices(50, 2, rng, alpha=100.0, min_tv=1.9)
