"""Event embedding and time positional encoding."""

import math

import numpy as np
import pytest

from httransformer import diffcore as dc
from httransformer.encoder import EmbedderConfig, EventEmbedder, positional_encoding, positional_matrix
from httransformer.seqdata import ConfigError, FieldSchema

from conftest import make_sequence


def pe_scalar_oracle(t, m, M, d_pe):
    """Componentwise reimplementation with plain math calls."""
    out = []
    for i in range(d_pe):
        if i % 2 == 0:
            out.append(math.sin(t / (m * (5 * M / m) ** (i / d_pe))))
        else:
            out.append(math.cos(t / (m * (5 * M / m) ** ((i - 1) / d_pe))))
    return np.array(out)


def test_pe_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(25):
        t = float(rng.uniform(0, 500))
        m = float(rng.uniform(1e-3, 2.0))
        M = m * float(rng.uniform(1.0, 500.0))
        d_pe = int(rng.choice([2, 4, 8, 16]))
        got = positional_encoding(t, m, M, d_pe)
        np.testing.assert_allclose(got, pe_scalar_oracle(t, m, M, d_pe), rtol=0, atol=1e-12)


def test_pe_at_zero():
    out = positional_encoding(0.0, 0.5, 10.0, 8)
    np.testing.assert_array_equal(out[0::2], np.zeros(4))
    np.testing.assert_array_equal(out[1::2], np.ones(4))


def test_pe_first_component_is_sin_t_over_m():
    t, m, M = 3.7, 0.25, 40.0
    out = positional_encoding(t, m, M, 6)
    assert abs(out[0] - math.sin(t / m)) < 1e-15


def test_pe_bounded_and_stateless():
    rng = np.random.default_rng(1)
    ts = rng.uniform(0, 1e4, size=100)
    mat = positional_matrix(ts, 0.7, 300.0, 12)
    assert np.abs(mat).max() <= 1.0
    np.testing.assert_array_equal(mat, positional_matrix(ts, 0.7, 300.0, 12))


def test_pe_matrix_matches_vector_version():
    ts = np.array([[0.0, 2.0], [7.0, 7.0]])
    mat = positional_matrix(ts, 0.5, 20.0, 6)
    for i in range(2):
        for j in range(2):
            np.testing.assert_allclose(mat[i, j], positional_encoding(ts[i, j], 0.5, 20.0, 6),
                                       atol=1e-15)


def test_config_invariants():
    with pytest.raises(ConfigError):
        EmbedderConfig(d_model=8, d_pe=3, m=1.0, M=2.0).validate()
    with pytest.raises(ConfigError):
        EmbedderConfig(d_model=8, m=0.0, M=2.0).validate()
    with pytest.raises(ConfigError):
        EmbedderConfig(d_model=8, m=3.0, M=2.0).validate()


def _embedder(card=6, cat_dim=4, d_model=4, m=1.0, M=10.0, seed=0):
    schema = [FieldSchema("label", "categorical", card)]
    cfg = EmbedderConfig(d_model=d_model, cat_dim=cat_dim, m=m, M=M)
    return EventEmbedder(schema, cfg, np.random.default_rng(seed)), schema


def test_encode_event_zero_tables_gives_bias():
    emb, _ = _embedder()
    emb.tables["label"].data[:] = 0.0
    out = emb.encode_event({"label": 2})
    np.testing.assert_array_equal(out.data, emb.proj_b.data)


def test_encode_event_lookup_row_appears_verbatim():
    # cat_dim == d_model and identity projection expose the raw table row
    emb, _ = _embedder(cat_dim=4, d_model=4)
    emb.proj_w.data = np.eye(4)
    emb.proj_b.data[:] = 0.0
    out = emb.encode_event({"label": 3})
    np.testing.assert_array_equal(out.data, emb.tables["label"].data[3])


def test_encode_event_rejects_out_of_range_code():
    emb, _ = _embedder(card=6)
    with pytest.raises(ConfigError):
        emb.encode_event({"label": 6})


def test_gradient_reaches_exactly_one_table_row():
    emb, _ = _embedder()
    out = emb.encode_event({"label": 2})
    dc.tensor_sum(out * out).backward()
    grad = emb.tables["label"].grad
    assert np.flatnonzero(np.abs(grad).sum(axis=1)).tolist() == [2]


def test_encode_sequence_empty():
    emb, _ = _embedder()
    out = emb.encode_sequence(make_sequence("a", [], timestamps=[]))
    assert out.shape == (0, 4)


def test_encode_sequence_equal_timestamps_equal_positional_parts():
    emb, _ = _embedder()
    seq = make_sequence("a", [1, 1], timestamps=[5.0, 5.0])
    out = emb.encode_sequence(seq)
    np.testing.assert_array_equal(out.data[0], out.data[1])


def test_timestamp_shift_changes_only_positional_part():
    emb, _ = _embedder(m=0.5, M=50.0)
    states = [1, 4, 2]
    base = make_sequence("a", states, timestamps=[0.0, 3.0, 9.0])
    shifted = make_sequence("a", states, timestamps=[2.0, 5.0, 11.0])
    diff = emb.encode_sequence(shifted).data - emb.encode_sequence(base).data
    pe_diff = (positional_matrix(shifted.timestamps, 0.5, 50.0, 4)
               - positional_matrix(base.timestamps, 0.5, 50.0, 4))
    np.testing.assert_allclose(diff, pe_diff, atol=1e-12)


def test_encode_sequence_shape():
    emb, _ = _embedder()
    rng = np.random.default_rng(4)
    for n in (1, 3, 17):
        seq = make_sequence("a", rng.integers(0, 6, size=n))
        assert emb.encode_sequence(seq).shape == (n, 4)
