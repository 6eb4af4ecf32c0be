import numpy as np
import pytest

from httransformer.encoder import EmbedderConfig
from httransformer.model import SequenceModel, TransformerConfig
from httransformer.seqdata import Dataset, EventSequence, FieldSchema


def make_sequence(seq_id, states, cardinality=8, labels=None, timestamps=None):
    states = np.asarray(states, dtype=np.int64)
    ts = np.arange(len(states), dtype=np.float64) if timestamps is None else np.asarray(
        timestamps, dtype=np.float64)
    return EventSequence(
        id=seq_id,
        timestamps=ts,
        categorical_values={"label": states},
        numerical_values={},
        labels=labels or {},
    )


def make_dataset(num=12, length=10, cardinality=8, seed=0):
    rng = np.random.default_rng(seed)
    seqs = [
        make_sequence(
            f"s{i:03d}",
            rng.integers(0, cardinality, size=length),
            labels={"task": int(rng.integers(0, 2))},
        )
        for i in range(num)
    ]
    return Dataset(seqs, [FieldSchema("label", "categorical", cardinality)])


def tiny_model(layers=2, d_model=16, heads=2, ff_dim=24, dropout=0.0, cardinality=8,
               seed=0, m=1.0, M=20.0, cat_dim=None):
    schema = [FieldSchema("label", "categorical", cardinality)]
    emb = EmbedderConfig(d_model=d_model, cat_dim=cat_dim or d_model // 2, m=m, M=M)
    cfg = TransformerConfig(layers=layers, d_model=d_model, heads=heads, ff_dim=ff_dim,
                            dropout=dropout)
    return SequenceModel(schema, cfg, emb, seed=seed)


@pytest.fixture
def small_dataset():
    return make_dataset()
