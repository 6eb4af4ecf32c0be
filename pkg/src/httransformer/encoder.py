"""Event embedding: per-field encoding, projection, and time positional encoding.

Each categorical field owns a trainable embedding table; numerical fields
enter as raw values.  The per-field pieces are concatenated and linearly
projected to the model dimension.  Timestamps are encoded with sinusoids at
geometrically spaced periods between the time-scale constants ``m`` and
``5 * M`` and added onto the first ``d_pe`` embedding dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .seqdata import ConfigError, categorical_fields, numerical_fields


@dataclass(frozen=True)
class EmbedderConfig:
    d_model: int
    cat_dim: int = 16
    d_pe: int | None = None   # defaults to d_model
    m: float = 1.0
    M: float = 1.0

    def validate(self):
        if self.d_model <= 0 or self.cat_dim <= 0:
            raise ConfigError("dimensions must be positive")
        if self.pe_dim % 2 != 0:
            raise ConfigError("d_pe must be even")
        if self.pe_dim > self.d_model:
            raise ConfigError("d_pe cannot exceed d_model")
        if self.m <= 0 or self.M < self.m:
            raise ConfigError("require 0 < m <= M")
        return self

    @property
    def pe_dim(self):
        return self.d_model if self.d_pe is None else self.d_pe


def positional_encoding(t, m, M, d_pe):
    """Sinusoidal encoding of a single timestamp; returns a (d_pe,) vector.

    Component i is sin(t / (m * (5M/m)^(i/d_pe))) for even i and the cosine
    at the previous even component's period for odd i.
    """
    i = np.arange(d_pe, dtype=np.float64)
    base = i - (i % 2)
    periods = m * (5.0 * M / m) ** (base / d_pe)
    angle = t / periods
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def positional_matrix(timestamps, m, M, d_pe):
    """Vectorized positional encoding: (...,) timestamps -> (..., d_pe)."""
    ts = np.asarray(timestamps, dtype=np.float64)
    i = np.arange(d_pe, dtype=np.float64)
    base = i - (i % 2)
    periods = m * (5.0 * M / m) ** (base / d_pe)
    angle = ts[..., None] / periods
    out = np.empty(ts.shape + (d_pe,), dtype=np.float64)
    out[..., 0::2] = np.sin(angle[..., 0::2])
    out[..., 1::2] = np.cos(angle[..., 1::2])
    return out


class EventEmbedder:
    """Trainable per-field encoders plus the projection to model space."""

    def __init__(self, schema, config, rng):
        config.validate()
        self.schema = list(schema)
        self.config = config
        self.tables = {}
        in_dim = 0
        for f in categorical_fields(schema):
            table = rng.normal(0.0, 0.02, size=(f.cardinality, config.cat_dim))
            self.tables[f.name] = dc.Tensor(table, requires_grad=True, name=f"embed.{f.name}")
            in_dim += config.cat_dim
        self.num_fields = [f.name for f in numerical_fields(schema)]
        in_dim += len(self.num_fields)
        bound = np.sqrt(6.0 / (in_dim + config.d_model))
        self.proj_w = dc.Tensor(
            rng.uniform(-bound, bound, size=(in_dim, config.d_model)),
            requires_grad=True,
            name="embed.proj_w",
        )
        self.proj_b = dc.Tensor(np.zeros(config.d_model), requires_grad=True, name="embed.proj_b")

    def named_params(self):
        out = {t.name: t for t in self.tables.values()}
        out[self.proj_w.name] = self.proj_w
        out[self.proj_b.name] = self.proj_b
        return out

    def embed_events(self, batch):
        """Project raw event content; returns (B, L, d_model) without positions."""
        b, L = batch.timestamps.shape
        parts = []
        for f in categorical_fields(self.schema):
            codes = batch.categorical[f.name]
            if codes.min() < 0 or codes.max() >= f.cardinality:
                raise ConfigError(f"field {f.name!r}: code out of range")
            looked = dc.gather(self.tables[f.name], codes.reshape(-1))
            parts.append(dc.reshape(looked, (b, L, self.config.cat_dim)))
        for name in self.num_fields:
            parts.append(dc.Tensor(batch.numerical[name][..., None]))
        joined = parts[0] if len(parts) == 1 else dc.concat(parts, axis=-1)
        return dc.matmul(joined, self.proj_w) + self.proj_b

    def encode_event(self, categorical, numerical=None):
        """Single-event convenience: dict field -> value, returns a (d_model,) tensor."""
        from .seqdata import PaddedBatch

        numerical = numerical or {}
        batch = PaddedBatch(
            ids=["_"],
            lengths=np.array([1], dtype=np.int64),
            timestamps=np.zeros((1, 1)),
            categorical={k: np.array([[v]], dtype=np.int64) for k, v in categorical.items()},
            numerical={k: np.array([[v]], dtype=np.float64) for k, v in numerical.items()},
            labels={},
        )
        return dc.reshape(self.embed_events(batch), (self.config.d_model,))

    def positional(self, timestamps, nonpad=None):
        """Constant (..., d_model) positional term, zeroed outside ``nonpad``."""
        cfg = self.config
        pe = positional_matrix(timestamps, cfg.m, cfg.M, cfg.pe_dim)
        if nonpad is not None:
            pe = pe * np.asarray(nonpad, dtype=np.float64)[..., None]
        if cfg.pe_dim < cfg.d_model:
            pad_width = [(0, 0)] * (pe.ndim - 1) + [(0, cfg.d_model - cfg.pe_dim)]
            pe = np.pad(pe, pad_width)
        return pe

    def encode_sequence(self, seq):
        """Embed one full sequence: (N, d_model) with positions added."""
        from .seqdata import pad_sequences

        if len(seq) == 0:
            return dc.Tensor(np.zeros((0, self.config.d_model)))
        batch = pad_sequences([seq], self.schema)
        content = self.embed_events(batch)
        pe = self.positional(batch.timestamps)
        out = content + dc.Tensor(pe)
        return dc.reshape(out, (len(seq), self.config.d_model))
