"""Decoder-style transformer backbone with pluggable attention masks.

Pre-norm residual blocks (attention, then a relu feed-forward), all built on
the autodiff core.  The backbone returns every block's output so sequence
embeddings can be pooled across layers.  One learned history-token vector is
part of the model and is spliced into the input wherever a layout tags a
History position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import masks as masks_mod
from .encoder import EventEmbedder
from .seqdata import ConfigError, categorical_fields, numerical_fields

STRATEGY_HT = "ht"
STRATEGY_CLS = "cls"           # same pooling as "ht"; the model just never trained the token
STRATEGY_LAST_TOKEN = "last"
STRATEGY_MEAN_TOKENS = "mean"

DT_KEY = "dt"


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1

    def validate(self):
        if self.layers < 0 or self.d_model < 1 or self.heads < 1 or self.ff_dim < 1:
            raise ConfigError("bad transformer dimensions")
        if self.d_model % self.heads != 0:
            raise ConfigError("d_model must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self


def _linear_init(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class TransformerBlock:
    def __init__(self, cfg, rng, prefix):
        d, ff = cfg.d_model, cfg.ff_dim
        self.cfg = cfg
        t = dc.Tensor
        self.ln1_g = t(np.ones(d), requires_grad=True, name=f"{prefix}.ln1_g")
        self.ln1_b = t(np.zeros(d), requires_grad=True, name=f"{prefix}.ln1_b")
        self.wq = t(_linear_init(rng, d, d), requires_grad=True, name=f"{prefix}.wq")
        self.bq = t(np.zeros(d), requires_grad=True, name=f"{prefix}.bq")
        self.wk = t(_linear_init(rng, d, d), requires_grad=True, name=f"{prefix}.wk")
        self.bk = t(np.zeros(d), requires_grad=True, name=f"{prefix}.bk")
        self.wv = t(_linear_init(rng, d, d), requires_grad=True, name=f"{prefix}.wv")
        self.bv = t(np.zeros(d), requires_grad=True, name=f"{prefix}.bv")
        self.wo = t(_linear_init(rng, d, d), requires_grad=True, name=f"{prefix}.wo")
        self.bo = t(np.zeros(d), requires_grad=True, name=f"{prefix}.bo")
        self.ln2_g = t(np.ones(d), requires_grad=True, name=f"{prefix}.ln2_g")
        self.ln2_b = t(np.zeros(d), requires_grad=True, name=f"{prefix}.ln2_b")
        self.w1 = t(_linear_init(rng, d, ff), requires_grad=True, name=f"{prefix}.w1")
        self.b1 = t(np.zeros(ff), requires_grad=True, name=f"{prefix}.b1")
        self.w2 = t(_linear_init(rng, ff, d), requires_grad=True, name=f"{prefix}.w2")
        self.b2 = t(np.zeros(d), requires_grad=True, name=f"{prefix}.b2")

    def named_params(self):
        out = {}
        for attr in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                     "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
            p = getattr(self, attr)
            out[p.name] = p
        return out

    def _split_heads(self, x, b, L):
        cfg = self.cfg
        dk = cfg.d_model // cfg.heads
        return dc.transpose(dc.reshape(x, (b, L, cfg.heads, dk)), (0, 2, 1, 3))

    def forward(self, x, mask, pad_rows, drop_rng=None):
        cfg = self.cfg
        b, L, d = x.shape
        h = dc.layer_norm(x, self.ln1_g, self.ln1_b)
        q = self._split_heads(dc.matmul(h, self.wq) + self.bq, b, L)
        k = self._split_heads(dc.matmul(h, self.wk) + self.bk, b, L)
        v = self._split_heads(dc.matmul(h, self.wv) + self.bv, b, L)
        att = dc.masked_softmax_attention(
            q, k, v, mask[:, None, :, :], empty_rows_ok=pad_rows[:, None, :]
        )
        att = dc.reshape(dc.transpose(att, (0, 2, 1, 3)), (b, L, d))
        att = dc.matmul(att, self.wo) + self.bo
        if drop_rng is not None and cfg.dropout > 0.0:
            att = dc.dropout(att, cfg.dropout, drop_rng)
        x = x + att

        h2 = dc.layer_norm(x, self.ln2_g, self.ln2_b)
        ff = dc.matmul(dc.relu(dc.matmul(h2, self.w1) + self.b1), self.w2) + self.b2
        if drop_rng is not None and cfg.dropout > 0.0:
            ff = dc.dropout(ff, cfg.dropout, drop_rng)
        return x + ff


class SequenceModel:
    """Embedder + history token + backbone + prediction heads."""

    def __init__(self, schema, model_cfg, emb_cfg, seed):
        self.schema = list(schema)
        self.model_cfg = model_cfg.validate()
        self.emb_cfg = emb_cfg.validate()
        if emb_cfg.d_model != model_cfg.d_model:
            raise ConfigError("embedder and backbone dimensions disagree")
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.embedder = EventEmbedder(schema, emb_cfg, rng)
        self.ht_embedding = dc.Tensor(
            rng.normal(0.0, 0.02, size=model_cfg.d_model), requires_grad=True, name="ht_embedding"
        )
        self.blocks = [
            TransformerBlock(model_cfg, rng, prefix=f"block{i}") for i in range(model_cfg.layers)
        ]
        self.ntp_heads = {}
        for f in categorical_fields(schema):
            w = dc.Tensor(_linear_init(rng, model_cfg.d_model, f.cardinality),
                          requires_grad=True, name=f"head.{f.name}.w")
            bias = dc.Tensor(np.zeros(f.cardinality), requires_grad=True, name=f"head.{f.name}.b")
            self.ntp_heads[f.name] = (w, bias)
        for f in numerical_fields(schema):
            w = dc.Tensor(_linear_init(rng, model_cfg.d_model, 1),
                          requires_grad=True, name=f"head.{f.name}.w")
            bias = dc.Tensor(np.zeros(1), requires_grad=True, name=f"head.{f.name}.b")
            self.ntp_heads[f.name] = (w, bias)
        w = dc.Tensor(_linear_init(rng, model_cfg.d_model, 1), requires_grad=True, name="head.dt.w")
        bias = dc.Tensor(np.zeros(1), requires_grad=True, name="head.dt.b")
        self.ntp_heads[DT_KEY] = (w, bias)
        self.class_head = None

    # -- parameters ---------------------------------------------------------

    def named_params(self, include_class_head=True):
        out = dict(self.embedder.named_params())
        out[self.ht_embedding.name] = self.ht_embedding
        for blk in self.blocks:
            out.update(blk.named_params())
        for w, bias in self.ntp_heads.values():
            out[w.name] = w
            out[bias.name] = bias
        if include_class_head and self.class_head is not None:
            w, bias = self.class_head
            out[w.name] = w
            out[bias.name] = bias
        return out

    def set_classification_head(self, n_classes, seed):
        """Replace the output projection with a fresh task head."""
        rng = np.random.default_rng(seed)
        w = dc.Tensor(_linear_init(rng, self.model_cfg.d_model, n_classes),
                      requires_grad=True, name="head.class.w")
        bias = dc.Tensor(np.zeros(n_classes), requires_grad=True, name="head.class.b")
        self.class_head = (w, bias)

    def load_state(self, state):
        params = self.named_params()
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ValueError(f"parameter {name!r}: shape mismatch")
            p.data = state[name].copy()

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.named_params().items()}

    # -- forward ------------------------------------------------------------

    def embed_augmented(self, aug):
        """Assemble backbone input: event embeddings, spliced history token, positions."""
        b, base_len = aug.base.timestamps.shape
        d = self.model_cfg.d_model
        content = self.embedder.embed_events(aug.base)
        flat = dc.reshape(content, (b * base_len, d))
        source = dc.concat(
            [flat, dc.reshape(self.ht_embedding, (1, d)), dc.Tensor(np.zeros((1, d)))], axis=0
        )
        x = dc.reshape(dc.gather(source, aug.flat_source_index().reshape(-1)),
                       (b, aug.total_len, d))
        pe = self.embedder.positional(aug.timestamps, nonpad=aug.tags != masks_mod.TAG_PAD)
        return x + dc.Tensor(pe)

    def forward(self, aug, mask, drop_rng=None):
        """Run the backbone; returns the list of per-block hidden states."""
        if mask.shape != (aug.batch_size, aug.total_len, aug.total_len):
            raise ConfigError("mask shape does not match the augmented batch")
        x = self.embed_augmented(aug)
        pad_rows = aug.pad_rows
        states = []
        for blk in self.blocks:
            x = blk.forward(x, mask, pad_rows, drop_rng=drop_rng)
            states.append(x)
        return states if states else [x]

    def ntp_predict(self, hidden):
        """Per-field next-event predictions at every position of ``hidden``."""
        out = {}
        for name, (w, bias) in self.ntp_heads.items():
            logits = dc.matmul(hidden, w) + bias
            if logits.shape[-1] == 1:
                logits = dc.reshape(logits, logits.shape[:-1])
            out[name] = logits
        return out

    def classification_logits(self, hidden, positions):
        """Task logits read at one position per row (the appended history token)."""
        if self.class_head is None:
            raise ConfigError("no classification head attached")
        w, bias = self.class_head
        pooled = dc.select_positions(hidden, np.asarray(positions, dtype=np.int64))
        return dc.matmul(pooled, w) + bias


def save_model(path, model, extra_meta=None):
    """Checkpoint the parameters plus the configs needed to rebuild the model."""
    import dataclasses

    from .seqdata import schema_to_doc

    emb = model.emb_cfg
    meta = {
        # list of pairs: the checkpoint header sorts dict keys, but field order matters
        "schema": [[k, v] for k, v in schema_to_doc(model.schema).items()],
        "model": dataclasses.asdict(model.model_cfg),
        "embedder": {"d_model": emb.d_model, "cat_dim": emb.cat_dim, "d_pe": emb.d_pe,
                     "m": emb.m, "M": emb.M},
    }
    if extra_meta:
        meta.update(extra_meta)
    dc.save_checkpoint(path, model.named_params(), meta)


def load_model(path):
    """Rebuild a SequenceModel from a checkpoint; returns (model, meta)."""
    from .encoder import EmbedderConfig
    from .seqdata import schema_from_doc

    state, meta = dc.load_checkpoint(path)
    if meta is None or "schema" not in meta:
        raise ConfigError(f"{path}: checkpoint has no model metadata")
    schema = schema_from_doc(meta["schema"])
    model_cfg = TransformerConfig(**meta["model"])
    emb_cfg = EmbedderConfig(**meta["embedder"])
    model = SequenceModel(schema, model_cfg, emb_cfg, seed=0)
    if "head.class.w" in state:
        model.set_classification_head(state["head.class.w"].shape[1], seed=0)
    model.load_state(state)
    return model, meta


def extract_embedding(states, aug, strategy):
    """Pool hidden states into one vector per row.

    ``ht``/``cls``: mean across blocks of the state at the final History
    position.  ``last``: final block's state at the last non-pad position.
    ``mean``: final block's state averaged over Event positions.
    Works on plain arrays; call under ``no_grad`` for extraction.
    """
    arrays = [s.data if isinstance(s, dc.Tensor) else s for s in states]
    final = arrays[-1]
    b = final.shape[0]
    if strategy in (STRATEGY_HT, STRATEGY_CLS):
        pos = np.array([aug.history_position(i) for i in range(b)])
        stacked = np.stack([a[np.arange(b), pos] for a in arrays])
        return stacked.mean(axis=0)
    if strategy == STRATEGY_LAST_TOKEN:
        pos = aug.lengths - 1
        return final[np.arange(b), pos]
    if strategy == STRATEGY_MEAN_TOKENS:
        is_event = (aug.tags == masks_mod.TAG_EVENT).astype(np.float64)
        denom = np.maximum(is_event.sum(axis=1, keepdims=True), 1.0)
        return (final * is_event[..., None]).sum(axis=1) / denom
    raise ConfigError(f"unknown embedding strategy {strategy!r}")
