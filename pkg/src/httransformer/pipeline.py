"""Training loops, embedding extraction, downstream classification, metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from . import diffcore as dc
from . import httokens as ht
from . import masks as masks_mod
from .model import STRATEGY_CLS, STRATEGY_HT, SequenceModel
from .model import extract_embedding as pool_embedding
from .objectives import (
    LossWeights,
    coles_batch_loss,
    ntp_loss,
    sample_subsequences,
    supervised_loss,
)
from .seqdata import ConfigError, Dataset, make_batches, pad_sequences

log = logging.getLogger(__name__)

OBJECTIVE_NTP = "ntp"
OBJECTIVE_COLES = "coles"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    patience: int = 5
    max_len: int = 400
    sft_epochs: int = 20
    objective: str = OBJECTIVE_NTP
    ht_config: ht.HTConfig | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    coles_k: int = 5
    coles_min_len: int = 10
    coles_slice_max: int | None = 25
    contrastive_eps: float = 0.5
    coles_parents_per_batch: int = 12

    def validate(self):
        if self.epochs < 1 or self.sft_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.objective not in (OBJECTIVE_NTP, OBJECTIVE_COLES):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.ht_config is not None:
            self.ht_config.validate()
        return self


@dataclass
class TrainResult:
    best_epoch: int
    best_val: float
    val_history: list
    train_history: list


def _check_finite(loss, where):
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss ({value}) at {where}")
    return value


def _ntp_step_inputs(batch, cfg, ht_rng):
    """Decide per batch whether history tokens are injected, and build the mask."""
    hc = cfg.ht_config
    if hc is not None and ht.should_apply(hc.probability, ht_rng):
        plans = ht.plan_batch(batch, hc, ht_rng)
        aug = ht.apply_plan(batch, plans)
        mask = ht.build_masks(aug, hc.selection, ht_rng)
    else:
        aug = ht.augment_causal(batch)
        mask = ht.build_masks(aug)
    return aug, mask


def evaluate_ntp(model, batches, weights):
    """Validation loss under plain causal attention, averaged over positions."""
    total, count = 0.0, 0
    with dc.no_grad():
        for batch in batches:
            aug = ht.augment_causal(batch)
            mask = ht.build_masks(aug)
            states = model.forward(aug, mask)
            loss, n_valid = ntp_loss(model.ntp_predict(states[-1]), aug, weights)
            total += float(loss.data) * n_valid
            count += n_valid
    if count == 0:
        raise ConfigError("validation set has no prediction positions")
    return total / count


def _slice_batches(dataset, cfg, rng):
    """Group parents, sample K views of each, pad each group into a batch.

    Parents are length-bucketed inside shuffled pools
    (same idea as make_batches) to keep slice padding in check.
    """
    n = len(dataset)
    order = rng.permutation(n)
    per = max(2, cfg.coles_parents_per_batch)
    pool = per * 8
    groups = []
    for start in range(0, n, pool):
        chunk = sorted(order[start:start + pool], key=lambda i: (len(dataset[i]), i))
        groups.extend(chunk[j:j + per] for j in range(0, len(chunk), per))
    rng.shuffle(groups)
    batches = []
    for group in groups:
        views = []
        for i in group:
            seq = dataset[i].truncated(cfg.max_len)
            views.extend(sample_subsequences(seq, cfg.coles_k, rng, cfg.coles_min_len,
                                             cfg.coles_slice_max))
        if len({s.id for s in views}) >= 2:
            batches.append(pad_sequences(views, dataset.schema))
    return batches


def _coles_embed(model, batch):
    """View embedding used by the contrastive objective: final state at the last event."""
    aug = ht.augment_causal(batch)
    mask = ht.build_masks(aug)
    states = model.forward(aug, mask)
    return dc.select_positions(states[-1], aug.lengths - 1), len(batch.ids)


def evaluate_coles(model, slice_batches, eps):
    total, count = 0.0, 0
    with dc.no_grad():
        for batch in slice_batches:
            emb, _ = _coles_embed(model, batch)
            loss, n_pairs = coles_batch_loss(emb, batch.ids, eps)
            total += float(loss.data) * n_pairs
            count += n_pairs
    if count == 0:
        raise ConfigError("no contrastive pairs in the validation set")
    return total / count


def pretrain(model, train_ds, val_ds, cfg, seed):
    """Unsupervised pretraining with early stopping on validation loss.

    Restores and returns the best-validation parameters.  History-token
    decisions consume a dedicated RNG stream, so a run with application
    probability 0 is bit-identical to a run without history tokens at all.
    """
    cfg.validate()
    data_rng, ht_rng, drop_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    ]
    params = model.named_params(include_class_head=False)
    opt = dc.Adam(params, lr=cfg.lr)
    weights = cfg.loss_weights

    val_batches = make_batches(val_ds, cfg.batch_size, cfg.max_len, seed=0, shuffle=False)
    if cfg.objective == OBJECTIVE_COLES:
        val_slices = _slice_batches(val_ds, cfg, np.random.default_rng(np.random.SeedSequence((seed, 0xC0))))

    best_val, best_state, best_epoch, bad = np.inf, None, -1, 0
    val_history, train_history = [], []
    for epoch in range(cfg.epochs):
        epoch_seed = int(data_rng.integers(2**63))
        epoch_loss, n_batches = 0.0, 0
        if cfg.objective == OBJECTIVE_NTP:
            for i, batch in enumerate(make_batches(train_ds, cfg.batch_size, cfg.max_len, epoch_seed)):
                aug, mask = _ntp_step_inputs(batch, cfg, ht_rng)
                states = model.forward(aug, mask, drop_rng=drop_rng)
                loss, _ = ntp_loss(model.ntp_predict(states[-1]), aug, weights)
                epoch_loss += _check_finite(loss, f"epoch {epoch} batch {i}")
                n_batches += 1
                opt.zero_grad()
                loss.backward()
                opt.step()
            val = evaluate_ntp(model, val_batches, weights)
        else:
            epoch_rng = np.random.default_rng(epoch_seed)
            for i, batch in enumerate(_slice_batches(train_ds, cfg, epoch_rng)):
                emb, _ = _coles_embed(model, batch)
                loss, _ = coles_batch_loss(emb, batch.ids, cfg.contrastive_eps)
                epoch_loss += _check_finite(loss, f"epoch {epoch} batch {i}")
                n_batches += 1
                opt.zero_grad()
                loss.backward()
                opt.step()
            val = evaluate_coles(model, val_slices, cfg.contrastive_eps)

        train_history.append(epoch_loss / max(n_batches, 1))
        val_history.append(val)
        log.info("pretrain[%s] epoch %d: train %.5f val %.5f", cfg.objective, epoch,
                 train_history[-1], val)
        if val < best_val:
            best_val, best_epoch, bad = val, epoch, 0
            best_state = model.state_arrays()
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    if best_state is not None:
        model.load_state(best_state)
    return TrainResult(best_epoch, best_val, val_history, train_history)


def _class_logits(model, batch, drop_rng=None):
    aug = ht.augment_inference(batch)
    mask = ht.build_masks(aug, masks_mod.STRATEGY_LAST)
    states = model.forward(aug, mask, drop_rng=drop_rng)
    positions = [aug.history_position(b) for b in range(aug.batch_size)]
    return model.classification_logits(states[-1], positions)


def classification_accuracy(model, batches, task):
    hits, total = 0, 0
    with dc.no_grad():
        for batch in batches:
            labels = batch.labels.get(task)
            if labels is None or (labels < 0).any():
                raise ConfigError(f"task label {task!r} absent from a batch row")
            pred = np.argmax(_class_logits(model, batch).data, axis=-1)
            hits += int((pred == labels).sum())
            total += len(labels)
    return hits / total


def finetune(model, train_ds, val_ds, task, cfg, seed, n_classes, freeze_backbone=False):
    """Attach a fresh classification head and train on sequence labels.

    The appended history token pools the sequence; validation accuracy drives
    early stopping and the best parameters are restored.
    """
    cfg.validate()
    ss = np.random.SeedSequence(seed)
    head_seed, data_ss, drop_ss = ss.spawn(3)
    model.set_classification_head(n_classes, head_seed)
    data_rng = np.random.default_rng(data_ss)
    drop_rng = np.random.default_rng(drop_ss)

    if freeze_backbone:
        w, b = model.class_head
        params = {w.name: w, b.name: b}
    else:
        params = model.named_params(include_class_head=True)
    opt = dc.Adam(params, lr=cfg.lr)

    val_batches = make_batches(val_ds, cfg.batch_size, cfg.max_len, seed=0, shuffle=False)
    best_val, best_state, best_epoch, bad = -np.inf, None, -1, 0
    val_history = []
    for epoch in range(cfg.sft_epochs):
        epoch_seed = int(data_rng.integers(2**63))
        for i, batch in enumerate(make_batches(train_ds, cfg.batch_size, cfg.max_len, epoch_seed)):
            labels = batch.labels.get(task)
            if labels is None or (labels < 0).any():
                raise ConfigError(f"task label {task!r} absent from a batch row")
            logits = _class_logits(model, batch, drop_rng=drop_rng)
            loss = supervised_loss(logits, labels)
            _check_finite(loss, f"epoch {epoch} batch {i}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        val = classification_accuracy(model, val_batches, task)
        val_history.append(val)
        log.info("finetune[%s] epoch %d: val acc %.4f", task, epoch, val)
        if val > best_val:
            best_val, best_epoch, bad = val, epoch, 0
            best_state = model.state_arrays()
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    if best_state is not None:
        model.load_state(best_state)
    return TrainResult(best_epoch, best_val, val_history, [])


# -- embedding extraction -------------------------------------------------------


@dataclass
class EmbeddingSet:
    ids: list
    vectors: np.ndarray              # (N, d)
    labels: dict[str, np.ndarray]    # task -> (N,), -1 where absent

    def __len__(self):
        return len(self.ids)


def extract_embeddings(model, dataset, strategy, batch_size=64, max_len=400):
    """One pooled vector per sequence, in dataset order.

    History-token pooling appends the inference token; the last-token and
    mean strategies run under the plain causal layout.
    """
    ids, vectors = [], []
    label_rows = {}
    batches = make_batches(dataset, batch_size, max_len, seed=0, shuffle=False)
    offset = 0
    with dc.no_grad():
        for batch in batches:
            if strategy in (STRATEGY_HT, STRATEGY_CLS):
                aug = ht.augment_inference(batch)
                mask = ht.build_masks(aug, masks_mod.STRATEGY_LAST)
            else:
                aug = ht.augment_causal(batch)
                mask = ht.build_masks(aug)
            states = model.forward(aug, mask)
            vectors.append(pool_embedding(states, aug, strategy))
            ids.extend(batch.ids)
            for task, values in batch.labels.items():
                label_rows.setdefault(task, {}).update(
                    {offset + i: v for i, v in enumerate(values)}
                )
            offset += batch.batch_size
    n = offset
    labels = {}
    for task, entries in label_rows.items():
        col = np.full(n, -1, dtype=np.int64)
        for i, v in entries.items():
            col[i] = v
        labels[task] = col
    vec = np.concatenate(vectors, axis=0) if vectors else np.zeros((0, model.model_cfg.d_model))
    return EmbeddingSet(ids, vec, labels)


def save_embeddings(path, embset):
    """NDJSON embedding records: {"id", "vector", "labels"}."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for i, seq_id in enumerate(embset.ids):
            labels = {t: int(col[i]) for t, col in embset.labels.items() if col[i] >= 0}
            record = {"id": seq_id, "vector": embset.vectors[i].tolist(), "labels": labels}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_embeddings(path):
    import json

    ids, vectors, raw_labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            ids.append(record["id"])
            vectors.append(record["vector"])
            raw_labels.append(record.get("labels", {}))
    n = len(ids)
    tasks = sorted({t for labels in raw_labels for t in labels})
    labels = {t: np.full(n, -1, dtype=np.int64) for t in tasks}
    for i, entry in enumerate(raw_labels):
        for t, v in entry.items():
            labels[t][i] = int(v)
    return EmbeddingSet(ids, np.asarray(vectors, dtype=np.float64), labels)


# -- downstream classifier --------------------------------------------------------


@dataclass
class LogisticModel:
    weights: np.ndarray        # (d, C)
    bias: np.ndarray           # (C,)
    mean: np.ndarray
    scale: np.ndarray
    final_loss: float
    grad_norm: float
    n_iter: int

    def decision(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weights + self.bias

    def predict_proba(self, x):
        logits = self.decision(x)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, x):
        return np.argmax(self.decision(x), axis=1)

    def accuracy(self, x, y):
        return float((self.predict(x) == np.asarray(y)).mean())


def train_downstream(embeddings, labels, seed, l2=1e-3, max_iter=2000, gtol=1e-6, init=None):
    """Multinomial logistic regression on frozen embeddings.

    Features are z-scored with training statistics; the L2-regularized
    objective is minimized full-batch (L-BFGS) to a gradient norm below
    ``gtol`` or ``max_iter`` iterations.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise ConfigError("downstream training needs at least two classes")
    n_classes = int(y.max()) + 1
    n, d = x.shape

    mean = x.mean(axis=0)
    scale = np.where(x.std(axis=0) > 1e-12, x.std(axis=0), 1.0)
    z = (x - mean) / scale
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    def objective(theta):
        w = theta[: d * n_classes].reshape(d, n_classes)
        b = theta[d * n_classes:]
        logits = z @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        nll = -np.mean(np.log(probs[np.arange(n), y] + 1e-300))
        loss = nll + 0.5 * l2 * float((w * w).sum())
        gl = (probs - onehot) / n
        gw = z.T @ gl + l2 * w
        gb = gl.sum(axis=0)
        return loss, np.concatenate([gw.reshape(-1), gb])

    if init is None:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        init = rng.normal(0.0, 1e-3, size=d * n_classes + n_classes)
    else:
        init = np.asarray(init, dtype=np.float64).reshape(-1)
        if init.size != d * n_classes + n_classes:
            raise ConfigError("bad init size for downstream classifier")

    res = optimize.minimize(
        objective,
        init,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15, "maxfun": 10 * max_iter},
    )
    theta = res.x
    loss, grad = objective(theta)
    return LogisticModel(
        weights=theta[: d * n_classes].reshape(d, n_classes),
        bias=theta[d * n_classes:],
        mean=mean,
        scale=scale,
        final_loss=float(loss),
        grad_norm=float(np.abs(grad).max()),
        n_iter=int(res.nit),
    )


# -- metrics -----------------------------------------------------------------------


def roc_auc(scores, labels):
    """Mann-Whitney AUC with midrank tie handling."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigError("roc_auc needs both classes present")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    midranks = (starts + ends) / 2.0
    ranks = midranks[inverse]
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy_score(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    return float((predictions == labels).mean())
