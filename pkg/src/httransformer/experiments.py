"""Experiment orchestration: flat config, method runners, reports, sweeps.

A run executes generate/load -> pretrain -> (finetune) -> extract -> classify
-> evaluate for every configured method and seed, and writes three artifacts
into the output directory: ``report.csv`` (one row per method x task x seed x
metric, byte-reproducible), ``summary.txt`` (human-readable, includes wall
clock), and ``report.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffcore as dc
from .encoder import EmbedderConfig
from .httokens import HTConfig
from .model import (
    STRATEGY_CLS,
    STRATEGY_HT,
    STRATEGY_LAST_TOKEN,
    STRATEGY_MEAN_TOKENS,
    SequenceModel,
    TransformerConfig,
)
from .objectives import LossWeights
from .pipeline import (
    OBJECTIVE_COLES,
    OBJECTIVE_NTP,
    TrainConfig,
    classification_accuracy,
    extract_embeddings,
    finetune,
    make_batches,
    pretrain,
    roc_auc,
    train_downstream,
)
from .seqdata import ConfigError, compute_time_stats, load_dataset, load_schema, split_dataset
from .toygen import ToyConfig, generate_dataset

log = logging.getLogger(__name__)

METHOD_SUPERVISED = "supervised"
METHOD_NTP_LAST = "ntp-last"
METHOD_NTP_AVG = "ntp-avg"
METHOD_NTP_CLS = "ntp-cls"
METHOD_COLES = "coles"
METHOD_NTP_HT = "ntp-ht"
METHOD_NTP_HT_SFT = "ntp-ht-sft"

ALL_METHODS = (
    METHOD_SUPERVISED,
    METHOD_NTP_LAST,
    METHOD_NTP_AVG,
    METHOD_NTP_CLS,
    METHOD_COLES,
    METHOD_NTP_HT,
    METHOD_NTP_HT_SFT,
)

_STREAM_INIT = 0
_STREAM_TRAIN = 1
_STREAM_DOWNSTREAM = 2
_OBJECTIVE_IDS = {"ntp": 1, "coles": 2, "ht": 3, "supervised": 4}


def derived_seed(*parts):
    """Stable int seed from a tuple of small ints."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat, typed experiment description; every key is a CLI flag."""

    # data
    dataset: str = "toy"            # "toy" or path to an NDJSON file
    schema: str = ""                # schema path when dataset is a file
    toy_num_sequences: int = 1400
    toy_num_matrices: int = 10
    toy_label_vocab: int = 8
    toy_parts_min: int = 1
    toy_parts_max: int = 5
    toy_segment_min: int = 30
    toy_segment_max: int = 70
    toy_dirichlet_alpha: float = 0.3
    data_seed: int = 7
    train_fraction: float = 0.75
    val_fraction: float = 0.1
    test_fraction: float = 0.15
    split_seed: int = 13
    # model
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1
    cat_dim: int = 16
    # training
    epochs: int = 6
    lr: float = 1e-3
    batch_size: int = 64
    patience: int = 2
    max_len: int = 400
    sft_epochs: int = 20
    sft_patience: int = 5
    supervised_epochs: int = 12
    dt_weight: float = 1.0
    field_weights: str = ""         # "name:weight,name:weight"
    # history tokens
    ht_frequency: float = 0.1
    ht_probability: float = 0.5
    ht_placement: str = "bias-end"
    ht_selection: str = "random"
    # contrastive
    coles_k: int = 5
    contrastive_eps: float = 0.5
    coles_parents_per_batch: int = 12
    coles_slice_max: int = 25
    # downstream
    downstream_l2: float = 1e-3
    # run
    methods: str = "supervised,ntp-last,ntp-avg,coles,ntp-ht"
    tasks: str = ""                 # empty -> every task present in the data
    seeds: str = "0,1,2"
    out_dir: str = "runs/exp"

    def method_list(self):
        methods = [m.strip() for m in self.methods.split(",") if m.strip()]
        for m in methods:
            if m not in ALL_METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {ALL_METHODS}")
        return methods

    def seed_list(self):
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def loss_weights(self):
        weights = {}
        if self.field_weights.strip():
            for item in self.field_weights.split(","):
                name, w = item.split(":")
                weights[name.strip()] = float(w)
        return LossWeights(fields=weights, dt=self.dt_weight)

    def to_dict(self):
        return dataclasses.asdict(self)

    def fingerprint(self):
        doc = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(doc).hexdigest()

    @classmethod
    def from_dict(cls, doc):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(cls, key, value)
        return cls(**kwargs)


def _coerce(cls, key, value):
    target = {f.name: f.default for f in fields(cls)}[key]
    if isinstance(target, bool):
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
    if isinstance(target, int) and not isinstance(value, bool):
        return int(value)
    if isinstance(target, float):
        return float(value)
    return str(value)


def load_config(path=None, overrides=None):
    doc = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
    doc.update(overrides or {})
    return ExperimentConfig.from_dict(doc)


# -- report -----------------------------------------------------------------------


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)   # dicts: method, task, seed, metric, value
    fingerprint: str = ""
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    def add(self, method, task, seed, metric, value):
        self.rows.append(
            {"method": method, "task": task, "seed": str(seed), "metric": metric,
             "value": float(value)}
        )

    def finalize_medians(self):
        groups = {}
        for row in self.rows:
            if row["seed"] == "median":
                continue
            groups.setdefault((row["method"], row["task"], row["metric"]), []).append(row["value"])
        for (method, task, metric), values in sorted(groups.items()):
            self.add(method, task, "median", metric, float(np.median(values)))

    def value(self, method, task, metric="accuracy", seed="median"):
        for row in self.rows:
            if (row["method"], row["task"], row["metric"], row["seed"]) == (
                method, task, metric, str(seed)
            ):
                return row["value"]
        raise KeyError(f"no row for {method}/{task}/{metric}/{seed}")

    def to_csv_text(self):
        def key(row):
            return (row["method"], row["task"], row["metric"],
                    row["seed"] == "median", row["seed"])

        lines = ["method,task,seed,metric,value"]
        for row in sorted(self.rows, key=key):
            lines.append(
                f"{row['method']},{row['task']},{row['seed']},{row['metric']},{row['value']!r}"
            )
        return "\n".join(lines) + "\n"

    def summary_text(self):
        methods = sorted({r["method"] for r in self.rows})
        tasks = sorted({r["task"] for r in self.rows})
        lines = [
            f"config fingerprint: {self.fingerprint}",
            f"wall clock: {self.wall_clock:.1f}s",
            "",
            f"{'method':<14}" + "".join(f"{t:>12}" for t in tasks) + "   (median accuracy)",
        ]
        for m in methods:
            cells = []
            for t in tasks:
                try:
                    cells.append(f"{self.value(m, t):>12.3f}")
                except KeyError:
                    cells.append(f"{'-':>12}")
            lines.append(f"{m:<14}" + "".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(self.to_csv_text())
        with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(self.summary_text())
        doc = {
            "fingerprint": self.fingerprint,
            "wall_clock": self.wall_clock,
            "config": self.config,
            "rows": self.rows,
        }
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- experiment context -------------------------------------------------------------


class ExperimentContext:
    """Shared data, configs, and per-seed model caches for one experiment."""

    def __init__(self, cfg):
        self.cfg = cfg
        if cfg.dataset == "toy":
            toy = ToyConfig(
                num_matrices=cfg.toy_num_matrices,
                label_vocab=cfg.toy_label_vocab,
                parts_range=(cfg.toy_parts_min, cfg.toy_parts_max),
                segment_length_range=(cfg.toy_segment_min, cfg.toy_segment_max),
                num_sequences=cfg.toy_num_sequences,
                seed=cfg.data_seed,
                dirichlet_alpha=cfg.toy_dirichlet_alpha,
            )
            self.dataset, _ = generate_dataset(toy)
        else:
            if not cfg.schema:
                raise ConfigError("a schema path is required for file datasets")
            self.dataset = load_dataset(cfg.dataset, load_schema(cfg.schema))
        self.train, self.val, self.test = split_dataset(
            self.dataset,
            (cfg.train_fraction, cfg.val_fraction, cfg.test_fraction),
            cfg.split_seed,
        )
        m, M = compute_time_stats(self.train)
        self.emb_cfg = EmbedderConfig(d_model=cfg.d_model, cat_dim=cfg.cat_dim, m=m, M=M)
        self.model_cfg = TransformerConfig(
            layers=cfg.layers, d_model=cfg.d_model, heads=cfg.heads,
            ff_dim=cfg.ff_dim, dropout=cfg.dropout,
        )
        if cfg.tasks.strip():
            self.tasks = [t.strip() for t in cfg.tasks.split(",")]
        else:
            self.tasks = sorted({t for s in self.dataset for t in s.labels})
        if not self.tasks:
            raise ConfigError("dataset has no task labels")
        self._pretrained = {}
        self._embeddings = {}

    # -- builders ---------------------------------------------------------------

    def schema(self):
        return self.dataset.schema

    def new_model(self, objective, seed):
        return SequenceModel(
            self.schema(), self.model_cfg, self.emb_cfg,
            seed=derived_seed(seed, _OBJECTIVE_IDS[objective], _STREAM_INIT),
        )

    def train_config(self, objective):
        cfg = self.cfg
        base = TrainConfig(
            epochs=cfg.epochs,
            lr=cfg.lr,
            batch_size=cfg.batch_size,
            patience=cfg.patience,
            max_len=cfg.max_len,
            sft_epochs=cfg.sft_epochs,
            loss_weights=cfg.loss_weights(),
            coles_k=cfg.coles_k,
            contrastive_eps=cfg.contrastive_eps,
            coles_parents_per_batch=cfg.coles_parents_per_batch,
            coles_slice_max=cfg.coles_slice_max if cfg.coles_slice_max > 0 else None,
        )
        if objective == "ht":
            return replace(
                base,
                objective=OBJECTIVE_NTP,
                ht_config=HTConfig(
                    frequency=cfg.ht_frequency,
                    probability=cfg.ht_probability,
                    placement=cfg.ht_placement,
                    selection=cfg.ht_selection,
                ),
            )
        if objective == "ntp":
            return base
        if objective == "coles":
            return replace(base, objective=OBJECTIVE_COLES)
        raise ConfigError(f"unknown objective {objective!r}")

    def pretrained(self, objective, seed):
        key = (objective, seed)
        if key not in self._pretrained:
            model = self.new_model(objective, seed)
            cfg = self.train_config(objective)
            result = pretrain(
                model, self.train, self.val, cfg,
                seed=derived_seed(seed, _OBJECTIVE_IDS[objective], _STREAM_TRAIN),
            )
            self._pretrained[key] = (model, result)
        return self._pretrained[key]

    def embeddings(self, objective, seed, strategy):
        key = (objective, seed, strategy)
        if key not in self._embeddings:
            model, _ = self.pretrained(objective, seed)
            sets = {}
            for name, split in (("train", self.train), ("val", self.val), ("test", self.test)):
                sets[name] = extract_embeddings(
                    model, split, strategy,
                    batch_size=self.cfg.batch_size, max_len=self.cfg.max_len,
                )
            self._embeddings[key] = sets
        return self._embeddings[key]

    def downstream_metrics(self, objective, seed, strategy, task):
        sets = self.embeddings(objective, seed, strategy)
        tr, te = sets["train"], sets["test"]
        clf = train_downstream(
            tr.vectors, tr.labels[task],
            seed=derived_seed(seed, _OBJECTIVE_IDS[objective], _STREAM_DOWNSTREAM),
            l2=self.cfg.downstream_l2,
        )
        out = {"accuracy": clf.accuracy(te.vectors, te.labels[task])}
        if int(np.max(tr.labels[task])) + 1 == 2:
            out["roc_auc"] = roc_auc(clf.predict_proba(te.vectors)[:, 1], te.labels[task])
        return out

    def test_accuracy(self, model, task):
        batches = make_batches(
            self.test, self.cfg.batch_size, self.cfg.max_len, seed=0, shuffle=False
        )
        return classification_accuracy(model, batches, task)


def run_method(ctx, method, seed):
    """Metrics dict {task: {metric: value}} for one method at one seed."""
    cfg = ctx.cfg
    out = {}
    if method == METHOD_SUPERVISED:
        for i, task in enumerate(ctx.tasks):
            model = ctx.new_model("supervised", derived_seed(seed, 50 + i))
            train_cfg = replace(
                ctx.train_config("ntp"),
                sft_epochs=cfg.supervised_epochs, patience=cfg.sft_patience,
            )
            finetune(
                model, ctx.train, ctx.val, task, train_cfg,
                seed=derived_seed(seed, _OBJECTIVE_IDS["supervised"], _STREAM_TRAIN, i),
                n_classes=ctx.dataset.label_classes(task),
            )
            out[task] = {"accuracy": ctx.test_accuracy(model, task)}
        return out

    if method == METHOD_NTP_HT_SFT:
        base_model, _ = ctx.pretrained("ht", seed)
        state = base_model.state_arrays()
        for i, task in enumerate(ctx.tasks):
            model = ctx.new_model("ht", seed)
            model.load_state(state)
            train_cfg = replace(ctx.train_config("ntp"), patience=cfg.sft_patience)
            finetune(
                model, ctx.train, ctx.val, task, train_cfg,
                seed=derived_seed(seed, _OBJECTIVE_IDS["ht"], _STREAM_TRAIN, 1000 + i),
                n_classes=ctx.dataset.label_classes(task),
            )
            out[task] = {"accuracy": ctx.test_accuracy(model, task)}
        return out

    objective, strategy = {
        METHOD_NTP_LAST: ("ntp", STRATEGY_LAST_TOKEN),
        METHOD_NTP_AVG: ("ntp", STRATEGY_MEAN_TOKENS),
        METHOD_NTP_CLS: ("ntp", STRATEGY_CLS),
        METHOD_COLES: ("coles", STRATEGY_LAST_TOKEN),
        METHOD_NTP_HT: ("ht", STRATEGY_HT),
    }[method]
    for task in ctx.tasks:
        out[task] = ctx.downstream_metrics(objective, seed, strategy, task)
    return out


def run_experiment(cfg, context=None):
    """Execute every configured method x seed cell and write the report."""
    t0 = time.time()
    ctx = context or ExperimentContext(cfg)
    report = MetricsReport(fingerprint=cfg.fingerprint(), config=cfg.to_dict())
    for method in cfg.method_list():
        for seed in cfg.seed_list():
            log.info("running %s seed %d", method, seed)
            try:
                metrics = run_method(ctx, method, seed)
            except Exception as exc:
                raise RuntimeError(f"stage {method!r} (seed {seed}) failed: {exc}") from exc
            for task, values in metrics.items():
                for metric, value in values.items():
                    report.add(method, task, seed, metric, value)
    report.finalize_medians()
    report.wall_clock = time.time() - t0
    report.write(cfg.out_dir)
    return report


# -- parameter sweeps -----------------------------------------------------------------


def sweep(cfg, f_values=(0.0, 0.05, 0.1, 0.2, 0.5), p_values=(0.0, 0.25, 0.5, 0.75, 1.0),
          out_dir=None):
    """1-D ablations over insertion frequency and application probability.

    Each cell is a full ntp-ht run; the combined table has one row per
    (parameter, value, task, seed, metric).
    """
    out_dir = out_dir or cfg.out_dir
    rows = []
    cells = [("f", v) for v in f_values] + [("p", v) for v in p_values]
    for param, value in cells:
        override = {"ht_frequency": value} if param == "f" else {"ht_probability": value}
        cell_cfg = replace(
            cfg, methods=METHOD_NTP_HT,
            out_dir=os.path.join(out_dir, f"{param}={value:g}"), **override,
        )
        report = run_experiment(cell_cfg)
        for row in report.rows:
            if row["seed"] == "median":
                continue
            rows.append({"param": param, "param_value": value, **row})

    os.makedirs(out_dir, exist_ok=True)
    lines = ["param,param_value,method,task,seed,metric,value"]
    for row in rows:
        lines.append(
            f"{row['param']},{row['param_value']:g},{row['method']},{row['task']},"
            f"{row['seed']},{row['metric']},{row['value']!r}"
        )
    text = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write(text)
    return rows
