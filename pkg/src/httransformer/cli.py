"""Command-line entry points.

Subcommands: gen-toy, pretrain, finetune, embed, classify, evaluate, run,
sweep, and ``masks dump``.  The ``run``/``sweep`` commands accept a flat JSON
config file; every config key is also exposed as a ``--key value`` flag that
overrides the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import masks as masks_mod
from . import pipeline
from .experiments import ExperimentConfig, derived_seed, load_config, run_experiment, sweep
from .httokens import HTConfig
from .model import load_model, save_model
from .pipeline import TrainConfig, extract_embeddings, finetune, make_batches, pretrain
from .seqdata import (
    load_dataset,
    load_schema,
    save_dataset,
    save_schema,
    split_dataset,
    split_indices,
)
from .toygen import ToyConfig, generate_dataset


def _add_config_flags(parser):
    for f in dataclasses.fields(ExperimentConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                            metavar="V", help=f"override config key {f.name}")


def _collect_overrides(args):
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def _cmd_gen_toy(args):
    cfg = ToyConfig(
        num_matrices=args.num_matrices,
        label_vocab=args.label_vocab,
        parts_range=(args.parts_min, args.parts_max),
        segment_length_range=(args.segment_min, args.segment_max),
        num_sequences=args.num_sequences,
        seed=args.seed,
    )
    dataset, _ = generate_dataset(cfg)
    save_dataset(args.out, dataset)
    save_schema(args.schema_out, dataset.schema)
    print(f"wrote {len(dataset)} sequences to {args.out} (schema: {args.schema_out})")


def _experiment_context(args):
    overrides = _collect_overrides(args)
    return load_config(getattr(args, "config", None), overrides)


def _cmd_run(args):
    cfg = _experiment_context(args)
    report = run_experiment(cfg)
    print(report.summary_text())
    print(f"artifacts in {cfg.out_dir}")


def _cmd_sweep(args):
    cfg = _experiment_context(args)
    f_values = [float(x) for x in args.sweep_f.split(",")] if args.sweep_f else (0.0, 0.05, 0.1, 0.2, 0.5)
    p_values = [float(x) for x in args.sweep_p.split(",")] if args.sweep_p else (0.0, 0.25, 0.5, 0.75, 1.0)
    rows = sweep(cfg, f_values, p_values)
    print(f"{len(rows)} sweep rows written to {cfg.out_dir}/sweep.csv")


def _train_config_from_args(args, objective):
    ht_config = None
    if getattr(args, "ht", False):
        ht_config = HTConfig(
            frequency=args.ht_frequency,
            probability=args.ht_probability,
            placement=args.ht_placement,
            selection=args.ht_selection,
        )
    return TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        patience=args.patience,
        max_len=args.max_len,
        sft_epochs=getattr(args, "sft_epochs", 20),
        objective=objective,
        ht_config=ht_config,
    )


def _load_splits(args):
    dataset = load_dataset(args.data, load_schema(args.schema))
    fractions = tuple(float(x) for x in args.fractions.split(","))
    return dataset, split_dataset(dataset, fractions, args.split_seed)


def _cmd_pretrain(args):
    from .encoder import EmbedderConfig
    from .model import SequenceModel, TransformerConfig
    from .seqdata import compute_time_stats

    dataset, (train, val, _) = _load_splits(args)
    m, big = compute_time_stats(train)
    model = SequenceModel(
        dataset.schema,
        TransformerConfig(layers=args.layers, d_model=args.d_model, heads=args.heads,
                          ff_dim=args.ff_dim, dropout=args.dropout),
        EmbedderConfig(d_model=args.d_model, cat_dim=args.cat_dim, m=m, M=big),
        seed=derived_seed(args.seed, 0),
    )
    cfg = _train_config_from_args(args, args.objective)
    result = pretrain(model, train, val, cfg, seed=derived_seed(args.seed, 1))
    save_model(args.out, model, extra_meta={"best_val": result.best_val,
                                            "best_epoch": result.best_epoch})
    print(f"pretrained ({args.objective}) best val {result.best_val:.5f} "
          f"at epoch {result.best_epoch}; checkpoint: {args.out}")


def _cmd_finetune(args):
    dataset, (train, val, _) = _load_splits(args)
    model, _ = load_model(args.ckpt)
    cfg = _train_config_from_args(args, "ntp")
    result = finetune(model, train, val, args.task, cfg, seed=derived_seed(args.seed, 2),
                      n_classes=dataset.label_classes(args.task))
    save_model(args.out, model, extra_meta={"task": args.task, "best_val": result.best_val})
    print(f"finetuned on {args.task!r}: best val accuracy {result.best_val:.4f}; "
          f"checkpoint: {args.out}")


def _cmd_embed(args):
    model, _ = load_model(args.ckpt)
    dataset = load_dataset(args.data, load_schema(args.schema))
    embset = extract_embeddings(model, dataset, args.strategy,
                                batch_size=args.batch_size, max_len=args.max_len)
    pipeline.save_embeddings(args.out, embset)
    print(f"wrote {len(embset)} embeddings ({args.strategy}) to {args.out}")


def _cmd_classify(args):
    embset = pipeline.load_embeddings(args.embeddings)
    if args.task not in embset.labels:
        raise SystemExit(f"task {args.task!r} not present in {args.embeddings}")
    fractions = tuple(float(x) for x in args.fractions.split(","))
    tr, _, te = split_indices(embset.ids, fractions, args.split_seed)
    labels = embset.labels[args.task]
    clf = pipeline.train_downstream(embset.vectors[tr], labels[tr], seed=args.seed, l2=args.l2)
    acc = clf.accuracy(embset.vectors[te], labels[te])
    print(f"test accuracy: {acc:.4f}  (train n={len(tr)}, test n={len(te)})")
    if int(np.max(labels[tr])) + 1 == 2:
        auc = pipeline.roc_auc(clf.predict_proba(embset.vectors[te])[:, 1], labels[te])
        print(f"test roc auc: {auc:.4f}")


def _cmd_evaluate(args):
    from .objectives import LossWeights

    model, _ = load_model(args.ckpt)
    dataset = load_dataset(args.data, load_schema(args.schema))
    batches = make_batches(dataset, args.batch_size, args.max_len, seed=0, shuffle=False)
    if args.task:
        acc = pipeline.classification_accuracy(model, batches, args.task)
        print(f"accuracy[{args.task}]: {acc:.4f}")
    else:
        loss = pipeline.evaluate_ntp(model, batches, LossWeights())
        print(f"next-event loss: {loss:.5f}")


def _cmd_masks_dump(args):
    tag_map = {"E": masks_mod.TAG_EVENT, "H": masks_mod.TAG_HISTORY, "P": masks_mod.TAG_PAD}
    try:
        tags = np.array([tag_map[c] for c in args.tags.upper()], dtype=np.int8)
    except KeyError as exc:
        raise SystemExit(f"bad tag {exc}; use characters E, H, P") from exc
    n = len(tags)
    event_index = np.full(n, -1, dtype=np.int64)
    event_index[tags == masks_mod.TAG_EVENT] = np.arange(int((tags == masks_mod.TAG_EVENT).sum()))
    layout = masks_mod.TokenLayout(tags, event_index, np.arange(n, dtype=np.float64))
    if (tags == masks_mod.TAG_HISTORY).any():
        mask = masks_mod.ht_mask(layout, args.strategy, np.random.default_rng(args.seed))
    else:
        mask = masks_mod.causal_mask(layout)
    print(masks_mod.render_mask(mask, layout))


def _add_common_train_flags(p):
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--max-len", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--split-seed", type=int, default=13)


def build_parser():
    parser = argparse.ArgumentParser(prog="htt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate the synthetic Markov dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--schema-out", required=True)
    p.add_argument("--num-sequences", type=int, default=1000)
    p.add_argument("--num-matrices", type=int, default=10)
    p.add_argument("--label-vocab", type=int, default=8)
    p.add_argument("--parts-min", type=int, default=1)
    p.add_argument("--parts-max", type=int, default=5)
    p.add_argument("--segment-min", type=int, default=30)
    p.add_argument("--segment-max", type=int, default=70)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_toy)

    p = sub.add_parser("pretrain", help="unsupervised pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--objective", choices=["ntp", "coles"], default="ntp")
    p.add_argument("--ht", action="store_true", help="inject history tokens during pretraining")
    p.add_argument("--ht-frequency", type=float, default=0.1)
    p.add_argument("--ht-probability", type=float, default=0.5)
    p.add_argument("--ht-placement", choices=["uniform", "bias-end"], default="bias-end")
    p.add_argument("--ht-selection", choices=["last", "random"], default="random")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ff-dim", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--cat-dim", type=int, default=16)
    _add_common_train_flags(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sft-epochs", type=int, default=20)
    _add_common_train_flags(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("embed", help="extract sequence embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--strategy", choices=["ht", "cls", "last", "mean"], default="ht")
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-len", type=int, default=400)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("classify", help="train/evaluate the downstream classifier")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--split-seed", type=int, default=13)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--l2", type=float, default=1e-3)
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", default="")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-len", type=int, default=400)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="run a full experiment from a config file")
    p.add_argument("--config", default=None)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="frequency/probability ablation sweep")
    p.add_argument("--config", default=None)
    p.add_argument("--sweep-f", default="", help="comma list of frequencies")
    p.add_argument("--sweep-p", default="", help="comma list of probabilities")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("masks", help="mask utilities")
    masks_sub = p.add_subparsers(dest="masks_command", required=True)
    d = masks_sub.add_parser("dump", help="print a 0/1 attention grid for a layout")
    d.add_argument("--tags", required=True, help="layout string, e.g. EEHEE")
    d.add_argument("--strategy", choices=["last", "random"], default="last")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=_cmd_masks_dump)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
