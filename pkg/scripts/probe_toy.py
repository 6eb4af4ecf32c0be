"""One-seed probe of the toy benchmark: per-method accuracy and timing."""

import logging
import sys
import time

from httransformer.experiments import ExperimentConfig, ExperimentContext, run_method

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", datefmt="%H:%M:%S")


def main():
    import os
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 800
    seg_min = int(sys.argv[2]) if len(sys.argv) > 2 else 30
    seg_max = int(sys.argv[3]) if len(sys.argv) > 3 else 70
    epochs = int(sys.argv[4]) if len(sys.argv) > 4 else 4
    sup_epochs = int(sys.argv[5]) if len(sys.argv) > 5 else 6
    seed = int(sys.argv[6]) if len(sys.argv) > 6 else 0

    import os
    cfg = ExperimentConfig(
        toy_num_sequences=n,
        toy_segment_min=seg_min,
        toy_segment_max=seg_max,
        toy_dirichlet_alpha=float(os.environ.get("ALPHA", 0.3)),
        toy_label_vocab=int(os.environ.get("VOCAB", 8)),
        coles_slice_max=int(os.environ.get("SLICE_MAX", 25)),
        epochs=epochs,
        patience=int(os.environ.get("PATIENCE", 2)),
        supervised_epochs=sup_epochs,
        sft_patience=int(os.environ.get("SFT_PATIENCE", 3)),
        dropout=float(os.environ.get("DROPOUT", 0.1)),
        max_len=400,
        seeds=str(seed),
        out_dir="/tmp/probe",
    )
    methods = os.environ.get("METHODS", "ntp-last,ntp-avg,ntp-cls,ntp-ht,coles,supervised").split(",")
    ctx = ExperimentContext(cfg)
    print(f"train/val/test = {len(ctx.train)}/{len(ctx.val)}/{len(ctx.test)}")
    for method in methods:
        t0 = time.time()
        out = run_method(ctx, method, seed)
        acc = {task: round(v["accuracy"], 3) for task, v in out.items()}
        print(f"{method:<12} {acc}  [{time.time() - t0:.0f}s]", flush=True)


if __name__ == "__main__":
    main()
