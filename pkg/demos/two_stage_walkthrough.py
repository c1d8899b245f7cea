"""End-to-end walkthrough on a small synthetic set, using the library API.

    python3 demos/two_stage_walkthrough.py [--records 16] [--steps 500]

Builds a base model, runs both training stages, generates the EEG-only and
saliency-guided arms and prints a metric comparison. With the defaults it
takes a few minutes on a laptop CPU.
"""

import argparse
import time

import numpy as np
import torch

from eegsal import StageConfig, SyntheticSpec, generate_synthetic, run_stage1, run_stage2
from eegsal.evaluation import comparison_table, default_extractors, evaluate_run, saliency_cc
from eegsal.pipeline import desk_model_config
from eegsal.saliency import spectral_residual
from eegsal.training import PretrainConfig, synthetic_base


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--records", type=int, default=16)
    ap.add_argument("--steps", type=int, default=500, help="steps per training stage")
    ap.add_argument("--pretrain-steps", type=int, default=None, help="default: 2000 AE / 1500 UNet")
    args = ap.parse_args()
    torch.set_num_threads(4)
    t0 = time.time()

    ds = generate_synthetic(SyntheticSpec(n_records=args.records), seed=0)
    print(f"dataset: {len(ds)} records, EEG {ds.channels}x{ds.samples}, images {ds.height}x{ds.width}")

    # stand-in for a pretrained generator, fitted on a disjoint synthetic set
    pcfg = PretrainConfig()
    if args.pretrain_steps:
        pcfg = PretrainConfig(ae_steps=args.pretrain_steps, unet_steps=args.pretrain_steps)
    pipe, base = synthetic_base(desk_model_config(), pcfg)
    print(f"base model ready ({time.time() - t0:.0f}s), hash {base.hash[:12]}")

    pipe.inject_lora(seed=0)
    s1 = run_stage1(pipe, ds, StageConfig.desk(1, total_steps=args.steps))
    eeg_only = pipe.generate(ds.eeg(), seed=0)

    s2 = run_stage2(pipe, ds, s1, StageConfig.desk(2, total_steps=args.steps))
    guided = pipe.generate(ds.eeg(), ds.saliency_maps(), seed=0)
    for name, ck in (("stage 1", s1), ("stage 2", s2)):
        trace = [r[1] for r in ck.meta["loss_trace"]]
        print(f"{name}: loss {np.mean(trace[:50]):.4f} -> {np.mean(trace[-50:]):.4f}")

    maps = ds.saliency_maps()
    n = len(ds)
    for name, imgs in (("eeg-only", eeg_only), ("guided", guided)):
        sal = [spectral_residual(x) for x in imgs]
        matched = np.mean([saliency_cc(sal[i], maps[i]) for i in range(n)])
        other = np.mean([saliency_cc(sal[i], maps[(i + 1) % n]) for i in range(n)])
        print(f"{name:9s} saliency CC: own map {matched:.3f}, another record's map {other:.3f}")

    gts = list(ds.images())
    reports = {name: evaluate_run(list(imgs), gts, "dataset", default_extractors(), ids=ds.ids,
                                  gt_maps=list(maps))
               for name, imgs in (("eeg-only", eeg_only), ("guided", guided))}
    print(comparison_table(reports), end="")
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
