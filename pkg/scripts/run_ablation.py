"""Train every combination of the four ablation switches and tabulate fusion metrics.

    python scripts/run_ablation.py --steps 20 --out runs/ablation.jsonl
"""

import argparse
import itertools
import json
from pathlib import Path

import torch

from dualfuse.evaluate import eval_fusion, region_report
from dualfuse.synth import SynthConfig, make_pair
from dualfuse.trainloop import TrainConfig, train

SWITCHES = ("use_dt_critic", "use_dd_critic", "use_sdw", "use_mask")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--strategy", choices=["dt", "tt", "ct"], default="ct")
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/ablation.jsonl"))
    args = ap.parse_args()
    torch.set_num_threads(1)
    args.out.parent.mkdir(parents=True, exist_ok=True)

    train_set = [make_pair(SynthConfig(seed=1), i) for i in range(64)]
    val = [make_pair(SynthConfig(seed=2, split="val"), i) for i in range(20)]
    with args.out.open("w") as fh:
        for flags in itertools.product([True, False], repeat=4):
            switches = dict(zip(SWITCHES, flags))
            cfg = TrainConfig(strategy=args.strategy, max_steps=args.steps, seed=args.seed, **switches)
            state = train(cfg, train_set)
            agg = eval_fusion(val, state.generator).aggregates
            reg = region_report(val, state.generator)
            row = {**switches, "mi": agg["mi"]["mean"], "en": agg["en"]["mean"], "sd": agg["sd"]["mean"],
                   "contrast": reg["mean_contrast"], "final_loss": state.history[-1]["total_fusion"]}
            fh.write(json.dumps(row) + "\n")
            on = ",".join(k[4:] for k, v in switches.items() if v) or "none"
            print(f"{on:<28} MI {row['mi']:.3f}  EN {row['en']:.3f}  contrast {row['contrast']:.3f}")


if __name__ == "__main__":
    main()
