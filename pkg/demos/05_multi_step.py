"""Adding four groups of two classes one at a time.

After each step the trained net becomes the next frozen teacher. Prints the
original-class Recall@1 after every step for three arms (about a minute).
"""
# %%
from dataclasses import replace

from retrieval_lab.datagen import generate_synthetic, split_schedule
from retrieval_lab.trainer import TrainConfig, prepare_stage_a, run_multi_step, stage_a_report

data = split_schedule(generate_synthetic(seed=0), original_count=8, group_sizes=[2, 2, 2, 2])
config = TrainConfig(seed=0)
stage_a = prepare_stage_a(data, config)
initial = stage_a_report(data, stage_a, config)["groups"]["original"]["recall"]["1"]

# %%
for method in ("finetune", "l2feat", "ours"):
    reports = run_multi_step(data, replace(config, method=method), stage_a=stage_a, with_pr=False)
    curve = [initial] + [r["groups"]["original"]["recall"]["1"] for r in reports]
    print(f"{method:9s}", " -> ".join(f"{v:.3f}" for v in curve))
