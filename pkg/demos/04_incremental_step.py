"""Stage A on 8 original classes, then one step adding 8 new classes.

Compares fine-tuning with the frozen-teacher objective (distillation + MMD)
on one seed of the default synthetic dataset. Takes about half a minute.
"""
# %%
from dataclasses import replace

from retrieval_lab.datagen import generate_synthetic, split_schedule
from retrieval_lab.trainer import TrainConfig, prepare_stage_a, run_one_step, stage_a_report

data = split_schedule(generate_synthetic(seed=0), original_count=8, group_sizes=[8])
print(data.manifest())

config = TrainConfig(seed=0)
stage_a = prepare_stage_a(data, config)
initial = stage_a_report(data, stage_a, config)["groups"]["original"]["recall"]["1"]
print(f"initial model, original classes: Recall@1 {initial:.3f}")

# %% each arm starts from the same stage-A net
for method in ("finetune", "lwf", "ours", "l2feat"):
    report = run_one_step(data, replace(config, method=method), stage_a=stage_a, with_pr=False)
    g = report["groups"]
    print(f"{method:9s} old Recall@1 {g['original']['recall']['1']:.3f}  "
          f"new Recall@1 {g['new1']['recall']['1']:.3f}  "
          f"first-batch mmd {report['first_batch']['mmd']:.1e}")
