"""Parameter files and embedding export, then metrics from the exported CSV."""
# %%
import tempfile
from pathlib import Path

import numpy as np

from retrieval_lab.datagen import generate_synthetic, split_schedule
from retrieval_lab.embednet import load_params, parameter_distance, save_params
from retrieval_lab.retrieval import evaluate, export_embeddings
from retrieval_lab.trainer import TrainConfig, train_stage_a

data = split_schedule(generate_synthetic(seed=2), 8, [8])
net = train_stage_a(data, TrainConfig(epochs=40, seed=2)).net

out = Path(tempfile.mkdtemp())
save_params(net, out / "stage_a.incr")
back = load_params(out / "stage_a.incr")
print("reloaded, parameter distance", parameter_distance(net, back))

# %% export test-split features; `retrieval-lab eval-csv` reads the same file
test = data.view(data.groups[0], "test")
path = export_embeddings(back, test.x, test.y, out / "emb.csv")
print(path)
print(evaluate(np.loadtxt(path, delimiter=",", skiprows=1)[:, 1:], test.y, with_pr=False))
