"""Recall@K, mAP and the micro-averaged PR curve on a small gallery."""
# %%
import numpy as np

from retrieval_lab import retrieval as R

# five points on the unit circle, two classes
deg = np.deg2rad([0, 35, 15, 90, 80])
feats = np.stack([np.cos(deg), np.sin(deg)], axis=1)
labels = [0, 0, 1, 1, 0]
index = R.RetrievalIndex.build(feats, labels)

# each row: for that query, same-class flags in rank order
print(index.relevance().astype(int))
print("Recall@K", R.recall_at_k(index, (1, 2, 4)))
print("AP per query", R.average_precisions(index).round(4))
print("mAP", R.mean_average_precision(index))
for rec, prec in R.pr_curve(index):
    print(f"recall {rec:.3f} precision {prec:.3f}")
