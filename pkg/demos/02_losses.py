"""The objective terms on hand-sized inputs."""
# %%
import numpy as np

from retrieval_lab import losses as L

# cross-entropy over the new-class columns only
print("CE([[1, 2]], label 1) =", L.cross_entropy_new_classes([[1.0, 2.0]], [1]).item())

# batch-hard triplet: per anchor, hardest positive and hardest negative
feats = np.array([[1.0, 0.0], [0.6, 0.8], [1.0, 0.0], [0.0, 1.0]])
print("triplet terms", L.triplet_terms(feats, [0, 0, 1, 1]).data)

# %% distillation against softened frozen outputs; equal logits give the entropy
frozen = np.array([[2.0, 0.0], [0.5, 1.5]])
print("dist(frozen, frozen) =", L.distillation(frozen, frozen).item(),
      " entropy =", L.soft_target_entropy(frozen))
print("dist(frozen, swapped) =", L.distillation(frozen, frozen[:, ::-1]).item())

# %% MMD between two feature batches, median-heuristic bandwidths
rng = np.random.default_rng(1)
r = rng.normal(size=(16, 4))
print("MMD(R, R) =", L.mmd_loss(r, r).item())
for shift in (0.0, 0.5, 1.0, 2.0):
    print(f"MMD(R, N(shift={shift})) =", round(L.mmd_loss(r, rng.normal(size=(16, 4)) + shift).item(), 4))
