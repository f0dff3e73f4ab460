# %% [markdown]
# # Aligning image and label features
#
# Generate the synthetic set, train with and without the OT term, and look
# at the transport distance, the cluster score of the projected patches, and
# a linear probe on the pooled features.

# %%
import numpy as np

from otalign.pipeline import (
    AlignmentConfig,
    SyntheticDatasetConfig,
    gen_synthetic,
    nearest_centroid_accuracy,
    pooled_features,
    split_indices,
    train_alignment,
)
from otalign.pipeline.train import probe_ce_f1

data = gen_synthetic(SyntheticDatasetConfig(seed=0))
len(data), data.image_rows.shape, nearest_centroid_accuracy(data)

# %% [markdown]
# The raw patches are separable by disease, but a per-image nuisance offset
# dominates distances, so the raw cluster score is low.

# %%
from otalign.pipeline import silhouette

X = data.image_rows.reshape(-1, data.config.image_dim)
silhouette(X, data.patch_disease.reshape(-1))

# %%
runs = {}
for lam in (1.0, 0.0):
    runs[lam] = train_alignment(data, AlignmentConfig(lam=lam, eval_every=10))

for lam, (state, hist) in runs.items():
    print(f"lambda={lam}: d_OT {hist.d_ot[0]:.3f} -> {hist.d_ot[-1]:.3f}, "
          f"silhouette {hist.initial['silhouette']:.3f} -> {hist.silhouette[-1]:.3f}")

# %% [markdown]
# The OT term pulls each patch towards the label embedding of its disease,
# which is what lifts the cluster score. The report loss alone barely
# touches the image head.
#
# The held-out probe is a different story: with a linear head and a linear
# probe, both runs separate the diseases perfectly on this easy set.

# %%
tr, _, te = split_indices(len(data), 0)
for lam, (state, hist) in runs.items():
    f1 = probe_ce_f1(pooled_features(state, data), data, tr, te, AlignmentConfig().probe)
    print(f"lambda={lam}: held-out CE F1 {f1:.3f}")

# %% [markdown]
# Training curve of the aligned run.

# %%
hist = runs[1.0][1]
for row in hist.rows()[::5]:
    print(", ".join(f"{k}={v:.4g}" for k, v in row.items()))
