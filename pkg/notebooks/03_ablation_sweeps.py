# %% [markdown]
# # Iteration and epsilon ablations
#
# Each row is a fresh alignment run from the same seed; only the swept
# value changes.

# %%
from otalign.pipeline import AlignmentConfig, SyntheticDatasetConfig, gen_synthetic, sweep_epsilon, sweep_iters

data = gen_synthetic(SyntheticDatasetConfig(num_samples=200, seed=1))
base = AlignmentConfig(epochs=10, eval_every=10)

# %%
iters = sweep_iters(data, [1, 5, 20, 100], base)
for row in iters.rows:
    print(f"t={row['iters']:<4} violation={row['marginal_violation']:.2e} "
          f"d_OT={row['d_ot']:.4f} silhouette={row['silhouette']:.3f}")

# %% [markdown]
# More iterations, tighter marginals. The CSV is the artifact to plot.

# %%
iters.to_csv("sweep_iters.csv")
print(open("sweep_iters.csv").read())

# %%
eps = sweep_epsilon(data, [0.5, 0.1, 0.02], base)
for row in eps.rows:
    print(f"eps={row['epsilon']:<5} <T,C>={row['linear_term']:.4f} "
          f"silhouette={row['silhouette']:.3f} CE F1={row['ce_f1']:.3f}")
