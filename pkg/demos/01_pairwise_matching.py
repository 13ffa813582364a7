# %% [markdown]
# Pairwise matching of two independently trained MLPs.
# Train two spiral classifiers from different seeds, align the second onto the
# first with Frank-Wolfe, and compare the loss along the straight line between them.

# %%
from cyclemerge import SyntheticSpec, TrainConfig, fw_match_pair, loss_barrier, make_dataset, train_mlp
from cyclemerge.model import apply_permutations

split = make_dataset(SyntheticSpec("spirals", 1000, 2, 2, 0.05, 0))
dims = [2, 64, 64, 32, 2]
a = train_mlp(split.train, dims, TrainConfig(epochs=200, batch_size=50, lr=0.05, seed=1))
b = train_mlp(split.train, dims, TrainConfig(epochs=200, batch_size=50, lr=0.05, seed=2))

# %%
match = fw_match_pair(a, b)
print("FW iterations:", match.trace.iterations, "converged:", match.trace.converged)
print("objective per iteration:", [round(v, 2) for v in match.trace.objective_per_iter[:6]], "...")

# %% the matched permutations map b onto a
b_aligned = apply_permutations(b, match.perms)
naive = loss_barrier(a, b, split.test)
aligned = loss_barrier(a, b_aligned, split.test)
print(f"barrier naive   {naive.test_barrier:.4f}")
print(f"barrier aligned {aligned.test_barrier:.4f}")

# %%
for lam, l0, l1 in zip(naive.lambdas[::4], naive.losses[::4], aligned.losses[::4]):
    print(f"lambda {lam:.2f}  naive {l0:.3f}  aligned {l1:.3f}")
