# %% [markdown]
# Merging three models through a shared universe, with and without REPAIR,
# against plain weight averaging and the iterative merge-many baseline.

# %%
from cyclemerge import (SyntheticSpec, TrainConfig, c2m3_merge, loss_and_accuracy, make_dataset,
                        map_to_universe, merge_many, naive_merge, repair, train_mlp)

split = make_dataset(SyntheticSpec("spirals", 1000, 2, 2, 0.05, 0))
dims = [2, 64, 64, 32, 2]
models = [train_mlp(split.train, dims, TrainConfig(epochs=200, batch_size=50, lr=0.05, seed=s))
          for s in (1, 2, 3)]
for i, m in enumerate(models):
    print(f"model {i}: test acc {loss_and_accuracy(m, split.test).accuracy:.3f}")

# %%
merged, match = c2m3_merge(models)
universe = [map_to_universe(m, p) for m, p in zip(models, match.perms)]
repaired = repair(merged, universe, split.train)

candidates = {
    "naive average": naive_merge(models),
    "merge-many": merge_many(models, seed=0),
    "c2m3": merged,
    "c2m3 + repair": repaired,
}
for name, m in candidates.items():
    res = loss_and_accuracy(m, split.test)
    print(f"{name:14s} loss {res.loss:.4f}  acc {res.accuracy:.3f}")
