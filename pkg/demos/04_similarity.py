# %% [markdown]
# Weight and representation similarity before and after mapping to the universe.
# Weight cosine rises sharply; CKA is untouched because permuting neurons is orthogonal.

# %%
import numpy as np

from cyclemerge import SyntheticSpec, TrainConfig, fw_match_multi, make_dataset, similarity_report, train_mlp
from cyclemerge.evaluation import pairwise_merge_matrix, probe_batch

split = make_dataset(SyntheticSpec("spirals", 1000, 2, 2, 0.05, 0))
dims = [2, 64, 64, 32, 2]
models = [train_mlp(split.train, dims, TrainConfig(epochs=200, batch_size=50, lr=0.05, seed=s))
          for s in (1, 2, 3)]
match = fw_match_multi(models)

# %%
report = similarity_report(models, match, probe_batch(split.test, seed=0))
for metric in ("weight_cosine", "cka_layer0", "cka_layer2"):
    before = np.mean(list(report.values(metric, "before").values()))
    after = np.mean(list(report.values(metric, "after").values()))
    print(f"{metric:14s} before {before:.4f}  after {after:.4f}")

# %% midpoint accuracy for every pair
tables = pairwise_merge_matrix(models, match, split.test)
print("before\n", tables["before"].round(3))
print("after\n", tables["after"].round(3))
