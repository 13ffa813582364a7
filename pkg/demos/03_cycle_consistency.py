# %% [markdown]
# Composing maps around a loop of models. Universe matching gives pairwise maps
# that compose to the identity by construction; independent pairwise matches do not.

# %%
import itertools

from cyclemerge import SyntheticSpec, TrainConfig, coordinate_descent_match, cycle_error, fw_match_multi, make_dataset, train_mlp
from cyclemerge.evaluation import pairwise_cycle_matches

split = make_dataset(SyntheticSpec("spirals", 1000, 2, 2, 0.05, 0))
dims = [2, 32, 32, 2]
models = [train_mlp(split.train, dims, TrainConfig(epochs=100, batch_size=50, lr=0.05, seed=s))
          for s in range(4)]

# %%
universe = fw_match_multi(models)
edges = [(p, q) for p, q in itertools.permutations(range(4), 2)]
pairwise = pairwise_cycle_matches(models, lambda a, b: coordinate_descent_match(a, b, seed=0), edges)

# %%
for cyc in ([0, 1, 0], [0, 1, 2, 0], [0, 1, 2, 3, 0], [3, 1, 0, 2, 3]):
    print(f"cycle {cyc}: universe {cycle_error(models, universe, cyc):.4f}   "
          f"pairwise {cycle_error(models, pairwise, cyc):.4f}")
