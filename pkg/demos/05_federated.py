# %% [markdown]
# A small federated run: five clients start from different random inits and
# the server either averages them directly or matches them first.

# %%
from cyclemerge import FedConfig, SyntheticSpec, TrainConfig, make_dataset, run_simulation

split = make_dataset(SyntheticSpec("spirals", 2000, 2, 2, 0.05, 0))
dims = [2, 64, 64, 32, 2]
train = TrainConfig(epochs=0, batch_size=10, lr=0.05, seed=0)

runs = {}
for agg in ("fedavg", "c2m3"):
    cfg = FedConfig(n_clients=5, rounds=10, local_epochs=5, aggregator=agg, train=train)
    runs[agg] = run_simulation(split.train, split.test, dims, cfg)

# %%
print("round  fedavg  c2m3")
for r_avg, r_c in zip(runs["fedavg"], runs["c2m3"]):
    print(f"{r_avg.round:5d}  {r_avg.accuracy:.3f}   {r_c.accuracy:.3f}")

# %% with a shared init the matcher returns identities and both aggregators agree
same = {agg: run_simulation(split.train, split.test, dims,
                            FedConfig(n_clients=5, rounds=1, local_epochs=5, same_init=True,
                                      aggregator=agg, train=train))[0]
        for agg in ("fedavg", "c2m3")}
print("shared init, identity perms:", same["c2m3"].identity_perms,
      " same global model:", same["c2m3"].global_model.equals(same["fedavg"].global_model))
