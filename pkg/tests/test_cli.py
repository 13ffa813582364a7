import csv
import io
import json

import pytest

from cyclemerge.cli import main
from cyclemerge.evaluation import cycle_error
from cyclemerge.matching import load_match, pairwise_objective
from cyclemerge.model import apply_permutations, load_model, loss_and_accuracy, random_mlp, save_model
from cyclemerge.perm import Permutation
from cyclemerge.training import SyntheticSpec, make_dataset, write_csv_dataset

SMALL = ["--dims", "2,12,10,2", "--epochs", "15", "--n-samples", "300"]


def run(argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def trio(tmp_path_factory):
    d = tmp_path_factory.mktemp("trio")
    paths = []
    for seed in (1, 2, 3):
        p = d / f"m{seed}.json"
        assert main(["train", *SMALL, "--seed", str(seed), "--out", str(p)]) == 0
        paths.append(p)
    return d, paths


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_train_reference_invocation_is_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run(["train", "--spec", "spirals", "--dims", "2,64,64,32,2", "--seed", 1, "--out", a]) == 0
    assert "test loss" in capsys.readouterr().out
    assert run(["train", "--spec", "spirals", "--dims", "2,64,64,32,2", "--seed", 1, "--out", b]) == 0
    assert load_model(a).dims == [2, 64, 64, 32, 2]
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("dims", ["2,x,2", "2", "2,0,2", ""])
def test_train_bad_dims_is_usage_error(tmp_path, dims):
    assert run(["train", "--dims", dims, "--out", tmp_path / "m.json"]) == 2


def test_train_from_csv(tmp_path):
    split = make_dataset(SyntheticSpec("gaussian_blobs", 120, 3, 2, 0.3, 0))
    write_csv_dataset(split.train, tmp_path / "train.csv", label_column="y")
    out = tmp_path / "m.json"
    assert run(["train", "--dims", "2,8,3", "--epochs", 3, "--data", tmp_path / "train.csv",
                "--label-column", "y", "--out", out]) == 0
    assert load_model(out).dims == [2, 8, 3]


def test_missing_file_is_runtime_error(tmp_path, capsys):
    assert run(["match", tmp_path / "nope.json", tmp_path / "nope2.json"]) == 1
    assert "error:" in capsys.readouterr().err


def test_architecture_mismatch_is_runtime_error(tmp_path, rng):
    save_model(random_mlp([2, 4, 2], rng), tmp_path / "a.json")
    save_model(random_mlp([2, 5, 2], rng), tmp_path / "b.json")
    assert run(["match", tmp_path / "a.json", tmp_path / "b.json", "--mode", "pair"]) == 1


def test_match_identical_pair_hits_self_bound(trio, tmp_path):
    _, paths = trio
    out = tmp_path / "p.json"
    assert run(["match", paths[0], paths[0], "--mode", "pair", "--out", out]) == 0
    doc = json.loads(out.read_text())
    assert doc["objective"] == pytest.approx(doc["self_bound"]["A"], rel=1e-12)
    assert doc["provenance"]["seed"] == 0
    assert "objective_per_iter" in json.dumps(doc["trace"])


def test_match_universe_reports_zero_cycle_error(trio, tmp_path):
    _, paths = trio
    out = tmp_path / "u.json"
    assert run(["match", *paths, "--mode", "universe", "--seed", 4, "--out", out]) == 0
    doc = json.loads(out.read_text())
    assert doc["cycle_error"] == 0.0
    assert doc["provenance"]["seed"] == 4
    models = [load_model(p) for p in paths]
    assert cycle_error(models, load_match(out), [0, 2, 1, 0]) == 0.0


def test_match_coord_descent_seeds(trio, tmp_path):
    _, paths = trio
    outs = []
    for seed in (0, 1):
        out = tmp_path / f"cd{seed}.json"
        assert run(["match", paths[0], paths[1], "--mode", "coord-descent", "--seed", seed, "--out", out]) == 0
        outs.append(json.loads(out.read_text()))
    # the two traces may differ; each reported objective must match its permutations
    a, b = load_model(paths[0]), load_model(paths[1])
    for seed, doc in enumerate(outs):
        perms = load_match(tmp_path / f"cd{seed}.json").perms
        assert doc["objective"] == pytest.approx(pairwise_objective(a, b, perms), rel=1e-12)
        assert doc["provenance"]["seed"] == seed


def test_match_pair_needs_two(trio):
    _, paths = trio
    assert run(["match", *paths, "--mode", "pair"]) == 1


def test_merge_naive_single_model(trio, tmp_path):
    _, paths = trio
    out = tmp_path / "n.json"
    assert run(["merge", paths[0], "--strategy", "naive", "--out", out]) == 0
    assert load_model(out).equals(load_model(paths[0]))


def test_merge_subset_full_equals_c2m3(trio, tmp_path):
    _, paths = trio
    assert run(["match", *paths, "--mode", "universe", "--out", tmp_path / "u.json"]) == 0
    assert run(["merge", *paths, "--perms", tmp_path / "u.json", "--out", tmp_path / "a.json"]) == 0
    assert run(["merge", *paths, "--out", tmp_path / "b.json"]) == 0
    assert run(["merge", *paths, "--perms", tmp_path / "u.json", "--subset", "0,1,2",
                "--out", tmp_path / "c.json"]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "c.json").read_bytes()


def test_merge_planted_triple_matches_base(tmp_path, rng):
    base = random_mlp([2, 10, 8, 2], rng)
    paths = []
    for i in range(3):
        m = base if i == 0 else apply_permutations(base, [Permutation.random(n, rng) for n in base.perm_spec.sizes])
        paths.append(tmp_path / f"p{i}.json")
        save_model(m, paths[-1])
    out = tmp_path / "merged.json"
    assert run(["merge", *paths, "--strategy", "c2m3", "--out", out]) == 0
    test = make_dataset(SyntheticSpec("spirals", 300, 2, 2, 0.05, 0)).test
    assert abs(loss_and_accuracy(load_model(out), test).loss - loss_and_accuracy(base, test).loss) <= 1e-9


def test_merge_repair_and_merge_many(trio, tmp_path):
    _, paths = trio
    split = make_dataset(SyntheticSpec("spirals", 300, 2, 2, 0.05, 0))
    write_csv_dataset(split.train, tmp_path / "d.csv")
    assert run(["merge", *paths, "--repair", "--data", tmp_path / "d.csv", "--out", tmp_path / "r.json",
                "--report", tmp_path / "rep.json"]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["repair"]["n_endpoints"] == 3 and "provenance" in rep
    assert run(["merge", *paths, "--strategy", "merge-many", "--out", tmp_path / "mm.json"]) == 0
    assert load_model(tmp_path / "mm.json").dims == [2, 12, 10, 2]


def test_eval_barrier_self(trio, capsys):
    _, paths = trio
    assert run(["eval", paths[0], paths[0], "--report", "barrier", "--grid", 5, "--n-samples", 300]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert len(rows) == 5
    assert len({r["loss"] for r in rows}) == 1


def test_eval_cka_self_is_one(trio, capsys):
    _, paths = trio
    assert run(["eval", paths[0], "--report", "cka", "--n-samples", 300]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert rows and all(float(r["value"]) == pytest.approx(1.0, abs=1e-12) for r in rows)


def test_eval_perf_matrix_diagonal_matches_accuracy(trio, tmp_path, capsys):
    _, paths = trio
    data = ["--n-samples", 300]
    assert run(["eval", *paths, "--report", "accuracy", *data]) == 0
    acc = {r["model"]: float(r["accuracy"]) for r in read_csv(capsys.readouterr().out) if r["split"] == "test"}
    assert run(["eval", *paths, "--report", "perf-matrix", *data, "--json", tmp_path / "pm.json"]) == 0
    rows = read_csv(capsys.readouterr().out)
    for i, p in enumerate(paths):
        diag = [r for r in rows if r["stage"] == "before" and r["row"] == r["col"] == str(i)]
        assert float(diag[0]["value"]) == acc[str(p)]
    doc = json.loads((tmp_path / "pm.json").read_text())
    assert doc["provenance"]["command"] == "eval"


def test_eval_similarity_and_cycle_error(trio, tmp_path, capsys):
    _, paths = trio
    assert run(["eval", *paths, "--report", "similarity", "--n-samples", 300]) == 0
    assert read_csv(capsys.readouterr().out)[0].keys() == {"row", "col", "metric", "stage", "value"}
    assert run(["eval", *paths, "--report", "cycle-error", "--n-samples", 300, "--json", tmp_path / "c.json"]) == 0
    capsys.readouterr()
    assert json.loads((tmp_path / "c.json").read_text())["cycle_error"] == 0.0
    assert run(["eval", *paths, "--report", "cycle-error", "--matcher", "coord-descent",
                "--cycle", "0,1,2,0", "--n-samples", 300]) == 0
    assert float(read_csv(capsys.readouterr().out)[0]["error"]) >= 0.0


FED = ["--dims", "2,8,2", "--local-epochs", 2, "--n-samples", 200, "--batch-size", 20]


def test_fedsim_same_init_rows_equal(capsys):
    assert run(["fedsim", "--clients", 2, "--rounds", 1, "--same-init", *FED]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert [r["aggregator"] for r in rows] == ["fedavg", "c2m3"]
    assert rows[0]["accuracy"] == rows[1]["accuracy"] and rows[0]["loss"] == rows[1]["loss"]


def test_fedsim_rerun_identical(tmp_path):
    for name in ("a.csv", "b.csv"):
        assert run(["fedsim", "--clients", 2, "--rounds", 2, *FED, "--out", tmp_path / name]) == 0
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


@pytest.mark.parametrize("clients", ["0", "1", "x"])
def test_fedsim_bad_clients_is_usage_error(clients):
    assert run(["fedsim", "--clients", clients]) == 2


def test_config_file_merges_under_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dims": [2, 6, 2], "epochs": 2, "n-samples": 100, "out": str(tmp_path / "cfg.json")}))
    assert run(["train", "--config", cfg]) == 0
    assert load_model(tmp_path / "cfg.json").dims == [2, 6, 2]
    assert run(["train", "--config", cfg, "--dims", "2,5,2", "--out", tmp_path / "flag.json"]) == 0
    assert load_model(tmp_path / "flag.json").dims == [2, 5, 2]


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_flag": 1}))
    assert run(["train", "--config", bad, "--dims", "2,3,2", "--out", tmp_path / "x.json"]) == 2
    assert run(["train", "--config", tmp_path / "missing.json"]) == 2


def test_json_outputs_carry_seed(trio, tmp_path):
    _, paths = trio
    assert run(["fedsim", "--clients", 2, "--rounds", 1, *FED, "--seed", 9, "--json", tmp_path / "f.json",
                "--out", tmp_path / "f.csv"]) == 0
    assert json.loads((tmp_path / "f.json").read_text())["provenance"]["seed"] == 9
