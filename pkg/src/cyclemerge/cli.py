"""Command-line driver: ``cyclemerge {train,match,merge,eval,fedsim}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    DEFAULT_GRID,
    SimilarityReport,
    cka,
    cycle_error,
    loss_barrier,
    matrix_to_csv,
    pairwise_cycle_matches,
    pairwise_merge_matrix,
    probe_batch,
    similarity_report,
)
from .fedsim import FedConfig, rounds_to_csv, run_simulation
from .matching import (
    MatchConfig,
    UniverseMatch,
    coordinate_descent_match,
    fw_match_multi,
    fw_match_pair,
    load_match,
    pairwise_objective,
)
from .merging import map_to_universe, merge_many, merge_subset, naive_merge, repair
from .model import forward, load_model, loss_and_accuracy, save_model
from .training import DATASET_KINDS, SyntheticSpec, TrainConfig, load_csv_dataset, make_dataset, train_mlp


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in str(text).split(",") if t.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return vals


def _dims(text) -> list[int]:
    if isinstance(text, list):
        text = ",".join(str(t) for t in text)
    dims = _int_list(text)
    if len(dims) < 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims need >= 2 positive sizes, got {text!r}")
    return dims


def _at_least(lo: int):
    def parse(text) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {v}")
        return v
    return parse


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", help="CSV training/eval data (header row, integer label column)")
    g.add_argument("--test-data", help="CSV held-out data; defaults to --data")
    g.add_argument("--label-column", default="label")
    g.add_argument("--spec", choices=DATASET_KINDS, default="spirals", help="synthetic dataset when no --data")
    g.add_argument("--n-samples", type=_at_least(2), default=1000)
    g.add_argument("--n-classes", type=_at_least(2), default=2)
    g.add_argument("--input-dim", type=_at_least(1), default=2)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--data-seed", type=int, default=0)


def _add_train_flags(p: argparse.ArgumentParser, epochs: int) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=_at_least(0), default=epochs)
    g.add_argument("--batch-size", type=_at_least(1), default=50)
    g.add_argument("--lr", type=float, default=0.05)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--weight-decay", type=float, default=1e-4)
    g.add_argument("--init-scale", type=float, default=1.0)


def _add_match_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--init", choices=("identity", "barycenter", "sinkhorn"), default="identity")
    p.add_argument("--max-iters", type=_at_least(1), default=100)
    p.add_argument("--tol", type=float, default=1e-6, help="relative objective gain to stop at")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-bias", action="store_true", help="drop bias terms from the matching objective")


def _match_config(args) -> MatchConfig:
    return MatchConfig(init=args.init, max_iters=args.max_iters, rel_tol=args.tol, seed=args.seed,
                       use_bias=not args.no_bias)


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
                       weight_decay=args.weight_decay, seed=seed, init_scale=args.init_scale)


def _load_split(args):
    if args.data:
        train = load_csv_dataset(args.data, args.label_column)
        test = load_csv_dataset(args.test_data, args.label_column) if args.test_data else train
        return train, test
    spec = SyntheticSpec(args.spec, args.n_samples, args.n_classes, args.input_dim, args.noise, args.data_seed)
    return make_dataset(spec)


def _provenance(args, command: str) -> dict:
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    return {"command": command, "seed": getattr(args, "seed", None), "version": __version__, "flags": flags}


def _write_json(path, doc) -> None:
    text = json.dumps(doc, indent=2, default=_json_default)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _self_bound(m) -> float:
    return float(sum(np.sum(a * a) for a in m.arrays()))


def _full_cycle(n: int) -> list[int]:
    return list(range(n)) + [0]


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    train, test = _load_split(args)
    dims = args.dims
    model = train_mlp(train, dims, _train_config(args, args.seed))
    save_model(model, args.out)
    tr, te = loss_and_accuracy(model, train), loss_and_accuracy(model, test)
    print(f"train loss {tr.loss:.6f} acc {tr.accuracy:.4f} | test loss {te.loss:.6f} acc {te.accuracy:.4f}")
    return 0


def cmd_match(args) -> int:
    models = [load_model(p) for p in args.models]
    ids = [Path(p).stem for p in args.models]
    if len(models) < 2:
        raise ValueError("match needs at least two models")
    doc: dict
    if args.mode == "universe":
        match = fw_match_multi(models, _match_config(args))
        doc = match.to_json(ids)
        cyc = _full_cycle(len(models))
        doc["cycle"] = cyc
        doc["cycle_error"] = cycle_error(models, match, cyc)
        doc["objective"] = match.trace.final_objective
    else:
        if len(models) != 2:
            raise ValueError(f"{args.mode} mode matches exactly two models")
        a, b = models
        if args.mode == "pair":
            match = fw_match_pair(a, b, _match_config(args))
        else:
            match = coordinate_descent_match(a, b, seed=args.seed, use_bias=not args.no_bias)
        doc = match.to_json(ids)
        doc["objective"] = pairwise_objective(a, b, match.perms, not args.no_bias)
        doc["self_bound"] = {"A": _self_bound(a), "B": _self_bound(b)}
    doc["provenance"] = _provenance(args, "match")
    _write_json(args.out, doc)
    return 0


def _universe_for(models, args) -> UniverseMatch:
    if getattr(args, "perms", None):
        match = load_match(args.perms)
        if not isinstance(match, UniverseMatch):
            raise ValueError(f"{args.perms} holds a pairwise match; a universe match is required")
        return match
    return fw_match_multi(models, _match_config(args))


def cmd_merge(args) -> int:
    models = [load_model(p) for p in args.models]
    report = {"strategy": args.strategy, "models": [str(p) for p in args.models]}
    universe = None
    if args.strategy == "naive":
        if args.subset:
            models = [models[i] for i in args.subset]
        merged = naive_merge(models)
    elif args.strategy == "merge-many":
        merged = merge_many(models, seed=args.seed)
    else:
        match = _universe_for(models, args)
        universe = [map_to_universe(m, p) for m, p in zip(models, match.perms)]
        subset = args.subset if args.subset else list(range(len(models)))
        merged = merge_subset(models, match, subset)
        universe = [universe[i] for i in subset]
        report["subset"] = subset
        report["trace"] = match.trace.to_json()
    if args.repair:
        train, _ = _load_split(args)
        endpoints = universe if universe is not None else models
        merged = repair(merged, endpoints, train)
        report["repair"] = {"weights": "uniform", "n_endpoints": len(endpoints), "data": args.data or args.spec}
    save_model(merged, args.out)
    report["provenance"] = _provenance(args, "merge")
    if args.report:
        _write_json(args.report, report)
    return 0


def cmd_eval(args) -> int:
    models = [load_model(p) for p in args.models]
    train, test = _load_split(args)
    kind = args.report
    doc = {"report": kind, "models": [str(p) for p in args.models]}
    csv_text = ""
    if kind == "accuracy":
        rows = ["model,split,loss,accuracy"]
        doc["results"] = []
        for path, m in zip(args.models, models):
            for split, data in (("train", train), ("test", test)):
                la = loss_and_accuracy(m, data)
                rows.append(f"{path},{split},{la.loss!r},{la.accuracy!r}")
                doc["results"].append({"model": str(path), "split": split, "loss": la.loss, "accuracy": la.accuracy})
        csv_text = "\n".join(rows) + "\n"
    elif kind == "barrier":
        if len(models) != 2:
            raise ValueError("barrier report needs exactly two models")
        rep = loss_barrier(models[0], models[1], test, args.grid, train_data=train)
        csv_text = rep.to_csv()
        doc.update(rep.to_json())
    elif kind in ("similarity", "cka"):
        probe = probe_batch(test, seed=args.seed)
        if kind == "similarity":
            rep = similarity_report(models, _universe_for(models, args), probe)
        else:
            rep = SimilarityReport(len(models))
            stages = [("before", models)]
            if args.perms:
                match = _universe_for(models, args)
                stages.append(("after", [map_to_universe(m, p) for m, p in zip(models, match.perms)]))
            for stage, group in stages:
                reps = [forward(m, probe).hidden for m in group]
                for p, q in itertools.combinations_with_replacement(range(len(group)), 2):
                    for k, (hp, hq) in enumerate(zip(reps[p], reps[q])):
                        rep.add(p, q, f"cka_layer{k}", stage, cka(hp, hq))
        csv_text = rep.to_csv()
        doc["records"] = rep.records
    elif kind == "perf-matrix":
        tables = pairwise_merge_matrix(models, _universe_for(models, args), test)
        csv_text = matrix_to_csv(tables)
        doc["tables"] = {k: v.tolist() for k, v in tables.items()}
    elif kind == "cycle-error":
        cyc = args.cycle or _full_cycle(len(models))
        if args.matcher == "universe":
            match = _universe_for(models, args)
        else:
            edges = list(zip(cyc[:-1], cyc[1:]))
            if args.matcher == "coord-descent":
                matcher = lambda a, b: coordinate_descent_match(a, b, seed=args.seed)
            else:
                matcher = lambda a, b: fw_match_pair(a, b, _match_config(args))
            match = pairwise_cycle_matches(models, matcher, edges)
        err = cycle_error(models, match, cyc)
        csv_text = "cycle,matcher,error\n" + f"{'-'.join(map(str, cyc))},{args.matcher},{err!r}\n"
        doc.update({"cycle": cyc, "matcher": args.matcher, "cycle_error": err})
    doc["provenance"] = _provenance(args, "eval")
    _write_text(args.out, csv_text)
    if args.json:
        _write_json(args.json, doc)
    return 0


def cmd_fedsim(args) -> int:
    train, test = _load_split(args)
    aggregators = ("fedavg", "c2m3") if args.aggregator == "both" else (args.aggregator,)
    records = []
    configs = {}
    for agg in aggregators:
        cfg = FedConfig(n_clients=args.clients, rounds=args.rounds, local_epochs=args.local_epochs,
                        same_init=args.same_init, aggregator=agg, partition_seed=args.partition_seed,
                        init_seed=args.init_seed, train=_train_config(args, args.seed),
                        match=_match_config(args), repair=not args.no_repair)
        configs[agg] = cfg.to_json()
        records.extend(run_simulation(train, test, args.dims, cfg))
    _write_text(args.out, rounds_to_csv(records))
    if args.json:
        _write_json(args.json, {"configs": configs, "provenance": _provenance(args, "fedsim"),
                                "rounds": [r.to_json() for r in records]})
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclemerge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of flag values (keys are flag names); flags win")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train an MLP and write a model bundle")
    p.add_argument("--dims", type=_dims, required=True, help="layer sizes, e.g. 2,64,64,32,2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_train_flags(p, epochs=200)
    _add_data_flags(p)

    p = add("match", cmd_match, "match models and write a permutation file")
    p.add_argument("models", nargs="+")
    p.add_argument("--mode", choices=("pair", "universe", "coord-descent"), default="universe")
    p.add_argument("--out", default="-")
    _add_match_flags(p)

    p = add("merge", cmd_merge, "merge models into one bundle")
    p.add_argument("models", nargs="+")
    p.add_argument("--strategy", choices=("naive", "c2m3", "merge-many"), default="c2m3")
    p.add_argument("--perms", help="universe permutation file from `match --mode universe`")
    p.add_argument("--subset", type=_int_list, help="indices of models to aggregate, e.g. 0,2,4")
    p.add_argument("--repair", action="store_true", help="renormalize activations on --data (or the --spec dataset)")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="write a JSON merge report here")
    _add_match_flags(p)
    _add_data_flags(p)

    p = add("eval", cmd_eval, "evaluation reports (CSV to --out, JSON to --json)")
    p.add_argument("models", nargs="+")
    p.add_argument("--report", choices=("accuracy", "barrier", "similarity", "cka", "perf-matrix", "cycle-error"),
                   required=True)
    p.add_argument("--perms", help="universe permutation file")
    p.add_argument("--grid", type=_at_least(2), default=DEFAULT_GRID)
    p.add_argument("--cycle", type=_int_list, help="model indices, first == last, e.g. 0,1,2,0")
    p.add_argument("--matcher", choices=("universe", "pair", "coord-descent"), default="universe")
    p.add_argument("--out", default="-")
    p.add_argument("--json")
    _add_match_flags(p)
    _add_data_flags(p)

    p = add("fedsim", cmd_fedsim, "federated simulation: FedAvg vs C2M3 aggregation")
    p.add_argument("--dims", type=_dims, default=[2, 64, 64, 32, 2])
    p.add_argument("--clients", type=_at_least(2), default=5)
    p.add_argument("--rounds", type=_at_least(1), default=10)
    p.add_argument("--local-epochs", type=_at_least(0), default=5)
    p.add_argument("--same-init", action="store_true")
    p.add_argument("--aggregator", choices=("fedavg", "c2m3", "both"), default="both")
    p.add_argument("--partition-seed", type=int, default=0)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--no-repair", action="store_true")
    p.add_argument("--out", default="-")
    p.add_argument("--json")
    _add_train_flags(p, epochs=0)
    _add_match_flags(p)
    _add_data_flags(p)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices  # noqa: SLF001
    if not known.config or known.command not in subparsers:
        return parser.parse_args(argv)
    try:
        with open(known.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config {known.config}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("--config must hold a JSON object")
    sub = subparsers[known.command]
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    defaults = {}
    for key, value in cfg.items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions or dest in ("help", "config"):
            parser.error(f"unknown key {key!r} in --config")
        action = actions[dest]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        # argparse does not type-convert non-string defaults, so convert here
        if action.type is not None and value is not None:
            try:
                value = action.type(value if isinstance(value, str) else str(value))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                parser.error(f"--config {key}: {exc}")
        if action.choices is not None and value not in action.choices:
            parser.error(f"--config {key}: {value!r} not in {sorted(action.choices)}")
        action.required = False
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _apply_config(parser, argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError, IndexError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
