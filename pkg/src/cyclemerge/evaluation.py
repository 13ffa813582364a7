"""Interpolation, loss barriers, cycle error and similarity measures."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .matching import UniverseMatch
from .merging import map_to_universe
from .model import Dataset, MlpParams, apply_permutations, check_same_architecture, forward, loss_and_accuracy
from .perm import Permutation, compose

DEFAULT_GRID = 25
PROBE_SIZE = 512


class UndefinedSimilarityError(ValueError):
    pass


def interpolate(a: MlpParams, b: MlpParams, lam: float) -> MlpParams:
    """``(1 - lam) * a + lam * b``, computed as ``a + lam * (b - a)``."""
    check_same_architecture(a, b)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return a
    if lam == 1.0:
        return b
    ws = [wa + lam * (wb - wa) for wa, wb in zip(a.weights, b.weights)]
    bs = [ba + lam * (bb - ba) for ba, bb in zip(a.biases, b.biases)]
    return a.replace(ws, bs)


@dataclass
class BarrierReport:
    lambdas: np.ndarray
    losses: np.ndarray
    accuracies: np.ndarray
    test_barrier: float
    train_losses: np.ndarray | None = None
    train_accuracies: np.ndarray | None = None
    train_barrier: float = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["lambda", "loss", "accuracy"]
        if self.train_losses is not None:
            header += ["train_loss", "train_accuracy"]
        writer.writerow(header)
        for i, lam in enumerate(self.lambdas):
            row = [repr(float(lam)), repr(float(self.losses[i])), repr(float(self.accuracies[i]))]
            if self.train_losses is not None:
                row += [repr(float(self.train_losses[i])), repr(float(self.train_accuracies[i]))]
            writer.writerow(row)
        return buf.getvalue()

    def to_json(self) -> dict:
        doc = {
            "lambdas": self.lambdas.tolist(),
            "losses": self.losses.tolist(),
            "accuracies": self.accuracies.tolist(),
            "test_barrier": self.test_barrier,
            "train_barrier": None if np.isnan(self.train_barrier) else self.train_barrier,
            "grid_note": "barrier uses the grid maximum, a lower bound on the true maximum",
        }
        if self.train_losses is not None:
            doc["train_losses"] = self.train_losses.tolist()
            doc["train_accuracies"] = self.train_accuracies.tolist()
        return doc


def _curve(a, b, data, lambdas):
    out = [loss_and_accuracy(interpolate(a, b, float(lam)), data) for lam in lambdas]
    return np.array([o.loss for o in out]), np.array([o.accuracy for o in out])


def _barrier(losses):
    return float(losses.max() - 0.5 * (losses[0] + losses[-1]))


def loss_barrier(a: MlpParams, b: MlpParams, data: Dataset, grid_size: int = DEFAULT_GRID,
                 train_data: Dataset | None = None) -> BarrierReport:
    """Loss along the straight line from ``a`` to ``b`` and the resulting barrier.

    ``data`` supplies the reported curve and ``test_barrier``; pass
    ``train_data`` to also get the train curve and ``train_barrier``.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if len(data) == 0:
        raise ValueError("cannot compute a barrier on an empty dataset")
    lambdas = np.linspace(0.0, 1.0, grid_size)
    losses, accs = _curve(a, b, data, lambdas)
    report = BarrierReport(lambdas, losses, accs, _barrier(losses))
    if train_data is not None:
        tl, ta = _curve(a, b, train_data, lambdas)
        report.train_losses, report.train_accuracies, report.train_barrier = tl, ta, _barrier(tl)
    return report


def param_distance(a: MlpParams, b: MlpParams) -> float:
    check_same_architecture(a, b)
    return float(np.linalg.norm(a.flatten() - b.flatten()))


def cycle_permutations(match, cycle: Sequence[int]) -> list[Permutation]:
    """Compose the per-layer maps along ``cycle`` (first == last model)."""
    cycle = list(cycle)
    if len(cycle) < 1 or cycle[0] != cycle[-1]:
        raise ValueError(f"cycle must start and end at the same model: {cycle}")
    total = None
    for src, dst in zip(cycle[:-1], cycle[1:]):
        if isinstance(match, UniverseMatch):
            step = match.pairwise(dst, src)
        else:
            try:
                step = match[(src, dst)]
            except KeyError:
                raise ValueError(f"no pairwise map for edge {src} -> {dst}") from None
            step = getattr(step, "perms", step)
        # apply src->dst after what was applied so far
        total = list(step) if total is None else [compose(s, t) for s, t in zip(step, total)]
    return total or []


def cycle_error(models: Sequence[MlpParams], match, cycle: Sequence[int]) -> float:
    """l2 distance between a model and its image after permuting around ``cycle``.

    ``match`` is a :class:`UniverseMatch` or a mapping ``(src, dst) -> perms``
    whose permutations map model ``src`` onto model ``dst``.
    """
    cycle = list(cycle)
    if not cycle or cycle[0] != cycle[-1]:
        raise ValueError(f"cycle must start and end at the same model: {cycle}")
    for i in cycle:
        if not 0 <= i < len(models):
            raise ValueError(f"model index {i} out of range")
    start = models[cycle[0]]
    if len(cycle) <= 2 and len(set(cycle)) == 1:
        return 0.0
    perms = cycle_permutations(match, cycle)
    return param_distance(start, apply_permutations(start, perms))


def pairwise_cycle_matches(models: Sequence[MlpParams], matcher, edges) -> dict:
    """Run a pairwise ``matcher(target, source)`` for each ``(src, dst)`` edge."""
    out = {}
    for src, dst in edges:
        out[(src, dst)] = matcher(models[dst], models[src]).perms
    return out


def _center(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0, keepdims=True)


def hsic(x: np.ndarray, y: np.ndarray) -> float:
    """Biased HSIC with linear kernels: ``tr(K H L H) / (M - 1)^2``."""
    m = x.shape[0]
    # tr(X X^T H Y Y^T H) == ||Xc^T Yc||_F^2 with column-centred X, Y
    cross = _center(x).T @ _center(y)
    return float(np.sum(cross * cross)) / (m - 1) ** 2


def cka(x, y) -> float:
    """Linear centered kernel alignment between two representation matrices."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"need matrices with equal row counts, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ValueError("CKA needs at least two samples")
    hxx, hyy = hsic(x, x), hsic(y, y)
    if hxx == 0.0 or hyy == 0.0:
        raise UndefinedSimilarityError("CKA is undefined for zero-variance representations")
    return hsic(x, y) / np.sqrt(hxx * hyy)


def weight_similarity(a: MlpParams, b: MlpParams) -> dict:
    check_same_architecture(a, b)
    u, v = a.flatten(), b.flatten()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise UndefinedSimilarityError("cosine similarity is undefined for a zero-norm model")
    return {"cosine": float(u @ v / (nu * nv)), "euclidean": float(np.linalg.norm(u - v))}


def probe_batch(data: Dataset, seed: int = 0, size: int = PROBE_SIZE) -> np.ndarray:
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(data), size=min(size, len(data)), replace=False)
    return data.features[np.sort(idx)]


@dataclass
class SimilarityReport:
    """Pairwise similarities before and after universe mapping."""

    n_models: int
    records: list = field(default_factory=list)

    def add(self, row, col, metric, stage, value):
        self.records.append({"row": row, "col": col, "metric": metric, "stage": stage, "value": float(value)})

    def values(self, metric: str, stage: str) -> dict:
        return {(r["row"], r["col"]): r["value"] for r in self.records
                if r["metric"] == metric and r["stage"] == stage}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["row", "col", "metric", "stage", "value"])
        for r in self.records:
            writer.writerow([r["row"], r["col"], r["metric"], r["stage"], repr(r["value"])])
        return buf.getvalue()


def similarity_report(models: Sequence[MlpParams], match: UniverseMatch, probe: np.ndarray) -> SimilarityReport:
    """Weight cosine/Euclidean and per-layer representation CKA/Euclidean,
    for every unordered model pair, before and after mapping to the universe."""
    models = list(models)
    universe = [map_to_universe(m, p) for m, p in zip(models, match.perms)]
    report = SimilarityReport(len(models))
    for stage, group in (("before", models), ("after", universe)):
        reps = [forward(m, probe).hidden for m in group]
        for p, q in itertools.combinations(range(len(group)), 2):
            ws = weight_similarity(group[p], group[q])
            report.add(p, q, "weight_cosine", stage, ws["cosine"])
            report.add(p, q, "weight_euclidean", stage, ws["euclidean"])
            for k, (hp, hq) in enumerate(zip(reps[p], reps[q])):
                try:
                    report.add(p, q, f"cka_layer{k}", stage, cka(hp, hq))
                except UndefinedSimilarityError:
                    report.add(p, q, f"cka_layer{k}", stage, float("nan"))
                report.add(p, q, f"repr_euclidean_layer{k}", stage, np.linalg.norm(hp - hq))
    return report


def pairwise_merge_matrix(models: Sequence[MlpParams], match: UniverseMatch, data: Dataset) -> dict:
    """Accuracy of every pairwise midpoint, in the original space and in the universe.

    The diagonal holds each model's own accuracy.
    """
    models = list(models)
    if len(models) < 2:
        raise ValueError("need at least two models")
    universe = [map_to_universe(m, p) for m, p in zip(models, match.perms)]
    out = {}
    for stage, group in (("before", models), ("after", universe)):
        n = len(group)
        table = np.zeros((n, n))
        for p in range(n):
            table[p, p] = loss_and_accuracy(group[p], data).accuracy
            for q in range(p + 1, n):
                acc = loss_and_accuracy(interpolate(group[p], group[q], 0.5), data).accuracy
                table[p, q] = table[q, p] = acc
        out[stage] = table
    return out


def matrix_to_csv(tables: Mapping[str, np.ndarray], metric: str = "accuracy") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "col", "metric", "stage", "value"])
    for stage, table in tables.items():
        for (i, j), v in np.ndenumerate(table):
            writer.writerow([i, j, metric, stage, repr(float(v))])
    return buf.getvalue()
