"""Synthetic datasets, CSV ingestion and deterministic SGD training of MLPs."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .model import Dataset, MlpParams, ShapeMismatchError, log_softmax

log = logging.getLogger(__name__)

DATASET_KINDS = ("gaussian_blobs", "spirals")


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    init_scale: float = 1.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "spirals"
    n_samples: int = 1000
    n_classes: int = 2
    input_dim: int = 2
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise DatasetError(f"unknown dataset kind {self.kind!r}; choose from {DATASET_KINDS}")
        if self.n_classes < 2:
            raise DatasetError("n_classes must be >= 2")
        if self.n_samples < self.n_classes:
            raise DatasetError("n_samples must be >= n_classes")
        if self.input_dim < (2 if self.kind == "spirals" else 1):
            raise DatasetError(f"input_dim too small for {self.kind}")
        if self.noise < 0:
            raise DatasetError("noise must be >= 0")


class Split(NamedTuple):
    train: Dataset
    test: Dataset


def _class_counts(n: int, k: int) -> list[int]:
    return [n // k + (1 if c < n % k else 0) for c in range(k)]


def _spirals(spec: SyntheticSpec, rng: np.random.Generator):
    feats, labels = [], []
    for c, count in enumerate(_class_counts(spec.n_samples, spec.n_classes)):
        t = rng.uniform(0.0, 1.0, count)
        radius = 0.2 + 0.8 * t
        angle = 3.0 * np.pi * t + 2.0 * np.pi * c / spec.n_classes
        xy = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        xy += spec.noise * rng.standard_normal(xy.shape)
        extra = spec.noise * rng.standard_normal((count, spec.input_dim - 2))
        feats.append(np.hstack([xy, extra]))
        labels.append(np.full(count, c))
    return np.vstack(feats), np.concatenate(labels)


def _blobs(spec: SyntheticSpec, rng: np.random.Generator):
    centers = 3.0 * rng.standard_normal((spec.n_classes, spec.input_dim))
    feats, labels = [], []
    for c, count in enumerate(_class_counts(spec.n_samples, spec.n_classes)):
        feats.append(centers[c] + spec.noise * rng.standard_normal((count, spec.input_dim)))
        labels.append(np.full(count, c))
    return np.vstack(feats), np.concatenate(labels)


def make_dataset(spec: SyntheticSpec) -> Split:
    """Seeded synthetic classification data, 80/20 split, standardized with train stats."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    x, y = (_spirals if spec.kind == "spirals" else _blobs)(spec, rng)
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    n_train = int(round(0.8 * len(y)))
    if n_train in (0, len(y)):
        raise DatasetError("too few samples for an 80/20 split")
    mu = x[:n_train].mean(axis=0)
    sd = x[:n_train].std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd
    names = [f"x{i}" for i in range(spec.input_dim)]
    return Split(Dataset(x[:n_train], y[:n_train], f"{spec.kind}-train", names),
                 Dataset(x[n_train:], y[n_train:], f"{spec.kind}-test", names))


def init_mlp(dims: Sequence[int], seed: int, init_scale: float = 1.0) -> MlpParams:
    """Uniform(-s, s) init with ``s = init_scale / sqrt(fan_in)`` for weights and biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        s = init_scale / np.sqrt(d_in)
        ws.append(rng.uniform(-s, s, (d_out, d_in)))
        bs.append(rng.uniform(-s, s, d_out))
    return MlpParams(tuple(ws), tuple(bs))


def _loss_and_grads(ws, bs, x, y):
    acts = [x]
    z = x
    for i in range(len(ws)):
        a = z @ ws[i].T + bs[i]
        z = a if i == len(ws) - 1 else np.maximum(a, 0.0)
        acts.append(z)
    logp = log_softmax(acts[-1])
    m = x.shape[0]
    loss = -logp[np.arange(m), y].mean()
    delta = np.exp(logp)
    delta[np.arange(m), y] -= 1.0
    delta /= m
    gws, gbs = [None] * len(ws), [None] * len(ws)
    for i in range(len(ws) - 1, -1, -1):
        gws[i] = delta.T @ acts[i]
        gbs[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ ws[i]) * (acts[i] > 0)
    return loss, gws, gbs


def train_mlp(data: Dataset, dims: Sequence[int], config: TrainConfig = TrainConfig(),
              init: MlpParams | None = None) -> MlpParams:
    """Minibatch SGD with momentum and weight decay; deterministic for fixed inputs.

    ``init`` overrides the seeded initialization (used for warm starts).
    """
    dims = list(dims)
    if dims[0] != data.features.shape[1]:
        raise ShapeMismatchError(f"dims[0]={dims[0]} but data has {data.features.shape[1]} features")
    if len(data) and data.labels.max() >= dims[-1]:
        raise ShapeMismatchError(f"labels need {data.labels.max() + 1} outputs, dims[-1]={dims[-1]}")
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = init if init is not None else init_mlp(dims, config.seed, config.init_scale)
    if params.dims != dims:
        raise ShapeMismatchError(f"init model has dims {params.dims}, expected {dims}")
    ws = [w.copy() for w in params.weights]
    bs = [b.copy() for b in params.biases]
    vel_w = [np.zeros_like(w) for w in ws]
    vel_b = [np.zeros_like(b) for b in bs]
    # shuffling stream is separate from the init stream
    rng = np.random.default_rng([config.seed, 1])
    n = len(data)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            # overflow shows up as a non-finite loss, which is reported below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, gws, gbs = _loss_and_grads(ws, bs, data.features[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError("training loss is not finite", epoch)
            total += loss * len(idx)
            for i in range(len(ws)):
                vel_w[i] = config.momentum * vel_w[i] + gws[i] + config.weight_decay * ws[i]
                vel_b[i] = config.momentum * vel_b[i] + gbs[i] + config.weight_decay * bs[i]
                ws[i] = ws[i] - config.lr * vel_w[i]
                bs[i] = bs[i] - config.lr * vel_b[i]
        if not all(np.all(np.isfinite(w)) for w in ws):
            raise TrainingError("parameters diverged", epoch)
        log.debug("epoch %d mean loss %.6f", epoch, total / n)
    return MlpParams(tuple(ws), tuple(bs))


def load_csv_dataset(path, label_column: str = "label", name: str | None = None) -> Dataset:
    """Read a CSV with a header row, numeric feature columns and an integer label column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if label_column not in header:
            raise DatasetError(f"{path}: no label column {label_column!r} in header {header}")
        li = header.index(label_column)
        names = [h for i, h in enumerate(header) if i != li]
        feats, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                lab = float(row[li])
            except ValueError:
                raise DatasetError(f"{path}:{line}: label {row[li]!r} is not a number") from None
            if lab != int(lab) or lab < 0:
                raise DatasetError(f"{path}:{line}: label {row[li]!r} is not a class id")
            vals = []
            for j, cell in enumerate(row):
                if j == li:
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DatasetError(f"{path}:{line}: non-numeric feature {header[j]}={cell!r}") from None
            feats.append(vals)
            labels.append(int(lab))
    if not labels:
        raise DatasetError(f"{path}: no data rows")
    return Dataset(np.array(feats, dtype=np.float64), np.array(labels), name or str(path), names)


def write_csv_dataset(data: Dataset, path, label_column: str = "label") -> None:
    names = data.feature_names or [f"x{i}" for i in range(data.features.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names) + [label_column])
        for x, y in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])
