"""ReLU MLP parameters, forward evaluation and the model bundle format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .perm import Permutation

MODEL_FORMAT = "c2m3-mlp/v1"


class ShapeMismatchError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class MlpParams:
    """Ordered weights/biases of a ReLU MLP.

    ``weights[l]`` has shape ``(dims[l+1], dims[l])``; hidden layers use ReLU,
    the last layer emits logits.
    """

    weights: tuple
    biases: tuple
    activation: str = "relu"

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64) for b in self.biases)
        if not ws:
            raise ShapeMismatchError("an MLP needs at least one layer")
        if len(ws) != len(bs):
            raise ShapeMismatchError(f"{len(ws)} weights but {len(bs)} biases")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
                raise ShapeMismatchError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != ws[i - 1].shape[0]:
                raise ShapeMismatchError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer emits {ws[i - 1].shape[0]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def perm_spec(self) -> "PermSpec":
        return PermSpec(tuple(self.dims[1:-1]))

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def replace(self, weights=None, biases=None) -> "MlpParams":
        return MlpParams(self.weights if weights is None else weights,
                         self.biases if biases is None else biases, self.activation)

    def equals(self, other: "MlpParams") -> bool:
        """Bitwise equality of all parameters."""
        return self.dims == other.dims and all(
            np.array_equal(x, y) for x, y in zip(self.arrays(), other.arrays()))


@dataclass(frozen=True)
class PermSpec:
    """Sizes of the permutable hidden axes; input and output are fixed."""

    sizes: tuple

    def identity(self) -> list[Permutation]:
        return [Permutation.identity(n) for n in self.sizes]

    def check(self, perms: Sequence) -> None:
        if len(perms) != len(self.sizes):
            raise ShapeMismatchError(f"expected {len(self.sizes)} permutations, got {len(perms)}")
        for i, (p, n) in enumerate(zip(perms, self.sizes)):
            size = p.size if isinstance(p, Permutation) else np.shape(p)[0]
            if size != n:
                raise ShapeMismatchError(f"hidden layer {i}: permutation size {size} != {n}")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "data"
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeMismatchError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeMismatchError("need one label per feature row")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class ids")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx, name: str | None = None) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], name or self.name, list(self.feature_names))


class ActivationStats(NamedTuple):
    """Per-neuron mean and population std of hidden pre-activations."""

    means: list
    stds: list


class ForwardResult(NamedTuple):
    logits: np.ndarray
    pre_activations: list
    hidden: list


def forward(params: MlpParams, x) -> ForwardResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.dims[0]:
        raise ShapeMismatchError(f"input has {x.shape[1]} features, model expects {params.dims[0]}")
    pre, hidden = [], []
    z = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = z @ w.T + b
        if i == last:
            return ForwardResult(a, pre, hidden)
        pre.append(a)
        z = np.maximum(a, 0.0)
        hidden.append(z)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class LossAccuracy(NamedTuple):
    loss: float
    accuracy: float


def loss_and_accuracy(params: MlpParams, data: Dataset) -> LossAccuracy:
    """Mean cross-entropy and top-1 accuracy."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if data.labels.max() >= params.dims[-1]:
        raise ShapeMismatchError(f"label {data.labels.max()} outside {params.dims[-1]} classes")
    logits = forward(params, data.features).logits
    logp = log_softmax(logits)
    nll = -logp[np.arange(len(data)), data.labels]
    acc = np.mean(np.argmax(logits, axis=1) == data.labels)
    return LossAccuracy(float(nll.mean()), float(acc))


def apply_permutations(params: MlpParams, perms: Sequence[Permutation]) -> MlpParams:
    """Permute hidden neurons: rows of layer l and columns of layer l+1 by ``perms[l]``.

    The result computes the same function as ``params``.
    """
    params.perm_spec.check(perms)
    ws = list(params.weights)
    bs = list(params.biases)
    for i, p in enumerate(perms):
        idx = p.map
        ws[i] = ws[i][idx]
        bs[i] = bs[i][idx]
        ws[i + 1] = ws[i + 1][:, idx]
    return params.replace(ws, bs)


def check_same_architecture(*models: MlpParams) -> None:
    dims = models[0].dims
    for m in models[1:]:
        if m.dims != dims:
            raise ShapeMismatchError(f"architecture mismatch: {dims} vs {m.dims}")


def serialize(params: MlpParams) -> bytes:
    # json writes floats with repr(), which round-trips float64 exactly
    doc = {
        "format": MODEL_FORMAT,
        "dims": params.dims,
        "activation": params.activation,
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(params.weights, params.biases)],
    }
    return json.dumps(doc, allow_nan=False).encode()


def deserialize(blob: bytes | str) -> MlpParams:
    try:
        doc = json.loads(blob)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    fmt = doc.get("format")
    if fmt != MODEL_FORMAT:
        raise ModelFormatError(f"unknown model format {fmt!r}")
    try:
        dims = [int(d) for d in doc["dims"]]
        layers = doc["layers"]
        weights = [np.array(layer["w"], dtype=np.float64) for layer in layers]
        biases = [np.array(layer["b"], dtype=np.float64) for layer in layers]
        activation = doc.get("activation", "relu")
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc
    if len(weights) != len(dims) - 1:
        raise ModelFormatError(f"dims describe {len(dims) - 1} layers, found {len(weights)}")
    for i, w in enumerate(weights):
        if w.shape != (dims[i + 1], dims[i]) or biases[i].shape != (dims[i + 1],):
            raise ModelFormatError(
                f"layer {i}: weight {w.shape} / bias {biases[i].shape} inconsistent with dims {dims}")
    try:
        return MlpParams(tuple(weights), tuple(biases), activation)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from exc


def save_model(params: MlpParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(params))


def load_model(path) -> MlpParams:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def random_mlp(dims: Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> MlpParams:
    """Gaussian weights scaled by 1/sqrt(fan_in); handy for tests and demos."""
    ws, bs = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        ws.append(rng.standard_normal((d_out, d_in)) * scale / np.sqrt(d_in))
        bs.append(rng.standard_normal(d_out) * scale * 0.1)
    return MlpParams(tuple(ws), tuple(bs))
