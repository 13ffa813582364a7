"""Weight matching: pairwise and universe-factorized Frank-Wolfe, plus the
layer-wise coordinate-descent baseline.

Permutations for an MLP are stored per hidden layer; ``perms[k]`` permutes the
rows of ``weights[k]``/``biases[k]`` and the columns of ``weights[k + 1]``.
Soft (doubly stochastic) iterates are plain ``ndarray`` matrices.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import MlpParams, PermSpec, check_same_architecture
from .perm import (
    InvalidInputError,
    Permutation,
    assignment_value,
    compose,
    ds_deviation,
    invert,
    lap_maximize,
    project_to_permutation,
    sinkhorn_knopp,
)

log = logging.getLogger(__name__)

PERMS_FORMAT = "c2m3-perms/v1"
INIT_STRATEGIES = ("identity", "barycenter", "sinkhorn")


@dataclass(frozen=True)
class MatchConfig:
    init: str = "identity"
    max_iters: int = 100
    rel_tol: float = 1e-6
    # only used when the exact polynomial fit of the line search looks unreliable
    line_search_grid: int = 65
    seed: int = 0
    use_bias: bool = True

    def __post_init__(self):
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {self.init!r}; choose from {INIT_STRATEGIES}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.line_search_grid < 3:
            raise ValueError("line_search_grid must be >= 3")


@dataclass
class MatchTrace:
    objective_per_iter: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    final_objective: float = float("nan")

    def to_json(self) -> dict:
        return {
            "objective_per_iter": [float(v) for v in self.objective_per_iter],
            "step_sizes": [float(v) for v in self.step_sizes],
            "converged": self.converged,
            "iterations": self.iterations,
            "final_objective": float(self.final_objective),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MatchTrace":
        return cls(list(doc.get("objective_per_iter", [])), list(doc.get("step_sizes", [])),
                   bool(doc.get("converged", False)), int(doc.get("iterations", 0)),
                   float(doc.get("final_objective", float("nan"))))


@dataclass
class PairwiseMatch:
    """Permutations mapping model B onto model A."""

    perms: list
    trace: MatchTrace

    def to_json(self, ids: Sequence[str] = ("A", "B")) -> dict:
        return {
            "format": PERMS_FORMAT,
            "mode": "pairwise",
            "models": list(ids),
            "layers": [{"model": ids[1], "layer": k, "map": p.map.tolist()} for k, p in enumerate(self.perms)],
            "trace": self.trace.to_json(),
        }


@dataclass
class UniverseMatch:
    """Per-model permutations ``perms[p][k]`` from the universe to model ``p``."""

    perms: list
    trace: MatchTrace

    @property
    def n_models(self) -> int:
        return len(self.perms)

    def pairwise(self, p: int, q: int) -> list[Permutation]:
        """Permutations mapping model ``q`` onto model ``p``: ``P^p (P^q)^T``."""
        return [compose(pp, invert(pq)) for pp, pq in zip(self.perms[p], self.perms[q])]

    def to_json(self, ids: Sequence[str] | None = None) -> dict:
        ids = list(ids) if ids is not None else [str(i) for i in range(self.n_models)]
        layers = [
            {"model": ids[p], "layer": k, "map": perm.map.tolist()}
            for p, stack in enumerate(self.perms)
            for k, perm in enumerate(stack)
        ]
        return {"format": PERMS_FORMAT, "mode": "universe", "models": ids,
                "layers": layers, "trace": self.trace.to_json()}


def match_from_json(doc: dict) -> PairwiseMatch | UniverseMatch:
    if doc.get("format") != PERMS_FORMAT:
        raise InvalidInputError(f"unknown permutation format {doc.get('format')!r}")
    try:
        ids = [str(i) for i in doc["models"]]
        trace = MatchTrace.from_json(doc.get("trace", {}))
        by_model: dict[str, dict[int, Permutation]] = {}
        for entry in doc["layers"]:
            by_model.setdefault(str(entry["model"]), {})[int(entry["layer"])] = Permutation(entry["map"])
        mode = doc["mode"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed permutation document: {exc}") from exc

    def stack(model_id):
        layers = by_model.get(model_id, {})
        return [layers[k] for k in sorted(layers)]

    if mode == "pairwise":
        return PairwiseMatch(stack(ids[1]), trace)
    if mode == "universe":
        return UniverseMatch([stack(i) for i in ids], trace)
    raise InvalidInputError(f"unknown permutation mode {mode!r}")


def save_match(match, path, ids=None) -> None:
    doc = match.to_json(ids) if ids is not None else match.to_json()
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_match(path) -> PairwiseMatch | UniverseMatch:
    with open(path) as fh:
        return match_from_json(json.load(fh))


def _mat(p) -> np.ndarray:
    return p.matrix() if isinstance(p, Permutation) else np.asarray(p, dtype=float)


def _sandwich(w, left, right):
    """``left @ w @ right`` with ``None`` standing for the identity."""
    if left is not None:
        w = left @ w
    if right is not None:
        w = w @ right
    return w


def _layer_perms(perms):
    """Pad hidden permutations with ``None`` for the fixed input/output axes."""
    return [None] + list(perms) + [None]


# ---------------------------------------------------------------- pairwise


def pairwise_objective(a: MlpParams, b: MlpParams, perms, use_bias: bool = True) -> float:
    """``sum_l <W_l^A, P_l W_l^B P_{l-1}^T> + <b_l^A, P_l b_l^B>``; hard or soft ``perms``."""
    check_same_architecture(a, b)
    a.perm_spec.check(perms)
    ps = _layer_perms([_mat(p) for p in perms])
    total = 0.0
    for i in range(a.n_layers):
        left, prev = ps[i + 1], ps[i]
        aligned = _sandwich(b.weights[i], left, None if prev is None else prev.T)
        total += float(np.sum(a.weights[i] * aligned))
        if use_bias:
            bb = b.biases[i] if left is None else left @ b.biases[i]
            total += float(a.biases[i] @ bb)
    return total


def pairwise_gradient(a: MlpParams, b: MlpParams, perms, layer: int, use_bias: bool = True) -> np.ndarray:
    """Gradient of :func:`pairwise_objective` w.r.t. ``perms[layer]`` (0-based hidden index)."""
    check_same_architecture(a, b)
    n_hidden = a.n_layers - 1
    if not 0 <= layer < n_hidden:
        raise IndexError(f"hidden layer index {layer} outside [0, {n_hidden})")
    ps = _layer_perms([_mat(p) for p in perms])
    prev, nxt = ps[layer], ps[layer + 2]
    rows = _sandwich(a.weights[layer], None, prev) @ b.weights[layer].T
    cols = a.weights[layer + 1].T @ _sandwich(b.weights[layer + 1], nxt, None)
    grad = rows + cols
    if use_bias:
        grad = grad + np.outer(a.biases[layer], b.biases[layer])
    return grad


# ---------------------------------------------------------------- universe


def _universe_layers(m: MlpParams, mats, use_bias: bool):
    ps = _layer_perms(mats)
    ws, bs = [], []
    for i in range(m.n_layers):
        left, prev = ps[i + 1], ps[i]
        ws.append(_sandwich(m.weights[i], None if left is None else left.T, prev))
        if use_bias:
            bs.append(m.biases[i] if left is None else left.T @ m.biases[i])
    return ws, bs


def _check_multi(models, perms):
    if len(models) < 2:
        raise InvalidInputError("multi-model matching needs at least two models")
    check_same_architecture(*models)
    if len(perms) != len(models):
        raise InvalidInputError(f"{len(models)} models but {len(perms)} permutation stacks")
    spec = models[0].perm_spec
    for stack in perms:
        spec.check(stack)


def multi_objective(models: Sequence[MlpParams], perms, use_bias: bool = True) -> float:
    """``sum_{p != q} sum_l <\\hat W_l^p, \\hat W_l^q>`` over universe-mapped parameters.

    Uses ``sum_{p != q} <x_p, x_q> = |sum_p x_p|^2 - sum_p |x_p|^2``.
    """
    _check_multi(models, perms)
    mapped = [_universe_layers(m, [_mat(p) for p in stack], use_bias) for m, stack in zip(models, perms)]
    total = 0.0
    n_layers = models[0].n_layers
    for i in range(n_layers):
        ws = [mw[i] for mw, _ in mapped]
        s = sum(ws[1:], ws[0])
        total += float(np.sum(s * s)) - sum(float(np.sum(w * w)) for w in ws)
        if use_bias:
            bs = [mb[i] for _, mb in mapped]
            sb = sum(bs[1:], bs[0])
            total += float(sb @ sb) - sum(float(v @ v) for v in bs)
    return total


def _multi_grad_from_others(m: MlpParams, mats, layer, others_w, others_b, use_bias):
    # d/dP of the ordered pair (p, q) gives the "rows" and "cols" terms; the
    # swapped pair (q, p) is the same inner product and contributes them again.
    ps = _layer_perms(mats)
    prev, nxt = ps[layer], ps[layer + 2]
    rows = _sandwich(m.weights[layer], None, prev) @ others_w[layer].T
    cols = _sandwich(m.weights[layer + 1].T, None, nxt) @ others_w[layer + 1]
    grad = rows + cols
    if use_bias:
        grad = grad + np.outer(m.biases[layer], others_b[layer])
    return 2.0 * grad


def multi_gradient(models: Sequence[MlpParams], perms, p: int, layer: int, use_bias: bool = True) -> np.ndarray:
    """Gradient of :func:`multi_objective` w.r.t. ``perms[p][layer]``."""
    _check_multi(models, perms)
    if not 0 <= p < len(models):
        raise IndexError(f"model index {p} out of range")
    n_hidden = models[0].n_layers - 1
    if not 0 <= layer < n_hidden:
        raise IndexError(f"hidden layer index {layer} outside [0, {n_hidden})")
    mats = [[_mat(x) for x in stack] for stack in perms]
    n_layers = models[0].n_layers
    others_w = [0.0] * n_layers
    others_b = [0.0] * n_layers
    for q, m in enumerate(models):
        if q == p:
            continue
        ws, bs = _universe_layers(m, mats[q], use_bias)
        for i in range(n_layers):
            others_w[i] = others_w[i] + ws[i]
            if use_bias:
                others_b[i] = others_b[i] + bs[i]
    return _multi_grad_from_others(models[p], mats[p], layer, others_w, others_b, use_bias)


def _all_multi_gradients(models, mats, use_bias):
    n_layers = models[0].n_layers
    mapped = [_universe_layers(m, st, use_bias) for m, st in zip(models, mats)]
    tot_w = [sum((mw[i] for mw, _ in mapped[1:]), mapped[0][0][i]) for i in range(n_layers)]
    tot_b = [sum((mb[i] for _, mb in mapped[1:]), mapped[0][1][i]) for i in range(n_layers)] if use_bias else None
    grads = []
    for p, m in enumerate(models):
        others_w = [tot_w[i] - mapped[p][0][i] for i in range(n_layers)]
        others_b = [tot_b[i] - mapped[p][1][i] for i in range(n_layers)] if use_bias else None
        grads.append([_multi_grad_from_others(m, mats[p], k, others_w, others_b, use_bias)
                      for k in range(n_layers - 1)])
    return grads


# ---------------------------------------------------------------- Frank-Wolfe


def init_permutations(strategy: str, spec: PermSpec, seed=0) -> list[np.ndarray]:
    """Doubly stochastic starting points, one per hidden layer."""
    if strategy == "identity":
        return [np.eye(n) for n in spec.sizes]
    if strategy == "barycenter":
        return [np.full((n, n), 1.0 / n) for n in spec.sizes]
    if strategy == "sinkhorn":
        rng = np.random.default_rng(seed)
        out = []
        for n in spec.sizes:
            res = sinkhorn_knopp(np.exp(rng.standard_normal((n, n))))
            if not res.converged:
                log.warning("sinkhorn init did not reach tolerance for size %d", n)
            out.append(res.matrix)
        return out
    raise ValueError(f"unknown init strategy {strategy!r}")


def _renormalize(m: np.ndarray, sweeps: int = 3) -> np.ndarray:
    m = np.maximum(m, 0.0)
    for _ in range(sweeps):
        m = m / m.sum(axis=1, keepdims=True)
        m = m / m.sum(axis=0, keepdims=True)
    return m


def _blend(current, vertex, alpha):
    if alpha == 0.0:
        return current
    if alpha == 1.0:
        return vertex
    return [(1.0 - alpha) * c + alpha * v for c, v in zip(current, vertex)]


def _line_search(phi: Callable[[float], float], f0: float, degree: int, grid: int) -> tuple[float, float]:
    """Maximize ``phi`` on [0, 1]; ``phi`` is a polynomial of known ``degree``.

    The polynomial is recovered from ``degree + 1`` equally spaced samples and
    maximized via its critical points. Every candidate is re-scored with
    ``phi`` itself and alpha = 0 is always a candidate, so the returned value
    never falls below ``f0``.
    """
    xs = np.linspace(0.0, 1.0, degree + 1)
    ys = np.array([f0] + [phi(x) for x in xs[1:]])
    coeffs = np.polyfit(xs, ys, degree)
    probe = 1.0 / 3.0
    scale = max(1.0, float(np.abs(ys).max()))
    if abs(np.polyval(coeffs, probe) - phi(probe)) <= 1e-9 * scale:
        roots = np.roots(np.polyder(coeffs)) if degree > 1 else np.array([])
        cands = sorted(float(r.real) for r in roots if abs(r.imag) < 1e-12 and 0.0 < r.real < 1.0)
        scored = [(x, y) for x, y in zip(xs, ys)] + [(x, phi(x)) for x in cands]
    else:
        log.debug("polynomial line search fit rejected; using %d-point grid", grid)
        gx = np.linspace(0.0, 1.0, grid)
        scored = [(0.0, f0)] + [(float(x), phi(float(x))) for x in gx[1:]]
    best_a, best_f = 0.0, f0
    for x, y in sorted(scored):
        if y > best_f:
            best_a, best_f = float(x), float(y)
    return best_a, best_f


def _frank_wolfe(objective, gradients, iterate, degree: int, config: MatchConfig):
    """Shared Frank-Wolfe loop over a flat list of doubly stochastic matrices."""
    trace = MatchTrace()
    f = objective(iterate)
    if not np.isfinite(f):
        raise FloatingPointError("objective is not finite at the initial iterate")
    trace.objective_per_iter.append(f)
    for it in range(1, config.max_iters + 1):
        grads = gradients(iterate)
        vertex = [lap_maximize(g).matrix() for g in grads]
        alpha, f_new = _line_search(lambda a: objective(_blend(iterate, vertex, a)), f, degree,
                                    config.line_search_grid)
        if not np.isfinite(f_new):
            raise FloatingPointError(f"objective became non-finite at iteration {it}")
        iterate = _blend(iterate, vertex, alpha)
        if it % 10 == 0 and any(ds_deviation(m) > 1e-12 for m in iterate):
            iterate = [_renormalize(m) for m in iterate]
            f_new = objective(iterate)
        gain = (f_new - f) / max(1.0, abs(f))
        trace.step_sizes.append(alpha)
        trace.objective_per_iter.append(f_new)
        trace.iterations = it
        f = f_new
        if alpha < 1e-12 or gain < config.rel_tol:
            trace.converged = True
            break
    hard = [project_to_permutation(m) for m in iterate]
    return hard, trace


def fw_match_pair(a: MlpParams, b: MlpParams, config: MatchConfig = MatchConfig()) -> PairwiseMatch:
    """Match ``b`` onto ``a`` optimizing all layers jointly with Frank-Wolfe."""
    check_same_architecture(a, b)
    spec = a.perm_spec
    n_hidden = len(spec.sizes)
    if n_hidden == 0:
        return PairwiseMatch([], MatchTrace([pairwise_objective(a, b, [], config.use_bias)], [], True, 0,
                                            pairwise_objective(a, b, [], config.use_bias)))

    def objective(ps):
        return pairwise_objective(a, b, ps, config.use_bias)

    def gradients(ps):
        return [pairwise_gradient(a, b, ps, k, config.use_bias) for k in range(n_hidden)]

    start = init_permutations(config.init, spec, config.seed)
    hard, trace = _frank_wolfe(objective, gradients, start, 2, config)
    trace.final_objective = objective(hard)
    return PairwiseMatch(hard, trace)


def fw_match_multi(models: Sequence[MlpParams], config: MatchConfig = MatchConfig()) -> UniverseMatch:
    """Jointly match ``n >= 2`` models to a shared universe (cycle-consistent)."""
    models = list(models)
    if len(models) < 2:
        raise InvalidInputError("multi-model matching needs at least two models")
    check_same_architecture(*models)
    spec = models[0].perm_spec
    n, h = len(models), len(spec.sizes)
    if h == 0:
        empty = [[] for _ in models]
        val = multi_objective(models, empty, config.use_bias)
        return UniverseMatch(empty, MatchTrace([val], [], True, 0, val))

    def unflatten(flat):
        return [flat[p * h:(p + 1) * h] for p in range(n)]

    def objective(flat):
        return multi_objective(models, unflatten(flat), config.use_bias)

    def gradients(flat):
        grads = _all_multi_gradients(models, unflatten(flat), config.use_bias)
        return [g for stack in grads for g in stack]

    start = []
    for p in range(n):
        start.extend(init_permutations(config.init, spec, [config.seed, p]))
    hard, trace = _frank_wolfe(objective, gradients, start, 4, config)
    trace.final_objective = objective(hard)
    return UniverseMatch(unflatten(hard), trace)


def coordinate_descent_match(a: MlpParams, b: MlpParams, seed: int = 0, max_sweeps: int = 500,
                             use_bias: bool = True) -> PairwiseMatch:
    """Layer-at-a-time weight matching with a seeded random layer order per sweep."""
    check_same_architecture(a, b)
    spec = a.perm_spec
    perms = spec.identity()
    rng = np.random.default_rng(seed)
    trace = MatchTrace([pairwise_objective(a, b, perms, use_bias)])
    for sweep in range(1, max_sweeps + 1):
        changed = False
        for k in rng.permutation(len(perms)):
            grad = pairwise_gradient(a, b, perms, int(k), use_bias)
            cand = lap_maximize(grad)
            old_v = assignment_value(grad, perms[k])
            new_v = assignment_value(grad, cand)
            # keep the current map on ties so sweeps reach a fixed point
            if new_v > old_v + 1e-12 * max(1.0, abs(old_v)):
                perms[k] = cand
                changed = True
        trace.objective_per_iter.append(pairwise_objective(a, b, perms, use_bias))
        trace.iterations = sweep
        if not changed:
            trace.converged = True
            break
    else:
        log.warning("coordinate descent hit the sweep limit (%d) without converging", max_sweeps)
    trace.final_objective = trace.objective_per_iter[-1]
    return PairwiseMatch(perms, trace)
