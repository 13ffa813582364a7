import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclemerge.matching import (
    MatchConfig,
    MatchTrace,
    PairwiseMatch,
    UniverseMatch,
    coordinate_descent_match,
    fw_match_multi,
    fw_match_pair,
    init_permutations,
    load_match,
    multi_gradient,
    multi_objective,
    pairwise_gradient,
    pairwise_objective,
    save_match,
)
from cyclemerge.model import ShapeMismatchError, apply_permutations, random_mlp
from cyclemerge.perm import Permutation, compose, ds_deviation, invert, sinkhorn_knopp

DIMS = [4, 5, 5, 3]


def self_bound(m):
    return sum(float(np.sum(a * a)) for a in m.arrays())


def soft_perms(sizes, rng):
    return [sinkhorn_knopp(np.exp(rng.standard_normal((n, n)))).matrix for n in sizes]


def dense_pairwise(a, b, mats):
    # explicit permutation matrices padded with identities on input/output
    full = [np.eye(a.dims[0])] + list(mats) + [np.eye(a.dims[-1])]
    total = 0.0
    for i in range(a.n_layers):
        total += np.trace(a.weights[i].T @ full[i + 1] @ b.weights[i] @ full[i].T)
        total += a.biases[i] @ full[i + 1] @ b.biases[i]
    return total


def dense_multi(models, stacks):
    total = 0.0
    n_layers = models[0].n_layers
    mapped = []
    for m, stack in zip(models, stacks):
        full = [np.eye(m.dims[0])] + list(stack) + [np.eye(m.dims[-1])]
        mapped.append([(full[i + 1].T @ m.weights[i] @ full[i], full[i + 1].T @ m.biases[i])
                       for i in range(n_layers)])
    for p in range(len(models)):
        for q in range(len(models)):
            if p != q:
                for (wp, bp), (wq, bq) in zip(mapped[p], mapped[q]):
                    total += np.sum(wp * wq) + bp @ bq
    return total


def fd_gradient(f, mats, k, eps=1e-6):
    g = np.zeros_like(mats[k])
    for idx in np.ndindex(*g.shape):
        up = [m.copy() for m in mats]
        dn = [m.copy() for m in mats]
        up[k][idx] += eps
        dn[k][idx] -= eps
        g[idx] = (f(up) - f(dn)) / (2 * eps)
    return g


def rel_err(x, y):
    return np.linalg.norm(x - y) / max(np.linalg.norm(y), 1e-300)


def planted(rng, dims=DIMS):
    a = random_mlp(dims, rng)
    pi = [Permutation.random(n, rng) for n in a.perm_spec.sizes]
    return a, pi, apply_permutations(a, pi)


def test_pairwise_objective_matches_dense_oracle(tiny_pair, rng):
    a, b = tiny_pair
    mats = soft_perms(a.perm_spec.sizes, rng)
    assert pairwise_objective(a, b, mats) == pytest.approx(dense_pairwise(a, b, mats), rel=1e-12)
    hard = [Permutation.random(n, rng) for n in a.perm_spec.sizes]
    assert pairwise_objective(a, b, hard) == pytest.approx(
        dense_pairwise(a, b, [p.matrix() for p in hard]), rel=1e-12)


def test_pairwise_objective_self_at_identity(tiny_pair):
    a, _ = tiny_pair
    assert pairwise_objective(a, a, a.perm_spec.identity()) == pytest.approx(self_bound(a), rel=1e-12)


def test_pairwise_objective_rejects_mismatch(rng):
    a, b = random_mlp([4, 5, 3], rng), random_mlp([4, 6, 3], rng)
    with pytest.raises(ShapeMismatchError):
        pairwise_objective(a, b, [Permutation.identity(5)])


def test_pairwise_gradient_hand_expansion(rng):
    a, b = random_mlp([3, 4, 2], rng), random_mlp([3, 4, 2], rng)
    expected = (a.weights[0] @ b.weights[0].T + a.weights[1].T @ b.weights[1]
                + np.outer(a.biases[0], b.biases[0]))
    np.testing.assert_allclose(pairwise_gradient(a, b, [np.eye(4)], 0), expected, rtol=1e-13)


@pytest.mark.parametrize("seed", range(3))
def test_pairwise_gradient_finite_difference(seed):
    rng = np.random.default_rng(seed)
    a, b = random_mlp(DIMS, rng), random_mlp(DIMS, rng)
    mats = soft_perms(a.perm_spec.sizes, rng)
    for k in range(len(mats)):
        fd = fd_gradient(lambda ms: pairwise_objective(a, b, ms), mats, k)
        assert rel_err(pairwise_gradient(a, b, mats, k), fd) <= 1e-6


@pytest.mark.parametrize("n", [2, 3])
def test_multi_gradient_finite_difference(n):
    rng = np.random.default_rng(10 + n)
    models = [random_mlp(DIMS, rng) for _ in range(n)]
    stacks = [soft_perms(models[0].perm_spec.sizes, rng) for _ in range(n)]
    h = len(stacks[0])
    flat = [m for s in stacks for m in s]

    def f(ms):
        return multi_objective(models, [ms[p * h:(p + 1) * h] for p in range(n)])

    for p in range(n):
        for k in range(h):
            fd = fd_gradient(f, flat, p * h + k)
            assert rel_err(multi_gradient(models, stacks, p, k), fd) <= 1e-6


def test_multi_objective_dense_oracle(rng):
    models = [random_mlp(DIMS, rng) for _ in range(3)]
    stacks = [[Permutation.random(n, rng) for n in models[0].perm_spec.sizes] for _ in range(3)]
    dense = dense_multi(models, [[p.matrix() for p in s] for s in stacks])
    assert multi_objective(models, stacks) == pytest.approx(dense, rel=1e-12)


def test_multi_objective_two_models_reduces_to_pairwise(tiny_pair, rng):
    a, b = tiny_pair
    pa = [Permutation.random(n, rng) for n in a.perm_spec.sizes]
    pb = [Permutation.random(n, rng) for n in a.perm_spec.sizes]
    composed = [compose(x, invert(y)) for x, y in zip(pa, pb)]
    assert multi_objective([a, b], [pa, pb]) == pytest.approx(2 * pairwise_objective(a, b, composed), rel=1e-12)


def test_multi_gradient_two_models_at_identity(tiny_pair):
    a, b = tiny_pair
    ident = a.perm_spec.identity()
    for k in range(len(ident)):
        np.testing.assert_allclose(multi_gradient([a, b], [ident, ident], 0, k),
                                   2 * pairwise_gradient(a, b, ident, k), rtol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_fw_pair_recovers_planted(seed):
    rng = np.random.default_rng(seed)
    a, pi, b = planted(rng, [6, 10, 8, 3])
    match = fw_match_pair(a, b)
    assert match.trace.final_objective == pytest.approx(self_bound(a), rel=1e-12)
    # any permutation preserves the function, so compare parameters directly
    aligned = apply_permutations(b, match.perms)
    assert aligned.equals(a)
    assert all(p == invert(q) for p, q in zip(match.perms, pi))


def test_fw_pair_trace_monotone_and_beats_identity(spiral_models):
    a, b = spiral_models[:2]
    match = fw_match_pair(a, b)
    obj = np.array(match.trace.objective_per_iter)
    assert np.all(np.diff(obj) >= -1e-9)
    assert match.trace.final_objective >= pairwise_objective(a, b, a.perm_spec.identity())
    assert match.trace.iterations == len(match.trace.step_sizes)


@pytest.mark.parametrize("init", ["identity", "barycenter", "sinkhorn"])
def test_fw_inits_return_valid_permutations(tiny_pair, init):
    a, b = tiny_pair
    match = fw_match_pair(a, b, MatchConfig(init=init, seed=3))
    assert tuple(p.size for p in match.perms) == tuple(a.perm_spec.sizes)
    assert match.trace.final_objective == pytest.approx(pairwise_objective(a, b, match.perms), rel=1e-12)


def test_init_permutations_exact(rng):
    spec = random_mlp(DIMS, rng).perm_spec
    for m in init_permutations("identity", spec):
        np.testing.assert_array_equal(m, np.eye(m.shape[0]))
    for m in init_permutations("barycenter", spec):
        np.testing.assert_array_equal(m, np.full(m.shape, 1.0 / m.shape[0]))
    for m in init_permutations("sinkhorn", spec, seed=7):
        assert ds_deviation(m) <= 1e-8


def test_fw_deterministic_across_seeds(tiny_pair):
    a, b = tiny_pair
    runs = [fw_match_pair(a, b, MatchConfig(seed=s)) for s in range(5)]
    assert all(r.perms == runs[0].perms for r in runs)
    assert all(r.trace.objective_per_iter == runs[0].trace.objective_per_iter for r in runs)


def test_fw_multi_planted_triple_cycle_consistent(rng):
    a = random_mlp([6, 9, 7, 3], rng)
    stacks = [[Permutation.random(n, rng) for n in a.perm_spec.sizes] for _ in range(2)]
    models = [a] + [apply_permutations(a, s) for s in stacks]
    match = fw_match_multi(models)
    n = len(models)
    assert match.trace.final_objective == pytest.approx(n * (n - 1) * self_bound(a), rel=1e-12)
    for k in range(len(a.perm_spec.sizes)):
        # A -> B -> C -> A
        loop = compose(match.pairwise(0, 2)[k], compose(match.pairwise(2, 1)[k], match.pairwise(1, 0)[k]))
        assert loop.is_identity()


def test_fw_multi_monotone(rng):
    models = [random_mlp([5, 8, 6, 2], rng) for _ in range(4)]
    match = fw_match_multi(models)
    assert np.all(np.diff(match.trace.objective_per_iter) >= -1e-9)
    assert match.n_models == 4


def test_fw_multi_needs_two_models(tiny_pair):
    with pytest.raises(ValueError):
        fw_match_multi([tiny_pair[0]])


def test_match_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(init="random")
    with pytest.raises(ValueError):
        MatchConfig(max_iters=0)


def test_match_json_roundtrip(tiny_pair, tmp_path):
    a, b = tiny_pair
    pm = fw_match_pair(a, b)
    save_match(pm, tmp_path / "p.json")
    back = load_match(tmp_path / "p.json")
    assert isinstance(back, PairwiseMatch) and back.perms == pm.perms
    assert back.trace.objective_per_iter == pm.trace.objective_per_iter
    um = fw_match_multi([a, b, a])
    save_match(um, tmp_path / "u.json")
    back = load_match(tmp_path / "u.json")
    assert isinstance(back, UniverseMatch) and back.perms == um.perms
    assert MatchTrace.from_json(um.trace.to_json()) == um.trace


def test_coordinate_descent_recovers_planted(rng):
    a, _, b = planted(rng, [6, 10, 8, 3])
    match = coordinate_descent_match(a, b, seed=0)
    assert pairwise_objective(a, b, match.perms) == pytest.approx(self_bound(a), rel=1e-12)


def test_coordinate_descent_varies_with_seed(spiral_models):
    a, b = spiral_models[:2]
    sets = {tuple(tuple(p.map) for p in coordinate_descent_match(a, b, seed=s).perms) for s in range(10)}
    assert len(sets) >= 2


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fw_never_worse_than_identity_property(seed):
    rng = np.random.default_rng(seed)
    a, b = random_mlp([3, 6, 5, 2], rng), random_mlp([3, 6, 5, 2], rng)
    match = fw_match_pair(a, b)
    assert match.trace.final_objective >= pairwise_objective(a, b, a.perm_spec.identity()) - 1e-9
