"""Permutations, doubly stochastic matrices and linear assignment.

Matrix convention: the matrix of a permutation ``p`` has ``P[i, p.map[i]] = 1``,
so ``P @ x == x[p.map]``.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

DEFAULT_DS_TOL = 1e-8


class InvalidInputError(ValueError):
    pass


class Permutation:
    """A bijection on ``{0, ..., n-1}`` stored as an index map."""

    __slots__ = ("_map",)

    def __init__(self, mapping: Sequence[int] | np.ndarray):
        arr = np.asarray(mapping)
        if arr.ndim != 1:
            raise InvalidInputError("permutation map must be one-dimensional")
        if arr.size and not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise InvalidInputError("permutation map must hold integers")
        arr = arr.astype(np.int64)
        n = arr.size
        if n and (arr.min() < 0 or arr.max() >= n or np.unique(arr).size != n):
            raise InvalidInputError(f"not a bijection on range({n}): {arr.tolist()}")
        arr.setflags(write=False)
        self._map = arr

    @property
    def map(self) -> np.ndarray:
        return self._map

    @property
    def size(self) -> int:
        return int(self._map.size)

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Permutation):
            return NotImplemented
        return self.size == other.size and bool(np.array_equal(self._map, other._map))

    def __hash__(self) -> int:
        return hash(self._map.tobytes())

    def __repr__(self) -> str:
        return f"Permutation({self._map.tolist()})"

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "Permutation":
        return cls(rng.permutation(n))

    @classmethod
    def from_matrix(cls, m: np.ndarray, tol: float = DEFAULT_DS_TOL) -> "Permutation":
        m = np.asarray(m, dtype=float)
        if not is_permutation_matrix(m, tol):
            raise InvalidInputError("matrix is not a permutation matrix")
        return cls(np.argmax(m, axis=1))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self._map, np.arange(self.size)))

    def matrix(self) -> np.ndarray:
        out = np.zeros((self.size, self.size))
        out[np.arange(self.size), self._map] = 1.0
        return out

    def to_json(self) -> dict:
        return {"n": self.size, "map": self._map.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "Permutation":
        try:
            n, mapping = int(doc["n"]), doc["map"]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed permutation document: {exc}") from exc
        if len(mapping) != n:
            raise InvalidInputError(f"permutation length {len(mapping)} != n={n}")
        return cls(mapping)


def compose(p: Permutation, q: Permutation) -> Permutation:
    """Permutation whose matrix is ``P @ Q``."""
    if p.size != q.size:
        raise InvalidInputError(f"size mismatch: {p.size} vs {q.size}")
    return Permutation(q.map[p.map])


def invert(p: Permutation) -> Permutation:
    inv = np.empty_like(p.map)
    inv[p.map] = np.arange(p.size)
    return Permutation(inv)


def is_permutation_matrix(m: np.ndarray, tol: float = DEFAULT_DS_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    near_one = np.abs(m - 1.0) <= tol
    near_zero = np.abs(m) <= tol
    if not np.all(near_one | near_zero):
        return False
    return bool(np.all(near_one.sum(axis=0) == 1) and np.all(near_one.sum(axis=1) == 1))


def ds_deviation(m: np.ndarray) -> float:
    """Largest absolute deviation of a row or column sum from one."""
    return float(max(np.abs(m.sum(axis=1) - 1.0).max(), np.abs(m.sum(axis=0) - 1.0).max()))


def is_doubly_stochastic(m: np.ndarray, tol: float = DEFAULT_DS_TOL) -> bool:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or not np.all(np.isfinite(m)):
        return False
    if m.size == 0:
        return True
    return bool(m.min() >= -tol and ds_deviation(m) <= tol)


def check_doubly_stochastic(m: np.ndarray, tol: float = DEFAULT_DS_TOL) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if not is_doubly_stochastic(m, tol):
        raise InvalidInputError("matrix is not doubly stochastic within tolerance")
    return m


def _check_profit(profit) -> np.ndarray:
    profit = np.asarray(profit, dtype=float)
    if profit.ndim != 2 or profit.shape[0] != profit.shape[1]:
        raise InvalidInputError(f"profit matrix must be square, got shape {profit.shape}")
    if not np.all(np.isfinite(profit)):
        raise InvalidInputError("profit matrix has non-finite entries")
    return profit


def assignment_value(profit: np.ndarray, p: Permutation) -> float:
    """Sum of ``profit[i, p(i)]`` accumulated in row order."""
    profit = np.asarray(profit, dtype=float)
    total = 0.0
    for i, j in enumerate(p.map):
        total += profit[i, j]
    return total


def _row_potentials(w: np.ndarray) -> np.ndarray:
    # Bellman-Ford from a virtual source joined to every row with weight 0.
    # The graph has no negative cycle because the assignment is optimal.
    d = np.zeros(w.shape[0])
    for _ in range(w.shape[0] + 1):
        nd = np.minimum(d, (d[:, None] + w).min(axis=0))
        if np.array_equal(nd, d):
            break
        d = nd
    return d


def _augment_path(tight: np.ndarray, match_row: np.ndarray, match_col: np.ndarray,
                  start_row: int, target_col: int, banned_col: int, min_row: int) -> list | None:
    """BFS for an alternating path from ``start_row`` to ``target_col``.

    Rows below ``min_row`` are frozen, so the columns they own are off limits.
    Returns the list of (row, new column) reassignments or None.
    """
    n = tight.shape[0]
    usable = np.ones(n, dtype=bool)
    usable[banned_col] = False
    usable &= (match_col >= min_row) | (np.arange(n) == target_col)
    parent_row = np.full(n, -1)  # column -> row that reached it
    seen_row = np.zeros(n, dtype=bool)
    seen_row[start_row] = True
    frontier = [start_row]
    while frontier:
        nxt = []
        for r in frontier:
            cols = np.flatnonzero(tight[r] & usable & (parent_row < 0))
            for c in cols:
                parent_row[c] = r
                if c == target_col:
                    path = []
                    while True:
                        row = parent_row[c]
                        path.append((row, c))
                        if row == start_row:
                            return path
                        c = match_row[row]
            for c in cols:
                owner = match_col[c]
                if not seen_row[owner]:
                    seen_row[owner] = True
                    nxt.append(owner)
        frontier = nxt
    return None


def _lexicographic_optimum(profit: np.ndarray, cols: np.ndarray, tol: float) -> np.ndarray:
    """Smallest assignment vector among those tied with the optimum ``cols``."""
    n = profit.shape[0]
    diag = profit[np.arange(n), cols]
    # w[i, k]: cost change if row i takes the column currently held by row k
    w = diag[None, :] - profit[:, cols]
    d = _row_potentials(w)
    reduced = w + d[:, None] - d[None, :]
    tight_rows = reduced <= tol
    tight = np.zeros((n, n), dtype=bool)
    tight[:, cols] = tight_rows
    if np.count_nonzero(tight) == n:
        return cols

    match_row = cols.copy()
    match_col = np.empty(n, dtype=np.int64)
    match_col[match_row] = np.arange(n)
    for i in range(n):
        current = match_row[i]
        for j in np.flatnonzero(tight[i]):
            if j >= current:
                break
            k = match_col[j]
            if k < i:
                continue
            path = _augment_path(tight, match_row, match_col, k, current, j, i + 1)
            if path is None:
                continue
            for row, col in path:
                match_row[row] = col
                match_col[col] = row
            match_row[i] = j
            match_col[j] = i
            break
    return match_row


def lap_maximize(profit, tol: float | None = None) -> Permutation:
    """Permutation maximizing ``sum_i profit[i, p(i)]``.

    Among optimal assignments (ties within ``tol``) the lexicographically
    smallest assignment vector is returned.
    """
    profit = _check_profit(profit)
    n = profit.shape[0]
    if n == 0:
        return Permutation([])
    _, cols = linear_sum_assignment(profit, maximize=True)
    if tol is None:
        tol = 1e-12 * n * max(1.0, float(np.abs(profit).max()))
    return Permutation(_lexicographic_optimum(profit, cols.astype(np.int64), tol))


def project_to_permutation(soft, tol: float = DEFAULT_DS_TOL) -> Permutation:
    """Nearest vertex of the Birkhoff polytope, i.e. argmax ``<soft, P>``."""
    soft = check_doubly_stochastic(soft, tol)
    if is_permutation_matrix(soft, tol):
        return Permutation(np.argmax(soft, axis=1))
    return lap_maximize(soft)


class SinkhornResult(NamedTuple):
    matrix: np.ndarray
    converged: bool
    iterations: int


def sinkhorn_knopp(m, max_iters: int = 1000, tol: float = DEFAULT_DS_TOL) -> SinkhornResult:
    """Alternating row/column normalization of a strictly positive matrix."""
    m = np.array(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {m.shape}")
    if max_iters < 1:
        raise InvalidInputError("max_iters must be >= 1")
    if not np.all(np.isfinite(m)) or np.any(m <= 0):
        raise InvalidInputError("sinkhorn_knopp needs strictly positive finite entries")
    if ds_deviation(m) < tol:
        return SinkhornResult(m, True, 0)
    for it in range(1, max_iters + 1):
        m /= m.sum(axis=1, keepdims=True)
        m /= m.sum(axis=0, keepdims=True)
        np.maximum(m, 0.0, out=m)
        if ds_deviation(m) < tol:
            return SinkhornResult(m, True, it)
    return SinkhornResult(m, False, max_iters)
