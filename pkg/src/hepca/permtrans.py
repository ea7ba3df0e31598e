"""Permutation transforms used by diagonal matrix multiplication.

All maps act on a row-major n x n matrix packed into n*n slots:

* Z: A[i][j] -> A[i][i+j]          (row-wise skew)
* T: A[i][j] -> A[i+j][j]          (column-wise skew)
* C^k: A[i][j] -> A[i][j+k]        (column shift)
* R^k: A[i][j] -> A[i+k][j]        (row shift)
* G: transpose

Z and T have O(n) nonzero diagonals. The convergence decomposition rewrites
each as a product of sparse factors whose diagonals stay within a small window,
which shrinks the rotation-key set needed by the last (dense) factor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .lintrans import DiagonalMap, _canon

SIGNED_KINDS = {"Z", "C", "G"}


class DecompositionConflict(ValueError):
    pass


def _source_index(kind: str, n: int, k: int | None) -> np.ndarray:
    i, j = np.divmod(np.arange(n * n), n)
    if kind == "Z":
        return i * n + (i + j) % n
    if kind == "T":
        return ((i + j) % n) * n + j
    if kind == "C":
        return i * n + (j + k) % n
    if kind == "R":
        return ((i + k) % n) * n + j
    if kind == "G":
        return j * n + i
    raise ValueError(f"unknown permutation kind {kind!r}")


def _from_pairs(pairs, dim: int, signed: bool) -> DiagonalMap:
    diags: dict[int, np.ndarray] = {}
    for row, col in pairs:
        idx = _canon(col - row, dim, signed)
        diags.setdefault(idx, np.zeros(dim))[row] = 1.0
    return DiagonalMap(dim, diags, signed)


def gen_perm(kind: str, n: int, k: int | None = None) -> DiagonalMap:
    if kind in ("C", "R"):
        if k is None or not 1 <= k < n:
            raise ValueError(f"shift k must satisfy 1 <= k < {n}, got {k}")
    src = _source_index(kind, n, k)
    return _from_pairs(enumerate(src.tolist()), n * n, kind in SIGNED_KINDS)


class _PartialPerm:
    """A 0/1 matrix with at most one 1 per row and column."""

    def __init__(self, dim: int):
        self.dim = dim
        self.row_to_col: dict[int, int] = {}
        self.col_to_row: dict[int, int] = {}

    def set(self, row: int, col: int) -> None:
        row %= self.dim
        col %= self.dim
        if self.row_to_col.get(row, col) != col or self.col_to_row.get(col, row) != row:
            raise DecompositionConflict(f"entry ({row}, {col}) collides with an existing 1")
        self.row_to_col[row] = col
        self.col_to_row[col] = row

    def items(self):
        return sorted(self.row_to_col.items())

    def to_map(self, signed: bool) -> DiagonalMap:
        return _from_pairs(self.items(), self.dim, signed)


def decompose_diagonal(dim: int, k: int, positions, k1: int, k2: int,
                       right: _PartialPerm | None = None,
                       left: _PartialPerm | None = None):
    """Split the 1s of diagonal k (at rows ``positions``) across two factors.

    A 1 at diagonal coordinate (k, l), i.e. matrix entry (l, l+k), becomes a 1
    at (k1, k+l-k1) in the right factor and (k2, l) in the left factor, so the
    product left @ right carries it back to (l, l+k).
    """
    if (k1 + k2 - k) % dim:
        raise ValueError(f"k1 + k2 must equal k mod {dim}")
    right = right if right is not None else _PartialPerm(dim)
    left = left if left is not None else _PartialPerm(dim)
    for l in positions:
        mid = l + k - k1
        right.set(mid, l + k)
        left.set(l, mid)
    return right, left


@dataclass(frozen=True, eq=False)
class DcdChain:
    factors: tuple  # DiagonalMaps, rightmost (applied first) at index 0
    kind: str       # "Z1" | "Z2" | "T"
    target: int

    @property
    def depth(self) -> int:
        return len(self.factors)

    @property
    def leftmost(self) -> DiagonalMap:
        return self.factors[-1]

    def to_dense(self) -> np.ndarray:
        if not self.factors:
            raise ValueError("empty chain has no dimension")
        out = np.eye(self.factors[0].dim)
        for f in self.factors:
            out = f.to_dense() @ out
        return out

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "target": self.target,
            "factors": [
                {str(idx): np.flatnonzero(vec).tolist() for idx, vec in f.diags.items()}
                for f in self.factors
            ],
        }


def _converge(dim: int, entries: _PartialPerm, rounds: int, unit: int, signed: bool,
              pick) -> list[DiagonalMap]:
    """Peel off ``rounds`` right factors; ``pick(k)`` gives the right diagonal (in units)."""
    factors = []
    current = entries
    for _ in range(rounds):
        right, left = _PartialPerm(dim), _PartialPerm(dim)
        for row, col in current.items():
            k = _canon(col - row, dim, signed) // unit
            k1 = pick(k)
            decompose_diagonal(dim, k * unit, [row], k1 * unit, (k - k1) * unit, right, left)
        factors.append(right.to_map(signed))
        current = left
    factors.append(current.to_map(signed))
    return factors


def _branch(perm: DiagonalMap, keep) -> _PartialPerm:
    pp = _PartialPerm(perm.dim)
    for idx, vec in perm.diags.items():
        if keep(idx):
            for row in np.flatnonzero(vec).tolist():
                pp.set(row, row + idx)
    return pp


def _rounds(n: int, nprime: int) -> int:
    if not 1 <= nprime <= n - 1:
        raise ValueError(f"target index must satisfy 1 <= n' <= {n - 1}, got {nprime}")
    return math.ceil((n - 1) / nprime) - 1


def dcd_for_Z(n: int, nprime: int) -> tuple[DcdChain, DcdChain]:
    """Decompose Z into a nonnegative-diagonal chain and a negative one.

    Nonnegative branch: indices k >= n' move n' onto the right factor, leaving
    the leftmost factor inside [0, n'-1] when n' divides n. Negative branch:
    indices k < -n' move -n' onto the right factor, leaving [-n', -1]. Both
    leftmost factors therefore span n' consecutive indices.
    """
    rounds = _rounds(n, nprime)
    z = gen_perm("Z", n)
    dim = n * n
    pos = _converge(dim, _branch(z, lambda k: k >= 0), rounds, 1, True,
                    lambda k: nprime if k >= nprime else 0)
    neg = _converge(dim, _branch(z, lambda k: k < 0), rounds, 1, True,
                    lambda k: -nprime if k < -nprime else 0)
    return DcdChain(tuple(pos), "Z1", nprime), DcdChain(tuple(neg), "Z2", nprime)


def dcd_for_T(n: int, nprime: int) -> DcdChain:
    """Decompose T; diagonals k*n with k >= n' move n'*n onto the right factor."""
    rounds = _rounds(n, nprime)
    t = gen_perm("T", n)
    factors = _converge(n * n, _branch(t, lambda k: True), rounds, n, False,
                        lambda k: nprime if k >= nprime else 0)
    return DcdChain(tuple(factors), "T", nprime * n)


def verify_chain(chains, original: DiagonalMap) -> bool:
    if isinstance(chains, DcdChain):
        chains = [chains]
    target = original.to_dense()
    total = np.zeros_like(target)
    for chain in chains:
        total += chain.to_dense() if chain.factors else np.eye(original.dim)
    return bool(np.array_equal(total, target))


def _entries(perm: DiagonalMap) -> dict[int, tuple[int, float]]:
    out = {}
    for idx, vec in perm.diags.items():
        for row in np.flatnonzero(vec).tolist():
            if row in out:
                raise ValueError(f"row {row} has more than one nonzero")
            out[row] = ((row + idx) % perm.dim, float(vec[row]))
    return out


def verify_chain_sparse(chains, original: DiagonalMap) -> bool:
    """Exact check of sum(product of factors) == original without dense matrices.

    Every factor has at most one nonzero per row, so each chain product is
    traced row by row; products from different chains are added entrywise.
    """
    if isinstance(chains, DcdChain):
        chains = [chains]
    total: dict[tuple[int, int], float] = {}
    for chain in chains:
        if not chain.factors:
            rows = {r: (r, 1.0) for r in range(original.dim)}
        else:
            steps = [_entries(f) for f in reversed(chain.factors)]
            rows = {}
            for r, (c, val) in steps[0].items():
                for nxt in steps[1:]:
                    if c not in nxt:
                        break
                    c, v = nxt[c]
                    val *= v
                else:
                    rows[r] = (c, val)
        for r, (c, val) in rows.items():
            total[(r, c)] = total.get((r, c), 0.0) + val
    target = {(r, c): v for r, (c, v) in _entries(original).items()}
    return {key: v for key, v in total.items() if v} == target


def chains_to_json(chains) -> str:
    return json.dumps([c.to_json() for c in chains], sort_keys=True)
