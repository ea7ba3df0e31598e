"""Packed datasets and the blocked homomorphic covariance computation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .matmul import MatMulKit, combine, hmm_transpose, prepare_operand, run_parallel
from .slot_engine import CipherBlock, SlotEngine


@dataclass(frozen=True, eq=False)
class PackedDataset:
    blocks: tuple      # blocks[l][i]: row block l, feature partition i
    s: int
    t: int
    n: int
    k: int
    padding_mode: str
    valid_cols_per_block: tuple
    feature_columns: tuple  # padded column holding each original feature

    @property
    def row_blocks(self) -> int:
        return len(self.blocks)

    def padded(self) -> np.ndarray:
        n = self.n
        rows = []
        for row in self.blocks:
            rows.append(np.hstack([b.slots.reshape(n, n) for b in row]))
        return np.vstack(rows)[: self.s]

    def unpack(self) -> np.ndarray:
        return self.padded()[:, list(self.feature_columns)]


def feature_layout(t: int, n: int, padding_mode: str) -> tuple[list[int], list[int]]:
    """Valid column count per partition and the padded column of each feature."""
    k = math.ceil(t / n)
    if padding_mode == "tail":
        per = [min(n, t - i * n) for i in range(k)]
    elif padding_mode == "spread":
        pad = (k * n - t) // k
        width = n - pad
        per = [max(0, min(width, t - i * width)) for i in range(k)]
    else:
        raise ValueError(f"unknown padding mode {padding_mode!r}")
    cols = [i * n + c for i, m in enumerate(per) for c in range(m)]
    return per, cols


def pack_dataset(eng: SlotEngine, data, padding_mode: str = "tail", level: int | None = None) -> PackedDataset:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        raise ValueError(f"dataset must be a non-empty 2-D array, got shape {data.shape}")
    s, t = data.shape
    n = eng.n
    per, cols = feature_layout(t, n, padding_mode)
    k = len(per)
    rb = math.ceil(s / n)
    padded = np.zeros((rb * n, k * n))
    padded[:s, cols] = data
    blocks = tuple(
        tuple(eng.encode(padded[l * n:(l + 1) * n, i * n:(i + 1) * n].ravel(), level) for i in range(k))
        for l in range(rb)
    )
    return PackedDataset(blocks, s, t, n, k, padding_mode, tuple(per), tuple(cols))


def aggregate_keys(n: int) -> set[int]:
    steps = set()
    i = 1
    while i < n:
        steps |= {i, -i, i * n}
        i <<= 1
    return steps


def _first_column_mask(n: int) -> np.ndarray:
    return (np.arange(n * n) % n == 0).astype(float)


def aggregate(eng: SlotEngine, ct: CipherBlock, axis: int) -> CipherBlock:
    """Axis 0: every row becomes the column sums. Axis 1: every column the row sums."""
    n = eng.n
    if axis == 0:
        i = n
        while i < n * n:
            ct = eng.add(ct, eng.rotate(ct, i))
            i <<= 1
        return ct
    if axis != 1:
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    i = 1
    while i < n:
        ct = eng.add(ct, eng.rotate(ct, i))
        i <<= 1
    ct = eng.pmult(ct, _first_column_mask(n))
    i = 1
    while i < n:
        ct = eng.add(ct, eng.rotate(ct, -i))
        i <<= 1
    return ct


def column_sums(eng: SlotEngine, pd: PackedDataset) -> list[CipherBlock]:
    return [aggregate(eng, eng.sum(row[i] for row in pd.blocks), 0) for i in range(pd.k)]


def mean_blocks(eng: SlotEngine, pd: PackedDataset) -> list[CipherBlock]:
    return [eng.pmult(b, 1.0 / pd.s) for b in column_sums(eng, pd)]


@dataclass(frozen=True, eq=False)
class CovBlocks:
    grid: tuple  # grid[r][c]: rows of partition r, columns of partition c
    n: int
    symmetric: bool = True

    @property
    def k(self) -> int:
        return len(self.grid)

    @property
    def level(self) -> int:
        return min(b.level for row in self.grid for b in row)

    def to_matrix(self) -> np.ndarray:
        n = self.n
        return np.vstack([np.hstack([b.slots.reshape(n, n) for b in row]) for row in self.grid])


def encode_covariance(eng: SlotEngine, matrix, level: int | None = None) -> CovBlocks:
    """Encode a dense symmetric matrix, zero-padded to whole blocks."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    n = eng.n
    k = math.ceil(m.shape[0] / n)
    padded = np.zeros((k * n, k * n))
    padded[: m.shape[0], : m.shape[1]] = m
    grid = tuple(tuple(eng.encode(padded[r * n:(r + 1) * n, c * n:(c + 1) * n].ravel(), level)
                       for c in range(k)) for r in range(k))
    return CovBlocks(grid, n, bool(np.array_equal(m, m.T)))


@dataclass
class CovResult:
    cov: CovBlocks
    levels_used: int
    stats: dict = field(default_factory=dict)


def plain_covariance(padded: np.ndarray) -> np.ndarray:
    """Population covariance (1/s normalization) of an s x t matrix."""
    s = padded.shape[0]
    mu = padded.mean(axis=0)
    return padded.T @ padded / s - np.outer(mu, mu)


def _segments(row_blocks: int, n: int, segment_rows: int) -> list[range]:
    per = max(1, segment_rows // n)
    return [range(a, min(a + per, row_blocks)) for a in range(0, row_blocks, per)]


def hcov(eng: SlotEngine, pd: PackedDataset, kit: MatMulKit, segment_rows: int = 1408,
         workers: int = 1) -> CovResult:
    """Covariance blocks of a packed dataset.

    Gram blocks are formed only for the lower triangle, X_r^T X_c with c <= r,
    summed over row blocks in ascending order. Within each row segment every
    right operand X_c[l] is prepared once and shared by all left operands;
    each left operand X_r[l]^T / s is prepared once and multiplied against all
    c <= r. The 1/s factor rides on the transpose diagonals, and the mean
    outer products are formed from column sums with 1/s^2 folded the same way.
    Strictly-upper blocks are transposes of the corrected lower blocks and the
    diagonal blocks are symmetrized, so the result is exactly symmetric.
    """
    k, s = pd.k, pd.s
    start_level = min(b.level for row in pd.blocks for b in row)
    gram: dict[tuple[int, int], CipherBlock] = {}
    stats = {"z_preps": 0, "t_preps": 0, "products": 0, "transposes": 0, "segments": 0}

    for seg in _segments(pd.row_blocks, pd.n, segment_rows):
        stats["segments"] += 1
        right_tasks = [(c, l) for l in seg for c in range(k)]
        prepared = run_parallel(eng, [
            (lambda c, l: lambda e: prepare_operand(e, pd.blocks[l][c], "right", kit))(c, l)
            for c, l in right_tasks
        ], workers)
        right = dict(zip(right_tasks, prepared))
        stats["t_preps"] += len(right_tasks)

        def left_task(r, l):
            def run(e):
                lt = hmm_transpose(e, pd.blocks[l][r], kit, scale=1.0 / s)
                left = prepare_operand(e, lt, "left", kit)
                return [combine(e, left, right[(c, l)]) for c in range(r + 1)]
            return run

        left_tasks = [(r, l) for l in seg for r in range(k)]
        products = run_parallel(eng, [left_task(r, l) for r, l in left_tasks], workers)
        stats["z_preps"] += len(left_tasks)
        stats["transposes"] += len(left_tasks)
        for (r, l), outs in zip(left_tasks, products):
            for c, p in enumerate(outs):
                stats["products"] += 1
                gram[(r, c)] = p if (r, c) not in gram else eng.add(gram[(r, c)], p)

    sums = column_sums(eng, pd)
    lower = {}
    for r in range(k):
        sr = hmm_transpose(eng, sums[r], kit, scale=1.0 / (s * s))
        stats["transposes"] += 1
        for c in range(r + 1):
            mean_outer = eng.mult(*eng.align(sr, sums[c]))
            g, m = eng.align(gram[(r, c)], mean_outer)
            lower[(r, c)] = eng.sub(g, m)

    grid = [[None] * k for _ in range(k)]
    for r in range(k):
        for c in range(r):
            grid[c][r] = hmm_transpose(eng, lower[(r, c)], kit)
            grid[r][c] = eng.drop_level(lower[(r, c)], grid[c][r].level)
            stats["transposes"] += 1
        d = lower[(r, r)]
        grid[r][r] = eng.add(eng.pmult(d, 0.5), hmm_transpose(eng, d, kit, scale=0.5))
        stats["transposes"] += 1
    low = min(b.level for row in grid for b in row)
    grid = tuple(tuple(eng.drop_level(b, low) for b in row) for row in grid)
    return CovResult(CovBlocks(grid, pd.n, True), start_level - low, stats)


def hcov_depth(kit: MatMulKit) -> int:
    """Levels hcov consumes: transpose, product, and the symmetrizing transpose."""
    return max(kit.z_depth + 2, kit.t_depth) + 2
