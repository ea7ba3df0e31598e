"""Diagonal-encoded linear transforms on slot vectors.

A matrix U acting on n*n slots is stored by its generalized diagonals
u_l[i] = U[i, (l + i) mod N], so that U m = sum_l u_l * rot(m, l).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .slot_engine import CipherBlock, SlotEngine


class PlanningError(ValueError):
    pass


def _canon(index: int, dim: int, signed: bool) -> int:
    index = int(index) % dim
    if signed and index > dim // 2:
        index -= dim
    return index


@dataclass(frozen=True, eq=False)
class DiagonalMap:
    dim: int
    diags: dict
    signed: bool = False

    def __post_init__(self):
        clean = {}
        for idx, vec in self.diags.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise ValueError(f"diagonal {idx} has shape {vec.shape}, expected ({self.dim},)")
            if not np.any(vec):
                continue
            key = _canon(idx, self.dim, self.signed)
            clean[key] = clean.get(key, 0) + vec
        object.__setattr__(self, "diags", dict(sorted(clean.items())))

    def indices(self) -> list[int]:
        return list(self.diags)

    def get(self, index: int):
        return self.diags.get(_canon(index, self.dim, self.signed))

    def to_dense(self) -> np.ndarray:
        mat = np.zeros((self.dim, self.dim))
        rows = np.arange(self.dim)
        for idx, vec in self.diags.items():
            mat[rows, (rows + idx) % self.dim] = vec
        return mat

    def apply_plain(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64)
        out = np.zeros(self.dim)
        for idx, u in self.diags.items():
            out += u * np.roll(vec, -idx)
        return out

    def with_convention(self, signed: bool) -> DiagonalMap:
        return DiagonalMap(self.dim, self.diags, signed)


def diagonals_of(matrix, signed: bool = False) -> DiagonalMap:
    """Extract the nonzero generalized diagonals of a square matrix."""
    mat = np.asarray(matrix, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        from .slot_engine import ShapeError
        raise ShapeError(f"expected a square matrix, got shape {mat.shape}")
    dim = mat.shape[0]
    rows = np.arange(dim)
    diags = {}
    for idx in range(dim):
        vec = mat[rows, (rows + idx) % dim]
        if np.any(vec):
            diags[idx] = vec.copy()
    return DiagonalMap(dim, diags, signed)


def apply_naive(eng: SlotEngine, ct: CipherBlock, U: DiagonalMap) -> CipherBlock:
    terms = []
    for idx, u in U.diags.items():
        rotated = ct if idx == 0 else eng.rotate(ct, idx)
        terms.append(eng.pmult(rotated, u))
    if not terms:
        return eng.pmult(ct, 0.0)
    return eng.sum(terms)


@dataclass(frozen=True)
class BsgsPlan:
    """Baby-step giant-step schedule for a map whose indices are multiples of a.

    Index a*k is evaluated as a*(d1*i + j) with baby j in [0, d1) and giant i.
    ``baby`` and ``giant`` list the slots actually touched by nonzero diagonals.
    """

    a: int
    d1: int
    d2: int
    two_sided: bool
    baby: tuple
    giant: tuple
    dim: int

    def coord(self, k: int) -> tuple[int, int]:
        return k // self.d1, k % self.d1


def _progression_coords(U: DiagonalMap, a: int) -> dict[int, int]:
    """Map each stored index to its integer multiple k with a*k == index mod dim."""
    coords = {}
    if math.gcd(a, U.dim) == 1:
        inv = pow(a, -1, U.dim)
        for idx in U.diags:
            coords[idx] = _canon(idx * inv, U.dim, True)
        return coords
    for idx in U.diags:
        if idx % a:
            raise PlanningError(f"diagonal {idx} is not a multiple of stride {a}")
        coords[idx] = idx // a
    return coords


def plan_bsgs(U: DiagonalMap, d1: int, stride: int | None = None) -> BsgsPlan:
    if d1 < 1:
        raise PlanningError(f"inner loop count must be >= 1, got {d1}")
    nonzero = [idx for idx in U.diags if idx != 0]
    if stride is None:
        stride = math.gcd(*nonzero) if nonzero else 1
        stride = abs(stride) or 1
    coords = _progression_coords(U, stride)
    ks = sorted(coords.values()) or [0]
    lo, hi = min(ks[0], 0), max(ks[-1], 0)
    d1 = min(d1, hi - lo + 1)
    two_sided = lo < 0
    span = max(-lo, hi + 1)
    d2 = -(-span // d1)
    baby = sorted({k % d1 for k in coords.values()})
    giant = sorted({k // d1 for k in coords.values()})
    return BsgsPlan(stride, d1, d2, two_sided, tuple(baby), tuple(giant), U.dim)


def required_steps(plan: BsgsPlan) -> set[int]:
    steps = {plan.a * j for j in plan.baby if j}
    steps |= {plan.a * plan.d1 * i for i in plan.giant if i}
    return {s for s in steps if s % plan.dim}


def _grouped(U: DiagonalMap, plan: BsgsPlan) -> dict[int, list[tuple[int, np.ndarray]]]:
    coords = _progression_coords(U, plan.a)
    groups: dict[int, list] = {}
    for idx, k in coords.items():
        i, j = plan.coord(k)
        shift = plan.a * plan.d1 * i
        # pre-rotate the diagonal by -shift on the plaintext side
        groups.setdefault(i, []).append((j, np.roll(U.diags[idx], shift)))
    for i in groups:
        groups[i].sort(key=lambda t: t[0])
    return dict(sorted(groups.items()))


def apply_bsgs_dh(eng: SlotEngine, ct: CipherBlock, U: DiagonalMap, plan: BsgsPlan) -> CipherBlock:
    """Double-hoisted BSGS evaluation.

    Every baby slot shares one Decompose. Each giant slot folds its inner sum
    in the extended modulus, brings it down once, and is rotated hoisted; the
    giant results are accumulated before a single final ModDown. Identity slots
    are scheduled like any other slot, so the phase counts are
    (|baby| + |giant|) Permute/MultSum and (|giant| + 1) Decompose/ModDown.
    """
    groups = _grouped(U, plan)
    dec = eng.hoist_decompose(ct)
    babies = {j: eng.hoist_rotate(dec, plan.a * j) for j in plan.baby}
    acc = None
    for i, terms in groups.items():
        inner = None
        for j, pt in terms:
            term = eng.hoist_pmult(babies[j], pt)
            inner = term if inner is None else eng.hoist_add(inner, term)
        down = eng.moddown(inner)
        giant = eng.hoist_rotate(eng.hoist_decompose(down), plan.a * plan.d1 * i)
        acc = giant if acc is None else eng.hoist_add(acc, giant)
    if acc is None:
        return eng.pmult(ct, 0.0)
    return eng.moddown(acc)


def apply_bsgs(eng: SlotEngine, ct: CipherBlock, U: DiagonalMap, plan: BsgsPlan) -> CipherBlock:
    """Plain BSGS with every rotation a full key switch (no hoisting)."""
    groups = _grouped(U, plan)
    babies = {j: eng.rotate(ct, plan.a * j) for j in plan.baby}
    outs = []
    for i, terms in groups.items():
        inner = eng.sum(eng.pmult(babies[j], pt) for j, pt in terms)
        outs.append(eng.rotate(inner, plan.a * plan.d1 * i))
    if not outs:
        return eng.pmult(ct, 0.0)
    return eng.sum(outs)


def bsgs_phase_formula(plan: BsgsPlan) -> dict:
    """Closed-form phase counts of apply_bsgs_dh for a plan."""
    rot = len(plan.baby) + len(plan.giant)
    ks = len(plan.giant) + 1
    return {"dp": ks, "pm": rot, "ms": rot, "md": ks}


def key_substitution_estimate(n1: int, n2: int, n1_sub: int, two_sided: bool) -> dict:
    """Keys and phase counts when baby keys are thinned to steps below n1_sub.

    Missing baby steps are reached by chaining through multiples of n1_sub,
    one extra hoisted pass per chain link.
    """
    if n1 % n1_sub:
        raise ValueError("substitute inner count must divide the inner count")
    giants = 2 * n2 if two_sided else n2
    links = n1 // n1_sub
    keys = n1_sub + giants - 2
    rot = n1 + giants
    ks = giants + links + 1
    return {"keys": keys, "dp": ks, "pm": rot, "ms": rot, "md": ks}
