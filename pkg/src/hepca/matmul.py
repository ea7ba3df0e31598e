"""Blocked n x n matrix multiplication over packed slots.

c = sum_k (C^k Z a) * (R^k T b). Z and T are evaluated either directly with
double-hoisted BSGS or through their convergence-decomposition chains; the
shifted families {C^k Z a} and {R^k T b} reuse the inner-loop rotation keys via
hoisted hop chains.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .lintrans import (BsgsPlan, DiagonalMap, apply_bsgs_dh, apply_naive, plan_bsgs,
                       required_steps)
from .permtrans import DcdChain, dcd_for_T, dcd_for_Z, gen_perm
from .slot_engine import CipherBlock, CostLedger, DepthExhaustedError, SlotEngine


@dataclass(frozen=True)
class MatMulConfig:
    """Matrix multiplication knobs.

    ``nz``/``nt`` are the target maximum diagonal indices of the decomposed Z
    and T (T's in units of n); ``None`` applies Z or T undecomposed.
    """

    n: int
    nz: int | None = None
    nt: int | None = None
    n1_z: int = 2
    n1_t: int = 2
    n1_g: int | None = None
    cache_policy: str = "one_to_many"

    def __post_init__(self):
        for name in ("nz", "nt"):
            v = getattr(self, name)
            if v is not None and not 1 <= v <= self.n - 1:
                raise ValueError(f"{name} must lie in [1, {self.n - 1}], got {v}")
        if self.n1_z < 1 or self.n1_t < 1:
            raise ValueError("inner loop counts must be positive")
        if self.cache_policy not in ("none", "one_to_many"):
            raise ValueError(f"unknown cache policy {self.cache_policy!r}")


@dataclass(frozen=True, eq=False)
class _Chain:
    factors: tuple   # right factors, applied first
    leftmost: tuple  # (DiagonalMap, BsgsPlan) pairs summed at the end

    @property
    def depth(self) -> int:
        return len(self.factors) + 1

    def keys(self) -> set[int]:
        steps = set()
        for f in self.factors:
            steps |= {i for i in f.indices() if i}
        for _, plan in self.leftmost:
            steps |= required_steps(plan)
        return steps


def _z_chain(cfg: MatMulConfig) -> list[_Chain]:
    if cfg.nz is None:
        z = gen_perm("Z", cfg.n)
        return [_Chain((), ((z, plan_bsgs(z, cfg.n1_z)),))]
    return [_Chain(c.factors[:-1], ((c.leftmost, plan_bsgs(c.leftmost, cfg.n1_z)),))
            for c in dcd_for_Z(cfg.n, cfg.nz)]


def _t_chain(cfg: MatMulConfig) -> _Chain:
    if cfg.nt is None:
        t = gen_perm("T", cfg.n)
        return _Chain((), ((t, plan_bsgs(t, cfg.n1_t)),))
    c = dcd_for_T(cfg.n, cfg.nt)
    return _Chain(c.factors[:-1], ((c.leftmost, plan_bsgs(c.leftmost, cfg.n1_t)),))


def _column_masks(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    cols = np.tile(np.arange(n), n)
    return [((cols < n - k).astype(float), (cols >= n - k).astype(float)) for k in range(n)]


class MatMulKit:
    """Precomputed plans, masks and key sets for one configuration."""

    def __init__(self, cfg: MatMulConfig):
        self.cfg = cfg
        n = cfg.n
        self.z_chains = _z_chain(cfg)
        self.t_chain = _t_chain(cfg)
        self.z_depth = max(c.depth for c in self.z_chains)
        self.t_depth = self.t_chain.depth
        # group sizes of the hop chains: the baby counts of the Z/T plans
        self.c_group = max(p.d1 for c in self.z_chains for _, p in c.leftmost)
        self.r_group = self.t_chain.leftmost[0][1].d1
        self.masks = _column_masks(n)
        g = gen_perm("G", n)
        n1_g = cfg.n1_g or 1 << math.ceil(math.log2(math.sqrt(2 * n)))
        self.g_map = g
        self.g_plan = plan_bsgs(g, n1_g, stride=n - 1)

    @property
    def n(self) -> int:
        return self.cfg.n

    @property
    def chain_depth(self) -> int:
        return max(self.z_depth, self.t_depth)

    @property
    def mult_depth(self) -> int:
        """Levels consumed by one product: column shifts cost one, row shifts none."""
        return max(self.z_depth + 1, self.t_depth) + 1

    def z_keys(self) -> set[int]:
        out = set()
        for c in self.z_chains:
            out |= c.keys()
        return out

    def t_keys(self) -> set[int]:
        return self.t_chain.keys()

    def c_keys(self) -> set[int]:
        n, g = self.n, self.c_group
        steps = set(range(1, min(g, n))) | {-n}
        if g < n:
            steps.add(g)
        return steps

    def r_keys(self) -> set[int]:
        n, g = self.n, self.r_group
        steps = {n * r for r in range(1, min(g, n))}
        if g < n:
            steps.add(n * g)
        return steps

    def g_keys(self) -> set[int]:
        return required_steps(self.g_plan)

    def mult_keys(self) -> set[int]:
        return self.z_keys() | self.t_keys() | self.c_keys() | self.r_keys()

    def all_keys(self) -> set[int]:
        return self.mult_keys() | self.g_keys()

    def register(self, eng: SlotEngine) -> None:
        eng.register_keys(self.all_keys())


@functools.lru_cache(maxsize=64)
def get_kit(cfg: MatMulConfig) -> MatMulKit:
    return MatMulKit(cfg)


def _apply_chain(eng: SlotEngine, ct: CipherBlock, chain: _Chain) -> CipherBlock:
    for f in chain.factors:
        ct = apply_naive(eng, ct, f)
    outs = [apply_bsgs_dh(eng, ct, U, plan) for U, plan in chain.leftmost]
    return eng.sum(outs)


def apply_z(eng: SlotEngine, ct: CipherBlock, kit: MatMulKit) -> CipherBlock:
    outs = [_apply_chain(eng, ct, c) for c in kit.z_chains]
    return eng.sum(eng.align(*outs))


def apply_t(eng: SlotEngine, ct: CipherBlock, kit: MatMulKit) -> CipherBlock:
    return _apply_chain(eng, ct, kit.t_chain)


def _hop_chain(eng: SlotEngine, base: CipherBlock, unit: int, group: int, count: int,
               dec_in=None):
    """Rotations rot(base, unit*k) for 1 <= k < count, hoisted in groups.

    Group q starts from base_q = rot(base, unit*group*q), reached by one hop
    from the previous group. The chain input and each group base are
    decomposed, so the schedule costs (count/group + 1) Decompose and one
    Permute/MultSum per produced rotation. Group bases come back as
    ciphertexts, all other rotations stay hoisted. Returns the rotations and
    the input decomposition so callers can hop elsewhere from it.
    """
    out: dict[int, CipherBlock | object] = {}
    dec_in = dec_in if dec_in is not None else eng.hoist_decompose(base)
    hop_from = dec_in
    cur = base
    for q in range(-(-count // group)):
        if q:
            cur = eng.moddown(eng.hoist_rotate(hop_from, unit * group))
            out[q * group] = cur
        dec = eng.hoist_decompose(cur)
        for r in range(1, group):
            k = q * group + r
            if k >= count:
                break
            out[k] = eng.hoist_rotate(dec, unit * r)
        hop_from = dec
    return out, dec_in


def row_shifts(eng: SlotEngine, base: CipherBlock, kit: MatMulKit) -> list[CipherBlock]:
    n = kit.n
    rots, _ = _hop_chain(eng, base, n, kit.r_group, n)
    shifted = [base]
    for k in range(1, n):
        r = rots[k]
        shifted.append(r if isinstance(r, CipherBlock) else eng.moddown(r))
    return shifted


def column_shifts(eng: SlotEngine, base: CipherBlock, kit: MatMulKit) -> list[CipherBlock]:
    n = kit.n
    g = kit.c_group
    pos, dec_in = _hop_chain(eng, base, 1, g, n)
    # the negative family starts one hop of -n away from the input
    neg_base = eng.moddown(eng.hoist_rotate(dec_in, -n))
    neg, _ = _hop_chain(eng, neg_base, 1, g, n)
    neg[0] = neg_base
    shifted = [base]
    for k in range(1, n):
        keep, wrap = kit.masks[k]
        parts = []
        for h, mask in ((pos[k], keep), (neg[k], wrap)):
            if isinstance(h, CipherBlock):
                h = eng.lift(h)
            parts.append(eng.hoist_pmult(h, mask))
        shifted.append(eng.moddown(eng.hoist_add(*parts)))
    return shifted


@dataclass(frozen=True, eq=False)
class PreparedOperand:
    base: CipherBlock
    shifted: tuple
    side: str
    chain_cost: CostLedger = field(default_factory=CostLedger)
    shift_cost: CostLedger = field(default_factory=CostLedger)


def prepare_operand(eng: SlotEngine, ct: CipherBlock, side: str, kit: MatMulKit) -> PreparedOperand:
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    need = kit.z_depth + 1 if side == "left" else kit.t_depth
    if ct.level < need:
        raise DepthExhaustedError(f"{side} operand needs level >= {need}, has {ct.level}")
    start = eng.ledger.copy()
    base = apply_z(eng, ct, kit) if side == "left" else apply_t(eng, ct, kit)
    mid = eng.ledger.copy()
    shifted = column_shifts(eng, base, kit) if side == "left" else row_shifts(eng, base, kit)
    end = eng.ledger.copy()
    return PreparedOperand(base, tuple(shifted), side, mid - start, end - mid)


def combine(eng: SlotEngine, left: PreparedOperand, right: PreparedOperand) -> CipherBlock:
    level = min(min(b.level for b in left.shifted), min(b.level for b in right.shifted))
    if level < 1:
        raise DepthExhaustedError("no level left for the block product")
    acc = None
    for a, b in zip(left.shifted, right.shifted):
        term = eng.mult(eng.drop_level(a, level), eng.drop_level(b, level))
        acc = term if acc is None else eng.add(acc, term)
    return acc


def hmm_mult(eng: SlotEngine, ct_a: CipherBlock, ct_b: CipherBlock, kit: MatMulKit) -> CipherBlock:
    left = prepare_operand(eng, ct_a, "left", kit)
    right = prepare_operand(eng, ct_b, "right", kit)
    return combine(eng, left, right)


def hmm_transpose(eng: SlotEngine, ct: CipherBlock, kit: MatMulKit, scale: float = 1.0) -> CipherBlock:
    """Transpose via G; ``scale`` is folded into the plaintext diagonals."""
    g = kit.g_map
    if scale != 1.0:
        g = DiagonalMap(g.dim, {i: v * scale for i, v in g.diags.items()}, g.signed)
    return apply_bsgs_dh(eng, ct, g, kit.g_plan)


def run_parallel(eng: SlotEngine, tasks, workers: int = 1) -> list:
    """Run ``task(engine)`` callables on forked engines; merge ledgers in order."""
    forks = [eng.fork() for _ in tasks]
    if workers <= 1 or len(tasks) <= 1:
        results = [t(f) for t, f in zip(tasks, forks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda tf: tf[0](tf[1]), zip(tasks, forks)))
    eng.merge(f.ledger for f in forks)
    return results


def one_to_many(eng: SlotEngine, ct_a: CipherBlock, cts_b, kit: MatMulKit,
                workers: int = 1) -> list[CipherBlock]:
    left = prepare_operand(eng, ct_a, "left", kit)

    def task(ct_b):
        return lambda e: combine(e, left, prepare_operand(e, ct_b, "right", kit))

    return run_parallel(eng, [task(b) for b in cts_b], workers)


def cost_report(kit: MatMulKit, ledger: CostLedger, levels_used: int) -> dict:
    cfg = kit.cfg
    return {
        "n": cfg.n,
        "n1_Z": cfg.n1_z,
        "n1_T": cfg.n1_t,
        "nZ'": cfg.nz,
        "nT'": cfg.nt,
        "keys": len(kit.mult_keys()),
        "dp": ledger.dp,
        "pm": ledger.pm,
        "ms": ledger.ms,
        "md": ledger.md,
        "mults": ledger.ct_mult,
        "levels_used": levels_used,
    }
