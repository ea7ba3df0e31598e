"""Homomorphic power-method PCA over packed covariance blocks.

Vectors live replicated inside k blocks: axis 0 means every row of a block
holds the segment (row-replicated), axis 1 means every column does. Each
covariance transform flips the axis. Normalization is lazy: 1/||y|| comes from
a Taylor initial guess refined by a planned number of Newton steps, and the
plan is chosen offline by simulating the worst-case contraction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .covariance import CovBlocks, aggregate, feature_layout
from .matmul import run_parallel
from .slot_engine import CipherBlock, DepthExhaustedError, SlotEngine


class PlanningInfeasible(ValueError):
    def __init__(self, round_index: int, message: str):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index


class DegenerateSpectrumWarning(UserWarning):
    pass


# replicated vectors

@dataclass(frozen=True, eq=False)
class ReplicatedVector:
    blocks: tuple
    axis: int
    n: int

    @property
    def k(self) -> int:
        return len(self.blocks)

    @property
    def level(self) -> int:
        return min(b.level for b in self.blocks)

    def values(self) -> np.ndarray:
        """Logical vector of length k*n, read from row 0 or column 0."""
        n = self.n
        segs = []
        for b in self.blocks:
            m = b.slots.reshape(n, n)
            segs.append(m[0] if self.axis == 0 else m[:, 0])
        return np.concatenate(segs)


def _replicated_slots(segment: np.ndarray, axis: int) -> np.ndarray:
    n = len(segment)
    m = np.tile(segment, (n, 1)) if axis == 0 else np.tile(segment[:, None], (1, n))
    return m.ravel()


def pad_vector(values, n: int, padding_mode: str = "tail") -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    per, cols = feature_layout(len(values), n, padding_mode)
    out = np.zeros(len(per) * n)
    out[cols] = values
    return out


def replicate(eng: SlotEngine, values, axis: int, padding_mode: str | None = "tail",
              level: int | None = None) -> ReplicatedVector:
    """Encode a vector as k replicated blocks.

    With ``padding_mode=None`` the input must already have padded length k*n.
    """
    if axis not in (0, 1):
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    n = eng.n
    vec = np.asarray(values, dtype=np.float64).ravel()
    if padding_mode is not None:
        vec = pad_vector(vec, n, padding_mode)
    elif len(vec) % n:
        raise ValueError(f"padded vector length {len(vec)} is not a multiple of {n}")
    blocks = tuple(eng.encode(_replicated_slots(vec[i * n:(i + 1) * n], axis), level)
                   for i in range(len(vec) // n))
    return ReplicatedVector(blocks, axis, n)


def replicated_total(eng: SlotEngine, ct: CipherBlock, axis: int) -> CipherBlock:
    """Sum a replicated block's segment into every slot, with no mask.

    Because all rows (axis 0) or all columns (axis 1) are equal, a cyclic
    shift of the whole slot vector acts as a shift inside each copy.
    """
    n = eng.n
    unit = 1 if axis == 0 else n
    i = 1
    while i < n:
        ct = eng.add(ct, eng.rotate(ct, i * unit))
        i <<= 1
    return ct


def broadcast_exact(eng: SlotEngine, ct: CipherBlock) -> CipherBlock:
    """Copy slot 0 into every slot so all slots hold bit-identical values."""
    mask = np.zeros(eng.slots)
    mask[0] = 1.0
    ct = eng.pmult(ct, mask)
    i = 1
    while i < eng.slots:
        ct = eng.add(ct, eng.rotate(ct, -i))
        i <<= 1
    return ct


def broadcast_keys(n: int) -> set[int]:
    steps = set()
    i = 1
    while i < n * n:
        steps.add(-i)
        i <<= 1
    return steps


def axis_flip(eng: SlotEngine, v: ReplicatedVector) -> ReplicatedVector:
    mask = np.eye(v.n).ravel()
    target = 1 - v.axis
    blocks = tuple(aggregate(eng, eng.pmult(b, mask), target) for b in v.blocks)
    return ReplicatedVector(blocks, target, v.n)


def cov_transform(eng: SlotEngine, cov: CovBlocks, v: ReplicatedVector, workers: int = 1) -> ReplicatedVector:
    """Multiply the covariance by v; the output has the opposite axis.

    Row-replicated input pairs block (i, j) with segment j and sums each row;
    column-replicated input uses block (j, i), which by symmetry is the
    transpose of (i, j), and sums each column. Both paths return two levels
    below the operands so the round depth does not depend on the axis.
    """
    k = cov.k
    if v.k != k:
        raise ValueError(f"vector has {v.k} segments, covariance has {k}")
    out_axis = 1 - v.axis

    def task(i):
        def run(e):
            terms = []
            for j in range(k):
                c = cov.grid[i][j] if v.axis == 0 else cov.grid[j][i]
                terms.append(e.mult(*e.align(c, v.blocks[j])))
            acc = e.sum(terms)
            out = aggregate(e, acc, 1 if v.axis == 0 else 0)
            return e.drop_level(out, acc.level - 1) if v.axis == 1 else out
        return run

    if min(cov.level, v.level) < 2:
        raise DepthExhaustedError("covariance transform needs two levels")
    blocks = run_parallel(eng, [task(i) for i in range(k)], workers)
    return ReplicatedVector(tuple(blocks), out_axis, v.n)


def norm_sq(eng: SlotEngine, y: ReplicatedVector) -> CipherBlock:
    acc = eng.sum(eng.mult(b, b) for b in y.blocks)
    return replicated_total(eng, acc, y.axis)


def inner_product(eng: SlotEngine, a: ReplicatedVector, b: ReplicatedVector) -> CipherBlock:
    if a.axis != b.axis:
        raise ValueError("inner product needs vectors on the same axis")
    acc = eng.sum(eng.mult(*eng.align(x, y)) for x, y in zip(a.blocks, b.blocks))
    return replicated_total(eng, acc, a.axis)


# inverse square root

def norm_bound(b, c: float, d: int | None = None) -> float:
    """Upper bound on ||Cov v|| from element bounds b and an input norm bound c.

    A scalar b with feature count d gives b^2*c*d; per-feature bounds b_i give
    the tighter sqrt(sum_i sum_j b_i^2 b_j^2 c^2).
    """
    if c <= 0:
        raise ValueError("input norm bound must be positive")
    if np.isscalar(b):
        if b <= 0 or d is None or d < 1:
            raise ValueError("need b > 0 and d >= 1")
        return float(b) ** 2 * c * d
    bs = np.asarray(b, dtype=np.float64)
    if bs.size == 0 or np.any(bs <= 0):
        raise ValueError("per-feature bounds must be positive")
    sq = bs ** 2
    return float(math.sqrt(np.sum(np.outer(sq, sq)) * c * c))


def taylor_coeffs(B: float, order: int) -> tuple[float, np.ndarray]:
    """Expansion point and coefficients of 1/sqrt(x) in powers of (x - m)."""
    if order < 1 or order % 2 == 0:
        raise ValueError(f"Taylor order must be a positive odd integer, got {order}")
    m = B * B / 2 + 1
    coeffs = np.empty(order + 1)
    binom = 1.0
    for i in range(order + 1):
        coeffs[i] = binom * m ** (-0.5 - i)
        binom *= (-0.5 - i) / (i + 1)
    return m, coeffs


def taylor_eval(x, B: float, order: int):
    m, coeffs = taylor_coeffs(B, order)
    u = np.asarray(x, dtype=np.float64) - m
    return np.polynomial.polynomial.polyval(u, coeffs)


def taylor_depth(order: int) -> int:
    return math.ceil(math.log2(order)) + 1


def _powers(eng: SlotEngine, u: CipherBlock, top: int) -> dict[int, CipherBlock]:
    """u^p for 1 <= p <= top, each at depth ceil(log2 p)."""
    pw = {1: u}
    for p in range(2, top + 1):
        hi = 1 << (p.bit_length() - 1)
        if hi == p:
            half = pw[p // 2]
            pw[p] = eng.mult(half, half)
        else:
            pw[p] = eng.mult(*eng.align(pw[hi], pw[p - hi]))
    return pw


def taylor_init(eng: SlotEngine, x: CipherBlock, B: float, order: int) -> CipherBlock:
    need = taylor_depth(order)
    if x.level < need:
        raise DepthExhaustedError(f"Taylor initial guess needs {need} levels, has {x.level}")
    m, coeffs = taylor_coeffs(B, order)
    u = eng.add_plain(x, -m)
    pw = _powers(eng, u, order)
    terms = [eng.pmult(pw[p], coeffs[p]) for p in range(1, order + 1)]
    return eng.add_plain(eng.sum(eng.align(*terms)), coeffs[0])


def newton_depth(iters: int, paired: bool) -> int:
    return 5 * (iters // 2) + 3 * (iters % 2) if paired else 3 * iters


def newton_step(eng: SlotEngine, x: CipherBlock, y: CipherBlock) -> CipherBlock:
    """y <- 1.5 y - 0.5 x y^3 in three levels."""
    y2 = eng.mult(y, y)
    xy = eng.mult(*eng.align(x, y))
    cube = eng.mult(*eng.align(y2, xy))
    corr = eng.pmult(cube, -0.5)
    return eng.add(*eng.align(eng.pmult(y, 1.5), corr))


def newton_pair(eng: SlotEngine, x: CipherBlock, y: CipherBlock) -> CipherBlock:
    """Two Newton steps in five levels.

    With w = x y^2 and q = 3 - w, two steps give y q (3/4 - w q^2 / 16).
    """
    x, y = eng.align(x, y)
    y2 = eng.mult(y, y)
    xs = eng.pmult(x, -1.0 / 16)
    x, y2 = eng.align(x, y2)
    w = eng.mult(x, y2)
    w16 = eng.mult(*eng.align(xs, y2))
    q = eng.add_plain(eng.negate(w), 3.0)
    q2 = eng.mult(q, q)
    r = eng.add_plain(eng.mult(*eng.align(w16, q2)), 0.75)
    yq = eng.mult(*eng.align(y, q))
    return eng.mult(*eng.align(yq, r))


class Refresher:
    """Just-in-time modulus refresh of packed vector state.

    Every call that finds its blocks short of levels extracts their logical
    components into as few blocks as fit, refreshes those, and re-encodes the
    replicated layout on the client side. A k-segment vector therefore costs
    one refresh event whenever k*n fits into one block.
    """

    def __init__(self, eng: SlotEngine, enabled: bool = True):
        self.eng = eng
        self.enabled = enabled
        self.events: list[str] = []

    def ensure(self, items, need: int, tag: str):
        blocks = [b for item in items for b in _blocks_of(item)]
        if min(b.level for b in blocks) >= need:
            return items
        if not self.enabled:
            raise DepthExhaustedError(f"{tag} needs {need} levels and refresh is disabled")
        if need > self.eng.config.max_level:
            raise DepthExhaustedError(f"{tag} needs {need} levels, engine has {self.eng.config.max_level}")
        out = refresh_schedule(self.eng, items)
        self.events.append(tag)
        return out


def _blocks_of(item):
    return item.blocks if isinstance(item, ReplicatedVector) else (item,)


def refresh_schedule(eng: SlotEngine, items) -> list:
    """Refresh vectors and scalar blocks packed into shared blocks.

    Replicated vectors contribute their k*n logical values, scalar blocks one
    value each. Refresh events equal the number of packed blocks.
    """
    logical = []
    for item in items:
        logical.append(item.values() if isinstance(item, ReplicatedVector) else item.slots[:1])
    flat = np.concatenate(logical)
    for start in range(0, len(flat), eng.slots):
        chunk = np.zeros(eng.slots)
        part = flat[start:start + eng.slots]
        chunk[:len(part)] = part
        eng.mod_refresh(eng.encode(chunk, 0))
    out = []
    for item, vals in zip(items, logical):
        if isinstance(item, ReplicatedVector):
            out.append(replicate(eng, vals, item.axis, None))
        else:
            out.append(eng.encode(np.full(eng.slots, vals[0])))
    return out


def newton_invsrt(eng: SlotEngine, x: CipherBlock, y: CipherBlock, iters: int,
                  paired: bool = True, refresher: Refresher | None = None) -> CipherBlock:
    refresher = refresher or Refresher(eng, enabled=False)
    done = 0
    while done < iters:
        two = paired and iters - done >= 2
        need = 5 if two else 3
        x, y = refresher.ensure([x, y], need, "newton")
        y = newton_pair(eng, x, y) if two else newton_step(eng, x, y)
        done += 2 if two else 1
    return y


def newton_trace(x: float, y0: float, iters: int) -> list[float]:
    ys = [y0]
    for _ in range(iters):
        y = ys[-1]
        ys.append(0.5 * y * (3 - x * y * y))
    return ys


# lazy normalization planning

@dataclass(frozen=True)
class NormalizationPlan:
    B: float
    taylor_order: int
    S: float
    e: float
    precision_floor: float
    iters_per_round: tuple
    trajectory: tuple  # simulated length after each round

    @property
    def midpoint(self) -> float:
        return self.B * self.B / 2 + 1

    @property
    def interval(self) -> tuple[float, float]:
        return 0.0, self.B * self.B

    @property
    def rounds(self) -> int:
        return len(self.iters_per_round)

    @property
    def average_iters(self) -> float:
        return float(np.mean(self.iters_per_round))

    def round_depth(self, paired: bool = True) -> list[int]:
        """Levels per round: transform and squared norm, Taylor, Newton, scaling."""
        t = taylor_depth(self.taylor_order)
        return [3 + t + newton_depth(c, paired) + 1 for c in self.iters_per_round]

    def as_dict(self) -> dict:
        return {
            "B": self.B,
            "taylor_order": self.taylor_order,
            "S": self.S,
            "e": self.e,
            "precision_floor": self.precision_floor,
            "iters_per_round": list(self.iters_per_round),
            "average_iters": self.average_iters,
            "trajectory": list(self.trajectory),
        }


def plan_normalization(lP: int, S: float = 0.5, e: float = 1e-5, precision_floor: float = 1e-3,
                       B: float = 256.0, order: int = 1, cap: int = 64) -> NormalizationPlan:
    """Choose per-round Newton counts by simulating a unit vector.

    Each round the length shrinks by S, the squared length is the InvSRT
    input, and the smallest count is taken such that the next round's squared
    input stays above the precision floor; the last round additionally needs
    the length within e of 1.
    """
    if lP < 1:
        raise ValueError("need at least one round")
    if not 0 < S <= 1:
        raise ValueError(f"contraction S must lie in (0, 1], got {S}")
    if e <= 0 or precision_floor <= 0:
        raise ValueError("error bound and precision floor must be positive")
    length = 1.0
    counts, traj = [], []
    for r in range(lP):
        length *= S
        x = length * length
        ys = newton_trace(x, float(taylor_eval(x, B, order)), cap)
        last = r == lP - 1
        for tau, y in enumerate(ys):
            ok = (length * y * S) ** 2 >= precision_floor
            if last:
                ok = ok and abs(1 - length * y) < e
            if ok:
                break
        else:
            raise PlanningInfeasible(r, f"no Newton count <= {cap} meets the bounds")
        counts.append(tau)
        length *= y
        traj.append(length)
    return NormalizationPlan(B, order, S, e, precision_floor, tuple(counts), tuple(traj))


# power method and deflation

@dataclass(frozen=True, eq=False)
class EigenPair:
    value: CipherBlock
    vector: ReplicatedVector
    vector_t: ReplicatedVector
    trajectory: tuple = ()
    refreshes_per_round: tuple = ()


def random_unit_vector(t: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal(t)
    return v / np.linalg.norm(v)


def _scale(eng: SlotEngine, y: ReplicatedVector, l: CipherBlock) -> ReplicatedVector:
    return ReplicatedVector(tuple(eng.mult(*eng.align(b, l)) for b in y.blocks), y.axis, y.n)


def hpower_method(eng: SlotEngine, cov: CovBlocks, plan: NormalizationPlan, v0: ReplicatedVector,
                  paired: bool = True, refresh: bool = True, workers: int = 1) -> EigenPair:
    """Run plan.rounds transform-and-normalize rounds, then one eigenvalue round.

    The eigenvalue is the inner product of Cov v with v. The returned vector
    is v; vector_t is v on the other axis, which is also the axis of Cov v.
    """
    ref = Refresher(eng, refresh)
    start = eng.ledger.refreshes
    per_round, traj = [], []
    v = v0
    td = taylor_depth(plan.taylor_order)
    for iters in plan.iters_per_round:
        before = eng.ledger.refreshes
        (v,) = ref.ensure([v], 2, "vector")
        y = cov_transform(eng, cov, v, workers)
        (y,) = ref.ensure([y], 1 + td, "vector")
        x = norm_sq(eng, y)
        g = taylor_init(eng, x, plan.B, plan.taylor_order)
        l = newton_invsrt(eng, x, g, iters, paired, ref)
        y, l = ref.ensure([y, l], 1, "vector")
        v = _scale(eng, y, l)
        traj.append(float(np.linalg.norm(v.values())))
        per_round.append(eng.ledger.refreshes - before)
    before = eng.ledger.refreshes
    (v,) = ref.ensure([v], 3, "vector")
    vt = axis_flip(eng, v)
    sv = cov_transform(eng, cov, v, workers)
    lam = inner_product(eng, sv, vt)
    per_round.append(eng.ledger.refreshes - before)
    assert eng.ledger.refreshes - start == sum(per_round)
    return EigenPair(lam, v, vt, tuple(traj), tuple(per_round))


def heigen_shift(eng: SlotEngine, cov: CovBlocks, pair: EigenPair, refresh: bool = True) -> CovBlocks:
    """Cov - lambda v v^T, exactly symmetric.

    The column copy comes from flipping the row-replicated vector and the row
    copy from flipping that again, so both read identical diagonal values.
    Lambda is broadcast from one slot, making every product commute.
    """
    ref = Refresher(eng, refresh)
    row = pair.vector if pair.vector.axis == 0 else pair.vector_t
    lam = pair.value
    row, lam = ref.ensure([row, lam], 3, "shift")
    col = axis_flip(eng, row)
    row2 = axis_flip(eng, col)
    lam = broadcast_exact(eng, lam)
    k = cov.k
    grid = []
    for i in range(k):
        out = []
        for j in range(k):
            outer = eng.mult(*eng.align(col.blocks[i], row2.blocks[j]))
            term = eng.mult(*eng.align(outer, lam))
            out.append(eng.sub(*eng.align(cov.grid[i][j], term)))
        grid.append(out)
    low = min(b.level for r in grid for b in r)
    grid = tuple(tuple(eng.drop_level(b, low) for b in r) for r in grid)
    return CovBlocks(grid, cov.n, True)


def pca_keys(n: int) -> set[int]:
    from .covariance import aggregate_keys
    return aggregate_keys(n) | broadcast_keys(n)


def pp_pca(eng: SlotEngine, cov: CovBlocks, lE: int, plan: NormalizationPlan, v0: ReplicatedVector,
           paired: bool = True, refresh: bool = True, workers: int = 1) -> list[EigenPair]:
    """lE rounds of power method and deflation, reusing one normalization plan."""
    if lE < 0:
        raise ValueError("lE must be non-negative")
    pairs = []
    for r in range(lE):
        if cov.level < 2:
            if not refresh:
                raise DepthExhaustedError("covariance blocks are out of levels")
            cov = CovBlocks(tuple(tuple(eng.mod_refresh(b) for b in row) for row in cov.grid), cov.n)
        pair = hpower_method(eng, cov, plan, v0, paired, refresh, workers)
        pairs.append(pair)
        if r < lE - 1:
            cov = heigen_shift(eng, cov, pair, refresh)
    return pairs


# accuracy metrics

def r2_score(truth: np.ndarray, pred: np.ndarray) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    ss_res = np.sum((truth - pred) ** 2)
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    return float(1 - ss_res / ss_tot) if ss_tot else float(ss_res == 0)


def reconstruction_r2(data: np.ndarray, vectors: np.ndarray) -> float:
    """R2 of the centered data against its projection on the given columns."""
    mu = data.mean(axis=0)
    xc = data - mu
    q, _ = np.linalg.qr(vectors)
    return r2_score(data, xc @ q @ q.T + mu)


def eigenvector_r2(truth: np.ndarray, found: np.ndarray) -> float:
    """R2 between reference and computed eigenvector columns after sign alignment."""
    signs = np.sign(np.sum(truth * found, axis=0))
    signs[signs == 0] = 1
    return r2_score(truth, found * signs)


@dataclass
class PcaSummary:
    eigenvalues: list
    eigenvectors: np.ndarray  # columns, original feature order
    reference_values: list
    reference_vectors: np.ndarray
    r2_x: float
    r2_v: float
    warnings: list = field(default_factory=list)


def summarize(pairs: list[EigenPair], data: np.ndarray, feature_columns) -> PcaSummary:
    """Compare decoded eigenpairs against a dense eigendecomposition."""
    data = np.asarray(data, dtype=np.float64)
    cols = list(feature_columns)
    lam = [float(p.value.slots[0]) for p in pairs]
    vecs = np.array([p.vector.values()[cols] for p in pairs]).T.reshape(len(cols), len(pairs))
    mu = data.mean(axis=0)
    cov = (data - mu).T @ (data - mu) / data.shape[0]
    w, u = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    ref_w, ref_u = w[order][: len(pairs)], u[:, order][:, : len(pairs)]
    notes = []
    if len(lam) >= 2 and lam[1] > 0 and lam[0] / lam[1] < 1.05:
        msg = f"eigenvalue ratio {lam[0] / lam[1]:.4f} < 1.05; convergence may be slow"
        warnings.warn(msg, DegenerateSpectrumWarning, stacklevel=2)
        notes.append(msg)
    r2x = reconstruction_r2(data, vecs) if pairs else float("nan")
    r2v = eigenvector_r2(ref_u, vecs) if pairs else float("nan")
    return PcaSummary(lam, vecs, ref_w.tolist(), ref_u, r2x, r2v, notes)
