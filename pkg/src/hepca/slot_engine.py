"""Slot-level emulation of a leveled approximate-arithmetic HE scheme.

Ciphertexts are modeled as real slot vectors of length n*n carrying a modulus
level. Rotations are charged per key-switching phase (Decompose, Permute,
MultSum, ModDown) so that hoisted and double-hoisted schedules can be costed
exactly. Rescaling optionally rounds slots to a fixed number of fractional bits,
which stands in for the scheme's approximation noise.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class ShapeError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class DepthExhaustedError(RuntimeError):
    pass


class KeyMissingError(LookupError):
    def __init__(self, step: int):
        super().__init__(f"no rotation key registered for step {step}")
        self.step = step


class HoistStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    n: int
    max_level: int
    scale_bits: int = 40
    precision_bits: int = 20
    quantize: bool = False
    key_bytes: int = 1 << 20

    def __post_init__(self):
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 2, got {self.n}")
        if self.max_level < 1:
            raise ValueError(f"max_level must be >= 1, got {self.max_level}")
        if self.precision_bits < 1:
            raise ValueError(f"precision_bits must be >= 1, got {self.precision_bits}")

    @property
    def slots(self) -> int:
        return self.n * self.n


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CipherBlock:
    slots: np.ndarray
    level: int
    scale: int
    is_cipher: bool = True


@dataclass(frozen=True, eq=False)
class DecomposedBlock:
    source: CipherBlock
    shared_decompose_done: bool = True


@dataclass(frozen=True, eq=False)
class HoistedBlock:
    """A result living in the extended modulus, waiting for ModDown.

    ``rescale_pending`` marks that a plaintext product was folded in, so the
    eventual ModDown also performs the rescale (and quantization).
    """

    slots: np.ndarray
    level: int
    pending_moddown: bool = True
    rescale_pending: bool = False


@dataclass
class CostLedger:
    dp: int = 0
    pm: int = 0
    ms: int = 0
    md: int = 0
    ct_mult: int = 0
    pt_mult: int = 0
    adds: int = 0
    refreshes: int = 0
    keys_generated: int = 0

    def __add__(self, other: CostLedger) -> CostLedger:
        return CostLedger(**{f.name: getattr(self, f.name) + getattr(other, f.name)
                             for f in dataclasses.fields(self)})

    def __sub__(self, other: CostLedger) -> CostLedger:
        return CostLedger(**{f.name: getattr(self, f.name) - getattr(other, f.name)
                             for f in dataclasses.fields(self)})

    def copy(self) -> CostLedger:
        return dataclasses.replace(self)

    def phases(self) -> tuple[int, int, int, int]:
        return self.dp, self.pm, self.ms, self.md

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RotKeyRegistry:
    slots: int
    steps: set = field(default_factory=set)

    def normalize(self, k: int) -> int:
        return int(k) % self.slots

    def add(self, steps: Iterable[int]) -> None:
        for k in steps:
            k = self.normalize(k)
            if k:
                self.steps.add(k)

    def __contains__(self, k: int) -> bool:
        return self.normalize(k) in self.steps

    def __len__(self) -> int:
        return len(self.steps)

    def require(self, k: int) -> None:
        if self.normalize(k) and self.normalize(k) not in self.steps:
            raise KeyMissingError(int(k))

    def key_space_bytes(self, key_bytes: int) -> int:
        return len(self.steps) * key_bytes


class SlotEngine:
    """Evaluator holding configuration, key registry and cost ledger.

    Blocks are immutable; every operation returns a new block and charges the
    ledger. ``fork`` gives a worker its own ledger over the shared registry so
    parallel sections can be merged deterministically.
    """

    def __init__(self, config: EngineConfig, registry: RotKeyRegistry | None = None,
                 ledger: CostLedger | None = None):
        self.config = config
        self.registry = registry if registry is not None else RotKeyRegistry(config.slots)
        self.ledger = ledger if ledger is not None else CostLedger()

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def slots(self) -> int:
        return self.config.slots

    def fork(self) -> SlotEngine:
        return SlotEngine(self.config, self.registry, CostLedger())

    def merge(self, ledgers: Iterable[CostLedger]) -> None:
        for led in ledgers:
            self.ledger = self.ledger + led

    # encoding

    def _check_len(self, values) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float64).reshape(-1)
        if arr.shape[0] != self.slots:
            raise ShapeError(f"expected {self.slots} slots, got {arr.shape[0]}")
        return arr

    def encode(self, values, level: int | None = None) -> CipherBlock:
        arr = self._check_len(values)
        level = self.config.max_level if level is None else level
        if not 0 <= level <= self.config.max_level:
            raise ValueError(f"level {level} outside [0, {self.config.max_level}]")
        return CipherBlock(_frozen(arr), level, self.config.scale_bits, True)

    def plain(self, values) -> CipherBlock:
        if np.isscalar(values):
            values = np.full(self.slots, float(values))
        arr = self._check_len(values)
        return CipherBlock(_frozen(arr), self.config.max_level, self.config.scale_bits, False)

    @staticmethod
    def decode(block: CipherBlock) -> np.ndarray:
        return np.array(block.slots)

    def quantize(self, values: np.ndarray) -> np.ndarray:
        if not self.config.quantize:
            return values
        q = float(1 << self.config.precision_bits)
        return np.round(values * q) / q

    # arithmetic

    def _aligned(self, a: CipherBlock, b: CipherBlock) -> None:
        if a.level != b.level:
            raise AlignmentError(f"level mismatch: {a.level} vs {b.level}")
        if a.scale != b.scale:
            raise AlignmentError(f"scale mismatch: {a.scale} vs {b.scale}")

    def add_sub(self, a: CipherBlock, b: CipherBlock, sign: int = 1) -> CipherBlock:
        self._aligned(a, b)
        self.ledger.adds += 1
        out = a.slots + b.slots if sign > 0 else a.slots - b.slots
        return CipherBlock(_frozen(out), a.level, a.scale, True)

    def add(self, a: CipherBlock, b: CipherBlock) -> CipherBlock:
        return self.add_sub(a, b, 1)

    def sub(self, a: CipherBlock, b: CipherBlock) -> CipherBlock:
        return self.add_sub(a, b, -1)

    def add_plain(self, a: CipherBlock, p) -> CipherBlock:
        p = p if isinstance(p, CipherBlock) else self.plain(p)
        self.ledger.adds += 1
        return CipherBlock(_frozen(a.slots + p.slots), a.level, a.scale, True)

    def negate(self, a: CipherBlock) -> CipherBlock:
        return CipherBlock(_frozen(-a.slots), a.level, a.scale, a.is_cipher)

    def sum(self, blocks: Iterable[CipherBlock]) -> CipherBlock:
        it = iter(blocks)
        acc = next(it)
        for b in it:
            acc = self.add(acc, b)
        return acc

    def drop_level(self, a: CipherBlock, level: int) -> CipherBlock:
        """Modulus-switch down without rescaling; free in this cost model."""
        if level > a.level:
            raise AlignmentError(f"cannot raise level {a.level} to {level}")
        if level == a.level:
            return a
        return CipherBlock(a.slots, level, a.scale, a.is_cipher)

    def align(self, *blocks: CipherBlock) -> list[CipherBlock]:
        low = min(b.level for b in blocks)
        return [self.drop_level(b, low) for b in blocks]

    def _rescale(self, values: np.ndarray, level: int) -> CipherBlock:
        return CipherBlock(_frozen(self.quantize(values)), level - 1, self.config.scale_bits, True)

    def pmult(self, a: CipherBlock, p) -> CipherBlock:
        if isinstance(p, CipherBlock):
            if p.is_cipher:
                raise TypeError("pmult expects a plaintext operand")
            pv = p.slots
        else:
            pv = self.plain(p).slots
        if a.level < 1:
            raise DepthExhaustedError("pmult at level 0")
        self.ledger.pt_mult += 1
        return self._rescale(a.slots * pv, a.level)

    def mult(self, a: CipherBlock, b: CipherBlock) -> CipherBlock:
        if not (a.is_cipher and b.is_cipher):
            raise TypeError("mult expects two ciphertexts")
        self._aligned(a, b)
        if a.level < 1:
            raise DepthExhaustedError("mult at level 0")
        self.ledger.ct_mult += 1
        return self._rescale(a.slots * b.slots, a.level)

    def rotate(self, a: CipherBlock, k: int) -> CipherBlock:
        """Cyclic left shift by k slots, charged as one full key switch."""
        self.registry.require(k)
        led = self.ledger
        led.dp += 1
        led.pm += 1
        led.ms += 1
        led.md += 1
        return CipherBlock(_frozen(np.roll(a.slots, -int(k))), a.level, a.scale, a.is_cipher)

    # hoisting phases

    def hoist_decompose(self, a: CipherBlock) -> DecomposedBlock:
        self.ledger.dp += 1
        return DecomposedBlock(a)

    def hoist_rotate(self, d: DecomposedBlock, k: int) -> HoistedBlock:
        self.registry.require(k)
        self.ledger.pm += 1
        self.ledger.ms += 1
        src = d.source
        return HoistedBlock(_frozen(np.roll(src.slots, -int(k))), src.level)

    def lift(self, a: CipherBlock) -> HoistedBlock:
        """Embed a ciphertext into the extended modulus (a scalar multiply by P)."""
        return HoistedBlock(a.slots, a.level)

    def hoist_pmult(self, h: HoistedBlock, p) -> HoistedBlock:
        if not h.pending_moddown:
            raise HoistStateError("hoisted block already brought down")
        if h.rescale_pending:
            raise HoistStateError("hoisted block already carries a plaintext product")
        if h.level < 1:
            raise DepthExhaustedError("hoisted pmult at level 0")
        pv = p.slots if isinstance(p, CipherBlock) else self.plain(p).slots
        self.ledger.pt_mult += 1
        return HoistedBlock(_frozen(h.slots * pv), h.level, True, True)

    def hoist_add(self, a: HoistedBlock, b: HoistedBlock) -> HoistedBlock:
        if not (a.pending_moddown and b.pending_moddown):
            raise HoistStateError("hoisted block already brought down")
        if a.level != b.level or a.rescale_pending != b.rescale_pending:
            raise AlignmentError("hoisted operands are not aligned")
        self.ledger.adds += 1
        return HoistedBlock(_frozen(a.slots + b.slots), a.level, True, a.rescale_pending)

    def moddown(self, h: HoistedBlock) -> CipherBlock:
        if not h.pending_moddown:
            raise HoistStateError("moddown applied twice")
        self.ledger.md += 1
        # the hoisted value is consumed; flag it so a second moddown is caught
        object.__setattr__(h, "pending_moddown", False)
        if h.rescale_pending:
            return self._rescale(np.array(h.slots), h.level)
        return CipherBlock(h.slots, h.level, self.config.scale_bits, True)

    # levels and keys

    def mod_refresh(self, a: CipherBlock) -> CipherBlock:
        self.ledger.refreshes += 1
        return CipherBlock(a.slots, self.config.max_level, a.scale, a.is_cipher)

    def register_keys(self, steps: Iterable[int]) -> RotKeyRegistry:
        self.registry.add(steps)
        self.ledger.keys_generated = len(self.registry)
        return self.registry

    def key_space_report(self) -> int:
        return self.registry.key_space_bytes(self.config.key_bytes)
