import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hepca.slot_engine import (AlignmentError, CostLedger, DepthExhaustedError, EngineConfig,
                               HoistStateError, KeyMissingError, ShapeError, SlotEngine)

from conftest import make_engine


def test_config_rejects_bad_sizes():
    with pytest.raises(ValueError):
        EngineConfig(6, 4)
    with pytest.raises(ValueError):
        EngineConfig(4, 0)


def test_encode_checks_slot_count():
    eng = make_engine(2)
    with pytest.raises(ShapeError):
        eng.encode(np.zeros(3))


def test_blocks_are_read_only():
    eng = make_engine(2)
    ct = eng.encode([1, 2, 3, 4])
    with pytest.raises(ValueError):
        ct.slots[0] = 9


def test_rotate_is_left_shift_and_charges_full_switch():
    eng = make_engine(2, keys=[1])
    out = eng.rotate(eng.encode([1, 2, 3, 4]), 1)
    assert out.slots.tolist() == [2, 3, 4, 1]
    assert eng.ledger.phases() == (1, 1, 1, 1)


def test_missing_key_names_the_step():
    eng = make_engine(2)
    with pytest.raises(KeyMissingError) as info:
        eng.rotate(eng.encode(np.ones(4)), 3)
    assert info.value.step == 3


def test_zero_rotation_needs_no_key():
    eng = make_engine(2)
    eng.rotate(eng.encode(np.ones(4)), 0)


def test_levels_and_depth_exhaustion():
    eng = make_engine(2, max_level=1)
    ct = eng.pmult(eng.encode(np.ones(4)), 2.0)
    assert ct.level == 0
    with pytest.raises(DepthExhaustedError):
        eng.mult(ct, ct)


def test_add_requires_alignment():
    eng = make_engine(2)
    a = eng.encode(np.ones(4))
    b = eng.pmult(a, 1.0)
    with pytest.raises(AlignmentError):
        eng.add(a, b)
    assert eng.add(*eng.align(a, b)).level == b.level


def test_quantized_rescale_rounds_to_precision():
    eng = SlotEngine(EngineConfig(2, 4, precision_bits=4, quantize=True))
    out = eng.pmult(eng.encode([0.1, 0.2, 0.3, 0.4]), 1.0)
    assert np.all(out.slots * 16 == np.round(out.slots * 16))
    assert np.abs(out.slots - [0.1, 0.2, 0.3, 0.4]).max() <= 1 / 32


def test_hoisted_rotations_share_one_decompose():
    eng = make_engine(4, all_keys=True)
    ct = eng.encode(np.arange(16.0))
    dec = eng.hoist_decompose(ct)
    outs = [eng.moddown(eng.hoist_rotate(dec, k)) for k in (1, 2, 3)]
    assert [o.slots.tolist() for o in outs] == [np.roll(np.arange(16.0), -k).tolist() for k in (1, 2, 3)]
    assert eng.ledger.phases() == (1, 3, 3, 3)


def test_moddown_twice_is_an_error():
    eng = make_engine(2, all_keys=True)
    h = eng.hoist_rotate(eng.hoist_decompose(eng.encode(np.ones(4))), 1)
    eng.moddown(h)
    with pytest.raises(HoistStateError):
        eng.moddown(h)


def test_hoisted_pmult_rescales_at_moddown():
    eng = make_engine(2, all_keys=True)
    h = eng.hoist_rotate(eng.hoist_decompose(eng.encode([1, 2, 3, 4])), 1)
    out = eng.moddown(eng.hoist_pmult(h, 2.0))
    assert out.level == eng.config.max_level - 1
    assert out.slots.tolist() == [4, 6, 8, 2]


def test_refresh_restores_level_and_counts():
    eng = make_engine(2, max_level=3)
    ct = eng.pmult(eng.pmult(eng.encode(np.ones(4)), 1.0), 1.0)
    assert eng.mod_refresh(ct).level == 3
    assert eng.ledger.refreshes == 1


def test_ledger_arithmetic():
    a = CostLedger(dp=1, pm=2)
    b = CostLedger(dp=3, md=1)
    assert (a + b).phases() == (4, 2, 0, 1)
    assert (a + b - b).as_dict() == a.as_dict()


def test_registry_normalizes_steps():
    eng = make_engine(4)
    eng.register_keys([-1, 15, 0, 16])
    assert len(eng.registry) == 1
    assert -1 in eng.registry and 15 in eng.registry
    assert eng.key_space_report() == eng.config.key_bytes


def test_fork_shares_keys_not_ledger():
    eng = make_engine(2, keys=[1])
    f = eng.fork()
    f.rotate(f.encode(np.ones(4)), 1)
    assert eng.ledger.dp == 0
    eng.merge([f.ledger])
    assert eng.ledger.dp == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=16, max_size=16), st.integers(-40, 40))
def test_rotation_composes(values, k):
    eng = make_engine(4, all_keys=True)
    ct = eng.encode(values)
    twice = eng.rotate(eng.rotate(ct, k), -k)
    assert np.array_equal(twice.slots, ct.slots)
