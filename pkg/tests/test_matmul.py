import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hepca.matmul import (MatMulConfig, MatMulKit, apply_t, apply_z, cost_report, get_kit,
                          hmm_mult, hmm_transpose, one_to_many, prepare_operand)
from hepca.permtrans import gen_perm
from hepca.slot_engine import DepthExhaustedError, EngineConfig, KeyMissingError, SlotEngine

from formulas import column_shift_table, measure, row_shift_formula


def _engine(kit, quantize=False, extra=1):
    eng = SlotEngine(EngineConfig(kit.n, kit.mult_depth + extra, quantize=quantize))
    kit.register(eng)
    return eng


CONFIGS = [MatMulConfig(2), MatMulConfig(4), MatMulConfig(8, n1_z=4, n1_t=2),
           MatMulConfig(8, nz=3, nt=3), MatMulConfig(8, nz=2, nt=5, n1_z=2, n1_t=4),
           MatMulConfig(16, nz=4, nt=4, n1_z=4, n1_t=4)]


@pytest.mark.parametrize("cfg", CONFIGS, ids=str)
def test_product_matches_numpy(cfg, rng):
    kit = get_kit(cfg)
    eng = _engine(kit)
    n = cfg.n
    for _ in range(5):
        a, b = rng.uniform(-1, 1, (2, n, n))
        out = hmm_mult(eng, eng.encode(a.ravel()), eng.encode(b.ravel()), kit)
        assert np.abs(out.slots.reshape(n, n) - a @ b).max() < 1e-12


@pytest.mark.parametrize("cfg", CONFIGS, ids=str)
def test_z_and_t_match_permutations(cfg, rng):
    kit = get_kit(cfg)
    eng = _engine(kit)
    v = rng.standard_normal(cfg.n ** 2)
    z = apply_z(eng, eng.encode(v), kit)
    t = apply_t(eng, eng.encode(v), kit)
    assert np.abs(z.slots - gen_perm("Z", cfg.n).apply_plain(v)).max() < 1e-12
    assert np.abs(t.slots - gen_perm("T", cfg.n).apply_plain(v)).max() < 1e-12


def test_product_depth_is_the_kit_depth(rng):
    kit = get_kit(MatMulConfig(8, nz=3, nt=2))
    eng = _engine(kit)
    out = hmm_mult(eng, eng.encode(np.ones(64)), eng.encode(np.ones(64)), kit)
    assert eng.config.max_level - out.level == kit.mult_depth == 5


def test_quantized_product_error(rng):
    kit = get_kit(MatMulConfig(8, nz=3, nt=3))
    eng = _engine(kit, quantize=True)
    a, b = rng.uniform(-1, 1, (2, 8, 8))
    out = hmm_mult(eng, eng.encode(a.ravel()), eng.encode(b.ravel()), kit)
    assert np.abs(out.slots.reshape(8, 8) - a @ b).max() < 1e-4


def test_transpose_with_scale(rng):
    kit = get_kit(MatMulConfig(8))
    eng = _engine(kit)
    a = rng.standard_normal((8, 8))
    out = hmm_transpose(eng, eng.encode(a.ravel()), kit, scale=0.25)
    assert np.abs(out.slots.reshape(8, 8) - a.T / 4).max() < 1e-15
    assert out.level == eng.config.max_level - 1


def test_one_to_many_matches_individual_products(rng):
    kit = get_kit(MatMulConfig(4))
    eng = _engine(kit)
    a = rng.standard_normal((4, 4))
    bs = rng.standard_normal((3, 4, 4))
    outs = one_to_many(eng, eng.encode(a.ravel()), [eng.encode(b.ravel()) for b in bs], kit, workers=3)
    for out, b in zip(outs, bs):
        assert np.abs(out.slots.reshape(4, 4) - a @ b).max() < 1e-12


def test_one_to_many_prepares_left_once(rng):
    kit = get_kit(MatMulConfig(4))
    single = _engine(kit)
    prepare_operand(single, single.encode(np.ones(16)), "left", kit)
    left_cost = single.ledger.dp
    eng = _engine(kit)
    one_to_many(eng, eng.encode(np.ones(16)), [eng.encode(np.ones(16))] * 3, kit)
    right = _engine(kit)
    prepare_operand(right, right.encode(np.ones(16)), "right", kit)
    assert eng.ledger.dp == left_cost + 3 * right.ledger.dp


def test_workers_do_not_change_ledgers(rng):
    kit = get_kit(MatMulConfig(8, nz=3, nt=3))
    a = rng.standard_normal(64)
    bs = [rng.standard_normal(64) for _ in range(4)]
    results = []
    for workers in (1, 4):
        eng = _engine(kit)
        outs = one_to_many(eng, eng.encode(a), [eng.encode(b) for b in bs], kit, workers)
        results.append((eng.ledger.as_dict(), [o.slots.tobytes() for o in outs]))
    assert results[0] == results[1]


def test_insufficient_level_is_rejected():
    kit = get_kit(MatMulConfig(4))
    eng = SlotEngine(EngineConfig(4, 1))
    kit.register(eng)
    with pytest.raises(DepthExhaustedError):
        prepare_operand(eng, eng.encode(np.ones(16)), "left", kit)


def test_unregistered_keys_fail():
    kit = get_kit(MatMulConfig(4))
    eng = SlotEngine(EngineConfig(4, kit.mult_depth))
    with pytest.raises(KeyMissingError):
        hmm_mult(eng, eng.encode(np.ones(16)), eng.encode(np.ones(16)), kit)


def test_config_validation():
    with pytest.raises(ValueError):
        MatMulConfig(8, nz=8)
    with pytest.raises(ValueError):
        MatMulConfig(8, cache_policy="always")


def test_kit_is_cached():
    assert get_kit(MatMulConfig(4)) is get_kit(MatMulConfig(4))


def test_decomposition_shrinks_z_keys_at_n16():
    base = MatMulKit(MatMulConfig(16, n1_z=4))
    dcd = MatMulKit(MatMulConfig(16, nz=4, n1_z=4))
    assert (len(base.z_keys()), len(dcd.z_keys())) == (10, 5)


def test_cost_report_fields():
    kit = get_kit(MatMulConfig(4))
    eng = _engine(kit)
    out = hmm_mult(eng, eng.encode(np.ones(16)), eng.encode(np.ones(16)), kit)
    rep = cost_report(kit, eng.ledger, eng.config.max_level - out.level)
    assert rep["mults"] == 4 and rep["levels_used"] == kit.mult_depth
    assert set(rep) >= {"n", "keys", "dp", "pm", "ms", "md"}


@pytest.mark.parametrize("n,n1", [(8, 2), (8, 4), (16, 4), (32, 8)])
def test_shift_families(n, n1):
    phases, keys = measure(MatMulConfig(n, n1_z=n1, n1_t=n1), "R")
    assert (phases, keys) == (row_shift_formula(n, n1)["phases"], row_shift_formula(n, n1)["keys"])
    phases, keys = measure(MatMulConfig(n, n1_z=n1, n1_t=n1), "C")
    table = column_shift_table(n, n1)["phases"]
    # everything matches the table except two fewer ModDowns
    assert phases[:3] == table[:3] and phases[3] == table[3] - 2
    assert keys == n1 + 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(2, None), (4, None), (4, 2), (8, 3), (8, 5)]))
def test_random_products(seed, shape):
    n, nz = shape
    rng = np.random.default_rng(seed)
    kit = get_kit(MatMulConfig(n, nz=nz, nt=nz))
    eng = _engine(kit)
    a, b = rng.uniform(-10, 10, (2, n, n))
    out = hmm_mult(eng, eng.encode(a.ravel()), eng.encode(b.ravel()), kit)
    assert np.abs(out.slots.reshape(n, n) - a @ b).max() < 1e-9
