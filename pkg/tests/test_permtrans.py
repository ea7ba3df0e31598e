import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hepca.permtrans import (DcdChain, DecompositionConflict, _PartialPerm, chains_to_json,
                             dcd_for_T, dcd_for_Z, decompose_diagonal, gen_perm, verify_chain,
                             verify_chain_sparse)


def _apply(kind, n, k=None):
    a = np.arange(n * n, dtype=float)
    return gen_perm(kind, n, k).apply_plain(a).reshape(n, n)


def test_permutation_semantics():
    n = 4
    a = np.arange(16.0).reshape(n, n)
    i, j = np.indices((n, n))
    assert np.array_equal(_apply("Z", n), a[i, (i + j) % n])
    assert np.array_equal(_apply("T", n), a[(i + j) % n, j])
    assert np.array_equal(_apply("C", n, 1), a[i, (j + 1) % n])
    assert np.array_equal(_apply("R", n, 3), a[(i + 3) % n, j])
    assert np.array_equal(_apply("G", n), a.T)


def test_shift_bounds():
    with pytest.raises(ValueError):
        gen_perm("C", 4, 0)
    with pytest.raises(ValueError):
        gen_perm("R", 4, 4)
    with pytest.raises(ValueError):
        gen_perm("Q", 4)


def test_diagonal_counts():
    n = 8
    assert len(gen_perm("Z", n).indices()) == 2 * n - 1
    assert len(gen_perm("T", n).indices()) == n
    assert set(gen_perm("T", n).indices()) == {n * k for k in range(n)}


def test_decompose_diagonal_reconstructs_single_entry():
    right, left = decompose_diagonal(16, 5, [3], 2, 3)
    prod = left.to_map(False).to_dense() @ right.to_map(False).to_dense()
    assert prod[3, 8] == 1 and prod.sum() == 1


def test_decompose_diagonal_validates_split():
    with pytest.raises(ValueError):
        decompose_diagonal(16, 5, [0], 2, 2)


def test_partial_perm_collision():
    pp = _PartialPerm(4)
    pp.set(0, 1)
    pp.set(0, 1)
    with pytest.raises(DecompositionConflict):
        pp.set(0, 2)
    with pytest.raises(DecompositionConflict):
        pp.set(3, 1)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_dcd_exact_small(n):
    for nprime in range(1, n):
        assert verify_chain(dcd_for_Z(n, nprime), gen_perm("Z", n))
        assert verify_chain(dcd_for_T(n, nprime), gen_perm("T", n))


def test_dcd_shape_n16_np4():
    z1, z2 = dcd_for_Z(16, 4)
    t = dcd_for_T(16, 4)
    assert z1.depth == z2.depth == t.depth == math.ceil(15 / 4)
    assert z1.leftmost.indices() == [0, 1, 2, 3]
    assert z2.leftmost.indices() == [-4, -3, -2, -1]
    assert t.leftmost.indices() == [0, 16, 32, 48]
    for f in z1.factors[:-1]:
        assert set(f.indices()) <= {0, 4}


def test_one_chain_alone_is_not_z():
    z1, _ = dcd_for_Z(8, 2)
    assert not verify_chain(z1, gen_perm("Z", 8))
    assert not verify_chain_sparse([z1], gen_perm("Z", 8))


def test_target_range_checked():
    with pytest.raises(ValueError):
        dcd_for_Z(8, 8)
    with pytest.raises(ValueError):
        dcd_for_T(8, 0)


def test_empty_chain_dense_is_an_error():
    with pytest.raises(ValueError):
        DcdChain((), "T", 1).to_dense()


def test_json_export_is_stable():
    chains = dcd_for_Z(4, 2)
    text = chains_to_json(chains)
    assert text == chains_to_json(dcd_for_Z(4, 2))
    data = json.loads(text)
    assert [c["kind"] for c in data] == ["Z1", "Z2"]
    assert len(data[0]["factors"]) == chains[0].depth


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([4, 8, 16, 32]), st.data())
def test_sparse_check_matches_dense(n, data):
    nprime = data.draw(st.integers(1, n - 1))
    z = dcd_for_Z(n, nprime)
    assert verify_chain_sparse(z, gen_perm("Z", n))
    if n <= 16:
        assert verify_chain(z, gen_perm("Z", n))
