"""Array helpers, permutation utilities, softmax, and the AdamW optimizer."""

import numpy as np
import pytest

from permnm.numerics import (
    AdamWState,
    adamw_init,
    adamw_step,
    as_matrix,
    gather_columns,
    gather_rows,
    invert_permutation,
    make_rng,
    matmul,
    softmax,
    validate_permutation,
)
from permnm.assignment import dense_permutation


# ---------------------------------------------------------------------------
# make_rng


def test_make_rng_deterministic():
    a = make_rng(7).standard_normal(16)
    b = make_rng(7).standard_normal(16)
    assert np.array_equal(a, b)


def test_make_rng_seed_sensitivity():
    a = make_rng(0).standard_normal(16)
    b = make_rng(1).standard_normal(16)
    assert not np.array_equal(a, b)


# ---------------------------------------------------------------------------
# as_matrix


def test_as_matrix_passes_float_through():
    w = np.ones((2, 3), dtype=np.float32)
    out = as_matrix(w)
    assert out.dtype == np.float32
    assert out.shape == (2, 3)


def test_as_matrix_casts_integers_to_f64():
    out = as_matrix([[1, 2], [3, 4]])
    assert out.dtype == np.float64


def test_as_matrix_rejects_vectors():
    with pytest.raises(ValueError, match="must be 2-D"):
        as_matrix(np.ones(4))


def test_as_matrix_rejects_nonfinite_and_names_argument():
    with pytest.raises(ValueError, match="weights contains non-finite"):
        as_matrix(np.array([[1.0, np.nan]]), "weights")


# ---------------------------------------------------------------------------
# matmul


def test_matmul_small_example():
    out = matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
    assert out.tolist() == [[17.0], [39.0]]


def test_matmul_identity_is_exact():
    rng = make_rng(3)
    w = rng.standard_normal((5, 5))
    assert np.array_equal(matmul(w, np.eye(5)), w)


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError, match="matmul dimension mismatch"):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


# ---------------------------------------------------------------------------
# permutation validation and inversion


def test_validate_permutation_roundtrip():
    p = validate_permutation([2, 0, 1])
    assert p.dtype == np.int64
    assert p.tolist() == [2, 0, 1]


def test_validate_permutation_length_check():
    with pytest.raises(ValueError, match="expected 4"):
        validate_permutation([0, 1, 2], n=4)


def test_validate_permutation_rejects_floats():
    with pytest.raises(ValueError, match="must be integer"):
        validate_permutation(np.array([0.0, 1.0]))


def test_validate_permutation_rejects_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        validate_permutation([0, 3])


def test_validate_permutation_rejects_duplicates():
    with pytest.raises(ValueError, match="not a bijection"):
        validate_permutation([0, 0, 2])


def test_invert_permutation_is_inverse():
    rng = make_rng(11)
    for _ in range(20):
        p = rng.permutation(9)
        q = invert_permutation(p)
        assert np.array_equal(p[q], np.arange(9))
        assert np.array_equal(q[p], np.arange(9))


# ---------------------------------------------------------------------------
# gather_columns / gather_rows


def test_gather_columns_reverses():
    w = np.array([[1.0, 2.0, 3.0]])
    assert gather_columns(w, [2, 1, 0]).tolist() == [[3.0, 2.0, 1.0]]


def test_gather_rows_small_example():
    w = np.array([[1.0], [2.0]])
    assert gather_rows(w, [1, 0]).tolist() == [[2.0], [1.0]]


def test_gather_columns_matches_dense_matmul():
    # The fast path must agree bitwise with multiplying by the dense
    # permutation matrix, for every random instance tried.
    rng = make_rng(21)
    for _ in range(50):
        n = int(rng.integers(2, 12))
        w = rng.standard_normal((int(rng.integers(1, 6)), n))
        p = rng.permutation(n)
        dense = dense_permutation(p)
        assert np.array_equal(gather_columns(w, p), matmul(w, dense))


def test_gather_rows_matches_dense_matmul():
    rng = make_rng(22)
    for _ in range(50):
        n = int(rng.integers(2, 12))
        w = rng.standard_normal((n, int(rng.integers(1, 6))))
        p = rng.permutation(n)
        dense = dense_permutation(p)
        assert np.array_equal(gather_rows(w, p), matmul(dense, w))


def test_gather_inverse_composition():
    rng = make_rng(23)
    w = rng.standard_normal((4, 8))
    p = rng.permutation(8)
    assert np.array_equal(gather_columns(gather_columns(w, p), invert_permutation(p)), w)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_frozen_values():
    out = softmax(np.array([1.0, 2.0, 3.0]))
    expect = np.array(
        [0.09003057317038046, 0.24472847105479764, 0.6652409557748218]
    )
    assert np.allclose(out, expect, rtol=0, atol=1e-15)
    assert out.sum() == pytest.approx(1.0, abs=1e-15)


def test_softmax_shift_invariance():
    rng = make_rng(5)
    v = rng.standard_normal(10)
    a = softmax(v)
    b = softmax(v + 123.0)
    assert np.allclose(a, b, atol=1e-12)


def test_softmax_large_inputs_do_not_overflow():
    out = softmax(np.array([1000.0, 1000.0, 0.0]))
    assert np.all(np.isfinite(out))
    assert out.sum() == pytest.approx(1.0)


def test_softmax_rejects_matrices():
    with pytest.raises(ValueError, match="1-D"):
        softmax(np.ones((2, 2)))


def test_softmax_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        softmax(np.array([]))


def test_softmax_rejects_nonfinite():
    with pytest.raises(ValueError, match="non-finite"):
        softmax(np.array([1.0, np.inf]))


# ---------------------------------------------------------------------------
# AdamW


def test_adamw_zero_gradient_is_identity_without_decay():
    params = [np.array([1.0, -2.0]), np.array([[3.0]])]
    state = adamw_init(params)
    grads = [np.zeros_like(p) for p in params]
    new_params, new_state = adamw_step(params, grads, state, lr=0.1)
    for p, q in zip(params, new_params):
        assert np.array_equal(p, q)
    assert new_state.step == 1


def test_adamw_first_step_moves_by_lr_against_gradient_sign():
    # With bias correction the very first update is lr * g/(|g| + ~0),
    # i.e. almost exactly lr in the direction opposite the gradient.
    params = [np.array([0.0])]
    grads = [np.array([2.5])]
    state = adamw_init(params)
    new_params, _ = adamw_step(params, grads, state, lr=0.01)
    assert new_params[0][0] == pytest.approx(-0.01, rel=1e-6)


def test_adamw_three_step_scalar_trace():
    # Independent scalar re-derivation of the update rule, checked to 1e-12.
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = 1.0
    m = v = 0.0
    grads = [0.3, -0.2, 0.5]
    params = [np.array([1.0])]
    state = adamw_init(params)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * (m_hat / (np.sqrt(v_hat) + eps))
        params, state = adamw_step(
            params, [np.array([g])], state, lr=lr, beta1=b1, beta2=b2, eps=eps
        )
        assert params[0][0] == pytest.approx(p, abs=1e-12)
    assert state.step == 3


def test_adamw_weight_decay_is_decoupled():
    # Decay applies to the pre-update parameters, on top of the Adam move.
    params = [np.array([2.0])]
    grads = [np.array([0.0])]
    state = adamw_init(params)
    new_params, _ = adamw_step(
        params, grads, state, lr=0.1, weight_decay=0.5
    )
    # zero gradient => pure decay: p - lr * wd * p = 2.0 - 0.1*0.5*2.0
    assert new_params[0][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-12)


def test_adamw_inputs_not_mutated():
    params = [np.array([1.0, 2.0])]
    grads = [np.array([0.5, -0.5])]
    state = adamw_init(params)
    before = params[0].copy()
    adamw_step(params, grads, state, lr=0.1)
    assert np.array_equal(params[0], before)
    assert state.step == 0
    assert np.all(state.m[0] == 0)


def test_adamw_block_count_mismatch():
    params = [np.array([1.0])]
    state = adamw_init(params)
    with pytest.raises(ValueError, match="parameter blocks"):
        adamw_step(params, [], state, lr=0.1)


def test_adamw_nonfinite_gradient_names_block():
    params = [np.array([1.0]), np.array([2.0])]
    grads = [np.array([0.1]), np.array([np.nan])]
    state = adamw_init(params)
    with pytest.raises(ValueError, match="parameter block 1"):
        adamw_step(params, grads, state, lr=0.1)


def test_adamw_state_shapes_follow_params():
    params = [np.zeros((2, 3)), np.zeros(4)]
    state = adamw_init(params)
    assert isinstance(state, AdamWState)
    assert state.m[0].shape == (2, 3)
    assert state.v[1].shape == (4,)
    assert state.step == 0
