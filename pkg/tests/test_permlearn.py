"""Learned channel permutation: blocks, losses, the training loop, canonical
evaluation, and folding the result into exported weights."""

import numpy as np
import pytest

import permnm.permlearn as pl
from permnm.graddiff import finite_diff_check
from permnm.numerics import gather_columns, make_rng
from permnm.permlearn import (
    Model,
    ModelLayer,
    TrainConfig,
    block_boundaries,
    canonicalize_permutation,
    evaluate_permutation,
    fold_and_export,
    folded_forward,
    forward_sparse,
    init_params,
    loss_cosine,
    loss_cosine_fwd,
    loss_cosine_vjp,
    loss_mse,
    metric_scores,
    soft_surrogate_loss_fn,
    sparse_forward,
    train,
)
from permnm.sparsity import (
    NMConfig,
    decompress_nm,
    nm_mask,
    retained_score,
    validate_nm_mask,
)


def _toy_model(seed=100, c_in=8, hidden=8, c_out=4, samples=16):
    rng = make_rng(seed)
    w1 = rng.standard_normal((hidden, c_in)).astype(np.float32)
    w2 = rng.standard_normal((c_out, hidden)).astype(np.float32)
    x = rng.standard_normal((samples, c_in)).astype(np.float32)
    model = Model([ModelLayer("fc1", w1), ModelLayer("fc2", w2, predecessor="fc1")])
    return model, x


# ---------------------------------------------------------------------------
# block boundaries


def test_block_boundaries_even_split():
    assert block_boundaries(16, 8) == [0, 8]
    assert block_boundaries(8, 8) == [0]


def test_block_boundaries_ragged_tail():
    assert block_boundaries(12, 8, group=4) == [0, 8]  # tail block size 4


def test_block_boundaries_oversized_block():
    with pytest.raises(ValueError, match="block size 16 exceeds input width 8"):
        block_boundaries(8, 16)


def test_block_boundaries_group_divisibility():
    with pytest.raises(
        ValueError, match=r"group size 4 must divide block size 6 \(block at offset 0\)"
    ):
        block_boundaries(6, 6, group=4)


def test_block_boundaries_ragged_tail_group_check():
    # 10 = 8 + 2; the tail block of size 2 breaks the 4-wide groups
    with pytest.raises(ValueError, match=r"block at offset 8"):
        block_boundaries(10, 8, group=4)


# ---------------------------------------------------------------------------
# canonicalization


def test_canonicalize_sorts_within_groups():
    cfg = NMConfig(2, 4)
    out = canonicalize_permutation([3, 1, 0, 2, 7, 5, 6, 4], cfg)
    assert out.tolist() == [0, 1, 2, 3, 4, 5, 6, 7]


def test_canonicalize_orders_groups_by_smallest():
    cfg = NMConfig(2, 4)
    out = canonicalize_permutation([4, 5, 6, 7, 3, 2, 1, 0], cfg)
    assert out.tolist() == [0, 1, 2, 3, 4, 5, 6, 7]


def test_canonicalize_is_idempotent():
    cfg = NMConfig(2, 4)
    rng = make_rng(71)
    for _ in range(20):
        p = rng.permutation(16)
        once = canonicalize_permutation(p, cfg)
        twice = canonicalize_permutation(once, cfg)
        assert np.array_equal(once, twice)


def test_canonicalize_preserves_grouping():
    from permnm.reference import grouping_from_permutation

    cfg = NMConfig(2, 4)
    rng = make_rng(72)
    for _ in range(20):
        p = rng.permutation(8)
        q = canonicalize_permutation(p, cfg)
        # group order may change; the set of groups may not
        assert set(grouping_from_permutation(p, cfg)) == set(
            grouping_from_permutation(q, cfg)
        )


def test_canonicalize_length_check():
    with pytest.raises(ValueError, match="not divisible"):
        canonicalize_permutation([0, 1, 2], NMConfig(2, 4))


# ---------------------------------------------------------------------------
# losses


def test_loss_cosine_identical_outputs():
    rng = make_rng(81)
    y = rng.standard_normal((5, 3))
    assert loss_cosine(y, y) == pytest.approx(0.0, abs=1e-12)


def test_loss_cosine_opposed_outputs():
    y = np.array([[1.0, 0.0]])
    assert loss_cosine(y, -y) == pytest.approx(2.0)


def test_loss_cosine_orthogonal_rows():
    y = np.array([[1.0, 0.0]])
    yt = np.array([[0.0, 1.0]])
    assert loss_cosine(y, yt) == pytest.approx(1.0)


def test_loss_cosine_zero_row_contributes_one():
    y = np.array([[1.0, 0.0], [1.0, 0.0]])
    yt = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert loss_cosine(y, yt) == pytest.approx(0.5)


def test_loss_cosine_rejects_all_zero_reference():
    with pytest.raises(ValueError, match="nonzero row"):
        loss_cosine(np.zeros((2, 3)), np.ones((2, 3)))


def test_loss_cosine_shape_check():
    with pytest.raises(ValueError, match="y_tilde shape"):
        loss_cosine(np.ones((2, 3)), np.ones((3, 2)))


def test_loss_cosine_range():
    rng = make_rng(82)
    for _ in range(20):
        y = rng.standard_normal((4, 6))
        yt = rng.standard_normal((4, 6))
        val = loss_cosine(y, yt)
        assert 0.0 <= val <= 2.0


def test_loss_cosine_vjp_matches_fd():
    rng = make_rng(83)
    y = rng.standard_normal((4, 5))

    def f(flat):
        yt = flat.reshape(4, 5)
        loss, cache = loss_cosine_fwd(y, yt)
        return loss, loss_cosine_vjp(cache, 1.0).ravel()

    err = finite_diff_check(f, rng.standard_normal(20))
    assert err <= 1e-6


def test_loss_cosine_vjp_zero_row_gets_zero_grad():
    y = np.array([[1.0, 0.0], [1.0, 0.0]])
    yt = np.array([[1.0, 0.0], [0.0, 0.0]])
    _, cache = loss_cosine_fwd(y, yt)
    g = loss_cosine_vjp(cache, 1.0)
    assert np.all(g[1] == 0.0)


def test_loss_mse():
    y = np.array([[1.0, 2.0]])
    yt = np.array([[2.0, 4.0]])
    assert loss_mse(y, yt) == pytest.approx((1.0 + 4.0) / 2.0)


def test_metric_scores_dispatch():
    rng = make_rng(84)
    w = rng.standard_normal((2, 4)).astype(np.float32)
    x = rng.standard_normal((6, 4)).astype(np.float32)
    assert np.array_equal(metric_scores("magnitude", w, x), np.abs(w))
    norms = np.sqrt(np.square(x).sum(axis=0))
    assert np.allclose(metric_scores("wanda", w, x), np.abs(w) * norms)
    with pytest.raises(ValueError, match="unknown metric"):
        metric_scores("entropy", w, x)


# ---------------------------------------------------------------------------
# evaluate_permutation


def test_evaluate_permutation_identity_matches_direct_compute():
    rng = make_rng(85)
    cfg = NMConfig(2, 4)
    w = rng.standard_normal((3, 8)).astype(np.float32)
    x = rng.standard_normal((10, 8)).astype(np.float32)
    y = x @ w.T
    scores = np.abs(w)
    loss, mask, retained = evaluate_permutation(
        w, x, y, np.arange(8), cfg, scores
    )
    expect_mask = nm_mask(scores, cfg)
    assert np.array_equal(mask, expect_mask)
    assert retained == pytest.approx(retained_score(scores, expect_mask))
    assert loss == pytest.approx(loss_cosine(y, x @ (w * expect_mask).T), abs=1e-12)


def test_evaluate_permutation_grouping_invariance():
    # permutations inducing the same grouping must evaluate bitwise equal
    rng = make_rng(86)
    cfg = NMConfig(2, 4)
    w = rng.standard_normal((3, 8)).astype(np.float32)
    x = rng.standard_normal((10, 8)).astype(np.float32)
    y = x @ w.T
    scores = np.abs(w)
    base = rng.permutation(8)
    shuffled = base.reshape(2, 4)[:, rng.permutation(4)][::-1].reshape(-1)
    la, ma, ra = evaluate_permutation(w, x, y, base, cfg, scores)
    lb, mb, rb = evaluate_permutation(w, x, y, shuffled, cfg, scores)
    assert la == lb
    assert np.array_equal(ma, mb)
    assert ra == rb


def test_evaluate_permutation_mse_option():
    rng = make_rng(87)
    cfg = NMConfig(2, 4)
    w = rng.standard_normal((2, 4)).astype(np.float32)
    x = rng.standard_normal((6, 4)).astype(np.float32)
    y = x @ w.T
    loss, _, _ = evaluate_permutation(
        w, x, y, np.arange(4), cfg, np.abs(w), loss="mse"
    )
    mask = nm_mask(np.abs(w), cfg)
    assert loss == pytest.approx(loss_mse(y, x @ (w * mask).T), abs=1e-12)


# ---------------------------------------------------------------------------
# forward_sparse and the soft surrogate


def test_forward_sparse_output_and_cache():
    rng = make_rng(88)
    cfg = NMConfig(2, 4)
    w = rng.standard_normal((4, 8)).astype(np.float32)
    x = rng.standard_normal((12, 8)).astype(np.float32)
    scores = np.abs(w)
    params = init_params(8, 8, make_rng(0))
    y_tilde, cache = forward_sparse(w, x, params, tau=0.5, cfg=cfg, scores=scores)
    assert y_tilde.shape == (12, 4)
    perm = cache["perm"]
    assert sorted(perm.tolist()) == list(range(8))
    validate_nm_mask(cache["mask"], cfg)
    # the cached pieces recompose into the output
    recomposed = cache["x_hat"] @ (cache["w_hat"] * cache["mask"]).T
    assert np.allclose(y_tilde, recomposed, atol=1e-6)


def test_soft_surrogate_gradient_fidelity():
    rng = make_rng(89)
    cfg = NMConfig(2, 4)
    w = rng.standard_normal((4, 8)).astype(np.float32)
    x = rng.standard_normal((12, 8)).astype(np.float32)
    y = x @ w.T
    scores = np.abs(w)
    params = init_params(8, 8, make_rng(1))
    f = soft_surrogate_loss_fn(w, x, y, params, tau=0.7, cfg=cfg, scores=scores)
    flat = np.concatenate([b.astype(np.float64).ravel() for b in params.blocks])
    err = finite_diff_check(f, flat, epsilon=1e-5)
    assert err <= 1e-4


def test_soft_surrogate_multi_block_gradient():
    rng = make_rng(90)
    cfg = NMConfig(2, 4)
    w = rng.standard_normal((3, 8)).astype(np.float32)
    x = rng.standard_normal((10, 8)).astype(np.float32)
    y = x @ w.T
    scores = np.abs(w)
    params = init_params(8, 4, make_rng(2))  # two 4-wide blocks
    f = soft_surrogate_loss_fn(w, x, y, params, tau=0.7, cfg=cfg, scores=scores)
    flat = np.concatenate([b.astype(np.float64).ravel() for b in params.blocks])
    err = finite_diff_check(f, flat, epsilon=1e-5)
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# training


def test_train_learned_never_worse_than_identity():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(model, x, TrainConfig(steps=10, block_size=8), cfg)
    for sol in sols.values():
        assert sol.achieved_loss <= sol.baseline_losses["identity"] + 1e-15
        validate_nm_mask(sol.mask, cfg)
        assert sol.trained


def test_train_accepts_nm_string():
    model, x = _toy_model()
    sols = train(model, x, TrainConfig(steps=2, block_size=8), "2:4")
    assert set(sols) == {"fc1", "fc2"}
    assert str(sols["fc1"].nm) == "2:4"


def test_train_steps_zero_returns_identity():
    model, x = _toy_model()
    sols = train(model, x, TrainConfig(steps=0, block_size=8), NMConfig(2, 4))
    for sol in sols.values():
        assert sol.note == "steps=0; identity baseline returned"
        assert not sol.trained
        assert sol.permutation.tolist() == list(range(sol.permutation.size))
        assert sol.achieved_loss == pytest.approx(
            sol.baseline_losses["identity"], abs=0
        )


def test_train_is_deterministic_per_seed():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    a = train(model, x, TrainConfig(steps=5, block_size=8, seed=3), cfg)
    b = train(model, x, TrainConfig(steps=5, block_size=8, seed=3), cfg)
    for name in a:
        assert np.array_equal(a[name].permutation, b[name].permutation)
        assert a[name].achieved_loss == b[name].achieved_loss


def test_train_seed_changes_trajectory():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    a = train(model, x, TrainConfig(steps=5, block_size=8, seed=0), cfg)
    b = train(model, x, TrainConfig(steps=5, block_size=8, seed=99), cfg)
    different = any(
        not np.array_equal(a[n].permutation, b[n].permutation) for n in a
    )
    losses_differ = any(a[n].achieved_loss != b[n].achieved_loss for n in a)
    assert different or losses_differ


def test_train_threads_equivalent_to_serial():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    a = train(model, x, TrainConfig(steps=5, block_size=8), cfg, threads=1)
    b = train(model, x, TrainConfig(steps=5, block_size=8), cfg, threads=4)
    for name in a:
        assert np.array_equal(a[name].permutation, b[name].permutation)
        assert a[name].achieved_loss == b[name].achieved_loss


def test_train_partial_layers_fall_back_to_heuristic():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(
        model, x, TrainConfig(steps=3, block_size=8, partial_layers="last:1"), cfg
    )
    assert not sols["fc1"].trained
    assert (
        sols["fc1"].note
        == "not selected for training; traditional channel permutation applied"
    )
    assert sols["fc2"].trained
    # the untrained layer still carries the better of its two baselines
    assert sols["fc1"].achieved_loss == pytest.approx(
        min(sols["fc1"].baseline_losses.values()), abs=0
    )


def test_train_partial_layer_by_name():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(
        model, x, TrainConfig(steps=3, block_size=8, partial_layers="fc1"), cfg
    )
    assert sols["fc1"].trained
    assert not sols["fc2"].trained


def test_train_partial_layer_by_negative_index():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(
        model, x, TrainConfig(steps=2, block_size=8, partial_layers="-1"), cfg
    )
    assert not sols["fc1"].trained
    assert sols["fc2"].trained


def test_train_partial_selector_errors():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    with pytest.raises(ValueError, match="bad partial layer selector"):
        train(
            model, x, TrainConfig(steps=1, block_size=8, partial_layers="last:x"),
            cfg,
        )
    with pytest.raises(ValueError, match="unknown layer 'fc9'"):
        train(
            model, x, TrainConfig(steps=1, block_size=8, partial_layers="fc9"),
            cfg,
        )
    with pytest.raises(ValueError, match="layer index 5 out of range"):
        train(
            model, x, TrainConfig(steps=1, block_size=8, partial_layers="5"),
            cfg,
        )


def test_train_divergence_aborts_with_note(monkeypatch):
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    orig = pl.loss_cosine_fwd
    calls = {"n": 0}

    def poisoned(y, y_tilde):
        calls["n"] += 1
        val, cache = orig(y, y_tilde)
        if calls["n"] >= 8:
            return float("nan"), cache
        return val, cache

    monkeypatch.setattr(pl, "loss_cosine_fwd", poisoned)
    sols = train(
        Model([model.layers[0]]), x, TrainConfig(steps=10, block_size=8), cfg
    )
    sol = sols["fc1"]
    assert sol.note is not None and sol.note.startswith("aborted at step")
    # the best candidate seen before the abort is still returned
    assert np.isfinite(sol.achieved_loss)
    assert sol.achieved_loss <= sol.baseline_losses["identity"] + 1e-15


def test_train_endtoend_shares_chain_loss():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(
        model, x, TrainConfig(steps=5, block_size=8, mode="endtoend"), cfg
    )
    losses = {sol.achieved_loss for sol in sols.values()}
    assert len(losses) == 1
    for sol in sols.values():
        validate_nm_mask(sol.mask, cfg)


def test_train_endtoend_with_partial_freezes_rest():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(
        model,
        x,
        TrainConfig(steps=3, block_size=8, mode="endtoend", partial_layers="fc2"),
        cfg,
    )
    assert not sols["fc1"].trained
    assert sols["fc2"].trained


# ---------------------------------------------------------------------------
# sparse forward, folding, export


def test_sparse_forward_matches_manual_chain():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(model, x, TrainConfig(steps=3, block_size=8), cfg)
    y = sparse_forward(model, sols, x)
    h = x
    for layer in model.layers:
        sol = sols[layer.name]
        w_hat = gather_columns(layer.weight, sol.permutation) * sol.mask
        h = gather_columns(h, sol.permutation) @ w_hat.T
    assert np.array_equal(y, h)


def test_fold_bitwise_matches_sparse_forward():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(model, x, TrainConfig(steps=4, block_size=8), cfg)
    folded, exports, sidecar = fold_and_export(model, sols)
    assert np.array_equal(
        folded_forward(folded, sidecar, x), sparse_forward(model, sols, x)
    )


def test_fold_only_first_layer_gathers_input():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(model, x, TrainConfig(steps=2, block_size=8), cfg)
    _, _, sidecar = fold_and_export(model, sols)
    layers = sidecar["layers"]
    assert layers["fc1"]["input_gather"] is True
    assert layers["fc2"]["input_gather"] is False


def test_exports_decompress_to_folded_weights():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(model, x, TrainConfig(steps=3, block_size=8), cfg)
    folded, exports, _ = fold_and_export(model, sols)
    for layer in folded.layers:
        dense = decompress_nm(exports[layer.name])
        assert np.array_equal(dense, layer.weight)


def test_row_permuted_predecessor_keeps_group_pattern():
    # folding the consumer permutes the producer's rows; every producer
    # row keeps its own masked column pattern, so the constraint holds
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(model, x, TrainConfig(steps=3, block_size=8), cfg)
    _, exports, _ = fold_and_export(model, sols)
    for name, comp in exports.items():
        dense = decompress_nm(comp)
        validate_nm_mask(dense != 0, cfg)


def test_fold_predecessor_rows_are_permuted_copy():
    model, x = _toy_model()
    cfg = NMConfig(2, 4)
    sols = train(model, x, TrainConfig(steps=3, block_size=8), cfg)
    folded, _, _ = fold_and_export(model, sols)
    # fc1's folded weight: its own permuted+masked weight with rows
    # reordered by fc2's permutation, so fc2 needs no runtime gather
    w1 = model.layers[0].weight
    s1, s2 = sols["fc1"], sols["fc2"]
    own = gather_columns(w1, s1.permutation) * s1.mask
    assert np.array_equal(folded.layers[0].weight, own[s2.permutation])
