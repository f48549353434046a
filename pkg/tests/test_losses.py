"""Loss-layer tests. The analytic results are checked against independent
brute-force implementations (explicit double loops over math.exp) and against
central finite differences before any value is trusted.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lasp.errors import DegenerateInputError, EmptySelectionError, ShapeError
from lasp.losses import (
    ClassMeans,
    IRDConfig,
    LabeledEmbeddingBatch,
    MaskVector,
    SupConConfig,
    async_supcon,
    class_means,
    ird_loss,
    mask_training_loss,
    ncmc_masked_predict,
    selective_embeddings,
    selective_ird,
    similarity_matrix,
)
from lasp.numerics import finite_diff_grad, l2_normalize_rows, make_rng, relative_grad_error


def _unit_rows(rng, n, d):
    e = rng.normal(size=(n, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def _batch(rng, n_samples=3, d=6, n_classes=2):
    labels_s = rng.integers(0, n_classes, size=n_samples)
    labels_s[:2] = labels_s[0]  # at least one same-class pair of samples
    e = _unit_rows(rng, 2 * n_samples, d)
    origin = np.concatenate([np.arange(n_samples)] * 2)
    labels = np.concatenate([labels_s] * 2)
    current = np.zeros(2 * n_samples, dtype=bool)
    current[: n_samples // 2 + 1] = True
    current = np.concatenate([current[:n_samples]] * 2)
    return LabeledEmbeddingBatch(e, labels, origin, current)


def _brute_supcon(e, labels, anchors, tau):
    """Independent double-loop reference for the anchored contrastive loss."""
    n = e.shape[0]
    total = 0.0
    for i in range(n):
        if not anchors[i]:
            continue
        pos = [j for j in range(n) if j != i and labels[j] == labels[i]]
        denom = sum(math.exp(float(e[i] @ e[k]) / tau) for k in range(n) if k != i)
        for j in pos:
            p_ij = math.exp(float(e[i] @ e[j]) / tau) / denom
            total -= math.log(p_ij) / len(pos)
    return total


def _brute_ird(r_old, e, tau):
    n = e.shape[0]
    total = 0.0
    for i in range(n):
        denom = sum(math.exp(float(e[i] @ e[k]) / tau) for k in range(n) if k != i)
        for j in range(n):
            if j != i:
                p_ij = math.exp(float(e[i] @ e[j]) / tau) / denom
                total -= r_old[i, j] * math.log(p_ij)
    return total


# ---------------------------------------------------------------- supcon


def test_supcon_matches_brute_force():
    rng = make_rng(0)
    for seed in range(5):
        batch = _batch(make_rng(seed), n_samples=4, d=5, n_classes=3)
        loss, _ = async_supcon(batch, SupConConfig(temperature=0.5))
        expected = _brute_supcon(batch.embeddings, batch.labels, batch.current_task, 0.5)
        assert loss == pytest.approx(expected, rel=1e-12)


def test_supcon_orthonormal_views_closed_form():
    # two samples, two classes, four orthonormal views at temperature 1:
    # every off-diagonal similarity is 0, each anchor has one positive,
    # so each anchor contributes -log(1/3) and the total is 4*ln(3)
    e = np.eye(4)
    batch = LabeledEmbeddingBatch(
        e, labels=[0, 0, 1, 1], view_origin=[0, 0, 1, 1], current_task=[True] * 4
    )
    loss, _ = async_supcon(batch, SupConConfig(temperature=1.0))
    assert loss == pytest.approx(4.0 * math.log(3.0), rel=1e-12)


def test_supcon_gradient_matches_finite_differences():
    batch = _batch(make_rng(5), n_samples=4, d=5, n_classes=2)
    cfg = SupConConfig(temperature=0.4)
    _, grad = async_supcon(batch, cfg)

    def loss_at(flat):
        probe = LabeledEmbeddingBatch(
            flat.reshape(batch.embeddings.shape),
            batch.labels,
            batch.view_origin,
            batch.current_task,
        )
        return async_supcon(probe, cfg)[0]

    fd = finite_diff_grad(loss_at, batch.embeddings.ravel())
    assert relative_grad_error(grad.ravel(), fd) < 1e-6


def test_supcon_no_anchors_is_zero():
    batch = _batch(make_rng(1))
    batch.current_task[:] = False
    loss, grad = async_supcon(batch, SupConConfig())
    assert loss == 0.0
    assert not grad.any()


def test_supcon_gradient_vanishes_on_non_anchor_only_rows():
    # memory-only rows still receive gradient (they appear in anchor
    # denominators), but a batch with a single anchored sample pulls
    # gradient onto that sample's positives too; just check shape here
    batch = _batch(make_rng(2), n_samples=3)
    _, grad = async_supcon(batch, SupConConfig())
    assert grad.shape == batch.embeddings.shape


def test_supcon_singleton_anchor_class_raises():
    e = np.eye(4)
    batch = LabeledEmbeddingBatch(
        e, labels=[0, 0, 1, 2], view_origin=[0, 0, 1, 1], current_task=[False, False, True, True]
    )
    with pytest.raises(DegenerateInputError, match=r"\[2, 3\]"):
        async_supcon(batch, SupConConfig())


def test_batch_validation():
    with pytest.raises(ShapeError):
        LabeledEmbeddingBatch(np.zeros((3, 2)), [0, 0, 1], [0, 0, 1], [True] * 3)
    with pytest.raises(ValueError, match="two views"):
        LabeledEmbeddingBatch(np.zeros((4, 2)), [0] * 4, [0, 1, 2, 3], [True] * 4)
    with pytest.raises(ShapeError):
        LabeledEmbeddingBatch(np.zeros((4, 2)), [0] * 3, [0, 0, 1, 1], [True] * 4)


# ------------------------------------------------- similarity matrix / IRD


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(2, 8),
    d=st.integers(1, 6),
    temperature=st.floats(0.05, 5.0),
    seed=st.integers(0, 2**31),
)
def test_similarity_matrix_rows_are_stochastic(n, d, temperature, seed):
    e = make_rng(seed).normal(size=(n, d))  # arbitrary rows, not only unit ones
    r = similarity_matrix(e, temperature)
    assert r.shape == (n, n)
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(np.diag(r), 0.0)
    assert (r >= 0.0).all()


def test_similarity_matrix_two_rows_is_trivially_one():
    r = similarity_matrix(np.array([[1.0, 0.0], [0.0, 1.0]]), 0.7)
    np.testing.assert_allclose(r, [[0.0, 1.0], [1.0, 0.0]])


def test_similarity_matrix_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        similarity_matrix(np.ones((1, 3)), 0.5)
    with pytest.raises(ValueError):
        similarity_matrix(np.ones((3, 3)), 0.0)


def test_ird_matches_brute_force():
    rng = make_rng(3)
    e_old = _unit_rows(rng, 5, 4)
    e_new = _unit_rows(rng, 5, 4)
    r_old = similarity_matrix(e_old, 0.1)
    loss, _ = ird_loss(r_old, e_new, 0.2)
    assert loss == pytest.approx(_brute_ird(r_old, e_new, 0.2), rel=1e-12)


def test_ird_gradient_matches_finite_differences():
    rng = make_rng(4)
    r_old = similarity_matrix(_unit_rows(rng, 5, 4), 0.1)
    e = _unit_rows(rng, 5, 4)
    _, grad = ird_loss(r_old, e, 0.2)
    fd = finite_diff_grad(lambda f: ird_loss(r_old, f.reshape(5, 4), 0.2)[0], e.ravel())
    assert relative_grad_error(grad.ravel(), fd) < 1e-6


def test_ird_self_distillation_is_entropy_minimum():
    # cross-entropy against the matrix induced by e itself is minimal at e:
    # any perturbation adds a positive KL term (same temperature both sides)
    rng = make_rng(6)
    e = _unit_rows(rng, 6, 5)
    tau = 0.3
    r = similarity_matrix(e, tau)
    base, _ = ird_loss(r, e, tau)
    for _ in range(20):
        perturbed = e + rng.normal(scale=0.05, size=e.shape)
        value, _ = ird_loss(r, perturbed, tau)
        assert value >= base - 1e-12


def test_ird_shape_mismatch():
    with pytest.raises(ShapeError):
        ird_loss(np.ones((3, 3)), np.ones((4, 2)), 0.2)


# ------------------------------------------------------------- selective


def test_selective_embeddings_restrict_and_renormalize():
    e = np.array([[3.0, 0.0, 4.0], [1.0, 5.0, 0.0]])
    mask = MaskVector([10.0, -10.0, 10.0])  # selects dims 0 and 2
    out = selective_embeddings(e, mask)
    expected, _, _ = l2_normalize_rows(e[:, [0, 2]])
    np.testing.assert_allclose(out, expected)


def test_selective_embeddings_empty_selection():
    with pytest.raises(EmptySelectionError, match="full-width"):
        selective_embeddings(np.ones((2, 3)), MaskVector([-10.0, -10.0, -10.0]))


def test_selective_ird_full_mask_equals_full_ird():
    rng = make_rng(8)
    e_old = _unit_rows(rng, 6, 5)
    e_new = _unit_rows(rng, 6, 5)
    cfg = IRDConfig(current_temperature=0.2, past_temperature=0.1)
    full = MaskVector.full(5)
    loss_sel, grad_sel = selective_ird(e_old, e_new, full, cfg)
    r_old = similarity_matrix(e_old, cfg.past_temperature)
    loss_ird, grad_ird = ird_loss(r_old, e_new, cfg.current_temperature)
    assert loss_sel == pytest.approx(loss_ird, abs=1e-12)
    # the selective path renormalizes, so its gradient is the tangent
    # projection of the full one; the radial part is annihilated anyway when
    # the model backpropagates through its own output normalization
    radial = np.sum(grad_ird * e_new, axis=1, keepdims=True) * e_new
    np.testing.assert_allclose(grad_sel, grad_ird - radial, atol=1e-9)


def test_selective_ird_gradient_matches_finite_differences():
    rng = make_rng(9)
    e_old = _unit_rows(rng, 5, 6)
    e_new = _unit_rows(rng, 5, 6)
    mask = MaskVector([2.0, -3.0, 1.5, -1.0, 3.0, -2.0])  # selects 0, 2, 4
    cfg = IRDConfig()
    _, grad = selective_ird(e_old, e_new, mask, cfg)

    fd = finite_diff_grad(
        lambda f: selective_ird(e_old, f.reshape(5, 6), mask, cfg)[0], e_new.ravel()
    )
    assert relative_grad_error(grad.ravel(), fd) < 1e-6
    # unselected dimensions get exactly zero gradient
    np.testing.assert_array_equal(grad[:, [1, 3, 5]], 0.0)


def test_selective_ird_empty_selection():
    rng = make_rng(10)
    e = _unit_rows(rng, 4, 3)
    with pytest.raises(EmptySelectionError):
        selective_ird(e, e, MaskVector([-20.0, -20.0, -20.0]), IRDConfig())


# ---------------------------------------------------------------- masks


def test_mask_vector_weights_and_selection():
    mask = MaskVector([0.0, 4.0, -4.0])
    w = mask.weights()
    np.testing.assert_allclose(w, [0.5, 1 / (1 + math.exp(-4)), 1 / (1 + math.exp(4))])
    np.testing.assert_array_equal(mask.selected(0.5), [1])  # 0.5 is not > 0.5
    np.testing.assert_array_equal(mask.selected(0.5, keep_above=False), [0, 2])
    assert mask.l1() == 8.0


def test_mask_full_selects_everything():
    mask = MaskVector.full(7)
    np.testing.assert_array_equal(mask.selected(), np.arange(7))


def test_mask_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        MaskVector([np.inf, 0.0])


# ------------------------------------------------------------ class means


def test_class_means_matches_manual_groupby():
    rng = make_rng(11)
    e = rng.normal(size=(7, 3))
    labels = np.array([2, 0, 2, 5, 0, 2, 5])
    means = class_means(e, labels)
    np.testing.assert_array_equal(means.classes, [0, 2, 5])
    np.testing.assert_array_equal(means.counts, [2, 3, 2])
    np.testing.assert_allclose(means.mean_for(2), e[[0, 2, 5]].mean(axis=0))
    np.testing.assert_allclose(means.mean_for(0), e[[1, 4]].mean(axis=0))
    with pytest.raises(KeyError):
        means.mean_for(1)


def test_class_means_empty_raises():
    with pytest.raises(DegenerateInputError):
        class_means(np.zeros((0, 3)), np.zeros(0, dtype=int))


# ------------------------------------------------------------------ ncmc


def test_ncmc_predicts_nearest_mean():
    means = ClassMeans(
        classes=np.array([0, 1]),
        means=np.array([[1.0, 0.0], [0.0, 1.0]]),
        counts=np.array([1, 1]),
    )
    mask = MaskVector.full(2)
    pred = ncmc_masked_predict(np.array([[0.9, 0.1], [0.2, 0.8]]), means, mask)
    np.testing.assert_array_equal(pred, [0, 1])
    assert ncmc_masked_predict(np.array([0.9, 0.1]), means, mask) == 0


def test_ncmc_tie_breaks_to_smallest_class():
    same = np.array([[1.0, 0.0], [1.0, 0.0]])
    means = ClassMeans(classes=np.array([3, 7]), means=same, counts=np.array([1, 1]))
    pred = ncmc_masked_predict(np.array([[1.0, 0.0]]), means, MaskVector.full(2))
    assert pred[0] == 3


def test_ncmc_mask_changes_the_answer():
    # with every dimension the sample leans to class 0; suppressing dim 0
    # leaves class 1's mean much better aligned
    means = ClassMeans(
        classes=np.array([0, 1]),
        means=np.array([[1.0, 0.0, 0.9], [0.0, 1.0, 0.0]]),
        counts=np.array([1, 1]),
    )
    x = np.array([[0.9, 0.6, 0.2]])
    assert ncmc_masked_predict(x, means, MaskVector.full(3))[0] == 0
    assert ncmc_masked_predict(x, means, MaskVector([-20.0, 20.0, 20.0]))[0] == 1


def test_ncmc_degenerate_mean_never_wins():
    means = ClassMeans(
        classes=np.array([0, 1]),
        means=np.array([[0.0, 0.0], [0.0, 1.0]]),
        counts=np.array([1, 1]),
    )
    pred = ncmc_masked_predict(np.array([[1.0, 0.0]]), means, MaskVector.full(2))
    assert pred[0] == 1


def test_ncmc_all_degenerate_raises():
    means = ClassMeans(classes=np.array([0]), means=np.zeros((1, 2)), counts=np.array([1]))
    with pytest.raises(DegenerateInputError):
        ncmc_masked_predict(np.array([[1.0, 0.0]]), means, MaskVector.full(2))


# ------------------------------------------------------ mask training loss


def _mask_setup(seed=12, n=6, d=5):
    rng = make_rng(seed)
    e = _unit_rows(rng, n, d)
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1  # both classes present
    means = class_means(e, labels)
    s = rng.uniform(0.3, 1.5, size=d) * rng.choice([-1.0, 1.0], size=d)
    return e, labels, means, MaskVector(s)


def test_mask_loss_gradient_matches_finite_differences():
    e, labels, means, mask = _mask_setup()
    loss, grad, skipped = mask_training_loss(e, labels, means, mask, l1_weight=0.01)
    assert skipped == 0

    def loss_at(s):
        return mask_training_loss(e, labels, means, MaskVector(s), l1_weight=0.01)[0]

    fd = finite_diff_grad(loss_at, mask.raw)
    assert relative_grad_error(grad, fd) < 1e-6


def test_mask_loss_sign_switch_flips_alignment_term():
    e, labels, means, mask = _mask_setup(13)
    lo, _, _ = mask_training_loss(e, labels, means, mask, 0.02, maximize_alignment=True)
    hi, _, _ = mask_training_loss(e, labels, means, mask, 0.02, maximize_alignment=False)
    # alignment terms cancel, leaving twice the shared L1 penalty
    assert lo + hi == pytest.approx(2 * 0.02 * mask.l1(), rel=1e-12)


def test_mask_loss_counts_skipped_but_divides_by_full_n():
    e, labels, means, mask = _mask_setup(14, n=4)
    e_with_dead = e.copy()
    e_with_dead[2] = 0.0  # zero embedding is degenerate under any mask
    loss, _, skipped = mask_training_loss(e_with_dead, labels, means, mask, 0.0)
    assert skipped == 1
    live = [0, 1, 3]
    w = mask.weights()
    cos = []
    for i in live:
        a = e_with_dead[i] * w
        b = means.mean_for(labels[i]) * w
        cos.append(float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert loss == pytest.approx(-sum(cos) / 4, rel=1e-12)  # n == 4, not 3


def test_mask_loss_missing_class_raises_key_error():
    e, labels, means, mask = _mask_setup(15)
    bad = labels.copy()
    bad[0] = 99
    with pytest.raises(KeyError, match="99"):
        mask_training_loss(e, bad, means, mask, 0.01)


def test_mask_loss_all_degenerate_raises():
    e, labels, means, mask = _mask_setup(16)
    with pytest.raises(DegenerateInputError):
        mask_training_loss(np.zeros_like(e), labels, means, mask, 0.01)


def test_mask_loss_rejects_negative_l1():
    e, labels, means, mask = _mask_setup(17)
    with pytest.raises(ValueError):
        mask_training_loss(e, labels, means, mask, -0.1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), l1=st.floats(0.0, 0.2))
def test_mask_loss_l1_term_is_exact(seed, l1):
    e, labels, means, mask = _mask_setup(seed % 1000)
    with_l1, _, _ = mask_training_loss(e, labels, means, mask, l1)
    without, _, _ = mask_training_loss(e, labels, means, mask, 0.0)
    assert with_l1 - without == pytest.approx(l1 * mask.l1(), abs=1e-12)
