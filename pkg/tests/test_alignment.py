import numpy as np
import pytest

from alignsum import alignment as al
from alignsum import autodiff as ad
from alignsum.errors import InvalidArgumentError, NumericDomainError, ShapeError
from alignsum.gradcheck import grad_check
from alignsum.representation import FragmentFeatures

from oracles import loop_align_and_refresh


@pytest.fixture(autouse=True)
def float64_mode():
    with ad.using_dtype("float64"):
        yield


def frags(arr, mask=None, modality="text"):
    arr = np.asarray(arr, dtype=np.float64)
    if mask is None:
        mask = np.ones(arr.shape[:-1], dtype=bool)
    return FragmentFeatures(ad.tensor(arr), mask, modality)


# --- cosine similarity -------------------------------------------------------

def test_cosine_orthogonal_identical_and_hand_value():
    x = frags([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    y = frags([[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
    s = al.cosine_similarity_matrix(x, y).data
    assert abs(s[0, 0]) < 1e-12            # orthogonal
    assert abs(s[1, 1] - 1.0) < 1e-12      # identical direction
    assert abs(s[2, 2] - 0.8) < 1e-12      # 4 / (sqrt5 * sqrt5)


def test_cosine_scale_invariance():
    rng = np.random.default_rng(0)
    xv = rng.normal(size=(4, 6))
    yv = rng.normal(size=(5, 6))
    a = al.cosine_similarity_matrix(frags(xv), frags(yv)).data
    b = al.cosine_similarity_matrix(frags(3.7 * xv), frags(0.2 * yv)).data
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_cosine_masked_entries_get_sentinel():
    x = frags([[1.0, 0.0], [1.0, 1.0]], mask=np.array([True, False]))
    y = frags([[0.0, 1.0], [1.0, 0.0]])
    s = al.cosine_similarity_matrix(x, y).data
    sentinel = ad.neg_sentinel(np.float64)
    assert (s[1] == sentinel).all()
    assert (s[0] != sentinel).all()


def test_cosine_zero_norm_unmasked_row_errors():
    x = frags([[0.0, 0.0], [1.0, 1.0]])
    y = frags([[1.0, 0.0]])
    with pytest.raises(NumericDomainError) as exc:
        al.cosine_similarity_matrix(x, y)
    assert "0" in str(exc.value)


def test_cosine_zero_norm_masked_row_is_fine():
    x = frags([[1.0, 1.0], [0.0, 0.0]], mask=np.array([True, False]))
    y = frags([[1.0, 0.0]])
    s = al.cosine_similarity_matrix(x, y)
    assert np.isfinite(s.data[0]).all()


def test_cosine_width_mismatch():
    with pytest.raises(ShapeError):
        al.cosine_similarity_matrix(frags([[1.0, 2.0]]), frags([[1.0, 2.0, 3.0]]))


# --- column normalization ----------------------------------------------------

def test_normalize_single_row_is_one():
    s = ad.tensor([[0.8]])
    out = al.normalize_similarity(s, np.array([True]), np.array([True]), shift=-0.15)
    np.testing.assert_allclose(out.data, [[1.0]], atol=1e-6)


def test_normalize_clamps_shifted_negatives():
    s = ad.tensor([[0.1], [0.8]])
    out = al.normalize_similarity(s, np.ones(2, bool), np.ones(1, bool), shift=-0.15)
    assert out.data[0, 0] == 0.0
    assert out.data[1, 0] > 0.0


def test_normalize_hand_column():
    s = ad.tensor([[0.8], [0.3]])
    out = al.normalize_similarity(s, np.ones(2, bool), np.ones(1, bool), shift=-0.15)
    np.testing.assert_allclose(out.data[:, 0], [0.9744, 0.2249], atol=1e-3)


def test_normalize_masked_rows_do_not_pollute_columns():
    sv = np.array([[0.8], [0.3]])
    full = al.normalize_similarity(
        ad.tensor(sv), np.ones(2, bool), np.ones(1, bool), shift=-0.15
    ).data
    # same column with an extra masked row carrying an arbitrary value
    sv3 = np.array([[0.8], [0.3], [123.0]])
    part = al.normalize_similarity(
        ad.tensor(sv3), np.array([True, True, False]), np.ones(1, bool), shift=-0.15
    ).data
    np.testing.assert_allclose(part[:2, 0], full[:, 0], atol=1e-12)


def test_normalize_relu_in_denominator_variant():
    sv = np.array([[0.5], [-0.9]])
    default = al.normalize_similarity(ad.tensor(sv), np.ones(2, bool), np.ones(1, bool), 0.0).data
    variant = al.normalize_similarity(
        ad.tensor(sv), np.ones(2, bool), np.ones(1, bool), 0.0, relu_in_denominator=True
    ).data
    # clamped denominator drops the negative entry, boosting the positive one
    assert variant[0, 0] > default[0, 0]
    assert np.isclose(variant[0, 0], 0.5 / np.sqrt(0.25 + al.NORM_EPS), atol=1e-12)


# --- attention over the reference -------------------------------------------

def test_attend_uniform_gives_mean():
    rng = np.random.default_rng(1)
    y = frags(rng.normal(size=(5, 4)))
    s = ad.tensor(np.full((3, 5), 0.42))
    out, weights = al.attend(s, y, sharpness=6.0)
    np.testing.assert_allclose(weights.data, np.full((3, 5), 0.2), atol=1e-12)
    np.testing.assert_allclose(out.data, np.tile(y.features.data.mean(axis=0), (3, 1)), atol=1e-12)


def test_attend_dominant_entry():
    y = frags(np.eye(2))
    s = ad.tensor([[1.0, 0.0]])
    out, weights = al.attend(s, y, sharpness=6.0)
    assert weights.data[0, 0] > 0.99
    np.testing.assert_allclose(weights.data[0, 0], np.exp(6) / (np.exp(6) + 1), atol=1e-9)
    np.testing.assert_allclose(out.data[0], weights.data[0], atol=1e-12)


def test_attend_singleton_reference():
    y = frags([[3.0, -1.0, 2.0]])
    s = ad.tensor([[0.3], [0.9]])
    out, weights = al.attend(s, y, sharpness=6.0)
    np.testing.assert_array_equal(weights.data, np.ones((2, 1)))
    np.testing.assert_array_equal(out.data, np.tile(y.features.data[0], (2, 1)))


def test_attend_rows_are_distributions_and_masked_get_zero():
    rng = np.random.default_rng(2)
    y = frags(rng.normal(size=(6, 4)), mask=np.array([True, True, True, True, False, False]))
    s = ad.tensor(rng.normal(size=(3, 6)))
    _, weights = al.attend(s, y, sharpness=6.0)
    np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones(3), atol=1e-6)
    assert (weights.data >= 0).all()
    np.testing.assert_array_equal(weights.data[:, 4:], np.zeros((3, 2)))


def test_attend_fully_masked_reference_errors():
    y = frags(np.ones((2, 3)), mask=np.zeros(2, dtype=bool))
    with pytest.raises(InvalidArgumentError):
        al.attend(ad.tensor(np.zeros((1, 2))), y, sharpness=6.0)


# --- gated update -------------------------------------------------------------

def make_gate(width, seed=3, zero=False):
    rng = np.random.default_rng(seed)
    gate = al.FusionGate("t", width, rng)
    if zero:
        for p in gate.parameters():
            p.data[...] = 0.0
    return gate


def test_gate_all_zero_params_halves_state():
    gate = make_gate(4, zero=True)
    x = np.random.default_rng(4).normal(size=(3, 4))
    out = al.gated_update(ad.tensor(x), ad.tensor(np.zeros((3, 4))), gate)
    np.testing.assert_allclose(out.data, 0.5 * x, atol=1e-12)


def test_gate_override_full_replacement_and_retention():
    gate = make_gate(4)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4))
    c = rng.normal(size=(2, 4))
    keep = al.gated_update(ad.tensor(x), ad.tensor(c), gate, gate_override=0.0)
    np.testing.assert_array_equal(keep.data, x)
    swap = al.gated_update(ad.tensor(x), ad.tensor(c), gate, gate_override=1.0)
    joint = np.concatenate([x, c], axis=-1)
    np.testing.assert_allclose(swap.data, np.tanh(joint @ gate.w_cand.data + gate.b_cand.data), atol=1e-12)


def test_gate_output_bounded_between_state_and_candidate():
    gate = make_gate(6, seed=6)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 6))
    c = rng.normal(size=(5, 6))
    out = al.gated_update(ad.tensor(x), ad.tensor(c), gate).data
    joint = np.concatenate([x, c], axis=-1)
    u = np.tanh(joint @ gate.w_cand.data + gate.b_cand.data)
    lo = np.minimum(x, u)
    hi = np.maximum(x, u)
    assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


def test_gate_shape_mismatch():
    gate = make_gate(4)
    with pytest.raises(ShapeError):
        al.gated_update(ad.tensor(np.zeros((2, 4))), ad.tensor(np.zeros((3, 4))), gate)


# --- full layer ---------------------------------------------------------------

def make_layer(width, seed=8, **kwargs):
    return al.AlignmentLayer("layer", width, np.random.default_rng(seed), **kwargs)


def test_layer_singleton_reference():
    layer = make_layer(4)
    rng = np.random.default_rng(9)
    x = frags(rng.normal(size=(3, 4)))
    y = frags(rng.normal(size=(1, 4)), modality="image")
    aligned, refreshed = layer.forward(x, y, shift=-0.15, sharpness=6.0)
    np.testing.assert_allclose(
        aligned.features.data, np.tile(y.features.data[0], (3, 1)), atol=1e-12
    )
    assert refreshed.features.shape == (3, 4)
    assert refreshed.modality == "text"


def test_layer_mask_propagates():
    layer = make_layer(4)
    rng = np.random.default_rng(10)
    mask = np.array([True, True, False])
    x = frags(rng.normal(size=(3, 4)), mask=mask)
    y = frags(rng.normal(size=(2, 4)))
    aligned, refreshed = layer.forward(x, y, shift=-0.15, sharpness=6.0)
    np.testing.assert_array_equal(aligned.mask, mask)
    np.testing.assert_array_equal(refreshed.mask, mask)


def test_layer_matches_loop_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n, m, d = rng.integers(1, 6), rng.integers(1, 6), int(rng.integers(2, 9))
        layer = make_layer(d, seed=int(rng.integers(1 << 30)))
        xv = rng.normal(size=(n, d))
        yv = rng.normal(size=(m, d))
        aligned, refreshed = layer.forward(
            frags(xv), frags(yv), shift=-0.15, sharpness=6.0
        )
        exp_aligned, exp_refreshed = loop_align_and_refresh(
            xv.tolist(),
            yv.tolist(),
            -0.15,
            6.0,
            layer.gate.w_gate.data.tolist(),
            layer.gate.b_gate.data.tolist(),
            layer.gate.w_cand.data.tolist(),
            layer.gate.b_cand.data.tolist(),
        )
        np.testing.assert_allclose(aligned.features.data, exp_aligned, atol=1e-9)
        np.testing.assert_allclose(refreshed.features.data, exp_refreshed, atol=1e-9)


def test_layer_permutation_equivariance():
    rng = np.random.default_rng(12)
    layer = make_layer(5, seed=13)
    xv = rng.normal(size=(4, 5))
    yv = rng.normal(size=(6, 5))
    aligned, refreshed = layer.forward(frags(xv), frags(yv), -0.15, 6.0)
    # permuting reference rows changes nothing (weighted sums)
    perm_y = rng.permutation(6)
    aligned_p, refreshed_p = layer.forward(frags(xv), frags(yv[perm_y]), -0.15, 6.0)
    np.testing.assert_allclose(aligned.features.data, aligned_p.features.data, atol=1e-9)
    np.testing.assert_allclose(refreshed.features.data, refreshed_p.features.data, atol=1e-9)
    # permuting state rows permutes both outputs identically
    perm_x = rng.permutation(4)
    aligned_q, refreshed_q = layer.forward(frags(xv[perm_x]), frags(yv), -0.15, 6.0)
    np.testing.assert_allclose(aligned_q.features.data, aligned.features.data[perm_x], atol=1e-9)
    np.testing.assert_allclose(refreshed_q.features.data, refreshed.features.data[perm_x], atol=1e-9)


def test_layer_batched_matches_per_example():
    rng = np.random.default_rng(14)
    layer = make_layer(4, seed=15)
    xv = rng.normal(size=(2, 3, 4))
    yv = rng.normal(size=(2, 5, 4))
    aligned_b, refreshed_b = layer.forward(frags(xv), frags(yv), -0.15, 6.0)
    for b in range(2):
        aligned_1, refreshed_1 = layer.forward(frags(xv[b]), frags(yv[b]), -0.15, 6.0)
        np.testing.assert_allclose(aligned_b.features.data[b], aligned_1.features.data, atol=1e-12)
        np.testing.assert_allclose(refreshed_b.features.data[b], refreshed_1.features.data, atol=1e-12)


def test_layer_with_self_attention_runs():
    layer = make_layer(4, seed=16, self_attention=True, heads=2)
    rng = np.random.default_rng(17)
    x = frags(rng.normal(size=(3, 4)))
    y = frags(rng.normal(size=(2, 4)))
    aligned, refreshed = layer.forward(x, y, -0.15, 6.0)
    assert aligned.features.shape == (3, 4)
    assert refreshed.features.shape == (3, 4)


# --- gradients ----------------------------------------------------------------

def test_gate_grad_check_4x8():
    rng = np.random.default_rng(18)
    gate = make_gate(8, seed=19)
    x = ad.tensor(rng.normal(size=(4, 8)), requires_grad=True)
    c = ad.tensor(rng.normal(size=(4, 8)), requires_grad=True)

    def f(xt, ct):
        out = al.gated_update(xt, ct, gate)
        return ad.sum_(ad.mul(out, out))

    report = grad_check(f, [x, c])
    assert report.max_rel_error < 1e-4


def test_full_layer_grad_check():
    rng = np.random.default_rng(20)
    layer = make_layer(4, seed=21)
    xv = rng.normal(size=(3, 4))
    yv = rng.normal(size=(2, 4))
    x = ad.tensor(xv, requires_grad=True)
    y = ad.tensor(yv, requires_grad=True)

    def f(xt, yt):
        aligned, refreshed = layer.forward(
            FragmentFeatures(xt, np.ones(3, bool)),
            FragmentFeatures(yt, np.ones(2, bool)),
            shift=-0.15,
            sharpness=6.0,
        )
        return ad.add(
            ad.sum_(ad.mul(aligned.features, aligned.features)),
            ad.sum_(ad.mul(refreshed.features, refreshed.features)),
        )

    report = grad_check(f, [x, y])
    assert report.max_rel_error < 1e-4
