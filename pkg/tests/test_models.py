import warnings

import numpy as np
import pytest

from mmfedsim.models import (
    Batch,
    alignment_loss,
    alignment_terms,
    backward,
    build_model_spec,
    encode,
    forward,
    init_model,
    l2_normalize,
    predict,
    sigmoid_bce,
    softmax_xent,
    task_loss,
)
from mmfedsim.tensor_ops import finite_diff_grad, relative_error

DIMS = (5, 4, 3)


def make(task, n_out=3, activation="tanh", dims=DIMS):
    spec = build_model_spec(dims, task, n_out, hidden=6, projection_dim=4, head_hidden=5, activation=activation)
    return spec, init_model(spec, 0)


def random_batch(rng, task, n=6, n_out=3, dims=DIMS):
    inputs = [rng.standard_normal((n, d)) for d in dims]
    if task == "multiclass":
        return Batch(inputs, rng.integers(0, n_out, n))
    if task == "multilabel":
        return Batch(inputs, rng.integers(0, 2, (n, n_out)))
    return Batch(inputs)


def test_spec_validation():
    spec, _ = make("multiclass")
    assert spec.n_modalities == 3 and spec.n_outputs == 3
    assert spec.head_spec.n_in == 3 * 4
    r, _ = make("retrieval")
    assert r.head_spec is None
    with pytest.raises(ValueError):
        build_model_spec((2,) * 5, "multiclass", 2)
    with pytest.raises(ValueError):
        build_model_spec((2, 2), "regression", 2)


def test_param_blocks_cover_vector():
    spec, p = make("multiclass")
    enc, head = spec.param_slices()
    sizes = [s.stop - s.start for s in enc] + [head.stop - head.start]
    assert sum(sizes) == spec.n_params == p.size
    assert np.array_equal(init_model(spec, 0), p)


def test_representations_are_unit_norm():
    spec, p = make("multiclass")
    b = random_batch(np.random.default_rng(0), "multiclass")
    for z in encode(spec, p, b.inputs):
        assert np.allclose(np.linalg.norm(z, axis=1), 1.0)
    single = encode(spec, p, [x[0] for x in b.inputs])
    assert single[0].shape == (4,)


def test_zero_representation_passes_through_with_warning():
    with pytest.warns(RuntimeWarning):
        z, norms = l2_normalize(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert np.array_equal(z[0], [0.0, 0.0])
    assert np.allclose(z[1], [0.6, 0.8])


def test_predict_shapes():
    spec, p = make("multilabel", 4)
    b = random_batch(np.random.default_rng(1), "multilabel", n_out=4)
    assert predict(spec, p, b.inputs).shape == (6, 4)
    r, rp = make("retrieval")
    with pytest.raises(ValueError):
        predict(r, rp, b.inputs)


def test_uniform_logits_give_log_k():
    loss, _ = softmax_xent(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(np.log(5), abs=1e-12)


def test_zero_logit_bce_is_log_two_per_label():
    loss, _ = sigmoid_bce(np.zeros((3, 2)), np.array([[1, 0], [0, 0], [1, 1]]))
    assert loss == pytest.approx(2 * np.log(2), abs=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    shift = rng.standard_normal((5, 1)) * 10
    assert softmax_xent(logits, labels)[0] == pytest.approx(softmax_xent(logits + shift, labels)[0], abs=1e-10)


def test_alignment_of_identical_pair_is_log_two():
    # every score equal, so each row is a uniform choice between two candidates
    z = np.array([[1.0, 0.0], [1.0, 0.0]])
    loss, grads = alignment_terms([z, z.copy()], 0.07)
    assert loss == pytest.approx(np.log(2), abs=1e-12)
    assert all(np.isfinite(g).all() for g in grads)


def test_alignment_symmetric_under_modality_permutation():
    rng = np.random.default_rng(3)
    zs = [rng.standard_normal((5, 3)) for _ in range(3)]
    a, ga = alignment_terms(zs, 0.07)
    order = [2, 0, 1]
    b, gb = alignment_terms([zs[i] for i in order], 0.07)
    assert a == pytest.approx(b, abs=1e-12)
    for j, i in enumerate(order):
        assert np.allclose(gb[j], ga[i])


def test_alignment_needs_two_samples():
    spec, p = make("retrieval")
    b = random_batch(np.random.default_rng(0), "retrieval", n=1)
    with pytest.raises(ValueError):
        alignment_loss(spec, p, b)


@pytest.mark.parametrize("task", ["multiclass", "multilabel", "retrieval"])
@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients_match_finite_differences(task, seed):
    rng = np.random.default_rng(seed)
    spec, p = make(task)
    p = p + 0.1 * rng.standard_normal(p.size)
    b = random_batch(rng, task)
    fn = alignment_loss if task == "retrieval" else task_loss
    _, g = fn(spec, p, b)
    fd = finite_diff_grad(lambda q: fn(spec, q, b)[0], p)
    assert relative_error(g, fd) < 1e-5


def test_logit_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    spec, p = make("multiclass", activation="relu")
    b = random_batch(rng, "multiclass", n=3)
    G = rng.standard_normal((3, 3))
    fwd = forward(spec, p, b.inputs)
    g = backward(spec, p, fwd, grad_logits=G)
    fd = finite_diff_grad(lambda q: float(np.sum(forward(spec, q, b.inputs).logits * G)), p)
    assert relative_error(g, fd) < 1e-5


def test_task_loss_rejects_wrong_task():
    spec, p = make("retrieval")
    with pytest.raises(ValueError):
        task_loss(spec, p, random_batch(np.random.default_rng(0), "retrieval"))
    spec, p = make("multiclass")
    with pytest.raises(ValueError):
        alignment_loss(spec, p, random_batch(np.random.default_rng(0), "multiclass"))


def test_single_modality_model_runs():
    spec, p = make("multiclass", dims=(4,))
    b = random_batch(np.random.default_rng(0), "multiclass", dims=(4,))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        loss, g = task_loss(spec, p, b)
    assert np.isfinite(loss) and g.shape == p.shape
