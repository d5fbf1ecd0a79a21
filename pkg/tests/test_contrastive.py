import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfedsim.contrastive import cream_inter_loss, cream_intra_loss, mmoon_loss
from mmfedsim.tensor_ops import finite_diff_grad, relative_error


def unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def flat_fd(fn, zs):
    shape = zs[0].shape
    size = zs[0].size
    flat = np.concatenate([z.ravel() for z in zs])

    def f(v):
        return fn([v[i * size:(i + 1) * size].reshape(shape) for i in range(len(zs))])[0]

    return finite_diff_grad(f, flat)


@pytest.mark.parametrize("M", [1, 2, 3, 4])
def test_mmoon_equal_anchors_is_m_log_two(M):
    rng = np.random.default_rng(M)
    z = [unit(rng.standard_normal((7, 5))) for _ in range(M)]
    g = [unit(rng.standard_normal((7, 5))) for _ in range(M)]
    loss, _ = mmoon_loss(z, g, [x.copy() for x in g], 0.5)
    assert abs(loss - M * np.log(2)) <= 1e-12


def test_mmoon_closed_form():
    e = np.array([1.0, 0.0])
    loss, _ = mmoon_loss([e], [e], [-e], 0.5)
    assert loss == pytest.approx(np.log1p(np.exp(-4.0)), abs=1e-12)
    assert loss == pytest.approx(0.01815, abs=1e-5)


def test_intra_closed_form():
    e = np.array([1.0, 0.0, 0.0])
    loss, _ = cream_intra_loss([e, e], [e, e], [-e, -e])
    assert loss == pytest.approx(2 * np.log1p(np.exp(-2.0)), abs=1e-12)
    assert loss == pytest.approx(0.25386, abs=1e-5)


def test_inter_equal_representations_is_zero():
    e = np.array([0.6, 0.8])
    z = [np.stack([e, e]), np.stack([e, e])]
    bank = [np.stack([e, e]), np.stack([e, e])]
    loss, _ = cream_inter_loss(z, [0, 1], bank)
    assert loss == pytest.approx(0.0, abs=1e-12)
    # with the positive in the denominator each pair costs ln 2
    loss_inc, _ = cream_inter_loss(z, [0, 1], bank, denominator="include_positive")
    assert loss_inc == pytest.approx(2 * np.log(2), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    M, B, P = 3, 4, 5
    zl = [rng.standard_normal((B, P)) for _ in range(M)]
    zg = [unit(rng.standard_normal((B, P))) for _ in range(M)]
    zp = [unit(rng.standard_normal((B, P))) for _ in range(M)]
    bank = [unit(rng.standard_normal((6, P))) for _ in range(M)]
    rows = rng.choice(6, B, replace=False)
    for fn in (
        lambda z: mmoon_loss(z, zg, zp, 0.5),
        lambda z: cream_intra_loss(z, zg, zp),
        lambda z: cream_inter_loss(z, rows, bank),
        lambda z: cream_inter_loss(z, rows, bank, "include_positive"),
    ):
        g = np.concatenate([x.ravel() for x in fn(zl)[1]])
        assert relative_error(g, flat_fd(fn, zl)) < 1e-5


def test_mmoon_decreases_as_local_moves_to_global():
    g = np.array([[1.0, 0.0]])
    p = np.array([[0.0, 1.0]])
    losses = []
    for t in np.linspace(0.0, 1.0, 6):
        z = (1 - t) * p + t * g
        losses.append(mmoon_loss([z], [g], [p], 0.5)[0])
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_vector_inputs_give_vector_gradients():
    rng = np.random.default_rng(0)
    z = [unit(rng.standard_normal(3)) for _ in range(2)]
    loss, grads = mmoon_loss(z, z, [-x for x in z], 0.5)
    assert grads[0].shape == (3,)
    _, grads = cream_intra_loss(z, z, z)
    assert grads[1].shape == (3,)


def test_zero_representation_is_handled():
    z = np.zeros((1, 3))
    g = np.array([[1.0, 0.0, 0.0]])
    loss, grads = mmoon_loss([z], [g], [g], 0.5)
    assert loss == pytest.approx(np.log(2))
    assert np.array_equal(grads[0], np.zeros((1, 3)))


def test_bad_arguments():
    z = [np.ones((2, 2))]
    with pytest.raises(ValueError):
        mmoon_loss(z, z, z, 0.0)
    with pytest.raises(ValueError):
        mmoon_loss(z, z + z, z, 0.5)
    with pytest.raises(ValueError):
        cream_inter_loss(z, [0, 1], [np.ones((1, 2))])
    with pytest.raises(ValueError):
        cream_inter_loss(z, [0, 1], z, denominator="other")


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 4), st.integers(0, 10_000))
def test_modality_permutation_equivariance(M, seed):
    rng = np.random.default_rng(seed)
    zl = [rng.standard_normal((3, 4)) for _ in range(M)]
    zg = [unit(rng.standard_normal((3, 4))) for _ in range(M)]
    zp = [unit(rng.standard_normal((3, 4))) for _ in range(M)]
    bank = [unit(rng.standard_normal((5, 4))) for _ in range(M)]
    rows = [0, 2, 4]
    perm = rng.permutation(M)
    pick = lambda xs: [xs[i] for i in perm]
    for fn in (
        lambda a, b, c, d: mmoon_loss(a, b, c, 0.5),
        lambda a, b, c, d: cream_intra_loss(a, b, c),
        lambda a, b, c, d: cream_inter_loss(a, rows, d),
    ):
        l1, g1 = fn(zl, zg, zp, bank)
        l2, g2 = fn(pick(zl), pick(zg), pick(zp), pick(bank))
        assert l1 == pytest.approx(l2, abs=1e-12)
        for j, i in enumerate(perm):
            assert np.allclose(g2[j], g1[i], atol=1e-12)
