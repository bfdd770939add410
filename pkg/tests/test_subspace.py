import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import gradient_errors
from hyperdas.autodiff import Tensor, precision
from hyperdas.autodiff import tensor as T
from hyperdas.baselines import das_loss_reference
from hyperdas.subspace import (DegenerateVectorError, SubspaceHead, distributed_patch, householder,
                               orthogonality_error, orthonormalize_rows, random_orthonormal_rows,
                               rotated_subspace)
from hyperdas.target import TargetConfig, TinyDecoder

vectors = arrays(np.float64, 6, elements=st.floats(-3, 3)).filter(lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=60, deadline=None)
@given(vectors, arrays(np.float64, (4, 6), elements=st.floats(-3, 3)))
def test_householder_is_an_involution_and_an_isometry(v, x):
    with precision(np.float64):
        h = householder(v)
        once = h.apply(x).data
        np.testing.assert_allclose(h.apply(once).data, x, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(once, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-9, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(vectors, st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_rotated_subspace_stays_orthonormal(v, seed, r):
    base = random_orthonormal_rows(np.random.default_rng(seed), r, 6).astype(np.float32)
    rot = rotated_subspace(Tensor(base), Tensor(v.astype(np.float32))).data
    assert orthogonality_error(rot) <= 1e-5


def test_reflection_of_v_and_of_its_complement():
    v = np.array([1.0, 2.0, 0.0, -1.0])
    with precision(np.float64):
        np.testing.assert_allclose(householder(v).apply(v).data, -v)
        base = np.array([[0.0, 0.0, 1.0, 0.0], [2.0, -1.0, 0.0, 0.0]]) / [[1.0], [np.sqrt(5)]]
        np.testing.assert_allclose(rotated_subspace(Tensor(base), Tensor(v)).data, base, atol=1e-12)
        # a row parallel to v only changes sign
        par = (v / np.linalg.norm(v))[None]
        np.testing.assert_allclose(rotated_subspace(Tensor(par), Tensor(v)).data, -par, atol=1e-12)


def test_degenerate_vector():
    with pytest.raises(DegenerateVectorError):
        householder(np.zeros(4))
    base = np.eye(4)[:2]
    np.testing.assert_array_equal(rotated_subspace(Tensor(base), Tensor(np.zeros(4))).data, base)
    with pytest.raises(DegenerateVectorError):
        rotated_subspace(Tensor(base), Tensor(np.zeros((3, 4))), strict=True)


def test_batched_vectors_give_batched_rotations():
    rng = np.random.default_rng(0)
    base = random_orthonormal_rows(rng, 3, 5)
    vs = rng.normal(size=(4, 5))
    with precision(np.float64):
        batched = rotated_subspace(Tensor(base), Tensor(vs)).data
        for i in range(4):
            np.testing.assert_allclose(batched[i], rotated_subspace(Tensor(base), Tensor(vs[i])).data)


def test_orthonormalize_rows_keeps_span_and_sign():
    rng = np.random.default_rng(1)
    r = random_orthonormal_rows(rng, 3, 7)
    noisy = r + 1e-3 * rng.normal(size=r.shape)
    fixed = orthonormalize_rows(noisy)
    assert orthogonality_error(fixed) < 1e-12
    assert np.all(np.sum(fixed * r, axis=1) > 0.99)


def test_subspace_head_shapes_and_rank_zero():
    head = SubspaceHead(np.random.default_rng(0), d=8, rank=3)
    assert head.r_base.shape == (3, 8) and head.r_base.requires_grad
    assert head.vector(Tensor(np.ones((2, 8)))).shape == (2, 8)
    assert not SubspaceHead(np.random.default_rng(0), d=8, rank=0).r_base.requires_grad


# --- the patch itself -------------------------------------------------------

def _rot(seed, r, d=6):
    return random_orthonormal_rows(np.random.default_rng(seed), r, d)


@pytest.mark.parametrize("r", [1, 3, 5])
def test_patch_is_projector_decomposition(r):
    rng = np.random.default_rng(r)
    base, rep = rng.normal(size=6), rng.normal(size=6)
    rot = _rot(r, r)
    p = rot.T @ rot
    with precision(np.float64):
        out = distributed_patch(base, rep, rot).data
    np.testing.assert_allclose(out, (np.eye(6) - p) @ base + p @ rep, atol=1e-12)
    np.testing.assert_allclose(rot @ out, rot @ rep, atol=1e-12)


def test_patch_idempotent_and_full_rank():
    rng = np.random.default_rng(5)
    base, rep = rng.normal(size=6), rng.normal(size=6)
    rot = _rot(2, 3)
    with precision(np.float64):
        once = distributed_patch(base, rep, rot).data
        np.testing.assert_allclose(distributed_patch(once, rep, rot).data, once, atol=1e-12)
        np.testing.assert_allclose(distributed_patch(base, rep, _rot(3, 6)).data, rep, atol=1e-12)
        np.testing.assert_array_equal(distributed_patch(base, base, rot).data, base)


# --- DAS objective on a tiny target ----------------------------------------

@pytest.fixture(scope="module")
def tiny():
    with precision(np.float64):
        return TinyDecoder(TargetConfig(vocab_size=12, d_model=8, n_layers=3, n_heads=2, max_seq_len=4), seed=3)


def test_das_reference_zero_and_full_rank(tiny):
    base, cf = [1, 4, 5], [1, 7, 2]
    with precision(np.float64):
        plain = T.cross_entropy(tiny.logits(np.array([base])), [3]).item()
        zero = das_loss_reference(tiny, Tensor(np.zeros((0, 8))), base, cf, 3, layer=3, base_pos=2, cf_pos=2)
        assert zero.item() == pytest.approx(plain, rel=1e-12)
        # full rank at the last position is a full swap of the readout state
        full = das_loss_reference(tiny, Tensor(np.eye(8)), base, cf, 3, layer=3, base_pos=2, cf_pos=2)
        assert full.item() == pytest.approx(T.cross_entropy(tiny.logits(np.array([cf])), [3]).item(), rel=1e-9)


def test_das_reference_gradient_wrt_rotation(tiny):
    rng = np.random.default_rng(0)
    for _ in range(5):
        rot = random_orthonormal_rows(rng, 2, 8)

        def loss(r):
            return das_loss_reference(tiny, r, [1, 4, 5, 6], [1, 7, 2, 9], 3, layer=0, base_pos=1, cf_pos=1)

        (err,) = gradient_errors(loss, [rot], eps=1e-5)
        assert err <= 1e-4
