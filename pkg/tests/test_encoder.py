import numpy as np
import pytest

from hyperdas.autodiff import ContractError, Tensor, no_grad
from hyperdas.encoder import ConceptEncoder, HyperConfig, flatten_trace


def _encoder(cross=True, seed=0):
    table = Tensor(np.random.default_rng(9).normal(size=(20, 8)))
    cfg = HyperConfig(d_model=8, n_blocks=1, n_heads=2, n_target_layers=3, max_positions=8,
                      cross_attention=cross)
    return ConceptEncoder(cfg, table, seed=seed), table


def _inputs(rng, n=2, b=5, c=4):
    instr = np.array([[3, 4, 0], [5, 6, 7]])[:n]
    instr_len = np.array([2, 3])[:n]
    base = rng.normal(size=(n, 4, b, 8))
    cf = rng.normal(size=(n, 4, c, 8))
    return instr, instr_len, base, np.ones((n, b), bool), cf, np.ones((n, c), bool)


def test_instruction_embedding_uses_the_target_table():
    enc, table = _encoder()
    np.testing.assert_array_equal(enc.embed_instruction([3, 1, 3]).data, table.data[[3, 1, 3]])
    with pytest.raises(ContractError):
        enc.embed_instruction([20])
    assert all(p is not table for p in enc.parameters())


def test_flatten_trace_layout():
    states = np.arange(2 * 3 * 4 * 1).reshape(2, 3, 4, 1).astype(float)
    visible = np.array([[True, True, False, True], [True] * 4])
    slots, layers, pos, vis = flatten_trace(states, visible)
    assert slots.shape == (2, 12, 1)
    np.testing.assert_array_equal(layers, np.repeat([0, 1, 2], 4))
    np.testing.assert_array_equal(pos, np.tile(np.arange(4), 3))
    np.testing.assert_array_equal(slots[0, 5, 0], states[0, 1, 1, 0])
    assert vis[0].sum() == 9 and not vis[0, [2, 6, 10]].any()


def test_masked_positions_do_not_affect_the_encoding():
    enc, _ = _encoder()
    rng = np.random.default_rng(0)
    instr, ilen, base, bvis, cf, cvis = _inputs(rng)
    bvis[:, 3:] = False
    with no_grad():
        a = enc(instr, ilen, base, bvis, cf, cvis).data
        base2 = base.copy()
        base2[:, :, 3:] = rng.normal(size=base2[:, :, 3:].shape) * 10
        b = enc(instr, ilen, base2, bvis, cf, cvis).data
        # states are standardised per vector, so perturb the direction, not the offset
        base2[:, :, 0] += rng.normal(size=base2[:, :, 0].shape)
        c = enc(instr, ilen, base2, bvis, cf, cvis).data
    np.testing.assert_allclose(a, b, atol=1e-6)
    assert not np.allclose(a, c)


def test_output_is_read_at_the_last_instruction_token():
    enc, _ = _encoder()
    rng = np.random.default_rng(1)
    instr, ilen, base, bvis, cf, cvis = _inputs(rng)
    with no_grad():
        full = enc(instr, ilen, base, bvis, cf, cvis).data
        # changing the padding after the instruction leaves the encoding alone
        instr2 = instr.copy()
        instr2[0, 2] = 9
        again = enc(instr2, ilen, base, bvis, cf, cvis).data
    assert full.shape == (2, 8)
    np.testing.assert_allclose(full, again, atol=1e-6)


def test_without_cross_attention_the_trace_is_ignored():
    enc, _ = _encoder(cross=False)
    rng = np.random.default_rng(2)
    instr, ilen, base, bvis, cf, cvis = _inputs(rng)
    with no_grad():
        a = enc(instr, ilen, base, bvis, cf, cvis).data
        b = enc(instr, ilen, base * 0 + 1, bvis, cf * 3, cvis).data
    np.testing.assert_array_equal(a, b)


def test_cross_attention_weights_are_distributions():
    enc, _ = _encoder()
    rng = np.random.default_rng(3)
    instr, ilen, base, bvis, cf, cvis = _inputs(rng)
    bvis[0, 4] = False
    with no_grad():
        _, weights = enc(instr, ilen, base, bvis, cf, cvis, return_weights=True)
    w = np.asarray(getattr(weights[0], "data", weights[0]))
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=1e-5)
    assert np.all(w[0, ..., 4::5] < 1e-6)


def test_shape_contracts():
    table = Tensor(np.zeros((5, 6)))
    with pytest.raises(ContractError):
        ConceptEncoder(HyperConfig(d_model=8), table)
    enc, _ = _encoder()
    instr, ilen, base, bvis, cf, cvis = _inputs(np.random.default_rng(4))
    with pytest.raises(ContractError):
        enc(instr, ilen, base, bvis[:, :3], cf, cvis)
