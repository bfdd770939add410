"""Concept encoder: a small decoder transformer over the instruction tokens whose
blocks also cross-attend into every layer of the target's base and
counterfactual residual streams."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hyperdas.autodiff import ContractError, Tensor
from hyperdas.autodiff import tensor as T
from hyperdas.nn import MLP, Attention, LayerNorm, Module, causal_blocked


@dataclass
class HyperConfig:
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    n_target_layers: int = 6
    max_positions: int = 32
    mlp_multiplier: int = 2
    cross_attention: bool = True


def flatten_trace(states: np.ndarray, visible: np.ndarray | None = None):
    """``states[..., L+1, T, d]`` -> slots ``[..., (L+1)*T, d]`` in layer-major order.

    Returns ``(slots, layer_ids, position_ids, slot_visible)``; a position that is
    not visible hides all of its L+1 slots.
    """
    *lead, n_layers, t, d = states.shape
    slots = states.reshape(*lead, n_layers * t, d)
    layer_ids = np.repeat(np.arange(n_layers), t)
    pos_ids = np.tile(np.arange(t), n_layers)
    if visible is None:
        visible = np.ones((*lead, t), dtype=bool)
    slot_visible = np.tile(visible, (1,) * len(lead) + (n_layers,))
    return slots, layer_ids, pos_ids, slot_visible


def _standardise(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return ((x - mu) / (sd + 1e-5)).astype(x.dtype)


class EncoderBlock(Module):
    def __init__(self, rng, cfg: HyperConfig):
        super().__init__()
        d = cfg.d_model
        self.ln_self = self.child("ln_self", LayerNorm(d))
        self.self_attn = self.child("self_attn", Attention(rng, d, cfg.n_heads))
        self.ln_base = self.child("ln_base", LayerNorm(d))
        self.base_attn = self.child("base_attn", Attention(rng, d, cfg.n_heads))
        self.ln_cf = self.child("ln_cf", LayerNorm(d))
        self.cf_attn = self.child("cf_attn", Attention(rng, d, cfg.n_heads))
        self.ln_mlp = self.child("ln_mlp", LayerNorm(d))
        self.mlp = self.child("mlp", MLP(rng, d, d * cfg.mlp_multiplier))


class ConceptEncoder(Module):
    """Produces the concept encoding from (instruction, base trace, cf trace, mask).

    The instruction embedding table is the target model's (frozen) token table;
    it is held by reference, not registered as a parameter here.
    """

    def __init__(self, cfg: HyperConfig, token_table: Tensor, seed: int = 0):
        super().__init__()
        if token_table.shape[1] != cfg.d_model:
            raise ContractError("hypernetwork width must equal the target d_model")
        self.cfg = cfg
        self.token_table = token_table
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.instr_pos = self.param("instr_pos", rng.normal(0, 0.1, (cfg.max_positions, d)))
        self.key_layer = self.param("key_layer", rng.normal(0, 0.5, (cfg.n_target_layers + 1, d)))
        self.key_pos = self.param("key_pos", rng.normal(0, 0.5, (cfg.max_positions, d)))
        self.blocks = [self.child(f"block{i}", EncoderBlock(rng, cfg)) for i in range(cfg.n_blocks)]
        self.ln_out = self.child("ln_out", LayerNorm(d))

    def embed_instruction(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.token_table.shape[0]):
            raise ContractError("unknown instruction token")
        return T.embedding(self.token_table.detach(), ids)

    def _kv(self, states: np.ndarray, visible: np.ndarray):
        slots, layer_ids, pos_ids, slot_vis = flatten_trace(_standardise(states), visible)
        key_add = T.embedding(self.key_layer, layer_ids) + T.embedding(self.key_pos, pos_ids)
        return Tensor(slots), key_add, ~slot_vis

    def __call__(self, instr_ids: np.ndarray, instr_len: np.ndarray,
                 base_states: np.ndarray, base_visible: np.ndarray,
                 cf_states: np.ndarray, cf_visible: np.ndarray,
                 return_weights: bool = False):
        """Batched encode.

        ``instr_ids[n, E]`` (right padded), ``base_states[n, L+1, B, d]``,
        ``base_visible[n, B]``, likewise for the counterfactual. Returns ``[n, d]``.
        """
        n, e = instr_ids.shape
        if base_visible.shape != base_states.shape[:1] + base_states.shape[2:3]:
            raise ContractError("base mask does not match the base trace")
        x = self.embed_instruction(instr_ids) + self.instr_pos[:e]
        self_blocked = causal_blocked(n, e)
        base_kv, base_add, base_blk = self._kv(base_states, base_visible)
        cf_kv, cf_add, cf_blk = self._kv(cf_states, cf_visible)
        base_blk = np.broadcast_to(base_blk[:, None, :], (n, e, base_blk.shape[-1]))
        cf_blk = np.broadcast_to(cf_blk[:, None, :], (n, e, cf_blk.shape[-1]))
        weights = []
        for blk in self.blocks:
            h = blk.ln_self(x)
            x = x + blk.self_attn(h, h, self_blocked)
            if self.cfg.cross_attention:
                out, w = blk.base_attn(blk.ln_base(x), base_kv, base_blk, key_add=base_add,
                                       return_weights=True)
                x = x + out
                weights.append(w)
                x = x + blk.cf_attn(blk.ln_cf(x), cf_kv, cf_blk, key_add=cf_add)
            x = x + blk.mlp(blk.ln_mlp(x))
        x = self.ln_out(x)
        enc = T.getitem(x, (np.arange(n), np.asarray(instr_len) - 1))
        return (enc, weights) if return_weights else enc
