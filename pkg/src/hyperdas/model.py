"""HyperDAS: concept encoder -> token-pair scores -> weighted counterfactual
states -> Householder-rotated subspace -> patched target forward."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hyperdas import _kernels as K
from hyperdas.autodiff import ContractError, Tensor, no_grad
from hyperdas.autodiff import tensor as T
from hyperdas.encoder import ConceptEncoder, HyperConfig
from hyperdas.nn import Module
from hyperdas.ravel import RavelExample, Vocab
from hyperdas.selector import (PairScorer, normalize, pair_scores, snap_batch, sparse_loss,
                               weighted_replacements)
from hyperdas.subspace import SubspaceHead, rotated_subspace
from hyperdas.target import TinyDecoder, pad_batch

ABLATIONS = ("none", "no_das", "no_hypernetwork", "no_cross_attention", "mdas_baseline",
             "random_subspace")


@dataclass
class ModelConfig:
    layer: int = 2
    rank: int = 8
    n_blocks: int = 2
    n_heads: int = 4
    score_heads: int = 8
    symmetric: bool = False
    ablation: str = "none"
    trainable_base: bool = True
    use_mask: bool = True
    strict: bool = False

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ContractError(f"unknown ablation mode {self.ablation!r}; expected one of {ABLATIONS}")


@dataclass
class Batch:
    examples: list[RavelExample]
    base_ids: np.ndarray
    base_len: np.ndarray
    cf_ids: np.ndarray
    cf_len: np.ndarray
    instr_ids: np.ndarray
    instr_len: np.ndarray
    labels: np.ndarray
    base_visible: np.ndarray
    cf_valid: np.ndarray
    attr_index: np.ndarray
    base_entity_last: np.ndarray
    cf_entity_last: np.ndarray
    base_states: np.ndarray | None = None
    cf_states: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.examples)


def last_entity_position(vocab: Vocab, tokens) -> int:
    pos = [i for i, t in enumerate(tokens) if vocab.categories.get(t) == "entity"]
    if not pos:
        raise ContractError(f"prompt has no entity token: {tokens}")
    return pos[-1]


def make_batch(examples: list[RavelExample], vocab: Vocab, attributes: list[str],
               target: TinyDecoder | None = None, use_mask: bool = True) -> Batch:
    base_ids, base_len = pad_batch([vocab.encode(e.base) for e in examples], vocab.pad_id)
    cf_ids, cf_len = pad_batch([vocab.encode(e.counterfactual) for e in examples], vocab.pad_id)
    instr_ids, instr_len = pad_batch([vocab.encode(e.instruction) for e in examples], vocab.pad_id)
    n, b = base_ids.shape
    pos = np.arange(b)[None, :]
    limit = np.array([e.base_mask_start if use_mask else len(e.base) for e in examples])
    base_visible = pos < limit[:, None]
    cf_valid = np.arange(cf_ids.shape[1])[None, :] < cf_len[:, None]
    batch = Batch(
        examples=list(examples), base_ids=base_ids, base_len=base_len, cf_ids=cf_ids, cf_len=cf_len,
        instr_ids=instr_ids, instr_len=instr_len,
        labels=np.array([vocab.index[e.label] for e in examples]),
        base_visible=base_visible, cf_valid=cf_valid,
        attr_index=np.array([attributes.index(e.target_attribute) for e in examples]),
        base_entity_last=np.array([last_entity_position(vocab, e.base) for e in examples]),
        cf_entity_last=np.array([last_entity_position(vocab, e.counterfactual) for e in examples]))
    if target is not None:
        batch.base_states = target.trace_batch(base_ids)
        batch.cf_states = target.trace_batch(cf_ids)
    return batch


@dataclass
class Output:
    logits: Tensor
    g_soft: Tensor
    g_used: np.ndarray
    vectors: np.ndarray | None
    sparse: Tensor


class HyperDAS(Module):
    def __init__(self, target: TinyDecoder, attributes: list[str], cfg: ModelConfig, seed: int = 0):
        super().__init__()
        if not 0 <= cfg.layer <= target.n_layers:
            raise ContractError(f"layer {cfg.layer} outside [0, {target.n_layers}]")
        self.target = target
        self.attributes = list(attributes)
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = target.cfg.d_model
        hcfg = HyperConfig(d_model=d, n_blocks=cfg.n_blocks, n_heads=cfg.n_heads,
                           n_target_layers=target.n_layers, max_positions=target.cfg.max_seq_len,
                           cross_attention=cfg.ablation != "no_cross_attention")
        self.encoder = self.child("encoder", ConceptEncoder(hcfg, target.tok_emb,
                                                            seed=int(rng.integers(2**31))))
        if cfg.ablation == "no_hypernetwork":
            self.lookup = self.param("lookup", rng.normal(0, 1.0, (len(attributes), d)))
        self.scorer = self.child("scorer", PairScorer(rng, d, cfg.score_heads))
        rank = d if cfg.ablation == "no_das" else cfg.rank
        self.head = self.child("head", SubspaceHead(rng, d, rank, cfg.trainable_base))
        if cfg.ablation in ("no_das", "random_subspace"):
            self.head.r_base.requires_grad = False
        if cfg.ablation == "no_das":
            self.head.r_base.data = np.eye(d, dtype=self.head.r_base.data.dtype)

    def encode(self, batch: Batch) -> Tensor:
        if self.cfg.ablation == "no_hypernetwork":
            return T.embedding(self.lookup, batch.attr_index)
        return self.encoder(batch.instr_ids, batch.instr_len, batch.base_states, batch.base_visible,
                            batch.cf_states, batch.cf_valid)

    def rotation(self, enc: Tensor) -> tuple[Tensor | None, Tensor | None]:
        if self.cfg.ablation == "no_das":
            return None, None
        n = enc.shape[0]
        if self.cfg.ablation == "random_subspace":
            r = self.head.r_base
            return T.add(T.reshape(r, (1,) + r.shape), Tensor(np.zeros((n,) + r.shape))), None
        v = self.head.vector(enc)
        return rotated_subspace(self.head.r_base, v, strict=self.cfg.strict), v

    def forward(self, batch: Batch, mode: str = "soft", rng: np.random.Generator | None = None,
                evaluate: bool = False) -> Output:
        if batch.base_states is None:
            batch.base_states = self.target.trace_batch(batch.base_ids)
            batch.cf_states = self.target.trace_batch(batch.cf_ids)
        layer = self.cfg.layer
        base_l = Tensor(batch.base_states[:, layer])
        cf_l = Tensor(batch.cf_states[:, layer])
        enc = self.encode(batch)
        raw = pair_scores(self.scorer, enc, base_l, cf_l, batch.base_visible, batch.cf_valid,
                          symmetric=self.cfg.symmetric, rng=rng, evaluate=evaluate)
        g_soft = normalize(raw)
        if mode == "soft":
            g = g_soft
            g_used = g_soft.data
        elif mode == "snapped":
            # The double argmax is invariant under log, and log-probabilities do
            # not saturate to exact ties the way float32 probabilities do.
            flat = np.ascontiguousarray(raw.data.reshape(-1, raw.shape[-1]), dtype=np.float64)
            log_g = K.log_softmax_fwd(flat).reshape(raw.shape)
            g_used = snap_batch(log_g, batch.base_len, batch.cf_len).astype(g_soft.data.dtype)
            g = Tensor(g_used)
        else:
            raise ContractError(f"mode must be soft or snapped, got {mode!r}")
        replacement = weighted_replacements(g, base_l, cf_l)
        rot, v = self.rotation(enc)
        logits = self.target.patched_logits(batch.base_ids, batch.base_len, layer,
                                            batch.base_states[:, layer], replacement, rot)
        return Output(logits, g_soft, g_used, None if v is None else v.data,
                      sparse_loss(g_soft, batch.cf_len))

    def predict(self, batch: Batch, mode: str = "snapped") -> Output:
        with no_grad():
            return self.forward(batch, mode=mode, evaluate=True)

    def reorthonormalize(self) -> None:
        if self.head.r_base.requires_grad:
            self.head.reorthonormalize()

    def snapshot(self) -> dict[str, np.ndarray]:
        return self.state_dict()
