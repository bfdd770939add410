"""Tiny pre-norm decoder-only transformer used as the frozen target model.

Residual-stream indexing: layer 0 is the token-embedding lookup, layer i
(1..L) is the output of block i. Learned position embeddings are added to the
residual stream at the input of block 1, so layer 0 holds pure embedding-table
rows and an intervention at layer 0 swaps token content only.
"""
from __future__ import annotations

import configparser
import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from hyperdas.autodiff import ContractError, Tensor, no_grad
from hyperdas.autodiff import tensor as T
from hyperdas.autodiff.optim import Adam
from hyperdas.nn import MLP, Attention, LayerNorm, Module, causal_blocked

log = logging.getLogger(__name__)


@dataclass
class TargetConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    max_seq_len: int = 32
    mlp_multiplier: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.n_layers < 3:
            raise ContractError("n_layers must be >= 3")

    def save(self, path: str | Path) -> None:
        cp = configparser.ConfigParser()
        cp["target"] = {k: str(v) for k, v in asdict(self).items()}
        with open(path, "w") as fh:
            cp.write(fh)

    @classmethod
    def load(cls, path: str | Path) -> "TargetConfig":
        cp = configparser.ConfigParser()
        cp.read(path)
        return cls(**{f.name: int(cp["target"][f.name]) for f in fields(cls) if f.name in cp["target"]})


@dataclass
class TargetTrace:
    """Residual states of one prompt: ``states[layer, position, :]``."""
    states: np.ndarray
    tokens: np.ndarray
    attention_mask: np.ndarray


@dataclass
class PatchPlan:
    """Distributed interchange intervention at ``layer``.

    ``replacement`` holds one vector per base position; ``rotation`` is the
    r x d matrix with orthonormal rows (``None`` means full-rank, i.e. plain
    vector replacement).
    """
    layer: int
    replacement: np.ndarray | Tensor
    rotation: np.ndarray | Tensor | None = None


class Block(Module):
    def __init__(self, rng, cfg: TargetConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = self.child("ln1", LayerNorm(d))
        self.attn = self.child("attn", Attention(rng, d, cfg.n_heads))
        self.ln2 = self.child("ln2", LayerNorm(d))
        self.mlp = self.child("mlp", MLP(rng, d, d * cfg.mlp_multiplier))

    def __call__(self, h: Tensor, blocked: np.ndarray) -> Tensor:
        x = self.ln1(h)
        h = h + self.attn(x, x, blocked)
        return h + self.mlp(self.ln2(h))


class TinyDecoder(Module):
    def __init__(self, cfg: TargetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.tok_emb = self.param("tok_emb", rng.normal(0, 1.0, (cfg.vocab_size, d)))
        self.pos_emb = self.param("pos_emb", rng.normal(0, 0.5, (cfg.max_seq_len, d)))
        self.blocks = [self.child(f"block{i}", Block(rng, cfg)) for i in range(1, cfg.n_layers + 1)]
        self.ln_f = self.child("ln_f", LayerNorm(d))
        self.unembed = self.param("unembed", rng.normal(0, 1.0 / np.sqrt(d), (d, cfg.vocab_size)))

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.shape[-1] > self.cfg.max_seq_len:
            raise ContractError(f"prompt length {ids.shape[-1]} > max_seq_len {self.cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ContractError("unknown token id")

    def embed(self, ids: np.ndarray) -> Tensor:
        self._check_ids(ids)
        return T.embedding(self.tok_emb, ids)

    def run_blocks(self, h: Tensor, start: int, stop: int | None = None,
                   collect: list | None = None) -> Tensor:
        """Advance residual state ``h`` from layer ``start`` to layer ``stop`` (default L)."""
        stop = self.cfg.n_layers if stop is None else stop
        n, t, _ = h.shape
        blocked = causal_blocked(n, t)
        for i in range(start + 1, stop + 1):
            if i == 1:
                h = h + self.pos_emb[:t]
            h = self.blocks[i - 1](h, blocked)
            if collect is not None:
                collect.append(h.data)
        return h

    def readout(self, h: Tensor, lengths: np.ndarray) -> Tensor:
        """Next-token logits at each sequence's last real position."""
        n = h.shape[0]
        last = T.getitem(h, (np.arange(n), np.asarray(lengths) - 1))
        return self.ln_f(last) @ self.unembed

    def logits(self, ids: np.ndarray, lengths: np.ndarray | None = None) -> Tensor:
        ids = np.atleast_2d(ids)
        lengths = np.full(ids.shape[0], ids.shape[1]) if lengths is None else lengths
        return self.readout(self.run_blocks(self.embed(ids), 0), lengths)

    def trace_batch(self, ids: np.ndarray) -> np.ndarray:
        """Residual states ``[n, L+1, T, d]`` without building a graph."""
        ids = np.atleast_2d(ids)
        with no_grad():
            h = self.embed(ids)
            states = [h.data]
            self.run_blocks(h, 0, collect=states)
        return np.stack(states, axis=1)

    def forward_trace(self, prompt) -> TargetTrace:
        ids = np.asarray(prompt, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ContractError("forward_trace expects a non-empty 1-D token sequence")
        states = self.trace_batch(ids[None])[0]
        return TargetTrace(states=states, tokens=ids, attention_mask=np.ones(ids.size, dtype=bool))

    def patched_logits(self, ids: np.ndarray, lengths: np.ndarray, layer: int,
                       base_states: np.ndarray, replacement: Tensor,
                       rotation: Tensor | None) -> Tensor:
        """Batched core of :meth:`forward_with_patch`.

        ``base_states[n, T, d]`` are the unpatched layer-``layer`` states,
        ``replacement[n, T, d]`` the per-position counterfactual vectors and
        ``rotation[n, r, d]`` the per-example subspace (``None`` = full rank).
        """
        if not 0 <= layer <= self.cfg.n_layers:
            raise ContractError(f"layer {layer} outside [0, {self.cfg.n_layers}]")
        if replacement.shape != base_states.shape:
            raise ContractError(f"replacement shape {replacement.shape} != {base_states.shape}")
        base = Tensor(base_states)
        if rotation is None:
            patched = replacement
        else:
            patched = distributed_patch(base, replacement, rotation)
        return self.readout(self.run_blocks(patched, layer), lengths)

    def forward_with_patch(self, prompt, plan: PatchPlan) -> Tensor:
        """Logits for the next token after ``prompt`` with ``plan`` applied."""
        ids = np.asarray(prompt, dtype=np.int64)
        if not 0 <= plan.layer <= self.cfg.n_layers:
            raise ContractError(f"layer {plan.layer} outside [0, {self.cfg.n_layers}]")
        rep = plan.replacement if isinstance(plan.replacement, Tensor) else Tensor(plan.replacement)
        if rep.shape != (ids.size, self.cfg.d_model):
            raise ContractError(f"replacement must be ({ids.size}, {self.cfg.d_model}), got {rep.shape}")
        rot = plan.rotation
        if rot is not None:
            rot = rot if isinstance(rot, Tensor) else Tensor(rot)
            if rot.ndim != 2 or rot.shape[1] != self.cfg.d_model:
                raise ContractError("rotation must be r x d_model")
            rot = T.reshape(rot, (1,) + rot.shape)
        base = self.trace_batch(ids[None])[0, plan.layer]
        out = self.patched_logits(ids[None], np.array([ids.size]), plan.layer, base[None],
                                  T.reshape(rep, (1,) + rep.shape), rot)
        return T.reshape(out, (self.cfg.vocab_size,))

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def distributed_patch(base: Tensor, replacement: Tensor, rotation: Tensor) -> Tensor:
    """``base + R^T (R replacement - R base)`` for batched ``[n, B, d]`` / ``[n, r, d]``."""
    delta = replacement - base
    coords = delta @ T.transpose(rotation, (0, 2, 1))
    return base + coords @ rotation


def pad_batch(seqs, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


class TrainingFailure(RuntimeError):
    """Raised when a training run misses its required accuracy threshold."""

    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


@dataclass
class PretrainReport:
    steps: int
    train_accuracy: float
    test_accuracy: float
    losses: list[float] = field(default_factory=list)
    fact_steps: int = 0
    fact_losses: list[float] = field(default_factory=list)
    frozen_below: int = 0


def accuracy(model: TinyDecoder, prompts, labels, batch: int = 256) -> float:
    correct = 0
    with no_grad():
        for i in range(0, len(prompts), batch):
            ids, lengths = pad_batch(prompts[i:i + batch])
            pred = model.logits(ids, lengths).data.argmax(axis=-1)
            correct += int((pred == np.asarray(labels[i:i + batch])).sum())
    return correct / max(len(prompts), 1)


def _fit(model: TinyDecoder, prompts, labels, steps: int, lr: float, batch_size: int,
         rng: np.random.Generator, exit_layer: int | None = None, on_eval=None,
         eval_every: int = 0) -> tuple[list[float], int]:
    """Adam on next-token CE at each prompt's last position, read out after ``exit_layer``."""
    labels = np.asarray(labels)
    opt = Adam(model.trainable(), lr=lr)
    losses: list[float] = []
    order = rng.permutation(len(prompts))
    cursor = 0
    step = 0
    for step in range(1, steps + 1):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(prompts))
            cursor = 0
        idx = order[cursor:cursor + batch_size]
        cursor += batch_size
        ids, lengths = pad_batch([prompts[i] for i in idx])
        opt.zero_grad()
        if exit_layer is None:
            logits = model.logits(ids, lengths)
        else:
            logits = model.readout(model.run_blocks(model.embed(ids), 0, exit_layer), lengths)
        loss = T.cross_entropy(logits, labels[idx])
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if on_eval is not None and eval_every and step % eval_every == 0:
            if on_eval(step, losses[-eval_every:]):
                break
    return losses, step


def pretrain_target(model: TinyDecoder, train: tuple[list, list], test: tuple[list, list],
                    steps: int = 1500, lr: float = 3e-3, batch_size: int = 64, seed: int = 0,
                    threshold: float = 0.95, eval_every: int = 250, strict: bool = True,
                    facts: tuple[list, list] | None = None, fact_steps: int = 1000,
                    exit_layer: int | None = None) -> PretrainReport:
    """Supervised training on (prompt, answer) pairs; freezes the model after.

    With ``facts`` (statement prefixes ending in an entity, labelled with its
    attribute values) training runs in two stages. Stage one fits the facts
    with the output head applied at ``exit_layer`` (default L // 2), so entity
    attributes become linearly readable at the last entity token by that
    layer. The embeddings and blocks up to ``exit_layer`` are then frozen and
    stage two fits the query prompts, which therefore must read attributes
    from states that already hold them, as in pretrained LMs.

    Stage two stops early once held-out accuracy reaches 1.0. Raises
    :class:`TrainingFailure` when ``strict`` and the threshold is missed.
    """
    rng = np.random.default_rng(seed)
    fact_losses: list[float] = []
    n_fact = 0
    frozen = 0
    if facts is not None:
        frozen = model.n_layers // 2 if exit_layer is None else exit_layer
        if not 1 <= frozen < model.n_layers:
            raise ContractError(f"exit layer {frozen} outside [1, {model.n_layers - 1}]")
        fact_losses, n_fact = _fit(model, *facts, fact_steps, lr, batch_size, rng, exit_layer=frozen)
        log.info("fact stage: %d steps, final loss %.4f", n_fact, np.mean(fact_losses[-50:]))
        model.tok_emb.requires_grad = False
        model.pos_emb.requires_grad = False
        for block in model.blocks[:frozen]:
            block.freeze()

    def check(step, recent):
        acc = accuracy(model, *test)
        log.info("pretrain step %d loss %.4f test acc %.3f", step, np.mean(recent), acc)
        return acc >= 1.0

    losses, step = _fit(model, *train, steps, lr, batch_size, rng, on_eval=check, eval_every=eval_every)
    report = PretrainReport(step, accuracy(model, *train), accuracy(model, *test), losses,
                            n_fact, fact_losses, frozen)
    model.freeze()
    if strict and report.test_accuracy < threshold:
        raise TrainingFailure(
            f"target reached {report.test_accuracy:.3f} held-out accuracy, needs {threshold}",
            asdict(report) | {"losses": report.losses[-10:], "fact_losses": report.fact_losses[-10:]})
    return report
