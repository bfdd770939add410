"""Plain DAS at a hand-picked token position, and its multi-task (per-attribute) form."""
from __future__ import annotations

import numpy as np

from hyperdas.autodiff import ContractError, Tensor, no_grad
from hyperdas.autodiff import tensor as T
from hyperdas.model import Batch, ModelConfig, Output
from hyperdas.nn import Module
from hyperdas.selector import sparse_loss, weighted_replacements
from hyperdas.subspace import orthonormalize_rows, random_orthonormal_rows
from hyperdas.target import TinyDecoder


def fixed_alignment(batch: Batch) -> np.ndarray:
    """One-hot grid aligning the base's last entity token with the counterfactual's."""
    n, b = batch.base_ids.shape
    c = batch.cf_ids.shape[1]
    g = np.zeros((n, b, c + 1))
    g[:, :, c] = 1.0
    rows = np.arange(n)
    g[rows, batch.base_entity_last, c] = 0.0
    g[rows, batch.base_entity_last, batch.cf_entity_last] = 1.0
    return g


def das_loss_reference(target: TinyDecoder, rotation: Tensor, base_ids, cf_ids, label: int,
                       layer: int, base_pos: int, cf_pos: int) -> Tensor:
    """Cross-entropy of the target after swapping the ``rotation`` subspace of the
    base state at ``base_pos`` for the counterfactual's state at ``cf_pos``.

    A zero-row rotation leaves the forward untouched.
    """
    base_ids = np.asarray(base_ids)[None]
    cf_ids = np.asarray(cf_ids)[None]
    if rotation.ndim != 2 or rotation.shape[1] != target.cfg.d_model:
        raise ContractError("rotation must be r x d_model")
    base_l = target.trace_batch(base_ids)[:, layer]
    cf_l = target.trace_batch(cf_ids)[:, layer]
    rep = base_l.copy()
    rep[0, base_pos] = cf_l[0, cf_pos]
    logits = target.patched_logits(base_ids, np.array([base_ids.shape[1]]), layer, base_l,
                                   Tensor(rep), T.reshape(rotation, (1,) + rotation.shape))
    return T.cross_entropy(logits, [label])


class MultiTaskDAS(Module):
    """One learned subspace per attribute, all applied at the fixed entity alignment."""

    def __init__(self, target: TinyDecoder, attributes: list[str], cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.target = target
        self.attributes = list(attributes)
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = target.cfg.d_model
        self.rotations = self.param(
            "rotations", np.stack([random_orthonormal_rows(rng, cfg.rank, d) for _ in attributes]))

    def reorthonormalize(self) -> None:
        self.rotations.data = np.stack([orthonormalize_rows(r) for r in self.rotations.data])

    def forward(self, batch: Batch, mode: str = "soft", rng=None, evaluate: bool = False) -> Output:
        if batch.base_states is None:
            batch.base_states = self.target.trace_batch(batch.base_ids)
            batch.cf_states = self.target.trace_batch(batch.cf_ids)
        layer = self.cfg.layer
        base_l = Tensor(batch.base_states[:, layer])
        cf_l = Tensor(batch.cf_states[:, layer])
        g = fixed_alignment(batch).astype(base_l.data.dtype)
        gt = Tensor(g)
        rot = T.getitem(self.rotations, batch.attr_index)
        replacement = weighted_replacements(gt, base_l, cf_l)
        logits = self.target.patched_logits(batch.base_ids, batch.base_len, layer,
                                            batch.base_states[:, layer], replacement, rot)
        return Output(logits, gt, g, None, sparse_loss(gt, batch.cf_len))

    def predict(self, batch: Batch, mode: str = "snapped") -> Output:
        with no_grad():
            return self.forward(batch, mode=mode, evaluate=True)
