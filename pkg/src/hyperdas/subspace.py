"""Householder-rotated intervention subspace and the distributed interchange patch."""
from __future__ import annotations

import logging

import numpy as np

from hyperdas.autodiff import ContractError, Tensor
from hyperdas.autodiff import tensor as T
from hyperdas.nn import MLP, Module
from hyperdas.target import distributed_patch as _batched_patch

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-6


class DegenerateVectorError(ContractError):
    pass


def random_orthonormal_rows(rng: np.random.Generator, r: int, d: int) -> np.ndarray:
    """First ``r`` rows of a random orthogonal matrix (QR of a Gaussian draw)."""
    q, rr = np.linalg.qr(rng.normal(size=(d, d)))
    q = q * np.sign(np.diag(rr))
    return q.T[:r].copy()


def orthonormalize_rows(m: np.ndarray) -> np.ndarray:
    """Nearest-in-spirit orthonormal rows via QR, with signs kept aligned to ``m``."""
    q, rr = np.linalg.qr(m.T.astype(np.float64))
    signs = np.sign(np.diag(rr))
    signs[signs == 0] = 1.0
    return (q * signs).T.astype(m.dtype)


class Householder:
    """Implicit reflection ``H = I - 2 v v^T / v^T v``; never materialises d x d."""

    def __init__(self, v, strict: bool = True):
        self.v = v if isinstance(v, Tensor) else Tensor(v)
        norm = float(np.linalg.norm(self.v.data))
        self.degenerate = norm <= DEGENERATE_EPS
        if self.degenerate and strict:
            raise DegenerateVectorError(f"Householder vector norm {norm:.2e} <= {DEGENERATE_EPS}")

    def apply(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return T.householder_apply(x, self.v, DEGENERATE_EPS)


def householder(v, strict: bool = True) -> Householder:
    return Householder(v, strict)


def rotated_subspace(r_base: Tensor, v: Tensor, strict: bool = False) -> Tensor:
    """``R = R' H`` as rows: row i of R is ``H r'_i`` (H is symmetric).

    ``r_base`` is ``[r, d]``; ``v`` is ``[d]`` or ``[n, d]`` giving ``[r, d]`` or
    ``[n, r, d]``. Degenerate vectors give ``H = I`` unless ``strict``.
    """
    r_base = r_base if isinstance(r_base, Tensor) else Tensor(r_base)
    v = v if isinstance(v, Tensor) else Tensor(v)
    norms = np.linalg.norm(v.data, axis=-1)
    if np.any(norms <= DEGENERATE_EPS):
        if strict:
            raise DegenerateVectorError("degenerate Householder vector")
        log.warning("%d degenerate Householder vector(s); using identity reflection",
                    int(np.sum(norms <= DEGENERATE_EPS)))
    if v.ndim == 1:
        return T.householder_apply(r_base, v, DEGENERATE_EPS)
    n, d = v.shape
    return T.householder_apply(T.reshape(r_base, (1,) + r_base.shape),
                               T.reshape(v, (n, 1, d)), DEGENERATE_EPS)


def distributed_patch(base, replacement, rotation) -> Tensor:
    """``base + R^T (R replacement - R base)`` for single vectors or batches.

    Accepts ``[d]`` vectors with an ``[r, d]`` rotation, or batched
    ``[n, B, d]`` states with ``[n, r, d]`` rotations.
    """
    base = base if isinstance(base, Tensor) else Tensor(base)
    replacement = replacement if isinstance(replacement, Tensor) else Tensor(replacement)
    rotation = rotation if isinstance(rotation, Tensor) else Tensor(rotation)
    if base.ndim == 1:
        d = base.shape[0]
        if rotation.ndim != 2 or rotation.shape[1] != d:
            raise ContractError("rotation must be r x d")
        out = _batched_patch(T.reshape(base, (1, 1, d)), T.reshape(replacement, (1, 1, d)),
                             T.reshape(rotation, (1,) + rotation.shape))
        return T.reshape(out, (d,))
    return _batched_patch(base, replacement, rotation)


def orthogonality_error(r: np.ndarray) -> float:
    """``max |R R^T - I|`` (batched over leading axes)."""
    gram = r @ np.swapaxes(r, -1, -2)
    return float(np.abs(gram - np.eye(r.shape[-2])).max())


class SubspaceHead(Module):
    """The fixed-rank base subspace R' and the MLP producing Householder vectors."""

    def __init__(self, rng, d: int, rank: int, trainable_base: bool = True):
        super().__init__()
        if not 0 <= rank <= d:
            raise ContractError(f"rank {rank} outside [0, {d}]")
        self.rank = rank
        self.r_base = self.param("r_base", random_orthonormal_rows(rng, rank, d))
        self.r_base.requires_grad = trainable_base and rank > 0
        self.mlp = self.child("mlp", MLP(rng, d, d, out_gain=1.0))

    def vector(self, enc: Tensor) -> Tensor:
        return self.mlp(enc)

    def reorthonormalize(self) -> None:
        if self.rank:
            self.r_base.data = orthonormalize_rows(self.r_base.data)
