"""Token-pair intervention scores, weighted counterfactual vectors, the
sparsity penalty and inference-time snapping.

Score grids have shape ``[B, C+1]`` per example; the last column is SELF
("keep the base token's own state").
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from hyperdas import _kernels as K
from hyperdas.autodiff import ContractError, Tensor
from hyperdas.autodiff import tensor as T
from hyperdas.nn import NEG_INF, Module, init_linear


class PairScorer(Module):
    """Merge projection F plus M query/key head maps over the concept encoding."""

    def __init__(self, rng, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ContractError(f"d={d} not divisible by {n_heads} heads")
        self.d, self.m = d, n_heads
        self.f_w = self.param("f_w", init_linear(rng, 2 * d, d))
        self.f_b = self.param("f_b", np.zeros(d))
        self.q = self.param("q", init_linear(rng, d, d))
        self.k = self.param("k", init_linear(rng, d, d))

    def merge(self, base_l: Tensor, cf_l: Tensor, flip: np.ndarray | None = None) -> Tensor:
        """``g[n, B, C, d] = F([h_b; h_c])``; ``flip[n]`` swaps the concatenation order."""
        d = self.d
        top, bot = self.f_w[:d], self.f_w[d:]
        a_base, a_cf = base_l @ top, cf_l @ bot
        if flip is not None and np.any(flip):
            f = np.asarray(flip, dtype=base_l.data.dtype).reshape(-1, 1, 1)
            keep = Tensor(1.0 - f)
            swap = Tensor(f)
            a_base = a_base * keep + (base_l @ bot) * swap
            a_cf = a_cf * keep + (cf_l @ top) * swap
        n, b, _ = base_l.shape
        c = cf_l.shape[1]
        g = T.reshape(a_base, (n, b, 1, d)) + T.reshape(a_cf, (n, 1, c, d))
        return g + self.f_b

    def scores(self, enc: Tensor, base_l: Tensor, cf_l: Tensor,
               flip: np.ndarray | None = None) -> Tensor:
        """Raw grid ``G'[n, B, C+1]`` before masking."""
        n, b, d = base_l.shape
        c = cf_l.shape[1]
        m, dh = self.m, d // self.m
        q = T.reshape(enc @ self.q, (n, 1, 1, m, dh))
        g = self.merge(base_l, cf_l, flip)
        k_cf = T.reshape(g @ self.k, (n, b, c, m, dh))
        k_self = T.reshape(base_l @ self.k, (n, b, 1, m, dh))
        k_all = T.concat([k_cf, k_self], axis=2)
        per_head = T.tsum(k_all * q, axis=-1)
        return T.tsum(per_head, axis=-1) * (1.0 / (m * np.sqrt(d)))


def pair_scores(scorer: PairScorer, enc: Tensor, base_l, cf_l, base_visible: np.ndarray,
                cf_valid: np.ndarray | None = None, symmetric: bool = False,
                rng: np.random.Generator | None = None, evaluate: bool = False) -> Tensor:
    """Masked raw scores. Masked base rows and padded cf columns are forced to a
    large negative value on the counterfactual columns.

    In symmetric mode the concatenation order is flipped at random per example
    (training) or both orders are averaged (``evaluate=True``).
    """
    base_l = base_l if isinstance(base_l, Tensor) else Tensor(base_l)
    cf_l = cf_l if isinstance(cf_l, Tensor) else Tensor(cf_l)
    if base_l.shape[-1] != cf_l.shape[-1] or base_l.shape[0] != cf_l.shape[0]:
        raise ContractError("base and counterfactual states come from different layers/batches")
    n, b, _ = base_l.shape
    c = cf_l.shape[1]
    if not symmetric:
        raw = scorer.scores(enc, base_l, cf_l)
    elif evaluate:
        raw = (scorer.scores(enc, base_l, cf_l, np.zeros(n)) +
               scorer.scores(enc, base_l, cf_l, np.ones(n))) * 0.5
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        raw = scorer.scores(enc, base_l, cf_l, rng.random(n) < 0.5)
    blocked = np.zeros((n, b, c + 1), dtype=bool)
    blocked[:, :, :c] |= ~np.asarray(base_visible, dtype=bool)[:, :, None]
    if cf_valid is not None:
        blocked[:, :, :c] |= ~np.asarray(cf_valid, dtype=bool)[:, None, :]
    return T.masked_fill(raw, blocked, NEG_INF)


def normalize(raw: Tensor) -> Tensor:
    """Softmax over the C+1 entries of each base row."""
    return T.softmax(raw, axis=-1)


def weighted_replacements(g: Tensor, base_l, cf_l) -> Tensor:
    """``h~_b = G[b, SELF] h_b + sum_c G[b, c] h_c`` for batched grids."""
    base_l = base_l if isinstance(base_l, Tensor) else Tensor(base_l)
    cf_l = cf_l if isinstance(cf_l, Tensor) else Tensor(cf_l)
    c = cf_l.shape[1]
    g_cf, g_self = T.split(g, [c, 1], axis=-1)
    return g_cf @ cf_l + g_self * base_l


def sparse_loss(g: Tensor, n_cf: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of ``(1/C) sum_c [colsum_c if colsum_c > 1 else 0]``.

    ``n_cf[n]`` gives each example's true counterfactual length when columns are
    padded; padded columns are expected to carry zero weight.
    """
    if g.ndim == 2:
        g = T.reshape(g, (1,) + g.shape)
    n, _, c1 = g.shape
    c = c1 - 1
    g_cf = g[:, :, :c]
    colsum = T.tsum(g_cf, axis=1)
    over = T.where_gt(colsum, 1.0)
    counts = np.full(n, c) if n_cf is None else np.asarray(n_cf)
    per_example = T.tsum(over, axis=-1) * Tensor(1.0 / counts)
    return T.mean(per_example)


def snap(g: np.ndarray) -> np.ndarray:
    """Discrete one-to-one alignment from a soft ``[B, C+1]`` grid.

    Cell (b, c) becomes 1 when it is both the maximum of row b (SELF included)
    and the maximum of counterfactual column c; rows with no selected cell get
    SELF = 1. Ties go to the lowest index.
    """
    g = np.ascontiguousarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] < 1:
        raise ContractError("snap expects a [B, C+1] grid")
    return K.snap_kernel(g)


def snap_batch(g: np.ndarray, n_base: np.ndarray, n_cf: np.ndarray) -> np.ndarray:
    """Snap each example's real ``[B_i, C_i + 1]`` block; padding stays zero."""
    n, b, c1 = g.shape
    out = np.zeros_like(g)
    for i in range(n):
        bi, ci = int(n_base[i]), int(n_cf[i])
        block = np.concatenate([g[i, :bi, :ci], g[i, :bi, c1 - 1:]], axis=1)
        s = snap(block)
        out[i, :bi, :ci] = s[:, :ci]
        out[i, :bi, c1 - 1] = s[:, ci]
    return out


def export_grid(path: str | Path, base_tokens, cf_tokens, soft: np.ndarray, snapped: np.ndarray) -> None:
    """Write soft and snapped grids side by side as a labelled plain-text table.

    Layout: a header line ``# hdas-grid v1 B=<B> C=<C>``, a column line
    ``base\\tmode\\t<cf tokens...>\\tSELF`` and then, for each base token, one
    ``soft`` row and one ``snapped`` row (values with repr precision).
    """
    b, c1 = soft.shape
    if snapped.shape != soft.shape or len(base_tokens) != b or len(cf_tokens) != c1 - 1:
        raise ContractError("grid shapes and token labels disagree")
    lines = [f"# hdas-grid v1 B={b} C={c1 - 1}",
             "\t".join(["base", "mode", *cf_tokens, "SELF"])]
    for i, tok in enumerate(base_tokens):
        lines.append("\t".join([tok, "soft", *(repr(float(x)) for x in soft[i])]))
        lines.append("\t".join([tok, "snapped", *(repr(float(x)) for x in snapped[i])]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path: str | Path):
    lines = Path(path).read_text().splitlines()
    header = lines[1].split("\t")
    cf_tokens = header[2:-1]
    base, soft, snapped = [], [], []
    for line in lines[2:]:
        parts = line.split("\t")
        vals = [float(x) for x in parts[2:]]
        if parts[1] == "soft":
            base.append(parts[0])
            soft.append(vals)
        else:
            snapped.append(vals)
    return base, cf_tokens, np.array(soft), np.array(snapped)
