"""Parameter containers and the attention/MLP building blocks shared by the
target transformer and the hypernetwork."""
from __future__ import annotations

import numpy as np

from hyperdas.autodiff import Tensor, parameter
from hyperdas.autodiff import tensor as T

NEG_INF = -1e9


class Module:
    """Minimal parameter tree: named parameters plus named child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, data) -> Tensor:
        p = parameter(np.asarray(data, dtype=T.get_dtype()), name=name)
        self._params[name] = p
        return p

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, c in self._children.items():
            yield from c.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        own = dict(self.named_parameters(prefix))
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0):
    return rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))


class Attention(Module):
    """Multi-head attention; queries and keys/values may come from different sequences."""

    def __init__(self, rng, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ValueError(f"d={d} not divisible by n_heads={n_heads}")
        self.d, self.h = d, n_heads
        self.wq = self.param("wq", init_linear(rng, d, d))
        self.wk = self.param("wk", init_linear(rng, d, d))
        self.wv = self.param("wv", init_linear(rng, d, d))
        self.wo = self.param("wo", init_linear(rng, d, d, gain=0.5))

    def _heads(self, x: Tensor) -> Tensor:
        n, t, _ = x.shape
        return T.transpose(T.reshape(x, (n, t, self.h, self.d // self.h)), (0, 2, 1, 3))

    def __call__(self, q_in: Tensor, kv_in: Tensor, blocked: np.ndarray | None = None,
                 key_add: Tensor | None = None, return_weights: bool = False):
        """``blocked[n, Tq, Tk]`` marks pairs a query may not attend to."""
        n, tq, _ = q_in.shape
        k_in = kv_in if key_add is None else kv_in + key_add
        q = self._heads(q_in @ self.wq)
        k = self._heads(k_in @ self.wk)
        v = self._heads(kv_in @ self.wv)
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(self.d // self.h))
        if blocked is not None:
            blk = np.asarray(blocked, dtype=bool)[:, None, :, :]
            scores = T.masked_fill(scores, blk, NEG_INF)
        w = T.softmax(scores, axis=-1)
        if blocked is not None:
            # a query that sees no key at all reads nothing
            empty = np.asarray(blocked, dtype=bool).all(axis=-1)
            if empty.any():
                w = w * Tensor((~empty)[:, None, :, None].astype(w.data.dtype))
        out = T.reshape(T.transpose(w @ v, (0, 2, 1, 3)), (n, tq, self.d))
        out = out @ self.wo
        return (out, w) if return_weights else out


class MLP(Module):
    def __init__(self, rng, d: int, hidden: int, d_out: int | None = None, out_gain: float = 0.5):
        super().__init__()
        d_out = d if d_out is None else d_out
        self.w1 = self.param("w1", init_linear(rng, d, hidden))
        self.b1 = self.param("b1", np.zeros(hidden))
        self.w2 = self.param("w2", init_linear(rng, hidden, d_out, gain=out_gain))
        self.b2 = self.param("b2", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.g = self.param("g", np.ones(d))
        self.b = self.param("b", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)


def causal_blocked(n: int, t: int) -> np.ndarray:
    tri = np.triu(np.ones((t, t), dtype=bool), k=1)
    return np.broadcast_to(tri, (n, t, t))
