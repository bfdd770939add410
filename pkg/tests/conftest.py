from __future__ import annotations

import numpy as np
import pytest

from hyperdas.autodiff import Tensor, precision


def numeric_grad(fn, arrays, index, eps=1e-3):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]`` (float64)."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = fn(*base)
        x[i] = old - eps
        down = fn(*base)
        x[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    """``|a - n| / max(|a|, |n|)`` in the 2-norm; 0 when both vanish."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale < 1e-12 else float(np.linalg.norm(a - n) / scale)


def gradient_errors(build, arrays, wrt=None, eps=1e-3, seed_grad=None):
    """Compare autodiff gradients of ``sum(build(*tensors) * w)`` with central differences.

    ``w`` is a fixed random weighting so every output element matters. Returns
    one relative error per checked input.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    with precision(np.float64):
        probe = build(*[Tensor(a) for a in arrays])
        rng = np.random.default_rng(123)
        w = rng.normal(size=probe.shape) if seed_grad is None else seed_grad

        def scalar(*xs):
            out = build(*[Tensor(x) for x in xs])
            return float((out.data * w).sum())

        tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = build(*tensors)
        out.backward(w)
        errs = []
        for i in wrt:
            errs.append(relative_error(tensors[i].grad, numeric_grad(scalar, arrays, i, eps)))
    return errs


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_world():
    """A deliberately tiny world and a briefly trained target for wiring tests."""
    from hyperdas.pipeline import WorldConfig, build_world, pretrained_target
    from hyperdas.ravel import DomainSpec

    cfg = WorldConfig(seed=0, domains=[DomainSpec("city", n_entities=8)], n_train_templates=4,
                      n_test_templates=2, train_per_cell=16, test_per_cell=4, d_model=16, n_layers=3,
                      n_heads=2, pretrain_steps=100, fact_steps=100, exit_layer=2)
    world = build_world(cfg)
    target, _ = pretrained_target(world, strict=False)
    return world, target


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
