"""Compare the numba and numpy kernel paths.

Part 1 times each kernel pair in-process on the shapes a training step uses
and checks that both paths agree. Part 2 runs a few HyperDAS training steps in
two subprocesses, one with ``HYPERDAS_NUMBA=0`` and one with ``=1``.

    python benchmarks/bench_kernels.py [--repeat 20] [--steps 10]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from hyperdas import _kernels as K

STEP_SCRIPT = r"""
import json, time
import numpy as np
from hyperdas import _kernels as K
from hyperdas.autodiff import Adam
from hyperdas.model import make_batch
from hyperdas.pipeline import WorldConfig, build_world
from hyperdas.target import TinyDecoder
from hyperdas.train import TrainConfig, build_model, train_step

world = build_world(WorldConfig(train_per_cell=64, test_per_cell=8))
target = TinyDecoder(world.target_config(), seed=0)
target.freeze()
model = build_model(target, world.attributes, TrainConfig(layer=3))
opt = Adam(model.trainable(), lr=1e-3)
rng = np.random.default_rng(0)
batch = make_batch(world.train[:32], world.vocab, world.attributes, target)
train_step(model, batch, opt, 0.5, rng)
t = time.perf_counter()
for _ in range({steps}):
    train_step(model, batch, opt, 0.5, rng)
print(json.dumps({{"backend": K.backend(), "seconds_per_step": (time.perf_counter() - t) / {steps}}}))
"""


def kernel_cases(rng):
    x = rng.normal(size=(32 * 24, 256))
    h = rng.normal(size=(32 * 24, 64))
    grid = rng.random((12, 13))
    gain, bias = rng.normal(size=64), rng.normal(size=64)
    y = K.softmax_fwd_np(x)
    _, xhat, rstd = K.layer_norm_fwd_np(h, gain, bias, 1e-5)
    return {
        "softmax_fwd": ((x,), {}),
        "softmax_bwd": ((y, x), {}),
        "log_softmax_fwd": ((x,), {}),
        "layer_norm_fwd": ((h, gain, bias, 1e-5), {}),
        "layer_norm_bwd": ((h, xhat, rstd, gain), {}),
        "rms_norm_fwd": ((h, gain, 1e-5), {}),
        "gelu_fwd": ((x,), {}),
        "gelu_bwd": ((x, y), {}),
        "snap": ((grid,), {}),
    }


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def bench_kernels(repeat: int) -> list[dict]:
    if not K.NUMBA_AVAILABLE:
        print("numba is not installed; only the numpy path can run")
        return []
    rows = []
    for name, (args, kw) in kernel_cases(np.random.default_rng(0)).items():
        f_np, f_nb = getattr(K, name + "_np"), getattr(K, name + "_nb")
        f_nb(*args, **kw)  # compile
        diff = float(np.max(np.abs(_first(f_np(*args, **kw)) - _first(f_nb(*args, **kw)))))
        t_np = min(timeit.repeat(lambda: f_np(*args, **kw), number=5, repeat=repeat)) / 5
        t_nb = min(timeit.repeat(lambda: f_nb(*args, **kw), number=5, repeat=repeat)) / 5
        rows.append({"kernel": name, "numpy_us": t_np * 1e6, "numba_us": t_nb * 1e6,
                     "speedup": t_np / t_nb, "max_abs_diff": diff})
    return rows


def bench_steps(steps: int) -> list[dict]:
    out = []
    for flag in ("0", "1"):
        env = dict(os.environ, HYPERDAS_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(steps=steps)], env=env,
                              capture_output=True, text=True, check=True)
        out.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=10)
    ap.add_argument("--skip-steps", action="store_true", help="only time the kernels")
    args = ap.parse_args()
    print(f"{'kernel':<18}{'numpy us':>12}{'numba us':>12}{'speedup':>10}{'max diff':>12}")
    for r in bench_kernels(args.repeat):
        print(f"{r['kernel']:<18}{r['numpy_us']:>12.1f}{r['numba_us']:>12.1f}{r['speedup']:>10.2f}"
              f"{r['max_abs_diff']:>12.2e}")
    if not args.skip_steps:
        print()
        for r in bench_steps(args.steps):
            print(f"training step, {r['backend']:<6} backend: {r['seconds_per_step'] * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
