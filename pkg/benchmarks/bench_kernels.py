"""Compare the numba and numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times each kernel on both paths with inputs of desk and full scale, then a
full desk training step (forward + backward) with the dispatcher switched
between the two paths.  Numba compilation happens in a warm-up call that is
not timed.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from hyperpose import _kernels as K
from hyperpose import tensor as T
from hyperpose.config import get_preset
from hyperpose.data import make_overfit_set
from hyperpose.geometry import pose_loss
from hyperpose.training import batch_losses, build_model, prepare_batch


def _best(fn, repeat: int) -> float:
    fn()  # warm-up / JIT
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(rng):
    def conv(n, c, size, k, stride):
        xp = rng.normal(size=(n, c, size + 2, size + 2)).astype(np.float32)
        out = (size + 2 - k) // stride + 1
        cols = rng.normal(size=(n, c, k, k, out, out)).astype(np.float32)
        return (
            (f"im2col {n}x{c}x{size} k{k}s{stride}", lambda impl: impl(xp, k, stride, out, out), "im2col"),
            (f"col2im {n}x{c}x{size} k{k}s{stride}", lambda impl: impl(cols, size + 2, size + 2, stride), "col2im"),
        )

    cases = [*conv(2, 16, 32, 4, 2), *conv(8, 24, 16, 4, 2), *conv(8, 16, 112, 4, 2)]
    centers = rng.uniform(0, 32, (24, 2))
    sigmas = rng.uniform(0.5, 4.0, 24)
    colors = rng.uniform(0, 1, (24, 3))
    cases.append(("splat 24 blobs 32px", lambda impl: impl(centers, sigmas, colors, 32, 3.0), "splat"))
    cases.append(("splat 24 blobs 224px", lambda impl: impl(centers * 7, sigmas * 7, colors, 224, 3.0), "splat"))
    pts = rng.normal(size=(2000, 2))
    cen = rng.normal(size=(4, 2))
    cases.append(("assign 2000x2 K=4", lambda impl: impl(pts, cen), "assign"))
    wide = rng.normal(size=(200, 5000))
    cases.append(("assign 200x5000 K=4", lambda impl: impl(wide, wide[:4].copy()), "assign"))
    return cases


def train_step_time(repeat: int, use_numba: bool) -> float:
    cfg = get_preset("desk")
    samples, _ = make_overfit_set(42, 8, size=cfg.model.input_size)
    model = build_model(cfg)
    images, x, q = prepare_batch(samples, model, None, training=True)
    T.seed_dropout(0)

    def step():
        out = model.forward(images, training=True)
        l_x, l_q = batch_losses(model, out, x, q)
        pose_loss(l_x, l_q, model.loss).backward()

    old = K.USE_NUMBA
    K.USE_NUMBA = use_numba
    try:
        return _best(step, repeat)
    finally:
        K.USE_NUMBA = old


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, call, name in kernel_cases(rng):
        t_np = _best(lambda: call(getattr(K, f"{name}_numpy")), args.repeat)
        t_nb = _best(lambda: call(getattr(K, f"{name}_numba")), args.repeat)
        print(f"{label:32s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}")
    t_np = train_step_time(max(3, args.repeat // 4), use_numba=False)
    t_nb = train_step_time(max(3, args.repeat // 4), use_numba=True)
    print(f"{'desk train step, batch 8':32s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
