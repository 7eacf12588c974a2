"""Compare the compiled and pure-Python kernel backends.

Run: python benchmarks/bench_kernels.py [--repeat N]
Prints per-kernel timings with a bitwise parity check, then times one
full segnet forward/backward pass and one mdal video adaptation per backend.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from mdal import _pykernels, kernels, online, segnet, synthvid
from mdal import autodiff as ad
from mdal.checkpoint import MetaLearnerState
from mdal.losses import seg_loss


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()
    if "cython" not in kernels.available():
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    from mdal import _ckernels

    rng = np.random.default_rng(0)
    n = args.size
    x = rng.standard_normal((16, n, n))
    cols = rng.standard_normal((16 * 9, n * n))
    mask = rng.random((n, n)) < 0.05
    cases = {
        "im2col3 16ch": (lambda m: m.im2col3(x)),
        "col2im3 16ch": (lambda m: m.col2im3(cols, 16, n, n)),
        "edt_sq": (lambda m: m.edt_sq(mask)),
    }
    print(f"{'kernel':<16}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  parity")
    for name, call in cases.items():
        tp = best_of(lambda: call(_pykernels), args.repeat)
        tc = best_of(lambda: call(_ckernels), args.repeat)
        same = np.array_equal(call(_pykernels), call(_ckernels))
        print(f"{name:<16}{tp * 1e3:>12.3f}{tc * 1e3:>12.3f}{tp / tc:>10.1f}  {'bitwise' if same else 'MISMATCH'}")

    theta = segnet.init_params(segnet.DEFAULT_ARCH, 0)
    video = synthvid.render_sequence(synthvid.REFERENCE_SPECS["tgtB"], 2000)
    frame, y = video.frames[0], video.masks[0]
    state = MetaLearnerState.fresh(theta, 1e-3, {})
    cfg = online.AdaptConfig(K=5, strategy="mdal")
    print()
    print(f"{'end to end':<28}{'python s':>10}{'cython s':>10}")
    row = {}
    for backend in ("python", "cython"):
        kernels.use_backend(backend)
        fb = best_of(lambda: ad.value_and_gradient(lambda p: seg_loss(segnet.forward(p, frame), y), theta),
                     max(3, args.repeat // 4))
        t0 = time.perf_counter()
        online.adapt_video(state, video, cfg)
        row[backend] = (fb, time.perf_counter() - t0)
    print(f"{'forward+backward 64x64':<28}{row['python'][0]:>10.4f}{row['cython'][0]:>10.4f}")
    print(f"{'mdal adapt, T=40 video':<28}{row['python'][1]:>10.3f}{row['cython'][1]:>10.3f}")


if __name__ == "__main__":
    main()
