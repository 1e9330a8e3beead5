"""Time the compiled and numpy loss/gradient kernels on the same batches.

    python3 benchmarks/bench_kernel.py [--repeat 20] [--sizes 64 256 2048]
"""
import argparse
import timeit

import numpy as np

from sparsemod import kernel
from sparsemod.model import HyperParams, init_params
from sparsemod.task import sample_dataset


def bench(backend, params, ds, repeat):
    fn = lambda: kernel.loss_and_grad(params, ds.inputs, ds.targets, backend=backend)  # noqa: E731
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 2048])
    ap.add_argument("--d", type=int, default=2)
    ap.add_argument("--h", type=int, default=32)
    args = ap.parse_args(argv)

    hyper = HyperParams(d=args.d, h=args.h)
    params = init_params(hyper, 0)
    backends = [b for b in ("compiled", "python") if b in kernel.BACKENDS]
    print(f"available backends: {', '.join(backends)} (default {kernel.BACKEND})")
    print(f"{'batch':>6} " + " ".join(f"{b + ' ms':>12}" for b in backends) + "  speedup")
    for n in args.sizes:
        ds = sample_dataset(n, hyper.spec, 0)
        times = {b: bench(b, params, ds, args.repeat) for b in backends}
        ref = kernel.loss_and_grad(params, ds.inputs, ds.targets, backend=backends[-1])
        for b in backends[:-1]:
            out = kernel.loss_and_grad(params, ds.inputs, ds.targets, backend=b)
            diff = max(float(np.max(np.abs(x - y))) for x, y in zip(out[3], ref[3]))
            assert diff < 1e-9, f"{b} disagrees with the python kernel by {diff:g}"
        speed = times["python"] / times["compiled"] if len(backends) == 2 else float("nan")
        print(f"{n:>6} " + " ".join(f"{1e3 * times[b]:>12.3f}" for b in backends) + f"  {speed:6.2f}x")


if __name__ == "__main__":
    main()
