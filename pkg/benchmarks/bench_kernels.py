"""Compare the compiled and numpy kernel backends.

Times the fused distance-softmax kernel alone and one full contrastive
forward+backward at several batch sizes, and checks the backends agree.

    python benchmarks/bench_kernels.py --sizes 512 2048 --repeat 5
"""

import argparse
import time

import numpy as np

from divil import autograd as ag
from divil import kernels, losses


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernel(backend, a, pos, repeat):
    sq = np.einsum("ij,ij->i", a, a)
    gram = a @ a.T

    def run():
        buf = gram.copy()
        backend.distance_softmax_inplace(buf, sq, pos, -1.0)

    return _best(run, repeat)


def bench_ucl(backend_name, a, b, repeat):
    saved = kernels.distance_softmax_inplace
    kernels.distance_softmax_inplace = kernels.get_backend(backend_name).distance_softmax_inplace
    try:
        def run():
            out, tape = ag.record_forward(lambda z, zp: ag.mean(losses._contrastive_rows(z, zp, -1.0)),
                                          {"z": a, "zp": b})
            ag.backward(tape)
            tape.release()

        return _best(run, repeat)
    finally:
        kernels.distance_softmax_inplace = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[256, 1024, 2048, 4096])
    ap.add_argument("--dim", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    names = sorted(kernels.BACKENDS)
    print(f"backends available: {', '.join(names)} (default: {kernels.BACKEND})")
    print(f"{'n':>6} {'backend':>8} {'kernel ms':>10} {'ucl fwd+bwd ms':>15} {'max |diff|':>11}")
    rng = np.random.default_rng(0)
    for n in args.sizes:
        a = rng.normal(size=(n, args.dim))
        b = a + 0.1 * rng.normal(size=(n, args.dim))
        diff = a - b
        pos = np.einsum("ij,ij->i", diff, diff)
        ref = None
        for name in names:
            mod = kernels.get_backend(name)
            buf = a @ a.T
            lse = mod.distance_softmax_inplace(buf, np.einsum("ij,ij->i", a, a), pos, -1.0)
            gap = 0.0 if ref is None else float(max(np.abs(lse - ref[0]).max(), np.abs(buf - ref[1]).max()))
            ref = ref or (lse, buf)
            k = bench_kernel(mod, a, pos, args.repeat)
            u = bench_ucl(name, a, b, args.repeat)
            print(f"{n:>6} {name:>8} {1e3 * k:>10.2f} {1e3 * u:>15.2f} {gap:>11.2e}")


if __name__ == "__main__":
    main()
