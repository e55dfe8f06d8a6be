"""Compare the compiled and numpy kernel backends on realistic sizes.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

Each row times one public operation with every importable backend and
reports the best-of-``repeat`` wall time and the speedup over numpy.
"""

import argparse
import contextlib
import timeit

import numpy as np

from leadinst import kernels
from leadinst import tensor as tc
from leadinst.audio import Waveform, resample
from leadinst.metrics import confusion


@contextlib.contextmanager
def backend(module):
    saved = kernels._impl
    kernels._impl = module
    try:
        yield
    finally:
        kernels._impl = saved


def cases(rng):
    audio = Waveform(rng.normal(size=5 * 44100), 44100)
    T, N, D, H = 250, 6, 64, 4
    q = tc.tensor(rng.normal(size=(T, D)), requires_grad=True)
    k = tc.tensor(rng.normal(size=(N, T, D)), requires_grad=True)
    v = tc.tensor(rng.normal(size=(N, T, D)), requires_grad=True)
    g = rng.normal(size=(T, D))
    ref, pred = rng.integers(0, 9, 250_000), rng.integers(0, 9, 250_000)

    def attn_fwd():
        with tc.no_grad():
            tc.frame_attention(q, k, v, H)

    def attn_fwd_bwd():
        out, _ = tc.frame_attention(q, k, v, H)
        tc.sum_all(tc.mul(out, g)).backward()

    return {
        "resample 5 s 44.1k->24k": lambda: resample(audio, 24000),
        "attention fwd T=250 N=6 D=64": attn_fwd,
        "attention fwd+bwd": attn_fwd_bwd,
        "confusion kernel 250k frames": lambda: kernels.confusion_matrix(ref, pred, 9),
        "confusion via metrics": lambda: confusion(pred, ref, np.arange(9)),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--number", type=int, default=3, help="calls per timing sample")
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    rows = cases(np.random.default_rng(0))
    names = list(backends)
    print(f"{'operation':<32}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")
    for label, fn in rows.items():
        times = {}
        for name in names:
            with backend(backends[name]):
                fn()  # warm-up
                times[name] = min(timeit.repeat(fn, number=args.number, repeat=args.repeat)) / args.number
        speed = f"{times['python'] / times['cython']:.2f}x" if "cython" in times else "n/a"
        print(f"{label:<32}" + "".join(f"{1e3 * times[n]:14.2f}" for n in names) + f"{speed:>10}")


if __name__ == "__main__":
    main()
