"""Throughput of the internet checksum backends.

Usage: python benchmarks/bench_checksum.py [--sizes 40,576,1500,65535] [--repeat 5]
"""

import argparse
import random
import timeit

from splicemon import checksum


def bench(fn, buf: bytes, repeat: int) -> float:
    """Best-of-``repeat`` seconds per call."""
    timer = timeit.Timer(lambda: fn(buf))
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="40,576,1500,65535", help="comma-separated buffer sizes in bytes")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    sizes = [int(s) for s in args.sizes.split(",")]
    backends = checksum.backends()
    rng = random.Random(0)
    print(f"selected backend at import: {checksum.BACKEND}")
    print(f"{'bytes':>6}  " + "  ".join(f"{n + ' us/call':>18}" for n in sorted(backends)) + "  speedup")
    for size in sizes:
        buf = rng.randbytes(size)
        want = {m.internet_checksum(buf) for m in backends.values()}
        assert len(want) == 1, "backends disagree"
        t = {n: bench(m.internet_checksum, buf, args.repeat) for n, m in backends.items()}
        cols = "  ".join(f"{t[n] * 1e6:>18.3f}" for n in sorted(t))
        speed = f"{t['python'] / t['cython']:.1f}x" if {"python", "cython"} <= t.keys() else "-"
        print(f"{size:>6}  {cols}  {speed:>7}")


if __name__ == "__main__":
    main()
