"""Compare the compiled kernel core against the pure-numpy fallback.

Usage: python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from nsnkv import kernels
from nsnkv.core import make_rng


def best_of(fn, reps=7):
    out = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out = min(out, time.perf_counter() - t0)
    return out


def main():
    backends = kernels.backends()
    print(f"available backends: {', '.join(backends)} (active: {kernels.BACKEND})\n")

    print("row-wise Hadamard transform, 256 rows")
    print(f"{'d':>6} " + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for d in (64, 128, 1024, 4096):
        x = make_rng(0).standard_normal((256, d), dtype=np.float32)
        times = {name: best_of(lambda m=mod: m.fwht_rows(x)) for name, mod in backends.items()}
        row = f"{d:>6} " + "".join(f"{times[name] * 1e3:>10.3f}ms" for name in backends)
        if "native" in times:
            row += f"{times['python'] / times['native']:>9.1f}x"
        print(row)

    print("\ncodebook match (256 entries, folded), batch of 8-dim sub-vectors")
    rng = make_rng(1)
    entries = np.abs(rng.standard_normal((256, 8), dtype=np.float32)) + np.float32(0.01)
    inv = kernels.entry_inv_norms(entries)
    print(f"{'batch':>8} " + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}")
    for m in (1024, 16384, 131072):
        vecs = rng.standard_normal((m, 8), dtype=np.float32)
        times = {
            name: best_of(lambda mod=mod: mod.match_block(vecs, entries, inv, True))
            for name, mod in backends.items()
        }
        row = f"{m:>8} " + "".join(f"{times[name] * 1e3:>10.3f}ms" for name in backends)
        if "native" in times:
            row += f"{times['python'] / times['native']:>9.1f}x"
        print(row)

    # sanity: identical outputs
    vecs = rng.standard_normal((4096, 8), dtype=np.float32)
    outs = [mod.match_block(vecs, entries, inv, True)[0] for mod in backends.values()]
    x = make_rng(2).standard_normal((64, 256), dtype=np.float32)
    hts = [mod.fwht_rows(x) for mod in backends.values()]
    agree = all(np.array_equal(outs[0], o) for o in outs[1:]) and all(
        np.array_equal(hts[0], h) for h in hts[1:]
    )
    print(f"\nbackends bit-identical: {agree}")


if __name__ == "__main__":
    main()
