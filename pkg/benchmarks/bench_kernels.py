"""Time the compiled and numpy kernel backends on training-shaped inputs.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Each kernel runs on a 64-row batch (10 positives, 54 negatives) like the
default sampler produces; ``ap_cmc_rows`` runs on a 200 x 600 ranking.
"""

import argparse
import timeit

import numpy as np

from maskrank import kernels, losses


def inputs(seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.normal(size=(64, 32))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    identity = np.concatenate([np.zeros(10, dtype=int), np.arange(1, 55)])
    pos, neg = losses._label_masks(identity)
    rows = losses.anchor_rows(identity)
    sims = np.ascontiguousarray((x @ x.T)[rows])
    a, p = losses.npair_pairs(identity)
    full = np.ascontiguousarray(x @ x.T)
    order = np.ascontiguousarray(np.argsort(-rng.normal(size=(200, 600)), axis=1), dtype=np.intp)
    good = (rng.uniform(size=(200, 600)) < 0.01).astype(np.uint8)
    junk = ((rng.uniform(size=(200, 600)) < 0.01) & (good == 0)).astype(np.uint8)
    u8 = lambda m: np.ascontiguousarray(m, dtype=np.uint8)
    return {
        "ranking_rows": (sims, u8(pos[rows]), u8(neg[rows]), 0.2, 1.0),
        "ranking_full_rows": (sims, u8(pos[rows]), u8(neg[rows])),
        "npair_rows": (np.ascontiguousarray(full[a]), np.ascontiguousarray(p, dtype=np.intp), u8(neg[a])),
        "triplet_rows": (full, u8(pos), u8(neg), 0.2),
        "ap_cmc_rows": (order, good, junk),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--repeat", type=int, default=50)
    args = parser.parse_args()
    found = kernels.backends()
    data = inputs()
    names = sorted(found)
    print(f"{'kernel':<20}" + "".join(f"{n + ' (ms)':>16}" for n in names) + f"{'speedup':>10}")
    for kernel, call_args in data.items():
        times = {}
        for name in names:
            fn = getattr(found[name], kernel)
            fn(*call_args)
            times[name] = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat)) * 1e3
        speedup = times["numpy"] / times["cython"] if "cython" in times else float("nan")
        print(f"{kernel:<20}" + "".join(f"{times[n]:>16.4f}" for n in names) + f"{speedup:>9.1f}x")


if __name__ == "__main__":
    main()
