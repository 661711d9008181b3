"""Time each hot kernel under the compiled and pure-Python backends.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--rows 400]

Prints one line per kernel with both timings, the speedup and whether the two
backends produced identical results.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from stopwatt import kernels
from stopwatt.gbdt import HyperParams, fit, shap_values

KERNELS = ("lcs_length", "find_level_splits", "predict_tree", "tree_shap")


def use(backend: str) -> None:
    mod = kernels.backend(backend)
    for name in KERNELS:
        setattr(kernels, name, getattr(mod, name))


def best_of(fn, repeat: int):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--rows", type=int, default=400)
    ap.add_argument("--lcs-len", type=int, default=600)
    args = ap.parse_args()
    if kernels.BACKEND != "native":
        raise SystemExit("compiled extension is not available; build it with `pip install -e .`")

    rng = np.random.default_rng(0)
    n, m = args.rows, 35
    X = rng.normal(size=(n, m))
    X[rng.random(X.shape) < 0.1] = np.nan
    y = (np.nan_to_num(X[:, 0]) + 0.5 * np.nan_to_num(X[:, 3]) + rng.normal(size=n) > 0).astype(float)
    params = HyperParams(max_depth=5, subsample=0.7, colsample=0.6, rounds=30)
    a = rng.integers(0, 50, size=args.lcs_len).astype(np.int64)
    b = rng.integers(0, 50, size=args.lcs_len).astype(np.int64)

    model = fit(X, y, params, seed=1)
    cases = {
        "lcs_length": lambda: kernels.lcs_length(a, b),
        "fit (split search)": lambda: fit(X, y, params, seed=1).dumps(),
        "predict": lambda: model.predict_margin(X),
        "tree_shap": lambda: shap_values(model, X[:100])[0],
    }
    print(f"{'kernel':22s} {'native s':>10s} {'python s':>10s} {'speedup':>9s}  identical")
    for label, fn in cases.items():
        use("native")
        tn, rn = best_of(fn, args.repeat)
        use("python")
        tp, rp = best_of(fn, max(1, args.repeat // 3))
        use("native")
        same = np.array_equal(rn, rp) if isinstance(rn, np.ndarray) else rn == rp
        print(f"{label:22s} {tn:10.4f} {tp:10.4f} {tp / tn:8.1f}x  {same}")


if __name__ == "__main__":
    main()
