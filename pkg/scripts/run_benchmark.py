"""Exact sampler versus Euler at equal weak error on a catalog model.

Prints the Euler curve (step, weak error, wall time) and the speedup at the
target error; ``--json`` also writes the full result.
"""

import argparse
import json

from exactsde import catalog
from exactsde.benchmark import DEFAULT_LADDER, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="gbm")
    ap.add_argument("--paths", type=int, default=10_000)
    ap.add_argument("--t-end", type=float, default=1.0)
    ap.add_argument("--n-output", type=int, default=10)
    ap.add_argument("--target", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write the result here")
    args = ap.parse_args()

    res = run_benchmark(catalog.get(args.model), n_paths=args.paths, t_end=args.t_end, n_output=args.n_output,
                        target=args.target, ladder=DEFAULT_LADDER, seed=args.seed)
    print(f"model {res.model}: {res.n_paths} paths, {res.n_output} output times, target {res.target:g}")
    print(f"exact: {res.exact_time:.4f}s (precompute {res.precompute_time:.4f}s), "
          f"error {res.exact_error:.2e} (se {res.exact_se:.2e})")
    print(f"{'dt':>12} {'weak error':>12} {'se':>10} {'wall (s)':>10}")
    for c in res.curve:
        print(f"{c.dt:12.6g} {c.weak_error:12.3e} {c.weak_se:10.2e} {c.wall_time:10.4f}")
    if res.speedup is None:
        print("no ladder step reaches the target")
    else:
        print(f"dt* = {res.dt_star:g}: Euler {res.euler_time:.4f}s, speedup {res.speedup:.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(res.to_dict(), fh, indent=2)


if __name__ == "__main__":
    main()
