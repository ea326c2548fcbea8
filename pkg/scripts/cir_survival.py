"""Survival of the exact CIR sampler when the Feller condition fails.

With a constant volatility chart the representation is valid until the
path reaches zero. Starting close to zero, the fraction of paths still
inside the domain decays over time; this prints it at each output node.
"""

import argparse

from exactsde import catalog
from exactsde.numerics import Grid
from exactsde.representation import build_representation
from exactsde.simulate import simulate_exact


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--x0", type=float, nargs="+", default=[1.0, 0.2, 0.05])
    ap.add_argument("--t-end", type=float, default=1.9)
    ap.add_argument("--nodes", type=int, default=20)
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=3)
    args = ap.parse_args()

    grid = Grid.uniform(0.0, args.t_end, args.nodes)
    curves = []
    for x0 in args.x0:
        e = catalog.get("cir_const", x0=x0)
        rep = build_representation(e.params, e.diffeo, e.x0, 0.0, grid)
        curves.append(simulate_exact(rep, grid, args.paths, args.seed, model=e.model).survival())
    print(f"{'t':>8} " + " ".join(f"{'x0=' + format(x, 'g'):>10}" for x in args.x0))
    for k, t in enumerate(grid.nodes):
        print(f"{t:8.4f} " + " ".join(f"{c[k]:10.5f}" for c in curves))


if __name__ == "__main__":
    main()
