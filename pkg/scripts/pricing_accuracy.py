"""Cross-check the three call pricers on a double-exponential density.

Prints the closed-form price, the Fourier-transform price of the
tabulated density, and a compound-Poisson Monte Carlo estimate with its
standard error, over a maturity/strike grid.
"""

import argparse
import sys

import numpy as np

from tll.kou import KouParams, call_price, levy_density, sample_jumps
from tll.simulation import lewis_price


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-paths", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    par = KouParams(lam=1.5, lam1=10.0, lam2=8.0, p=0.45)
    x_grid = np.arange(-2.0, 2.0 + 0.001, 0.002)
    eta = levy_density(par, x_grid)
    x_out = np.linspace(-0.2, 0.1, 7)
    rng = np.random.default_rng(args.seed)

    print(f"{'tau':>6}{'x':>8}{'analytic':>12}{'fourier':>12}"
          f"{'mc':>12}{'mc se':>10}")
    for tau in (0.05, 0.25, 0.5, 1.0):
        analytic = call_price(par, 1.0, np.exp(x_out), tau)
        fourier = lewis_price(eta, x_grid, tau, x_out)
        counts = rng.poisson(par.lam * tau, args.n_paths)
        sizes = sample_jumps(par, int(counts.sum()), rng)
        owner = np.repeat(np.arange(args.n_paths), counts)
        jumps = np.bincount(owner, weights=sizes, minlength=args.n_paths)
        omega = par.lam * (par.p * par.lam1 / (par.lam1 - 1)
                           + (1 - par.p) * par.lam2 / (par.lam2 + 1) - 1)
        s_term = np.exp(-omega * tau + jumps)
        for j, xx in enumerate(x_out):
            payoff = np.maximum(s_term - np.exp(xx), 0.0)
            mc = payoff.mean()
            se = payoff.std() / np.sqrt(args.n_paths)
            print(f"{tau:>6.2f}{xx:>8.3f}{analytic[j]:>12.6f}"
                  f"{fourier[j]:>12.6f}{mc:>12.6f}{se:>10.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
