"""Calibrate latent correlation and defect thresholds to the target class mix.

Targets: Normal 65%, Collapse 7%, Wrinkling 13%, Collapse+Wrinkling 15%, i.e.
P(collapse)=0.22, P(wrinkle)=0.28, P(both)=0.15. Prints values for SimConfig.

    python scripts/calibrate_thresholds.py --draws 200000
"""
import argparse
import dataclasses

import numpy as np

from mtbf_twin.scenario_sim import SimConfig, _severity_scores, sample_scenarios

P_COLLAPSE, P_WRINKLE, P_BOTH = 0.22, 0.28, 0.15


def scores(scenarios, z, cfg):
    return np.array([_severity_scores(sc, zi, cfg) for sc, zi in zip(scenarios, z)])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--draws", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=12345)
    args = ap.parse_args()

    base = SimConfig()
    scen = sample_scenarios(args.draws, base.ranges, args.seed)
    z = np.random.default_rng(args.seed).standard_normal((args.draws, 3))

    def fit(rho):
        cfg = dataclasses.replace(base, latent_corr=rho)
        s = scores(scen, z, cfg)
        tc = np.quantile(s[:, 0], 1 - P_COLLAPSE)
        tw = np.quantile(s[:, 1], 1 - P_WRINKLE)
        both = np.mean((s[:, 0] > tc) & (s[:, 1] > tw))
        return tc, tw, both

    lo, hi = 0.0, 0.999
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if fit(mid)[2] < P_BOTH:
            lo = mid
        else:
            hi = mid
    rho = 0.5 * (lo + hi)
    tc, tw, both = fit(rho)
    print(f"latent_corr = {rho:.4f}")
    print(f"collapse_threshold = {tc:.4f}")
    print(f"wrinkle_threshold = {tw:.4f}")
    print(f"P(both) = {both:.4f}")


if __name__ == "__main__":
    main()
