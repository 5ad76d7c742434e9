"""Rejection rate of the joint pre-trend test under a null DGP (20 municipalities x 200 students).

Usage: python scripts/pretrend_size.py [--reps 200] [--seed 0] [--boot 399]
"""
import argparse

from eventstudy import experiments


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--boot", type=int, default=399)
    args = p.parse_args()
    res = experiments.pretrend_size(experiments.SizeConfig(n_reps=args.reps, base_seed=args.seed, n_boot=args.boot))
    print(f"{res['n_reps']} replications in {res['seconds']:.0f}s")
    print(f"rejection at {res['level']:.0%}: bootstrap {res['rejection_rate_bootstrap']:.3f}, "
          f"chi-square {res['rejection_rate_chi2']:.3f}")
    for e in res["errors"]:
        print(f"seed {e['seed']}: {e['error']}")


if __name__ == "__main__":
    main()
