"""Timing comparison of the compiled and pure-numpy kernel backends.

Runs the two moment-matching kernels and a full model fit under both
backends and prints a table of per-call times plus the speedup. Useful
when deciding whether a platform without the compiled extension is
acceptable for batch work.

Usage:
    python3 benchmarks/bench_kernels.py [--sites 4096] [--repeats 200]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from elicit import _kernels_py

try:
    from elicit import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def site_inputs(rng: np.random.Generator, n: int):
    q_site = rng.uniform(0.05, 3.0, n)
    prec_c = rng.uniform(0.2, 4.0, n)
    v_marg = 1.0 / (prec_c + q_site)
    m_marg = rng.normal(0.0, 0.8, n)
    h_site = rng.normal(0.0, 0.5, n)
    u_site = rng.normal(0.0, 0.3, n)
    eta = rng.normal(-1.0, 1.5, n)
    tau2 = rng.uniform(0.01, 0.5, n)
    return [
        np.ascontiguousarray(a)
        for a in (v_marg, m_marg, q_site, h_site, u_site, eta, tau2)
    ]


def time_call(fn, repeats: int) -> float:
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_kernels(n_sites: int, repeats: int, rng: np.random.Generator):
    rows = []
    args = site_inputs(rng, n_sites)
    c_plus = np.ascontiguousarray(rng.uniform(0.05, 0.95, n_sites))
    c_minus = np.ascontiguousarray(1.0 - c_plus)

    def mixture(mod):
        return lambda: mod.ss_site_update(
            *[a.copy() for a in args], 0.8, 1e-10, 1e12
        )

    def directional(mod):
        return lambda: mod.ss_dir_site_update(
            args[0], args[1], args[2].copy(), args[3].copy(), args[4].copy(),
            args[5], args[6], c_plus, 0.8, 1e-10, 1e12,
        )

    def sign_tilt(mod):
        return lambda: mod.sign_tilted_moments(args[1], args[6], c_plus, c_minus)

    for name, make in (
        ("mixture sites", mixture),
        ("directional sites", directional),
        ("sign tilt", sign_tilt),
    ):
        t_py = time_call(make(_kernels_py), repeats)
        t_c = time_call(make(_kernels_c), repeats) if _kernels_c else float("nan")
        rows.append((name, t_py, t_c))
    return rows


def bench_fit(seed: int):
    """End-to-end fit timing under each backend selection."""
    from elicit.ep import ep_fit
    from elicit.evaluation import SyntheticConfig, generate_synthetic
    from elicit.model import FeedbackSet, Hyperparameters

    cfg = SyntheticConfig(
        n_samples=40, n_features=300, n_drugs=4, nonzero_per_drug=10,
        pool_features=50, noise_sd=0.7, weight_scale=0.8,
    )
    ds, _, _ = generate_synthetic(cfg, np.random.default_rng(seed))
    t0 = time.perf_counter()
    ep_fit(ds, FeedbackSet(), Hyperparameters())
    return time.perf_counter() - t0


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sites", type=int, default=4096)
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    from elicit.kernels import BACKEND

    print(f"active backend: {BACKEND}")
    if _kernels_c is None:
        print("compiled extension not importable; timing pure backend only")

    rng = np.random.default_rng(args.seed)
    rows = bench_kernels(args.sites, args.repeats, rng)
    print(f"\nper-call times at {args.sites} sites ({args.repeats} repeats):")
    print(f"{'kernel':<20}{'python':>12}{'compiled':>12}{'speedup':>10}")
    for name, t_py, t_c in rows:
        speed = t_py / t_c if t_c == t_c and t_c > 0 else float("nan")
        print(f"{name:<20}{t_py * 1e6:>10.1f}us{t_c * 1e6:>10.1f}us{speed:>9.2f}x")

    print("\nfull fit (40 x 300, 4 drugs):")
    print(f"  {BACKEND} backend: {bench_fit(args.seed):.2f}s")
    print("  (run with ELICIT_PURE_PYTHON=1 to time the other backend)")


if __name__ == "__main__":
    main()
