"""Benchmark the compiled per-subject kernels against the numpy fallback.

Runs the three hot operations (inner Newton profile, criterion gradient
pieces, recentered marginal) for a batch of synthetic subjects with each
backend, reports wall time per call, and verifies the backends agree to
round-off.

Usage:  python benchmarks/bench_kernels.py [--subjects 2000] [--visits 6]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from vicalib._kernels import _pyimpl
from vicalib.numkit import RngStream
from vicalib.quadrature import gh_rule

try:
    from vicalib._kernels import _cyimpl
except ImportError:
    _cyimpl = None


def make_subjects(n, visits, seed=0):
    gen = RngStream(seed).generator()
    subjects = []
    for _ in range(n):
        design = gen.normal(size=(visits, 4))
        beta = np.array([-0.8, 0.5, -0.3, 0.2])
        eta0 = np.ascontiguousarray(design @ beta)
        gamma = gen.normal(0.0, 1.5)
        y = (gen.random(visits) < 1.0 / (1.0 + np.exp(-(eta0 + gamma)))).astype(float)
        subjects.append((eta0, y))
    return subjects


def bench(impl, subjects, nodes, weights, mnodes, mweights):
    tau = 0.5
    t0 = time.perf_counter()
    psi = [
        impl.glmm_profile(eta0, y, tau, 0.0, 0.0, nodes, weights, 1e-10, 200)[:2]
        for eta0, y in subjects
    ]
    t1 = time.perf_counter()
    grads = [
        impl.glmm_theta_parts(eta0, y, tau, m, ls, nodes, weights)
        for (eta0, y), (m, ls) in zip(subjects, psi)
    ]
    t2 = time.perf_counter()
    marg = [
        impl.glmm_marginal(eta0, y, tau, mnodes, mweights)[0]
        for eta0, y in subjects
    ]
    t3 = time.perf_counter()
    return {
        "profile": t1 - t0,
        "theta_parts": t2 - t1,
        "marginal": t3 - t2,
        "psi": np.array(psi),
        "values": np.array([g[0] for g in grads]),
        "marg": np.array(marg),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--subjects", type=int, default=2000)
    parser.add_argument("--visits", type=int, default=6)
    args = parser.parse_args()

    subjects = make_subjects(args.subjects, args.visits)
    rule = gh_rule(20)
    mrule = gh_rule(30)

    results = {}
    results["numpy"] = bench(
        _pyimpl, subjects, rule.nodes, rule.weights, mrule.nodes, mrule.weights
    )
    if _cyimpl is not None:
        results["cython"] = bench(
            _cyimpl, subjects, rule.nodes, rule.weights, mrule.nodes, mrule.weights
        )

    n = args.subjects
    print(f"{n} subjects x {args.visits} visits, Gauss-Hermite 20/30")
    header = f"{'kernel':<14}" + "".join(f"{name:>14}" for name in results)
    if len(results) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for op in ("profile", "theta_parts", "marginal"):
        row = f"{op:<14}"
        for name in results:
            row += f"{results[name][op] / n * 1e6:>12.1f}us"
        if len(results) == 2:
            row += f"{results['numpy'][op] / results['cython'][op]:>9.1f}x"
        print(row)

    if len(results) == 2:
        gaps = (
            np.max(np.abs(results["numpy"]["psi"] - results["cython"]["psi"])),
            np.max(np.abs(results["numpy"]["values"] - results["cython"]["values"])),
            np.max(np.abs(results["numpy"]["marg"] - results["cython"]["marg"])),
        )
        print(f"max backend gaps: profile {gaps[0]:.2e}, value {gaps[1]:.2e}, "
              f"marginal {gaps[2]:.2e}")
        assert max(gaps) < 1e-9, "backends disagree beyond round-off"
    else:
        print("compiled backend not available; benchmarked the fallback only")


if __name__ == "__main__":
    main()
