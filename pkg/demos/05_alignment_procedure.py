"""The full alignment workflow against the simulator.

Fit the noise from a few general experiments, design a pattern, measure,
estimate, correct and repeat.
"""

import numpy as np

from tiltopt.harness import (
    correction_loop,
    design_pattern,
    estimate_record,
    evaluate_patterns,
    fit_noise,
    simulate_experiments,
)
from tiltopt.statespace import default_config

config = default_config()
n = 60

# 1. noise calibration from random-pattern experiments
calib = design_pattern(config, "random", n, seed=10).sequence
em = fit_noise(simulate_experiments(config, calib, 4, seed=11))
print("fitted noise covariance (normalized):\n", em.sigma_eps.round(4))
config.measurement_noise = em.sigma_eps

# 2. design
pattern = design_pattern(config, "greedy", n, seed=12, n_starts=100, n_warm=50)
print(f"designed pattern: final weighted trace {pattern.cost:.5f}")

# 3. one measured run and its estimate (physical units)
run = simulate_experiments(config, pattern.sequence, 1, seed=13)[0]
est = estimate_record(run)
for lab, v, s, true in zip(est.labels, est.final_estimate, est.final_std, run.truth[-1]):
    if lab in ("c20", "Re c22", "Re c31"):
        print(f"{lab:>7}: estimate {v * 1e9:8.3f} nm  std {s * 1e9:6.3f} nm  truth {true * 1e9:8.3f} nm")

# 4. correct and repeat
report = correction_loop(run, rounds=3, seed=14)
print("median residual vs initial:", report.decay.round(3))

# 5. check the filter is honest about its uncertainty
ev = evaluate_patterns(
    config, {"designed": pattern.sequence, "random": calib}, n_runs=500, seed=15
)
for p in ev.patterns:
    print(
        f"{p.name:>9}: final trace {p.cost_trajectory[-1]:.5f}, "
        f"realized/predicted std {p.std_ratio.min():.2f}..{p.std_ratio.max():.2f}, "
        f"NEES {p.nees_mean:.2f}"
    )
