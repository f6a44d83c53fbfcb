"""Designed tilt patterns against Lissajous and random baselines."""

import time

import numpy as np

from tiltopt import (
    build_model,
    default_config,
    lissajous_pattern,
    random_pattern,
    receding_horizon,
    sequence_cost_trajectory,
)

config = default_config()
model = build_model(config)
n = 60
bounds = config.bounds(n)

t0 = time.perf_counter()
greedy = receding_horizon(model, None, bounds, horizon=1, n_starts=100, n_warm=50, seed=0)
print(f"greedy design took {time.perf_counter() - t0:.1f} s")

curves = {
    "greedy": greedy.cost_trajectory,
    "lissajous 3:2": sequence_cost_trajectory(model, None, lissajous_pattern(n, 3, 2, bounds)),
    "random": sequence_cost_trajectory(model, None, random_pattern(n, bounds, seed=0)),
}
print(f"{'k':>4}" + "".join(f"{name:>15}" for name in curves))
for k in (0, 4, 9, 19, 29, 44, 59):
    print(f"{k:4d}" + "".join(f"{c[k]:15.5f}" for c in curves.values()))

target = curves["random"][-1]
steps = int(np.argmax(greedy.cost_trajectory <= target)) + 1
print(f"greedy matches the random pattern's final cost after {steps} of {n} steps")

# greedy prefixes are complete patterns in their own right
print("first five tilts (mrad):")
print((greedy.sequence.prefix(5).tilts * 1e3).round(3))

# a longer horizon looks ahead; small and slow here, so only a short sequence
short = config.bounds(12)
rho = receding_horizon(model, None, short, horizon=4, n_starts=30, n_warm=10, seed=0)
g12 = receding_horizon(model, None, short, horizon=1, n_starts=30, n_warm=10, seed=0)
print(f"12 steps: H=4 final {rho.cost:.4f}, H=1 final {g12.cost:.4f}")
