"""Learning the measurement noise from tilt experiments with EM."""

import numpy as np

from tiltopt import EmSettings, build_model, default_config, em_fit, random_pattern, simulate_trajectory

config = default_config()
truth = np.array([[0.09, 0.02], [0.02, 0.05]])
config.measurement_noise = truth
model = build_model(config)

n = 600
seq = random_pattern(n, config.bounds(n), seed=3)
_, ys = simulate_trajectory(model, seq.tilts, seed=4)

# start from a deliberately wrong guess; EM tries 0.1x, 1x and 10x of it
settings = EmSettings.around(np.eye(2))
result = em_fit(model, seq.tilts, ys, settings)

print("true noise covariance\n", truth)
print("estimate\n", result.sigma_eps.round(4))
err = np.linalg.norm(result.sigma_eps - truth) / np.linalg.norm(truth)
print(f"relative error {err:.1%} after {result.iterations} iterations (init {result.chosen_init})")
print("final log-likelihood per initialization:", np.round(result.final_log_likelihoods, 2))
trace = result.log_likelihood_trace
print("likelihood trace:", np.round(trace[:4], 2), "...", round(trace[-1], 2))
print("monotone:", bool(np.all(np.diff(trace) >= -1e-9)))
