"""End-to-end experiment workflow against the simulator.

Records store tilts in radians and shift measurements and true states in
physical units (meters, meters/s^j).  Estimation happens in normalized
coordinates and results are converted back for reporting.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from .em import EmResult, EmSettings, em_fit_records
from .estimation import covariance_trajectory, rts_smooth, run_filter
from .schedule import (
    ScheduleResult,
    TiltSequence,
    lissajous_pattern,
    random_pattern,
    receding_horizon,
    sequence_cost_trajectory,
)
from .statespace import (
    LinearModel,
    ModelConfig,
    build_model,
    make_rng,
    psd_sqrt,
    simulate_trajectory,
    spawn_seeds,
)

SCHEMA_VERSION = 1


def _seed_value(seed):
    """JSON-friendly description of a seed."""
    if seed is None or isinstance(seed, (int, np.integer)):
        return None if seed is None else int(seed)
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": int(seed.entropy), "spawn_key": list(seed.spawn_key)}
    raise TypeError("seed must be an int or SeedSequence")


def _seed_from(value):
    if isinstance(value, dict):
        return np.random.SeedSequence(value["entropy"], spawn_key=tuple(value["spawn_key"]))
    return value


@dataclass
class ExperimentRecord:
    """One tilt experiment: its configuration, tilts and measured shifts."""

    config: ModelConfig
    tilts: TiltSequence
    measurements: np.ndarray
    truth: np.ndarray | None = None
    seed: object = None

    def __post_init__(self):
        self.measurements = np.asarray(self.measurements, dtype=float).reshape(-1, 2)
        if len(self.measurements) != len(self.tilts):
            raise ValueError("tilts and measurements differ in length")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=float)
            if self.truth.shape != (len(self.tilts), self.config.dim):
                raise ValueError("truth must have one state per step")

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.tilts)) * self.config.sample_time

    @property
    def simulated(self) -> bool:
        return self.truth is not None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "tilts": self.tilts.to_dict(),
            "measurements": self.measurements.tolist(),
            "truth": None if self.truth is None else self.truth.tolist(),
            "seed": _seed_value(self.seed),
            "timestamps": self.timestamps.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentRecord:
        _check_version(data, "experiment record")
        truth = data.get("truth")
        return cls(
            config=ModelConfig.from_dict(data["config"]),
            tilts=TiltSequence.from_dict(data["tilts"]),
            measurements=np.array(data["measurements"], dtype=float),
            truth=None if truth is None else np.array(truth, dtype=float),
            seed=_seed_from(data.get("seed")),
        )

    def to_json(self, path) -> None:
        _write_json(path, self.to_dict())

    @classmethod
    def from_json(cls, path) -> ExperimentRecord:
        return cls.from_dict(_read_json(path))


def _check_version(data: dict, what: str) -> None:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported {what} schema_version {version!r}")


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None


# --- pattern design ----------------------------------------------------------


def design_pattern(
    config: ModelConfig,
    kind: str,
    n_steps: int,
    horizon: int = 1,
    seed=None,
    n_starts: int = 1000,
    n_warm: int = 100,
    ratio: tuple[int, int] = (3, 2),
    weight=None,
) -> ScheduleResult:
    """Build a pattern of kind ``greedy``, ``rho``, ``lissajous`` or ``random``."""
    model = build_model(config)
    bounds = config.bounds(n_steps)
    if kind == "greedy":
        horizon, kind = 1, "rho"
    if kind == "rho":
        return receding_horizon(
            model, weight, bounds, horizon, n_starts, min(n_warm, n_starts), seed
        )
    if kind == "lissajous":
        seq = lissajous_pattern(n_steps, ratio[0], ratio[1], bounds)
        diag = {"method": "lissajous", "ratio": list(ratio)}
    elif kind == "random":
        seq = random_pattern(n_steps, bounds, seed)
        diag = {"method": "random", "seed": _seed_value(seed)}
    else:
        raise ValueError(f"unknown pattern kind {kind!r}")
    costs = sequence_cost_trajectory(model, weight, seq)
    return ScheduleResult(seq, float(costs[-1]), costs, diag)


def load_pattern(path) -> TiltSequence:
    """Read a pattern from a schedule result, a sequence JSON or a CSV file."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return TiltSequence.from_csv(path)
    data = _read_json(path)
    if "sequence" in data:
        return TiltSequence.from_dict(data["sequence"])
    return TiltSequence.from_dict(data)


# --- simulation ----------------------------------------------------------------


def simulate_experiments(
    config: ModelConfig, sequence: TiltSequence, n_runs: int, seed=None
) -> list[ExperimentRecord]:
    """Independent simulated experiments, one spawned random stream per run."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    model = build_model(config)
    records = []
    for sub in spawn_seeds(seed, n_runs):
        states, ys = simulate_trajectory(model, sequence.tilts, seed=sub)
        records.append(
            ExperimentRecord(
                config,
                sequence,
                ys * model.measurement_scale,
                model.to_physical(states),
                sub,
            )
        )
    return records


# --- estimation ----------------------------------------------------------------


@dataclass
class EstimateReport:
    """Filtered (and smoothed) trajectories plus final physical estimates."""

    labels: tuple
    tilts: np.ndarray
    measurements: np.ndarray
    filtered_means: np.ndarray
    filtered_std: np.ndarray
    smoothed_means: np.ndarray | None
    smoothed_std: np.ndarray | None
    log_likelihood: float
    final_estimate: np.ndarray
    final_std: np.ndarray
    final_cov_normalized: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "labels": list(self.labels),
            "log_likelihood": self.log_likelihood,
            "final": [
                {"state": lab, "estimate": float(v), "std": float(s)}
                for lab, v, s in zip(self.labels, self.final_estimate, self.final_std)
            ],
            "filtered_means": self.filtered_means.tolist(),
            "filtered_std": self.filtered_std.tolist(),
            "smoothed_means": _maybe_list(self.smoothed_means),
            "smoothed_std": _maybe_list(self.smoothed_std),
        }

    def to_csv(self, path) -> None:
        """One row per step: tilt, measurement, filtered means and standard deviations."""
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["k", "tx", "ty", "y1", "y2"]
                + [f"mean {lab}" for lab in self.labels]
                + [f"std {lab}" for lab in self.labels]
            )
            for k in range(len(self.tilts)):
                row = [k, *self.tilts[k], *self.measurements[k]]
                row += list(self.filtered_means[k]) + list(self.filtered_std[k])
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _maybe_list(arr):
    return None if arr is None else np.asarray(arr).tolist()


def estimate_record(
    record: ExperimentRecord, config: ModelConfig | None = None, smooth: bool = True
) -> EstimateReport:
    """Run the filter (and smoother) on a record; outputs are in physical units."""
    config = config or record.config
    model = build_model(config)
    ys = model.normalize_measurements(record.measurements)
    filt = run_filter(model, record.tilts.tilts, ys)
    scale = model.state_scales
    f_std = np.sqrt(np.clip(np.diagonal(filt.covs_post, axis1=1, axis2=2), 0, None))
    s_means = s_std = None
    if smooth:
        sm = rts_smooth(model, filt)
        s_means = sm.means * scale
        s_std = np.sqrt(np.clip(np.diagonal(sm.covs, axis1=1, axis2=2), 0, None)) * scale
    return EstimateReport(
        labels=model.layout.labels,
        tilts=record.tilts.tilts,
        measurements=record.measurements,
        filtered_means=filt.means_post * scale,
        filtered_std=f_std * scale,
        smoothed_means=s_means,
        smoothed_std=s_std,
        log_likelihood=filt.log_likelihood,
        final_estimate=filt.means_post[-1] * scale,
        final_std=f_std[-1] * scale,
        final_cov_normalized=filt.covs_post[-1],
    )


def fit_noise(
    records: list[ExperimentRecord], config: ModelConfig | None = None, settings=None
) -> EmResult:
    """EM estimate of the normalized measurement-noise covariance from records."""
    config = config or records[0].config
    model = build_model(config)
    settings = settings or EmSettings.around(config.measurement_noise)
    tilts = [r.tilts.tilts for r in records]
    ys = [model.normalize_measurements(r.measurements) for r in records]
    return em_fit_records(model, tilts, ys, settings)


# --- evaluation ----------------------------------------------------------------


def _chi2_band(n_runs: int, dof: int, level: float = 0.99) -> tuple[float, float]:
    """Two-sided band for the mean of ``n_runs`` chi-square(``dof``) variables."""
    tail = 0.5 * (1.0 - level)
    total = n_runs * dof
    return (
        float(chi2.ppf(tail, total) / n_runs),
        float(chi2.ppf(1.0 - tail, total) / n_runs),
    )


@dataclass
class PatternEvaluation:
    name: str
    n_runs: int
    predicted_std: np.ndarray
    realized_std: np.ndarray
    cost_trajectory: np.ndarray
    nees: np.ndarray
    nees_band: tuple[float, float]

    @property
    def nees_mean(self) -> float:
        return float(np.mean(self.nees))

    @property
    def std_ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.realized_std / self.predicted_std

    @property
    def nees_consistent(self) -> bool:
        return self.nees_band[0] <= self.nees_mean <= self.nees_band[1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "runs": self.n_runs,
            "predicted_std": self.predicted_std.tolist(),
            "realized_std": self.realized_std.tolist(),
            "cost_trajectory": self.cost_trajectory.tolist(),
            "final_cost": float(self.cost_trajectory[-1]),
            "nees_mean": self.nees_mean,
            "nees_band_99": list(self.nees_band),
            "nees_consistent": self.nees_consistent,
        }


@dataclass
class EvaluationReport:
    """Predicted vs realized final-step errors and cost trajectories per pattern.

    Standard deviations are in normalized state units.
    """

    labels: tuple
    patterns: list
    seed: object = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "labels": list(self.labels),
            "seed": _seed_value(self.seed),
            "patterns": [p.to_dict() for p in self.patterns],
        }

    def to_json(self, path) -> None:
        _write_json(path, self.to_dict())

    def write_csv(self, directory) -> list[Path]:
        """``std.csv`` (per state and pattern) and ``cost.csv`` (per step and pattern)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        std_path = directory / "std.csv"
        with std_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pattern", "state", "predicted_std", "realized_std"])
            for p in self.patterns:
                for lab, ps, rs in zip(self.labels, p.predicted_std, p.realized_std):
                    writer.writerow([p.name, lab, repr(float(ps)), repr(float(rs))])
        cost_path = directory / "cost.csv"
        with cost_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k"] + [p.name for p in self.patterns])
            n = max(len(p.cost_trajectory) for p in self.patterns)
            for k in range(n):
                row = [k]
                for p in self.patterns:
                    c = p.cost_trajectory
                    row.append(repr(float(c[k])) if k < len(c) else "")
                writer.writerow(row)
        return [std_path, cost_path]


def monte_carlo_final_errors(
    model: LinearModel, tilts, n_runs: int, seed=None
) -> tuple[np.ndarray, np.ndarray]:
    """Final filter errors ``x_hat_{N-1|N-1} - x_{N-1}`` over simulated runs.

    Covariances and gains do not depend on the measurements, so they are
    computed once and applied to all runs together.  Returns the errors
    ``(n_runs, d)`` and the final posterior covariance.
    """
    tilts = np.asarray(tilts, dtype=float).reshape(-1, 2)
    n, d = len(tilts), model.dim
    traj = covariance_trajectory(model, tilts)
    C = model.observation(tilts)
    R = model.measurement_noise
    gains = np.empty((n, d, 2))
    for k in range(n):
        P = traj.predicted[k]
        S = C[k] @ P @ C[k].T + R
        gains[k] = np.linalg.solve(S, C[k] @ P).T
    Lq = psd_sqrt(model.process_noise)
    Lr = psd_sqrt(model.measurement_noise)
    L0 = psd_sqrt(model.prior_cov)
    # draws follow simulate_trajectory: initial state, then per step measurement
    # noise and process noise, each run on its own stream
    noise = np.empty((n_runs, d + n * (2 + d)))
    for i, sub in enumerate(spawn_seeds(seed, n_runs)):
        noise[i] = make_rng(sub).standard_normal(noise.shape[1])
    x = model.prior_mean + noise[:, :d] @ L0.T
    est = np.broadcast_to(model.prior_mean, (n_runs, d)).copy()
    off = d
    for k in range(n):
        y = x @ C[k].T + noise[:, off : off + 2] @ Lr.T
        off += 2
        est = est + (y - est @ C[k].T) @ gains[k].T
        if k == n - 1:
            break
        x = x @ model.A.T + noise[:, off : off + d] @ Lq.T
        off += d
        est = est @ model.A.T
    return est - x, traj.posterior[-1]


def evaluate_patterns(
    config: ModelConfig,
    patterns: dict,
    n_runs: int,
    seed=None,
    weight=None,
) -> EvaluationReport:
    """Monte-Carlo consistency and cost trajectories for named tilt sequences."""
    if not patterns:
        raise ValueError("at least one pattern is required")
    if n_runs < 2:
        raise ValueError("n_runs must be at least 2")
    model = build_model(config)
    d = model.dim
    results = []
    for (name, seq), sub in zip(patterns.items(), spawn_seeds(seed, len(patterns))):
        tilts = seq.tilts if isinstance(seq, TiltSequence) else np.asarray(seq, float)
        errors, P = monte_carlo_final_errors(model, tilts, n_runs, sub)
        realized = np.sqrt(np.mean(errors**2, axis=0))
        predicted = np.sqrt(np.clip(np.diag(P), 0.0, None))
        nees = np.einsum("ri,ri->r", errors, np.linalg.solve(P, errors.T).T)
        results.append(
            PatternEvaluation(
                name=name,
                n_runs=n_runs,
                predicted_std=predicted,
                realized_std=realized,
                cost_trajectory=sequence_cost_trajectory(model, weight, tilts),
                nees=nees,
                nees_band=_chi2_band(n_runs, d),
            )
        )
    return EvaluationReport(model.layout.labels, results, seed)


# --- correction loop -----------------------------------------------------------


@dataclass
class CorrectionReport:
    """Residual aberration magnitudes (normalized units) before and after each round."""

    labels: tuple
    residuals: np.ndarray  # (rounds + 1, n_coefficients)

    @property
    def medians(self) -> np.ndarray:
        return np.median(self.residuals, axis=1)

    @property
    def decay(self) -> np.ndarray:
        return self.medians / self.medians[0]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "coefficients": list(self.labels),
            "residual_magnitudes": self.residuals.tolist(),
            "median_residual": self.medians.tolist(),
            "median_relative_to_initial": self.decay.tolist(),
        }


def _coefficient_magnitudes(model: LinearModel, x) -> np.ndarray:
    basis = model.basis
    return np.abs(basis.to_complex(x[: basis.real_dim]))


def correction_loop(
    record: ExperimentRecord, rounds: int = 3, seed=None, config: ModelConfig | None = None
) -> CorrectionReport:
    """Repeat estimate-then-correct against the simulator.

    Round 1 estimates from ``record``.  The estimated aberration coefficients
    are subtracted from the true state, the true state and the estimate are
    advanced one step, and a fresh experiment with the same tilts is simulated
    from there.  Each later round starts its filter from the previous
    posterior with the corrected coefficients' mean set to zero.  Drift and
    the ``phi`` state are estimated but never corrected.
    """
    if not record.simulated:
        raise ValueError("the correction loop needs a simulated record with ground truth")
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    config = config or record.config
    model = build_model(config)
    l = model.basis.real_dim
    tilts = record.tilts.tilts
    truth = model.to_normalized(record.truth)
    ys = model.normalize_measurements(record.measurements)
    x0 = truth[0]
    residuals = [_coefficient_magnitudes(model, x0)]
    current = model
    streams = spawn_seeds(seed, rounds)
    for r in range(rounds):
        if r > 0:
            states, ys = simulate_trajectory(current, tilts, truth_init=x0, seed=streams[r])
            truth = states
        filt = run_filter(current, tilts, ys)
        x_true = truth[-1].copy()
        x_hat = filt.means_post[-1].copy()
        x_true[:l] -= x_hat[:l]
        x_hat[:l] = 0.0
        residuals.append(_coefficient_magnitudes(model, x_true))
        rng = make_rng(streams[r].spawn(1)[0])
        x0 = model.A @ x_true + psd_sqrt(model.process_noise) @ rng.standard_normal(model.dim)
        P_next = model.A @ filt.covs_post[-1] @ model.A.T + model.process_noise
        current = model.with_prior(mean=model.A @ x_hat, cov=0.5 * (P_next + P_next.T))
    labels = tuple(ix.label for ix in model.basis.indices)
    return CorrectionReport(labels, np.array(residuals))
