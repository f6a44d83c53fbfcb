"""Drift-augmented linear-Gaussian model of tilt-induced image shifts.

The state is ``(c, phi, Re v, Re a, ..., Im v, Im a, ...)``: packed aberration
coefficients, a rotational misalignment ``phi`` between tilt and camera axes,
and two chains of ``drift_order`` drift derivatives feeding the image shift
``c11``.  Every quantity the filter touches is normalized: a physical state is
``S @ x`` with ``S = diag(state_scales)`` and a physical shift measurement is
``measurement_scale * y``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from math import factorial
from pathlib import Path

import numpy as np

from .aberrations import (
    AberrationBasis,
    TiltPolynomialTable,
    build_tilt_polynomial_table,
    enumerate_basis,
)

SCHEMA_VERSION = 1

NM = 1e-9
PM = 1e-12
MRAD = 1e-3

_DRIFT_NAMES = ("v", "a", "j", "s")


def state_dimension(max_order: int, drift_order: int) -> int:
    return enumerate_basis(max_order).real_dim + 1 + 2 * drift_order


def ramp_bounds(
    n_steps: int, theta_max: float = 5 * MRAD, ramp_steps: int = 10
) -> np.ndarray:
    """Tilt magnitude limits rising linearly from ``theta_max / 10`` to ``theta_max``.

    The limit reaches ``theta_max`` at step ``ramp_steps`` and stays there.
    """
    k = np.arange(n_steps)
    if ramp_steps <= 0:
        return np.full(n_steps, float(theta_max))
    frac = np.minimum(k / ramp_steps, 1.0)
    return theta_max * (0.1 + 0.9 * frac)


def extend_bounds(bounds, n_steps: int, start: int = 0) -> np.ndarray:
    """Bounds for steps ``start .. start + n_steps - 1``, repeating the last entry."""
    bounds = np.asarray(bounds, dtype=float)
    if bounds.size == 0:
        raise ValueError("tilt bound schedule is empty")
    k = np.minimum(np.arange(start, start + n_steps), bounds.size - 1)
    return bounds[k]


@dataclass(frozen=True)
class StateLayout:
    """Labels and index groups of the normalized state vector."""

    basis: AberrationBasis
    drift_order: int

    @property
    def n_aberration(self) -> int:
        return self.basis.real_dim

    @property
    def phi(self) -> int:
        return self.basis.real_dim

    @property
    def dim(self) -> int:
        return self.basis.real_dim + 1 + 2 * self.drift_order

    @cached_property
    def drift_re(self) -> np.ndarray:
        return self.phi + 1 + np.arange(self.drift_order)

    @cached_property
    def drift_im(self) -> np.ndarray:
        return self.phi + 1 + self.drift_order + np.arange(self.drift_order)

    @cached_property
    def drift(self) -> np.ndarray:
        return np.concatenate([self.drift_re, self.drift_im]).astype(int)

    @cached_property
    def labels(self) -> tuple[str, ...]:
        names = [
            _DRIFT_NAMES[j] if j < len(_DRIFT_NAMES) else f"d{j + 1}"
            for j in range(self.drift_order)
        ]
        return (
            self.basis.slot_labels
            + ("phi",)
            + tuple(f"Re {n}" for n in names)
            + tuple(f"Im {n}" for n in names)
        )


@dataclass
class ModelConfig:
    """Everything needed to assemble a :class:`LinearModel`.

    Noise covariances and the prior are in normalized units.  ``tilt_bounds``
    lists the magnitude limit per step in radians; steps past its end reuse
    the last value.
    """

    max_order: int
    drift_order: int
    sample_time: float
    state_scales: np.ndarray
    measurement_scale: float
    process_noise_diag: np.ndarray
    measurement_noise: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    tilt_bounds: np.ndarray
    schema_version: int = field(default=SCHEMA_VERSION)

    def __post_init__(self):
        self.state_scales = np.asarray(self.state_scales, dtype=float)
        self.process_noise_diag = np.asarray(self.process_noise_diag, dtype=float)
        self.measurement_noise = np.asarray(self.measurement_noise, dtype=float)
        self.prior_mean = np.asarray(self.prior_mean, dtype=float)
        self.prior_cov = np.asarray(self.prior_cov, dtype=float)
        self.tilt_bounds = np.atleast_1d(np.asarray(self.tilt_bounds, dtype=float))

    @property
    def dim(self) -> int:
        return state_dimension(self.max_order, self.drift_order)

    def bounds(self, n_steps: int, start: int = 0) -> np.ndarray:
        return extend_bounds(self.tilt_bounds, n_steps, start)

    def validate(self) -> None:
        """Raise ``ValueError`` if any invariant is violated."""
        if int(self.max_order) != self.max_order or self.max_order < 1:
            raise ValueError("max_order must be a positive integer")
        if int(self.drift_order) != self.drift_order or self.drift_order < 0:
            raise ValueError("drift_order must be a non-negative integer")
        d = self.dim
        if not (np.isfinite(self.sample_time) and self.sample_time > 0):
            raise ValueError("sample_time must be positive")
        if not self.measurement_scale > 0:
            raise ValueError("measurement_scale must be positive")
        for name, arr in [
            ("state_scales", self.state_scales),
            ("process_noise_diag", self.process_noise_diag),
            ("prior_mean", self.prior_mean),
        ]:
            if arr.shape != (d,):
                raise ValueError(f"{name} must have length {d}, got shape {arr.shape}")
        if np.any(self.state_scales <= 0):
            raise ValueError("state_scales must be positive")
        if np.any(self.process_noise_diag < 0):
            raise ValueError("process_noise_diag must be non-negative")
        if self.prior_cov.shape != (d, d):
            raise ValueError(f"prior_cov must be {d}x{d}")
        _check_psd(self.prior_cov, "prior_cov")
        if self.measurement_noise.shape != (2, 2):
            raise ValueError("measurement_noise must be 2x2")
        _check_psd(self.measurement_noise, "measurement_noise", strict=True)
        if np.any(self.tilt_bounds < 0) or not np.all(np.isfinite(self.tilt_bounds)):
            raise ValueError("tilt_bounds must be finite and non-negative")

    # --- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            out[key] = value.tolist() if isinstance(value, np.ndarray) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        data = dict(data)
        version = data.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema_version {version}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ValueError(f"malformed config: {exc}") from None
        cfg.validate()
        return cfg

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> ModelConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_psd(mat: np.ndarray, name: str, strict: bool = False) -> None:
    if not np.allclose(mat, mat.T, rtol=0, atol=1e-12 * max(1.0, np.abs(mat).max())):
        raise ValueError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(mat)
    if strict and eig.min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    if eig.min() < -1e-12 * max(1.0, eig.max()):
        raise ValueError(f"{name} must be positive semi-definite")


def default_state_scales(max_order: int, drift_order: int) -> np.ndarray:
    """Typical magnitudes used for normalization (meters, meters/s^j).

    Orders two to four use 1 nm, 100 nm and 10 um, which makes the shift
    produced by one normalized unit at a 5 mrad tilt comparable across orders.
    The image shift ``c11`` and the drift chains are scaled to the tracker
    resolution so that the stacked batch covariances stay well conditioned.
    ``phi`` multiplies the tilt in the observation model and therefore carries
    a length scale like defocus.
    """
    basis = enumerate_basis(max_order)
    per_order = {1: 2.5 * PM, 2: 1 * NM, 3: 100 * NM, 4: 10_000 * NM}
    aber = np.array(
        [per_order.get(m, 10_000 * NM * 100.0 ** (m - 4)) for m in basis.slot_orders]
    )
    drift = 0.5 * PM * 0.1 ** np.arange(drift_order)
    return np.concatenate([aber, [1 * NM], drift, drift])


def default_config(
    max_order: int = 4,
    drift_order: int = 2,
    n_steps: int = 60,
    theta_max: float = 5 * MRAD,
    sample_time: float = 0.5,
    measurement_std: float = 0.25,
) -> ModelConfig:
    """Desk-scale configuration mirroring a 60-step, fourth-order experiment.

    ``measurement_std`` is the isotropic tracker noise in normalized shift
    units; ``measurement_scale`` is 1 pm.
    """
    d = state_dimension(max_order, drift_order)
    return ModelConfig(
        max_order=max_order,
        drift_order=drift_order,
        sample_time=sample_time,
        state_scales=default_state_scales(max_order, drift_order),
        measurement_scale=1 * PM,
        process_noise_diag=np.full(d, 1e-6),
        measurement_noise=measurement_std**2 * np.eye(2),
        prior_mean=np.zeros(d),
        prior_cov=np.eye(d),
        tilt_bounds=ramp_bounds(n_steps, theta_max),
    )


def physical_transition(basis: AberrationBasis, drift_order: int, tau: float):
    """Transition matrix in physical units; drift chains are exact Taylor steps."""
    l = basis.real_dim
    b = drift_order
    d = l + 1 + 2 * b
    A = np.eye(d)
    chain = np.eye(b)
    for i in range(b):
        for j in range(i + 1, b):
            chain[i, j] = tau ** (j - i) / factorial(j - i)
    couple = np.array([tau ** (j + 1) / factorial(j + 1) for j in range(b)])
    re = slice(l + 1, l + 1 + b)
    im = slice(l + 1 + b, d)
    A[re, re] = chain
    A[im, im] = chain
    A[0, re] = couple
    A[1, im] = couple
    return A


@dataclass(frozen=True)
class LinearModel:
    """Normalized model ``x+ = A x + xi``, ``y = C(theta) x + eps``."""

    A: np.ndarray
    process_noise: np.ndarray
    measurement_noise: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    layout: StateLayout
    table: TiltPolynomialTable
    state_scales: np.ndarray
    measurement_scale: float
    sample_time: float

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def basis(self) -> AberrationBasis:
        return self.layout.basis

    @cached_property
    def A_inv(self) -> np.ndarray:
        return np.linalg.solve(self.A, np.eye(self.dim))

    @cached_property
    def _column_scale(self) -> np.ndarray:
        l = self.layout.n_aberration
        return self.state_scales[: l + 1] / self.measurement_scale

    @cached_property
    def _observation_tensor(self) -> np.ndarray:
        """Monomial coefficients of ``C(theta)``, shape ``(K, 2 * d)``.

        The ``phi`` column is ``(-ty, tx)``; it is added to the ``ty`` and
        ``tx`` monomials of the aberration table.
        """
        l = self.layout.n_aberration
        exps = [tuple(e) for e in self.table.exponents.tolist()]
        K = len(exps)
        E = np.zeros((K, 2, self.dim))
        E[:, :, :l] = np.moveaxis(self.table.coeffs, -1, 0)
        E[exps.index((0, 1)), 0, l] += -1.0
        E[exps.index((1, 0)), 1, l] += 1.0
        E[:, :, : l + 1] *= self._column_scale
        return E.reshape(K, 2 * self.dim)

    def _apply(self, mono, shape):
        return (mono.reshape(-1, mono.shape[-1]) @ self._observation_tensor).reshape(
            shape + (2, self.dim)
        )

    def observation(self, theta) -> np.ndarray:
        """``C(theta)`` for tilts of shape ``(..., 2)``; output ``(..., 2, d)``."""
        theta = np.asarray(theta, dtype=float)
        return self._apply(self.table.monomials(theta), theta.shape[:-1])

    def observation_gradient(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """``(dC/dtx, dC/dty)``, each of shape ``(..., 2, d)``."""
        theta = np.asarray(theta, dtype=float)
        d_tx, d_ty = self.table.monomial_gradients(theta)
        return self._apply(d_tx, theta.shape[:-1]), self._apply(d_ty, theta.shape[:-1])

    def with_measurement_noise(self, noise) -> LinearModel:
        return replace(self, measurement_noise=np.asarray(noise, dtype=float))

    def with_prior(self, mean=None, cov=None) -> LinearModel:
        return replace(
            self,
            prior_mean=self.prior_mean if mean is None else np.asarray(mean, float),
            prior_cov=self.prior_cov if cov is None else np.asarray(cov, float),
        )

    def to_physical(self, x) -> np.ndarray:
        """Map normalized states ``(..., d)`` to physical units."""
        return np.asarray(x) * self.state_scales

    def to_normalized(self, x_phys) -> np.ndarray:
        return np.asarray(x_phys) / self.state_scales

    def normalize_measurements(self, y_phys) -> np.ndarray:
        return np.asarray(y_phys) / self.measurement_scale


def build_model(config: ModelConfig) -> LinearModel:
    """Assemble the normalized model from a configuration."""
    config.validate()
    basis = enumerate_basis(config.max_order)
    layout = StateLayout(basis, config.drift_order)
    A_phys = physical_transition(basis, config.drift_order, config.sample_time)
    S = config.state_scales
    A = A_phys * S[None, :] / S[:, None]
    return LinearModel(
        A=A,
        process_noise=np.diag(config.process_noise_diag),
        measurement_noise=config.measurement_noise.copy(),
        prior_mean=config.prior_mean.copy(),
        prior_cov=config.prior_cov.copy(),
        layout=layout,
        table=build_tilt_polynomial_table(basis).with_monomials([(1, 0), (0, 1)]),
        state_scales=S.copy(),
        measurement_scale=float(config.measurement_scale),
        sample_time=float(config.sample_time),
    )


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Square-root factor ``L`` with ``L @ L.T == cov`` for PSD (possibly singular) input."""
    w, V = np.linalg.eigh(np.asarray(cov, dtype=float))
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate_trajectory(
    model: LinearModel, tilts, truth_init=None, seed=None
) -> tuple[np.ndarray, np.ndarray]:
    """Draw a state trajectory and noisy shift measurements.

    Parameters
    ----------
    model : LinearModel
    tilts : array_like, shape (N, 2)
    truth_init : array_like, shape (d,), optional
        Normalized initial state.  Drawn from the prior when omitted.
    seed : int, numpy Generator or SeedSequence, optional

    Returns
    -------
    states : ndarray, shape (N, d)
    measurements : ndarray, shape (N, 2)
    """
    rng = make_rng(seed)
    tilts = np.asarray(tilts, dtype=float).reshape(-1, 2)
    n = len(tilts)
    d = model.dim
    if truth_init is None:
        x = model.prior_mean + psd_sqrt(model.prior_cov) @ rng.standard_normal(d)
    else:
        x = np.asarray(truth_init, dtype=float).copy()
        if x.shape != (d,):
            raise ValueError(f"truth_init must have length {d}")
    Lq = psd_sqrt(model.process_noise)
    Lr = psd_sqrt(model.measurement_noise)
    C = model.observation(tilts)
    states = np.empty((n, d))
    ys = np.empty((n, 2))
    for k in range(n):
        states[k] = x
        ys[k] = C[k] @ x + Lr @ rng.standard_normal(2)
        x = model.A @ x + Lq @ rng.standard_normal(d)
    return states, ys


def make_rng(seed=None) -> np.random.Generator:
    """Counter-based generator so independent sub-streams can be spawned."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def spawn_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return seed.spawn(n)
