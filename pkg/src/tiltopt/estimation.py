"""Kalman filtering, RTS smoothing and batch N-step covariance evaluation.

All quantities are in the normalized coordinates of :class:`LinearModel`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .statespace import LinearModel


class SingularInnovationError(np.linalg.LinAlgError):
    """The innovation covariance of a filter update could not be factorized."""


class IllConditionedScheduleError(np.linalg.LinAlgError):
    """The batch innovation covariance of a tilt sequence is not positive definite."""


LOG_2PI = np.log(2 * np.pi)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


@dataclass(frozen=True)
class FilterState:
    mean: np.ndarray
    cov: np.ndarray
    time_index: int = 0


def initial_state(model: LinearModel) -> FilterState:
    return FilterState(model.prior_mean.copy(), model.prior_cov.copy(), 0)


def kf_predict(state: FilterState, model: LinearModel) -> FilterState:
    A = model.A
    cov = symmetrize(A @ state.cov @ A.T + model.process_noise)
    return FilterState(A @ state.mean, cov, state.time_index + 1)


def _joseph_update(P, C, R):
    """Gain, posterior covariance, innovation covariance and its Cholesky factor."""
    PCt = P @ C.T
    S = symmetrize(C @ PCt + R)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationError(str(exc)) from None
    K = scipy.linalg.cho_solve((L, True), PCt.T).T
    IKC = np.eye(P.shape[0]) - K @ C
    P_post = symmetrize(IKC @ P @ IKC.T + K @ R @ K.T)
    return K, P_post, S, L


def kf_update(state: FilterState, model: LinearModel, theta, y) -> FilterState:
    """Measurement update with the Joseph-form covariance."""
    C = model.observation(theta)
    K, P_post, _, _ = _joseph_update(state.cov, C, model.measurement_noise)
    mean = state.mean + K @ (np.asarray(y, dtype=float) - C @ state.mean)
    return FilterState(mean, P_post, state.time_index)


def update_covariance(P: np.ndarray, model: LinearModel, theta) -> np.ndarray:
    """Posterior covariance only; needs no measurement."""
    C = model.observation(theta)
    return _joseph_update(P, C, model.measurement_noise)[1]


def predict_covariance(P: np.ndarray, model: LinearModel) -> np.ndarray:
    return symmetrize(model.A @ P @ model.A.T + model.process_noise)


@dataclass
class CovarianceTrajectory:
    """Predicted ``P_{k|k-1}`` and posterior ``P_{k|k}`` for ``k = 0..N-1``."""

    predicted: np.ndarray
    posterior: np.ndarray

    def weighted_trace(self, W: np.ndarray, which: str = "posterior") -> np.ndarray:
        P = self.posterior if which == "posterior" else self.predicted
        return np.einsum("ij,kji->k", W, P)


@dataclass
class FilterResult:
    """Output of :func:`run_filter` (arrays indexed by time step)."""

    tilts: np.ndarray
    measurements: np.ndarray
    means_pred: np.ndarray
    means_post: np.ndarray
    covariances: CovarianceTrajectory
    innovations: np.ndarray
    innovation_covs: np.ndarray
    log_likelihood: float

    @property
    def covs_pred(self) -> np.ndarray:
        return self.covariances.predicted

    @property
    def covs_post(self) -> np.ndarray:
        return self.covariances.posterior


def run_filter(
    model: LinearModel, tilts, measurements, initial: FilterState | None = None
) -> FilterResult:
    """Alternate updates and predictions from the prior over a recorded sequence."""
    tilts = np.asarray(tilts, dtype=float).reshape(-1, 2)
    ys = np.asarray(measurements, dtype=float).reshape(-1, 2)
    if len(tilts) != len(ys):
        raise ValueError(
            f"tilts ({len(tilts)}) and measurements ({len(ys)}) differ in length"
        )
    n, d = len(tilts), model.dim
    A, Q, R = model.A, model.process_noise, model.measurement_noise
    state = initial if initial is not None else initial_state(model)
    x, P = state.mean.copy(), state.cov.copy()

    means_pred = np.empty((n, d))
    means_post = np.empty((n, d))
    covs_pred = np.empty((n, d, d))
    covs_post = np.empty((n, d, d))
    innovations = np.empty((n, 2))
    innov_covs = np.empty((n, 2, 2))
    loglik = 0.0
    Cs = model.observation(tilts)
    for k in range(n):
        means_pred[k] = x
        covs_pred[k] = P
        C = Cs[k]
        K, P, S, L = _joseph_update(P, C, R)
        nu = ys[k] - C @ x
        x = x + K @ nu
        z = scipy.linalg.solve_triangular(L, nu, lower=True)
        loglik -= LOG_2PI + np.log(np.diag(L)).sum() + 0.5 * z @ z
        innovations[k] = nu
        innov_covs[k] = S
        means_post[k] = x
        covs_post[k] = P
        x = A @ x
        P = symmetrize(A @ P @ A.T + Q)
    return FilterResult(
        tilts=tilts,
        measurements=ys,
        means_pred=means_pred,
        means_post=means_post,
        covariances=CovarianceTrajectory(covs_pred, covs_post),
        innovations=innovations,
        innovation_covs=innov_covs,
        log_likelihood=float(loglik),
    )


def covariance_trajectory(
    model: LinearModel, tilts, P0: np.ndarray | None = None
) -> CovarianceTrajectory:
    """Filter covariances for a tilt sequence; measurement values are not needed."""
    tilts = np.asarray(tilts, dtype=float).reshape(-1, 2)
    n, d = len(tilts), model.dim
    P = model.prior_cov.copy() if P0 is None else np.array(P0, dtype=float)
    pred = np.empty((n, d, d))
    post = np.empty((n, d, d))
    Cs = model.observation(tilts)
    for k in range(n):
        pred[k] = P
        P = _joseph_update(P, Cs[k], model.measurement_noise)[1]
        post[k] = P
        P = predict_covariance(P, model)
    return CovarianceTrajectory(pred, post)


@dataclass
class SmootherResult:
    means: np.ndarray
    covs: np.ndarray
    gains: np.ndarray


def rts_smooth(model: LinearModel, filt: FilterResult) -> SmootherResult:
    """Rauch-Tung-Striebel fixed-interval smoother over a filter run."""
    n = len(filt.means_post)
    means = filt.means_post.copy()
    covs = filt.covs_post.copy()
    gains = np.zeros((max(n - 1, 0), model.dim, model.dim))
    A = model.A
    for k in range(n - 2, -1, -1):
        P_f = filt.covs_post[k]
        P_p = filt.covs_pred[k + 1]
        # G = P_f A^T P_p^{-1}
        cho = scipy.linalg.cho_factor(P_p)
        G = scipy.linalg.cho_solve(cho, A @ P_f).T
        means[k] = filt.means_post[k] + G @ (means[k + 1] - filt.means_pred[k + 1])
        covs[k] = symmetrize(P_f + G @ (covs[k + 1] - P_p) @ G.T)
        gains[k] = G
    return SmootherResult(means, covs, gains)


def innovation_log_likelihood(model: LinearModel, tilts, measurements) -> float:
    """Gaussian log-likelihood of the measurements from the filter innovations."""
    if len(np.asarray(tilts).reshape(-1, 2)) == 0:
        if len(np.asarray(measurements).reshape(-1, 2)) != 0:
            raise ValueError("tilts and measurements differ in length")
        return 0.0
    return run_filter(model, tilts, measurements).log_likelihood


# --- batch N-step formulation ----------------------------------------------
#
# Two batch forms are provided.  ``batch_posterior_cov_lifted`` maps every
# measurement back to the final state through powers of A^{-1}; it ignores the
# process noise injected between a measurement and the final step and is exact
# only when that noise vanishes.  ``batch_posterior_cov`` uses the
# measurement-free state covariances Cov(x_i, x_j) instead and matches the
# recursive filter for any process noise.  Both reduce to the same expression
# when ``process_noise == 0``.


def batch_predicted_cov(
    model: LinearModel, n_steps: int, P0: np.ndarray | None = None
) -> np.ndarray:
    """``P_{N-1|-1}``: the prior pushed ``N - 1`` steps through the dynamics."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    P = model.prior_cov.copy() if P0 is None else np.array(P0, dtype=float)
    for _ in range(n_steps - 1):
        P = predict_covariance(P, model)
    return P


def prior_covariances(
    model: LinearModel, n_steps: int, P0: np.ndarray | None = None
) -> np.ndarray:
    """Measurement-free covariances ``Cov(x_k)`` for ``k = 0..n_steps-1``."""
    P = model.prior_cov.copy() if P0 is None else np.array(P0, dtype=float)
    out = np.empty((n_steps, model.dim, model.dim))
    for k in range(n_steps):
        out[k] = P
        P = predict_covariance(P, model)
    return out


def state_cross_covariances(
    model: LinearModel, n_steps: int, P0: np.ndarray | None = None
) -> np.ndarray:
    """``Gamma[i, j] = Cov(x_i, x_j)`` before any measurement, shape ``(n, n, d, d)``.

    For ``i >= j`` this is ``A^{i-j} Cov(x_j)``.
    """
    Pi = prior_covariances(model, n_steps, P0)
    d = model.dim
    gamma = np.empty((n_steps, n_steps, d, d))
    for j in range(n_steps):
        M = Pi[j]
        for i in range(j, n_steps):
            gamma[i, j] = M
            gamma[j, i] = M.T
            M = model.A @ M
    return gamma


def inverse_powers(model: LinearModel, n: int) -> np.ndarray:
    """``A^{-j}`` for ``j = 0..n-1`` by repeated solves against ``A``."""
    d = model.dim
    out = np.empty((n, d, d))
    if n == 0:
        return out
    out[0] = np.eye(d)
    lu = scipy.linalg.lu_factor(model.A)
    for j in range(1, n):
        out[j] = scipy.linalg.lu_solve(lu, out[j - 1])
    return out


def lifted_observation(model: LinearModel, tilts) -> np.ndarray:
    """Stack ``C(theta_i) A^{-(N-1-i)}`` into a ``(2N, d)`` matrix."""
    tilts = np.asarray(tilts, dtype=float).reshape(-1, 2)
    n = len(tilts)
    powers = inverse_powers(model, n)
    C = model.observation(tilts)
    blocks = np.einsum("nij,njk->nik", C, powers[::-1])
    return blocks.reshape(2 * n, model.dim)


def _posterior_from_joint(P_end, X, Sigma):
    try:
        cho = scipy.linalg.cho_factor(symmetrize(Sigma), lower=True)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedScheduleError(str(exc)) from None
    return symmetrize(P_end - X @ scipy.linalg.cho_solve(cho, X.T))


def batch_posterior_cov_lifted(
    model: LinearModel, tilts, P0: np.ndarray | None = None
) -> np.ndarray:
    """``P_{N-1|N-1}`` with measurements lifted to the final state by ``A^{-1}``.

    Uses ``Sigma = Cbar P Cbar^T + I_N kron Sigma_eps`` with ``P = P_{N-1|-1}``
    and ``Cbar`` from :func:`lifted_observation`.  Exact only for zero process
    noise; see :func:`batch_posterior_cov` for the general case.
    """
    tilts = np.asarray(tilts, dtype=float).reshape(-1, 2)
    n = len(tilts)
    P_minus = batch_predicted_cov(model, n, P0)
    Cbar = lifted_observation(model, tilts)
    X = P_minus @ Cbar.T
    Sigma = Cbar @ X + np.kron(np.eye(n), model.measurement_noise)
    return _posterior_from_joint(P_minus, X, Sigma)


def batch_joint_moments(
    model: LinearModel, tilts, P0: np.ndarray | None = None, gamma=None
):
    """Prior covariance of the final state, its cross-covariance with the stacked
    measurements ``X`` (``d x 2N``) and the stacked innovation covariance ``Sigma``."""
    tilts = np.asarray(tilts, dtype=float).reshape(-1, 2)
    n = len(tilts)
    if gamma is None:
        gamma = state_cross_covariances(model, n, P0)
    C = model.observation(tilts)
    # blocks C_i Cov(x_i, x_j) C_j^T
    T = np.einsum("ipd,ijde->ijpe", C, gamma)
    Sigma = np.einsum("ijpe,jqe->ipjq", T, C).reshape(2 * n, 2 * n)
    Sigma += np.kron(np.eye(n), model.measurement_noise)
    X = np.einsum("jde,jqe->djq", gamma[n - 1], C).reshape(model.dim, 2 * n)
    return gamma[n - 1, n - 1], X, Sigma


def batch_posterior_cov(
    model: LinearModel, tilts, P0: np.ndarray | None = None
) -> np.ndarray:
    """``P_{N-1|N-1}`` from all ``N`` measurements fused in one correction.

    The stacked measurements are correlated with the final state through
    ``X[:, j] = Cov(x_{N-1}, x_j) C(theta_j)^T`` and with each other through
    ``Sigma[i, j] = C(theta_i) Cov(x_i, x_j) C(theta_j)^T + delta_ij Sigma_eps``;
    the posterior is ``P_{N-1|-1} - X Sigma^{-1} X^T`` via a Cholesky solve.
    """
    tilts = np.asarray(tilts, dtype=float).reshape(-1, 2)
    if len(tilts) < 1:
        raise ValueError("need at least one tilt")
    return _posterior_from_joint(*batch_joint_moments(model, tilts, P0))
