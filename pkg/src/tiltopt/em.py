"""Expectation-maximization for the measurement-noise covariance.

Only the 2x2 measurement covariance is re-estimated; the transition, process
noise and prior of the model are held fixed.  Each iteration smooths the
recorded sequence under the current noise estimate (E-step) and then sets the
noise to the mean expected squared residual (M-step).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimation import LOG_2PI, SmootherResult, symmetrize
from .statespace import LinearModel

SCHEMA_VERSION = 1
DEFAULT_JITTER = 1e-12
# records smoothed together are capped by count and by stored-covariance bytes
_CHUNK = 24
_CHUNK_BYTES = 2e8


def _is_spd(mat) -> bool:
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (2, 2) or not np.all(np.isfinite(mat)):
        return False
    if not np.allclose(mat, mat.T):
        return False
    return bool(np.linalg.eigvalsh(symmetrize(mat)).min() > 0)


@dataclass
class EmSettings:
    max_iterations: int = 200
    log_likelihood_tolerance: float = 1e-8
    initializations: list = field(default_factory=list)
    jitter: float = DEFAULT_JITTER

    @classmethod
    def around(cls, guess, **kwargs) -> EmSettings:
        """Three initializations at 0.1x, 1x and 10x a rough guess."""
        guess = np.asarray(guess, dtype=float)
        return cls(initializations=[0.1 * guess, guess, 10.0 * guess], **kwargs)

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.log_likelihood_tolerance > 0:
            raise ValueError("log_likelihood_tolerance must be positive")
        if not self.initializations:
            raise ValueError("at least one initialization is required")
        for i, init in enumerate(self.initializations):
            if not _is_spd(init):
                raise ValueError(f"initialization {i} is not a 2x2 SPD matrix")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


@dataclass
class EmResult:
    """Selected estimate, its likelihood trace and per-initialization outcomes."""

    sigma_eps: np.ndarray
    log_likelihood_trace: np.ndarray
    chosen_init: int
    iterations: int
    converged: bool
    final_log_likelihoods: list = field(default_factory=list)
    discarded: list = field(default_factory=list)

    @property
    def log_likelihood(self) -> float:
        return float(self.log_likelihood_trace[-1])

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "sigma_eps": np.asarray(self.sigma_eps).tolist(),
            "log_likelihood_trace": np.asarray(self.log_likelihood_trace).tolist(),
            "chosen_init": self.chosen_init,
            "iterations": self.iterations,
            "converged": self.converged,
            "final_log_likelihoods": [
                None if v is None else float(v) for v in self.final_log_likelihoods
            ],
            "discarded": list(self.discarded),
        }

    @classmethod
    def from_dict(cls, data: dict) -> EmResult:
        return cls(
            sigma_eps=np.array(data["sigma_eps"], dtype=float),
            log_likelihood_trace=np.array(data["log_likelihood_trace"], dtype=float),
            chosen_init=int(data["chosen_init"]),
            iterations=int(data["iterations"]),
            converged=bool(data["converged"]),
            final_log_likelihoods=data.get("final_log_likelihoods", []),
            discarded=data.get("discarded", []),
        )

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> EmResult:
        return cls.from_dict(json.loads(Path(path).read_text()))


def em_mstep(model: LinearModel, tilts, measurements, smoothed: SmootherResult):
    """Mean over steps of ``r r^T + C P C^T`` with ``r = y - C x`` at smoothed moments."""
    tilts = np.asarray(tilts, dtype=float).reshape(-1, 2)
    ys = np.asarray(measurements, dtype=float).reshape(-1, 2)
    n = len(tilts)
    if n == 0:
        raise ValueError("em_mstep needs at least one step")
    if len(ys) != n or len(smoothed.means) != n:
        raise ValueError("tilts, measurements and smoothed output differ in length")
    C = model.observation(tilts)
    return _mstep(C[None], ys[None], smoothed.means[None], smoothed.covs[None])[0]


def _mstep(C, ys, means, covs):
    resid = ys - np.einsum("bkij,bkj->bki", C, means)
    outer = np.einsum("bki,bkj->bij", resid, resid)
    spread = np.einsum("bkij,bkjl,bkml->bim", C, covs, C)
    return symmetrize((outer + spread) / C.shape[1])


def _apply_floor(R, jitter):
    w, v = np.linalg.eigh(R)
    w = np.maximum(w, jitter)
    return symmetrize(np.einsum("bij,bj,bkj->bik", v, w, v))


def _batched_filter(model, C, ys, R, smooth=True):
    """Kalman filter (and RTS smoother) over B problems sharing A, Q and the prior.

    ``C`` is ``(B, N, 2, d)``, ``ys`` ``(B, N, 2)`` and ``R`` ``(B, 2, 2)``.
    Returns log-likelihoods ``(B,)`` and, if requested, smoothed means and
    covariances.  Problems whose innovation covariance fails to factor get a
    log-likelihood of ``-inf``.
    """
    B, n, _, d = C.shape
    A, Q = model.A, model.process_noise
    x = np.broadcast_to(model.prior_mean, (B, d)).copy()
    P = np.broadcast_to(model.prior_cov, (B, d, d)).copy()
    eye = np.eye(d)
    loglik = np.zeros(B)
    if smooth:
        m_pred = np.empty((B, n, d))
        m_post = np.empty((B, n, d))
        P_pred = np.empty((B, n, d, d))
        P_post = np.empty((B, n, d, d))
    for k in range(n):
        Ck = C[:, k]
        if smooth:
            m_pred[:, k] = x
            P_pred[:, k] = P
        PCt = P @ np.swapaxes(Ck, -1, -2)
        S = symmetrize(Ck @ PCt + R)
        det = S[:, 0, 0] * S[:, 1, 1] - S[:, 0, 1] * S[:, 1, 0]
        bad = ~(det > 0) | ~(S[:, 0, 0] > 0)
        if np.any(bad):
            loglik[bad] = -np.inf
            S[bad] = np.eye(2)
            det = np.where(bad, 1.0, det)
        Sinv = np.empty_like(S)
        Sinv[:, 0, 0] = S[:, 1, 1]
        Sinv[:, 1, 1] = S[:, 0, 0]
        Sinv[:, 0, 1] = -S[:, 0, 1]
        Sinv[:, 1, 0] = -S[:, 1, 0]
        Sinv /= det[:, None, None]
        K = PCt @ Sinv
        nu = ys[:, k] - np.einsum("bij,bj->bi", Ck, x)
        loglik -= LOG_2PI + 0.5 * np.log(det) + 0.5 * np.einsum(
            "bi,bij,bj->b", nu, Sinv, nu
        )
        x = x + np.einsum("bij,bj->bi", K, nu)
        IKC = eye - K @ Ck
        P = symmetrize(IKC @ P @ np.swapaxes(IKC, -1, -2) + K @ R @ np.swapaxes(K, -1, -2))
        if smooth:
            m_post[:, k] = x
            P_post[:, k] = P
        x = x @ A.T
        P = symmetrize(A @ P @ A.T + Q)
    if not smooth:
        return loglik, None, None
    means = m_post.copy()
    covs = P_post.copy()
    for k in range(n - 2, -1, -1):
        # G^T = P_pred^{-1} A P_post
        Gt = np.linalg.solve(P_pred[:, k + 1], A @ P_post[:, k])
        G = np.swapaxes(Gt, -1, -2)
        means[:, k] = m_post[:, k] + np.einsum(
            "bij,bj->bi", G, means[:, k + 1] - m_pred[:, k + 1]
        )
        covs[:, k] = symmetrize(P_post[:, k] + G @ (covs[:, k + 1] - P_pred[:, k + 1]) @ Gt)
    return loglik, means, covs


def _run_em(model, C, ys, groups, R0, settings):
    """EM for G problems in lock-step; finished problems stop updating.

    Row ``i`` of ``C`` and ``ys`` is one record belonging to problem
    ``groups[i]``.  Records of a problem share its noise estimate: their
    likelihoods add and the M-step averages over all their steps.
    """
    groups = np.asarray(groups)
    G = len(R0)
    R = _apply_floor(np.array(R0, dtype=float), settings.jitter)
    traces = [[] for _ in range(G)]
    active = np.ones(G, dtype=bool)
    converged = np.zeros(G, dtype=bool)
    failed = np.zeros(G, dtype=bool)
    iterations = np.zeros(G, dtype=int)

    def evaluate(idx, smooth):
        rows = np.flatnonzero(np.isin(groups, idx))
        g = groups[rows]
        ll, means, covs = _batched_filter(model, C[rows], ys[rows], R[g], smooth)
        ll_g = np.array([ll[g == i].sum() for i in idx])
        if not smooth:
            return ll_g, None
        parts = _mstep(C[rows], ys[rows], means, covs)
        R_g = np.array([parts[g == i].mean(axis=0) for i in idx])
        return ll_g, _apply_floor(R_g, settings.jitter)

    for _ in range(settings.max_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ll, R_new = evaluate(idx, True)
        for j, b in enumerate(idx):
            traces[b].append(float(ll[j]))
            if not np.isfinite(ll[j]) or not np.all(np.isfinite(R_new[j])):
                failed[b] = True
                active[b] = False
                continue
            iterations[b] += 1
            if len(traces[b]) >= 2 and abs(traces[b][-1] - traces[b][-2]) <= (
                settings.log_likelihood_tolerance
            ):
                # converged at the current estimate; keep it
                converged[b] = True
                active[b] = False
                continue
            R[b] = R_new[j]
    # likelihood at the final estimate of problems stopped by the iteration cap
    idx = np.flatnonzero(active)
    if idx.size:
        ll, _ = evaluate(idx, False)
        for j, b in enumerate(idx):
            traces[b].append(float(ll[j]))
            if not np.isfinite(ll[j]):
                failed[b] = True
    return R, traces, iterations, converged, failed


def _select(R, traces, iterations, converged, failed, n_init) -> EmResult:
    finals = [None if failed[i] else traces[i][-1] for i in range(n_init)]
    ok = [i for i in range(n_init) if finals[i] is not None]
    if not ok:
        raise FloatingPointError("every EM initialization diverged")
    best = max(ok, key=lambda i: (finals[i], -i))
    return EmResult(
        sigma_eps=R[best].copy(),
        log_likelihood_trace=np.array(traces[best]),
        chosen_init=int(best),
        iterations=int(iterations[best]),
        converged=bool(converged[best]),
        final_log_likelihoods=finals,
        discarded=[i for i in range(n_init) if failed[i]],
    )


def _prepare(model, tilts, measurements):
    tilts = np.asarray(tilts, dtype=float).reshape(-1, 2)
    ys = np.asarray(measurements, dtype=float).reshape(-1, 2)
    if len(tilts) != len(ys):
        raise ValueError("tilts and measurements differ in length")
    if len(tilts) == 0:
        raise ValueError("EM needs at least one step")
    return model.observation(tilts), ys


def em_fit(model: LinearModel, tilts, measurements, settings: EmSettings) -> EmResult:
    """Fit the measurement-noise covariance, keeping the most likely initialization.

    The log-likelihood trace holds the innovation log-likelihood at every
    iterate, starting from the initialization.  An initialization whose
    likelihood becomes non-finite is discarded and listed in ``discarded``.
    """
    return em_fit_records(model, [tilts], [measurements], settings)


def em_fit_records(
    model: LinearModel, tilt_sets, measurement_sets, settings: EmSettings
) -> EmResult:
    """One noise covariance shared by several records of equal length."""
    return _fit(tilt_sets, measurement_sets, model, settings, True)[0]


def em_fit_batch(
    model: LinearModel, tilt_sets, measurement_sets, settings: EmSettings
) -> list[EmResult]:
    """:func:`em_fit` on several records independently, run together for speed.

    All records must have the same length.
    """
    return _fit(tilt_sets, measurement_sets, model, settings, False)


def _fit(tilt_sets, measurement_sets, model, settings, pooled):
    settings.validate()
    if len(tilt_sets) != len(measurement_sets):
        raise ValueError("tilt_sets and measurement_sets differ in length")
    if len(tilt_sets) == 0:
        raise ValueError("at least one record is required")
    prepared = [_prepare(model, t, y) for t, y in zip(tilt_sets, measurement_sets)]
    if len({len(y) for _, y in prepared}) > 1:
        raise ValueError("all records must have the same length")
    n_init = len(settings.initializations)
    inits = np.array(settings.initializations, dtype=float)
    # a problem is (record set, initialization); pooled fits have one record set
    record_sets = [list(range(len(prepared)))] if pooled else [[r] for r in range(len(prepared))]
    problems = [(rs, i) for rs in record_sets for i in range(n_init)]
    n_steps, d = prepared[0][0].shape[0], model.dim
    rows_fit = int(min(_CHUNK, _CHUNK_BYTES // (16 * n_steps * d * d)))
    per_chunk = max(1, rows_fit // len(record_sets[0]))
    out_R = np.empty((len(problems), 2, 2))
    out_tr, out_it, out_cv, out_fl = [], [], [], []
    for start in range(0, len(problems), per_chunk):
        chunk = problems[start : start + per_chunk]
        rows = [(g, r) for g, (rs, _) in enumerate(chunk) for r in rs]
        C = np.stack([prepared[r][0] for _, r in rows])
        ys = np.stack([prepared[r][1] for _, r in rows])
        groups = [g for g, _ in rows]
        R0 = inits[[i for _, i in chunk]]
        R, tr, it, cv, fl = _run_em(model, C, ys, groups, R0, settings)
        out_R[start : start + len(chunk)] = R
        out_tr += tr
        out_it += list(it)
        out_cv += list(cv)
        out_fl += list(fl)
    results = []
    for k in range(len(record_sets)):
        sl = slice(k * n_init, (k + 1) * n_init)
        results.append(
            _select(out_R[sl], out_tr[sl], out_it[sl], out_cv[sl], out_fl[sl], n_init)
        )
    return results
