"""A-optimal tilt sequence design.

The cost of a tilt sequence is the weighted trace ``tr(W P_{N-1|N-1})`` of the
final posterior covariance.  It does not depend on measured values, so
sequences are designed offline with projected gradient descent in polar
coordinates, many random starts, and a receding horizon.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimation import (
    IllConditionedScheduleError,
    batch_joint_moments,
    covariance_trajectory,
    predict_covariance,
    state_cross_covariances,
    symmetrize,
    update_covariance,
)
from .statespace import LinearModel, make_rng, spawn_seeds

SCHEMA_VERSION = 1
FEASIBILITY_SLACK = 1e-12
_POLAR_SINGULAR_RADIUS = 1e-9


@dataclass
class TiltSequence:
    """Ordered tilts ``(N, 2)`` in radians with per-step magnitude limits ``(N,)``."""

    tilts: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        self.tilts = np.asarray(self.tilts, dtype=float).reshape(-1, 2)
        self.bounds = np.broadcast_to(
            np.asarray(self.bounds, dtype=float), (len(self.tilts),)
        ).copy()

    def __len__(self) -> int:
        return len(self.tilts)

    @property
    def magnitudes(self) -> np.ndarray:
        return np.hypot(self.tilts[:, 0], self.tilts[:, 1])

    def is_feasible(self, slack: float = FEASIBILITY_SLACK) -> bool:
        return bool(np.all(self.magnitudes <= self.bounds + slack))

    def prefix(self, n: int) -> TiltSequence:
        return TiltSequence(self.tilts[:n], self.bounds[:n])

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tilts": self.tilts.tolist(),
            "bounds": self.bounds.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> TiltSequence:
        return cls(np.array(data["tilts"], dtype=float), np.array(data["bounds"]))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "tx", "ty", "bound"])
            for k, ((tx, ty), b) in enumerate(zip(self.tilts, self.bounds)):
                writer.writerow([k, repr(float(tx)), repr(float(ty)), repr(float(b))])

    @classmethod
    def from_csv(cls, path) -> TiltSequence:
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        tilts = np.array([[float(r["tx"]), float(r["ty"])] for r in rows])
        return cls(tilts.reshape(-1, 2), np.array([float(r["bound"]) for r in rows]))


def to_polar(tilts) -> tuple[np.ndarray, np.ndarray]:
    """Magnitudes and angles in ``[0, 2 pi)``; the angle of a zero tilt is 0."""
    tilts = np.asarray(tilts, dtype=float)
    r = np.hypot(tilts[..., 0], tilts[..., 1])
    psi = np.mod(np.arctan2(tilts[..., 1], tilts[..., 0]), 2 * np.pi)
    psi = np.where(r > 0, psi, 0.0)
    return r, psi


def from_polar(r, psi) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    psi = np.asarray(psi, dtype=float)
    return np.stack([r * np.cos(psi), r * np.sin(psi)], axis=-1)


# --- objective ---------------------------------------------------------------


@dataclass
class _Horizon:
    gamma: np.ndarray  # Cov(x_i, x_j), (h, h, d, d)
    P_end: np.ndarray
    base_cost: float
    # blocks restricted to the observed columns ``obs`` of C:
    # obs_rows[i] = [Cov(x_i, x_j)[obs, obs] for j], laid out (n_obs, h * n_obs)
    obs_rows: np.ndarray
    # to_end[j] = Cov(x_j, x_end)[obs, :]
    to_end: np.ndarray
    # from_end[k] = Cov(x_end, x_k)[:, obs]
    from_end: np.ndarray


class ScheduleObjective:
    """``tr(W P_{h-1|h-1})`` for ``h``-step sequences started from ``prior_cov``.

    ``prior_cov`` plays the role of ``P_{k|k-1}`` at the first step of the
    sequence and defaults to the model prior.
    """

    def __init__(self, model: LinearModel, weight=None, prior_cov=None):
        self.model = model
        d = model.dim
        W = np.eye(d) / d if weight is None else np.asarray(weight, dtype=float)
        if W.shape != (d, d):
            raise ValueError(f"weight must be {d}x{d}")
        if not np.allclose(W, W.T) or np.linalg.eigvalsh(symmetrize(W)).min() < -1e-12:
            raise ValueError("weight must be symmetric positive semi-definite")
        self.weight = symmetrize(W)
        self.prior_cov = (
            model.prior_cov.copy() if prior_cov is None else np.array(prior_cov, float)
        )
        self._horizons: dict[int, _Horizon] = {}
        E = model._observation_tensor.reshape(-1, 2, model.dim)
        self.observed = np.flatnonzero(np.any(E != 0, axis=(0, 1)))

    def horizon(self, h: int) -> _Horizon:
        if h not in self._horizons:
            gamma = state_cross_covariances(self.model, h, self.prior_cov)
            P_end = gamma[h - 1, h - 1]
            obs = self.observed
            g_oo = gamma[:, :, obs][:, :, :, obs]  # (h, h, n, n)
            n = len(obs)
            obs_rows = g_oo.transpose(0, 2, 1, 3).reshape(h, n, h * n)
            to_end = gamma[:, h - 1][:, obs, :]
            from_end = gamma[h - 1][:, :, obs]
            self._horizons[h] = _Horizon(
                gamma,
                P_end,
                float(np.sum(self.weight * P_end)),
                np.ascontiguousarray(obs_rows),
                np.ascontiguousarray(to_end),
                np.ascontiguousarray(from_end),
            )
        return self._horizons[h]

    # batched evaluation over leading axis B: thetas (B, h, 2)

    def _moments(self, thetas):
        B, h = thetas.shape[:2]
        hz = self.horizon(h)
        obs = self.observed
        n = len(obs)
        C = self.model.observation(thetas)[..., obs]  # (B, h, 2, n)
        # T[b, i, j] = C_i Cov(x_i, x_j) on observed columns, one product per i
        T = np.empty((B, h, h, 2, n))
        Xt = np.empty((B, h, 2, self.model.dim))
        for i in range(h):
            rows = C[:, i].reshape(B * 2, n)
            T[:, i] = (rows @ hz.obs_rows[i]).reshape(B, 2, h, n).transpose(0, 2, 1, 3)
            Xt[:, i] = (rows @ hz.to_end[i]).reshape(B, 2, -1)
        S = np.matmul(T, np.swapaxes(C, -1, -2)[:, None])  # (B, h, h, 2, 2)
        Sigma = S.transpose(0, 1, 3, 2, 4).reshape(B, 2 * h, 2 * h)
        Sigma = Sigma + np.kron(np.eye(h), self.model.measurement_noise)
        return hz, C, T, Sigma, Xt.reshape(B, 2 * h, -1)

    def batch_cost(self, thetas) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=float)
        hz, _, _, Sigma, Xt = self._moments(thetas)
        V = _spd_solve(Sigma, Xt)
        XV = np.matmul(np.swapaxes(Xt, -1, -2), V)  # X Sigma^-1 X^T
        return hz.base_cost - np.einsum("ij,bji->b", self.weight, XV)

    def batch_cost_and_gradient(self, thetas) -> tuple[np.ndarray, np.ndarray]:
        """Costs ``(B,)`` and gradients ``(B, h, 2)`` with respect to ``(tx, ty)``."""
        thetas = np.asarray(thetas, dtype=float)
        B, h = thetas.shape[:2]
        hz, C, T, Sigma, Xt = self._moments(thetas)
        W = self.weight
        V = _spd_solve(Sigma, Xt)  # Sigma^-1 X^T, (B, 2h, d)
        XV = np.matmul(np.swapaxes(Xt, -1, -2), V)
        cost = hz.base_cost - np.einsum("ij,bji->b", W, XV)

        VW = V @ W
        M = np.matmul(VW, np.swapaxes(V, -1, -2))  # V W V^T, (B, 2h, 2h)
        # d cost / d C_k = -2 V_k W Cov(x_end, x_k) + 2 sum_j M_kj C_j Cov(x_j, x_k)
        term1 = np.matmul(VW.reshape(B, h, 2, -1), hz.from_end[None])
        Tk = T.transpose(0, 2, 1, 3, 4).reshape(B, h, 2 * h, -1)
        term2 = np.matmul(M.reshape(B, h, 2, 2 * h), Tk)
        G = 2.0 * (term2 - term1)  # observed columns only
        obs = self.observed
        d_tx, d_ty = (g[..., obs] for g in self.model.observation_gradient(thetas))
        grad = np.stack(
            [np.sum(d_tx * G, axis=(-2, -1)), np.sum(d_ty * G, axis=(-2, -1))], axis=-1
        )
        return cost, grad


def _spd_solve(Sigma, rhs):
    try:
        return np.linalg.solve(Sigma, rhs)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedScheduleError(str(exc)) from None


def _tilts_of(tilts) -> np.ndarray:
    if isinstance(tilts, TiltSequence):
        return tilts.tilts
    return np.asarray(tilts, dtype=float).reshape(-1, 2)


def schedule_cost(objective: ScheduleObjective, tilts) -> float:
    """Weighted trace of the batch posterior covariance after the whole sequence."""
    theta = _tilts_of(tilts)
    P_end, X, Sigma = batch_joint_moments(
        objective.model, theta, objective.prior_cov, objective.horizon(len(theta)).gamma
    )
    V = np.linalg.solve(_checked(Sigma), X.T)
    return float(np.sum(objective.weight * symmetrize(P_end - X @ V)))


def _checked(Sigma):
    try:
        np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedScheduleError(str(exc)) from None
    return Sigma


def schedule_gradient(objective: ScheduleObjective, tilts) -> np.ndarray:
    """Gradient of :func:`schedule_cost`, ordered ``(tx_0, ty_0, tx_1, ...)``.

    Evaluated one scalar tilt component ``p`` at a time: only row-block ``k``
    of the stacked observation changes, giving ``dX`` and ``dSigma``, and

        dP/dp = -(dX S^-1 X^T + X S^-1 dX^T - X S^-1 dSigma S^-1 X^T).

    With ``V = S^-1 X^T`` the weighted trace of the middle term only needs
    block row ``k`` of ``dSigma``.
    """
    theta = _tilts_of(tilts)
    model = objective.model
    n = len(theta)
    gamma = objective.horizon(n).gamma
    _, X, Sigma = batch_joint_moments(model, theta, objective.prior_cov, gamma)
    V = np.linalg.solve(_checked(Sigma), X.T).reshape(n, 2, -1)
    C = model.observation(theta)
    dCs = model.observation_gradient(theta)
    W = objective.weight
    VW = V @ W  # (n, 2, d)
    grad = np.zeros(2 * n)
    for k in range(n):
        # U[j] = gamma[k, j] C_j^T V_j, so block row k of dSigma enters as dC U
        U = np.einsum("jab,jcb,jce->ae", gamma[k], C, VW)
        for p in range(2):
            dC = dCs[p][k]
            # tr(W dX V) with dX = gamma[end, k] dC^T in columns of step k
            t_x = np.sum((gamma[n - 1, k] @ dC.T) * VW[k].T)
            # tr(W V^T dSigma V) = 2 tr(V_k^T dC U)
            t_s = np.sum(V[k] * (dC @ U))
            grad[2 * k + p] = -2.0 * t_x + 2.0 * t_s
    return grad


# --- local solver ------------------------------------------------------------


@dataclass
class SolverSettings:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-8
    relative_tolerance: float = 1e-10
    initial_step: float = 1.0
    backtrack_factor: float = 0.5
    sufficient_decrease: float = 1e-4
    max_backtracks: int = 40
    min_step: float = 1e-10
    max_step: float = 1e10


@dataclass
class ScheduleResult:
    """Designed sequence, its per-step ``tr(W P_{k|k})`` and optimizer diagnostics."""

    sequence: TiltSequence
    cost: float
    cost_trajectory: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "sequence": self.sequence.to_dict(),
            "cost": self.cost,
            "cost_trajectory": np.asarray(self.cost_trajectory).tolist(),
            "diagnostics": _jsonable(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, data: dict) -> ScheduleResult:
        return cls(
            TiltSequence.from_dict(data["sequence"]),
            float(data["cost"]),
            np.asarray(data["cost_trajectory"], dtype=float),
            data.get("diagnostics", {}),
        )

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> ScheduleResult:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class _BatchOutcome:
    tilts: np.ndarray
    costs: np.ndarray
    initial_costs: np.ndarray
    iterations: np.ndarray
    gradient_norms: np.ndarray
    converged: np.ndarray
    history: list


def _polar_gradient(grad, u, psi, bounds):
    """Chain rule from ``(tx, ty)`` to normalized radius ``u = r / bound`` and ``psi``.

    Near ``r = 0`` the angle is turned to the steepest Cartesian descent
    direction, where the angular derivative vanishes.
    """
    gx, gy = grad[..., 0], grad[..., 1]
    r = u * bounds
    small = r < _POLAR_SINGULAR_RADIUS
    psi = np.where(small & (np.hypot(gx, gy) > 0), np.arctan2(-gy, -gx), psi)
    c, s = np.cos(psi), np.sin(psi)
    g_u = bounds * (gx * c + gy * s)
    g_psi = np.where(small, 0.0, r * (-gx * s + gy * c))
    return g_u, g_psi, psi


def _solve_batch(
    objective: ScheduleObjective,
    u0: np.ndarray,
    psi0: np.ndarray,
    bounds: np.ndarray,
    settings: SolverSettings,
    track: int | None = None,
) -> _BatchOutcome:
    """Projected gradient with Armijo backtracking on ``(u, psi)`` for B starts.

    The first trial step of every iteration after the first is the
    Barzilai-Borwein estimate ``s.s / s.y`` from the previous move, clipped to
    ``[min_step, max_step]``.  The tilt-dependence of the cost is weak, so a
    fixed unit trial step leaves the solver crawling along the gradient.
    """
    u = np.clip(np.array(u0, dtype=float), 0.0, 1.0)
    psi = np.mod(np.array(psi0, dtype=float), 2 * np.pi)
    B = u.shape[0]
    f, grad = objective.batch_cost_and_gradient(from_polar(u * bounds, psi))
    f0 = f.copy()
    iterations = np.zeros(B, dtype=int)
    gnorm = np.full(B, np.inf)
    converged = np.zeros(B, dtype=bool)
    active = np.ones(B, dtype=bool)
    trial = np.full(B, settings.initial_step)
    prev_g = None
    history = [float(f[track])] if track is not None else []
    s = settings

    for _ in range(s.max_iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ua, fa = u[idx], f[idx]
        g_u, g_psi, pa = _polar_gradient(grad[idx], ua, psi[idx], bounds)
        pg_u = ua - np.clip(ua - g_u, 0.0, 1.0)
        pg = np.sqrt(np.sum(pg_u**2 + g_psi**2, axis=1))
        gnorm[idx] = pg
        done = pg <= s.gradient_tolerance
        converged[idx[done]] = True
        active[idx[done]] = False
        keep = ~done
        idx, ua, pa, fa = idx[keep], ua[keep], pa[keep], fa[keep]
        g_u, g_psi = g_u[keep], g_psi[keep]
        if idx.size == 0:
            break
        if prev_g is not None:
            # spectral step from the last accepted move of each start
            su, sp, yu, yp = prev_g
            sy = np.sum(su[idx] * (g_u - yu[idx]) + sp[idx] * (g_psi - yp[idx]), axis=1)
            ss = np.sum(su[idx] ** 2 + sp[idx] ** 2, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                bb = np.where(sy > 0, ss / sy, s.max_step)
            trial[idx] = np.clip(bb, s.min_step, s.max_step)

        step = trial[idx].copy()
        new_u = np.empty_like(ua)
        new_psi = np.empty_like(pa)
        new_f = np.full(idx.size, np.nan)
        pending = np.ones(idx.size, dtype=bool)
        for _ in range(s.max_backtracks):
            j = np.flatnonzero(pending)
            if j.size == 0:
                break
            cu = np.clip(ua[j] - step[j, None] * g_u[j], 0.0, 1.0)
            dpsi = -step[j, None] * g_psi[j]
            cp = pa[j] + dpsi
            cf = objective.batch_cost(from_polar(cu * bounds, cp))
            decrease = np.sum(g_u[j] * (cu - ua[j]) + g_psi[j] * dpsi, axis=1)
            ok = cf <= fa[j] + s.sufficient_decrease * decrease
            jo = j[ok]
            new_u[jo], new_psi[jo], new_f[jo] = cu[ok], cp[ok], cf[ok]
            pending[jo] = False
            step[j[~ok]] *= s.backtrack_factor
        # a start whose line search fails is stationary to working precision
        stalled = pending
        converged[idx[stalled]] = True
        active[idx[stalled]] = False
        moved = ~stalled
        im = idx[moved]
        if prev_g is None:
            prev_g = tuple(np.zeros_like(u) for _ in range(4))
        su, sp, yu, yp = prev_g
        su[im] = new_u[moved] - ua[moved]
        sp[im] = new_psi[moved] - pa[moved]
        yu[im] = g_u[moved]
        yp[im] = g_psi[moved]
        u[im] = new_u[moved]
        psi[im] = np.mod(new_psi[moved], 2 * np.pi)
        rel = (fa[moved] - new_f[moved]) <= s.relative_tolerance * np.abs(fa[moved])
        f[im] = new_f[moved]
        iterations[im] += 1
        converged[im[rel]] = True
        active[im[rel]] = False
        cont = im[~rel]
        if cont.size:
            _, grad[cont] = objective.batch_cost_and_gradient(
                from_polar(u[cont] * bounds, psi[cont])
            )
        if track is not None:
            history.append(float(f[track]))

    tilts = from_polar(u * bounds, psi)
    return _BatchOutcome(tilts, f, f0, iterations, gnorm, converged, history)


def _as_polar_start(seq, bounds):
    theta = _tilts_of(seq)
    r, psi = to_polar(theta)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(bounds > 0, r / bounds, 0.0)
    return np.clip(u, 0.0, 1.0), psi


def _result_from(objective, tilts, bounds, diagnostics) -> ScheduleResult:
    traj = covariance_trajectory(objective.model, tilts, objective.prior_cov)
    costs = traj.weighted_trace(objective.weight)
    seq = TiltSequence(tilts, bounds)
    return ScheduleResult(seq, float(costs[-1]), costs, diagnostics)


def solve_local(
    objective: ScheduleObjective,
    initial: TiltSequence,
    settings: SolverSettings | None = None,
) -> ScheduleResult:
    """Descend from one feasible start; never returns a worse cost than the start."""
    settings = settings or SolverSettings()
    bounds = initial.bounds
    if not initial.is_feasible():
        raise ValueError("initial sequence violates its tilt bounds")
    u, psi = _as_polar_start(initial, bounds)
    out = _solve_batch(objective, u[None], psi[None], bounds, settings, track=0)
    tilts = out.tilts[0]
    if out.costs[0] > out.initial_costs[0]:
        tilts = initial.tilts
    diag = {
        "starts": 1,
        "best_start": 0,
        "iterations": int(out.iterations[0]),
        "gradient_norm": float(out.gradient_norms[0]),
        "converged": bool(out.converged[0]),
        "initial_cost": float(out.initial_costs[0]),
        "optimizer_costs": out.history,
    }
    return _result_from(objective, tilts, bounds, diag)


def random_starts(bounds, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Normalized radii uniform on ``[0, 1]`` and angles uniform on ``[0, 2 pi)``."""
    h = len(bounds)
    return rng.uniform(0.0, 1.0, (n, h)), rng.uniform(0.0, 2 * np.pi, (n, h))


def optimize_horizon(
    objective: ScheduleObjective,
    bounds,
    n_starts: int = 1000,
    warm_starts=(),
    seed=None,
    settings: SolverSettings | None = None,
) -> ScheduleResult:
    """Best local solution over warm starts followed by random feasible starts.

    Ties in cost go to the lowest start index.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    settings = settings or SolverSettings()
    bounds = np.asarray(bounds, dtype=float)
    rng = make_rng(seed)
    warm = [_as_polar_start(w, bounds) for w in list(warm_starts)[:n_starts]]
    n_random = n_starts - len(warm)
    ur, pr = random_starts(bounds, n_random, rng)
    u0 = np.concatenate([np.array([w[0] for w in warm]).reshape(-1, len(bounds)), ur])
    p0 = np.concatenate([np.array([w[1] for w in warm]).reshape(-1, len(bounds)), pr])
    out = _solve_batch(objective, u0, p0, bounds, settings)
    best = int(np.argmin(out.costs))
    order = np.argsort(out.costs, kind="stable")
    diag = {
        "starts": int(n_starts),
        "warm_starts": len(warm),
        "best_start": best,
        "best_cost": float(out.costs[best]),
        "iterations": int(out.iterations[best]),
        "total_iterations": int(out.iterations.sum()),
        "gradient_norm": float(out.gradient_norms[best]),
        "converged": bool(out.converged[best]),
        "converged_fraction": float(out.converged.mean()),
    }
    res = _result_from(objective, out.tilts[best], bounds, diag)
    res.diagnostics["ranked_solutions"] = out.tilts[order[: min(10, len(order))]]
    return res


def _shift_warm_start(tilts: np.ndarray, h: int) -> np.ndarray:
    shifted = np.concatenate([tilts[1:], tilts[-1:]], axis=0)
    return shifted[:h]


def receding_horizon(
    model: LinearModel,
    weight,
    bounds,
    horizon: int,
    n_starts: int = 1000,
    n_warm: int = 100,
    seed=None,
    settings: SolverSettings | None = None,
    warm_spread: tuple[float, float] = (0.1, 0.3),
) -> ScheduleResult:
    """Design an ``N = len(bounds)`` step sequence one committed tilt at a time.

    At step ``k`` the ``min(horizon, N - k)``-step problem is solved from
    ``P_{k|k-1}``; its first tilt is kept and the covariance advanced through
    one update and one prediction.  From ``k = 1`` the previous best solution,
    shifted by one step with its last tilt repeated, seeds ``n_warm`` of the
    starts together with random perturbations of it (normalized radius and
    angle spread given by ``warm_spread``).
    """
    bounds = np.asarray(bounds, dtype=float)
    N = len(bounds)
    if not 1 <= horizon <= N:
        raise ValueError("horizon must satisfy 1 <= horizon <= N")
    settings = settings or SolverSettings()
    W = np.eye(model.dim) / model.dim if weight is None else np.asarray(weight, float)
    seeds = spawn_seeds(seed, N)
    P = model.prior_cov.copy()
    committed = np.zeros((N, 2))
    cost_traj = np.zeros(N)
    previous = None
    per_step = []
    for k in range(N):
        h = min(horizon, N - k)
        hb = bounds[k : k + h]
        objective = ScheduleObjective(model, W, P)
        rng = make_rng(seeds[k])
        warm = []
        if previous is not None and n_warm > 0:
            base = _shift_warm_start(previous, h)
            u, psi = _as_polar_start(base, hb)
            warm.append(from_polar(u * hb, psi))
            for _ in range(min(n_warm, n_starts) - 1):
                du = warm_spread[0] * rng.standard_normal(h)
                dp = warm_spread[1] * rng.standard_normal(h)
                warm.append(from_polar(np.clip(u + du, 0.0, 1.0) * hb, psi + dp))
        res = optimize_horizon(objective, hb, n_starts, warm, rng, settings)
        previous = res.sequence.tilts
        committed[k] = previous[0]
        P = update_covariance(P, model, committed[k])
        cost_traj[k] = float(np.sum(W * P))
        P = predict_covariance(P, model)
        per_step.append(
            {
                "k": k,
                "horizon": h,
                "best_start": res.diagnostics["best_start"],
                "horizon_cost": res.cost,
                "iterations": res.diagnostics["iterations"],
                "gradient_norm": res.diagnostics["gradient_norm"],
            }
        )
    diag = {
        "method": "receding_horizon",
        "horizon": horizon,
        "starts": n_starts,
        "warm_starts": n_warm,
        "steps": per_step,
    }
    return ScheduleResult(TiltSequence(committed, bounds), cost_traj[-1], cost_traj, diag)


# --- baseline patterns -------------------------------------------------------


def lissajous_pattern(n_steps: int, ratio_a: int, ratio_b: int, bounds) -> TiltSequence:
    """``bound_k * (sin(2 pi a k / N), sin(2 pi b k / N + pi / 2))``.

    Points outside the disk of radius ``bound_k`` are pulled radially onto it.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    bounds = np.broadcast_to(np.asarray(bounds, dtype=float), (n_steps,))
    k = np.arange(n_steps)
    raw = np.stack(
        [
            np.sin(2 * np.pi * ratio_a * k / n_steps),
            np.sin(2 * np.pi * ratio_b * k / n_steps + np.pi / 2),
        ],
        axis=-1,
    )
    norm = np.hypot(raw[:, 0], raw[:, 1])
    raw = raw / np.maximum(norm, 1.0)[:, None]
    return TiltSequence(raw * bounds[:, None], bounds)


def random_pattern(n_steps: int, bounds, seed=None) -> TiltSequence:
    """Independent tilts uniform over each disk of radius ``bound_k``."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    bounds = np.broadcast_to(np.asarray(bounds, dtype=float), (n_steps,))
    rng = make_rng(seed)
    r = bounds * np.sqrt(rng.uniform(size=n_steps))
    psi = rng.uniform(0.0, 2 * np.pi, n_steps)
    return TiltSequence(from_polar(r, psi), bounds)


def sequence_cost_trajectory(model: LinearModel, weight, tilts) -> np.ndarray:
    """``tr(W P_{k|k})`` along a sequence started from the model prior."""
    W = np.eye(model.dim) / model.dim if weight is None else np.asarray(weight, float)
    return covariance_trajectory(model, _tilts_of(tilts)).weighted_trace(W)
