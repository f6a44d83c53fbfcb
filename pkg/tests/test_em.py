import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tiltopt.em import (
    EmResult,
    EmSettings,
    _apply_floor,
    _batched_filter,
    em_fit,
    em_fit_batch,
    em_fit_records,
    em_mstep,
)
from tiltopt.estimation import SmootherResult, innovation_log_likelihood, rts_smooth, run_filter
from tiltopt.schedule import random_pattern
from tiltopt.statespace import ramp_bounds, simulate_trajectory

from conftest import small_model

TRUE_NOISE = np.array([[0.09, 0.02], [0.02, 0.05]])


def rel_err(est, truth):
    return np.linalg.norm(est - truth) / np.linalg.norm(truth)


def synthetic(model, n, seed):
    tilts = random_pattern(n, ramp_bounds(n), seed=seed).tilts
    _, ys = simulate_trajectory(model, tilts, seed=seed + 10_000)
    return tilts, ys


@pytest.fixture(scope="module")
def model():
    return small_model(4, 2).with_measurement_noise(TRUE_NOISE)


class TestMStep:
    def test_perfect_fit_is_zero(self, model):
        tilts = random_pattern(5, ramp_bounds(5), seed=0).tilts
        x = np.random.default_rng(0).normal(size=(5, model.dim))
        ys = np.einsum("kij,kj->ki", model.observation(tilts), x)
        sm = SmootherResult(x, np.zeros((5, model.dim, model.dim)), np.zeros((4, model.dim, model.dim)))
        np.testing.assert_allclose(em_mstep(model, tilts, ys, sm), 0.0, atol=1e-15)

    def test_residual_equals_measurement(self, model):
        y = np.array([[0.3, -0.7]])
        sm = SmootherResult(np.zeros((1, model.dim)), np.zeros((1, model.dim, model.dim)), np.zeros((0,)))
        np.testing.assert_allclose(em_mstep(model, np.zeros((1, 2)), y, sm), np.outer(y[0], y[0]))

    def test_matches_direct_sum(self, model):
        tilts, ys = synthetic(model, 30, 1)
        sm = rts_smooth(model, run_filter(model, tilts, ys))
        want = np.zeros((2, 2))
        for k in range(30):
            C = model.observation(tilts[k])
            r = ys[k] - C @ sm.means[k]
            want += np.outer(r, r) + C @ sm.covs[k] @ C.T
        np.testing.assert_allclose(em_mstep(model, tilts, ys, sm), want / 30, rtol=1e-12)

    def test_empty_rejected(self, model):
        sm = SmootherResult(np.zeros((0, model.dim)), np.zeros((0, model.dim, model.dim)), np.zeros(0))
        with pytest.raises(ValueError):
            em_mstep(model, np.zeros((0, 2)), np.zeros((0, 2)), sm)


class TestBatchedFilter:
    def test_matches_reference(self, model):
        sets = [synthetic(model, 25, s) for s in range(3)]
        C = np.stack([model.observation(t) for t, _ in sets])
        ys = np.stack([y for _, y in sets])
        R = np.stack([TRUE_NOISE, 2 * TRUE_NOISE, 0.5 * np.eye(2)])
        ll, means, covs = _batched_filter(model, C, ys, R)
        for b, (t, y) in enumerate(sets):
            m = model.with_measurement_noise(R[b])
            sm = rts_smooth(m, run_filter(m, t, y))
            assert ll[b] == pytest.approx(innovation_log_likelihood(m, t, y), rel=1e-11)
            np.testing.assert_allclose(means[b], sm.means, atol=1e-9)
            np.testing.assert_allclose(covs[b], sm.covs, atol=1e-9)

    def test_singular_innovation_gives_minus_inf(self):
        m = small_model(1, 0, process_noise_diag=np.zeros(3))
        m = m.with_prior(cov=np.zeros((3, 3)))
        C = m.observation(np.zeros((1, 2, 2)))
        ll, _, _ = _batched_filter(m, C, np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), smooth=False)
        assert ll[0] == -np.inf


class TestSettings:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"max_iterations": 0},
            {"log_likelihood_tolerance": 0.0},
            {"initializations": []},
            {"initializations": [-np.eye(2)]},
            {"initializations": [np.array([[1.0, 2.0], [0.0, 1.0]])]},
            {"jitter": -1.0},
        ],
    )
    def test_invalid(self, kwargs):
        base = {"initializations": [np.eye(2)]}
        base.update(kwargs)
        with pytest.raises(ValueError):
            EmSettings(**base).validate()

    def test_around(self):
        s = EmSettings.around(np.eye(2))
        assert [float(m[0, 0]) for m in s.initializations] == [0.1, 1.0, 10.0]
        assert s.max_iterations == 200 and s.log_likelihood_tolerance == 1e-8


@pytest.fixture(scope="module")
def fitted(model):
    tilts, ys = synthetic(model, 600, 7)
    return tilts, ys, em_fit(model, tilts, ys, EmSettings.around(0.1 * np.eye(2)))


class TestFit:
    def test_recovers_noise(self, fitted):
        _, _, res = fitted
        assert res.converged
        assert rel_err(res.sigma_eps, TRUE_NOISE) < 0.2

    def test_likelihood_monotone(self, fitted):
        _, _, res = fitted
        assert np.all(np.diff(res.log_likelihood_trace) >= -1e-9)

    def test_trace_is_innovation_likelihood(self, model, fitted):
        tilts, ys, res = fitted
        m = model.with_measurement_noise(res.sigma_eps)
        assert res.log_likelihood == pytest.approx(
            innovation_log_likelihood(m, tilts, ys), rel=1e-10
        )

    def test_picks_highest_likelihood(self, fitted):
        _, _, res = fitted
        finals = [v for v in res.final_log_likelihoods if v is not None]
        assert res.log_likelihood == max(finals)

    def test_output_spd(self, fitted):
        _, _, res = fitted
        np.testing.assert_array_equal(res.sigma_eps, res.sigma_eps.T)
        assert np.linalg.eigvalsh(res.sigma_eps).min() > 0

    def test_truth_is_near_fixed_point(self, model, fitted):
        tilts, ys, _ = fitted
        res = em_fit(model, tilts, ys, EmSettings(max_iterations=1, initializations=[TRUE_NOISE]))
        sm = rts_smooth(model, run_filter(model, tilts, ys))
        step = em_mstep(model, tilts, ys, sm)
        assert rel_err(step, TRUE_NOISE) < 0.2
        m = model.with_measurement_noise(step)
        assert innovation_log_likelihood(m, tilts, ys) >= res.log_likelihood_trace[0] - 1e-9

    def test_single_iteration(self, model, fitted):
        tilts, ys, _ = fitted
        res = em_fit(model, tilts, ys, EmSettings(max_iterations=1, initializations=[np.eye(2)]))
        assert res.iterations == 1
        assert not res.converged
        # likelihood before and after the single update
        assert len(res.log_likelihood_trace) == 2
        sm = rts_smooth(
            model.with_measurement_noise(np.eye(2)),
            run_filter(model.with_measurement_noise(np.eye(2)), tilts, ys),
        )
        np.testing.assert_allclose(res.sigma_eps, em_mstep(model, tilts, ys, sm), rtol=1e-10)

    def test_extreme_initializations_agree(self, model, fitted):
        tilts, ys, _ = fitted
        lo = em_fit(model, tilts, ys, EmSettings(initializations=[0.01 * TRUE_NOISE]))
        hi = em_fit(model, tilts, ys, EmSettings(initializations=[100 * TRUE_NOISE]))
        assert rel_err(lo.sigma_eps, hi.sigma_eps) < 0.25

    def test_json_round_trip(self, fitted, tmp_path):
        _, _, res = fitted
        res.to_json(tmp_path / "em.json")
        back = EmResult.from_json(tmp_path / "em.json")
        np.testing.assert_array_equal(back.sigma_eps, res.sigma_eps)
        np.testing.assert_array_equal(back.log_likelihood_trace, res.log_likelihood_trace)
        assert back.chosen_init == res.chosen_init

    def test_rejects_empty_record(self, model):
        with pytest.raises(ValueError):
            em_fit(model, np.zeros((0, 2)), np.zeros((0, 2)), EmSettings.around(np.eye(2)))


class TestBatchAndPooled:
    def test_batch_matches_individual(self, model):
        sets = [synthetic(model, 80, s) for s in range(3)]
        settings = EmSettings.around(0.1 * np.eye(2))
        batch = em_fit_batch(model, [t for t, _ in sets], [y for _, y in sets], settings)
        for (t, y), got in zip(sets, batch):
            want = em_fit(model, t, y, settings)
            np.testing.assert_allclose(got.sigma_eps, want.sigma_eps, rtol=1e-10)
            assert got.chosen_init == want.chosen_init

    def test_pooled_likelihood_is_sum(self, model):
        sets = [synthetic(model, 100, s) for s in range(20, 23)]
        res = em_fit_records(
            model, [t for t, _ in sets], [y for _, y in sets], EmSettings.around(0.1 * np.eye(2))
        )
        m = model.with_measurement_noise(res.sigma_eps)
        total = sum(innovation_log_likelihood(m, t, y) for t, y in sets)
        assert res.log_likelihood == pytest.approx(total, rel=1e-10)
        assert np.all(np.diff(res.log_likelihood_trace) >= -1e-9)

    def test_unequal_lengths_rejected(self, model):
        a, b = synthetic(model, 10, 0), synthetic(model, 11, 1)
        with pytest.raises(ValueError):
            em_fit_batch(model, [a[0], b[0]], [a[1], b[1]], EmSettings.around(np.eye(2)))

    def test_more_data_not_worse(self, model):
        settings = EmSettings(initializations=[0.1 * np.eye(2)])
        errs = {}
        for n in (600, 6000):
            sets = [synthetic(model, n, s) for s in range(5)]
            res = em_fit_batch(model, [t for t, _ in sets], [y for _, y in sets], settings)
            errs[n] = np.median([rel_err(r.sigma_eps, TRUE_NOISE) for r in res])
        assert errs[6000] <= errs[600]


@given(
    st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([0.0, 1e-12, 1e-6])
)
def test_floor_makes_spd(a, b, c, jitter):
    R = np.array([[[a, b], [b, c]]])
    out = _apply_floor(R, max(jitter, 1e-12))[0]
    np.testing.assert_allclose(out, out.T)
    assert np.linalg.eigvalsh(out).min() > 0
