import numpy as np
import pytest
from scipy.stats import chi2

from tiltopt.estimation import run_filter
from tiltopt.harness import (
    ExperimentRecord,
    correction_loop,
    design_pattern,
    estimate_record,
    evaluate_patterns,
    fit_noise,
    load_pattern,
    monte_carlo_final_errors,
    simulate_experiments,
)
from tiltopt.schedule import lissajous_pattern, random_pattern
from tiltopt.statespace import build_model, default_config, simulate_trajectory, spawn_seeds


@pytest.fixture(scope="module")
def config():
    return default_config()


@pytest.fixture(scope="module")
def records(config):
    seq = random_pattern(30, config.bounds(30), seed=0)
    return simulate_experiments(config, seq, 4, seed=11)


class TestRecords:
    def test_round_trip(self, records, tmp_path):
        rec = records[1]
        rec.to_json(tmp_path / "r.json")
        back = ExperimentRecord.from_json(tmp_path / "r.json")
        np.testing.assert_array_equal(back.measurements, rec.measurements)
        np.testing.assert_array_equal(back.truth, rec.truth)
        np.testing.assert_array_equal(back.tilts.tilts, rec.tilts.tilts)
        np.testing.assert_array_equal(back.timestamps, rec.timestamps)
        # the stored seed reproduces the run
        again = simulate_experiments(back.config, back.tilts, 1, seed=None)
        assert again[0].seed is not None
        model = build_model(back.config)
        _, ys = simulate_trajectory(model, back.tilts.tilts, seed=back.seed)
        np.testing.assert_array_equal(ys * model.measurement_scale, rec.measurements)

    def test_timestamps(self, records, config):
        np.testing.assert_allclose(records[0].timestamps, np.arange(30) * config.sample_time)

    def test_length_checked(self, records, config):
        with pytest.raises(ValueError):
            ExperimentRecord(config, records[0].tilts, np.zeros((29, 2)))

    def test_bad_schema(self, records):
        data = records[0].to_dict()
        data["schema_version"] = 7
        with pytest.raises(ValueError):
            ExperimentRecord.from_dict(data)

    def test_runs_independent_and_reproducible(self, records, config):
        again = simulate_experiments(config, records[0].tilts, 4, seed=11)
        for a, b in zip(records, again):
            np.testing.assert_array_equal(a.measurements, b.measurements)
        assert not np.array_equal(records[0].measurements, records[1].measurements)


class TestEstimate:
    def test_physical_units(self, records, config):
        rec = records[0]
        rep = estimate_record(rec)
        model = build_model(config)
        filt = run_filter(model, rec.tilts.tilts, model.normalize_measurements(rec.measurements))
        np.testing.assert_allclose(rep.final_estimate, filt.means_post[-1] * model.state_scales)
        assert rep.smoothed_means.shape == (30, 19)
        np.testing.assert_allclose(rep.smoothed_means[-1], rep.filtered_means[-1])
        assert np.all(rep.final_std >= 0)

    def test_no_smooth(self, records):
        rep = estimate_record(records[0], smooth=False)
        assert rep.smoothed_means is None
        assert rep.to_dict()["smoothed_means"] is None

    def test_csv(self, records, tmp_path):
        rep = estimate_record(records[0])
        rep.to_csv(tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert len(lines) == 31
        assert lines[0].split(",")[:5] == ["k", "tx", "ty", "y1", "y2"]


class TestDesign:
    @pytest.mark.parametrize("kind", ["lissajous", "random"])
    def test_baselines(self, config, kind):
        res = design_pattern(config, kind, 20, seed=0)
        assert len(res.sequence) == 20 and res.sequence.is_feasible()
        assert np.all(np.diff(res.cost_trajectory) <= 1e-12)

    def test_lissajous_matches_generator(self, config):
        res = design_pattern(config, "lissajous", 60)
        want = lissajous_pattern(60, 3, 2, config.bounds(60))
        np.testing.assert_array_equal(res.sequence.tilts, want.tilts)

    def test_greedy_prefixes(self, config):
        res = design_pattern(config, "greedy", 8, seed=0, n_starts=10, n_warm=3)
        assert res.sequence.is_feasible()
        assert np.all(np.diff(res.cost_trajectory) <= 1e-12)
        # every prefix is a feasible pattern with the same running cost
        from tiltopt.schedule import sequence_cost_trajectory

        model = build_model(config)
        for n in (1, 4, 8):
            pre = res.sequence.prefix(n)
            assert pre.is_feasible()
            assert sequence_cost_trajectory(model, None, pre)[-1] == pytest.approx(
                res.cost_trajectory[n - 1], rel=1e-10
            )

    def test_unknown_kind(self, config):
        with pytest.raises(ValueError):
            design_pattern(config, "spiral", 5)

    def test_load_pattern_formats(self, config, tmp_path):
        res = design_pattern(config, "random", 6, seed=1)
        res.to_json(tmp_path / "p.json")
        res.sequence.to_csv(tmp_path / "p.csv")
        for name in ("p.json", "p.csv"):
            np.testing.assert_array_equal(
                load_pattern(tmp_path / name).tilts, res.sequence.tilts
            )


class TestEvaluation:
    def test_monte_carlo_matches_reference_filter(self, config):
        # the vectorized runner reproduces simulate + filter run by run
        model = build_model(config)
        tilts = random_pattern(15, config.bounds(15), seed=2).tilts
        errors, P = monte_carlo_final_errors(model, tilts, 5, seed=3)
        for i, sub in enumerate(spawn_seeds(3, 5)):
            states, ys = simulate_trajectory(model, tilts, seed=sub)
            filt = run_filter(model, tilts, ys)
            np.testing.assert_allclose(errors[i], filt.means_post[-1] - states[-1], atol=1e-12)
        np.testing.assert_array_equal(P, filt.covs_post[-1])

    def test_consistency_and_ordering(self, config):
        n = 60
        bounds = config.bounds(n)
        patterns = {
            "lissajous": lissajous_pattern(n, 3, 2, bounds),
            "random": random_pattern(n, bounds, seed=4),
        }
        rep = evaluate_patterns(config, patterns, 300, seed=5)
        for p in rep.patterns:
            assert np.all(p.predicted_std >= 0) and np.all(p.realized_std >= 0)
            assert np.all((p.std_ratio > 0.75) & (p.std_ratio < 1.3))
            assert p.nees_consistent
            assert p.n_runs == 300
        assert rep.patterns[0].nees_band[0] < 19 < rep.patterns[0].nees_band[1]

    def test_chi2_band(self):
        from tiltopt.harness import _chi2_band

        lo, hi = _chi2_band(500, 19)
        assert lo == pytest.approx(chi2.ppf(0.005, 9500) / 500)
        assert hi == pytest.approx(chi2.ppf(0.995, 9500) / 500)

    def test_outputs(self, config, tmp_path):
        pats = {"a": random_pattern(5, config.bounds(5), seed=0)}
        rep = evaluate_patterns(config, pats, 10, seed=0)
        rep.to_json(tmp_path / "report.json")
        paths = rep.write_csv(tmp_path)
        assert [p.name for p in paths] == ["std.csv", "cost.csv"]
        assert len((tmp_path / "std.csv").read_text().splitlines()) == 20
        assert len((tmp_path / "cost.csv").read_text().splitlines()) == 6

    def test_zero_noise_errors_vanish(self):
        cfg = default_config()
        cfg.measurement_noise = 1e-12 * np.eye(2)
        cfg.process_noise_diag = np.zeros(19)
        model = build_model(cfg)
        rms = []
        for n in (10, 20, 40, 60):
            tilts = random_pattern(n, cfg.bounds(n), seed=0).tilts
            errors, _ = monte_carlo_final_errors(model, tilts, 50, seed=1)
            rms.append(np.sqrt(np.mean(errors**2)))
        assert np.all(np.diff(rms) < 0)
        assert rms[-1] < 1e-5

    def test_rejects_bad_arguments(self, config):
        with pytest.raises(ValueError):
            evaluate_patterns(config, {}, 10)
        with pytest.raises(ValueError):
            evaluate_patterns(config, {"a": random_pattern(3, 1e-3, seed=0)}, 1)


class TestNoiseFit:
    def test_pooled_records(self, config):
        seq = random_pattern(200, config.bounds(200), seed=0)
        recs = simulate_experiments(config, seq, 3, seed=9)
        res = fit_noise(recs)
        truth = config.measurement_noise
        assert np.linalg.norm(res.sigma_eps - truth) / np.linalg.norm(truth) < 0.3
        assert np.all(np.diff(res.log_likelihood_trace) >= -1e-9)


class TestCorrection:
    def test_residuals_shrink(self, config):
        seq = design_pattern(config, "random", 60, seed=0).sequence
        rec = simulate_experiments(config, seq, 1, seed=21)[0]
        rep = correction_loop(rec, rounds=3, seed=22)
        assert rep.residuals.shape == (4, 8)
        assert rep.decay[0] == 1.0
        assert rep.decay[-1] <= 0.1
        assert rep.to_dict()["coefficients"][0] == "c11"

    def test_needs_truth(self, records, config):
        rec = ExperimentRecord(config, records[0].tilts, records[0].measurements)
        with pytest.raises(ValueError):
            correction_loop(rec)
