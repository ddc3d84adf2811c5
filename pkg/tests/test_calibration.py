import numpy as np
import pytest
from scipy import stats

from quadrbm.annealer import VirtualAnnealer, VirtualAnnealerConfig
from quadrbm.calibration import (
    CalibrationState,
    MomentPair,
    adaptive_delta,
    calibrate,
    converged,
    history_to_csv,
    measure_moments,
    stability_lambda,
    step_kl,
    step_ratio,
)
from quadrbm.rbm import random_rbm


def moments(mean_qa, var_qa, mean_rbm, var_rbm, n=2048):
    return MomentPair(mean_qa, var_qa, n, mean_rbm, var_rbm, n)


@pytest.fixture(scope="module")
def instance():
    rbm = random_rbm((6, 6, 6, 6), sigma=0.5, seed=2024)
    backend = VirtualAnnealer(
        VirtualAnnealerConfig(beta_qa=12.0, equilibration_steps=100), seed=1
    )
    return rbm, backend


@pytest.fixture(scope="module")
def small_instance():
    # instance with clearly negative mean energy at every visited scale, so
    # the ratio map stays in its domain
    rbm = random_rbm((4, 4, 4, 4), sigma=0.5, seed=22)
    backend = VirtualAnnealer(
        VirtualAnnealerConfig(beta_qa=12.0, equilibration_steps=100), seed=1
    )
    return rbm, backend


class TestMeasureMoments:
    def test_unit_temperature_backend_matches_model(self):
        # a backend whose hidden temperature is 1 sampled at beta_t = 1 is
        # the model itself
        rbm = random_rbm((4, 4, 4, 4), sigma=0.5, seed=3)
        backend = VirtualAnnealer(
            VirtualAnnealerConfig(beta_qa=1.0, equilibration_steps=150), seed=2
        )
        m = measure_moments(rbm, backend, 1.0, 2048, seed=4, gibbs_steps=150)
        se = np.sqrt(m.var_h_qa / m.n_qa + m.var_h_rbm / m.n_rbm)
        assert abs(m.mean_h_qa - m.mean_h_rbm) < 3 * se

    def test_fixed_point_matches(self, small_instance):
        rbm, backend = small_instance
        m = measure_moments(rbm, backend, 12.0, 2048, seed=5, gibbs_steps=100)
        se = np.sqrt(m.var_h_qa / m.n_qa + m.var_h_rbm / m.n_rbm)
        assert abs(m.mean_h_qa - m.mean_h_rbm) < 3 * se

    def test_single_sample_rejected(self, small_instance):
        rbm, backend = small_instance
        with pytest.raises(ValueError):
            measure_moments(rbm, backend, 1.0, 1, seed=0)


class TestStepKl:
    def test_fixed_point_leaves_beta(self):
        state = CalibrationState(beta_t=5.0, method="kl_gradient")
        step_kl(state, moments(-4.0, 1.0, -4.0, 1.0), eta=0.5)
        assert state.beta_t == 5.0
        assert len(state.history) == 1

    def test_nonpositive_proposal_clamps_to_half(self):
        state = CalibrationState(beta_t=1.0, method="kl_gradient")
        step_kl(state, moments(-1.0, 1.0, -4.0, 1.0), eta=1.0)
        assert state.beta_t == 0.5
        assert state.clamp_events == 1

    def test_invalid_eta(self):
        state = CalibrationState(beta_t=1.0, method="kl_gradient")
        with pytest.raises(ValueError):
            step_kl(state, moments(-1.0, 1.0, -1.0, 1.0), eta=0.0)


class TestStepRatio:
    def test_unit_ratio_is_fixed_point(self):
        state = CalibrationState(beta_t=3.0, delta=2.0, method="ratio_fixed")
        step_ratio(state, moments(-6.0, 1.0, -6.0, 1.0))
        assert state.beta_t == pytest.approx(3.0)

    def test_sign_mismatch_advises_fallback(self):
        state = CalibrationState(beta_t=3.0, method="ratio_fixed")
        with pytest.raises(ValueError, match="KL-gradient"):
            step_ratio(state, moments(2.0, 1.0, -6.0, 1.0))

    def test_tiny_denominator_advises_fallback(self):
        state = CalibrationState(beta_t=3.0, method="ratio_fixed")
        with pytest.raises(ValueError, match="KL-gradient"):
            step_ratio(state, moments(-2.0, 1.0, 1e-12, 1.0))


class TestAdaptiveDelta:
    def test_root_value(self):
        assert adaptive_delta(moments(-100.0, 50.0, -90.0, 40.0)) == pytest.approx(2.0)

    def test_positive_mean_clamps_with_warning(self):
        with pytest.warns(UserWarning):
            d = adaptive_delta(moments(100.0, 50.0, -90.0, 40.0))
        assert d == pytest.approx(1e-3)

    def test_unclamped_root_zeroes_lambda(self, small_instance):
        rbm, backend = small_instance
        m = measure_moments(rbm, backend, 12.0, 2048, seed=8, gibbs_steps=100)
        d = adaptive_delta(m)
        assert d < 10.0  # unclamped on this instance
        assert stability_lambda(d, m) < 0.05

    def test_degenerate_moments_rejected(self):
        with pytest.raises(ValueError):
            adaptive_delta(moments(-1.0, 0.0, -1.0, 1.0))


class TestStabilityLambda:
    def test_limit_at_zero_delta(self):
        m = moments(-10.0, 2.0, -9.0, 2.0)
        assert stability_lambda(1e-12, m) == pytest.approx(1.0, abs=1e-9)

    def test_root_is_zero(self):
        m = moments(-10.0, 2.0, -9.0, 2.0)
        assert stability_lambda(5.0, m) == pytest.approx(0.0, abs=1e-12)

    def test_delta_one_branch_uses_model_side_mean(self):
        m = moments(-10.0, 2.0, -4.0, 2.0)
        assert stability_lambda(1.0, m) == pytest.approx(abs(1.0 + 2.0 / -4.0))
        # infinitesimally away from 1, the backend-side mean takes over
        assert stability_lambda(1.0 + 1e-9, m) == pytest.approx(abs(1.0 + 2.0 / -10.0), abs=1e-6)

    def test_zero_denominator_rejected(self):
        with pytest.raises(ValueError):
            stability_lambda(2.0, moments(0.0, 1.0, -1.0, 1.0))

    def test_large_delta_stable_cold_unstable_hot(self, instance):
        # sweeping the estimate: programs shipped at small beta_t sample cold
        # (tiny variance), large beta_t sample hot (variance comparable to
        # the mean), flipping lambda(6) across 1
        rbm, backend = instance
        cold = measure_moments(rbm, backend, 1.0, 2048, seed=11, gibbs_steps=100)
        hot = measure_moments(rbm, backend, 30.0, 2048, seed=12, gibbs_steps=100)
        assert stability_lambda(6.0, cold) < 1.0
        assert stability_lambda(6.0, hot) > 1.0


class TestConverged:
    def test_identical_sample_sets(self):
        assert converged(moments(-5.0, 2.0, -5.0, 2.0))

    def test_far_apart_means(self):
        m = moments(-5.0, 1.0, -5.0 + 10.0, 1.0)
        assert not converged(m)

    def test_threshold_scales_as_inverse_sqrt_n(self):
        thr_100 = (2.0 / np.sqrt(100)) * 0.5  # sigma = 1 both sides
        diff = 0.6 * thr_100
        assert converged(moments(-5.0, 1.0, -5.0 + diff, 1.0, n=100))
        assert not converged(moments(-5.0, 1.0, -5.0 + diff, 1.0, n=400))


class TestCalibrate:
    def test_fixed_point_start_converges_first_iteration(self, small_instance):
        rbm, backend = small_instance
        state = calibrate(
            rbm, backend, "ratio_adaptive", beta_0=12.0, max_iters=10,
            n_samples=2048, seed=0, gibbs_steps=100,
        )
        assert state.converged
        assert len(state.history) == 1
        assert state.history[-1].converged

    def test_adaptive_recovers_hidden_beta(self, instance):
        rbm, backend = instance
        state = calibrate(
            rbm, backend, "ratio_adaptive", beta_0=1.0, max_iters=100,
            n_samples=2048, seed=3, gibbs_steps=100,
        )
        assert state.converged
        assert abs(state.beta_t - 12.0) / 12.0 < 0.05

    def test_ratio_fixed_converges(self, instance):
        rbm, backend = instance
        state = calibrate(
            rbm, backend, "ratio_fixed", beta_0=1.0, max_iters=100,
            n_samples=2048, seed=5, gibbs_steps=100, delta=1.0,
        )
        assert state.converged

    def test_kl_with_example_step_size_converges(self, instance):
        rbm, backend = instance
        pilot = measure_moments(rbm, backend, 12.0, 2048, seed=1, gibbs_steps=100)
        eta = 0.1 * 12.0 / pilot.var_h_qa
        state = calibrate(
            rbm, backend, "kl_gradient", beta_0=1.0, max_iters=200,
            n_samples=2048, seed=6, gibbs_steps=100, eta=eta,
        )
        assert state.converged
        assert len(state.history) <= 200

    def test_adaptive_not_slower_than_kl(self, small_instance):
        rbm, backend = small_instance
        iters = {"ratio_adaptive": [], "kl_gradient": []}
        for trial in range(3):
            for method in iters:
                st = calibrate(
                    rbm, backend, method, beta_0=1.0, max_iters=200,
                    n_samples=2048, seed=100 + trial, gibbs_steps=100,
                )
                assert st.converged
                iters[method].append(len(st.history))
        assert np.mean(iters["ratio_adaptive"]) <= np.mean(iters["kl_gradient"])

    def test_max_iters_returns_unconverged_history(self, small_instance):
        rbm, backend = small_instance
        state = calibrate(
            rbm, backend, "ratio_adaptive", beta_0=1.0, max_iters=2,
            n_samples=256, seed=7, gibbs_steps=50,
        )
        assert not state.converged
        assert len(state.history) == 2
        assert not state.history[-1].converged

    def test_history_one_record_per_iteration(self, small_instance):
        rbm, backend = small_instance
        state = calibrate(
            rbm, backend, "ratio_adaptive", beta_0=4.0, max_iters=50,
            n_samples=1024, seed=9, gibbs_steps=100,
        )
        assert [r.iteration for r in state.history] == list(range(len(state.history)))
        assert state.history[-1].converged == state.converged

    def test_estimates_independent_of_condition_value(self, small_instance):
        # per-condition runs: the estimate must not track the condition label
        rbm, backend = small_instance
        labels = np.linspace(0.0, 1.0, 6)
        estimates = []
        for k, label in enumerate(labels):
            bits = np.array([(int(k) >> b) & 1 for b in range(4)], dtype=np.uint8)
            st = calibrate(
                rbm, backend, "ratio_adaptive", beta_0=6.0, max_iters=60,
                n_samples=1024, seed=40 + k, gibbs_steps=100,
                condition=("t", bits),
            )
            assert st.converged
            estimates.append(st.beta_t)
        _, p_value = stats.pearsonr(labels, estimates)
        assert p_value > 0.01

    def test_single_step_contraction_near_fixed_point(self, instance):
        # adaptive map with a delta trust region of 2: strictly contracting
        # from starts across +-50% of the hidden value, outside the
        # statistically unresolvable core
        rbm, backend = instance
        starts = [b for b in np.linspace(6.0, 18.0, 24) if not 11.0 < b < 13.0][:20]
        wins = 0
        for k, b0 in enumerate(starts):
            st = CalibrationState(beta_t=b0, method="ratio_adaptive")
            m = measure_moments(rbm, backend, b0, 2048, seed=700 + k, gibbs_steps=100)
            step_ratio(st, m, adaptive_delta(m, delta_max=2.0))
            wins += abs(st.beta_t - 12.0) < abs(b0 - 12.0)
        assert wins >= 18

    def test_history_csv(self, tmp_path, small_instance):
        rbm, backend = small_instance
        state = calibrate(
            rbm, backend, "ratio_adaptive", beta_0=4.0, max_iters=20,
            n_samples=512, seed=13, gibbs_steps=50,
        )
        path = tmp_path / "history.csv"
        history_to_csv(state, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,beta,mean_h_qa,mean_h_rbm,var_h_qa,var_h_rbm,lambda,converged"
        assert len(lines) == len(state.history) + 1


class TestValidation:
    def test_moment_counts(self):
        with pytest.raises(ValueError):
            MomentPair(-1.0, 1.0, 1, -1.0, 1.0, 2)

    def test_state_validation(self):
        with pytest.raises(ValueError):
            CalibrationState(beta_t=0.0)
        with pytest.raises(ValueError):
            CalibrationState(beta_t=1.0, method="newton")
