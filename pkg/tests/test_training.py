import numpy as np
import pytest
from scipy.special import expit

from quadrbm.exact import exact_ln_z, exact_moments, exact_sample, rbm_log_likelihood
from quadrbm.rbm import (
    PAIRS,
    PARTITIONS,
    PartitionLayout,
    QuadripartiteRBM,
    SampleBatch,
    batch_energy,
    random_rbm,
    sample,
)
from quadrbm.training import (
    GradientRecord,
    TrainerState,
    TrainingLog,
    entropy_estimate,
    gumbel_relax,
    load_checkpoint,
    negative_phase,
    positive_phase,
    save_checkpoint,
    train_step,
)


def batch_from_rows(layout, rows):
    return SampleBatch.from_stacked(layout, np.asarray(rows, dtype=np.uint8), "data", seed=0)


class TestPositivePhase:
    def test_zero_batch_gives_zero_record(self):
        layout = PartitionLayout((2, 2, 2, 2))
        rbm = QuadripartiteRBM.zeros(layout)
        batch = batch_from_rows(layout, np.zeros((4, 8)))
        rec = positive_phase(rbm, batch)
        for p in PARTITIONS:
            np.testing.assert_array_equal(rec.d_bias[p], 0.0)
        for pair in PAIRS:
            np.testing.assert_array_equal(rec.d_weight[pair], 0.0)

    def test_all_ones_unit_instance(self):
        layout = PartitionLayout((1, 1, 1, 1))
        rbm = QuadripartiteRBM.zeros(layout)
        batch = batch_from_rows(layout, np.ones((1, 4)))
        rec = positive_phase(rbm, batch)
        for p in PARTITIONS:
            np.testing.assert_array_equal(rec.d_bias[p], 1.0)
        for pair in PAIRS:
            np.testing.assert_array_equal(rec.d_weight[pair], 1.0)

    def test_matches_per_sample_loop(self):
        rbm = random_rbm((3, 2, 2, 3), sigma=0.5, seed=3)
        rng = np.random.default_rng(8)
        rows = rng.integers(0, 2, size=(40, rbm.layout.total))
        batch = batch_from_rows(rbm.layout, rows)
        rec = positive_phase(rbm, batch)

        d_bias = {p: np.zeros(rbm.layout.size_of(p)) for p in PARTITIONS}
        d_weight = {pair: np.zeros(rbm.weights[pair].shape) for pair in PAIRS}
        for i in range(len(batch)):
            state = batch[i]
            for p in PARTITIONS:
                d_bias[p] += state.part(p)
            for (p, q) in PAIRS:
                d_weight[(p, q)] += np.outer(state.part(p), state.part(q))
        for p in PARTITIONS:
            np.testing.assert_allclose(rec.d_bias[p], d_bias[p] / 40, atol=1e-12)
        for pair in PAIRS:
            np.testing.assert_allclose(rec.d_weight[pair], d_weight[pair] / 40, atol=1e-12)

    def test_masked_couplings_carry_zero_gradient(self):
        mask = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        rbm = random_rbm((2, 2, 2, 2), sigma=0.5, seed=1, coupling_masks={("v", "h"): mask})
        batch = batch_from_rows(rbm.layout, np.ones((3, 8)))
        rec = positive_phase(rbm, batch)
        assert rec.d_weight[("v", "h")][0, 1] == 0.0
        assert rec.d_weight[("v", "h")][1, 0] == 0.0


class TestNegativePhase:
    def test_matches_exact_moments_for_long_chains(self):
        rbm = random_rbm((2, 2, 2, 2), sigma=0.8, seed=7)
        m = exact_moments(rbm)
        state = TrainerState(method="rdm_k", k=300, learning_rate=0.1)
        rec, chains = negative_phase(rbm, state, seed=123, n_chains=3000)
        assert chains.steps == 300
        n = 3000
        for p in PARTITIONS:
            want = -m.grad_bias[p]
            se = np.sqrt(np.maximum(want * (1 - want), 1e-12) / n)
            assert np.all(np.abs(rec.d_bias[p] - want) < 3 * se)
        for pair in PAIRS:
            want = -m.grad_weight[pair]
            se = np.sqrt(np.maximum(want * (1 - want), 1e-12) / n)
            assert np.all(np.abs(rec.d_weight[pair] - want) < 3 * se)

    def test_cd1_gradient_vanishes_at_equilibrium(self):
        rbm = random_rbm((2, 2, 2, 2), sigma=0.8, seed=7)
        m = exact_moments(rbm)
        data = exact_sample(rbm, 512, seed=5)
        pos = positive_phase(rbm, data)
        state = TrainerState(method="cd_k", k=1, learning_rate=0.1)
        neg, _ = negative_phase(rbm, state, seed=77, data=data)
        g = pos - neg
        for p in PARTITIONS:
            pm = -m.grad_bias[p]
            se = np.sqrt(2 * np.maximum(pm * (1 - pm), 1e-12) / 512)
            assert np.all(np.abs(g.d_bias[p]) < 3 * se)
        for pair in PAIRS:
            pm = -m.grad_weight[pair]
            se = np.sqrt(2 * np.maximum(pm * (1 - pm), 1e-12) / 512)
            assert np.all(np.abs(g.d_weight[pair]) < 3 * se)

    def test_pcd_chains_stationary_at_zero_learning_rate(self):
        rbm = random_rbm((2, 2, 2, 2), sigma=0.8, seed=7)
        eq = sample(rbm, 256, 500, seed=31)
        state = TrainerState(method="pcd_k", k=5, learning_rate=0.0, persistent_chains=eq)
        means = []
        for u in range(100):
            _, chains = negative_phase(rbm, state, seed=1000 + u)
            state.persistent_chains = chains
            means.append(batch_energy(rbm, chains).mean())
        means = np.array(means)
        first, last = means[:20], means[-20:]
        pooled_se = np.sqrt(first.var(ddof=1) / 20 + last.var(ddof=1) / 20)
        assert abs(last.mean() - first.mean()) < 3 * pooled_se

    def test_cd_requires_data(self):
        rbm = random_rbm((2, 2, 2, 2), sigma=0.5, seed=0)
        state = TrainerState(method="cd_k", k=1, learning_rate=0.1)
        with pytest.raises(ValueError):
            negative_phase(rbm, state, seed=0)


class TestTrainStep:
    def test_zero_learning_rate_is_bit_exact_noop(self):
        rbm = random_rbm((2, 2, 2, 2), sigma=0.5, seed=2)
        batch = batch_from_rows(rbm.layout, np.eye(8, dtype=np.uint8))
        state = TrainerState(method="rdm_k", k=2, learning_rate=0.0)
        updated = train_step(rbm, batch, state, seed=4)
        for p in PARTITIONS:
            np.testing.assert_array_equal(updated.biases[p], rbm.biases[p])
        for pair in PAIRS:
            np.testing.assert_array_equal(updated.weights[pair], rbm.weights[pair])
        assert state.update == 1

    def test_analytic_gradient_matches_finite_difference_ll(self):
        # data-side average + exact model expectation vs central differences
        # of the enumerated log-likelihood
        eps = 1e-4
        rbm = random_rbm((2, 2, 2, 2), sigma=0.9, seed=14)
        data = exact_sample(rbm, 64, seed=3)
        pos = positive_phase(rbm, data)
        m = exact_moments(rbm)

        def ll(r):
            return rbm_log_likelihood(r, data, exact_ln_z(r))

        worst = 0.0
        for p in PARTITIONS:
            analytic = pos.d_bias[p] + m.grad_bias[p]
            for i in range(rbm.layout.size_of(p)):
                up, down = rbm.biases[p].copy(), rbm.biases[p].copy()
                up[i] += eps
                down[i] -= eps
                fd = (ll(rbm.replace(biases={p: up})) - ll(rbm.replace(biases={p: down}))) / (2 * eps)
                worst = max(worst, abs(analytic[i] - fd))
        for pair in PAIRS:
            analytic = pos.d_weight[pair] + m.grad_weight[pair]
            for i in range(analytic.shape[0]):
                for j in range(analytic.shape[1]):
                    up, down = rbm.weights[pair].copy(), rbm.weights[pair].copy()
                    up[i, j] += eps
                    down[i, j] -= eps
                    fd = (
                        ll(rbm.replace(weights={pair: up}))
                        - ll(rbm.replace(weights={pair: down}))
                    ) / (2 * eps)
                    worst = max(worst, abs(analytic[i, j] - fd))
        assert worst < 1e-5

    def test_masked_entries_untouched(self):
        mask = np.zeros((2, 2), dtype=np.uint8)
        rbm = random_rbm((2, 2, 2, 2), sigma=0.5, seed=9, coupling_masks={("h", "t"): mask})
        batch = batch_from_rows(rbm.layout, np.ones((4, 8)))
        state = TrainerState(method="rdm_k", k=2, learning_rate=0.5)
        updated = train_step(rbm, batch, state, seed=6)
        np.testing.assert_array_equal(updated.weights[("h", "t")], 0.0)

    def test_teacher_student_log_likelihood_improves(self):
        teacher = random_rbm((3, 3, 3, 3), sigma=1.2, seed=50)
        train_data = exact_sample(teacher, 256, seed=1)
        test_data = exact_sample(teacher, 1024, seed=2)
        student = QuadripartiteRBM.zeros(teacher.layout)
        baseline = rbm_log_likelihood(student, test_data, exact_ln_z(student))
        state = TrainerState(
            method="pcd_k", k=10, learning_rate=0.05, persistent_chains=train_data
        )
        lls = []
        for u in range(2000):
            student = train_step(student, train_data, state, seed=99)
            if (u + 1) % 100 == 0:
                lls.append(rbm_log_likelihood(student, test_data, exact_ln_z(student)))
        windows = np.array(lls).reshape(5, 4).mean(axis=1)
        assert np.all(np.diff(windows) > 0)
        assert lls[-1] - baseline >= 1.0

    def test_invalid_method_rejected(self):
        with pytest.raises(ValueError):
            TrainerState(method="momentum", k=1, learning_rate=0.1)

    def test_pcd_requires_chains(self):
        with pytest.raises(ValueError):
            TrainerState(method="pcd_k", k=1, learning_rate=0.1)


class TestGumbelRelax:
    def test_zero_logit_median_half(self):
        out = gumbel_relax(np.zeros(100_000), anneal_beta=2.0, rng=5)
        assert abs(np.median(out.zeta) - 0.5) < 0.01

    def test_hard_limit_matches_sigmoid(self):
        n = 100_000
        out = gumbel_relax(np.full(n, 2.0), anneal_beta=1e6, rng=7)
        frac = float(np.mean(out.zeta > 0.5))
        p = expit(2.0)
        assert abs(frac - p) < 3 * np.sqrt(p * (1 - p) / n)

    def test_monotone_in_noise(self):
        rho = np.linspace(0.01, 0.99, 50)
        zeta = expit((1.3 + np.log(rho / (1 - rho))) * 4.0)
        assert np.all(np.diff(zeta) > 0)

    def test_deviation_shrinks_with_anneal_beta(self):
        n = 200_000
        logit_val = 1.0
        p = expit(logit_val)
        devs = []
        for beta in (1.0, 10.0, 1e6):
            out = gumbel_relax(np.full(n, logit_val), anneal_beta=beta, rng=11)
            devs.append(abs(float(np.mean(out.zeta > 0.5)) - p))
        assert devs[0] >= devs[1] >= devs[2]

    def test_invalid_beta(self):
        with pytest.raises(ValueError):
            gumbel_relax(np.zeros(3), anneal_beta=0.0, rng=0)


class TestEntropyEstimate:
    def test_zero_logits_give_m_log2(self):
        zeta = np.random.default_rng(0).random((64, 10))
        est = entropy_estimate(np.zeros(10), zeta)
        assert est == pytest.approx(-10 * np.log(2), abs=1e-12)

    def test_deterministic_unit_approaches_zero_from_below(self):
        est = entropy_estimate(np.array([30.0]), np.ones((4, 1)))
        assert -1e-10 < est < 0

    def test_hard_limit_matches_bernoulli_entropy(self):
        n = 100_000
        logits = np.array([-1.0, 0.3, 2.0])
        out = gumbel_relax(np.tile(logits, (n, 1)), anneal_beta=1e6, rng=3)
        est = entropy_estimate(logits, out.zeta)
        p = expit(logits)
        exact = float(np.sum(p * np.log(p) + (1 - p) * np.log(1 - p)))
        per_unit_var = p * (1 - p) * (np.log(p) - np.log(1 - p)) ** 2
        se = np.sqrt(per_unit_var.sum() / n)
        assert abs(est - exact) < 3 * se


class TestPersistence:
    def test_checkpoint_round_trip(self, tmp_path):
        rbm = random_rbm((2, 2, 2, 2), sigma=0.5, seed=3)
        chains = sample(rbm, 8, 5, seed=2)
        state = TrainerState(
            method="pcd_k", k=3, learning_rate=0.01, persistent_chains=chains, epoch=2, update=37
        )
        save_checkpoint(tmp_path / "ckpt", rbm, state)
        rbm2, state2 = load_checkpoint(tmp_path / "ckpt")
        for p in PARTITIONS:
            np.testing.assert_array_equal(rbm2.biases[p], rbm.biases[p])
        assert state2.method == "pcd_k" and state2.update == 37 and state2.epoch == 2
        np.testing.assert_array_equal(state2.persistent_chains.stacked(), chains.stacked())

    def test_training_log_columns(self, tmp_path):
        path = tmp_path / "log.csv"
        rbm = random_rbm((2, 2, 2, 2), sigma=0.5, seed=3)
        rec = GradientRecord.zeros_like(rbm)
        with TrainingLog(path) as log:
            log.record(0, -3.5, rec)
            log.record(1, -3.6, rec)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "update,mean_neg_energy,grad_norm_bias,grad_norm_weight"
        assert len(lines) == 3
