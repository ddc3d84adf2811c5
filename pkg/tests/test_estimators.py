import numpy as np
import pytest
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from quadrbm.estimators import QuadripartiteBernoulliRBM, ShowerLogitTransformer
from quadrbm.exact import exact_ln_z, exact_sample, rbm_log_likelihood
from quadrbm.rbm import QuadripartiteRBM, random_rbm
from quadrbm.shower import ToyShowerConfig, toy_showers


@pytest.fixture(scope="module")
def teacher_data():
    teacher = random_rbm((3, 3, 3, 3), sigma=1.2, seed=50)
    train = exact_sample(teacher, 512, seed=1).stacked()
    test = exact_sample(teacher, 512, seed=2).stacked()
    return teacher, train, test


class TestQuadRBMEstimator:
    def test_get_set_params_round_trip(self):
        est = QuadripartiteBernoulliRBM(sizes=(2, 2, 2, 2), k=3)
        params = est.get_params()
        assert params["k"] == 3
        est.set_params(learning_rate=0.2)
        assert est.learning_rate == 0.2

    def test_unfitted_raises(self):
        est = QuadripartiteBernoulliRBM(sizes=(2, 2, 2, 2))
        with pytest.raises(NotFittedError):
            est.sample(4)

    def test_fit_improves_likelihood(self, teacher_data):
        _, train, test = teacher_data
        est = QuadripartiteBernoulliRBM(
            sizes=(3, 3, 3, 3), method="pcd_k", k=5, learning_rate=0.05,
            n_updates=400, batch_size=128, seed=3,
        )
        baseline = QuadripartiteBernoulliRBM(sizes=(3, 3, 3, 3), seed=3)
        baseline.rbm_ = QuadripartiteRBM.zeros(random_rbm((3, 3, 3, 3), sigma=0, seed=0).layout)
        est.fit(train)
        assert est.score(test) > baseline.score(test) + 0.5

    def test_score_samples_matches_library_ll(self, teacher_data):
        _, train, test = teacher_data
        est = QuadripartiteBernoulliRBM(
            sizes=(3, 3, 3, 3), method="cd_k", k=2, n_updates=50, seed=4
        )
        est.fit(train)
        from quadrbm.rbm import SampleBatch

        batch = SampleBatch.from_stacked(est.rbm_.layout, test.astype(np.uint8), "data", seed=0)
        want = rbm_log_likelihood(est.rbm_, batch, exact_ln_z(est.rbm_))
        assert est.score(test) == pytest.approx(want, abs=1e-10)

    def test_sample_shape_and_alphabet(self, teacher_data):
        _, train, _ = teacher_data
        est = QuadripartiteBernoulliRBM(sizes=(3, 3, 3, 3), n_updates=10, seed=5).fit(train)
        draws = est.sample(20, n_steps=50)
        assert draws.shape == (20, 12)
        assert set(np.unique(draws)) <= {0, 1}

    def test_gibbs_evolves_given_states(self, teacher_data):
        _, train, _ = teacher_data
        est = QuadripartiteBernoulliRBM(sizes=(3, 3, 3, 3), n_updates=10, seed=6).fit(train)
        out = est.gibbs(train[:16], n_steps=2, seed=9)
        assert out.shape == (16, 12)

    def test_rejects_non_binary(self):
        est = QuadripartiteBernoulliRBM(sizes=(2, 2, 2, 2))
        with pytest.raises(ValueError, match="binary"):
            est.fit(np.full((4, 8), 0.5))

    def test_rejects_wrong_width(self):
        est = QuadripartiteBernoulliRBM(sizes=(2, 2, 2, 2))
        with pytest.raises(ValueError, match="columns"):
            est.fit(np.zeros((4, 11)))

    def test_deterministic_given_seed(self, teacher_data):
        _, train, _ = teacher_data
        a = QuadripartiteBernoulliRBM(sizes=(3, 3, 3, 3), n_updates=25, seed=7).fit(train)
        b = QuadripartiteBernoulliRBM(sizes=(3, 3, 3, 3), n_updates=25, seed=7).fit(train)
        for p in ("v", "h", "s", "t"):
            np.testing.assert_array_equal(a.rbm_.biases[p], b.rbm_.biases[p])


class TestShowerLogitTransformer:
    def make_matrix(self, n=4, seed=0):
        records = toy_showers(n, seed=seed, config=ToyShowerConfig(target_sparsity=0.8))
        return np.stack([np.concatenate([[r.incident_energy], r.flat()]) for r in records])

    def test_round_trip_in_pipeline(self):
        X = self.make_matrix()
        pipe = Pipeline([("logit", ShowerLogitTransformer())])
        Z = pipe.fit_transform(X)
        back = pipe.named_steps["logit"].inverse_transform(Z)
        nz = X[:, 1:] > 0
        rel = np.abs(back[:, 1:][nz] - X[:, 1:][nz]) / X[:, 1:][nz]
        assert rel.max() < 1e-6
        np.testing.assert_array_equal(back[:, 1:][~nz], 0.0)
        np.testing.assert_allclose(back[:, 0], X[:, 0], rtol=1e-12)

    def test_zero_preservation(self):
        X = self.make_matrix(seed=3)
        Z = ShowerLogitTransformer().fit_transform(X)
        np.testing.assert_array_equal(Z[:, 1:] == 0.0, X[:, 1:] == 0.0)

    def test_energy_column_normalized(self):
        X = self.make_matrix(seed=4)
        Z = ShowerLogitTransformer().fit_transform(X)
        assert np.all((0.0 <= Z[:, 0]) & (Z[:, 0] <= 1.0))

    def test_wrong_width_rejected(self):
        with pytest.raises(ValueError, match="columns"):
            ShowerLogitTransformer().fit(np.zeros((2, 100)))
