"""Scikit-learn style facades over the trainer and the shower preprocessing,
so both compose with the wider pipeline/grid-search ecosystem."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils import check_array

from .exact import ais_ln_z, exact_ln_z, rbm_log_likelihood
from .rbm import PartitionLayout, QuadripartiteRBM, SampleBatch, batch_energy, random_rbm, sample
from .rng import derive_seed
from .shower import (
    DEFAULT_DELTA,
    E_MAX_MEV,
    E_MIN_MEV,
    N_VOXELS,
    ShowerRecord,
    TransformedShower,
    forward_transform,
    inverse_transform,
    normalize_incident,
)
from .training import TrainerState, train_step


class QuadripartiteBernoulliRBM(BaseEstimator):
    """Four-partition binary RBM trained by maximum likelihood.

    ``fit`` expects a binary matrix whose columns are the four partitions
    laid out partition-major (all v columns, then h, s, t). The trained
    model is available as ``rbm_``; ``sample`` draws new joint states and
    ``score_samples`` evaluates per-row log-likelihoods with an exact or
    annealed-importance estimate of the log partition function.

    Parameters
    ----------
    sizes : tuple of four ints, partition node counts.
    method : one of ``rdm_k``, ``cd_k``, ``pcd_k``.
    k : Gibbs steps per gradient update.
    learning_rate : SGD step size.
    n_updates : number of minibatch updates.
    batch_size : rows per update.
    weight_sigma_init : scale of the random initial couplings.
    seed : master seed for initialization, batching, and chains.
    """

    def __init__(
        self,
        sizes=(8, 8, 8, 8),
        method="pcd_k",
        k=10,
        learning_rate=0.05,
        n_updates=200,
        batch_size=128,
        weight_sigma_init=0.01,
        seed=0,
    ):
        self.sizes = sizes
        self.method = method
        self.k = k
        self.learning_rate = learning_rate
        self.n_updates = n_updates
        self.batch_size = batch_size
        self.weight_sigma_init = weight_sigma_init
        self.seed = seed

    def _check_is_fitted(self):
        if not hasattr(self, "rbm_"):
            raise NotFittedError("this estimator has not been fitted yet")

    def _validate_states(self, X) -> np.ndarray:
        X = check_array(X, dtype=None)
        layout = PartitionLayout(self.sizes)
        if X.shape[1] != layout.total:
            raise ValueError(
                f"X has {X.shape[1]} columns, expected {layout.total} for sizes {tuple(self.sizes)}"
            )
        arr = np.asarray(X)
        if not np.all(np.isin(arr, (0, 1))):
            raise ValueError("X must be a binary matrix")
        return arr.astype(np.uint8)

    def fit(self, X, y=None):
        states = self._validate_states(X)
        layout = PartitionLayout(self.sizes)
        self.n_features_in_ = layout.total
        rbm = random_rbm(self.sizes, sigma=self.weight_sigma_init, seed=derive_seed(self.seed, 0))
        rbm = rbm.replace(biases={p: np.zeros(layout.size_of(p)) for p in ("v", "h", "s", "t")})

        data = SampleBatch.from_stacked(layout, states, source="data", seed=self.seed)
        rng = np.random.default_rng(derive_seed(self.seed, 1))
        n = len(data)
        batch_size = min(self.batch_size, n)

        chains = None
        if self.method == "pcd_k":
            first = np.arange(batch_size)
            chains = SampleBatch.from_stacked(
                layout, states[first], source="data", seed=self.seed
            )
        state = TrainerState(
            method=self.method, k=self.k, learning_rate=self.learning_rate,
            persistent_chains=chains,
        )
        order = rng.permutation(n)
        cursor = 0
        for _ in range(self.n_updates):
            if cursor + batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            rows = order[cursor : cursor + batch_size]
            cursor += batch_size
            batch = SampleBatch.from_stacked(layout, states[rows], source="data", seed=self.seed)
            rbm = train_step(rbm, batch, state, seed=derive_seed(self.seed, 2))
        self.rbm_ = rbm
        self.trainer_state_ = state
        return self

    def sample(self, n_samples: int, n_steps: int = 1000, seed: int | None = None) -> np.ndarray:
        self._check_is_fitted()
        batch = sample(
            self.rbm_, n_samples, n_steps,
            seed=derive_seed(self.seed, 3) if seed is None else seed,
        )
        return batch.stacked()

    def gibbs(self, X, n_steps: int = 1, seed: int | None = None) -> np.ndarray:
        """Evolve the given joint states by ``n_steps`` block Gibbs steps."""
        self._check_is_fitted()
        states = self._validate_states(X)
        layout = self.rbm_.layout
        init = SampleBatch.from_stacked(layout, states, source="data", seed=0)
        out = sample(
            self.rbm_, len(init), n_steps,
            seed=derive_seed(self.seed, 4) if seed is None else seed,
            init="from_batch", init_batch=init,
        )
        return out.stacked()

    def score_samples(self, X, lnz_method: str = "exact", n_temps: int = 30,
                      n_chains: int = 512) -> np.ndarray:
        """Per-row log-likelihood under the fitted model."""
        self._check_is_fitted()
        states = self._validate_states(X)
        if lnz_method == "exact":
            lnz = exact_ln_z(self.rbm_)
        elif lnz_method == "ais":
            lnz = ais_ln_z(self.rbm_, n_temps=n_temps, n_chains=n_chains,
                           seed=derive_seed(self.seed, 5))
        else:
            raise ValueError(f"unknown lnz_method {lnz_method!r}")
        batch = SampleBatch.from_stacked(self.rbm_.layout, states, source="data", seed=0)
        return -batch_energy(self.rbm_, batch) - lnz.value

    def score(self, X, y=None) -> float:
        return float(np.mean(self.score_samples(X)))

    def log_likelihood(self, X, lnz_method: str = "exact") -> float:
        self._check_is_fitted()
        states = self._validate_states(X)
        batch = SampleBatch.from_stacked(self.rbm_.layout, states, source="data", seed=0)
        lnz = exact_ln_z(self.rbm_) if lnz_method == "exact" else ais_ln_z(
            self.rbm_, seed=derive_seed(self.seed, 5)
        )
        return rbm_log_likelihood(self.rbm_, batch, lnz)


class ShowerLogitTransformer(TransformerMixin, BaseEstimator):
    """Zero-preserving logit preprocessing as a transformer.

    Rows are events: column 0 carries the incident energy in MeV and the
    remaining 6480 columns the voxel energies. ``transform`` returns the
    normalized incident energy followed by the logit-space voxels;
    ``inverse_transform`` restores MeV exactly where voxels were nonzero
    and keeps zeros at zero.
    """

    def __init__(self, delta: float = DEFAULT_DELTA,
                 e_min: float = E_MIN_MEV, e_max: float = E_MAX_MEV):
        self.delta = delta
        self.e_min = e_min
        self.e_max = e_max

    def fit(self, X, y=None):
        X = check_array(X)
        if X.shape[1] != N_VOXELS + 1:
            raise ValueError(f"X must have {N_VOXELS + 1} columns (incident energy + voxels)")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        X = check_array(X)
        if X.shape[1] != N_VOXELS + 1:
            raise ValueError(f"X must have {N_VOXELS + 1} columns (incident energy + voxels)")
        out = np.empty_like(X, dtype=np.float64)
        for i, row in enumerate(X):
            record = ShowerRecord(
                voxels=row[1:].reshape(45, 16, 9), incident_energy=row[0]
            )
            out[i, 0] = normalize_incident(row[0], self.e_min, self.e_max)
            out[i, 1:] = forward_transform(record, delta=self.delta).x
        return out

    def inverse_transform(self, X) -> np.ndarray:
        X = check_array(X)
        if X.shape[1] != N_VOXELS + 1:
            raise ValueError(f"X must have {N_VOXELS + 1} columns (incident energy + voxels)")
        out = np.empty_like(X, dtype=np.float64)
        log_span = np.log(self.e_max) - np.log(self.e_min)
        for i, row in enumerate(X):
            energy = float(np.exp(np.log(self.e_min) + row[0] * log_span))
            shower = inverse_transform(
                TransformedShower(row[1:], incident_energy=energy, delta=self.delta)
            )
            out[i, 0] = energy
            out[i, 1:] = shower.flat()
        return out
