"""Maximum-likelihood training (Rdm-K / CD-K / PCD-K) on fully observed
joint states, plus the standalone concrete-relaxation pieces (sigmoid-noise
reparameterization and the entropy estimator it feeds).

Training data occupies all four partitions, so the data-side expectations
are plain batch averages of unit values and pairwise products; the
model-side expectations come from block-Gibbs chains whose initialization
distinguishes the three methods: fresh fair-coin states (Rdm-K), the data
batch itself (CD-K), or chains persisted across updates (PCD-K).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit, logit

from .rbm import (
    PAIRS,
    PARTITIONS,
    QuadripartiteRBM,
    SampleBatch,
    load_rbm,
    sample,
    save_rbm,
)
from .rng import derive_seed

METHODS = ("rdm_k", "cd_k", "pcd_k")


@dataclass
class GradientRecord:
    """Per-parameter arrays mirroring the model (biases and weight blocks)."""

    d_bias: dict[str, np.ndarray]
    d_weight: dict[tuple[str, str], np.ndarray]

    @classmethod
    def zeros_like(cls, rbm: QuadripartiteRBM) -> "GradientRecord":
        return cls(
            d_bias={p: np.zeros(rbm.layout.size_of(p)) for p in PARTITIONS},
            d_weight={pair: np.zeros(rbm.weights[pair].shape) for pair in PAIRS},
        )

    def __sub__(self, other: "GradientRecord") -> "GradientRecord":
        return GradientRecord(
            d_bias={p: self.d_bias[p] - other.d_bias[p] for p in PARTITIONS},
            d_weight={pair: self.d_weight[pair] - other.d_weight[pair] for pair in PAIRS},
        )

    def bias_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(v**2) for v in self.d_bias.values())))

    def weight_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(w**2) for w in self.d_weight.values())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.d_bias.values()) and all(
            np.all(np.isfinite(w)) for w in self.d_weight.values()
        )


def _masked(record: GradientRecord, rbm: QuadripartiteRBM) -> GradientRecord:
    for pair in PAIRS:
        mask = rbm.layout.mask_for(pair)
        if mask is not None:
            record.d_weight[pair] = record.d_weight[pair] * mask
    return record


@dataclass
class TrainerState:
    """Training method, step counts, and (for PCD) the persistent chains."""

    method: str
    k: int
    learning_rate: float
    persistent_chains: SampleBatch | None = None
    condition: str | None = None
    epoch: int = 0
    update: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown training method {self.method!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        # zero is allowed so no-op updates and stationarity checks can run
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if (self.persistent_chains is not None) != (self.method == "pcd_k"):
            raise ValueError("persistent_chains must be present exactly for pcd_k")
        if self.condition is not None and self.condition not in PARTITIONS:
            raise ValueError(f"unknown condition partition {self.condition!r}")


def positive_phase(rbm: QuadripartiteRBM, batch: SampleBatch) -> GradientRecord:
    """Data-side expectations of -dE/dphi: batch means of units and products."""
    if batch.layout.sizes != rbm.layout.sizes:
        raise ValueError("batch layout does not match rbm layout")
    n = len(batch)
    x = {p: batch.part(p).astype(np.float64) for p in PARTITIONS}
    record = GradientRecord(
        d_bias={p: x[p].mean(axis=0) for p in PARTITIONS},
        d_weight={pair: x[pair[0]].T @ x[pair[1]] / n for pair in PAIRS},
    )
    return _masked(record, rbm)


def negative_phase(
    rbm: QuadripartiteRBM,
    state: TrainerState,
    seed: int,
    data: SampleBatch | None = None,
    n_chains: int | None = None,
) -> tuple[GradientRecord, SampleBatch]:
    """Model-side expectations from k block-Gibbs steps.

    Returns the gradient record and the final chain states (which PCD feeds
    back into the next update). ``data`` is required for CD initialization
    and whenever a condition partition must be clamped to the batch values.
    """
    clamped = {state.condition} if state.condition else set()
    clamp_values = None
    if state.condition:
        if data is None:
            raise ValueError("conditioned training needs the data batch for clamp values")
        clamp_values = {state.condition: data.part(state.condition)}

    if state.method == "cd_k":
        if data is None:
            raise ValueError("cd_k initializes chains from the data batch")
        chains = sample(
            rbm, len(data), state.k, seed,
            init="from_batch", init_batch=data,
            clamped=clamped, clamp_values=clamp_values,
        )
    elif state.method == "pcd_k":
        prev = state.persistent_chains
        chains = sample(
            rbm, len(prev), state.k, seed,
            init="from_batch", init_batch=prev,
            clamped=clamped, clamp_values=clamp_values,
        )
    else:  # rdm_k
        n = n_chains if n_chains is not None else (len(data) if data is not None else 128)
        chains = sample(
            rbm, n, state.k, seed,
            clamped=clamped, clamp_values=clamp_values,
        )

    return positive_phase(rbm, chains), chains


def train_step(
    rbm: QuadripartiteRBM,
    batch: SampleBatch,
    state: TrainerState,
    seed: int,
    log: "TrainingLog | None" = None,
) -> QuadripartiteRBM:
    """One stochastic gradient ascent step on the log-likelihood.

    Parameters move by learning_rate * (positive - negative) expectations;
    masked couplings stay exactly zero. Increments the update counter and,
    for PCD, stores the final chains. A non-finite gradient aborts. When a
    log is given, appends one row (update index, the data batch's mean
    negative energy under the updated model, gradient norms).
    """
    pos = positive_phase(rbm, batch)
    step_seed = derive_seed(seed, state.update)
    neg, chains = negative_phase(rbm, state, step_seed, data=batch)
    grad = pos - neg
    if not grad.is_finite():
        raise RuntimeError(
            f"non-finite gradient at update {state.update} "
            f"(bias norm {grad.bias_norm()!r}, weight norm {grad.weight_norm()!r})"
        )
    lr = state.learning_rate
    updated = rbm.replace(
        biases={p: rbm.biases[p] + lr * grad.d_bias[p] for p in PARTITIONS},
        weights={pair: rbm.weights[pair] + lr * grad.d_weight[pair] for pair in PAIRS},
    )
    if state.method == "pcd_k":
        state.persistent_chains = chains
    if log is not None:
        from .rbm import batch_energy

        log.record(state.update, float(-batch_energy(updated, batch).mean()), grad)
    state.update += 1
    return updated


@dataclass
class RelaxedSample:
    """Sigmoid-relaxed binary draws: zeta = sigma((l + sigma^-1(rho)) * beta)."""

    zeta: np.ndarray
    logits: np.ndarray
    anneal_beta: float
    noise: np.ndarray

    def __post_init__(self):
        expected = expit((self.logits + logit(self.noise)) * self.anneal_beta)
        if not np.allclose(self.zeta, expected, rtol=0, atol=0, equal_nan=False):
            raise ValueError("zeta does not satisfy the defining relaxation formula")


def gumbel_relax(logits, anneal_beta: float, rng) -> RelaxedSample:
    """Draw relaxed binary units; the hard limit satisfies P(zeta > 1/2) = sigma(logit).

    The logistic noise sigma^-1(rho) with uniform rho is the difference of
    two standard Gumbel draws, which is what makes the hard limit exact.
    """
    if anneal_beta <= 0:
        raise ValueError("anneal_beta must be > 0")
    logits = np.asarray(logits, dtype=np.float64)
    gen = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    rho = gen.uniform(np.finfo(float).tiny, 1.0, size=logits.shape)
    zeta = expit((logits + logit(rho)) * anneal_beta)
    return RelaxedSample(zeta=zeta, logits=logits, anneal_beta=float(anneal_beta), noise=rho)


def entropy_estimate(logits, zeta_batch) -> float:
    """Mean log-mass the relaxed draws assign to their Bernoulli units.

    Computes mean over the batch of sum_i [zeta_i ln sigma(l_i) +
    (1 - zeta_i) ln(1 - sigma(l_i))] with log-sigmoid stability; hard 0/1
    zetas contribute only their active branch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    zeta = np.atleast_2d(np.asarray(zeta_batch, dtype=np.float64))
    if np.any(zeta < 0) or np.any(zeta > 1):
        raise ValueError("zeta entries must lie in [0, 1]")
    log_p1 = log_expit(logits)
    log_p0 = log_expit(-logits)
    term_on = np.where(zeta > 0, zeta * log_p1, 0.0)
    term_off = np.where(zeta < 1, (1.0 - zeta) * log_p0, 0.0)
    return float((term_on + term_off).sum(axis=1).mean())


class TrainingLog:
    """CSV log, one row per update: index, mean negative energy, gradient norms."""

    columns = ("update", "mean_neg_energy", "grad_norm_bias", "grad_norm_weight")

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.columns)

    def record(self, update: int, mean_neg_energy: float, grad: GradientRecord) -> None:
        self._writer.writerow(
            [update, repr(float(mean_neg_energy)), repr(grad.bias_norm()), repr(grad.weight_norm())]
        )
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def save_checkpoint(prefix, rbm: QuadripartiteRBM, state: TrainerState) -> None:
    """Write model + trainer state next to each other under a common prefix."""
    prefix = Path(prefix)
    save_rbm(prefix.with_suffix(".rbm.npz"), rbm)
    meta = {
        "method": state.method,
        "k": state.k,
        "learning_rate": state.learning_rate,
        "condition": state.condition,
        "epoch": state.epoch,
        "update": state.update,
        "has_chains": state.persistent_chains is not None,
    }
    prefix.with_suffix(".trainer.json").write_text(json.dumps(meta, indent=2))
    if state.persistent_chains is not None:
        chains = state.persistent_chains
        with open(prefix.with_suffix(".chains.npz"), "wb") as fh:
            np.savez(
                fh,
                states=chains.stacked(),
                seed=np.array([chains.seed], dtype=np.uint64),
                steps=np.array([chains.steps], dtype=np.uint64),
            )


def load_checkpoint(prefix) -> tuple[QuadripartiteRBM, TrainerState]:
    prefix = Path(prefix)
    rbm = load_rbm(prefix.with_suffix(".rbm.npz"))
    meta = json.loads(prefix.with_suffix(".trainer.json").read_text())
    chains = None
    if meta["has_chains"]:
        with np.load(prefix.with_suffix(".chains.npz")) as data:
            chains = SampleBatch.from_stacked(
                rbm.layout,
                data["states"],
                source="gibbs",
                seed=int(data["seed"][0]),
                steps=int(data["steps"][0]),
            )
    state = TrainerState(
        method=meta["method"],
        k=meta["k"],
        learning_rate=meta["learning_rate"],
        persistent_chains=chains,
        condition=meta["condition"],
        epoch=meta["epoch"],
        update=meta["update"],
    )
    return rbm, state
