"""Effective-inverse-temperature estimation for a hidden-temperature sampler.

The backend samples the programmed Hamiltonian at an unknown inverse
temperature. Both estimation methods rescale the shipped parameters by the
current estimate ``beta_t``, draw from the backend and from the reference
model at unit temperature, and compare the ORIGINAL Hamiltonian's mean over
the two sample sets (the user never sees the hidden temperature itself):

* Method 1 (KL gradient):   beta' = beta - eta (<H>_qa - <H>_model)
* Method 2 (ratio map):     beta' = beta (<H>_qa / <H>_model)^delta

Both maps are stationary exactly at the hidden temperature. The ratio
map's linear stability multiplier is lambda(delta); the adaptive variant
re-picks delta each iteration at the lambda = 0 root. Iteration stops when
the mean difference drops below the reduced standard error of the two
sample sets.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ising import apply_scale, condition_to_flux, rbm_to_ising
from .rbm import QuadripartiteRBM, batch_energy, sample
from .rng import derive_seed

METHODS = ("kl_gradient", "ratio_fixed", "ratio_adaptive")

DEFAULT_DELTA_MAX = 10.0
DEFAULT_DELTA_MIN = 1e-3
DENOM_EPS = 1e-9


@dataclass
class MomentPair:
    """Mean/variance of the original Hamiltonian on both sample sets."""

    mean_h_qa: float
    var_h_qa: float
    n_qa: int
    mean_h_rbm: float
    var_h_rbm: float
    n_rbm: int

    def __post_init__(self):
        if self.var_h_qa < 0 or self.var_h_rbm < 0:
            raise ValueError("variances must be >= 0")
        if self.n_qa < 2 or self.n_rbm < 2:
            raise ValueError("need at least two samples on each side")


@dataclass
class HistoryRecord:
    iteration: int
    beta: float
    mean_h_qa: float
    mean_h_rbm: float
    var_h_qa: float
    var_h_rbm: float
    lambda_value: float
    converged: bool


@dataclass
class CalibrationState:
    """Current estimate, stability parameter, and the full iteration trace."""

    beta_t: float
    delta: float = 1.0
    method: str = "ratio_adaptive"
    history: list[HistoryRecord] = field(default_factory=list)
    converged: bool = False
    clamp_events: int = 0

    def __post_init__(self):
        if self.beta_t <= 0:
            raise ValueError("beta_t must be > 0")
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.method not in METHODS:
            raise ValueError(f"unknown calibration method {self.method!r}")


def measure_moments(
    rbm: QuadripartiteRBM,
    backend,
    beta_t: float,
    n_samples: int,
    seed: int,
    condition: tuple[str, np.ndarray] | None = None,
    gibbs_steps: int = 300,
    flux_strength: float | None = None,
    ising=None,
) -> MomentPair:
    """One round of paired measurements at the current estimate.

    Ships the model rescaled by 1/beta_t to the backend and reads
    ``n_samples``; draws as many unit-temperature block-Gibbs samples from
    the reference model (with the condition partition clamped classically
    and flux-pinned on the backend when a condition is given); returns the
    original Hamiltonian's moments on both sets.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if beta_t <= 0:
        raise ValueError("beta_t must be > 0")
    program = apply_scale(ising if ising is not None else rbm_to_ising(rbm), beta_t)
    clamped, clamp_values = (), None
    if condition is not None:
        partition, bits = condition
        strength = flux_strength if flux_strength is not None else 50.0 / beta_t
        program = program.replace(
            flux_biases=condition_to_flux(rbm.layout, partition, bits, strength)
        )
        clamped, clamp_values = (partition,), {partition: bits}

    handle = backend.program(program)
    qa_batch = backend.read(handle, n_samples, seed=derive_seed(seed, 0))
    model_batch = sample(
        rbm, n_samples, gibbs_steps, seed=derive_seed(seed, 1),
        clamped=clamped, clamp_values=clamp_values,
    )
    h_qa = batch_energy(rbm, qa_batch)
    h_model = batch_energy(rbm, model_batch)
    return MomentPair(
        mean_h_qa=float(h_qa.mean()),
        var_h_qa=float(h_qa.var(ddof=1)),
        n_qa=n_samples,
        mean_h_rbm=float(h_model.mean()),
        var_h_rbm=float(h_model.var(ddof=1)),
        n_rbm=n_samples,
    )


def stability_lambda(delta: float, moments: MomentPair) -> float:
    """Linear stability multiplier of the ratio map near its fixed point.

    |1 + sigma^2_qa / <H>_model| at delta = 1 (the denominators differ
    between the two branches by construction), |1 + delta sigma^2_qa /
    <H>_qa| otherwise. Below one contracts, above one repels.
    """
    if delta == 1.0:
        if abs(moments.mean_h_rbm) < DENOM_EPS:
            raise ValueError("model-side mean energy too close to zero")
        return abs(1.0 + moments.var_h_qa / moments.mean_h_rbm)
    if abs(moments.mean_h_qa) < DENOM_EPS:
        raise ValueError("backend-side mean energy too close to zero")
    return abs(1.0 + delta * moments.var_h_qa / moments.mean_h_qa)


def adaptive_delta(
    moments: MomentPair,
    delta_max: float = DEFAULT_DELTA_MAX,
    delta_min: float = DEFAULT_DELTA_MIN,
) -> float:
    """Stability parameter at the lambda = 0 root, clamped to (0, delta_max].

    The root -<H>_qa / sigma^2_qa presumes negative mean energies; a
    positive mean falls back to the minimum with a warning.
    """
    if moments.var_h_qa <= 0:
        raise ValueError("backend-side variance must be positive")
    if moments.mean_h_qa == 0:
        raise ValueError("backend-side mean energy must be nonzero")
    root = -moments.mean_h_qa / moments.var_h_qa
    if root <= 0:
        warnings.warn(
            "backend mean energy is positive; adaptive delta clamped to the minimum",
            stacklevel=2,
        )
        return delta_min
    return min(root, delta_max)


def converged(moments: MomentPair) -> bool:
    """Reduced-standard-error stopping rule on the two sample means."""
    diff = abs(moments.mean_h_qa - moments.mean_h_rbm)
    if diff == 0.0:
        return True
    n = min(moments.n_qa, moments.n_rbm)
    s_qa = np.sqrt(moments.var_h_qa)
    s_rbm = np.sqrt(moments.var_h_rbm)
    if s_qa + s_rbm == 0.0:
        return False
    threshold = (2.0 / np.sqrt(n)) * (s_qa * s_rbm) / (s_rbm + s_qa)
    return diff < threshold


def _kl_lambda(state: CalibrationState, moments: MomentPair, eta: float) -> float:
    # the KL iteration's analog of the ratio-map multiplier
    return abs(1.0 - eta * moments.var_h_qa / state.beta_t)


def _append(state, moments, lambda_value, is_converged):
    state.history.append(
        HistoryRecord(
            iteration=len(state.history),
            beta=state.beta_t,
            mean_h_qa=moments.mean_h_qa,
            mean_h_rbm=moments.mean_h_rbm,
            var_h_qa=moments.var_h_qa,
            var_h_rbm=moments.var_h_rbm,
            lambda_value=lambda_value,
            converged=is_converged,
        )
    )


def step_kl(state: CalibrationState, moments: MomentPair, eta: float) -> CalibrationState:
    """Gradient step on the temperature mismatch; clamps instead of going
    nonpositive so instability experiments can run to completion."""
    if eta <= 0:
        raise ValueError("eta must be > 0")
    _append(state, moments, _kl_lambda(state, moments, eta), False)
    proposal = state.beta_t - eta * (moments.mean_h_qa - moments.mean_h_rbm)
    if proposal <= 0:
        proposal = state.beta_t / 2.0
        state.clamp_events += 1
    state.beta_t = proposal
    return state


def step_ratio(
    state: CalibrationState, moments: MomentPair, delta: float | None = None
) -> CalibrationState:
    """Multiplicative fixed-point update with stability exponent delta."""
    d = state.delta if delta is None else delta
    if abs(moments.mean_h_rbm) < DENOM_EPS:
        raise ValueError(
            "model-side mean energy is numerically zero; the ratio map is "
            "undefined here, fall back to the KL-gradient method"
        )
    ratio = moments.mean_h_qa / moments.mean_h_rbm
    if ratio <= 0:
        raise ValueError(
            "backend and model mean energies disagree in sign; the ratio map "
            "is undefined here, fall back to the KL-gradient method"
        )
    _append(state, moments, stability_lambda(d, moments), False)
    state.delta = d
    state.beta_t = state.beta_t * ratio**d
    return state


def calibrate(
    rbm: QuadripartiteRBM,
    backend,
    method: str,
    beta_0: float,
    max_iters: int,
    n_samples: int,
    seed: int,
    condition: tuple[str, np.ndarray] | None = None,
    eta: float | None = None,
    delta: float = 1.0,
    gibbs_steps: int = 300,
    flux_strength: float | None = None,
) -> CalibrationState:
    """Measure / test / step until the stopping rule fires.

    Each iteration appends exactly one history record (taken at the beta
    the moments were measured at). ``eta=None`` picks the KL step size
    0.1 * beta_t / sigma^2_qa per iteration; the adaptive ratio method
    re-derives delta at the lambda = 0 root each iteration. Returns an
    unconverged state with the full trace when max_iters runs out.
    """
    if beta_0 <= 0:
        raise ValueError("beta_0 must be > 0")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    state = CalibrationState(beta_t=beta_0, delta=delta, method=method)
    ising = rbm_to_ising(rbm)
    for t in range(max_iters):
        moments = measure_moments(
            rbm, backend, state.beta_t, n_samples, derive_seed(seed, t),
            condition=condition, gibbs_steps=gibbs_steps,
            flux_strength=flux_strength, ising=ising,
        )
        if converged(moments):
            lam = (
                _kl_lambda(state, moments, eta if eta is not None else
                           0.1 * state.beta_t / max(moments.var_h_qa, DENOM_EPS))
                if method == "kl_gradient"
                else stability_lambda(state.delta, moments)
            )
            _append(state, moments, lam, True)
            state.converged = True
            return state
        if method == "kl_gradient":
            step = eta if eta is not None else 0.1 * state.beta_t / max(moments.var_h_qa, DENOM_EPS)
            step_kl(state, moments, step)
        elif method == "ratio_adaptive":
            step_ratio(state, moments, adaptive_delta(moments))
        elif method == "ratio_fixed":
            step_ratio(state, moments)
        else:
            raise ValueError(f"unknown calibration method {method!r}")
    return state


def history_to_csv(state: CalibrationState, path) -> None:
    """Iteration trace for plotting convergence curves."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "beta", "mean_h_qa", "mean_h_rbm",
             "var_h_qa", "var_h_rbm", "lambda", "converged"]
        )
        for rec in state.history:
            writer.writerow(
                [rec.iteration, repr(rec.beta), repr(rec.mean_h_qa), repr(rec.mean_h_rbm),
                 repr(rec.var_h_qa), repr(rec.var_h_rbm), repr(rec.lambda_value),
                 int(rec.converged)]
            )
