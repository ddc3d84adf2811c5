"""Exact enumeration oracles and stochastic log-partition-function estimates.

Enumeration walks the full joint state space in chunks (states are decoded
from integer indices in partition-major bit order), so everything here is
usable only at desk scale; the hard node cap makes that explicit. The AIS
and reverse-AIS estimators anneal couplings along a linear inverse-
temperature ladder while keeping biases fixed, so the base distribution is
the independent-unit model whose log partition function is analytic.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import expit, logsumexp

from .rbm import (
    PAIRS,
    PARTITIONS,
    QuadripartiteRBM,
    SampleBatch,
    batch_energy,
    batch_pair_energy,
    run_block_steps,
)
from .rng import ChainUniforms

DEFAULT_NODE_CAP = 26
_CHUNK = 1 << 16


@dataclass
class LnZEstimate:
    """Natural log of the partition function with its standard error."""

    value: float
    std_error: float
    method: Literal["exact", "ais", "rais"]
    n_temps: int = 0
    n_chains: int = 0

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be >= 0")
        if self.method == "exact" and self.std_error != 0.0:
            raise ValueError("exact estimates carry zero std_error")

    def to_json(self) -> str:
        return json.dumps(
            {
                "value": self.value,
                "std_error": self.std_error,
                "method": self.method,
                "n_temps": self.n_temps,
                "n_chains": self.n_chains,
            }
        )


@dataclass
class DensityOfStates:
    """Histogram of energies, either Boltzmann-weighted (exact) or sampled."""

    bin_edges: np.ndarray
    probabilities: np.ndarray
    normalized: bool = True
    counts: np.ndarray | None = None

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.bin_edges.ndim != 1 or len(self.bin_edges) != len(self.probabilities) + 1:
            raise ValueError("need len(bin_edges) == len(probabilities) + 1")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if self.normalized and abs(self.probabilities.sum() - 1.0) > 1e-9:
            raise ValueError("normalized probabilities must sum to 1")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "probability"])
            for left, right, p in zip(self.bin_edges[:-1], self.bin_edges[1:], self.probabilities):
                writer.writerow([repr(float(left)), repr(float(right)), repr(float(p))])


def tv_distance(a: DensityOfStates, b: DensityOfStates) -> float:
    """Total-variation distance between two histograms on identical edges."""
    if not np.array_equal(a.bin_edges, b.bin_edges):
        raise ValueError("histograms must share identical bin edges")
    return 0.5 * float(np.abs(a.probabilities - b.probabilities).sum())


def _check_cap(rbm: QuadripartiteRBM, max_nodes: int) -> int:
    total = rbm.layout.total
    if total > max_nodes:
        raise ValueError(
            f"exact enumeration over {total} nodes needs 2^{total} states, above the "
            f"cap of {max_nodes}; raise max_nodes explicitly if you really want this"
        )
    return total


def _state_chunks(layout, chunk=_CHUNK):
    """Yield (n_chunk, size) 0/1 float matrices per partition for all joint states."""
    total = layout.total
    shifts = np.arange(total, dtype=np.int64)
    n_states = 1 << total
    for start in range(0, n_states, chunk):
        idx = np.arange(start, min(start + chunk, n_states), dtype=np.int64)
        bits = ((idx[:, None] >> shifts[None, :]) & 1).astype(np.float64)
        parts = {}
        for p in PARTITIONS:
            off = layout.offset_of(p)
            parts[p] = bits[:, off : off + layout.size_of(p)]
        yield parts


def exact_ln_z(
    rbm: QuadripartiteRBM,
    beta: float = 1.0,
    max_nodes: int = DEFAULT_NODE_CAP,
    energy_offset: float = 0.0,
) -> LnZEstimate:
    """ln sum over all joint states of exp(-beta (E + energy_offset)).

    Runs a streaming log-sum-exp over state chunks, so large positive or
    negative offsets shift the result exactly without overflow.
    """
    _check_cap(rbm, max_nodes)
    running = -np.inf
    for parts in _state_chunks(rbm.layout):
        e = batch_energy(rbm, parts) + energy_offset
        running = np.logaddexp(running, logsumexp(-beta * e))
    return LnZEstimate(value=float(running), std_error=0.0, method="exact")


@dataclass
class ExactMoments:
    """Ensemble expectations at inverse temperature beta, by enumeration.

    ``grad_bias[p]`` and ``grad_weight[pair]`` hold the mean of dE/dphi for
    each parameter (note dE/da_i = -v_i, dE/dW_ij = -x_i x_j), while the
    ``energy_grad_*`` fields hold the mean of E * dE/dphi.
    """

    beta: float
    mean_energy: float
    var_energy: float
    grad_bias: dict = field(default_factory=dict)
    grad_weight: dict = field(default_factory=dict)
    energy_grad_bias: dict = field(default_factory=dict)
    energy_grad_weight: dict = field(default_factory=dict)


def exact_moments(
    rbm: QuadripartiteRBM,
    beta: float = 1.0,
    max_nodes: int = DEFAULT_NODE_CAP,
    want_gradients: bool = True,
) -> ExactMoments:
    _check_cap(rbm, max_nodes)
    ln_z = exact_ln_z(rbm, beta, max_nodes=max_nodes).value

    mean_e = 0.0
    mean_e2 = 0.0
    gb = {p: np.zeros(rbm.layout.size_of(p)) for p in PARTITIONS}
    gw = {pair: np.zeros(rbm.weights[pair].shape) for pair in PAIRS}
    egb = {p: np.zeros(rbm.layout.size_of(p)) for p in PARTITIONS}
    egw = {pair: np.zeros(rbm.weights[pair].shape) for pair in PAIRS}

    for parts in _state_chunks(rbm.layout):
        e = batch_energy(rbm, parts)
        prob = np.exp(-beta * e - ln_z)
        mean_e += float(prob @ e)
        mean_e2 += float(prob @ (e * e))
        if not want_gradients:
            continue
        pe = prob * e
        for p in PARTITIONS:
            gb[p] -= prob @ parts[p]
            egb[p] -= pe @ parts[p]
        for pair in PAIRS:
            xp, xq = parts[pair[0]], parts[pair[1]]
            gw[pair] -= (xp * prob[:, None]).T @ xq
            egw[pair] -= (xp * pe[:, None]).T @ xq

    return ExactMoments(
        beta=beta,
        mean_energy=mean_e,
        var_energy=mean_e2 - mean_e**2,
        grad_bias=gb,
        grad_weight=gw,
        energy_grad_bias=egb,
        energy_grad_weight=egw,
    )


def exact_sample(
    rbm: QuadripartiteRBM, n: int, seed: int, beta: float = 1.0, max_nodes: int = 20
) -> SampleBatch:
    """Independent draws from the exact Boltzmann distribution."""
    total = _check_cap(rbm, max_nodes)
    log_w = np.empty(1 << total)
    pos = 0
    for parts in _state_chunks(rbm.layout):
        e = batch_energy(rbm, parts)
        log_w[pos : pos + len(e)] = -beta * e
        pos += len(e)
    log_w -= logsumexp(log_w)
    cdf = np.cumsum(np.exp(log_w))
    cdf[-1] = 1.0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    shifts = np.arange(total, dtype=np.int64)
    bits = ((idx[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return SampleBatch.from_stacked(rbm.layout, bits, source="exact", seed=seed, steps=0)


def fd_bin_count(energies: np.ndarray, lo: float, hi: float) -> int:
    """Freedman-Diaconis bin count for the window [lo, hi]."""
    q75, q25 = np.percentile(energies, [75, 25])
    width = 2.0 * (q75 - q25) / max(len(energies), 1) ** (1.0 / 3.0)
    if width <= 0:
        return 1
    return max(1, int(np.ceil((hi - lo) / width)))


def exact_energy_range(rbm: QuadripartiteRBM, max_nodes: int = DEFAULT_NODE_CAP):
    _check_cap(rbm, max_nodes)
    lo, hi = np.inf, -np.inf
    for parts in _state_chunks(rbm.layout):
        e = batch_energy(rbm, parts)
        lo = min(lo, float(e.min()))
        hi = max(hi, float(e.max()))
    return lo, hi


def density_of_states(
    rbm: QuadripartiteRBM,
    source: SampleBatch | None = None,
    n_bins: int | None = None,
    edges: np.ndarray | None = None,
    beta: float = 1.0,
    max_nodes: int = DEFAULT_NODE_CAP,
) -> DensityOfStates:
    """Energy histogram of the model.

    With ``source=None`` every joint state contributes its exact Boltzmann
    probability; with a sample batch the histogram is the empirical one.
    ``edges`` wins over ``n_bins``; by default sampled histograms use a
    Freedman-Diaconis bin count over the sample range.
    """
    if source is not None:
        energies = batch_energy(rbm, source)
        if edges is None:
            if n_bins is None:
                lo, hi = float(energies.min()), float(energies.max())
                n_bins = fd_bin_count(energies, lo, hi)
                edges = np.linspace(lo, hi, n_bins + 1)
            else:
                edges = np.linspace(float(energies.min()), float(energies.max()), n_bins + 1)
        counts, _ = np.histogram(energies, bins=edges)
        return DensityOfStates(
            bin_edges=edges,
            probabilities=counts / counts.sum(),
            normalized=True,
            counts=counts,
        )

    if edges is None:
        lo, hi = exact_energy_range(rbm, max_nodes=max_nodes)
        if n_bins is None:
            n_bins = 64
        span = hi - lo
        pad = 1e-9 * max(1.0, abs(span))
        edges = np.linspace(lo - pad, hi + pad, n_bins + 1)
    ln_z = exact_ln_z(rbm, beta, max_nodes=max_nodes).value
    probs = np.zeros(len(edges) - 1)
    for parts in _state_chunks(rbm.layout):
        e = batch_energy(rbm, parts)
        w = np.exp(-beta * e - ln_z)
        hist, _ = np.histogram(e, bins=edges, weights=w)
        probs += hist
    return DensityOfStates(bin_edges=np.asarray(edges, dtype=float), probabilities=probs)


def dos_comparison(
    rbm: QuadripartiteRBM,
    batch: SampleBatch,
    n_bins: int | None = None,
    max_nodes: int = DEFAULT_NODE_CAP,
):
    """Exact vs sampled density of states on shared edges, plus their TV distance."""
    lo, hi = exact_energy_range(rbm, max_nodes=max_nodes)
    energies = batch_energy(rbm, batch)
    if n_bins is None:
        n_bins = fd_bin_count(energies, lo, hi)
    pad = 1e-9 * max(1.0, abs(hi - lo))
    edges = np.linspace(lo - pad, hi + pad, n_bins + 1)
    exact_dos = density_of_states(rbm, edges=edges, max_nodes=max_nodes)
    sampled_dos = density_of_states(rbm, source=batch, edges=edges)
    return exact_dos, sampled_dos, tv_distance(exact_dos, sampled_dos)


def _base_ln_z(rbm: QuadripartiteRBM) -> float:
    return float(sum(np.logaddexp(0.0, rbm.biases[p]).sum() for p in PARTITIONS))


def _base_sample(rbm: QuadripartiteRBM, n_chains: int, uniforms: ChainUniforms):
    states = {}
    for p in PARTITIONS:
        u = uniforms.next_block(rbm.layout.size_of(p))
        states[p] = (u < expit(rbm.biases[p])[None, :]).astype(np.float64)
    return states


def _log_mean_exp_with_se(log_w: np.ndarray) -> tuple[float, float]:
    n = len(log_w)
    m = float(logsumexp(log_w) - np.log(n))
    rel = np.exp(log_w - m)
    se = float(rel.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return m, se


def ais_ln_z(
    rbm: QuadripartiteRBM,
    n_temps: int = 30,
    n_chains: int = 512,
    seed: int = 0,
    direction: Literal["forward", "reverse"] = "forward",
    init_steps: int = 300,
    init_batch: SampleBatch | None = None,
) -> LnZEstimate:
    """Annealed importance sampling estimate of ln Z at unit inverse temperature.

    The ladder scales the coupling blocks by beta_k = k / n_temps while the
    biases stay put, stepping each chain with one block Gibbs update per
    rung. ``forward`` starts at the analytic independent-unit base (a
    stochastic lower-bound-flavored estimate); ``reverse`` runs the ladder
    backwards from approximate model samples (an upper-bound-flavored one),
    taken from ``init_batch`` when given and otherwise Gibbs-equilibrated
    for ``init_steps`` block steps.
    """
    if n_temps < 2:
        raise ValueError("need at least two ladder temperatures")
    if n_chains < 2:
        raise ValueError("need at least two chains for a standard error")
    betas = np.arange(n_temps + 1) / n_temps
    if np.any(np.diff(betas) <= 0):
        raise ValueError("degenerate ladder")
    uniforms = ChainUniforms(seed, n_chains)
    ln_z0 = _base_ln_z(rbm)
    log_w = np.zeros(n_chains)

    if direction == "forward":
        states = _base_sample(rbm, n_chains, uniforms)
        for k in range(1, n_temps + 1):
            d_beta = betas[k] - betas[k - 1]
            log_w += -d_beta * batch_pair_energy(rbm, states)
            if k < n_temps:
                run_block_steps(rbm.scale_weights(betas[k]), states, 1, uniforms)
        m, se = _log_mean_exp_with_se(log_w)
        return LnZEstimate(ln_z0 + m, se, "ais", n_temps=n_temps, n_chains=n_chains)

    if direction == "reverse":
        if init_batch is not None:
            if len(init_batch) != n_chains:
                raise ValueError("init_batch must hold one state per chain")
            states = {p: init_batch.part(p).astype(np.float64) for p in PARTITIONS}
        else:
            states = {
                p: (uniforms.next_block(rbm.layout.size_of(p)) < 0.5).astype(np.float64)
                for p in PARTITIONS
            }
            run_block_steps(rbm, states, init_steps, uniforms)
        for k in range(n_temps, 0, -1):
            d_beta = betas[k] - betas[k - 1]
            log_w += d_beta * batch_pair_energy(rbm, states)
            if k > 1:
                run_block_steps(rbm.scale_weights(betas[k - 1]), states, 1, uniforms)
        m, se = _log_mean_exp_with_se(log_w)
        return LnZEstimate(ln_z0 - m, se, "rais", n_temps=n_temps, n_chains=n_chains)

    raise ValueError(f"unknown direction {direction!r}")


def rbm_log_likelihood(rbm: QuadripartiteRBM, data: SampleBatch, lnz: LnZEstimate) -> float:
    """Mean log-probability of the batch under the model, given ln Z."""
    return float(np.mean(-batch_energy(rbm, data)) - lnz.value)
