"""Virtual quantum-annealer backend.

Models the device as a Boltzmann sampler at a hidden effective inverse
temperature: programming fixes one draw of that temperature (Gaussian
programming noise, a downward shift while flux biases are active, and an
occasional rare multiplicative excursion), and every read then equilibrates
an independent spin-basis Gibbs chain on the programmed graph. Flux biases
enter as additive per-spin fields at read time, positive values favoring
spin +1, so a strongly flux-biased partition comes back pinned.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import StaleHandleError
from .ising import IsingProgram
from .rbm import PAIRS, PARTITIONS, PartitionLayout, SampleBatch
from .rng import ChainUniforms
from .validation import readonly


@dataclass
class VirtualAnnealerConfig:
    beta_qa: float = 12.0
    programming_noise_sigma: float = 0.0
    flux_beta_shift: float = 0.0
    rare_fluct_prob: float = 0.0
    rare_fluct_scale: float = 0.10
    equilibration_steps: int = 1000
    topology_degree: int | None = None

    def __post_init__(self):
        if self.beta_qa <= 0:
            raise ValueError("beta_qa must be > 0")
        if self.programming_noise_sigma < 0:
            raise ValueError("programming_noise_sigma must be >= 0")
        if self.flux_beta_shift > 0:
            raise ValueError("flux_beta_shift must be <= 0")
        if not 0.0 <= self.rare_fluct_prob <= 1.0:
            raise ValueError("rare_fluct_prob must lie in [0, 1]")
        if self.equilibration_steps < 1:
            raise ValueError("equilibration_steps must be >= 1")
        if self.topology_degree is not None and self.topology_degree < 1:
            raise ValueError("topology_degree must be >= 1")


@dataclass
class ProgramHandle:
    """One programming of the device: frozen program and temperature draw."""

    program: IsingProgram
    effective_beta: float
    base_beta: float
    created: float = field(default_factory=time.time)
    reads_served: int = 0
    closed: bool = False

    def __post_init__(self):
        if self.effective_beta <= 0 or self.base_beta <= 0:
            raise ValueError("effective beta must stay positive")


@dataclass
class TimingReport:
    """Simulated wall-clock budget of one programming plus its reads."""

    num_reads: int
    programming_ms: float = 10.0
    anneal_us_per_read: float = 20.0
    readout_us_per_read: float = 100.0

    @property
    def total_ms(self) -> float:
        per_read_us = self.anneal_us_per_read + self.readout_us_per_read
        return self.programming_ms + self.num_reads * per_read_us / 1000.0


def timing_model(handle: ProgramHandle, num_reads: int) -> TimingReport:
    """Duration estimate only; nothing sleeps."""
    return TimingReport(num_reads=int(num_reads))


def _spin_field_terms():
    # mirrors the binary activation-field wiring, spin basis
    return {
        "v": ((("v", "h"), False, "h"), (("v", "s"), False, "s"), (("v", "t"), False, "t")),
        "h": ((("v", "h"), True, "v"), (("h", "s"), False, "s"), (("h", "t"), False, "t")),
        "s": ((("v", "s"), True, "v"), (("h", "s"), True, "h"), (("s", "t"), False, "t")),
        "t": ((("v", "t"), True, "v"), (("h", "t"), True, "h"), (("s", "t"), True, "s")),
    }


_SPIN_TERMS = _spin_field_terms()


def run_spin_steps(
    program: IsingProgram,
    beta_eff: float,
    z: dict[str, np.ndarray],
    n_steps: int,
    uniforms: ChainUniforms,
    record_steps: tuple[int, ...] = (),
) -> list[dict[str, np.ndarray]]:
    """Block-Gibbs over the spin graph at beta_eff, partitions in v,h,s,t order.

    The conditional for one spin is sigma(-2 beta_eff (scale (delta_i +
    coupler field) - flux_i)). Optionally snapshots the chains after the
    1-based step indices in ``record_steps``.
    """
    layout = program.layout
    scale = program.scale
    flux = {}
    local_bias = {}
    for p in PARTITIONS:
        off = layout.offset_of(p)
        size = layout.size_of(p)
        flux[p] = program.flux_biases[off : off + size]
        local_bias[p] = scale * program.delta[off : off + size] - flux[p]

    per_step = layout.total
    uniforms.reserve(per_step * n_steps)
    snapshots: list[dict[str, np.ndarray]] = []
    wanted = set(record_steps)
    for step in range(1, n_steps + 1):
        for p in PARTITIONS:
            size = layout.size_of(p)
            u = uniforms.next_block(size)
            jfield = np.zeros((u.shape[0], size))
            for pair, transpose, other in _SPIN_TERMS[p]:
                block = program.coupling_blocks[pair]
                jfield += z[other] @ (block if transpose else block.T)
            prob_up = expit(-2.0 * beta_eff * (local_bias[p] + scale * jfield))
            z[p] = np.where(u < prob_up, 1.0, -1.0)
        if step in wanted:
            snapshots.append({p: z[p].copy() for p in PARTITIONS})
    return snapshots


class VirtualAnnealer:
    """Boltzmann sampler standing in for annealing hardware.

    ``seed`` drives the programming-time temperature draws; each read takes
    its own seed so batches are reproducible and independent. When a
    ``topology_degree`` is configured, the device exposes a random sparse
    coupler topology (per layout, drawn once from the backend seed) and
    rejects programs that use forbidden couplers.
    """

    def __init__(self, config: VirtualAnnealerConfig | None = None, seed: int = 0):
        self.config = config or VirtualAnnealerConfig()
        self._rng = np.random.default_rng(seed)
        self._seed = seed
        self._topologies: dict[tuple[int, ...], dict] = {}

    def coupling_masks(self, layout: PartitionLayout) -> dict:
        """The device topology for this layout (all-ones when unconstrained)."""
        if self.config.topology_degree is None:
            return {
                pair: np.ones((layout.size_of(pair[0]), layout.size_of(pair[1])), dtype=np.uint8)
                for pair in PAIRS
            }
        key = layout.sizes
        if key not in self._topologies:
            rng = np.random.default_rng((self._seed, *key))
            masks = {}
            for pair in PAIRS:
                rows, cols = layout.size_of(pair[0]), layout.size_of(pair[1])
                other_total = layout.total - rows
                p_keep = min(1.0, self.config.topology_degree / max(other_total, 1))
                masks[pair] = readonly((rng.random((rows, cols)) < p_keep).astype(np.uint8))
            self._topologies[key] = masks
        return self._topologies[key]

    def _check_topology(self, program: IsingProgram) -> None:
        if self.config.topology_degree is None:
            return
        masks = self.coupling_masks(program.layout)
        for pair in PAIRS:
            block = program.coupling_blocks[pair]
            if np.any(block[masks[pair] == 0] != 0.0):
                raise ValueError(f"program uses couplers outside the device topology on {pair}")

    def program(self, ising: IsingProgram) -> ProgramHandle:
        """Freeze one temperature draw for all subsequent reads."""
        self._check_topology(ising)
        cfg = self.config
        beta = cfg.beta_qa * (1.0 + self._rng.normal(0.0, cfg.programming_noise_sigma)) \
            if cfg.programming_noise_sigma > 0 else cfg.beta_qa
        if np.any(ising.flux_biases != 0.0):
            beta += cfg.flux_beta_shift
        base = max(beta, 1e-9)
        effective = base
        if cfg.rare_fluct_prob > 0 and self._rng.random() < cfg.rare_fluct_prob:
            sign = 1.0 if self._rng.random() < 0.5 else -1.0
            effective = base * (1.0 + sign * cfg.rare_fluct_scale)
        return ProgramHandle(program=ising, effective_beta=max(effective, 1e-9), base_beta=base)

    def read(
        self,
        handle: ProgramHandle,
        num_reads: int,
        seed: int,
        pause: bool = False,
        reads_per_chain: int = 1,
    ) -> SampleBatch:
        """Draw ``num_reads`` states, one equilibrated chain per read.

        ``pause=True`` models a long gap between API calls: the rare
        temperature excursion decays and reads happen at the base draw.
        With ``reads_per_chain > 1`` each chain contributes several reads
        at geometrically spaced step counts instead of one.
        """
        if handle.closed:
            raise StaleHandleError("program handle is closed")
        if num_reads < 1:
            raise ValueError("num_reads must be >= 1")
        if reads_per_chain < 1:
            raise ValueError("reads_per_chain must be >= 1")
        beta_eff = handle.base_beta if pause else handle.effective_beta
        layout = handle.program.layout
        n_chains = -(-num_reads // reads_per_chain)
        uniforms = ChainUniforms(seed, n_chains)
        z = {}
        for p in PARTITIONS:
            u = uniforms.next_block(layout.size_of(p))
            z[p] = np.where(u < 0.5, 1.0, -1.0)
        equil = self.config.equilibration_steps
        record = tuple(equil * (2**j) for j in range(reads_per_chain))
        snapshots = run_spin_steps(
            handle.program, beta_eff, z, record[-1], uniforms, record_steps=record
        )
        rows = []
        for snap in snapshots:
            spins = np.concatenate([snap[p] for p in PARTITIONS], axis=1)
            rows.append(((spins + 1.0) / 2.0).astype(np.uint8))
        states = np.concatenate(rows, axis=0)[:num_reads]
        handle.reads_served += num_reads
        return SampleBatch.from_stacked(
            layout, states, source="annealer", seed=seed, steps=0
        )

    def close(self, handle: ProgramHandle) -> None:
        handle.closed = True
