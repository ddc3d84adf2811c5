"""Quadripartite restricted Boltzmann machine: energy, conditionals, block Gibbs.

The four partitions are labelled ``v, h, s, t``. Couplings exist only between
distinct partitions, one weight block per unordered pair. The energy of a
joint binary state is

    E(v,h,s,t) = - a.v - b.h - c.s - d.t
                 - v'Wvh h - v'Wvs s - v'Wvt t
                 - h'Whs s - h'Wht t - s'Wst t

and every single-partition conditional factorizes into independent sigmoids
of bias-plus-activation-field terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping

import numpy as np
from scipy.special import expit

from .rng import ChainUniforms
from .validation import (
    as_binary_matrix,
    as_binary_vector,
    as_float_matrix,
    as_float_vector,
    readonly,
)

PARTITIONS: tuple[str, ...] = ("v", "h", "s", "t")
PAIRS: tuple[tuple[str, str], ...] = (
    ("v", "h"),
    ("v", "s"),
    ("v", "t"),
    ("h", "s"),
    ("h", "t"),
    ("s", "t"),
)

SampleSource = Literal["gibbs", "annealer", "exact", "data"]
_SOURCES = {"gibbs", "annealer", "exact", "data"}

RBM_FORMAT_VERSION = 1


class PartitionLayout:
    """Node counts of the four partitions plus optional coupling masks.

    A mask for pair ``(p, q)`` has shape ``(size_p, size_q)``; a zero entry
    forbids the corresponding coupling. Dense connectivity is the default.
    Sizes must be positive except in the reduced form produced by
    conditioning, which leaves one partition empty.
    """

    def __init__(
        self,
        sizes: Iterable[int],
        coupling_masks: Mapping[tuple[str, str], np.ndarray] | None = None,
        allow_empty: bool = False,
    ):
        sizes = tuple(int(n) for n in sizes)
        if len(sizes) != 4:
            raise ValueError(f"expected four partition sizes, got {len(sizes)}")
        low = 0 if allow_empty else 1
        if any(n < low for n in sizes):
            raise ValueError(f"partition sizes must be >= {low}, got {sizes}")
        self.sizes = sizes
        self._size = dict(zip(PARTITIONS, sizes))

        masks: dict[tuple[str, str], np.ndarray] = {}
        if coupling_masks:
            for pair, mask in coupling_masks.items():
                if pair not in PAIRS:
                    raise ValueError(f"unknown partition pair {pair!r}")
                expect = (self._size[pair[0]], self._size[pair[1]])
                arr = np.asarray(mask)
                if arr.shape != expect:
                    raise ValueError(
                        f"mask for {pair} must have shape {expect}, got {arr.shape}"
                    )
                arr = arr.astype(np.uint8, copy=True)
                if not np.all((arr == 0) | (arr == 1)):
                    raise ValueError(f"mask for {pair} must be binary")
                masks[pair] = readonly(arr)
        self.coupling_masks = masks

    def size_of(self, partition: str) -> int:
        if partition not in self._size:
            raise ValueError(f"unknown partition {partition!r}")
        return self._size[partition]

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def mask_for(self, pair: tuple[str, str]) -> np.ndarray | None:
        return self.coupling_masks.get(pair)

    def offset_of(self, partition: str) -> int:
        """Start of the partition in the partition-major global node order."""
        off = 0
        for p in PARTITIONS:
            if p == partition:
                return off
            off += self._size[p]
        raise ValueError(f"unknown partition {partition!r}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, PartitionLayout):
            return NotImplemented
        if self.sizes != other.sizes:
            return False
        if set(self.coupling_masks) != set(other.coupling_masks):
            return False
        return all(
            np.array_equal(m, other.coupling_masks[k]) for k, m in self.coupling_masks.items()
        )

    def __repr__(self) -> str:
        return f"PartitionLayout(sizes={self.sizes})"


class QuadripartiteRBM:
    """Parameters of the four-partition RBM.

    ``biases`` maps partition tag to a bias vector, ``weights`` maps each
    pair in :data:`PAIRS` to its block. Arrays are copied, validated
    (finite, shape-consistent, zero wherever a mask forbids a coupling) and
    frozen; training produces new instances.
    """

    def __init__(
        self,
        layout: PartitionLayout,
        biases: Mapping[str, np.ndarray],
        weights: Mapping[tuple[str, str], np.ndarray],
    ):
        self.layout = layout
        self.biases = {}
        for p in PARTITIONS:
            if p not in biases:
                raise ValueError(f"missing bias vector for partition {p!r}")
            self.biases[p] = readonly(as_float_vector(biases[p], layout.size_of(p), f"bias[{p}]"))
        self.weights = {}
        for pair in PAIRS:
            if pair not in weights:
                raise ValueError(f"missing weight block for pair {pair}")
            shape = (layout.size_of(pair[0]), layout.size_of(pair[1]))
            w = as_float_matrix(weights[pair], shape, f"W[{pair}]")
            mask = layout.mask_for(pair)
            if mask is not None and np.any(w[mask == 0] != 0.0):
                raise ValueError(f"W[{pair}] has nonzero entries on masked-out couplings")
            self.weights[pair] = readonly(w)

    @classmethod
    def zeros(cls, layout: PartitionLayout) -> "QuadripartiteRBM":
        biases = {p: np.zeros(layout.size_of(p)) for p in PARTITIONS}
        weights = {
            pair: np.zeros((layout.size_of(pair[0]), layout.size_of(pair[1]))) for pair in PAIRS
        }
        return cls(layout, biases, weights)

    def replace(
        self,
        biases: Mapping[str, np.ndarray] | None = None,
        weights: Mapping[tuple[str, str], np.ndarray] | None = None,
    ) -> "QuadripartiteRBM":
        b = dict(self.biases)
        if biases:
            b.update(biases)
        w = dict(self.weights)
        if weights:
            w.update(weights)
        return QuadripartiteRBM(self.layout, b, w)

    def scale_weights(self, factor: float) -> "QuadripartiteRBM":
        """Same biases, all coupling blocks multiplied by ``factor``."""
        return self.replace(weights={pair: self.weights[pair] * factor for pair in PAIRS})

    def scale_all(self, factor: float) -> "QuadripartiteRBM":
        return QuadripartiteRBM(
            self.layout,
            {p: self.biases[p] * factor for p in PARTITIONS},
            {pair: self.weights[pair] * factor for pair in PAIRS},
        )

    def __repr__(self) -> str:
        return f"QuadripartiteRBM(sizes={self.layout.sizes})"


@dataclass
class QuadState:
    """One joint binary configuration of the four partitions."""

    v: np.ndarray
    h: np.ndarray
    s: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        for p in PARTITIONS:
            arr = getattr(self, p)
            setattr(self, p, as_binary_vector(arr, len(np.atleast_1d(arr)), p))

    def part(self, partition: str) -> np.ndarray:
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}")
        return getattr(self, partition)

    def matches(self, layout: PartitionLayout) -> bool:
        return all(len(self.part(p)) == layout.size_of(p) for p in PARTITIONS)

    def concatenated(self) -> np.ndarray:
        return np.concatenate([self.v, self.h, self.s, self.t])


@dataclass
class SampleBatch:
    """A stack of joint states with provenance (source, seed, Gibbs steps)."""

    layout: PartitionLayout
    v: np.ndarray
    h: np.ndarray
    s: np.ndarray
    t: np.ndarray
    source: SampleSource
    seed: int
    steps: int = 0

    def __post_init__(self):
        if self.source not in _SOURCES:
            raise ValueError(f"unknown sample source {self.source!r}")
        n = np.asarray(self.v).shape[0]
        if n == 0:
            raise ValueError("a SampleBatch must contain at least one state")
        for p in PARTITIONS:
            arr = as_binary_matrix(getattr(self, p), self.layout.size_of(p), p)
            if arr.shape[0] != n:
                raise ValueError("all partitions must hold the same number of states")
            setattr(self, p, arr)
        self.seed = int(self.seed)
        self.steps = int(self.steps)

    def __len__(self) -> int:
        return self.v.shape[0]

    def __getitem__(self, i: int) -> QuadState:
        return QuadState(self.v[i], self.h[i], self.s[i], self.t[i])

    def part(self, partition: str) -> np.ndarray:
        if partition not in PARTITIONS:
            raise ValueError(f"unknown partition {partition!r}")
        return getattr(self, partition)

    def stacked(self) -> np.ndarray:
        """(n, total) matrix in partition-major column order v|h|s|t."""
        return np.concatenate([self.v, self.h, self.s, self.t], axis=1)

    @classmethod
    def from_stacked(
        cls,
        layout: PartitionLayout,
        states: np.ndarray,
        source: SampleSource,
        seed: int,
        steps: int = 0,
    ) -> "SampleBatch":
        states = as_binary_matrix(states, layout.total, "states")
        parts = {}
        for p in PARTITIONS:
            off = layout.offset_of(p)
            parts[p] = states[:, off : off + layout.size_of(p)]
        return cls(layout, parts["v"], parts["h"], parts["s"], parts["t"], source, seed, steps)


def _check_state(rbm: QuadripartiteRBM, state: QuadState) -> None:
    if not state.matches(rbm.layout):
        raise ValueError(
            f"state sizes {tuple(len(state.part(p)) for p in PARTITIONS)} do not match "
            f"layout {rbm.layout.sizes}"
        )


def energy(rbm: QuadripartiteRBM, state: QuadState) -> float:
    """Joint energy of one configuration (negative biases, negative pair terms)."""
    _check_state(rbm, state)
    x = {p: state.part(p).astype(np.float64) for p in PARTITIONS}
    e = 0.0
    for p in PARTITIONS:
        e -= float(rbm.biases[p] @ x[p])
    for (p, q) in PAIRS:
        e -= float(x[p] @ rbm.weights[(p, q)] @ x[q])
    return e


def batch_energy(rbm: QuadripartiteRBM, batch: SampleBatch | Mapping[str, np.ndarray]) -> np.ndarray:
    """Energies of a batch of states, one value per row."""
    x = _batch_arrays(rbm.layout, batch)
    e = np.zeros(x["v"].shape[0])
    for p in PARTITIONS:
        e -= x[p] @ rbm.biases[p]
    for (p, q) in PAIRS:
        e -= ((x[p] @ rbm.weights[(p, q)]) * x[q]).sum(axis=1)
    return e


def batch_pair_energy(rbm: QuadripartiteRBM, batch) -> np.ndarray:
    """Coupling-only part of the batch energy (no bias terms)."""
    x = _batch_arrays(rbm.layout, batch)
    e = np.zeros(x["v"].shape[0])
    for (p, q) in PAIRS:
        e -= ((x[p] @ rbm.weights[(p, q)]) * x[q]).sum(axis=1)
    return e


def _batch_arrays(layout: PartitionLayout, batch) -> dict[str, np.ndarray]:
    if isinstance(batch, SampleBatch):
        if batch.layout.sizes != layout.sizes:
            raise ValueError("batch layout does not match rbm layout")
        return {p: batch.part(p).astype(np.float64) for p in PARTITIONS}
    return {p: np.asarray(batch[p], dtype=np.float64) for p in PARTITIONS}


# blocks feeding each partition's activation field: (pair, transpose?)
_FIELD_TERMS: dict[str, tuple[tuple[tuple[str, str], bool, str], ...]] = {
    "v": ((("v", "h"), False, "h"), (("v", "s"), False, "s"), (("v", "t"), False, "t")),
    "h": ((("v", "h"), True, "v"), (("h", "s"), False, "s"), (("h", "t"), False, "t")),
    "s": ((("v", "s"), True, "v"), (("h", "s"), True, "h"), (("s", "t"), False, "t")),
    "t": ((("v", "t"), True, "v"), (("h", "t"), True, "h"), (("s", "t"), True, "s")),
}


def activation_field(rbm: QuadripartiteRBM, state: QuadState, partition: str) -> np.ndarray:
    """Summed input from the other three partitions into ``partition``.

    Equals the energy drop of switching a unit on, minus its bias:
    ``field_i = E(unit i = 0) - E(unit i = 1) - bias_i``.
    """
    _check_state(rbm, state)
    if partition not in PARTITIONS:
        raise ValueError(f"unknown partition {partition!r}")
    out = np.zeros(rbm.layout.size_of(partition))
    for pair, transpose, other in _FIELD_TERMS[partition]:
        w = rbm.weights[pair]
        x = state.part(other).astype(np.float64)
        out += x @ w if transpose else w @ x
    return out


def _batch_field(rbm: QuadripartiteRBM, x: Mapping[str, np.ndarray], partition: str) -> np.ndarray:
    n = next(iter(x.values())).shape[0]
    out = np.zeros((n, rbm.layout.size_of(partition)))
    for pair, transpose, other in _FIELD_TERMS[partition]:
        w = rbm.weights[pair]
        out += x[other] @ w.T if not transpose else x[other] @ w
    return out


def conditional_prob_one(rbm: QuadripartiteRBM, state: QuadState, partition: str) -> np.ndarray:
    """P(unit = 1 | other partitions), element-wise sigmoid of bias + field."""
    f = activation_field(rbm, state, partition)
    return expit(rbm.biases[partition] + f)


def run_block_steps(
    rbm: QuadripartiteRBM,
    states: dict[str, np.ndarray],
    n_steps: int,
    uniforms: ChainUniforms,
    clamped: frozenset[str] | set[str] = frozenset(),
) -> None:
    """Advance all chains ``n_steps`` block steps in place.

    One block step updates the partitions in the fixed order v, h, s, t,
    each conditioned on the current values of the other three (so later
    partitions already see this step's updates). Clamped partitions are
    skipped entirely, which keeps them bit-identical. ``states`` maps
    partition tag to a float ``(n_chains, size)`` 0/1 matrix.
    """
    order = [p for p in PARTITIONS if p not in clamped]
    per_step = sum(rbm.layout.size_of(p) for p in order)
    uniforms.reserve(per_step * n_steps)
    for _ in range(n_steps):
        for p in order:
            size = rbm.layout.size_of(p)
            u = uniforms.next_block(size)
            prob = expit(rbm.biases[p] + _batch_field(rbm, states, p))
            states[p] = (u < prob).astype(np.float64)


def block_gibbs_step(
    rbm: QuadripartiteRBM,
    state: QuadState,
    rng: ChainUniforms | int,
    clamped: frozenset[str] | set[str] = frozenset(),
) -> QuadState:
    """One block Gibbs step (four partition updates) on a single state."""
    _check_state(rbm, state)
    bad = set(clamped) - set(PARTITIONS)
    if bad:
        raise ValueError(f"unknown clamped partitions {sorted(bad)}")
    uniforms = ChainUniforms(rng, 1) if isinstance(rng, (int, np.integer)) else rng
    states = {p: state.part(p).astype(np.float64)[None, :] for p in PARTITIONS}
    run_block_steps(rbm, states, 1, uniforms, frozenset(clamped))
    return QuadState(*(states[p][0] for p in PARTITIONS))


def _broadcast_clamp(layout: PartitionLayout, partition: str, values, n_chains: int) -> np.ndarray:
    arr = np.asarray(values)
    size = layout.size_of(partition)
    if arr.ndim == 1:
        vec = as_binary_vector(arr, size, f"clamp[{partition}]")
        return np.tile(vec.astype(np.float64), (n_chains, 1))
    mat = as_binary_matrix(arr, size, f"clamp[{partition}]")
    if mat.shape[0] != n_chains:
        raise ValueError(
            f"clamp values for {partition!r} have {mat.shape[0]} rows, expected {n_chains}"
        )
    return mat.astype(np.float64)


def sample(
    rbm: QuadripartiteRBM,
    n_chains: int,
    n_steps: int,
    seed: int,
    init: str = "random_bernoulli_half",
    init_batch: SampleBatch | None = None,
    clamped: Iterable[str] = (),
    clamp_values: Mapping[str, np.ndarray] | None = None,
) -> SampleBatch:
    """Run independent block-Gibbs chains and return their final states.

    ``init`` is either ``random_bernoulli_half`` (each free unit starts from
    a fair coin, drawn from the chain's own stream) or ``from_batch`` (chains
    start at ``init_batch``; its length must equal ``n_chains``). Clamped
    partitions hold the values given in ``clamp_values`` (a vector broadcast
    to every chain, or one row per chain) for the whole run. Deterministic
    given (seed, n_chains, n_steps).
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    clamped = frozenset(clamped)
    bad = clamped - set(PARTITIONS)
    if bad:
        raise ValueError(f"unknown clamped partitions {sorted(bad)}")
    if clamped and not clamp_values:
        raise ValueError("clamped partitions require clamp_values")

    uniforms = ChainUniforms(seed, n_chains)
    states: dict[str, np.ndarray] = {}
    if init == "from_batch":
        if init_batch is None:
            raise ValueError("init='from_batch' requires init_batch")
        if init_batch.layout.sizes != rbm.layout.sizes:
            raise ValueError("init_batch layout does not match rbm layout")
        if len(init_batch) != n_chains:
            raise ValueError(
                f"init_batch has {len(init_batch)} states, expected n_chains={n_chains}"
            )
        for p in PARTITIONS:
            states[p] = init_batch.part(p).astype(np.float64)
    elif init == "random_bernoulli_half":
        for p in PARTITIONS:
            u = uniforms.next_block(rbm.layout.size_of(p))
            states[p] = (u < 0.5).astype(np.float64)
    else:
        raise ValueError(f"unknown init {init!r}")

    for p in clamped:
        states[p] = _broadcast_clamp(rbm.layout, p, clamp_values[p], n_chains)

    run_block_steps(rbm, states, n_steps, uniforms, clamped)
    return SampleBatch(
        rbm.layout,
        *(states[p].astype(np.uint8) for p in PARTITIONS),
        source="gibbs",
        seed=seed,
        steps=n_steps,
    )


def fold_condition(rbm: QuadripartiteRBM, v_fixed: np.ndarray) -> QuadripartiteRBM:
    """Absorb a fixed ``v`` pattern into the biases of the other partitions.

    Returns the reduced model over (h, s, t): an empty ``v`` partition,
    biases shifted by the incoming couplings from the fixed bits, and the
    h/s/t coupling blocks unchanged. Sampling it is equivalent to sampling
    the full model with ``v`` clamped.
    """
    n_v = rbm.layout.size_of("v")
    vf = as_binary_vector(v_fixed, n_v, "v_fixed").astype(np.float64)
    masks = {
        pair: m for pair, m in rbm.layout.coupling_masks.items() if "v" not in pair
    }
    layout = PartitionLayout(
        (0, rbm.layout.size_of("h"), rbm.layout.size_of("s"), rbm.layout.size_of("t")),
        coupling_masks=masks,
        allow_empty=True,
    )
    biases = {
        "v": np.zeros(0),
        "h": rbm.biases["h"] + vf @ rbm.weights[("v", "h")],
        "s": rbm.biases["s"] + vf @ rbm.weights[("v", "s")],
        "t": rbm.biases["t"] + vf @ rbm.weights[("v", "t")],
    }
    weights = {
        ("v", "h"): np.zeros((0, layout.size_of("h"))),
        ("v", "s"): np.zeros((0, layout.size_of("s"))),
        ("v", "t"): np.zeros((0, layout.size_of("t"))),
        ("h", "s"): rbm.weights[("h", "s")],
        ("h", "t"): rbm.weights[("h", "t")],
        ("s", "t"): rbm.weights[("s", "t")],
    }
    return QuadripartiteRBM(layout, biases, weights)


def random_rbm(
    sizes: Iterable[int],
    sigma: float,
    seed: int,
    bias_sigma: float | None = None,
    coupling_masks: Mapping[tuple[str, str], np.ndarray] | None = None,
) -> QuadripartiteRBM:
    """Gaussian-initialized model: weights N(0, sigma^2), biases likewise.

    Masked-out couplings are zeroed so construction passes validation.
    """
    layout = PartitionLayout(sizes, coupling_masks=coupling_masks)
    rng = np.random.default_rng(seed)
    bs = sigma if bias_sigma is None else bias_sigma
    biases = {p: rng.normal(0.0, bs, layout.size_of(p)) for p in PARTITIONS}
    weights = {}
    for pair in PAIRS:
        w = rng.normal(0.0, sigma, (layout.size_of(pair[0]), layout.size_of(pair[1])))
        mask = layout.mask_for(pair)
        if mask is not None:
            w = w * mask
        weights[pair] = w
    return QuadripartiteRBM(layout, biases, weights)


def save_rbm(path, rbm: QuadripartiteRBM) -> None:
    """Write the model to a single .npz container (bit-exact round trip)."""
    payload: dict[str, np.ndarray] = {
        "format_version": np.array([RBM_FORMAT_VERSION], dtype=np.int64),
        "sizes": np.asarray(rbm.layout.sizes, dtype=np.int64),
    }
    for p in PARTITIONS:
        payload[f"bias_{p}"] = rbm.biases[p]
    for (p, q) in PAIRS:
        payload[f"w_{p}{q}"] = rbm.weights[(p, q)]
        mask = rbm.layout.mask_for((p, q))
        if mask is not None:
            payload[f"mask_{p}{q}"] = mask
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_rbm(path) -> QuadripartiteRBM:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"][0])
        if version != RBM_FORMAT_VERSION:
            raise ValueError(f"unsupported rbm format version {version}")
        sizes = tuple(int(n) for n in data["sizes"])
        masks = {
            pair: data[f"mask_{pair[0]}{pair[1]}"]
            for pair in PAIRS
            if f"mask_{pair[0]}{pair[1]}" in data
        }
        layout = PartitionLayout(sizes, coupling_masks=masks or None, allow_empty=True)
        biases = {p: data[f"bias_{p}"] for p in PARTITIONS}
        weights = {pair: data[f"w_{pair[0]}{pair[1]}"] for pair in PAIRS}
        return QuadripartiteRBM(layout, biases, weights)
