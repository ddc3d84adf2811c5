"""Exact two-way bridge between the binary-basis model and a spin program.

Global node indexing is partition-major (all v nodes, then h, s, t), which
keeps the coupler block structure explicit. Substituting x = (z + 1)/2 into
the binary energy yields spin biases ``delta``, couplers ``J = -W/4`` and a
constant offset; the offset is carried for energy bookkeeping but never
shipped to a backend, since it cancels in the sampled distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .rbm import PAIRS, PARTITIONS, PartitionLayout, QuadState, QuadripartiteRBM
from .validation import as_float_vector

WIRE_FORMAT_VERSION = 1


@dataclass
class SpinState:
    """One joint spin configuration in partition-major order."""

    layout: PartitionLayout
    z: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.z)
        if arr.ndim != 1 or arr.shape[0] != self.layout.total:
            raise ValueError(f"z must be a length-{self.layout.total} vector")
        out = arr.astype(np.int8, copy=True)
        if not np.array_equal(out, arr) or not np.all((out == 1) | (out == -1)):
            raise ValueError("spin entries must be -1 or +1")
        self.z = out


class IsingProgram:
    """Spin biases, pair couplers, flux biases, energy offset and scale.

    ``scale`` multiplies (delta, J) at programming time; ``flux_biases`` act
    as per-node pinning fields applied by the backend at read time, positive
    values favoring spin +1. The coupler blocks mirror the binary model's
    pair structure.
    """

    def __init__(
        self,
        layout: PartitionLayout,
        delta: np.ndarray,
        coupling_blocks: dict[tuple[str, str], np.ndarray],
        flux_biases: np.ndarray | None = None,
        offset: float = 0.0,
        scale: float = 1.0,
    ):
        self.layout = layout
        n = layout.total
        self.delta = as_float_vector(delta, n, "delta")
        self.coupling_blocks = {}
        for pair in PAIRS:
            if pair not in coupling_blocks:
                raise ValueError(f"missing coupling block for pair {pair}")
            shape = (layout.size_of(pair[0]), layout.size_of(pair[1]))
            block = np.ascontiguousarray(coupling_blocks[pair], dtype=np.float64)
            if block.shape != shape:
                raise ValueError(f"coupling block {pair} must have shape {shape}")
            if not np.all(np.isfinite(block)):
                raise ValueError(f"coupling block {pair} contains non-finite entries")
            mask = layout.mask_for(pair)
            if mask is not None and np.any(block[mask == 0] != 0.0):
                raise ValueError(f"coupling block {pair} violates the coupling mask")
            self.coupling_blocks[pair] = block
        self.flux_biases = (
            np.zeros(n) if flux_biases is None else as_float_vector(flux_biases, n, "flux_biases")
        )
        if not np.isfinite(offset):
            raise ValueError("offset must be finite")
        if not (scale > 0):
            raise ValueError("scale must be > 0")
        self.offset = float(offset)
        self.scale = float(scale)

    def couplings(self) -> dict[tuple[int, int], float]:
        """Nonzero couplers as a sparse upper-triangular {(i, j): value} map."""
        out: dict[tuple[int, int], float] = {}
        for (p, q), block in self.coupling_blocks.items():
            off_p = self.layout.offset_of(p)
            off_q = self.layout.offset_of(q)
            rows, cols = np.nonzero(block)
            for r, c in zip(rows, cols):
                out[(off_p + int(r), off_q + int(c))] = float(block[r, c])
        return out

    def replace(self, **kwargs) -> "IsingProgram":
        args = dict(
            layout=self.layout,
            delta=self.delta,
            coupling_blocks=self.coupling_blocks,
            flux_biases=self.flux_biases,
            offset=self.offset,
            scale=self.scale,
        )
        args.update(kwargs)
        return IsingProgram(**args)

    def __repr__(self) -> str:
        return (
            f"IsingProgram(sizes={self.layout.sizes}, scale={self.scale}, "
            f"offset={self.offset:.6g})"
        )


def ising_energy(program: IsingProgram, state: SpinState) -> float:
    """H(z) = delta . z + sum_{i<j} J_ij z_i z_j for the raw (unscaled) program."""
    if state.layout.sizes != program.layout.sizes:
        raise ValueError("spin state does not match program layout")
    z = state.z.astype(np.float64)
    total = float(program.delta @ z)
    for (p, q), block in program.coupling_blocks.items():
        off_p = program.layout.offset_of(p)
        off_q = program.layout.offset_of(q)
        zp = z[off_p : off_p + program.layout.size_of(p)]
        zq = z[off_q : off_q + program.layout.size_of(q)]
        total += float(zp @ block @ zq)
    return total


def rbm_to_ising(rbm: QuadripartiteRBM) -> IsingProgram:
    """Map binary-basis parameters to the spin program.

    The spin bias of a node is minus half its unit bias minus a quarter of
    the summed couplings incident to it; couplers are -W/4; the constant
    offset collects the remaining terms so that for every state
    E_binary(x) = H(z) + offset with z = 2x - 1.
    """
    layout = rbm.layout
    delta = np.zeros(layout.total)
    half = {p: -0.5 * rbm.biases[p] for p in PARTITIONS}
    quarter = {p: np.zeros(layout.size_of(p)) for p in PARTITIONS}
    for (p, q) in PAIRS:
        w = rbm.weights[(p, q)]
        quarter[p] += 0.25 * w.sum(axis=1)
        quarter[q] += 0.25 * w.sum(axis=0)
    for p in PARTITIONS:
        off = layout.offset_of(p)
        delta[off : off + layout.size_of(p)] = half[p] - quarter[p]
    blocks = {pair: -0.25 * rbm.weights[pair] for pair in PAIRS}
    offset = -(
        0.5 * sum(rbm.biases[p].sum() for p in PARTITIONS)
        + 0.25 * sum(rbm.weights[pair].sum() for pair in PAIRS)
    )
    return IsingProgram(layout, delta, blocks, offset=offset, scale=1.0)


def ising_to_rbm(program: IsingProgram) -> QuadripartiteRBM:
    """Invert the spin-program map; composition with rbm_to_ising is identity."""
    layout = program.layout
    weights = {pair: -4.0 * program.coupling_blocks[pair] for pair in PAIRS}
    rowsum = {p: np.zeros(layout.size_of(p)) for p in PARTITIONS}
    for (p, q) in PAIRS:
        rowsum[p] += weights[(p, q)].sum(axis=1)
        rowsum[q] += weights[(p, q)].sum(axis=0)
    biases = {}
    for p in PARTITIONS:
        off = layout.offset_of(p)
        d = program.delta[off : off + layout.size_of(p)]
        biases[p] = -2.0 * d - 0.5 * rowsum[p]
    return QuadripartiteRBM(layout, biases, weights)


def binary_to_spin(state: QuadState, layout: PartitionLayout) -> SpinState:
    """x -> 2x - 1, partition-major order."""
    if not state.matches(layout):
        raise ValueError("state does not match layout")
    z = 2 * state.concatenated().astype(np.int16) - 1
    return SpinState(layout, z.astype(np.int8))


def spin_to_binary(state: SpinState) -> QuadState:
    """z -> (z + 1) / 2."""
    x = ((state.z.astype(np.int16) + 1) // 2).astype(np.uint8)
    layout = state.layout
    parts = []
    for p in PARTITIONS:
        off = layout.offset_of(p)
        parts.append(x[off : off + layout.size_of(p)])
    return QuadState(*parts)


def apply_scale(program: IsingProgram, beta: float) -> IsingProgram:
    """Divide the shipped parameters by ``beta`` (the offset stays raw)."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    return program.replace(scale=program.scale / beta)


def condition_to_flux(
    layout: PartitionLayout,
    partition: str,
    condition_bits: np.ndarray,
    strength: float,
) -> np.ndarray:
    """Flux-bias vector pinning one partition to a bit pattern.

    Bits set to 1 receive +strength (favoring spin +1), zeros -strength;
    all other partitions stay unpinned.
    """
    if strength <= 0:
        raise ValueError("strength must be > 0")
    size = layout.size_of(partition)
    bits = np.ascontiguousarray(condition_bits)
    if bits.shape != (size,):
        raise ValueError(f"condition must be a length-{size} vector, got {bits.shape}")
    if not np.all((bits == 0) | (bits == 1)):
        raise ValueError("condition bits must be 0/1")
    flux = np.zeros(layout.total)
    off = layout.offset_of(partition)
    flux[off : off + size] = np.where(bits == 1, strength, -strength)
    return flux


def program_to_wire(program: IsingProgram) -> dict:
    """JSON-ready dict; also the payload of the remote sampler protocol."""
    return {
        "format_version": WIRE_FORMAT_VERSION,
        "sizes": list(program.layout.sizes),
        "delta": program.delta.tolist(),
        "couplings": [
            {"i": i, "j": j, "value": value} for (i, j), value in sorted(program.couplings().items())
        ],
        "flux_biases": program.flux_biases.tolist(),
        "offset": program.offset,
        "scale": program.scale,
    }


def program_from_wire(payload: dict) -> IsingProgram:
    version = payload.get("format_version")
    if version != WIRE_FORMAT_VERSION:
        raise ValueError(f"unsupported wire format version {version!r}")
    sizes = tuple(int(n) for n in payload["sizes"])
    layout = PartitionLayout(sizes, allow_empty=True)
    offsets = {p: layout.offset_of(p) for p in PARTITIONS}

    def partition_of(idx: int) -> str:
        for p in reversed(PARTITIONS):
            if idx >= offsets[p]:
                return p
        raise ValueError(f"node index {idx} out of range")

    blocks = {
        pair: np.zeros((layout.size_of(pair[0]), layout.size_of(pair[1]))) for pair in PAIRS
    }
    for entry in payload["couplings"]:
        i, j, value = int(entry["i"]), int(entry["j"]), float(entry["value"])
        if not (0 <= i < j < layout.total):
            raise ValueError(f"coupling ({i}, {j}) is not upper-triangular in range")
        p, q = partition_of(i), partition_of(j)
        if p == q:
            raise ValueError(f"coupling ({i}, {j}) lies inside partition {p!r}")
        blocks[(p, q)][i - offsets[p], j - offsets[q]] = value
    return IsingProgram(
        layout,
        delta=np.asarray(payload["delta"], dtype=np.float64),
        coupling_blocks=blocks,
        flux_biases=np.asarray(payload["flux_biases"], dtype=np.float64),
        offset=float(payload["offset"]),
        scale=float(payload["scale"]),
    )


def program_to_json(program: IsingProgram) -> str:
    return json.dumps(program_to_wire(program))


def program_from_json(text: str) -> IsingProgram:
    return program_from_wire(json.loads(text))
