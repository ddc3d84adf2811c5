"""Calorimeter shower ingestion, the zero-preserving logit transform,
incident-energy conditioning codes, and a synthetic toy-shower generator.

A shower is a cylindrical voxel grid, 45 layers deep, 16 angular by 9
radial bins per layer, flattened layer-major with the innermost radius
first inside each angular slice (flat index = z*144 + phi*9 + r). Voxel
energies are in MeV; each event carries the incident particle energy used
both for normalization and as the conditioning label.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import h5py
import numpy as np
from scipy.special import expit

Z_LAYERS = 45
PHI_BINS = 16
R_BINS = 9
N_VOXELS = Z_LAYERS * PHI_BINS * R_BINS  # 6480

E_MIN_MEV = 1.0e3
E_MAX_MEV = 1.0e6

DEFAULT_DELTA = 1e-7

CONDITION_BITS = 512
BITS_PER_VALUE = 20
_BLOCK_BITS = 3 * BITS_PER_VALUE         # 60
_REPEATS = CONDITION_BITS // _BLOCK_BITS  # 8
_RESIDUAL = CONDITION_BITS - _REPEATS * _BLOCK_BITS  # 32


@dataclass
class ShowerRecord:
    """One event: the voxel energy grid and its incident energy (MeV)."""

    voxels: np.ndarray
    incident_energy: float

    def __post_init__(self):
        arr = np.ascontiguousarray(self.voxels, dtype=np.float64)
        if arr.shape != (Z_LAYERS, PHI_BINS, R_BINS):
            raise ValueError(
                f"voxels must have shape {(Z_LAYERS, PHI_BINS, R_BINS)}, got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("voxel energies must be finite")
        if np.any(arr < 0):
            idx = int(np.argmax((arr < 0).ravel()))
            raise ValueError(f"negative voxel energy at flat index {idx}")
        self.voxels = arr
        self.incident_energy = float(self.incident_energy)
        if not np.isfinite(self.incident_energy) or self.incident_energy <= 0:
            raise ValueError("incident energy must be positive and finite")

    def flat(self) -> np.ndarray:
        return self.voxels.reshape(N_VOXELS)


@dataclass
class TransformedShower:
    """Logit-space voxel vector; zeros map to exact zeros and back."""

    x: np.ndarray
    incident_energy: float
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        arr = np.ascontiguousarray(self.x, dtype=np.float64)
        if arr.shape != (N_VOXELS,):
            raise ValueError(f"x must be a length-{N_VOXELS} vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("transformed values must be finite")
        self.x = arr


@dataclass
class ConditionEncoding:
    """512-bit conditioning pattern for one incident energy."""

    bits: np.ndarray
    source_energy: float

    def __post_init__(self):
        arr = np.ascontiguousarray(self.bits)
        if arr.shape != (CONDITION_BITS,) or not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"bits must be {CONDITION_BITS} binary entries")
        self.bits = arr.astype(np.uint8)
        if np.any(self.bits[-_RESIDUAL:] != 0):
            raise ValueError(f"the last {_RESIDUAL} residual bits must be zero")
        block = self.bits[:_BLOCK_BITS]
        for rep in range(1, _REPEATS):
            if not np.array_equal(self.bits[rep * _BLOCK_BITS : (rep + 1) * _BLOCK_BITS], block):
                raise ValueError("bits 0..479 must repeat one 60-bit block")

    def as_string(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


def forward_transform(shower: ShowerRecord, delta: float = DEFAULT_DELTA) -> TransformedShower:
    """Map voxel energies to unbounded logits, keeping zeros at exactly zero.

    Each voxel is divided by the incident energy, squeezed to
    (delta, 1 - delta), and logit-transformed; subtracting the logit of
    delta anchors empty voxels at zero.
    """
    v = shower.flat()
    e = shower.incident_energy
    if np.any(v > e):
        idx = int(np.argmax(v > e))
        raise ValueError(
            f"voxel {idx} carries {v[idx]:.6g} MeV, above the incident energy {e:.6g} MeV"
        )
    frac = v / e
    u = delta + (1.0 - 2.0 * delta) * frac
    x = np.log(u / (1.0 - u)) - np.log(delta / (1.0 - delta))
    x[v == 0.0] = 0.0
    return TransformedShower(x=x, incident_energy=e, delta=delta)


def inverse_transform(
    transformed: TransformedShower,
    incident_energy: float | None = None,
    delta: float | None = None,
) -> ShowerRecord:
    """Algebraic inverse of the logit map; zero logits become empty voxels.

    Values that land outside [0, 1] by more than 1e-9 (numerically impossible
    for a genuine forward image) are clamped with a warning.
    """
    e = transformed.incident_energy if incident_energy is None else float(incident_energy)
    d = transformed.delta if delta is None else float(delta)
    x = transformed.x
    u = expit(x + np.log(d / (1.0 - d)))
    frac = (u - d) / (1.0 - 2.0 * d)
    if np.any(frac < -1e-9) or np.any(frac > 1.0 + 1e-9):
        warnings.warn("inverse transform clamped values outside [0, 1]", stacklevel=2)
    frac = np.clip(frac, 0.0, 1.0)
    v = frac * e
    v[x == 0.0] = 0.0
    return ShowerRecord(voxels=v.reshape(Z_LAYERS, PHI_BINS, R_BINS), incident_energy=e)


def normalize_incident(e: float, e_min: float = E_MIN_MEV, e_max: float = E_MAX_MEV) -> float:
    """Log-scale the incident energy onto [0, 1] over the dataset bounds."""
    if not e_min < e_max:
        raise ValueError("need e_min < e_max")
    if not (e_min <= e <= e_max):
        raise ValueError(f"incident energy {e:.6g} MeV outside [{e_min:.6g}, {e_max:.6g}]")
    return float((np.log(e) - np.log(e_min)) / (np.log(e_max) - np.log(e_min)))


def _to_bits_msb(value: int) -> np.ndarray:
    if value >= 1 << BITS_PER_VALUE:
        raise ValueError(
            f"binned value {value} does not fit in {BITS_PER_VALUE} bits"
        )
    return np.array([(value >> (BITS_PER_VALUE - 1 - k)) & 1 for k in range(BITS_PER_VALUE)],
                    dtype=np.uint8)


def encode_incident_energy(e: float) -> ConditionEncoding:
    """Binary conditioning code: floors of e, 10 ln e and 10 sqrt(e).

    Each binned value becomes a 20-bit MSB-first block; the 60-bit
    concatenation repeats eight times across the 512-node partition and the
    32 residual bits stay zero.
    """
    if e < 1.0:
        raise ValueError("incident energy must be at least 1 MeV")
    e_bin = int(np.floor(e))
    e_ln = int(np.floor(10.0 * np.log(e)))
    e_sqrt = int(np.floor(10.0 * np.sqrt(e)))
    block = np.concatenate([_to_bits_msb(e_bin), _to_bits_msb(e_ln), _to_bits_msb(e_sqrt)])
    bits = np.concatenate([np.tile(block, _REPEATS), np.zeros(_RESIDUAL, dtype=np.uint8)])
    return ConditionEncoding(bits=bits, source_energy=float(e))


def sparsity_index(shower: ShowerRecord) -> float:
    """Fraction of voxels with exactly zero energy."""
    return float(np.count_nonzero(shower.flat() == 0.0) / N_VOXELS)


def write_hdf5(path, records: Iterable[ShowerRecord]) -> None:
    records = list(records)
    energies = np.array([[r.incident_energy] for r in records])
    showers = np.stack([r.flat() for r in records])
    with h5py.File(path, "w") as fh:
        fh.create_dataset("incident_energies", data=energies)
        fh.create_dataset("showers", data=showers)


def write_csv(path, records: Iterable[ShowerRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["e"] + [f"v{i}" for i in range(N_VOXELS)])
        for r in records:
            writer.writerow([repr(r.incident_energy)] + [repr(float(v)) for v in r.flat()])


def _ingest_hdf5(path) -> Iterator[ShowerRecord]:
    with h5py.File(path, "r") as fh:
        for name in ("incident_energies", "showers"):
            if name not in fh:
                raise ValueError(f"missing dataset {name!r} in {path}")
        energies = np.asarray(fh["incident_energies"])
        showers = fh["showers"]
        if energies.ndim != 2 or energies.shape[1] != 1:
            raise ValueError("incident_energies must have shape (N, 1)")
        if showers.ndim != 2 or showers.shape[1] != N_VOXELS:
            raise ValueError(f"showers must have shape (N, {N_VOXELS})")
        if energies.shape[0] != showers.shape[0]:
            raise ValueError("incident_energies and showers disagree on event count")
        for i in range(energies.shape[0]):
            row = np.asarray(showers[i])
            yield ShowerRecord(
                voxels=row.reshape(Z_LAYERS, PHI_BINS, R_BINS),
                incident_energy=float(energies[i, 0]),
            )


def _ingest_csv(path) -> Iterator[ShowerRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "e" or len(header) != N_VOXELS + 1:
            raise ValueError(f"csv header must be e,v0..v{N_VOXELS - 1}")
        for row in reader:
            if len(row) != N_VOXELS + 1:
                raise ValueError(f"csv row has {len(row)} columns, expected {N_VOXELS + 1}")
            values = np.array([float(c) for c in row], dtype=np.float64)
            yield ShowerRecord(
                voxels=values[1:].reshape(Z_LAYERS, PHI_BINS, R_BINS),
                incident_energy=values[0],
            )


def ingest(path, format: str | None = None) -> Iterator[ShowerRecord]:
    """Stream events from an HDF5 or CSV shower file.

    HDF5 files carry ``incident_energies`` (N, 1) and ``showers``
    (N, 6480); the CSV fallback has a header row ``e,v0..v6479``. The
    format is inferred from the suffix unless given explicitly.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "hdf5"
    if format == "hdf5":
        return _ingest_hdf5(path)
    if format == "csv":
        return _ingest_csv(path)
    raise ValueError(f"unknown format {format!r}")


def positive_gaussian(lam: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from a Gaussian with mean = variance = lam, truncated to r > 0."""
    if lam <= 0:
        raise ValueError("lam must be > 0")
    out = rng.normal(lam, np.sqrt(lam), size)
    bad = out <= 0
    while np.any(bad):
        out[bad] = rng.normal(lam, np.sqrt(lam), int(bad.sum()))
        bad = out <= 0
    return out


@dataclass
class ToyShowerConfig:
    """Knobs of the synthetic generator.

    The default profile deposits ``containment`` of the incident energy
    with a gamma-like longitudinal shape and an exponential radial falloff;
    ``target_sparsity`` controls the zero-suppression keep probabilities.
    ``flat_lambda`` switches every kept voxel to a single Gaussian scale
    (useful for distribution checks), and ``fixed_incident`` pins the
    incident energy instead of drawing it log-uniformly.
    """

    target_sparsity: float = 0.85
    containment: float = 0.6
    shower_max_layer: float = 8.0
    radial_scale: float = 1.8
    e_min: float = E_MIN_MEV
    e_max: float = E_MAX_MEV
    flat_lambda: float | None = None
    fixed_incident: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ValueError("target_sparsity must lie in [0, 1)")
        if not 0.0 < self.containment <= 1.0:
            raise ValueError("containment must lie in (0, 1]")


def _profile(config: ToyShowerConfig) -> np.ndarray:
    z = np.arange(Z_LAYERS, dtype=np.float64)
    alpha = 2.0
    z0 = config.shower_max_layer / alpha
    longitudinal = (z / z0) ** alpha * np.exp(-z / z0)
    radial = np.exp(-np.arange(R_BINS) / config.radial_scale)
    grid = longitudinal[:, None, None] * np.ones((1, PHI_BINS, 1)) * radial[None, None, :]
    grid *= config.containment / grid.sum()
    return grid.reshape(N_VOXELS)


def _keep_probabilities(profile: np.ndarray, target_sparsity: float) -> np.ndarray:
    if target_sparsity == 0.0:
        return np.ones_like(profile)
    shape = (profile / profile.max()) ** 0.3
    lo, hi = 0.0, 1.0 / shape.mean()
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.clip(mid * shape, 0.0, 1.0).mean() < 1.0 - target_sparsity:
            lo = mid
        else:
            hi = mid
    return np.clip(0.5 * (lo + hi) * shape, 0.0, 1.0)


def toy_showers(
    n_events: int,
    seed: int,
    config: ToyShowerConfig | None = None,
) -> list[ShowerRecord]:
    """Synthetic events: log-uniform incident energies, per-voxel energies
    from positive Gaussians with mean = variance set by the deposit profile,
    and Bernoulli zero-suppression tuned to the target sparsity."""
    if n_events < 1:
        raise ValueError("n_events must be >= 1")
    config = config or ToyShowerConfig()
    rng = np.random.default_rng(seed)
    profile = _profile(config)
    keep = _keep_probabilities(profile, config.target_sparsity)
    records = []
    for _ in range(n_events):
        if config.fixed_incident is not None:
            e = float(config.fixed_incident)
        else:
            e = float(np.exp(rng.uniform(np.log(config.e_min), np.log(config.e_max))))
        lam = np.full(N_VOXELS, config.flat_lambda) if config.flat_lambda else e * profile
        hit = rng.random(N_VOXELS) < keep
        v = np.zeros(N_VOXELS)
        if np.any(hit):
            mu = lam[hit]
            draws = rng.normal(mu, np.sqrt(mu))
            bad = draws <= 0
            while np.any(bad):
                draws[bad] = rng.normal(mu[bad], np.sqrt(mu[bad]))
                bad = draws <= 0
            v[hit] = draws
        v = np.minimum(v, e)
        records.append(
            ShowerRecord(voxels=v.reshape(Z_LAYERS, PHI_BINS, R_BINS), incident_energy=e)
        )
    return records
