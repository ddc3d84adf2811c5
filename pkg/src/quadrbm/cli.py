"""Command-line front end: reproducible experiments emitting CSV/JSON.

Configuration is a plain ``key = value`` file with sections; every key has
a documented default and unknown keys are rejected. The effective
configuration (file values plus command-line overrides) is echoed into the
output directory for provenance. Exit codes: 0 success, 1 verification
failure, 2 usage or configuration error, 3 backend or transport failure.
"""

import configparser
import functools
import json
import os
import sys
import tempfile
from pathlib import Path

import click
import h5py
import numpy as np

from .annealer import VirtualAnnealer, VirtualAnnealerConfig
from .calibration import calibrate, history_to_csv
from .checks import SUITES
from .errors import AnnealerError, TransportError
from .exact import (
    DensityOfStates,
    ais_ln_z,
    density_of_states,
    dos_comparison,
    exact_ln_z,
    exact_sample,
    rbm_log_likelihood,
    tv_distance,
)
from .ising import apply_scale, condition_to_flux, rbm_to_ising
from .rbm import (
    PartitionLayout,
    QuadripartiteRBM,
    SampleBatch,
    batch_energy,
    random_rbm,
    sample,
)
from .remote import RemoteAnnealer
from .rng import derive_seed
from .shower import (
    ToyShowerConfig,
    TransformedShower,
    encode_incident_energy,
    forward_transform,
    ingest,
    inverse_transform,
    sparsity_index,
    toy_showers,
)
from .training import TrainerState, TrainingLog, save_checkpoint, train_step

# every known key: (parser, default); empty strings parse to "unset" where allowed
SCHEMA = {
    "run": {
        "seed": (int, 0),
        "out": (str, "out"),
        "backend": (str, "gibbs"),
        "endpoint": (str, ""),
    },
    "rbm": {
        "sizes": (lambda s: tuple(int(x) for x in s.split(",")), (6, 6, 6, 6)),
        "sigma": (float, 0.5),
        "instance_seed": (int, 2024),
    },
    "annealer": {
        "beta_qa": (float, 12.0),
        "programming_noise_sigma": (float, 0.0),
        "flux_beta_shift": (float, 0.0),
        "rare_fluct_prob": (float, 0.0),
        "rare_fluct_scale": (float, 0.1),
        "equilibration_steps": (int, 300),
        "topology_degree": (lambda s: int(s) if s else None, None),
        "backend_seed": (int, 1),
    },
    "sample": {
        "n_reads": (int, 2048),
        "gibbs_steps": (int, 500),
        "n_bins": (int, 30),
        "condition_energy": (lambda s: float(s) if s else None, None),
        "flux_strength": (lambda s: float(s) if s else None, None),
        "tv_limit": (float, 0.05),
    },
    "calibrate": {
        "method": (str, "ratio_adaptive"),
        "beta0": (float, 1.0),
        "max_iters": (int, 200),
        "n_samples": (int, 2048),
        "trials": (int, 1),
        "eta": (lambda s: float(s) if s else None, None),
        "delta": (float, 1.0),
        "gibbs_steps": (int, 300),
        "condition_energy": (lambda s: float(s) if s else None, None),
    },
    "train": {
        "mode": (str, "teacher"),
        "data_path": (str, ""),
        "updates": (int, 500),
        "batch_size": (int, 128),
        "k": (int, 10),
        "learning_rate": (float, 0.05),
        "method": (str, "pcd_k"),
        "eval_every": (int, 100),
        "eval_samples": (int, 512),
        "lnz_method": (str, "exact"),
        "ais_temps": (int, 30),
        "ais_chains": (int, 256),
        "teacher_sigma": (float, 1.2),
        "teacher_samples": (int, 256),
    },
    "preprocess": {
        "input": (str, ""),
        "output": (str, ""),
        "direction": (str, "forward"),
        "delta": (float, 1e-7),
        "audit": (lambda s: s.lower() in ("1", "true", "yes"), True),
    },
    "toy": {
        "events": (int, 0),
        "target_sparsity": (float, 0.85),
        "flat_lambda": (lambda s: float(s) if s else None, None),
        "fixed_incident": (lambda s: float(s) if s else None, None),
    },
    "verify": {
        "dos_chains": (int, 10240),
        "dos_steps": (int, 3000),
        "dos_steps_short": (int, 200),
        "dos_bins": (int, 32),
        "roundtrip_models": (int, 200),
        "roundtrip_states": (int, 200),
        "identity_instances": (int, 20),
    },
}


class RunConfig:
    def __init__(self, values: dict):
        self._values = values

    def get(self, section: str, key: str):
        return self._values[section][key]

    def echo(self, directory: Path) -> None:
        parser = configparser.ConfigParser()
        for section, entries in self._values.items():
            parser[section] = {}
            for key, value in entries.items():
                if value is None:
                    rendered = ""
                elif isinstance(value, tuple):
                    rendered = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    rendered = "true" if value else "false"
                else:
                    rendered = str(value)
                parser[section][key] = rendered
        with atomic_open(directory / "config_used.ini") as fh:
            parser.write(fh)


def load_config(path, overrides: dict) -> RunConfig:
    values = {
        section: {key: default for key, (_, default) in entries.items()}
        for section, entries in SCHEMA.items()
    }
    if path:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in SCHEMA:
                raise click.UsageError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if key not in SCHEMA[section]:
                    raise click.UsageError(f"unknown config key {key!r} in section [{section}]")
                coerce = SCHEMA[section][key][0]
                try:
                    values[section][key] = coerce(raw)
                except ValueError as exc:
                    raise click.UsageError(f"bad value for [{section}] {key}: {raw!r} ({exc})")
    for key, value in overrides.items():
        if value is not None:
            values["run"][key] = value
    if values["run"]["backend"] not in ("gibbs", "virtual", "remote"):
        raise click.UsageError(f"unknown backend {values['run']['backend']!r}")
    return RunConfig(values)


class atomic_open:
    """Write via a sibling temp file renamed into place on success."""

    def __init__(self, path):
        self.path = Path(path)

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self._tmp = tempfile.mkstemp(dir=self.path.parent, suffix=".tmp")
        self._fh = os.fdopen(fd, "w")
        return self._fh

    def __exit__(self, exc_type, *exc):
        self._fh.close()
        if exc_type is None:
            os.replace(self._tmp, self.path)
        else:
            os.unlink(self._tmp)


def write_json(path, payload) -> None:
    with atomic_open(path) as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def backend_errors_exit_3(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except TransportError as exc:
            click.echo(f"transport error: {exc}", err=True)
            sys.exit(3)
        except AnnealerError as exc:
            click.echo(f"backend error: {exc}", err=True)
            sys.exit(3)

    return wrapper


def build_rbm(cfg: RunConfig) -> QuadripartiteRBM:
    return random_rbm(
        cfg.get("rbm", "sizes"), sigma=cfg.get("rbm", "sigma"),
        seed=cfg.get("rbm", "instance_seed"),
    )


def build_backend(cfg: RunConfig):
    name = cfg.get("run", "backend")
    if name == "virtual":
        config = VirtualAnnealerConfig(
            beta_qa=cfg.get("annealer", "beta_qa"),
            programming_noise_sigma=cfg.get("annealer", "programming_noise_sigma"),
            flux_beta_shift=cfg.get("annealer", "flux_beta_shift"),
            rare_fluct_prob=cfg.get("annealer", "rare_fluct_prob"),
            rare_fluct_scale=cfg.get("annealer", "rare_fluct_scale"),
            equilibration_steps=cfg.get("annealer", "equilibration_steps"),
            topology_degree=cfg.get("annealer", "topology_degree"),
        )
        return VirtualAnnealer(config, seed=cfg.get("annealer", "backend_seed"))
    if name == "remote":
        endpoint = cfg.get("run", "endpoint")
        if not endpoint:
            raise click.UsageError("backend 'remote' needs --endpoint")
        return RemoteAnnealer(endpoint)
    raise click.UsageError(f"backend {name!r} cannot program an annealer")


def out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.get("run", "out"))
    path.mkdir(parents=True, exist_ok=True)
    cfg.echo(path)
    return path


def condition_for(cfg: RunConfig, section: str, rbm: QuadripartiteRBM):
    energy_value = cfg.get(section, "condition_energy")
    if energy_value is None:
        return None
    bits = encode_incident_energy(energy_value).bits
    if rbm.layout.size_of("t") != len(bits):
        raise click.UsageError(
            f"conditioning on an encoded energy needs a {len(bits)}-node t partition, "
            f"got {rbm.layout.size_of('t')}"
        )
    return ("t", bits)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="key = value configuration file")
@click.option("--seed", type=int, default=None, help="master seed override")
@click.option("--backend", type=click.Choice(["gibbs", "virtual", "remote"]), default=None)
@click.option("--endpoint", default=None, help="remote sampler URL")
@click.option("--out", default=None, help="output directory")
@click.pass_context
def main(ctx, config_path, seed, backend, endpoint, out):
    """Quadripartite RBM toolkit: samplers, calibration, preprocessing."""
    ctx.obj = load_config(
        config_path, {"seed": seed, "backend": backend, "endpoint": endpoint, "out": out}
    )


@main.command()
@click.argument("suite", type=click.Choice(sorted(SUITES)))
@click.pass_obj
def verify(cfg: RunConfig, suite):
    """Run one verification suite and write its JSON report."""
    directory = out_dir(cfg)
    seed = cfg.get("run", "seed")
    kwargs = {}
    if suite == "dos":
        kwargs = {
            "sizes": cfg.get("rbm", "sizes"),
            "sigma": cfg.get("rbm", "sigma"),
            "n_chains": cfg.get("verify", "dos_chains"),
            "n_steps": cfg.get("verify", "dos_steps"),
            "n_steps_short": cfg.get("verify", "dos_steps_short"),
            "n_bins": cfg.get("verify", "dos_bins"),
        }
    elif suite == "roundtrip":
        kwargs = {
            "n_models": cfg.get("verify", "roundtrip_models"),
            "n_states": cfg.get("verify", "roundtrip_states"),
        }
    elif suite == "identity":
        kwargs = {"n_instances": cfg.get("verify", "identity_instances")}
    passed, metrics = SUITES[suite](seed=seed, **kwargs)
    write_json(directory / f"verify_{suite}.json",
               {"suite": suite, "pass": bool(passed), "metrics": metrics})
    click.echo(f"{suite}: {'pass' if passed else 'FAIL'}")
    sys.exit(0 if passed else 1)


@main.command()
@click.pass_obj
def train(cfg: RunConfig):
    """Teacher-student or file-driven training with periodic likelihood evals."""
    directory = out_dir(cfg)
    seed = cfg.get("run", "seed")
    sizes = cfg.get("rbm", "sizes")
    layout = PartitionLayout(sizes)
    mode = cfg.get("train", "mode")

    if mode == "teacher":
        teacher = random_rbm(sizes, sigma=cfg.get("train", "teacher_sigma"),
                             seed=cfg.get("rbm", "instance_seed"))
        n_train = cfg.get("train", "teacher_samples")
        n_eval = cfg.get("train", "eval_samples")
        if layout.total <= 20:
            data = exact_sample(teacher, n_train, seed=derive_seed(seed, 0))
            heldout = exact_sample(teacher, n_eval, seed=derive_seed(seed, 1))
        else:
            data = sample(teacher, n_train, 1000, seed=derive_seed(seed, 0))
            heldout = sample(teacher, n_eval, 1000, seed=derive_seed(seed, 1))
    elif mode == "file":
        path = cfg.get("train", "data_path")
        if not path:
            raise click.UsageError("train mode 'file' needs [train] data_path")
        with np.load(path) as payload:
            states = payload["states"]
        data = SampleBatch.from_stacked(layout, states, source="data", seed=seed)
        heldout = data
    else:
        raise click.UsageError(f"unknown train mode {mode!r}")

    student = QuadripartiteRBM.zeros(layout)
    method = cfg.get("train", "method")
    state = TrainerState(
        method=method, k=cfg.get("train", "k"),
        learning_rate=cfg.get("train", "learning_rate"),
        persistent_chains=data if method == "pcd_k" else None,
    )

    def heldout_ll(model):
        if cfg.get("train", "lnz_method") == "exact" and layout.total <= 26:
            lnz = exact_ln_z(model)
        else:
            lnz = ais_ln_z(model, n_temps=cfg.get("train", "ais_temps"),
                           n_chains=cfg.get("train", "ais_chains"),
                           seed=derive_seed(seed, 2, state.update))
        return rbm_log_likelihood(model, heldout, lnz)

    batch_size = min(cfg.get("train", "batch_size"), len(data))
    order_rng = np.random.default_rng(derive_seed(seed, 4))
    stacked = data.stacked()
    order = order_rng.permutation(len(data))
    cursor = 0
    evals = []
    with TrainingLog(directory / "train_log.csv") as log:
        for update in range(cfg.get("train", "updates")):
            if cursor + batch_size > len(data):
                order = order_rng.permutation(len(data))
                cursor = 0
            rows_idx = order[cursor : cursor + batch_size]
            cursor += batch_size
            batch = SampleBatch.from_stacked(layout, stacked[rows_idx], source="data", seed=seed)
            student = train_step(student, batch, state, seed=derive_seed(seed, 3), log=log)
            if (update + 1) % cfg.get("train", "eval_every") == 0:
                evals.append({"update": update + 1, "log_likelihood": heldout_ll(student)})
    save_checkpoint(directory / "model", student, state)
    with atomic_open(directory / "train_eval.csv") as fh:
        fh.write("update,log_likelihood\n")
        for row in evals:
            fh.write(f"{row['update']},{row['log_likelihood']!r}\n")
    write_json(directory / "train_summary.json", {
        "mode": mode, "updates": state.update, "evals": evals,
    })
    click.echo(f"trained {state.update} updates; checkpoint under {directory}/model.*")


@main.command(name="calibrate")
@click.pass_obj
@backend_errors_exit_3
def calibrate_cmd(cfg: RunConfig):
    """Estimate the backend's effective inverse temperature."""
    directory = out_dir(cfg)
    seed = cfg.get("run", "seed")
    rbm = build_rbm(cfg)
    backend = build_backend(cfg)
    condition = condition_for(cfg, "calibrate", rbm)
    method = cfg.get("calibrate", "method")
    methods = list(
        ("kl_gradient", "ratio_fixed", "ratio_adaptive") if method == "all" else (method,)
    )
    summary = {}
    for name in methods:
        iterations, rates, flags = [], [], []
        state = None
        for trial in range(cfg.get("calibrate", "trials")):
            state = calibrate(
                rbm, backend, name,
                beta_0=cfg.get("calibrate", "beta0"),
                max_iters=cfg.get("calibrate", "max_iters"),
                n_samples=cfg.get("calibrate", "n_samples"),
                seed=derive_seed(seed, trial),
                condition=condition,
                eta=cfg.get("calibrate", "eta"),
                delta=cfg.get("calibrate", "delta"),
                gibbs_steps=cfg.get("calibrate", "gibbs_steps"),
            )
            history_to_csv(state, directory / f"calibration_{name}_{trial}.csv")
            iterations.append(len(state.history))
            rates.append((state.beta_t - cfg.get("calibrate", "beta0")) / len(state.history))
            flags.append(state.converged)
        summary[name] = {
            "mean_iterations": float(np.mean(iterations)),
            "std_iterations": float(np.std(iterations)),
            "mean_rate": float(np.mean(rates)),
            "all_converged": all(flags),
            "final_beta_last_trial": state.beta_t,
        }
        note = "" if summary[name]["all_converged"] else " (unconverged runs!)"
        click.echo(
            f"{name}: {summary[name]['mean_iterations']:.1f} +- "
            f"{summary[name]['std_iterations']:.1f} iterations{note}"
        )
    write_json(directory / "calibration_summary.json", summary)


@main.command(name="sample")
@click.pass_obj
@backend_errors_exit_3
def sample_cmd(cfg: RunConfig):
    """Draw classical and backend samples; emit energy histograms."""
    directory = out_dir(cfg)
    seed = cfg.get("run", "seed")
    rbm = build_rbm(cfg)
    n_reads = cfg.get("sample", "n_reads")
    condition = condition_for(cfg, "sample", rbm)
    clamped, clamp_values = (), None
    if condition:
        clamped, clamp_values = (condition[0],), {condition[0]: condition[1]}

    classical = sample(
        rbm, n_reads, cfg.get("sample", "gibbs_steps"), seed=derive_seed(seed, 0),
        clamped=clamped, clamp_values=clamp_values,
    )
    n_bins = cfg.get("sample", "n_bins")
    summary = {"n_reads": n_reads, "conditioned": condition is not None}

    if rbm.layout.total <= 26:
        exact_dos, classical_dos, tv_classical = dos_comparison(rbm, classical, n_bins=n_bins)
        exact_dos.to_csv(directory / "dos_exact.csv")
        summary["tv_classical_vs_exact"] = tv_classical
    else:
        classical_dos = density_of_states(rbm, source=classical, n_bins=n_bins)
    classical_dos.to_csv(directory / "dos_classical.csv")

    if cfg.get("run", "backend") in ("virtual", "remote"):
        backend = build_backend(cfg)
        calib = calibrate(
            rbm, backend, "ratio_adaptive",
            beta_0=cfg.get("calibrate", "beta0"),
            max_iters=cfg.get("calibrate", "max_iters"),
            n_samples=cfg.get("calibrate", "n_samples"),
            seed=derive_seed(seed, 1),
            condition=condition,
            gibbs_steps=cfg.get("calibrate", "gibbs_steps"),
        )
        summary["calibrated_beta"] = calib.beta_t
        summary["calibration_converged"] = calib.converged
        program = apply_scale(rbm_to_ising(rbm), calib.beta_t)
        if condition:
            strength = cfg.get("sample", "flux_strength")
            strength = strength if strength is not None else 50.0 / calib.beta_t
            program = program.replace(
                flux_biases=condition_to_flux(rbm.layout, condition[0], condition[1], strength)
            )
        handle = backend.program(program)
        annealer_batch = backend.read(handle, n_reads, seed=derive_seed(seed, 2))
        edges = classical_dos.bin_edges
        counts, _ = np.histogram(batch_energy(rbm, annealer_batch), bins=edges)
        annealer_dos = DensityOfStates(edges, counts / counts.sum(), counts=counts)
        annealer_dos.to_csv(directory / "dos_annealer.csv")
        summary["tv_annealer_vs_classical"] = tv_distance(annealer_dos, classical_dos)
        summary["tv_limit"] = cfg.get("sample", "tv_limit")
        if condition:
            summary["condition_fidelity"] = float(
                np.all(annealer_batch.part(condition[0]) == condition[1], axis=1).mean()
            )

    if cfg.get("toy", "events") > 0:
        records = toy_showers(
            cfg.get("toy", "events"), seed=derive_seed(seed, 3),
            config=ToyShowerConfig(
                target_sparsity=cfg.get("toy", "target_sparsity"),
                flat_lambda=cfg.get("toy", "flat_lambda"),
                fixed_incident=cfg.get("toy", "fixed_incident"),
            ),
        )
        sparsities = np.array([sparsity_index(r) for r in records])
        counts, edges = np.histogram(sparsities, bins=20, range=(0.0, 1.0))
        with atomic_open(directory / "sparsity_hist.csv") as fh:
            fh.write("bin_left,bin_right,probability\n")
            for left, right, c in zip(edges[:-1], edges[1:], counts):
                fh.write(f"{left!r},{right!r},{c / counts.sum()!r}\n")
        summary["toy_mean_sparsity"] = float(sparsities.mean())

    write_json(directory / "sample_summary.json", summary)
    click.echo("sampling artifacts written to " + str(directory))


@main.command()
@click.pass_obj
def preprocess(cfg: RunConfig):
    """Transform shower files between MeV and logit space, with an audit."""
    directory = out_dir(cfg)
    input_path = cfg.get("preprocess", "input")
    if not input_path:
        raise click.UsageError("preprocess needs [preprocess] input")
    output = cfg.get("preprocess", "output") or str(directory / "transformed.h5")
    delta = cfg.get("preprocess", "delta")
    direction = cfg.get("preprocess", "direction")
    if direction not in ("forward", "inverse"):
        raise click.UsageError(f"unknown direction {direction!r}")

    audit = {"events": 0, "zero_violations": 0, "max_round_trip_rel_error": 0.0}
    rows, energies = [], []
    for record in ingest(input_path):
        if direction == "forward":
            transformed = forward_transform(record, delta=delta)
            if cfg.get("preprocess", "audit"):
                if not np.array_equal(transformed.x == 0.0, record.flat() == 0.0):
                    audit["zero_violations"] += 1
                back = inverse_transform(transformed)
                nz = record.flat() > 0
                if np.any(nz):
                    rel = np.abs(back.flat()[nz] - record.flat()[nz]) / record.flat()[nz]
                    audit["max_round_trip_rel_error"] = max(
                        audit["max_round_trip_rel_error"], float(rel.max())
                    )
            rows.append(transformed.x)
        else:
            shower = inverse_transform(
                TransformedShower(record.flat(), incident_energy=record.incident_energy,
                                  delta=delta)
            )
            rows.append(shower.flat())
        energies.append(record.incident_energy)
        audit["events"] += 1

    with h5py.File(output, "w") as fh:
        fh.create_dataset("incident_energies", data=np.array(energies)[:, None])
        fh.create_dataset("showers", data=np.stack(rows))
    write_json(directory / "preprocess_audit.json", audit)
    click.echo(f"{audit['events']} events -> {output}")
    if cfg.get("preprocess", "audit") and audit["zero_violations"] > 0:
        sys.exit(1)


@main.command(name="encode-energy")
@click.option("--energy", "energies", type=float, multiple=True, required=True,
              help="incident energy in MeV (repeatable)")
@click.pass_obj
def encode_energy(cfg: RunConfig, energies):
    """Render incident energies as 512-bit condition strings."""
    directory = out_dir(cfg)
    rows = []
    for e in energies:
        try:
            enc = encode_incident_energy(e)
        except ValueError as exc:
            raise click.UsageError(str(exc))
        rows.append({"energy_mev": e, "bits": enc.as_string()})
        click.echo(f"{e:.6g} MeV: {enc.as_string()}")
    write_json(directory / "encodings.json", rows)


if __name__ == "__main__":
    main()
