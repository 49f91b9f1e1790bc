"""Command-line experiments: dataset generation, training, reconstruction, sweeps.

Every command takes an optional JSON config (unknown keys are rejected,
``format_version`` is checked), writes its outputs with the effective config
hash, and exits 0 on success, 2 on config errors, 3 on I/O errors and 4 when
training diverged (partial results are still written).
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from . import estimation as est
from .errors import ConfigError, NumericError, ScheduleError, SwarmError
from .generators import GeneratorSet, readout_qubit
from .quantum import GROUND
from .solvers import LINDBLAD, NZ, TimeGrid, sme_reconstruct, write_trajectory_csv
from .spinstar import (
    FORMAT_VERSION,
    PopulationDataset,
    SMEDataset,
    SpinStarConfig,
    config_hash,
    emit_population_dataset,
    emit_sme_dataset,
    read_record_csv,
)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

DEFAULTS = {
    "gen-sme-data": {"omega": 1.0, "gamma": 0.5, "eta": 0.4, "t_final": 4.0, "dt": 0.01},
    "train-sme": {
        "init": {"omega": 1.5, "gamma": 0.3, "eta": 0.6},
        "sigma": 0.5,
        "lr": 1e-2,
        "max_steps": 5000,
        "tolerance": 1e-9,
        "clip": 10.0,
        "log_every": 10,
    },
    "gen-spinstar-data": {
        "n_bath": 4,
        "omega0": 1.0,
        "coupling_low": 0.05,
        "coupling_high": 0.25,
        "t_final": 10.0,
        "dt": 0.0025,
        "n_segments": 8,
        "shots": None,
        "bath_initial": "ground",
        "beta": None,
    },
    "train-nz": {
        "dt": 0.05,
        "method": "rk4",
        "lr": 1e-2,
        "max_steps": 5000,
        "tolerance": 1e-9,
        "clip": 10.0,
        "sigma": 0.5,
        "decay_rate": 0.05,
        "init": "random",
        "baseline": True,
        "log_every": 10,
    },
}
DEFAULTS["sweep-kernel"] = {k: v for k, v in DEFAULTS["train-nz"].items() if k not in ("init", "log_every")}


class ExitError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def load_config(path, command: str, overrides: dict) -> dict:
    """Defaults, then the JSON file, then command-line values."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ExitError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if doc.pop("format_version", None) != FORMAT_VERSION:
            raise ConfigError(f"config format_version must be {FORMAT_VERSION}")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(doc)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    cfg["format_version"] = FORMAT_VERSION
    return cfg


def _budget(cfg):
    return est.Budget(int(cfg["max_steps"]), float(cfg["tolerance"]))


def _dump(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _provenance(cfg) -> dict:
    return {"format_version": FORMAT_VERSION, "config_hash": config_hash(cfg), "config": cfg}


def _log_writer(path):
    fh = open(path, "w")

    def log(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")

    return fh, log


def command(fn):
    """Shared --config/--threads handling and exit-code mapping."""

    @click.option("--threads", type=click.IntRange(min=1), default=None, help="BLAS threads (default: all cores).")
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="JSON experiment config.")
    @functools.wraps(fn)
    def wrapper(threads, config_path, **kw):
        try:
            with threadpool_limits(limits=threads):
                fn(config_path=config_path, **kw)
        except ExitError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.code)
        except (ConfigError, ScheduleError, KeyError, TypeError, ValueError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except OSError as exc:
            click.echo(f"I/O error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except (NumericError, SwarmError) as exc:
            click.echo(f"diverged: {exc}", err=True)
            sys.exit(EXIT_DIVERGED)

    return wrapper


def _require_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ExitError(f"data directory not found: {p}", EXIT_IO)
    return p


@click.group()
def main():
    """Learn open-system qubit dynamics from simulated measurement data."""


@main.command("gen-sme-data")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--trajectories", "S", required=True, type=int, help="Number of recorded trajectories.")
@click.option("--seed", default=0, show_default=True, type=int, help="Master seed.")
@command
def gen_sme_data(config_path, out_dir, S, seed):
    """Simulate weak-measurement records of a monitored, driven qubit."""
    cfg = load_config(config_path, "gen-sme-data", {"S": S, "seed": seed})
    if S < 1:
        raise ConfigError("--trajectories must be at least 1")
    truth = {k: float(cfg[k]) for k in ("omega", "gamma", "eta")}
    grid = TimeGrid.span(float(cfg["t_final"]), float(cfg["dt"]))
    ds = emit_sme_dataset(truth, grid, S, seed)
    ds.metadata.update(_provenance(cfg))
    ds.save(out_dir)
    click.echo(f"S={S} grid: t0={grid.t0} dt={grid.dt} n_steps={grid.n_steps}")
    click.echo(f"truth: {Path(out_dir) / 'truth'}")


def _sme_start(init: dict) -> GeneratorSet:
    return readout_qubit(float(init["omega"]), float(init["gamma"]), float(init["eta"]))


@main.command("train-sme")
@click.option("--data-dir", required=True, type=click.Path(), help="Dataset from gen-sme-data.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Result JSON path.")
@click.option("--swarm", default=1, show_default=True, type=int, help="Independent runs.")
@click.option("--seed", default=0, show_default=True, type=int, help="Swarm seed.")
@command
def train_sme(config_path, data_dir, out, swarm, seed):
    """Fit (omega, gamma, eta) to records and final bits; log beside --out."""
    cfg = load_config(config_path, "train-sme", {"swarm": swarm, "seed": seed})
    ds = SMEDataset.load(_require_dir(data_dir))
    cfg["data_hash"] = ds.metadata.get("config_hash")
    obj = est.weak_objective(_sme_start(cfg["init"]), est.SME_NAMES, ds)
    fh, log = _log_writer(str(out) + ".log.jsonl")
    try:
        res = est.swarm_train(
            obj,
            swarm,
            est.lognormal_sampler(obj.initial(), float(cfg["sigma"])),
            seed,
            _budget(cfg),
            est.AdamHyper(lr=float(cfg["lr"])),
            cfg["clip"],
            log,
            int(cfg["log_every"]),
        )
    except SwarmError as exc:
        _dump(out, {**_provenance(cfg), "diverged": True, "error": str(exc)})
        raise
    finally:
        fh.close()
    best = obj.generators(res.best_run.final_theta.values)
    _dump(
        out,
        {
            **_provenance(cfg),
            "params": est.sme_params(best),
            "generators": best.to_dict(),
            "final_cost": res.best_run.final_cost,
            "swarm": res.to_dict(),
        },
    )
    click.echo(json.dumps(est.sme_params(best), sort_keys=True))


@main.command("reconstruct")
@click.option("--params", "params_path", required=True, type=click.Path(dir_okay=False), help="Result JSON (or {'params': ...}).")
@click.option("--record", "record_path", required=True, type=click.Path(dir_okay=False), help="Record CSV (t, V).")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Trajectory CSV path.")
@command
def reconstruct(config_path, params_path, record_path, out):
    """Filter one record through fitted generators; write the trajectory CSV."""
    if config_path is not None:
        raise ConfigError("reconstruct takes no config")
    for p in (params_path, record_path):
        if not Path(p).is_file():
            raise ExitError(f"file not found: {p}", EXIT_IO)
    doc = json.loads(Path(params_path).read_text())
    if "generators" in doc:
        gen = GeneratorSet.from_dict(doc["generators"])
    else:
        gen = _sme_start(doc["params"])
    with open(record_path, newline="") as fh:
        times = np.array([float(r[0]) for r in list(csv.reader(fh))[1:]])
    record = read_record_csv(record_path)
    if times.size < 2:
        raise ConfigError("record needs at least two samples")
    grid = TimeGrid(float(times[0]), float(times[1] - times[0]), times.size)
    states = sme_reconstruct(gen, grid, record, GROUND, keep="all")
    write_trajectory_csv(out, grid.times, states)
    _dump(str(out) + ".json", _provenance({"params": doc.get("params"), "record": Path(record_path).name}))


@main.command("gen-spinstar-data")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--trajectories", "S", default=20, show_default=True, type=int, help="Drive schedules.")
@click.option("--samples", "T", default=25, show_default=True, type=int, help="Durations per schedule.")
@click.option("--seed", default=0, show_default=True, type=int, help="Master seed.")
@command
def gen_spinstar_data(config_path, out_dir, S, T, seed):
    """Excited populations of a driven qubit in a spin-star bath."""
    cfg = load_config(config_path, "gen-spinstar-data", {"S": S, "T": T, "seed": seed})
    if S < 1 or T < 1:
        raise ConfigError("--trajectories and --samples must be at least 1")
    template = SpinStarConfig.random_couplings(
        int(cfg["n_bath"]),
        seed,
        float(cfg["omega0"]),
        float(cfg["coupling_low"]),
        float(cfg["coupling_high"]),
        bath_initial=cfg["bath_initial"],
        beta=cfg["beta"],
    )
    ds = emit_population_dataset(
        template, S, T, seed, float(cfg["t_final"]), float(cfg["dt"]), int(cfg["n_segments"]), cfg["shots"]
    )
    ds.metadata.update(_provenance(cfg))
    ds.save(out_dir)
    click.echo(f"S={S} T={T} couplings={list(template.couplings)}")


def _channel_bases(channels: str) -> tuple:
    bases = est.CHANNEL_SETS.get(channels, tuple(b for b in channels.split(",") if b))
    bad = [b for b in bases if b not in ("sx", "sy", "sz", "sp", "sm")]
    if bad or not bases:
        raise ConfigError(f"unknown channels {channels!r}")
    return bases


def _lindblad_swarm(ds, cfg, swarm, seed, log=None):
    every = int(cfg.get("log_every", 10))
    gen, names = est.lindblad_model(("sm",), float(ds.metadata.get("omega0", 1.0)), float(cfg["decay_rate"]))
    obj = est.population_objective(gen, names, ds, LINDBLAD, float(cfg["dt"]), cfg["method"])
    res = est.swarm_train(
        obj, swarm, est.lognormal_sampler(obj.initial(), float(cfg["sigma"])), seed, _budget(cfg), est.AdamHyper(lr=float(cfg["lr"])), cfg["clip"], log, every
    )
    return obj, res


@main.command("train-nz")
@click.option("--data-dir", required=True, type=click.Path(), help="Dataset from gen-spinstar-data.")
@click.option("--channels", default="sm,sp,sz", show_default=True, help="Kernel channels: sm or sm,sp,sz.")
@click.option("--kernel-length", "L", default=32, show_default=True, type=click.IntRange(min=1), help="Kernel lags.")
@click.option("--swarm", default=8, show_default=True, type=click.IntRange(min=1), help="Runs per model.")
@click.option("--seed", default=0, show_default=True, type=int, help="Swarm seed.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Result JSON path.")
@command
def train_nz(config_path, data_dir, channels, L, swarm, seed, out):
    """Train a memory-kernel swarm (and the Lindblad baseline) on population data."""
    cfg = load_config(config_path, "train-nz", {"channels": channels, "L": L, "swarm": swarm, "seed": seed})
    if cfg["init"] not in ("random", "delta"):
        raise ConfigError("init must be 'random' or 'delta'")
    bases = _channel_bases(channels)
    ds = PopulationDataset.load(_require_dir(data_dir))
    cfg["data_hash"] = ds.metadata.get("config_hash")
    dt = float(cfg["dt"])
    omega0 = float(ds.metadata.get("omega0", 1.0))
    fh, log = _log_writer(str(out) + ".log.jsonl")
    result = _provenance(cfg)
    try:
        lind_gen = None
        if cfg["baseline"] or cfg["init"] == "delta":
            lobj, lres = _lindblad_swarm(ds, cfg, swarm, seed, lambda r: log({"model": "lindblad", **r}))
            lind_gen = lobj.generators(lres.best_run.final_theta.values)
            result["lindblad"] = {"best_rmse": lres.best_run.final_rmse, "spread": list(map(np.sqrt, lres.spread)), "swarm": lres.to_dict()}
        if cfg["init"] == "delta":
            gen = est.kernel_from_lindblad(lind_gen, bases, L, dt)
            names = gen.select("h.", "S", "K")
        else:
            gen, names = est.nz_model(bases, L, dt, np.random.default_rng([seed, L, len(bases)]), omega0, cfg["decay_rate"])
        obj = est.population_objective(gen, names, ds, NZ, dt, cfg["method"])
        result["nz_initial_rmse"] = est.rmse(obj.value(obj.initial().values))
        sampler = est.lognormal_sampler(obj.initial(), float(cfg["sigma"]))
        res = est.swarm_train(obj, swarm, sampler, seed, _budget(cfg), est.AdamHyper(lr=float(cfg["lr"])), cfg["clip"], lambda r: log({"model": "nz", **r}), int(cfg["log_every"]))
    except SwarmError as exc:
        _dump(out, {**result, "diverged": True, "error": str(exc)})
        raise
    finally:
        fh.close()
    best = obj.generators(res.best_run.final_theta.values)
    result["nz"] = {"best_rmse": res.best_run.final_rmse, "spread": list(map(np.sqrt, res.spread)), "swarm": res.to_dict()}
    result["generators"] = best.to_dict()
    _dump(out, result)
    line = f"nz[{channels}, L={L}] best RMSE {res.best_run.final_rmse:.6g}"
    if "lindblad" in result:
        line += f"; lindblad best RMSE {result['lindblad']['best_rmse']:.6g}"
    click.echo(line)


@main.command("sweep-kernel")
@click.option("--data-dir", required=True, type=click.Path(), help="Dataset from gen-spinstar-data.")
@click.option("--lengths", default="1,2,4,8,16,32", show_default=True, help="Comma-separated kernel lengths.")
@click.option("--channel-sets", default="sm;sm,sp,sz", show_default=True, help="Semicolon-separated channel sets.")
@click.option("--swarm", default=8, show_default=True, type=click.IntRange(min=1), help="Runs per group.")
@click.option("--seed", default=0, show_default=True, type=int, help="Swarm seed.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Sweep CSV path.")
@command
def sweep_kernel(config_path, data_dir, lengths, channel_sets, swarm, seed, out):
    """Best RMSE against kernel length for each channel set (CSV for plotting)."""
    try:
        Ls = [int(x) for x in lengths.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --lengths {lengths!r}") from exc
    if not Ls or min(Ls) < 1:
        raise ConfigError("kernel lengths must be positive")
    sets = [s for s in channel_sets.split(";") if s]
    for s in sets:
        _channel_bases(s)
    cfg = load_config(config_path, "sweep-kernel", {"lengths": Ls, "channel_sets": sets, "swarm": swarm, "seed": seed})
    ds = PopulationDataset.load(_require_dir(data_dir))
    cfg["data_hash"] = ds.metadata.get("config_hash")
    rows, summary = est.kernel_length_sweep(
        ds,
        Ls,
        sets,
        swarm,
        seed,
        float(cfg["dt"]),
        _budget(cfg),
        est.AdamHyper(lr=float(cfg["lr"])),
        float(ds.metadata.get("omega0", 1.0)),
        cfg["method"],
        float(cfg["sigma"]),
        cfg["decay_rate"],
        cfg["clip"],
    )
    side = _provenance(cfg)
    side["summary"] = summary
    if cfg["baseline"]:
        _, lres = _lindblad_swarm(ds, cfg, swarm, seed)
        side["lindblad_best_rmse"] = lres.best_run.final_rmse
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["L", "channel_set", "run_seed", "final_rmse"])
        for r in rows:
            w.writerow([r["L"], r["channel_set"], r["run_seed"], repr(r["final_rmse"])])
    _dump(str(out) + ".json", side)
    for s in summary:
        click.echo(f"L={s['L']} {s['channel_set']}: best {s['best_rmse']:.6g}")


if __name__ == "__main__":
    main()
