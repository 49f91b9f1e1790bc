"""Ground-truth data: a driven qubit in a spin-star bath, and monitored qubits.

The spin-star Hamiltonian is

    H(t) = (w0/2) Z + sum_k A_k X (x) X_k + ex(t) X + ey(t) Y

with the central qubit as the first tensor factor. The full system is
propagated unitarily with RK4 and the bath traced out to give training
populations. The monitored-qubit factory runs the stochastic master equation
and keeps only what an experiment would see (records and final bits).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ScheduleError
from .generators import readout_qubit
from .quantum import GROUND, pauli, partial_trace, purity
from .solvers import TimeGrid, WienerPath, sme_simulate, write_trajectory_csv

FORMAT_VERSION = 1
_EPS = 1e-9


def trajectory_seed(master_seed: int, index: int) -> int:
    """Independent 64-bit seed for trajectory ``index`` of a dataset."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0])


def config_hash(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ControlSchedule:
    """Piecewise-constant drive amplitudes ``(ex, ey)`` between boundaries."""

    boundaries: tuple
    amplitudes: tuple

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        a = np.asarray(self.amplitudes, dtype=float)
        if b.ndim != 1 or b.size < 2 or np.any(np.diff(b) <= 0):
            raise ScheduleError("boundaries must be strictly increasing with at least two entries")
        if a.shape != (b.size - 1, 2):
            raise ScheduleError(f"need {b.size - 1} (ex, ey) pairs, got shape {a.shape}")
        object.__setattr__(self, "boundaries", tuple(float(x) for x in b))
        object.__setattr__(self, "amplitudes", tuple((float(x), float(y)) for x, y in a))

    @classmethod
    def constant(cls, ex: float, ey: float, t_final: float, t0: float = 0.0) -> "ControlSchedule":
        return cls((t0, t_final), ((ex, ey),))

    @classmethod
    def random(cls, rng: np.random.Generator, t_final: float, n_segments: int = 8, amplitude: float = 1.0):
        bounds = np.linspace(0.0, t_final, n_segments + 1)
        amps = rng.uniform(-amplitude, amplitude, size=(n_segments, 2))
        return cls(tuple(bounds), tuple(map(tuple, amps)))

    @property
    def t_start(self) -> float:
        return self.boundaries[0]

    @property
    def t_end(self) -> float:
        return self.boundaries[-1]

    def value(self, t: float) -> np.ndarray:
        if t < self.t_start - _EPS or t > self.t_end + _EPS:
            raise ScheduleError(f"t={t} outside schedule [{self.t_start}, {self.t_end}]")
        k = int(np.searchsorted(self.boundaries, t, side="right")) - 1
        k = min(max(k, 0), len(self.amplitudes) - 1)
        return np.array(self.amplitudes[k])

    def to_dict(self) -> dict:
        return {"boundaries": list(self.boundaries), "amplitudes": [list(a) for a in self.amplitudes]}

    @classmethod
    def from_dict(cls, doc: dict) -> "ControlSchedule":
        return cls(tuple(doc["boundaries"]), tuple(map(tuple, doc["amplitudes"])))


@dataclass(frozen=True)
class SpinStarConfig:
    n_bath: int
    omega0: float = 1.0
    couplings: tuple = ()
    drive_schedule: ControlSchedule | None = None
    bath_initial: str = "ground"
    beta: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_bath < 0:
            raise ConfigError("n_bath must be nonnegative")
        if len(self.couplings) != self.n_bath:
            raise ConfigError(f"expected {self.n_bath} couplings, got {len(self.couplings)}")
        if self.bath_initial not in ("ground", "thermal"):
            raise ConfigError("bath_initial must be 'ground' or 'thermal'")
        if self.bath_initial == "thermal" and self.beta is None:
            raise ConfigError("a thermal bath needs beta")

    @property
    def dim(self) -> int:
        return 2 ** (self.n_bath + 1)

    @classmethod
    def random_couplings(cls, n_bath: int, seed: int, omega0: float = 1.0, low: float = 0.05, high: float = 0.25, **kw):
        rng = np.random.default_rng([int(seed), 0xC0])
        A = tuple(float(a) for a in rng.uniform(low, high, n_bath) * omega0)
        return cls(n_bath=n_bath, omega0=omega0, couplings=A, seed=seed, **kw)


def _embed(op, site: int, n_sites: int) -> np.ndarray:
    out = np.array([[1.0 + 0j]])
    for k in range(n_sites):
        out = np.kron(out, op if k == site else np.eye(2))
    return out


def spinstar_operators(cfg: SpinStarConfig):
    """(static part, X drive operator, Y drive operator) on the full space."""
    n = cfg.n_bath + 1
    X, Y, Z = pauli("X"), pauli("Y"), pauli("Z")
    H0 = 0.5 * cfg.omega0 * _embed(Z, 0, n)
    sx = _embed(X, 0, n)
    for k, A in enumerate(cfg.couplings):
        H0 = H0 + A * sx @ _embed(X, k + 1, n)
    return H0, sx, _embed(Y, 0, n)


def build_spinstar_hamiltonian(cfg: SpinStarConfig, t: float) -> np.ndarray:
    H0, hx, hy = spinstar_operators(cfg)
    if cfg.drive_schedule is None:
        return H0
    ex, ey = cfg.drive_schedule.value(t)
    return H0 + ex * hx + ey * hy


def bath_state(cfg: SpinStarConfig) -> np.ndarray:
    if cfg.bath_initial == "ground":
        single = GROUND
    else:
        # bath spins share the qubit gap for the purpose of thermal weights
        w = np.exp(np.array([-0.5, 0.5]) * cfg.beta * cfg.omega0)
        single = np.diag(w / w.sum()).astype(complex)
    out = np.array([[1.0 + 0j]])
    for _ in range(cfg.n_bath):
        out = np.kron(out, single)
    return out


def initial_state(cfg: SpinStarConfig) -> np.ndarray:
    return np.kron(GROUND, bath_state(cfg))


def simulate_full(cfg: SpinStarConfig, grid: TimeGrid, schedules: Sequence[ControlSchedule] | None = None, observe=None):
    """RK4 propagation of the full density matrix.

    ``schedules`` batches several drive schedules (defaults to the config's
    own). Returns full states at grid indices ``observe`` with shape
    (n_obs, n_schedules, D, D).
    """
    H0, hx, hy = spinstar_operators(cfg)
    schedules = list(schedules) if schedules is not None else [cfg.drive_schedule]
    mids = grid.t0 + grid.dt * (np.arange(grid.n_steps) + 0.5)
    eps = np.zeros((grid.n_steps, len(schedules), 2))
    for i, s in enumerate(schedules):
        if s is not None:
            eps[:, i] = [s.value(t) for t in mids]
    observe = list(range(grid.n_steps + 1)) if observe is None else list(observe)
    wanted = set(observe)
    rho = np.broadcast_to(initial_state(cfg), (len(schedules),) + H0.shape).copy()
    kept = {0: rho.copy()} if 0 in wanted else {}
    dt = grid.dt
    last = max(wanted) if wanted else 0

    def f(r, H):
        return -1j * (H @ r - r @ H)

    for n in range(last):
        H = H0 + eps[n, :, 0, None, None] * hx + eps[n, :, 1, None, None] * hy
        k1 = f(rho, H)
        k2 = f(rho + 0.5 * dt * k1, H)
        k3 = f(rho + 0.5 * dt * k2, H)
        k4 = f(rho + dt * k3, H)
        rho = rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if n + 1 in wanted:
            kept[n + 1] = rho.copy()
    return np.stack([kept[i] for i in observe])


def simulate_reduced(cfg: SpinStarConfig, grid: TimeGrid, schedules=None, observe=None) -> np.ndarray:
    """Reduced qubit states (bath traced out); shape (n_obs, n_schedules, 2, 2)."""
    full = simulate_full(cfg, grid, schedules, observe)
    return partial_trace(full, 0, [2] * (cfg.n_bath + 1))


# -- population datasets ----------------------------------------------------------


@dataclass
class PopulationDataset:
    """Excited-state populations of S driven trajectories at T common times."""

    schedules: list
    times: np.ndarray
    populations: np.ndarray  # (S, T)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.populations = np.asarray(self.populations, dtype=float)
        if self.populations.shape != (len(self.schedules), self.times.size):
            raise ConfigError("populations must have shape (S, T)")

    @property
    def S(self) -> int:
        return len(self.schedules)

    @property
    def T(self) -> int:
        return self.times.size

    @property
    def trajectories(self) -> list:
        return [
            {"schedule": s, "samples": list(zip(self.times.tolist(), p.tolist()))}
            for s, p in zip(self.schedules, self.populations)
        ]

    def subset(self, idx) -> "PopulationDataset":
        idx = list(idx)
        return PopulationDataset([self.schedules[i] for i in idx], self.times, self.populations[idx], dict(self.metadata))

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = dict(self.metadata)
        meta["format_version"] = FORMAT_VERSION
        meta["kind"] = "population"
        meta["times"] = self.times.tolist()
        meta["schedules"] = [s.to_dict() for s in self.schedules]
        (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        with open(out / "populations.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trajectory_id", "t", "population"])
            for i, row in enumerate(self.populations):
                for t, p in zip(self.times, row):
                    w.writerow([i, repr(float(t)), repr(float(p))])

    @classmethod
    def load(cls, data_dir) -> "PopulationDataset":
        d = Path(data_dir)
        meta = json.loads((d / "metadata.json").read_text())
        if meta.get("format_version") != FORMAT_VERSION or meta.get("kind") != "population":
            raise ConfigError(f"{d} is not a version-{FORMAT_VERSION} population dataset")
        schedules = [ControlSchedule.from_dict(s) for s in meta.pop("schedules")]
        times = np.array(meta.pop("times"), dtype=float)
        pops = np.zeros((len(schedules), times.size))
        with open(d / "populations.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        index = {t: j for j, t in enumerate(times.tolist())}
        for i, t, p in rows:
            pops[int(i), index[float(t)]] = float(p)
        return cls(schedules, times, pops, meta)


def emit_population_dataset(
    template: SpinStarConfig,
    S: int,
    T: int,
    seed: int,
    t_final: float = 10.0,
    dt: float = 0.0025,
    n_segments: int = 8,
    shots: int | None = None,
) -> PopulationDataset:
    """Simulate S randomly driven trajectories and read populations at T times.

    Sample times are ``j * t_final / T`` for ``j = 1..T``. ``shots=None``
    keeps exact Born probabilities; otherwise each point is a binomial
    estimate from that many shots.
    """
    if S < 1 or T < 1:
        raise ConfigError("S and T must be at least 1")
    grid = TimeGrid.span(t_final, dt)
    times = np.arange(1, T + 1) * (t_final / T)
    observe = [grid.index_of(t) for t in times]
    schedules = []
    for i in range(S):
        rng = np.random.default_rng(trajectory_seed(seed, i))
        schedules.append(ControlSchedule.random(rng, t_final, n_segments, template.omega0))
    reduced = simulate_reduced(template, grid, schedules, observe)
    pops = np.clip(reduced[..., 0, 0].real.T, 0.0, 1.0)  # (S, T)
    if shots is not None:
        counts = np.array(
            [np.random.default_rng([trajectory_seed(seed, i), 1]).binomial(shots, pops[i]) for i in range(S)]
        )
        pops = counts / shots
    meta = {
        "master_seed": int(seed),
        "S": S,
        "T": T,
        "t_final": t_final,
        "dt": dt,
        "n_segments": n_segments,
        "shots": shots,
        "n_bath": template.n_bath,
        "omega0": template.omega0,
        "couplings": list(template.couplings),
        "bath_initial": template.bath_initial,
        "beta": template.beta,
        "trajectory_seeds": [trajectory_seed(seed, i) for i in range(S)],
    }
    return PopulationDataset(schedules, times, pops, meta)


# -- weak-measurement datasets ------------------------------------------------------


@dataclass
class TrajectoryRecord:
    grid: TimeGrid
    record: np.ndarray
    final_bit: int
    seed: int

    def __post_init__(self):
        self.record = np.asarray(self.record, dtype=float)
        if self.record.shape != (self.grid.n_steps,):
            raise ConfigError("record length must equal n_steps")


@dataclass
class SMEDataset:
    """Weak-measurement records and final bits, plus the withheld true states."""

    grid: TimeGrid
    records: np.ndarray  # (n_steps, S)
    bits: np.ndarray  # (S,)
    seeds: list
    truth: np.ndarray | None = None  # (n_steps + 1, S, 2, 2)
    metadata: dict = field(default_factory=dict)

    @property
    def S(self) -> int:
        return self.bits.size

    def trajectory(self, i: int) -> TrajectoryRecord:
        return TrajectoryRecord(self.grid, self.records[:, i], int(self.bits[i]), self.seeds[i])

    def subset(self, idx) -> "SMEDataset":
        idx = list(idx)
        truth = None if self.truth is None else self.truth[:, idx]
        return SMEDataset(self.grid, self.records[:, idx], self.bits[idx], [self.seeds[i] for i in idx], truth, dict(self.metadata))

    def save(self, out_dir, with_truth: bool = True) -> None:
        out = Path(out_dir)
        (out / "records").mkdir(parents=True, exist_ok=True)
        meta = dict(self.metadata)
        meta.update(
            format_version=FORMAT_VERSION,
            kind="sme",
            grid={"t0": self.grid.t0, "dt": self.grid.dt, "n_steps": self.grid.n_steps},
            S=self.S,
        )
        (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        times = self.grid.times[:-1]
        for i in range(self.S):
            with open(out / "records" / f"record_{i:04d}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["t", "V"])
                for t, v in zip(times, self.records[:, i]):
                    w.writerow([repr(float(t)), repr(float(v))])
        with open(out / "final_bits.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trajectory_id", "seed", "final_bit"])
            for i, (s, b) in enumerate(zip(self.seeds, self.bits)):
                w.writerow([i, s, int(b)])
        if with_truth and self.truth is not None:
            (out / "truth").mkdir(exist_ok=True)
            for i in range(self.S):
                write_trajectory_csv(out / "truth" / f"trajectory_{i:04d}.csv", self.grid.times, self.truth[:, i])

    @classmethod
    def load(cls, data_dir) -> "SMEDataset":
        d = Path(data_dir)
        meta = json.loads((d / "metadata.json").read_text())
        if meta.get("format_version") != FORMAT_VERSION or meta.get("kind") != "sme":
            raise ConfigError(f"{d} is not a version-{FORMAT_VERSION} SME dataset")
        g = meta["grid"]
        grid = TimeGrid(float(g["t0"]), float(g["dt"]), int(g["n_steps"]))
        with open(d / "final_bits.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        seeds = [int(r[1]) for r in rows]
        bits = np.array([int(r[2]) for r in rows])
        records = np.stack([read_record_csv(d / "records" / f"record_{i:04d}.csv") for i in range(len(rows))], axis=1)
        truth = None
        tdir = d / "truth"
        if tdir.is_dir():
            from .solvers import read_trajectory_csv

            truth = np.stack([read_trajectory_csv(tdir / f"trajectory_{i:04d}.csv")[1] for i in range(len(rows))], axis=1)
        return cls(grid, records, bits, seeds, truth, meta)


def read_record_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["t", "V"]:
        raise ConfigError(f"{path} is not a record file (header t,V)")
    return np.array([float(r[1]) for r in rows[1:]])


def emit_sme_dataset(true_params: dict, grid: TimeGrid, S: int, seed: int, rho0=GROUND) -> SMEDataset:
    """S independent monitored trajectories of ``H = omega X``, ``c = sqrt(gamma) Z``."""
    if S < 1:
        raise ConfigError("S must be at least 1")
    gen = readout_qubit(true_params["omega"], true_params["gamma"], true_params["eta"])
    seeds = [trajectory_seed(seed, i) for i in range(S)]
    noise = WienerPath.sample(seeds, grid.n_steps, grid.dt)
    states, record, bits = sme_simulate(gen, grid, noise, rho0)
    meta = {
        "master_seed": int(seed),
        "true_params": {k: float(v) for k, v in true_params.items()},
        "rho0": "ground",
    }
    return SMEDataset(grid, np.asarray(record), np.asarray(bits), seeds, np.asarray(states), meta)


def full_purity(states) -> np.ndarray:
    return purity(states)
