"""Cost functions, Adam, and multi-start training over the differentiable solvers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .dual import Dual, ParameterVector, lift, value_of
from .errors import ConfigError, NumericError, SwarmError
from .generators import CollapseChannel, GeneratorSet, init_kernel, qubit_generators
from .quantum import GROUND, pauli
from .solvers import LINDBLAD, NZ, RK4, TimeGrid, propagate, sme_reconstruct
from .spinstar import PopulationDataset, SMEDataset, TrajectoryRecord, trajectory_seed

WEAK = "weak"
POPULATION = "population"


@dataclass(frozen=True)
class CostSpec:
    kind: str
    distance: str = "squared"

    def __post_init__(self):
        if self.kind not in (WEAK, POPULATION):
            raise ConfigError(f"unknown cost kind {self.kind!r}")
        if self.distance != "squared":
            raise ConfigError("only the squared-difference distance is implemented")


def squared_difference(a, b):
    diff = a - b
    return diff * diff


def _records_arrays(dataset):
    if isinstance(dataset, SMEDataset):
        return dataset.grid, dataset.records, dataset.bits
    records = list(dataset)
    if not records:
        raise ConfigError("dataset is empty")
    if not all(isinstance(r, TrajectoryRecord) for r in records):
        raise TypeError("expected an SMEDataset or TrajectoryRecord items")
    grid = records[0].grid
    return grid, np.stack([r.record for r in records], axis=1), np.array([r.final_bit for r in records])


def cost_weak(gen: GeneratorSet, dataset, rho0=GROUND):
    """Mean squared difference between final bits and filtered Born probabilities.

    Each record is filtered through the model; the excited population of the
    final state is the predicted probability of reading 1.
    """
    grid, records, bits = _records_arrays(dataset)
    if bits.size == 0:
        raise ConfigError("dataset is empty")
    try:
        final = sme_reconstruct(gen, grid, records, rho0, keep="final")
    except NumericError as exc:
        raise NumericError(f"records {exc.rows}: {exc}", op=exc.op, step=exc.step, rows=exc.rows) from exc
    p = final[..., 0, 0].real
    return squared_difference(p, bits).mean()


def population_grid(dataset: PopulationDataset, dt: float) -> tuple:
    """Model grid covering the dataset and the grid index of every sample time."""
    grid = TimeGrid.span(float(dataset.times.max()), dt)
    return grid, [grid.index_of(t) for t in dataset.times]


def predict_populations(gen: GeneratorSet, dataset: PopulationDataset, dt: float, mode: str = LINDBLAD, method: str = RK4, rho0=GROUND):
    """Model excited populations at the dataset's sample times, shape (T, S)."""
    grid, observe = population_grid(dataset, dt)
    states = propagate(gen, grid, rho0, dataset.schedules, mode=mode, method=method, observe=observe)
    return states[..., 0, 0].real


def cost_population(gen: GeneratorSet, dataset: PopulationDataset, mode: str = LINDBLAD, dt: float = 0.05, method: str = RK4, rho0=GROUND):
    """Mean over trajectories and sample times of squared population errors."""
    if dataset.S == 0:
        raise ConfigError("dataset is empty")
    pred = predict_populations(gen, dataset, dt, mode, method, rho0)
    return squared_difference(pred, dataset.populations.T).mean()


def rmse(cost) -> float:
    return float(np.sqrt(max(float(value_of(cost)), 0.0)))


class Objective:
    """Scalar cost of a generator set as a function of its active parameters."""

    def __init__(self, base: GeneratorSet, names: Sequence[str], evaluate: Callable):
        self.base = base
        self.names = tuple(names)
        self.evaluate = evaluate

    def initial(self) -> ParameterVector:
        return self.base.parameter_vector(self.names)

    def value(self, values) -> float:
        return float(value_of(self.evaluate(self.base.realize(np.asarray(values, dtype=float), self.names))))

    def value_and_grad(self, values):
        theta = ParameterVector(np.asarray(values, dtype=float), self.names)
        c = self.evaluate(self.base.realize(lift(theta), self.names))
        return float(c.val), np.asarray(c.jac.real, dtype=float)

    def generators(self, values) -> GeneratorSet:
        return self.base.realize(np.asarray(values, dtype=float), self.names)


def weak_objective(base: GeneratorSet, names, dataset, rho0=GROUND) -> Objective:
    return Objective(base, names, lambda g: cost_weak(g, dataset, rho0))


def population_objective(base: GeneratorSet, names, dataset, mode=LINDBLAD, dt=0.05, method=RK4) -> Objective:
    return Objective(base, names, lambda g: cost_population(g, dataset, mode, dt, method))


# -- Adam ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class OptimizerState:
    theta: ParameterVector
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    hyper: AdamHyper = AdamHyper()

    @classmethod
    def start(cls, theta: ParameterVector, hyper: AdamHyper | None = None) -> "OptimizerState":
        p = len(theta)
        return cls(theta, np.zeros(p), np.zeros(p), 0, hyper or AdamHyper())


def adam_step(state: OptimizerState, gradient) -> OptimizerState:
    """One bias-corrected Adam update."""
    g = np.asarray(gradient, dtype=float)
    if g.shape != state.first_moment.shape:
        raise ValueError(f"gradient has shape {g.shape}, expected {state.first_moment.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient", op="adam")
    h = state.hyper
    t = state.step_count + 1
    m = h.beta1 * state.first_moment + (1.0 - h.beta1) * g
    v = h.beta2 * state.second_moment + (1.0 - h.beta2) * g * g
    m_hat = m / (1.0 - h.beta1**t)
    v_hat = v / (1.0 - h.beta2**t)
    values = state.theta.values - h.lr * m_hat / (np.sqrt(v_hat) + h.eps)
    return OptimizerState(state.theta.with_values(values), m, v, t, h)


# -- training -------------------------------------------------------------------------


@dataclass(frozen=True)
class Budget:
    max_steps: int = 5000
    tolerance: float = 1e-9
    window: int = 50

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")


@dataclass
class RunRecord:
    seed: object
    initial_theta: ParameterVector
    final_theta: ParameterVector
    final_cost: float
    cost_history: list
    steps: int
    converged: bool = False
    diverged: bool = False
    error: str | None = None

    @property
    def final_rmse(self) -> float:
        return float(np.sqrt(max(self.final_cost, 0.0))) if np.isfinite(self.final_cost) else float("nan")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "initial_theta": self.initial_theta.as_dict(),
            "final_theta": self.final_theta.as_dict(),
            "final_cost": self.final_cost,
            "final_rmse": self.final_rmse,
            "steps": self.steps,
            "converged": self.converged,
            "diverged": self.diverged,
            "error": self.error,
            "cost_history": self.cost_history,
        }


def train(
    objective: Objective,
    init: ParameterVector | None = None,
    budget: Budget = Budget(),
    hyper: AdamHyper | None = None,
    clip: float | None = 10.0,
    seed=None,
    log: Callable[[dict], None] | None = None,
    log_every: int = 10,
) -> RunRecord:
    """Full-batch Adam until ``max_steps`` or a cost plateau.

    The plateau test compares the cost with its value ``window`` steps
    earlier. Gradients are clipped elementwise to ``[-clip, clip]``. A
    NumericError ends the run early with ``diverged=True``.
    """
    init = objective.initial() if init is None else init
    if tuple(init.names) != objective.names:
        raise ConfigError("initial parameters do not match the objective")
    state = OptimizerState.start(init, hyper)
    history: list = []
    converged = False
    try:
        for step in range(budget.max_steps):
            cost, grad = objective.value_and_grad(state.theta.values)
            if not np.isfinite(cost):
                raise NumericError("non-finite cost", op="cost", step=step)
            history.append(cost)
            if log is not None and step % log_every == 0:
                log({"step": step, "cost": cost, "params": state.theta.as_dict()})
            if len(history) > budget.window and abs(history[-1 - budget.window] - cost) < budget.tolerance:
                converged = True
                break
            if clip is not None:
                grad = np.clip(grad, -clip, clip)
            state = adam_step(state, grad)
        final_cost = objective.value(state.theta.values)
        if not np.isfinite(final_cost):
            raise NumericError("non-finite cost", op="cost")
    except NumericError as exc:
        return RunRecord(seed, init, state.theta, float("nan"), history, len(history), False, True, str(exc))
    if log is not None:
        log({"step": len(history), "cost": final_cost, "params": state.theta.as_dict(), "final": True})
    return RunRecord(seed, init, state.theta, final_cost, history, len(history), converged)


@dataclass
class SwarmResult:
    runs: list
    best: int

    @property
    def best_run(self) -> RunRecord:
        return self.runs[self.best]

    @property
    def spread(self) -> tuple:
        costs = [r.final_cost for r in self.runs if not r.diverged]
        return (min(costs), max(costs)) if costs else (float("nan"), float("nan"))

    def to_dict(self) -> dict:
        return {"best": self.best, "runs": [r.to_dict() for r in self.runs]}


def lognormal_sampler(center: ParameterVector, sigma: float = 0.5) -> Callable:
    """Multiplicative log-normal perturbation of ``center``."""

    def sample(rng: np.random.Generator) -> ParameterVector:
        return center.with_values(center.values * np.exp(sigma * rng.standard_normal(len(center))))

    return sample


def swarm_train(
    objective: Objective,
    n_runs: int = 8,
    init_sampler: Callable | None = None,
    seed: int = 0,
    budget: Budget = Budget(),
    hyper: AdamHyper | None = None,
    clip: float | None = 10.0,
    log: Callable[[dict], None] | None = None,
    log_every: int = 10,
) -> SwarmResult:
    """Independent seeded trainings; run ``i`` draws its start from seed (seed, i)."""
    if n_runs < 1:
        raise ConfigError("n_runs must be at least 1")
    sampler = init_sampler or lognormal_sampler(objective.initial())
    runs = []
    for i in range(n_runs):
        run_seed = trajectory_seed(seed, i)
        init = sampler(np.random.default_rng(run_seed))
        run_log = None if log is None else (lambda rec, i=i: log({"run": i, **rec}))
        runs.append(train(objective, init, budget, hyper, clip, run_seed, run_log, log_every))
    ok = [k for k, r in enumerate(runs) if not r.diverged]
    if not ok:
        raise SwarmError(f"all {n_runs} runs diverged: {runs[0].error}")
    best = min(ok, key=lambda k: runs[k].final_cost)
    return SwarmResult(runs, best)



def restart_train(
    objective: Objective,
    max_attempts: int = 4,
    init_sampler: Callable | None = None,
    seed: int = 0,
    budget: Budget = Budget(),
    hyper: AdamHyper | None = None,
    clip: float | None = 10.0,
    log: Callable[[dict], None] | None = None,
    log_every: int = 10,
) -> list:
    """Sequential swarm: train from the objective's start, and after a divergence
    restart from the next seeded sample, until one run completes.

    Returns every attempt in order; the last one is the survivor. Raises
    SwarmError when all attempts diverge.
    """
    if max_attempts < 1:
        raise ConfigError("max_attempts must be at least 1")
    sampler = init_sampler or lognormal_sampler(objective.initial())
    runs = []
    for i in range(max_attempts):
        run_seed = trajectory_seed(seed, i)
        init = objective.initial() if i == 0 else sampler(np.random.default_rng(run_seed))
        run_log = None if log is None else (lambda rec, i=i: log({"attempt": i, **rec}))
        runs.append(train(objective, init, budget, hyper, clip, run_seed, run_log, log_every))
        if not runs[-1].diverged:
            return runs
    raise SwarmError(f"all {max_attempts} attempts diverged: {runs[-1].error}")

# -- the monitored-qubit experiment ---------------------------------------------------

SME_NAMES = ("h.re01", "amp0.sz", "eta_raw")


def sme_params(gen: GeneratorSet) -> dict:
    """Physical ``(omega, gamma, eta)`` of a readout-qubit generator set."""
    return {
        "omega": float(np.real(value_of(gen.hamiltonian.h)[0, 1])),
        "gamma": float(value_of(gen.channels[0].rate)),
        "eta": float(value_of(gen.eta)),
    }


def reconstruction_rmse(gen: GeneratorSet, dataset: SMEDataset, rho0=GROUND) -> float:
    """Population RMSE of filtered trajectories against the withheld true ones.

    A model whose filter blows up on any held-out record scores ``inf``.
    """
    if dataset.truth is None:
        raise ConfigError("dataset carries no true trajectories")
    try:
        with np.errstate(all="ignore"):
            pops = sme_reconstruct(gen, dataset.grid, dataset.records, rho0, keep="population")
    except NumericError:
        return float("inf")
    return float(np.sqrt(np.mean((np.asarray(pops) - dataset.truth[..., 0, 0].real) ** 2)))


# -- model families for the memory-kernel experiment -----------------------------------

CHANNEL_SETS = {"sm": ("sm",), "sm,sp,sz": ("sm", "sp", "sz")}


def driven_qubit(omega0: float = 1.0, channels: Sequence[CollapseChannel] = (), kernel=None) -> GeneratorSet:
    """``h = (w0/2) Z`` with X and Y drive couplings: the bare-qubit starting point."""
    return qubit_generators(h=0.5 * omega0 * pauli("Z"), couplings=("sx", "sy"), channels=channels, kernel=kernel)


def lindblad_model(bases=("sm",), omega0: float = 1.0, rate: float = 0.05) -> tuple:
    """(generators, active names) for a Lindblad model with learnable rates."""
    gen = driven_qubit(omega0, [CollapseChannel(b, float(np.sqrt(rate))) for b in bases])
    return gen, gen.select("h.", "S", "amp")


def nz_model(bases, length: int, dt: float, rng: np.random.Generator, omega0: float = 1.0, decay_rate: float | None = 0.05) -> tuple:
    """(generators, active names) for a memory-kernel model with kernel grid ``dt``."""
    kernel = init_kernel(tuple(bases), length, dt, rng, decay_rate)
    gen = driven_qubit(omega0, kernel=kernel)
    return gen, gen.select("h.", "S", "K")


def kernel_from_lindblad(fit: GeneratorSet, bases, length: int, dt: float) -> GeneratorSet:
    """Memory-kernel model whose lag-0 weights reproduce a fitted Lindblad model."""
    rates = {ch.base: float(value_of(ch.rate)) for ch in fit.channels}
    w = np.zeros((len(bases), length))
    for m, b in enumerate(bases):
        w[m, 0] = rates.get(b, 0.0) / dt
    from .generators import MemoryKernel

    kernel = MemoryKernel(tuple(CollapseChannel(b) for b in bases), w, dt)
    return GeneratorSet(fit.hamiltonian, (), None, kernel)


def _run_rows(L, channel_set, swarm: SwarmResult) -> list:
    return [
        {"L": L, "channel_set": channel_set, "run_seed": r.seed, "final_rmse": r.final_rmse}
        for r in swarm.runs
    ]


def kernel_length_sweep(
    dataset: PopulationDataset,
    lengths: Sequence[int],
    channel_sets: Sequence[str] = ("sm", "sm,sp,sz"),
    n_runs: int = 8,
    seed: int = 0,
    dt: float = 0.05,
    budget: Budget = Budget(),
    hyper: AdamHyper | None = None,
    omega0: float = 1.0,
    method: str = RK4,
    sigma: float = 0.5,
    decay_rate: float | None = 0.05,
    clip: float | None = 10.0,
) -> tuple:
    """Train NZ swarms for every (L, channel set) on one dataset.

    Returns ``(rows, summary)``: one row per run, and per group the best
    RMSE plus the (min, max) spread.
    """
    rows, summary = [], []
    for cs in channel_sets:
        bases = CHANNEL_SETS.get(cs, tuple(cs.split(",")))
        for L in lengths:
            gen, names = nz_model(bases, L, dt, np.random.default_rng([seed, L, len(bases)]), omega0, decay_rate)
            obj = population_objective(gen, names, dataset, NZ, dt, method)
            swarm = swarm_train(obj, n_runs, lognormal_sampler(obj.initial(), sigma), seed, budget, hyper, clip)
            rows.extend(_run_rows(L, cs, swarm))
            rm = [r.final_rmse for r in swarm.runs if not r.diverged]
            summary.append({"L": L, "channel_set": cs, "best_rmse": min(rm), "worst_rmse": max(rm)})
    return rows, summary


def write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
