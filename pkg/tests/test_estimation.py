import numpy as np
import pytest

from opendyn import estimation as est
from opendyn.dual import ParameterVector, finite_difference_gradient
from opendyn.errors import ConfigError, NumericError, SwarmError
from opendyn.generators import CollapseChannel, delta_kernel, qubit_generators, readout_qubit
from opendyn.quantum import pauli
from opendyn.solvers import LINDBLAD, NZ, TimeGrid
from opendyn.spinstar import SpinStarConfig, TrajectoryRecord, emit_population_dataset, emit_sme_dataset


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.fixture(scope="module")
def pop_data():
    cfg = SpinStarConfig.random_couplings(2, 0)
    return emit_population_dataset(cfg, 4, 5, seed=1, t_final=2.0)


@pytest.fixture(scope="module")
def sme_data():
    return emit_sme_dataset({"omega": 1.0, "gamma": 0.5, "eta": 0.4}, TimeGrid.span(1.0, 0.01), 12, seed=5)


def test_cost_spec_validation():
    assert est.CostSpec(est.WEAK).distance == "squared"
    with pytest.raises(ConfigError):
        est.CostSpec("other")
    with pytest.raises(ConfigError):
        est.CostSpec(est.POPULATION, "absolute")


def test_weak_cost_perfect_prediction_is_zero():
    # no drive: Z dephasing never moves the ground population, every bit is 0
    g = qubit_generators(channels=[CollapseChannel("sz", 0.5, True)], eta=0.5)
    grid = TimeGrid.span(1.0, 0.01)
    recs = [TrajectoryRecord(grid, np.random.default_rng(i).normal(size=grid.n_steps), 0, i) for i in range(5)]
    assert est.cost_weak(g, recs) == 0.0


def test_weak_cost_constant_half_predictor():
    # maximally mixed start and a flat record keep p = 1/2
    g = qubit_generators(channels=[CollapseChannel("sz", 0.5, True)], eta=0.5)
    grid = TimeGrid.span(1.0, 0.01)
    recs = [TrajectoryRecord(grid, np.zeros(grid.n_steps), b, i) for i, b in enumerate([0, 1, 1, 0, 1])]
    assert np.isclose(est.cost_weak(g, recs, rho0=np.eye(2) / 2), 0.25, atol=1e-15)


def test_weak_cost_empty_and_type_errors():
    with pytest.raises(ConfigError):
        est.cost_weak(readout_qubit(1, 0.5, 0.4), [])
    with pytest.raises(TypeError):
        est.cost_weak(readout_qubit(1, 0.5, 0.4), [1, 2])


def test_weak_cost_identifies_omega():
    truth = {"omega": 1.0, "gamma": 0.5, "eta": 0.4}
    ds = emit_sme_dataset(truth, TimeGrid.span(4.0, 0.01), 100, seed=21)
    c_true = est.cost_weak(readout_qubit(1.0, 0.5, 0.4), ds)
    c_off = est.cost_weak(readout_qubit(1.5, 0.5, 0.4), ds)
    assert c_true < c_off


def test_weak_cost_reports_failing_record():
    grid = TimeGrid.span(0.1, 0.01)
    rec = np.zeros((grid.n_steps, 3))
    rec[4, 1] = np.inf
    with pytest.raises(NumericError) as info:
        est.cost_weak(readout_qubit(1, 0.5, 0.4), [TrajectoryRecord(grid, rec[:, i], 0, i) for i in range(3)])
    assert info.value.rows == [1]


def test_population_cost_zero_for_exact_model():
    cfg = SpinStarConfig(1, omega0=1.0, couplings=(0.0,))
    ds = emit_population_dataset(cfg, 3, 4, seed=2, t_final=2.0, dt=0.01)
    model = qubit_generators(h=0.5 * pauli("Z"), couplings=("sx", "sy"))
    assert est.cost_population(model, ds, LINDBLAD, dt=0.01) < 1e-25
    # a coarser model grid is still accurate to the integrator tolerance
    assert est.cost_population(model, ds, LINDBLAD, dt=0.05) < 1e-12


def test_delta_kernel_scores_like_lindblad(pop_data):
    lind, _ = est.lindblad_model(("sm", "sz"), rate=0.07)
    nz = est.kernel_from_lindblad(lind, ("sm", "sz"), 3, 0.05)
    a = est.cost_population(lind, pop_data, LINDBLAD)
    b = est.cost_population(nz, pop_data, NZ)
    assert abs(a - b) <= 1e-12


def test_population_cost_invariances(pop_data):
    gen, names = est.lindblad_model(("sm",))
    obj = est.population_objective(gen, names, pop_data, LINDBLAD)
    x = obj.initial().values
    c, g = obj.value_and_grad(x)
    perm = pop_data.subset([2, 0, 3, 1])
    cp, gp = est.population_objective(gen, names, perm, LINDBLAD).value_and_grad(x)
    assert abs(c - cp) <= 1e-12 and np.max(np.abs(g - gp)) <= 1e-12
    dup = pop_data.subset([0, 1, 2, 3, 0, 1, 2, 3])
    assert abs(est.population_objective(gen, names, dup, LINDBLAD).value(x) - c) <= 1e-12
    assert c >= 0


def test_weak_cost_permutation_invariance(sme_data):
    obj = est.weak_objective(readout_qubit(1.2, 0.4, 0.5), est.SME_NAMES, sme_data)
    x = obj.initial().values
    c, g = obj.value_and_grad(x)
    idx = np.random.default_rng(0).permutation(sme_data.S)
    cp, gp = est.weak_objective(readout_qubit(1.2, 0.4, 0.5), est.SME_NAMES, sme_data.subset(idx)).value_and_grad(x)
    assert abs(c - cp) <= 1e-12 and np.max(np.abs(g - gp)) <= 1e-12


@pytest.mark.parametrize("kind", ["weak", "lindblad", "nz"])
def test_gradients_match_finite_differences(kind, pop_data, sme_data):
    rng = np.random.default_rng(7)
    if kind == "weak":
        obj = est.weak_objective(readout_qubit(1.0, 0.5, 0.4), est.SME_NAMES, sme_data)
    elif kind == "lindblad":
        gen, names = est.lindblad_model(("sm", "sz"))
        obj = est.population_objective(gen, names, pop_data, LINDBLAD)
    else:
        gen, names = est.nz_model(("sm", "sp", "sz"), 3, 0.05, rng)
        obj = est.population_objective(gen, names, pop_data, NZ)
    center = obj.initial()
    for _ in range(5):
        pv = center.with_values(center.values * np.exp(0.3 * rng.standard_normal(len(center))))
        _, g = obj.value_and_grad(pv.values)
        fd = finite_difference_gradient(lambda p: obj.value(p.values), pv)
        assert rel_err(g, fd) <= 1e-5


# -- Adam -----------------------------------------------------------------------------


def test_adam_first_step_is_signed_learning_rate():
    st = est.OptimizerState.start(ParameterVector(np.array([1.0, -2.0, 0.5])))
    new = est.adam_step(st, np.array([3.0, -0.01, 250.0]))
    np.testing.assert_allclose(new.theta.values - st.theta.values, [-0.01, 0.01, -0.01], rtol=1e-5)
    assert new.step_count == 1


def test_adam_zero_gradient_only_counts():
    st = est.OptimizerState.start(ParameterVector(np.array([1.0, 2.0])))
    new = est.adam_step(st, np.zeros(2))
    np.testing.assert_array_equal(new.theta.values, st.theta.values)
    np.testing.assert_array_equal(new.first_moment, 0)
    assert new.step_count == 1


def test_adam_scalar_quadratic_converges():
    st = est.OptimizerState.start(ParameterVector(np.array([1.0])))
    for k in range(2000):
        st = est.adam_step(st, 2 * st.theta.values)
        if abs(st.theta.values[0]) < 1e-3:
            break
    assert abs(st.theta.values[0]) < 1e-3 and k < 2000


def test_adam_rejects_bad_gradients():
    st = est.OptimizerState.start(ParameterVector(np.array([1.0])))
    with pytest.raises(NumericError):
        est.adam_step(st, np.array([np.nan]))
    with pytest.raises(ValueError):
        est.adam_step(st, np.zeros(2))


# -- training ---------------------------------------------------------------------------


class Quadratic:
    """Stand-in objective f(x) = |x - 3|^2 sharing the Objective interface."""

    names = ("a", "b")

    def __init__(self, fail_after=None):
        self.calls = 0
        self.fail_after = fail_after

    def initial(self):
        return ParameterVector(np.zeros(2), self.names)

    def _check(self):
        self.calls += 1
        if self.fail_after is not None and self.calls > self.fail_after:
            raise NumericError("boom", op="test")

    def value(self, x):
        self._check()
        return float(np.sum((np.asarray(x) - 3.0) ** 2))

    def value_and_grad(self, x):
        c = self.value(x)
        return c, 2 * (np.asarray(x) - 3.0)


def test_train_converges_on_quadratic_and_logs():
    recs = []
    r = est.train(Quadratic(), budget=est.Budget(3000), hyper=est.AdamHyper(lr=0.05), log=recs.append, log_every=100)
    np.testing.assert_allclose(r.final_theta.values, 3.0, atol=1e-3)
    assert r.converged and not r.diverged
    assert recs[0]["step"] == 0 and recs[-1]["final"] and set(recs[0]["params"]) == {"a", "b"}


def test_train_respects_max_steps():
    r = est.train(Quadratic(), budget=est.Budget(7))
    assert r.steps == 7 and len(r.cost_history) == 7 and not r.converged
    with pytest.raises(ConfigError):
        est.Budget(0)


def test_train_flags_divergence_with_partial_history():
    r = est.train(Quadratic(fail_after=5), budget=est.Budget(100))
    assert r.diverged and r.steps == 5 and "boom" in r.error
    assert np.isnan(r.final_cost)


def test_train_from_truth_barely_moves():
    cfg = SpinStarConfig(1, omega0=1.0, couplings=(0.0,))
    ds = emit_population_dataset(cfg, 3, 4, seed=2, t_final=2.0, dt=0.01)
    model = qubit_generators(h=0.5 * pauli("Z"), couplings=("sx", "sy"))
    names = model.select("h.", "S")
    obj = est.population_objective(model, names, ds, LINDBLAD, dt=0.01)
    r = est.train(obj, budget=est.Budget(200))
    # the plateau window fires after a short Adam wobble of size ~1e-3
    assert r.converged and r.steps <= 100
    init = obj.initial().values
    moved = np.abs(r.final_theta.values - init)
    assert np.all(moved <= 0.01 * np.maximum(np.abs(init), 1.0))


def test_training_descends_monotonically_in_most_windows(pop_data):
    gen, names = est.lindblad_model(("sm",))
    obj = est.population_objective(gen, names, pop_data, LINDBLAD)
    r = est.train(obj, budget=est.Budget(500, tolerance=0.0))
    h = np.array(r.cost_history)
    windows = [(h[i + 49] < h[i]) for i in range(0, len(h) - 49, 50)]
    assert np.mean(windows) >= 0.9


def test_swarm_single_run_equals_train():
    obj = Quadratic()
    sampler = est.lognormal_sampler(ParameterVector(np.ones(2), obj.names))
    res = est.swarm_train(obj, 1, sampler, seed=4, budget=est.Budget(50))
    seed = res.runs[0].seed
    init = sampler(np.random.default_rng(seed))
    r = est.train(obj, init, est.Budget(50), seed=seed)
    np.testing.assert_array_equal(res.best_run.final_theta.values, r.final_theta.values)
    assert res.best_run.cost_history == r.cost_history


def test_swarm_reproducible_and_best_is_minimum():
    sampler = est.lognormal_sampler(ParameterVector(np.ones(2), Quadratic.names))
    a = est.swarm_train(Quadratic(), 4, sampler, seed=9, budget=est.Budget(30))
    b = est.swarm_train(Quadratic(), 4, sampler, seed=9, budget=est.Budget(30))
    assert [r.final_cost for r in a.runs] == [r.final_cost for r in b.runs]
    assert a.runs[a.best].final_cost == min(r.final_cost for r in a.runs)
    assert len({r.seed for r in a.runs}) == 4


def test_swarm_failures_recorded_or_fatal():
    with pytest.raises(SwarmError):
        est.swarm_train(Quadratic(fail_after=0), 3, budget=est.Budget(10))

    class FlakyFirst(Quadratic):
        def value_and_grad(self, x):
            if np.asarray(x)[0] > 0 and self.calls == 0:
                self.calls += 1
                raise NumericError("first run only")
            return super().value_and_grad(x)

    res = est.swarm_train(FlakyFirst(), 2, est.lognormal_sampler(ParameterVector(np.ones(2), Quadratic.names)), budget=est.Budget(10))
    assert res.runs[0].diverged and not res.runs[1].diverged and res.best == 1
    with pytest.raises(ConfigError):
        est.swarm_train(Quadratic(), 0)


def test_kernel_length_sweep_rows(pop_data):
    rows, summary = est.kernel_length_sweep(pop_data, [1, 2], ["sm"], n_runs=2, seed=0, budget=est.Budget(3))
    assert len(rows) == 4 and set(rows[0]) == {"L", "channel_set", "run_seed", "final_rmse"}
    assert [s["L"] for s in summary] == [1, 2]
    for s in summary:
        group = [r["final_rmse"] for r in rows if r["L"] == s["L"]]
        assert s["best_rmse"] == min(group)


def test_sme_params_and_reconstruction_rmse(sme_data):
    g = readout_qubit(1.1, 0.45, 0.35)
    p = est.sme_params(g)
    assert p == pytest.approx({"omega": 1.1, "gamma": 0.45, "eta": 0.35})
    truth = readout_qubit(1.0, 0.5, 0.4)
    assert est.reconstruction_rmse(truth, sme_data) < 1e-12
    assert est.reconstruction_rmse(g, sme_data) > 1e-4


def test_reconstruction_rmse_is_infinite_when_filter_blows_up(sme_data):
    # gamma * eta * dt far beyond the Euler-Maruyama stability range
    assert est.reconstruction_rmse(readout_qubit(1.0, 400.0, 0.9), sme_data) == float("inf")


def test_restart_train_moves_on_after_divergence():
    class FailsFromOrigin(Quadratic):
        def value_and_grad(self, x):
            if np.all(np.asarray(x) == 0):
                raise NumericError("unstable start")
            return super().value_and_grad(x)

    sampler = est.lognormal_sampler(ParameterVector(np.ones(2), Quadratic.names))
    runs = est.restart_train(FailsFromOrigin(), 3, sampler, seed=2, budget=est.Budget(20))
    assert len(runs) == 2 and runs[0].diverged and not runs[1].diverged
    np.testing.assert_array_equal(runs[0].initial_theta.values, 0.0)
    assert est.restart_train(Quadratic(), 3, budget=est.Budget(5))[0].initial_theta.values.tolist() == [0.0, 0.0]
    with pytest.raises(SwarmError):
        est.restart_train(Quadratic(fail_after=0), 2, budget=est.Budget(5))
