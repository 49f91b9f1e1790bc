import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opendyn.dual import Dual, ParameterVector, lift
from opendyn.errors import ConfigError, DimensionError
from opendyn.generators import (
    CollapseChannel,
    GeneratorSet,
    HamiltonianParam,
    MemoryKernel,
    channel_operator,
    delta_kernel,
    hamiltonian_at,
    init_kernel,
    kernel_value,
    qubit_generators,
    readout_qubit,
)
from opendyn.quantum import pauli

from conftest import random_hermitian


def test_bare_qubit_hamiltonian():
    g = qubit_generators(h=0.5 * pauli("Z"), couplings=("sx", "sy"))
    np.testing.assert_allclose(hamiltonian_at(g.hamiltonian, [0.0, 0.0]), 0.5 * pauli("Z"))
    np.testing.assert_allclose(
        hamiltonian_at(g.hamiltonian, [0.3, -0.2]), 0.5 * pauli("Z") + 0.3 * pauli("X") - 0.2 * pauli("Y")
    )


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hamiltonian_at_is_hermitian(seed):
    rng = np.random.default_rng(seed)
    p = HamiltonianParam(random_hermitian(rng), np.stack([random_hermitian(rng) for _ in range(3)]))
    H = hamiltonian_at(p, rng.normal(size=(4, 3)))
    assert H.shape == (4, 2, 2)
    assert np.max(np.abs(H - H.conj().swapaxes(-1, -2))) <= 1e-12


def test_hamiltonian_control_count_checked():
    g = qubit_generators(couplings=("sx",))
    with pytest.raises(DimensionError):
        hamiltonian_at(g.hamiltonian, [1.0, 2.0])


def test_channel_rate_and_operator():
    ch = CollapseChannel("sz", 0.5)
    assert ch.rate == 0.25
    np.testing.assert_allclose(channel_operator(ch), 0.5 * pauli("Z"))
    with pytest.raises(ConfigError):
        channel_operator(CollapseChannel("foo"))


def test_readout_qubit_parameters():
    g = readout_qubit(1.2, 0.5, 0.4)
    v = g.parameter_vector(["h.re01", "amp0.sz", "eta_raw"]).values
    assert np.isclose(v[0], 1.2)
    assert np.isclose(v[1] ** 2, 0.5)
    assert np.isclose(1 / (1 + np.exp(-v[2])), 0.4)
    assert np.isclose(g.eta, 0.4)
    assert g.monitored_channel() == 0


def test_eta_must_be_open_interval():
    with pytest.raises(ValueError):
        qubit_generators(eta=1.0)


def test_realize_roundtrip_and_partials(rng):
    g = qubit_generators(h=random_hermitian(rng), couplings=("sx",), channels=[CollapseChannel("sm", 0.3)])
    names = g.parameter_names()
    pv = g.parameter_vector(names)
    back = g.with_values(pv)
    np.testing.assert_allclose(back.hamiltonian.h, g.hamiltonian.h)
    assert back.parameter_vector(names).as_dict() == pytest.approx(pv.as_dict())
    d = g.realize(lift(pv), names)
    assert isinstance(d.hamiltonian.h, Dual)
    # d h / d h.re01 is the X matrix
    k = names.index("h.re01")
    np.testing.assert_allclose(d.hamiltonian.h.jac[k], pauli("X"))
    k = names.index("amp0.sm")
    assert np.isclose(d.channels[0].rate.jac[k], 2 * 0.3)


def test_realize_rejects_unknown_and_length_mismatch():
    g = qubit_generators()
    with pytest.raises(KeyError):
        g.realize(np.array([1.0]), ["nope"])
    with pytest.raises(DimensionError):
        g.realize(np.array([1.0, 2.0]), ["h.00"])


def test_kernel_validation_and_lookup():
    k = delta_kernel([CollapseChannel("sm")], 0.1, length=3, rates=[0.2])
    assert k.length == 3
    assert np.isclose(kernel_value(k, 0, 0), 2.0)
    assert kernel_value(k, 0, 2) == 0.0
    with pytest.raises(IndexError):
        kernel_value(k, 0, 3)
    with pytest.raises(DimensionError):
        MemoryKernel((CollapseChannel("sm"),), np.zeros((2, 3)), 0.1)
    with pytest.raises(ValueError):
        MemoryKernel((CollapseChannel("sm"),), np.zeros((1, 3)), 0.0)


def test_init_kernel_range_and_decay_spike():
    rng = np.random.default_rng(0)
    dtau, L = 0.05, 16
    k = init_kernel(("sm", "sp", "sz"), L, dtau, rng, decay_rate=0.05)
    w = k.weights
    assert w.shape == (3, L)
    assert np.isclose(w[0, 0], 0.05 / dtau)
    rest = np.delete(w.reshape(-1), 0)
    assert rest.min() >= 0 and rest.max() <= 0.1 / (dtau * L)


def test_json_roundtrip_with_kernel():
    k = init_kernel(("sm", "sz"), 4, 0.05, np.random.default_rng(1))
    g = qubit_generators(h=0.5 * pauli("Z"), couplings=("sx", "sy"), channels=[CollapseChannel("sz", 0.7, True)], eta=0.3, kernel=k)
    back = GeneratorSet.from_json(g.to_json())
    assert back.parameter_vector(g.parameter_names()).as_dict() == pytest.approx(
        g.parameter_vector(g.parameter_names()).as_dict(), abs=1e-15
    )
    assert back.channels[0].monitored


def test_from_dict_rejects_unknown_keys_and_versions():
    doc = qubit_generators().to_dict()
    with pytest.raises(ConfigError):
        GeneratorSet.from_dict({**doc, "extra": 1})
    with pytest.raises(ConfigError):
        GeneratorSet.from_dict({**doc, "format_version": 99})
