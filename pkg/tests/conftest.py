import numpy as np
import pytest


def random_density(rng, d=2):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = a @ a.conj().T
    return rho / np.trace(rho)


def random_hermitian(rng, d=2, scale=1.0):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * 0.5 * (a + a.conj().T)


def random_operator(rng, d=2, scale=1.0):
    return scale * (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)))


def lindblad_generator_colstack(H, channels):
    """Independent oracle: Liouvillian in column-stacking convention.

    vec_c(A X B) = (B^T kron A) vec_c(X); used with scipy's expm to obtain
    exact reference evolutions without touching the package's superoperators.
    """
    d = H.shape[0]
    eye = np.eye(d)
    L = -1j * (np.kron(eye, H) - np.kron(H.T, eye))
    for c in channels:
        cdc = c.conj().T @ c
        L = L + np.kron(c.conj(), c) - 0.5 * (np.kron(eye, cdc) + np.kron(cdc.T, eye))
    return L


def evolve_exact(rho0, H, channels, t):
    from scipy.linalg import expm

    L = lindblad_generator_colstack(H, channels)
    v = rho0.reshape(-1, order="F")
    return (expm(L * t) @ v).reshape(rho0.shape, order="F")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
