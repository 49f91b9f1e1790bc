"""Dense operators, superoperators and states for small open quantum systems.

Basis convention: index 0 is the excited state |e>, index 1 the ground state
|g>, so ``sigma_z |e> = +|e>`` and the excited population is ``rho[0, 0]``.

Every function here accepts plain numpy arrays or :class:`~opendyn.dual.Dual`
arrays, and leading batch axes are broadcast (the matrix axes are always the
last two).
"""

from __future__ import annotations

import numpy as np

from .dual import Dual, value_of
from .errors import DimensionError

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    # sigma_+ = |e><g| raises, sigma_- = |g><e| lowers
    "Plus": np.array([[0, 1], [0, 0]], dtype=complex),
    "Minus": np.array([[0, 0], [1, 0]], dtype=complex),
}
_ALIASES = {
    "identity": "I",
    "i": "I",
    "x": "X",
    "sx": "X",
    "y": "Y",
    "sy": "Y",
    "z": "Z",
    "sz": "Z",
    "plus": "Plus",
    "sp": "Plus",
    "+": "Plus",
    "minus": "Minus",
    "sm": "Minus",
    "-": "Minus",
}

EXCITED = np.array([[1, 0], [0, 0]], dtype=complex)
GROUND = np.array([[0, 0], [0, 1]], dtype=complex)


def pauli(which: str) -> np.ndarray:
    """Return a fresh copy of a single-qubit Pauli or ladder operator.

    ``which`` is one of X, Y, Z, Plus, Minus, Identity (case-insensitive;
    short names such as ``sz`` or ``sm`` are accepted too).
    """
    key = which if which in PAULI else _ALIASES.get(str(which).lower())
    if key is None:
        raise KeyError(f"unknown Pauli operator {which!r}")
    return PAULI[key].copy()


def dag(a):
    """Conjugate transpose over the last two axes."""
    return a.conj().swapaxes(-1, -2)


def trace(a):
    return a.trace(0, -2, -1)


def _check_dims(a, b):
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-1] or sa[-2] != sb[-2]:
        raise DimensionError(f"operator shapes {sa} and {sb} are incompatible")


def commutator(a, b):
    return a @ b - b @ a


def dissipator(c, rho):
    """Lindblad dissipator ``c rho c^+ - 1/2 {c^+ c, rho}``."""
    _check_dims(c, rho)
    cd = dag(c)
    cdc = cd @ c
    return c @ rho @ cd - 0.5 * (cdc @ rho + rho @ cdc)


def backaction(c, rho):
    """Measurement backaction ``c rho + rho c^+ - Tr(rho (c + c^+)) rho``."""
    _check_dims(c, rho)
    cd = dag(c)
    crho = c @ rho
    rhocd = rho @ cd
    tr = trace(crho + rhocd).real
    return crho + rhocd - tr[..., None, None] * rho


def expectation(o, rho, atol: float = 1e-10):
    """``Re Tr(O rho)``; the discarded imaginary part must stay below ``atol``."""
    _check_dims(o, rho)
    tr = trace(o @ rho)
    imag = np.max(np.abs(np.imag(value_of(tr)))) if np.size(value_of(tr)) else 0.0
    if imag > atol:
        raise ValueError(f"Tr(O rho) has imaginary part {imag:.3g}; O or rho not Hermitian")
    return tr.real


def excited_population(rho):
    """``<e|rho|e>`` as a real array (or Dual)."""
    return rho[..., 0, 0].real


def tensor(*ops):
    """Kronecker product of plain operators, left factor first."""
    out = np.asarray(ops[0])
    for op in ops[1:]:
        out = np.kron(out, np.asarray(op))
    return out


def partial_trace(rho, keep, dims):
    """Trace out every subsystem except those listed in ``keep``.

    ``dims`` lists the subsystem dimensions, left factor first. ``keep`` may be
    a single index or a sequence of indices. Leading batch axes are kept.
    """
    rho = np.asarray(rho)
    dims = [int(d) for d in dims]
    n = int(np.prod(dims))
    if rho.shape[-2:] != (n, n):
        raise DimensionError(f"dims {dims} do not match a {rho.shape[-2:]} matrix")
    keep = sorted([keep] if np.isscalar(keep) else list(keep))
    if any(k < 0 or k >= len(dims) for k in keep):
        raise DimensionError(f"subsystem index out of range: {keep}")
    batch = rho.shape[:-2]
    nb = len(batch)
    m = len(dims)
    t = rho.reshape(batch + tuple(dims) + tuple(dims))
    # einsum labels: batch, row factors, column factors
    letters = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
    bl = letters[:nb]
    rows = list(letters[nb : nb + m])
    cols = list(letters[nb + m : nb + 2 * m])
    for k in range(m):
        if k not in keep:
            cols[k] = rows[k]
    out = bl + "".join(rows[k] for k in keep) + "".join(cols[k] for k in keep)
    dk = int(np.prod([dims[k] for k in keep]))
    return np.einsum(f"{bl}{''.join(rows)}{''.join(cols)}->{out}", t).reshape(batch + (dk, dk))


def hermitize(rho):
    return 0.5 * (rho + dag(rho))


def normalize(rho):
    """Hermitize and rescale to unit trace."""
    rho = hermitize(rho)
    tr = trace(rho).real
    return rho / tr[..., None, None]


def is_hermitian(a, atol: float = 1e-12) -> bool:
    a = np.asarray(value_of(a))
    return bool(np.max(np.abs(a - dag(a)), initial=0.0) <= atol)


def min_eigenvalue(rho) -> float:
    """Smallest eigenvalue over all matrices in a (batched) density matrix."""
    rho = np.asarray(value_of(rho))
    return float(np.min(np.linalg.eigvalsh(hermitize(rho))))


def check_density_matrix(rho, atol: float = 1e-12, positivity_tolerance: float = 1e-8) -> dict:
    """Diagnostics for the density-matrix invariants.

    Hermiticity and trace are hard requirements; positivity is only reported
    through the ``positive`` flag.
    """
    r = np.asarray(value_of(rho))
    herm = float(np.max(np.abs(r - dag(r)), initial=0.0))
    trace_dev = float(np.max(np.abs(np.trace(r, axis1=-2, axis2=-1) - 1.0), initial=0.0))
    lam = min_eigenvalue(r)
    return {
        "hermitian": herm <= atol,
        "hermiticity_error": herm,
        "unit_trace": trace_dev <= atol,
        "trace_error": trace_dev,
        "min_eigenvalue": lam,
        "positive": lam >= -positivity_tolerance,
    }


def pure_state(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return np.outer(psi, psi.conj())


def purity(rho):
    r = np.asarray(value_of(rho))
    return np.einsum("...ij,...ji->...", r, r).real


# -- Liouville space ------------------------------------------------------------
# vec(rho) is the row-major flattening, so vec(A rho B) = kron(A, B^T) vec(rho).


def vec(rho):
    d = np.shape(value_of(rho))[-1]
    return rho.reshape(np.shape(value_of(rho))[:-2] + (d * d,))


def unvec(x):
    n = np.shape(value_of(x))[-1]
    d = int(round(np.sqrt(n)))
    return x.reshape(np.shape(value_of(x))[:-1] + (d, d))


def kron(a, b):
    """Kronecker product of two square matrices; either may be a Dual."""
    da = np.shape(value_of(a))[-1]
    db = np.shape(value_of(b))[-1]
    if not isinstance(a, Dual):
        a = np.asarray(a)
    if not isinstance(b, Dual):
        b = np.asarray(b)
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(da * db, da * db)


def commutator_superop(h):
    """Superoperator of ``rho -> -i [h, rho]``."""
    d = np.shape(value_of(h))[-1]
    eye = np.eye(d)
    return -1j * (kron(h, eye) - kron(eye, h.swapaxes(-1, -2)))


def dissipator_superop(c):
    d = np.shape(value_of(c))[-1]
    eye = np.eye(d)
    cdc = dag(c) @ c
    return kron(c, c.conj()) - 0.5 * (kron(cdc, eye) + kron(eye, cdc.swapaxes(-1, -2)))


def backaction_superop(c):
    """Linear part ``rho -> c rho + rho c^+`` of the backaction."""
    d = np.shape(value_of(c))[-1]
    eye = np.eye(d)
    return kron(c, eye) + kron(eye, c.conj())


def trace_functional(m):
    """Vector f with ``f . vec(rho) = Tr(m rho)``."""
    return vec(m.swapaxes(-1, -2))
