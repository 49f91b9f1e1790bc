"""Forward-mode sensitivities for numpy arrays.

A :class:`Dual` carries a value array together with its partial derivatives
with respect to an active parameter vector. Arithmetic follows the chain rule,
so any numpy-style pipeline written with ``+ - * / @``, ``conj`` and the
elementwise functions below can be differentiated by feeding it lifted
parameters. Complex values carry complex partials, i.e. the real and imaginary
parts of each entry are differentiated jointly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

__all__ = [
    "Dual",
    "DiffScalar",
    "ParameterVector",
    "lift",
    "constant",
    "value_of",
    "exp",
    "sqrt",
    "logistic",
    "abs2",
    "stack",
    "finite_difference_gradient",
]


def _pad(jac, ndim):
    """Insert singleton axes after the parameter axis so jac has ``1 + ndim`` axes."""
    extra = ndim - (jac.ndim - 1)
    if extra <= 0:
        return jac
    return jac.reshape((jac.shape[0],) + (1,) * extra + jac.shape[1:])


def _split(x):
    if isinstance(x, Dual):
        return x.val, x.jac
    return np.asarray(x), None


def _check_params(aj, bj):
    if aj is not None and bj is not None and aj.shape[0] != bj.shape[0]:
        raise DimensionError(
            f"parameter count mismatch: {aj.shape[0]} vs {bj.shape[0]}"
        )


def _full(jac, shape):
    return np.broadcast_to(jac, (jac.shape[0],) + shape)


def _jac_matmul(aj, b, shape):
    """Partials of ``a @ b`` from ``a``'s partials, for a constant ``b``."""
    if b.ndim == 2 and aj.shape[1:] == shape[:-1] + (b.shape[0],):
        # one GEMM over every parameter and batch row
        return (aj.reshape(-1, b.shape[0]) @ b).reshape((aj.shape[0],) + shape)
    return _pad(aj, len(shape)) @ b


def _matmul_jac(a, bj, shape):
    """Partials of ``a @ b`` from ``b``'s partials, for a constant ``a``."""
    if a.ndim == 2 and bj.ndim == 3:
        p, k, n = bj.shape
        out = a @ bj.transpose(1, 0, 2).reshape(k, p * n)
        return out.reshape(a.shape[0], p, n).transpose(1, 0, 2)
    return a @ _pad(bj, len(shape))


class Dual:
    """A value array with partials ``jac`` of shape ``(P,) + val.shape``."""

    __array_ufunc__ = None  # make numpy defer to our reflected operators
    __slots__ = ("val", "jac")

    def __init__(self, val, jac):
        val = np.asarray(val)
        jac = np.asarray(jac)
        if jac.shape[1:] != val.shape:
            raise DimensionError(
                f"partials shape {jac.shape} does not match value shape {val.shape}"
            )
        self.val = val
        self.jac = jac

    # -- scalar-style accessors ---------------------------------------------
    @property
    def value(self):
        return self.val

    @property
    def partials(self):
        return self.jac

    @property
    def nparams(self) -> int:
        return self.jac.shape[0]

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self) -> int:
        return self.val.ndim

    def __len__(self):
        return len(self.val)

    def __repr__(self):
        return f"Dual(val={self.val!r}, nparams={self.nparams})"

    # -- arithmetic ------------------------------------------------------------
    def __add__(self, other):
        bv, bj = _split(other)
        _check_params(self.jac, bj)
        val = self.val + bv
        if bj is None:
            return Dual(val, _full(_pad(self.jac, val.ndim), val.shape))
        jac = _pad(self.jac, val.ndim) + _pad(bj, val.ndim)
        return Dual(val, _full(jac, val.shape))

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.jac)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        bv, bj = _split(other)
        _check_params(self.jac, bj)
        val = self.val * bv
        jac = _pad(self.jac, val.ndim) * bv
        if bj is not None:
            jac = jac + self.val * _pad(bj, val.ndim)
        return Dual(val, _full(jac, val.shape))

    __rmul__ = __mul__

    def __truediv__(self, other):
        bv, bj = _split(other)
        _check_params(self.jac, bj)
        if np.any(bv == 0):
            raise NumericError("division by zero", op="div")
        val = self.val / bv
        jac = _pad(self.jac, val.ndim) / bv
        if bj is not None:
            jac = jac - _pad(bj, val.ndim) * (val / bv)
        return Dual(val, _full(jac, val.shape))

    def __rtruediv__(self, other):
        if np.any(self.val == 0):
            raise NumericError("division by zero", op="div")
        val = np.asarray(other) / self.val
        jac = -_pad(self.jac, val.ndim) * (val / self.val)
        return Dual(val, _full(jac, val.shape))

    def __pow__(self, n):
        if isinstance(n, Dual):
            raise TypeError("Dual exponents are not supported")
        val = self.val**n
        return Dual(val, self.jac * (n * self.val ** (n - 1)))

    def __matmul__(self, other):
        bv, bj = _split(other)
        _check_params(self.jac, bj)
        if self.val.ndim < 2 or bv.ndim < 2:
            raise DimensionError("matmul needs operands with at least 2 axes")
        val = self.val @ bv
        jac = _jac_matmul(self.jac, bv, val.shape)
        if bj is not None:
            jac = jac + _matmul_jac(self.val, bj, val.shape)
        return Dual(val, _full(jac, val.shape))

    def __rmatmul__(self, other):
        av = np.asarray(other)
        if av.ndim < 2 or self.val.ndim < 2:
            raise DimensionError("matmul needs operands with at least 2 axes")
        val = av @ self.val
        return Dual(val, _full(_matmul_jac(av, self.jac, val.shape), val.shape))

    # -- structural ------------------------------------------------------------
    def conj(self):
        return Dual(self.val.conj(), self.jac.conj())

    conjugate = conj

    @property
    def real(self):
        return Dual(self.val.real, self.jac.real)

    @property
    def imag(self):
        return Dual(self.val.imag, self.jac.imag)

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.val[idx], self.jac[(slice(None),) + idx])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        val = self.val.reshape(shape)
        return Dual(val, self.jac.reshape((self.nparams,) + val.shape))

    def _jac_axis(self, axis):
        return axis + 1 if axis >= 0 else axis

    def swapaxes(self, a1, a2):
        return Dual(
            self.val.swapaxes(a1, a2),
            self.jac.swapaxes(self._jac_axis(a1), self._jac_axis(a2)),
        )

    def sum(self, axis=None):
        if axis is None:
            axis = tuple(range(self.ndim))
        if isinstance(axis, int):
            axis = (axis,)
        jaxes = tuple(self._jac_axis(a) for a in axis)
        return Dual(self.val.sum(axis=axis), self.jac.sum(axis=jaxes))

    def mean(self, axis=None):
        n = self.val.size if axis is None else np.prod(
            [self.val.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis) * (1.0 / n)

    def trace(self, offset=0, axis1=-2, axis2=-1):
        return Dual(
            self.val.trace(offset, axis1, axis2),
            self.jac.trace(offset, self._jac_axis(axis1), self._jac_axis(axis2)),
        )

    def copy(self):
        return Dual(self.val.copy(), np.array(self.jac))

    def isfinite(self) -> bool:
        return bool(np.all(np.isfinite(self.val)) and np.all(np.isfinite(self.jac)))


DiffScalar = Dual


def constant(val, nparams: int) -> Dual:
    """Wrap ``val`` as a Dual with all-zero partials."""
    val = np.asarray(val)
    return Dual(val, np.zeros((nparams,) + val.shape, dtype=val.dtype))


def value_of(x):
    """Plain value of a Dual, or ``x`` itself."""
    return x.val if isinstance(x, Dual) else x


def exp(x):
    if not isinstance(x, Dual):
        return np.exp(x)
    e = np.exp(x.val)
    return Dual(e, x.jac * e)


def sqrt(x):
    if not isinstance(x, Dual):
        return np.sqrt(x)
    if np.any(x.val == 0):
        raise NumericError("derivative of sqrt at zero", op="sqrt")
    s = np.sqrt(x.val)
    return Dual(s, x.jac / (2.0 * s))


def logistic(x):
    """The sigmoid ``1 / (1 + exp(-x))``."""
    if not isinstance(x, Dual):
        return 1.0 / (1.0 + np.exp(-np.asarray(x)))
    s = 1.0 / (1.0 + np.exp(-x.val))
    return Dual(s, x.jac * (s * (1.0 - s)))


def abs2(x):
    """Squared modulus ``|x|^2``, real-valued."""
    if not isinstance(x, Dual):
        x = np.asarray(x)
        return x.real**2 + x.imag**2
    val = x.val.real**2 + x.val.imag**2
    return Dual(val, 2.0 * (x.val.conj() * x.jac).real)


def stack(items: Sequence, axis: int = 0):
    """``np.stack`` that keeps partials when any item is a Dual."""
    duals = [x for x in items if isinstance(x, Dual)]
    if not duals:
        return np.stack(items, axis=axis)
    p = duals[0].nparams
    parts = [x if isinstance(x, Dual) else constant(x, p) for x in items]
    val = np.stack([x.val for x in parts], axis=axis)
    jaxis = axis + 1 if axis >= 0 else axis
    return Dual(val, np.stack([x.jac for x in parts], axis=jaxis))


@dataclass(frozen=True)
class ParameterVector:
    """Named real parameters; the active set gradient descent updates."""

    values: np.ndarray
    names: tuple = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", values)
        names = tuple(self.names) or tuple(f"p{k}" for k in range(values.size))
        object.__setattr__(self, "names", names)
        if values.size < 1:
            raise DimensionError("a parameter vector needs at least one entry")
        if len(names) != values.size:
            raise DimensionError("names and values differ in length")
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")

    def __len__(self):
        return self.values.size

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=float), self.names)

    def as_dict(self) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.values)}


def lift(theta: ParameterVector) -> Dual:
    """Seed forward sensitivities: element k gets the unit partial vector e_k."""
    values = np.asarray(theta.values, dtype=float)
    return Dual(values.copy(), np.eye(values.size))


def finite_difference_gradient(
    f: Callable[[ParameterVector], float],
    theta: ParameterVector,
    h: float | None = None,
    rel: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of a scalar function of ``theta``.

    With ``h=None`` the step for component k is ``rel * max(1, |theta_k|)``.
    """
    if h is not None and h <= 0:
        raise ValueError("h must be positive")
    base = np.asarray(theta.values, dtype=float)
    grad = np.zeros(base.size)
    for k in range(base.size):
        hk = h if h is not None else rel * max(1.0, abs(base[k]))
        up = base.copy()
        down = base.copy()
        up[k] += hk
        down[k] -= hk
        grad[k] = (float(f(theta.with_values(up))) - float(f(theta.with_values(down)))) / (
            2.0 * hk
        )
    return grad
