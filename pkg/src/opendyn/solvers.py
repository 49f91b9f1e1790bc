"""Fixed-step propagators for Lindblad, stochastic and memory-kernel dynamics.

All steppers work on plain complex arrays or on :class:`~opendyn.dual.Dual`
arrays, and accept a leading batch of independent trajectories
(``rho.shape == (..., d, d)``). Controls are held piecewise constant over a
step, evaluated at the step midpoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dual import Dual, stack, value_of
from .errors import DimensionError, NumericError
from .generators import GeneratorSet, MemoryKernel, channel_operator, hamiltonian_at
from .quantum import (
    backaction_superop,
    commutator_superop,
    dag,
    dissipator,
    dissipator_superop,
    normalize,
    trace_functional,
    unvec,
    vec,
)

EULER = "euler"
RK4 = "rk4"
LINDBLAD = "lindblad"
NZ = "nz"


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")

    @classmethod
    def span(cls, t_final: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        n = int(round((t_final - t0) / dt))
        return cls(t0, dt, n)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def t_final(self) -> float:
        return self.t0 + self.dt * self.n_steps

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; ``t`` must lie on the grid."""
        k = (t - self.t0) / self.dt
        j = int(round(k))
        if abs(k - j) > 1e-9 or not 0 <= j <= self.n_steps:
            raise ValueError(f"time {t} is not on the grid")
        return j


@dataclass(frozen=True)
class WienerPath:
    """Wiener increments, shape (n_steps,) or (n_steps, batch), with their seeds."""

    increments: np.ndarray
    seed: object

    @classmethod
    def sample(cls, seed, n_steps: int, dt: float) -> "WienerPath":
        """Draw ``n_steps`` increments ~ N(0, dt); a list of seeds gives a batch."""
        if np.ndim(seed) == 0:
            rng = np.random.default_rng(int(seed))
            return cls(rng.normal(0.0, np.sqrt(dt), n_steps), int(seed))
        seeds = [int(s) for s in seed]
        inc = np.stack(
            [np.random.default_rng(s).normal(0.0, np.sqrt(dt), n_steps) for s in seeds], axis=1
        )
        return cls(inc, tuple(seeds))

    @property
    def n_steps(self) -> int:
        return self.increments.shape[0]

    def bit_uniforms(self) -> np.ndarray:
        """Uniform variates for the final projective measurement, one per path."""
        seeds = [self.seed] if np.ndim(self.increments) == 1 else list(self.seed)
        u = np.array([np.random.default_rng([s, 1]).random() for s in seeds])
        return u[0] if np.ndim(self.increments) == 1 else u


# -- Liouville-space generators ---------------------------------------------------


def _transpose(a):
    return a.swapaxes(-1, -2)


class Liouvillian:
    """Superoperator form of a generator set, acting on row vectors ``vec(rho)``.

    Holds the control-independent part, one commutator superoperator per
    control, and (in NZ mode) one dissipator per kernel channel. Every piece
    may be a Dual, so sensitivities flow through ``x @ L^T`` products.
    """

    def __init__(self, gen: GeneratorSet, mode: str = LINDBLAD):
        self.d = gen.dim
        self.mode = mode
        hp = gen.hamiltonian
        L = commutator_superop(hp.h)
        self.ctrl_T = None
        if hp.n_controls:
            S = hp.S
            self.ctrl_T = _transpose(stack([commutator_superop(S[k]) for k in range(hp.n_controls)]))
        self.mem_T = None
        self.kernel = None
        if mode == LINDBLAD:
            for c in gen.channel_ops():
                L = L + dissipator_superop(c)
        elif mode == NZ:
            if gen.kernel is None:
                raise ValueError("NZ mode needs a memory kernel")
            self.kernel = gen.kernel
            L = L + _lag0_superop(gen.kernel)
            if gen.kernel.length > 1:
                self.mem_T = _transpose(_kernel_superops(gen.kernel))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        self.L_T = _transpose(L)
        self.monitored = None
        mon = gen.monitored_channel()
        if mon is not None:
            c = gen.channel_ops()[mon]
            self.monitored = (_transpose(backaction_superop(c)), trace_functional(c + dag(c)))
        self.eta = gen.eta

    def rhs(self, x, u=None, past=None):
        """Time derivative of the vectorized states ``x`` (shape (B, d^2))."""
        y = x @ self.L_T
        if self.ctrl_T is not None:
            z = x.reshape((1,) + np.shape(value_of(x))) @ self.ctrl_T
            y = y + (np.asarray(u).T[..., None] * z).sum(axis=0)
        if past is not None:
            y = y + past
        return y

    def memory(self, history: "HistoryBuffer"):
        """Lag >= 1 part of the kernel convolution, or None."""
        if self.mem_T is None or history.count < 2:
            return None
        xs = history.weighted_sum(self.kernel.weights, first_lag=1)
        return (xs @ self.mem_T).sum(axis=0) * self.kernel.dtau


def _kernel_superops(kernel: MemoryKernel):
    return stack([dissipator_superop(channel_operator(ch)) for ch in kernel.channels])


def _lag0_superop(kernel: MemoryKernel):
    L = 0.0
    for m, ch in enumerate(kernel.channels):
        L = L + (kernel.weights[m, 0] * kernel.dtau) * dissipator_superop(channel_operator(ch))
    return L


def _channel_superop(channels):
    L = 0.0
    for c in channels:
        L = L + dissipator_superop(c)
    return L


def _normalize_vec(x, d):
    perm = np.arange(d * d).reshape(d, d).T.reshape(-1)
    diag = np.arange(d) * (d + 1)
    x = 0.5 * (x + x[..., perm].conj())
    tr = x[..., diag].sum(axis=-1).real
    return x / tr[..., None]


def _check_finite(x, step):
    v = value_of(x)
    if np.all(np.isfinite(v)) and not (isinstance(x, Dual) and not np.all(np.isfinite(x.jac))):
        return
    bad = ~np.isfinite(v)
    if isinstance(x, Dual):
        bad = bad | ~np.isfinite(x.jac).all(axis=0)
    rows = np.flatnonzero(bad.reshape(-1, v.shape[-1]).any(axis=-1)).tolist() if v.ndim > 1 else []
    raise NumericError(f"non-finite state at step {step} in rows {rows}", op="step", step=step, rows=rows)


def _advance(f, x, dt, method):
    if method == EULER:
        return x + dt * f(x)
    if method == RK4:
        k1 = f(x)
        k2 = f(x + (0.5 * dt) * k1)
        k3 = f(x + (0.5 * dt) * k2)
        k4 = f(x + dt * k3)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    raise ValueError(f"unknown method {method!r}")


def _as_rows(rho):
    """vec(rho) with at least one batch axis, plus the original batch shape."""
    shape = np.shape(value_of(rho))
    x = vec(rho if isinstance(rho, Dual) else np.asarray(rho, dtype=complex))
    if len(shape) == 2:
        x = x.reshape((1,) + np.shape(value_of(x)))
    return x, shape[:-2]


def _from_rows(x, batch):
    d2 = np.shape(value_of(x))[-1]
    return unvec(x.reshape(batch + (d2,)))


def lindblad_rhs(rho, H, channels):
    """``-i[H, rho] + sum_m D(c_m, rho)`` in matrix form."""
    out = -1j * (H @ rho - rho @ H)
    for c in channels:
        out = out + dissipator(c, rho)
    return out


def lindblad_step(rho, H, channels, dt: float, method: str = EULER, renormalize: bool = True, step=None):
    """Advance ``d rho/dt = -i[H, rho] + sum_m D(c_m, rho)`` by one step."""
    d = np.shape(value_of(rho))[-1]
    if np.shape(value_of(H))[-1] != d or any(np.shape(value_of(c))[-1] != d for c in channels):
        raise DimensionError("operator and state dimensions differ")
    x, batch = _as_rows(rho)
    L_T = _transpose(commutator_superop(H) + _channel_superop(channels)) if np.ndim(value_of(H)) == 2 else None
    if L_T is None:
        # per-trajectory Hamiltonians: fall back to the matrix form
        new = _advance(lambda r: lindblad_rhs(r, H, channels), rho, dt, method)
        if renormalize:
            new = normalize(new)
        _check_finite(new, step)
        return new
    new = _advance(lambda v: v @ L_T, x, dt, method)
    if renormalize:
        new = _normalize_vec(new, d)
    _check_finite(new, step)
    return _from_rows(new, batch)


class HistoryBuffer:
    """Ring buffer of the last ``capacity`` states; lag 0 is the newest."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.count = 0
        self._pos = -1
        self._vals = None
        self._jacs = None

    def push(self, rho) -> None:
        v = np.asarray(value_of(rho))
        if self._vals is None:
            self._vals = np.zeros((self.capacity,) + v.shape, dtype=complex)
        if isinstance(rho, Dual) and self._jacs is None:
            # lag-major so contractions over the ring need no transposed copy
            self._jacs = np.zeros((self.capacity, rho.nparams) + v.shape, dtype=complex)
        self._pos = (self._pos + 1) % self.capacity
        self._vals[self._pos] = v
        if self._jacs is not None:
            self._jacs[self._pos] = rho.jac if isinstance(rho, Dual) else 0.0
        self.count = min(self.count + 1, self.capacity)

    def __len__(self):
        return self.count

    def lag(self, j: int):
        if not 0 <= j < self.count:
            raise IndexError(f"lag {j} not available (have {self.count})")
        slot = (self._pos - j) % self.capacity
        if self._jacs is None:
            return self._vals[slot].copy()
        return Dual(self._vals[slot].copy(), self._jacs[slot].copy())

    def weighted_sum(self, weights, first_lag: int = 0):
        """``sum_j weights[:, j] * state(lag j)`` for lags ``first_lag <= j < count``.

        ``weights`` has shape (M, L); returns shape (M,) + state shape. Lags
        beyond the stored history contribute nothing.
        """
        wv = np.asarray(value_of(weights))
        wj = weights.jac if isinstance(weights, Dual) else None
        m, length = wv.shape
        n = min(self.count, length)
        lags = np.arange(first_lag, n)
        slots = (self._pos - lags) % self.capacity
        # scatter lag weights onto ring slots so the stored states are not copied
        ring_v = np.zeros((m, self.capacity))
        ring_v[:, slots] = wv[:, lags]
        val = np.tensordot(ring_v, self._vals, axes=([1], [0]))
        if wj is None and self._jacs is None:
            return val
        p = wj.shape[0] if wj is not None else self._jacs.shape[1]
        jac = np.zeros((p,) + val.shape, dtype=complex)
        if self._jacs is not None:
            jac += np.moveaxis(np.tensordot(ring_v, self._jacs, axes=([1], [0])), 0, 1)
        if wj is not None:
            ring_j = np.zeros((p, m, self.capacity))
            ring_j[:, :, slots] = wj[:, :, lags]
            jac += np.tensordot(ring_j, self._vals, axes=([2], [0]))
        return Dual(val, jac)


def nz_step(
    rho,
    history: HistoryBuffer,
    H,
    kernel: MemoryKernel,
    dt: float,
    method: str = EULER,
    renormalize: bool = True,
    step=None,
):
    """One step of ``d rho/dt = -i[H, rho] + sum_m sum_j K_m[j] D(c_m, rho(t - j dtau)) dtau``.

    ``history`` must already hold ``rho`` at lag 0 (matrix form); the new
    state is pushed onto it. With ``method="rk4"`` the lag >= 1 part of the
    convolution is frozen over the step while the instantaneous part is
    integrated with RK4.
    """
    if len(history) < 1:
        raise ValueError("history must contain the current state")
    d = np.shape(value_of(rho))[-1]
    x, batch = _as_rows(rho)
    L_T = _transpose(commutator_superop(H) + _lag0_superop(kernel))
    past = None
    if history.count > 1 and kernel.length > 1:
        # D is linear in rho, so convolve the states first
        xs = vec(history.weighted_sum(kernel.weights, first_lag=1))
        if not batch:
            xs = xs.reshape((np.shape(value_of(xs))[0], 1, d * d))
        past = (xs @ _transpose(_kernel_superops(kernel))).sum(axis=0) * kernel.dtau
    f = (lambda v: v @ L_T) if past is None else (lambda v: v @ L_T + past)
    new = _advance(f, x, dt, method)
    if renormalize:
        new = _normalize_vec(new, d)
    _check_finite(new, step)
    new = _from_rows(new, batch)
    history.push(new)
    return new


# -- full trajectories ------------------------------------------------------------


def controls_on_grid(controls, grid: TimeGrid, n_controls: int) -> np.ndarray:
    """Tabulate controls at step midpoints: shape (n_steps, ..., K).

    ``controls`` may be None (all zero), an array already of shape
    (n_steps, ..., K), an object with ``value(t)``, or a sequence of such
    objects (one per batched trajectory).
    """
    mids = grid.t0 + grid.dt * (np.arange(grid.n_steps) + 0.5)
    if controls is None:
        return np.zeros((grid.n_steps, n_controls))
    if hasattr(controls, "value"):
        return np.array([controls.value(t) for t in mids], dtype=float).reshape(grid.n_steps, n_controls)
    if isinstance(controls, (list, tuple)) and controls and hasattr(controls[0], "value"):
        return np.array([[s.value(t) for s in controls] for t in mids], dtype=float)
    table = np.asarray(controls, dtype=float)
    if table.shape[0] != grid.n_steps or table.shape[-1] != n_controls:
        raise DimensionError(
            f"control table shape {table.shape} does not fit {grid.n_steps} steps x {n_controls} controls"
        )
    return table


def _row_controls(ctab, nrow):
    n, k = ctab.shape[0], ctab.shape[-1]
    if k == 0:
        return np.zeros((n, nrow, 0))
    return np.broadcast_to(ctab.reshape(n, -1, k), (n, nrow, k))


def _initial_rows(rho0, batch_shape):
    rho = np.asarray(rho0, dtype=complex)
    if rho.ndim == 2 and batch_shape:
        rho = np.broadcast_to(rho, tuple(batch_shape) + rho.shape)
    return _as_rows(rho)


def propagate(
    gen: GeneratorSet,
    grid: TimeGrid,
    rho0,
    controls=None,
    mode: str = LINDBLAD,
    method: str = EULER,
    observe: Sequence[int] | None = None,
    renormalize: bool = True,
):
    """Integrate the model and return the states at grid indices ``observe``.

    ``observe`` defaults to every grid point (including the initial state).
    The result stacks states along a new leading axis; each state has the
    batch shape of the controls (or of ``rho0``).
    """
    if mode == NZ and gen.kernel is not None and not np.isclose(gen.kernel.dtau, grid.dt, rtol=1e-12, atol=0):
        raise ValueError(f"kernel spacing {gen.kernel.dtau} differs from the grid step {grid.dt}")
    ctab = controls_on_grid(controls, grid, gen.hamiltonian.n_controls)
    lv = Liouvillian(gen, mode)
    d = lv.d
    batch_shape = ctab.shape[1:-1] or np.shape(rho0)[:-2]
    x, batch = _initial_rows(rho0, batch_shape)
    nrow = np.shape(value_of(x))[0]
    ctab = _row_controls(ctab, nrow)
    observe = list(range(grid.n_steps + 1)) if observe is None else list(observe)
    wanted = set(observe)
    kept = {0: x} if 0 in wanted else {}
    history = None
    if mode == NZ:
        history = HistoryBuffer(gen.kernel.length)
        history.push(x)
    last = max(wanted) if wanted else grid.n_steps
    for n in range(last):
        u = ctab[n]
        past = lv.memory(history) if history is not None else None
        x = _advance(lambda v: lv.rhs(v, u, past), x, grid.dt, method)
        if renormalize:
            x = _normalize_vec(x, d)
        _check_finite(x, n)
        if history is not None:
            history.push(x)
        if n + 1 in wanted:
            kept[n + 1] = x
    return _from_rows(stack([kept[i] for i in observe]), (len(observe),) + tuple(batch))


# -- stochastic master equation ---------------------------------------------------


def _sme_setup(gen, grid, rho0, controls, batch_shape):
    lv = Liouvillian(gen, LINDBLAD)
    if lv.monitored is None:
        raise ValueError("the generator set has no monitored channel")
    ctab = controls_on_grid(controls, grid, gen.hamiltonian.n_controls)
    x, batch = _initial_rows(rho0, batch_shape)
    nrow = np.shape(value_of(x))[0]
    ctab = _row_controls(ctab, nrow)
    eta = lv.eta
    seta = eta ** 0.5 if isinstance(eta, Dual) else np.sqrt(eta)
    return lv, ctab, x, batch, eta, seta


def sme_simulate(gen: GeneratorSet, grid: TimeGrid, noise: WienerPath, rho0, controls=None, renormalize: bool = True):
    """Euler-Maruyama (Ito) integration of the monitored master equation.

    Returns ``(states, record, final_bit)``: states at every grid point, the
    record ``V_j = sqrt(eta) Tr(rho_j (c + c^+)) + dW_j / dt`` and a bit drawn
    from the final excited-state Born probability (1 = excited).
    """
    if noise.n_steps != grid.n_steps:
        raise DimensionError("noise length does not match the grid")
    dW = np.asarray(noise.increments, dtype=float)
    lv, ctab, x, batch, eta, seta = _sme_setup(gen, grid, rho0, controls, dW.shape[1:])
    B_T, sig = lv.monitored
    d = lv.d
    dW2 = dW.reshape(grid.n_steps, -1)
    dt = grid.dt
    states = [x]
    record = []
    for n in range(grid.n_steps):
        s = (x * sig).sum(axis=-1).real
        record.append(seta * s + dW2[n] / dt)
        ba = x @ B_T - s[..., None] * x
        x = x + dt * lv.rhs(x, ctab[n]) + seta * ba * dW2[n][:, None]
        if renormalize:
            x = _normalize_vec(x, d)
        _check_finite(x, n)
        states.append(x)
    p = np.clip(np.asarray(value_of(x))[:, 0].real, 0.0, 1.0)
    bit = (np.atleast_1d(noise.bit_uniforms()) < p).astype(int)
    states = _from_rows(stack(states), (grid.n_steps + 1,) + tuple(batch))
    record = stack(record).reshape((grid.n_steps,) + tuple(batch))
    return states, record, bit.reshape(tuple(batch)) if batch else int(bit[0])


def sme_reconstruct(
    gen: GeneratorSet,
    grid: TimeGrid,
    record,
    rho0,
    controls=None,
    renormalize: bool = True,
    keep: str = "all",
):
    """Filter a measurement record through the model.

    Integrates ``d rho = (-i[H,rho] + D(c,rho) - 2 eta H(c,rho) Re Tr(rho c)) dt
    + sqrt(eta) H(c,rho) dV`` with ``dV = V dt``. The result is deterministic
    given the record and generators, so Dual generators yield sensitivities.
    ``keep`` is ``"all"`` (every state), ``"population"`` (excited
    populations only) or ``"final"``.
    """
    record = np.asarray(record, dtype=float)
    if record.shape[0] != grid.n_steps:
        raise DimensionError("record length does not match the grid")
    lv, ctab, x, batch, eta, seta = _sme_setup(gen, grid, rho0, controls, record.shape[1:])
    B_T, sig = lv.monitored
    d = lv.d
    rec2 = record.reshape(grid.n_steps, -1)
    dt = grid.dt
    out = []

    def keep_state(v):
        if keep == "all":
            out.append(v)
        elif keep == "population":
            out.append(v[:, 0].real)

    keep_state(x)
    for n in range(grid.n_steps):
        s = (x * sig).sum(axis=-1).real  # 2 Re Tr(rho c)
        ba = x @ B_T - s[..., None] * x
        drift = lv.rhs(x, ctab[n]) - (eta * ba) * s[..., None]
        x = x + dt * drift + seta * ba * (rec2[n] * dt)[:, None]
        if renormalize:
            x = _normalize_vec(x, d)
        _check_finite(x, n)
        keep_state(x)
    if keep == "final":
        return _from_rows(x, tuple(batch))
    if keep == "population":
        return stack(out).reshape((grid.n_steps + 1,) + tuple(batch))
    return _from_rows(stack(out), (grid.n_steps + 1,) + tuple(batch))


# -- trajectory dumps ---------------------------------------------------------------


def trajectory_rows(times, states) -> list:
    states = np.asarray(value_of(states))
    d = states.shape[-1]
    header = ["t"]
    for i in range(d):
        for j in range(d):
            header += [f"rho_re_{i}{j}", f"rho_im_{i}{j}"]
    header.append("population")
    rows = [header]
    for t, r in zip(times, states):
        row = [repr(float(t))]
        for z in r.reshape(-1):
            row += [repr(float(z.real)), repr(float(z.imag))]
        row.append(repr(float(r[0, 0].real)))
        rows.append(row)
    return rows


def write_trajectory_csv(path, times, states) -> None:
    """Write one trajectory: ``t, rho_re_00, rho_im_00, ..., population``."""
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(trajectory_rows(times, states))


def read_trajectory_csv(path):
    """Inverse of :func:`write_trajectory_csv`; returns (times, states)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array(body, dtype=float)
    n_ent = (len(header) - 2) // 2
    d = int(round(np.sqrt(n_ent)))
    z = data[:, 1:-1:2] + 1j * data[:, 2:-1:2]
    return data[:, 0], z.reshape(-1, d, d)
