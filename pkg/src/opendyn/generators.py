"""Parameterized generators of qubit dynamics.

A :class:`GeneratorSet` bundles an affine control Hamiltonian
``H(c) = h + sum_k S_k c_k``, collapse channels with learnable amplitudes,
a measurement efficiency and an optional discretized memory kernel. Every
real number gradient descent may touch has a stable name (see
:meth:`GeneratorSet.parameter_names`); :meth:`GeneratorSet.realize` swaps a
chosen subset for lifted :class:`~opendyn.dual.Dual` parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dual import Dual, ParameterVector, logistic, stack, value_of
from .errors import ConfigError, DimensionError
from .quantum import pauli

FORMAT_VERSION = 1

BASE_NAMES = ("sx", "sy", "sz", "sp", "sm")
_BASE_TO_PAULI = {"sx": "X", "sy": "Y", "sz": "Z", "sp": "Plus", "sm": "Minus"}


def base_operator(name: str) -> np.ndarray:
    if name not in _BASE_TO_PAULI:
        raise ConfigError(f"unknown channel operator {name!r}; expected one of {BASE_NAMES}")
    return pauli(_BASE_TO_PAULI[name])


def _hermitian_basis(d: int):
    """(names, matrices) spanning d x d Hermitian matrices with real coefficients."""
    names, mats = [], []
    for i in range(d):
        m = np.zeros((d, d), dtype=complex)
        m[i, i] = 1.0
        names.append(f"{i}{i}")
        mats.append(m)
    for i in range(d):
        for j in range(i + 1, d):
            m = np.zeros((d, d), dtype=complex)
            m[i, j] = m[j, i] = 1.0
            names.append(f"re{i}{j}")
            mats.append(m)
            m = np.zeros((d, d), dtype=complex)
            m[i, j] = 1j
            m[j, i] = -1j
            names.append(f"im{i}{j}")
            mats.append(m)
    return names, np.array(mats)


def _hermitian_coords(a: np.ndarray) -> list:
    d = a.shape[0]
    out = [a[i, i].real for i in range(d)]
    for i in range(d):
        for j in range(i + 1, d):
            out.extend([a[i, j].real, a[i, j].imag])
    return out


@dataclass(frozen=True)
class HamiltonianParam:
    """Static part ``h`` (d x d) and control couplings ``S`` (K x d x d)."""

    h: object
    S: object

    @property
    def dim(self) -> int:
        return np.shape(value_of(self.h))[-1]

    @property
    def n_controls(self) -> int:
        return np.shape(value_of(self.S))[0]


@dataclass(frozen=True)
class CollapseChannel:
    base: str
    amplitude: object = 1.0
    monitored: bool = False

    @property
    def rate(self):
        return self.amplitude * self.amplitude


@dataclass(frozen=True)
class Efficiency:
    raw: object = 0.0

    @property
    def value(self):
        return logistic(self.raw)


@dataclass(frozen=True)
class MemoryKernel:
    """Per-channel kernel weights on a lag grid ``j * dtau``, ``j < length``.

    ``weights`` has shape (n_channels, length) and units of 1/time.
    """

    channels: tuple
    weights: object
    dtau: float

    def __post_init__(self):
        shape = np.shape(value_of(self.weights))
        if len(shape) != 2 or shape[0] != len(self.channels):
            raise DimensionError(
                f"kernel weights of shape {shape} do not fit {len(self.channels)} channels"
            )
        if shape[1] < 1:
            raise DimensionError("kernel length must be at least 1")
        if not self.dtau > 0:
            raise ValueError("dtau must be positive")

    @property
    def length(self) -> int:
        return np.shape(value_of(self.weights))[1]


def hamiltonian_at(p: HamiltonianParam, controls):
    """Evaluate ``h + sum_k S_k c_k``.

    ``controls`` has shape (K,) or (..., K); the result gains the same
    leading axes.
    """
    c = np.asarray(controls, dtype=float)
    if c.ndim == 0 or c.shape[-1] != p.n_controls:
        raise DimensionError(
            f"expected {p.n_controls} control values, got shape {c.shape}"
        )
    if p.n_controls == 0:
        h = p.h
        return h if c.ndim == 1 else h + np.zeros(c.shape[:-1] + (1, 1))
    return p.h + (c[..., :, None, None] * p.S).sum(axis=-3)


def channel_operator(ch: CollapseChannel):
    return ch.amplitude * base_operator(ch.base)


def kernel_value(k: MemoryKernel, channel: int, j: int):
    n_ch, length = np.shape(value_of(k.weights))
    if not (0 <= channel < n_ch and 0 <= j < length):
        raise IndexError(f"kernel index ({channel}, {j}) out of range ({n_ch}, {length})")
    return k.weights[channel, j]


def delta_kernel(channels: Sequence[CollapseChannel], dtau: float, length: int = 1, rates=None):
    """Kernel whose lag-0 weight is ``rate / dtau`` and all other lags vanish.

    With unit rates this reproduces the Lindblad generator of the same
    channels.
    """
    channels = tuple(channels)
    rates = np.ones(len(channels)) if rates is None else np.asarray(rates, dtype=float)
    w = np.zeros((len(channels), length))
    w[:, 0] = rates / dtau
    return MemoryKernel(channels, w, dtau)


def init_kernel(
    bases: Sequence[str],
    length: int,
    dtau: float,
    rng: np.random.Generator,
    decay_rate: float | None = None,
) -> MemoryKernel:
    """Random nonnegative kernel with an optional Lindblad-like sigma_- spike.

    Weights are uniform in ``[0, 0.1 / (dtau * length)]``; when ``decay_rate``
    is given the sigma_- lag-0 weight becomes ``decay_rate / dtau``.
    """
    w = rng.uniform(0.0, 0.1 / (dtau * length), size=(len(bases), length))
    if decay_rate is not None and "sm" in bases:
        w[list(bases).index("sm"), 0] = decay_rate / dtau
    return MemoryKernel(tuple(CollapseChannel(b) for b in bases), w, dtau)


@dataclass(frozen=True)
class GeneratorSet:
    """Everything gradient descent can touch, as plain values or Duals."""

    hamiltonian: HamiltonianParam
    channels: tuple = ()
    efficiency: Efficiency | None = None
    kernel: MemoryKernel | None = None
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def dim(self) -> int:
        return self.hamiltonian.dim

    @property
    def eta(self):
        return 0.0 if self.efficiency is None else self.efficiency.value

    def channel_ops(self) -> list:
        return [channel_operator(ch) for ch in self.channels]

    def monitored_channel(self):
        """Index of the (single) monitored channel, or None."""
        idx = [i for i, ch in enumerate(self.channels) if ch.monitored]
        if len(idx) > 1:
            raise ConfigError("only one monitored channel is supported")
        return idx[0] if idx else None

    # -- named parameters --------------------------------------------------
    def _slots(self):
        """Yield (name, current value) for every scalar parameter."""
        d = self.dim
        hn, _ = _hermitian_basis(d)
        for n, v in zip(hn, _hermitian_coords(np.asarray(value_of(self.hamiltonian.h)))):
            yield f"h.{n}", v
        S = np.asarray(value_of(self.hamiltonian.S))
        for k in range(S.shape[0]):
            for n, v in zip(hn, _hermitian_coords(S[k])):
                yield f"S{k}.{n}", v
        for i, ch in enumerate(self.channels):
            yield f"amp{i}.{ch.base}", float(value_of(ch.amplitude))
        if self.efficiency is not None:
            yield "eta_raw", float(value_of(self.efficiency.raw))
        if self.kernel is not None:
            w = np.asarray(value_of(self.kernel.weights))
            for m, ch in enumerate(self.kernel.channels):
                yield f"kamp{m}.{ch.base}", float(value_of(ch.amplitude))
            for m, ch in enumerate(self.kernel.channels):
                for j in range(w.shape[1]):
                    yield f"K{m}.{ch.base}.{j}", w[m, j]

    def parameter_names(self) -> list:
        return [n for n, _ in self._slots()]

    def select(self, *prefixes: str) -> list:
        """Parameter names starting with any of ``prefixes``."""
        return [n for n in self.parameter_names() if n.startswith(prefixes)]

    def parameter_vector(self, names: Sequence[str]) -> ParameterVector:
        slots = dict(self._slots())
        missing = [n for n in names if n not in slots]
        if missing:
            raise KeyError(f"unknown parameters: {missing}")
        return ParameterVector(np.array([float(slots[n]) for n in names]), tuple(names))

    def realize(self, theta, names: Sequence[str] | None = None) -> "GeneratorSet":
        """Return a copy with the named parameters replaced by ``theta``.

        ``theta`` is a ParameterVector, a plain array or a lifted Dual vector
        (whose entries then carry partials into every derived quantity).
        """
        if isinstance(theta, ParameterVector):
            names = theta.names if names is None else names
            theta = theta.values
        if names is None:
            raise ValueError("parameter names are required")
        names = list(names)
        vals = theta if isinstance(theta, Dual) else np.asarray(theta, dtype=float)
        if len(vals) != len(names):
            raise DimensionError("theta and names differ in length")
        lookup = {n: k for k, n in enumerate(names)}
        unknown = set(names) - set(self.parameter_names())
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")

        def pick(name, current):
            k = lookup.get(name)
            return current if k is None else vals[k]

        d = self.dim
        hn, basis = _hermitian_basis(d)

        def herm(prefix, current):
            keys = [f"{prefix}.{n}" for n in hn]
            if not any(k in lookup for k in keys):
                return current
            coords = _hermitian_coords(np.asarray(value_of(current)))
            coef = stack([pick(k, c) for k, c in zip(keys, coords)])
            return (coef[:, None, None] * basis).sum(axis=0)

        h = herm("h", self.hamiltonian.h)
        S_cur = self.hamiltonian.S
        S_list = [herm(f"S{k}", np.asarray(value_of(S_cur))[k]) for k in range(np.shape(value_of(S_cur))[0])]
        if any(f"S{k}.{n}" in lookup for k in range(len(S_list)) for n in hn):
            S = stack(S_list) if S_list else S_cur
        else:
            S = S_cur
        channels = tuple(
            replace(ch, amplitude=pick(f"amp{i}.{ch.base}", ch.amplitude))
            for i, ch in enumerate(self.channels)
        )
        eff = self.efficiency
        if eff is not None:
            eff = Efficiency(pick("eta_raw", eff.raw))
        kernel = self.kernel
        if kernel is not None:
            kch = tuple(
                replace(ch, amplitude=pick(f"kamp{m}.{ch.base}", ch.amplitude))
                for m, ch in enumerate(kernel.channels)
            )
            w = np.asarray(value_of(kernel.weights))
            keys = [f"K{m}.{ch.base}.{j}" for m, ch in enumerate(kernel.channels) for j in range(w.shape[1])]
            weights = kernel.weights
            if any(k in lookup for k in keys):
                flat = stack([pick(k, c) for k, c in zip(keys, w.reshape(-1))])
                weights = flat.reshape(w.shape)
            kernel = MemoryKernel(kch, weights, kernel.dtau)
        return GeneratorSet(HamiltonianParam(h, S), channels, eff, kernel, dict(self.metadata))

    def with_values(self, theta: ParameterVector) -> "GeneratorSet":
        """Plain-valued copy with the named parameters overwritten."""
        return self.realize(theta.values, theta.names)

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        def cmat(a):
            a = np.asarray(value_of(a))
            return [[[float(z.real), float(z.imag)] for z in row] for row in a]

        doc = {
            "format_version": FORMAT_VERSION,
            "h": cmat(self.hamiltonian.h),
            "S": [cmat(s) for s in np.asarray(value_of(self.hamiltonian.S))],
            "channels": [
                {"base": ch.base, "amplitude": float(value_of(ch.amplitude)), "monitored": bool(ch.monitored)}
                for ch in self.channels
            ],
            "eta_raw": None if self.efficiency is None else float(value_of(self.efficiency.raw)),
            "kernel": None,
        }
        if self.kernel is not None:
            w = np.asarray(value_of(self.kernel.weights))
            doc["kernel"] = {
                "dtau": float(self.kernel.dtau),
                "channels": [
                    {"base": ch.base, "amplitude": float(value_of(ch.amplitude))}
                    for ch in self.kernel.channels
                ],
                "weights": {ch.base: [float(x) for x in w[m]] for m, ch in enumerate(self.kernel.channels)},
            }
        if self.metadata:
            doc["metadata"] = self.metadata
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorSet":
        known = {"format_version", "h", "S", "channels", "eta_raw", "kernel", "metadata"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown generator keys: {sorted(extra)}")
        if doc.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ConfigError(f"unsupported generator format_version {doc.get('format_version')}")

        def cmat(rows):
            a = np.asarray(rows, dtype=float)
            return a[..., 0] + 1j * a[..., 1]

        try:
            h = cmat(doc["h"])
            S = np.array([cmat(s) for s in doc.get("S", [])]).reshape((-1,) + h.shape)
            channels = tuple(
                CollapseChannel(c["base"], float(c.get("amplitude", 1.0)), bool(c.get("monitored", False)))
                for c in doc.get("channels", [])
            )
            eff = None if doc.get("eta_raw") is None else Efficiency(float(doc["eta_raw"]))
            kernel = None
            kd = doc.get("kernel")
            if kd is not None:
                kch = tuple(
                    CollapseChannel(c["base"], float(c.get("amplitude", 1.0))) for c in kd["channels"]
                )
                w = np.array([kd["weights"][c.base] for c in kch], dtype=float)
                kernel = MemoryKernel(kch, w, float(kd["dtau"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed generator document: {exc}") from exc
        for ch in channels + (kernel.channels if kernel else ()):
            base_operator(ch.base)
        return cls(HamiltonianParam(h, S), channels, eff, kernel, dict(doc.get("metadata", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GeneratorSet":
        return cls.from_dict(json.loads(text))


def qubit_generators(
    h=None,
    couplings: Sequence[str] = (),
    channels: Sequence[CollapseChannel] = (),
    eta: float | None = None,
    kernel: MemoryKernel | None = None,
) -> GeneratorSet:
    """Convenience constructor for a qubit; ``couplings`` name Pauli control terms."""
    h = np.zeros((2, 2), dtype=complex) if h is None else np.asarray(h, dtype=complex)
    S = np.array([base_operator(b) for b in couplings], dtype=complex).reshape(-1, 2, 2)
    eff = None
    if eta is not None:
        if not 0.0 < eta < 1.0:
            raise ValueError("eta must lie strictly between 0 and 1")
        eff = Efficiency(float(np.log(eta / (1.0 - eta))))
    return GeneratorSet(HamiltonianParam(h, S), tuple(channels), eff, kernel)


def readout_qubit(omega: float, gamma: float, eta: float) -> GeneratorSet:
    """Driven qubit under monitored dephasing: ``H = omega X``, ``c = sqrt(gamma) Z``."""
    return qubit_generators(
        h=omega * pauli("X"),
        channels=[CollapseChannel("sz", float(np.sqrt(gamma)), monitored=True)],
        eta=eta,
    )
