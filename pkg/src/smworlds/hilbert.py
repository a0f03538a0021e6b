"""State representations: wave functions on periodic grids and on finite
tensor-product bases, plus inner products and partial traces.

Natural units (hbar = 1) throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

TIME_TOL = 1e-12


def _frozen(a: np.ndarray, dtype=complex) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class GridSpec:
    """Periodic grid over the configuration space of ``num_particles``
    particles in ``space_dim`` dimensions.

    Axis ordering of the amplitude array is particle-major: particle ``i``
    owns axes ``i*space_dim ... (i+1)*space_dim - 1``.  Cell centres sit at
    ``-L/2 + (j + 1/2) * L/n`` so the grid is symmetric under reflection.
    """

    num_particles: int
    space_dim: int
    points_per_axis: int
    extent: float
    periodic: bool = True

    def __post_init__(self):
        n = self.points_per_axis
        if self.num_particles < 1:
            raise ValueError("num_particles must be >= 1")
        if self.space_dim not in (1, 2, 3):
            raise ValueError("space_dim must be 1, 2 or 3")
        if n < 8 or n & (n - 1):
            raise ValueError(f"points_per_axis must be a power of two >= 8, got {n}")
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        if not self.periodic:
            raise ValueError("only periodic grids are supported")

    @property
    def ndim(self) -> int:
        return self.num_particles * self.space_dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.ndim

    @property
    def dx(self) -> float:
        return self.extent / self.points_per_axis

    @property
    def cell_volume(self) -> float:
        return self.dx ** self.ndim

    @property
    def physical_cell_volume(self) -> float:
        return self.dx ** self.space_dim

    @property
    def total_cells(self) -> int:
        return self.points_per_axis ** self.ndim

    def axis(self) -> np.ndarray:
        n, L = self.points_per_axis, self.extent
        return -L / 2 + (np.arange(n) + 0.5) * (L / n)

    def wavenumbers(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.points_per_axis, d=self.dx)

    def particle_axes(self, i: int) -> tuple[int, ...]:
        d = self.space_dim
        return tuple(range(i * d, (i + 1) * d))

    def coordinate(self, axis: int) -> np.ndarray:
        """Coordinate values broadcastable against the amplitude array."""
        shape = [1] * self.ndim
        shape[axis] = self.points_per_axis
        return self.axis().reshape(shape)

    def cell_of(self, q) -> np.ndarray:
        """Nearest-cell index (periodic) of configuration point(s) ``q``."""
        q = np.asarray(q, dtype=float)
        idx = np.floor((q + self.extent / 2) / self.dx).astype(np.int64)
        return np.mod(idx, self.points_per_axis)

    def wrap(self, q) -> np.ndarray:
        L = self.extent
        return np.mod(np.asarray(q, dtype=float) + L / 2, L) - L / 2

    def physical(self) -> "GridSpec":
        """Single-particle grid on physical space."""
        return replace(self, num_particles=1)


@dataclass(frozen=True)
class GridState:
    spec: GridSpec
    amplitudes: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        amps = _frozen(self.amplitudes)
        if amps.shape != self.spec.shape:
            raise ValueError(f"amplitude shape {amps.shape} != grid shape {self.spec.shape}")
        object.__setattr__(self, "amplitudes", amps)

    def norm_sq(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.spec.cell_volume)

    def probabilities(self) -> np.ndarray:
        """Cell probabilities |psi|^2 * dv."""
        return np.abs(self.amplitudes) ** 2 * self.spec.cell_volume

    def with_amplitudes(self, amps, time: float | None = None) -> "GridState":
        return GridState(self.spec, amps, self.time if time is None else time)


# --------------------------------------------------------------------------
# finite bases


@dataclass(frozen=True)
class Factor:
    """One tensor factor of a finite model.

    ``kind`` is one of spin, position, record, other.  Position factors name
    the particle they locate and the region their labels live in; a site of
    physical space is then the pair ``(region, label)``.
    """

    name: str
    labels: tuple[str, ...]
    kind: str = "other"
    particle: int | None = None
    region: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate labels in factor {self.name}")
        if self.kind == "position" and self.particle is None:
            raise ValueError(f"position factor {self.name} needs a particle index")

    @property
    def dim(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def site(self, label: str) -> tuple[str, str]:
        return (self.region if self.region is not None else self.name, label)


@dataclass(frozen=True)
class FiniteState:
    """Amplitudes over a labelled tensor-product basis.

    ``amplitudes`` is stored as a tensor with one axis per factor.
    """

    factors: tuple[Factor, ...]
    amplitudes: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        factors = tuple(self.factors)
        names = [f.name for f in factors]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate factor names {names}")
        dims = tuple(f.dim for f in factors)
        amps = _frozen(self.amplitudes)
        if amps.size != int(np.prod(dims)):
            raise ValueError(f"{amps.size} amplitudes do not fit factor dims {dims}")
        amps = amps.reshape(dims)
        amps.setflags(write=False)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.dim for f in self.factors)

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    @property
    def vector(self) -> np.ndarray:
        return self.amplitudes.reshape(-1)

    def factor_index(self, name: str) -> int:
        for k, f in enumerate(self.factors):
            if f.name == name:
                return k
        raise KeyError(f"no factor named {name!r}")

    def norm_sq(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    @property
    def num_particles(self) -> int:
        ps = [f.particle for f in self.factors if f.kind == "position"]
        return max(ps) + 1 if ps else 0

    def with_amplitudes(self, amps, time: float | None = None) -> "FiniteState":
        return FiniteState(self.factors, amps, self.time if time is None else time)


State = Union[GridState, FiniteState]


def basis_state(factors: Sequence[Factor], labels: Sequence[str], time: float = 0.0) -> FiniteState:
    """Product basis vector with amplitude 1 at the given labels."""
    factors = tuple(factors)
    amps = np.zeros(tuple(f.dim for f in factors), dtype=complex)
    amps[tuple(f.index(l) for f, l in zip(factors, labels, strict=True))] = 1.0
    return FiniteState(factors, amps, time)


def ket(factors: Sequence[Factor], terms: Sequence[tuple[complex, Sequence[str]]],
        time: float = 0.0) -> FiniteState:
    """Superposition ``sum_k c_k |labels_k>`` over the product basis."""
    factors = tuple(factors)
    amps = np.zeros(tuple(f.dim for f in factors), dtype=complex)
    for c, labels in terms:
        amps[tuple(f.index(l) for f, l in zip(factors, labels, strict=True))] += c
    return FiniteState(factors, amps, time)


@dataclass(frozen=True)
class DensityMatrix:
    basis: tuple[Factor, ...]
    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "basis", tuple(self.basis))
        object.__setattr__(self, "entries", _frozen(self.entries))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def trace(self) -> complex:
        return complex(np.trace(self.entries))

    def check(self) -> None:
        """Raise if the Hermitian / unit-trace / PSD invariants fail."""
        rho = self.entries
        if np.max(np.abs(rho - rho.conj().T), initial=0.0) > 1e-12:
            raise ValueError("density matrix is not Hermitian")
        if abs(self.trace() - 1) > 1e-10:
            raise ValueError(f"density matrix trace {self.trace()} != 1")
        if np.linalg.eigvalsh(rho).min() < -1e-10:
            raise ValueError("density matrix is not positive semidefinite")

    def diagonal(self) -> np.ndarray:
        """Diagonal reshaped onto the kept factor dims."""
        return np.real(np.diag(self.entries)).reshape(tuple(f.dim for f in self.basis))


@dataclass(frozen=True)
class ParticleWeights:
    """Per-particle weights for the matter density: masses, charges or ones."""

    mode: str
    values: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.mode not in ("mass", "charge", "unit"):
            raise ValueError(f"unknown weight mode {self.mode!r}")
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("at least one particle weight is required")
        if self.mode == "mass" and min(vals) <= 0:
            raise ValueError("masses must be strictly positive")
        if self.mode == "unit" and any(v != 1.0 for v in vals):
            raise ValueError("unit mode weights must all be 1")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "_total", math.fsum(vals))

    @classmethod
    def mass(cls, *masses: float) -> "ParticleWeights":
        return cls("mass", tuple(masses))

    @classmethod
    def charge(cls, *charges: float) -> "ParticleWeights":
        return cls("charge", tuple(charges))

    @classmethod
    def unit(cls, n: int) -> "ParticleWeights":
        return cls("unit", (1.0,) * n)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def total(self) -> float:
        return self._total

    def as_array(self) -> np.ndarray:
        return np.array(self.values)


# --------------------------------------------------------------------------
# operations


def normalize(psi: State) -> State:
    n2 = psi.norm_sq()
    if not n2 > 0:
        raise ValueError("cannot normalize a zero state")
    return psi.with_amplitudes(psi.amplitudes / np.sqrt(n2))


def tensor(a: FiniteState, b: FiniteState) -> FiniteState:
    if abs(a.time - b.time) > TIME_TOL:
        raise ValueError(f"incompatible times {a.time} and {b.time}")
    return FiniteState(a.factors + b.factors, np.multiply.outer(a.amplitudes, b.amplitudes), a.time)


def inner(a: State, b: State) -> complex:
    """<a|b>, conjugate-linear in ``a``."""
    if isinstance(a, GridState) and isinstance(b, GridState):
        if a.spec != b.spec:
            raise ValueError("grid specs differ")
        return complex(np.vdot(a.amplitudes, b.amplitudes) * a.spec.cell_volume)
    if isinstance(a, FiniteState) and isinstance(b, FiniteState):
        if a.factors != b.factors:
            raise ValueError("factor bases differ")
        return complex(np.vdot(a.amplitudes, b.amplitudes))
    raise ValueError("cannot take the inner product of a grid and a finite state")


def _factor_indices(psi: FiniteState, names: Sequence[str]) -> list[int]:
    idx = [psi.factor_index(n) for n in names]
    if len(set(idx)) != len(idx):
        raise ValueError(f"repeated factors in {names}")
    return idx


def partial_trace(psi: FiniteState, keep: Sequence[str]) -> DensityMatrix:
    """Reduced density matrix on the factors named in ``keep``."""
    keep_idx = _factor_indices(psi, keep)
    if not keep_idx or len(keep_idx) == len(psi.factors):
        raise ValueError("keep must be a nonempty proper subset of the factors")
    traced = [k for k in range(len(psi.factors)) if k not in keep_idx]
    a = np.transpose(psi.amplitudes, traced + keep_idx)
    dq = int(np.prod([psi.dims[k] for k in traced]))
    dr = int(np.prod([psi.dims[k] for k in keep_idx]))
    m = a.reshape(dq, dr)
    # rho(r; s) = sum_q psi*(q, r) psi(q, s); stored as |psi><psi| convention rho[s, r]
    rho = m.T @ m.conj()
    return DensityMatrix(tuple(psi.factors[k] for k in keep_idx), rho)


def apply_local(psi: FiniteState, op: np.ndarray, on: Sequence[str]) -> FiniteState:
    """Apply an operator acting on the named factors (identity elsewhere)."""
    idx = _factor_indices(psi, on)
    dims = [psi.dims[k] for k in idx]
    d = int(np.prod(dims))
    op = np.asarray(op, dtype=complex)
    if op.shape != (d, d):
        raise ValueError(f"operator shape {op.shape} does not match factor dims {dims}")
    rest = [k for k in range(len(psi.factors)) if k not in idx]
    a = np.transpose(psi.amplitudes, idx + rest).reshape(d, -1)
    out = (op @ a).reshape(dims + [psi.dims[k] for k in rest])
    out = np.transpose(out, np.argsort(idx + rest))
    return psi.with_amplitudes(out)


def embed_operator(psi_or_factors, op: np.ndarray, on: Sequence[str]) -> np.ndarray:
    """Full-space matrix of a local operator (identity on the other factors)."""
    factors = psi_or_factors.factors if isinstance(psi_or_factors, FiniteState) else tuple(psi_or_factors)
    dims = [f.dim for f in factors]
    dim = int(np.prod(dims))
    cols = np.eye(dim, dtype=complex)
    out = np.empty((dim, dim), dtype=complex)
    probe = FiniteState(factors, np.zeros(dim))
    for j in range(dim):
        out[:, j] = apply_local(probe.with_amplitudes(cols[j]), op, on).vector
    return out


# --------------------------------------------------------------------------
# grid constructors


def gaussian_packet(spec: GridSpec, centers, sigma=1.0, momenta=None, time: float = 0.0) -> GridState:
    """Normalized product of per-particle Gaussians.

    ``centers`` and ``momenta`` have shape (N, d); ``sigma`` is the position
    standard deviation of |psi|^2 (scalar or one per particle).  Each axis
    factor is the periodic image sum, so the packet is smooth across the
    boundary.
    """
    N, d = spec.num_particles, spec.space_dim
    centers = np.broadcast_to(np.asarray(centers, dtype=float), (N, d))
    momenta = np.zeros((N, d)) if momenta is None else np.broadcast_to(np.asarray(momenta, dtype=float), (N, d))
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (N,))
    x = spec.axis()
    L = spec.extent
    amps = np.ones(spec.shape, dtype=complex)
    for i in range(N):
        for a in range(d):
            c, k, s = centers[i, a], momenta[i, a], sig[i]
            # minimum-image displacement keeps the packet periodic
            dxv = np.mod(x - c + L / 2, L) - L / 2
            f = np.exp(-dxv ** 2 / (4 * s ** 2)) * np.exp(1j * k * dxv)
            shape = [1] * spec.ndim
            shape[i * d + a] = spec.points_per_axis
            amps = amps * f.reshape(shape)
    return normalize(GridState(spec, amps, time))


def shift(psi: GridState, cells: int, physical_axis: int = 0) -> GridState:
    """Translate every particle by ``cells`` along one physical axis (periodic)."""
    spec = psi.spec
    axes = tuple(i * spec.space_dim + physical_axis for i in range(spec.num_particles))
    return psi.with_amplitudes(np.roll(psi.amplitudes, (cells,) * len(axes), axis=axes))
