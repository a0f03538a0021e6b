"""Time evolution: Strang split-step on grids, exact unitaries on finite
bases, GRW spontaneous collapses, and the Heisenberg-picture density."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import NumericalAbort
from .hilbert import FiniteState, GridSpec, GridState, ParticleWeights, apply_local
from .rng import generator

DT_GUARD = 0.5


@dataclass(frozen=True)
class PotentialSpec:
    """Real potential on configuration space.

    kind: ``zero``, ``harmonic`` (``omega`` per particle, V = sum_i m_i w_i^2 |x_i|^2 / 2),
    ``gaussian_barriers`` (``barriers`` of (center, height, width), felt by
    every particle) or ``custom`` (``table`` over configuration cells).
    """

    kind: str = "zero"
    omega: tuple[float, ...] = ()
    barriers: tuple[tuple[tuple[float, ...], float, float], ...] = ()
    table: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("zero", "harmonic", "gaussian_barriers", "custom"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "custom" and self.table is None:
            raise ValueError("custom potential needs a table")

    @classmethod
    def zero(cls) -> "PotentialSpec":
        return cls("zero")

    @classmethod
    def harmonic(cls, *omega: float) -> "PotentialSpec":
        return cls("harmonic", omega=tuple(float(w) for w in omega))

    @classmethod
    def gaussian_barriers(cls, *barriers) -> "PotentialSpec":
        bs = tuple((tuple(np.atleast_1d(c).astype(float)), float(h), float(w)) for c, h, w in barriers)
        return cls("gaussian_barriers", barriers=bs)

    @classmethod
    def custom(cls, table) -> "PotentialSpec":
        if np.iscomplexobj(table):
            raise ValueError("potential must be real")
        t = np.array(table, dtype=float)
        t.setflags(write=False)
        return cls("custom", table=t)

    def evaluate(self, spec: GridSpec, masses: ParticleWeights | None = None) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(spec.shape)
        if self.kind == "custom":
            v = np.asarray(self.table, dtype=float)
            if v.shape != spec.shape:
                raise ValueError(f"potential table shape {v.shape} != grid {spec.shape}")
        else:
            v = np.zeros(spec.shape)
            d = spec.space_dim
            for i in range(spec.num_particles):
                r2 = sum(spec.coordinate(a) ** 2 for a in spec.particle_axes(i))
                if self.kind == "harmonic":
                    w = self.omega[i] if len(self.omega) > 1 else self.omega[0]
                    m = 1.0 if masses is None else masses.values[i]
                    v = v + 0.5 * m * w ** 2 * r2
                else:
                    for center, height, width in self.barriers:
                        c = np.broadcast_to(center, (d,))
                        s2 = sum((spec.coordinate(a) - c[k]) ** 2
                                 for k, a in enumerate(spec.particle_axes(i)))
                        v = v + height * np.exp(-s2 / (2 * width ** 2))
        if not np.all(np.isfinite(v)):
            raise ValueError("potential is not finite on the grid")
        return v


@dataclass(frozen=True)
class EvolutionParams:
    """``dt`` may be negative for backward evolution."""

    dt: float
    steps: int
    norm_tolerance: float = 1e-10

    def __post_init__(self):
        if self.dt == 0 or not np.isfinite(self.dt):
            raise ValueError("dt must be finite and nonzero")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass(frozen=True)
class GrwParams:
    lam: float
    sigma_c: float
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("collapse rate must be >= 0")
        if not self.sigma_c > 0:
            raise ValueError("collapse width must be positive")

    def check(self, spec: GridSpec) -> None:
        if self.sigma_c < 2 * spec.dx:
            raise ValueError(f"sigma_c={self.sigma_c} below two grid cells ({2 * spec.dx})")


@dataclass(frozen=True)
class CollapseEvent:
    time: float
    particle: int
    center: tuple[float, ...]


def check_dt_guard(v: np.ndarray, dt: float) -> None:
    vmax = float(np.max(np.abs(v), initial=0.0))
    if abs(dt) * vmax >= DT_GUARD:
        raise ValueError(f"dt*max|V| = {abs(dt) * vmax:.3g} violates the accuracy guard (< {DT_GUARD})")


def _masses_for(spec: GridSpec, w: ParticleWeights) -> np.ndarray:
    if w.mode != "mass":
        raise ValueError("evolution needs mass weights")
    if len(w) != spec.num_particles:
        raise ValueError(f"{len(w)} masses for {spec.num_particles} particles")
    return w.as_array()


@lru_cache(maxsize=64)
def _kinetic_energy(spec: GridSpec, masses: tuple[float, ...]) -> np.ndarray:
    k = spec.wavenumbers()
    ke = np.zeros(spec.shape)
    for i, m in enumerate(masses):
        for a in spec.particle_axes(i):
            shape = [1] * spec.ndim
            shape[a] = spec.points_per_axis
            ke = ke + (k ** 2).reshape(shape) / (2 * m)
    ke.setflags(write=False)
    return ke


class _Stepper:
    """Strang propagator for one (grid, potential, masses) triple, with the
    phase factors cached per dt."""

    def __init__(self, spec: GridSpec, v: np.ndarray, masses: np.ndarray):
        self.spec = spec
        self.v = v
        self.ke = _kinetic_energy(spec, tuple(float(m) for m in masses))
        self._cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}
        self.axes = tuple(range(spec.ndim))

    def factors(self, dt: float):
        f = self._cache.get(dt)
        if f is None:
            f = (np.exp(-0.5j * dt * self.v), np.exp(-1j * dt * self.ke))
            # remainder steps of odd length are not worth keeping
            if len(self._cache) < 4:
                self._cache[dt] = f
        return f

    def step(self, a: np.ndarray, dt: float) -> np.ndarray:
        half, kin = self.factors(dt)
        a = a * half
        a = np.fft.ifftn(np.fft.fftn(a, axes=self.axes) * kin, axes=self.axes)
        return a * half


def _norm(a: np.ndarray, dv: float) -> float:
    return float(np.sum(a.real ** 2 + a.imag ** 2) * dv)


def _advance(stepper: _Stepper, a: np.ndarray, dt: float, steps: int, tol: float,
             n_ref: float, callback=None, t0: float = 0.0) -> np.ndarray:
    dv = stepper.spec.cell_volume
    prev = _norm(a, dv)
    for s in range(steps):
        a = stepper.step(a, dt)
        cur = _norm(a, dv)
        if not np.isfinite(cur):
            raise NumericalAbort("finite_amplitudes", f"NaN/inf amplitude at step {s + 1}")
        if abs(cur - prev) > tol * max(n_ref, 1e-300):
            raise NumericalAbort(
                "norm_conservation",
                f"norm drift {abs(cur - prev):.3e} at step {s + 1} exceeds tolerance {tol:.1e}")
        prev = cur
        if callback is not None:
            callback(s + 1, t0 + (s + 1) * dt, a)
    return a


def split_step_evolve(psi: GridState, V: PotentialSpec, w: ParticleWeights,
                      p: EvolutionParams, callback=None) -> GridState:
    """Evolve ``psi`` by ``p.steps`` Strang steps of size ``p.dt``.

    ``callback(step, time, amplitudes)`` is invoked after every step, if given.
    """
    masses = _masses_for(psi.spec, w)
    v = V.evaluate(psi.spec, w)
    check_dt_guard(v, p.dt)
    stepper = _Stepper(psi.spec, v, masses)
    a = np.array(psi.amplitudes)
    a = _advance(stepper, a, p.dt, p.steps, p.norm_tolerance, psi.norm_sq(), callback, psi.time)
    return GridState(psi.spec, a, psi.time + p.steps * p.dt)


class Propagator:
    """Reusable grid propagator; handy when many states share one Hamiltonian."""

    def __init__(self, spec: GridSpec, V: PotentialSpec, w: ParticleWeights, dt: float,
                 norm_tolerance: float = 1e-10):
        masses = _masses_for(spec, w)
        v = V.evaluate(spec, w)
        check_dt_guard(v, dt)
        self.spec, self.dt, self.tol = spec, dt, norm_tolerance
        self._stepper = _Stepper(spec, v, masses)

    def step_array(self, a: np.ndarray, dt: float | None = None) -> np.ndarray:
        return self._stepper.step(a, self.dt if dt is None else dt)

    def evolve(self, psi: GridState, steps: int) -> GridState:
        a = _advance(self._stepper, np.array(psi.amplitudes), self.dt, steps, self.tol, psi.norm_sq())
        return GridState(psi.spec, a, psi.time + steps * self.dt)

    def evolve_to(self, psi: GridState, t: float) -> GridState:
        """Whole steps of dt, then one remainder step landing exactly on ``t``."""
        span = t - psi.time
        steps = int(np.floor(span / self.dt + 1e-9))
        a = _advance(self._stepper, np.array(psi.amplitudes), self.dt, steps, self.tol, psi.norm_sq())
        rest = span - steps * self.dt
        if abs(rest) > 1e-12 * max(1.0, abs(t)):
            a = self._stepper.step(a, rest)
        return GridState(psi.spec, a, t)


# --------------------------------------------------------------------------
# finite models


def check_hermitian(H: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    H = np.asarray(H, dtype=complex)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("Hamiltonian must be a square matrix")
    if np.max(np.abs(H - H.conj().T), initial=0.0) > tol:
        raise ValueError("Hamiltonian is not Hermitian")
    return H


class FinitePropagator:
    """exp(-iHt) for a fixed Hermitian H, diagonalised once."""

    def __init__(self, H: np.ndarray):
        H = check_hermitian(H)
        self.energies, self.vectors = np.linalg.eigh(H)

    def unitary(self, t: float) -> np.ndarray:
        return (self.vectors * np.exp(-1j * self.energies * t)) @ self.vectors.conj().T

    def evolve(self, psi: FiniteState, t: float, on: Sequence[str] | None = None) -> FiniteState:
        """psi_t = exp(-iHt) psi.  With ``on``, H acts on those factors only."""
        U = self.unitary(t)
        if on is None:
            if U.shape[0] != psi.dim:
                raise ValueError(f"Hamiltonian dim {U.shape[0]} != state dim {psi.dim}")
            return psi.with_amplitudes(U @ psi.vector, psi.time + t)
        out = apply_local(psi, U, on)
        return out.with_amplitudes(out.amplitudes, psi.time + t)


def unitary(H: np.ndarray, t: float) -> np.ndarray:
    """exp(-iHt) from the eigendecomposition of a Hermitian H."""
    return FinitePropagator(H).unitary(t)


def exact_evolve(psi: FiniteState, H: np.ndarray, t: float, on: Sequence[str] | None = None) -> FiniteState:
    """psi_t = exp(-iHt) psi.  With ``on``, H acts on those factors only."""
    return FinitePropagator(H).evolve(psi, t, on)


def mass_density_operator(factors, site: tuple[str, str], w: ParticleWeights) -> np.ndarray:
    """Diagonal of M(site) = sum_i w_i P_i(site) over the product basis."""
    factors = tuple(factors)
    pos = [(k, f) for k, f in enumerate(factors) if f.kind == "position"]
    if not pos:
        raise ValueError("state has no position-label factors")
    diag = np.zeros(tuple(f.dim for f in factors))
    for k, f in pos:
        if f.particle >= len(w):
            raise ValueError(f"no weight for particle {f.particle}")
        for j, label in enumerate(f.labels):
            if f.site(label) == tuple(site):
                idx = [slice(None)] * len(factors)
                idx[k] = j
                diag[tuple(idx)] += w.values[f.particle]
    return diag.reshape(-1)


class HeisenbergPicture:
    """Mass-density operators carried to time t, M(t) = e^{iHt} M e^{-iHt}.
    The propagator comes from the matrix exponential so this shares no code
    path with ``exact_evolve``; evolved operators are cached per site."""

    def __init__(self, H: np.ndarray, t: float):
        self.U = scipy.linalg.expm(-1j * t * check_hermitian(H))
        self._ops: dict = {}

    def operator(self, factors, site: tuple[str, str], w: ParticleWeights) -> np.ndarray:
        key = (tuple(factors), tuple(site), w)
        if key not in self._ops:
            m = mass_density_operator(factors, site, w)
            self._ops[key] = self.U.conj().T @ (m[:, None] * self.U)
        return self._ops[key]

    def density(self, psi0: FiniteState, site: tuple[str, str], w: ParticleWeights) -> float:
        v = psi0.vector
        return float(np.real(np.vdot(v, self.operator(psi0.factors, site, w) @ v)))


def heisenberg_densities(psi0: FiniteState, H: np.ndarray, sites: Sequence[tuple[str, str]], t: float,
                         w: ParticleWeights) -> dict:
    """<psi0| M(site, t) |psi0> for each site."""
    hp = HeisenbergPicture(H, t)
    return {tuple(s): hp.density(psi0, s, w) for s in sites}


def heisenberg_density(psi0: FiniteState, H: np.ndarray, site: tuple[str, str], t: float,
                       w: ParticleWeights) -> float:
    return heisenberg_densities(psi0, H, [site], t, w)[tuple(site)]


# --------------------------------------------------------------------------
# GRW


def _min_image(x: np.ndarray, c: float, L: float) -> np.ndarray:
    return np.mod(x - c + L / 2, L) - L / 2


def collapse_operator(spec: GridSpec, particle: int, center, sigma_c: float) -> np.ndarray:
    """Multiplier (2 pi s^2)^(-d/4) exp(-|x_i - X|^2 / (4 s^2)) on configuration cells."""
    d = spec.space_dim
    center = np.broadcast_to(np.asarray(center, dtype=float), (d,))
    r2 = 0.0
    for k, a in enumerate(spec.particle_axes(particle)):
        r2 = r2 + _min_image(spec.coordinate(a), center[k], spec.extent) ** 2
    return (2 * np.pi * sigma_c ** 2) ** (-d / 4) * np.exp(-r2 / (4 * sigma_c ** 2))


def particle_marginal(psi: GridState, particle: int) -> np.ndarray:
    """Probability of particle ``particle`` per physical cell (sums to the norm)."""
    spec = psi.spec
    axes = spec.particle_axes(particle)
    other = tuple(a for a in range(spec.ndim) if a not in axes)
    return np.sum(psi.probabilities(), axis=other)


def collapse_center_density(psi: GridState, particle: int, sigma_c: float) -> np.ndarray:
    """p(X) = ||L_X psi||^2 on physical cell centres, normalized by its sum."""
    spec = psi.spec
    d = spec.space_dim
    prob = particle_marginal(psi, particle)
    offs = _min_image(spec.axis(), spec.axis()[0], spec.extent)
    kern = np.ones((spec.points_per_axis,) * d)
    for a in range(d):
        g = np.exp(-offs ** 2 / (2 * sigma_c ** 2))
        shape = [1] * d
        shape[a] = spec.points_per_axis
        kern = kern * g.reshape(shape)
    # circular convolution: p(X_c) = sum_c' prob(c') kern(c - c')
    p = np.real(np.fft.ifftn(np.fft.fftn(prob) * np.fft.fftn(kern)))
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def sample_collapse_center(psi: GridState, particle: int, sigma_c: float,
                           rng: np.random.Generator) -> tuple[float, ...]:
    p = collapse_center_density(psi, particle, sigma_c)
    cdf = np.cumsum(p.reshape(-1))
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    j = min(j, cdf.size - 1)
    cell = np.unravel_index(j, p.shape)
    x = psi.spec.axis()
    return tuple(float(x[c]) for c in cell)


def apply_collapse(psi: GridState, particle: int, center, sigma_c: float) -> tuple[GridState, float]:
    """Return L_X psi / ||L_X psi|| and ||L_X psi||^2."""
    a = psi.amplitudes * collapse_operator(psi.spec, particle, center, sigma_c)
    n2 = _norm(a, psi.spec.cell_volume)
    if n2 < 1e-14:
        return psi, n2
    return GridState(psi.spec, a / np.sqrt(n2), psi.time), n2


def grw_collapse(psi: GridState, particle: int, sigma_c: float,
                 rng: np.random.Generator, time: float | None = None) -> tuple[GridState, CollapseEvent]:
    """One GRW hit on ``particle`` with centre drawn from ||L_X psi||^2."""
    for _ in range(100):
        X = sample_collapse_center(psi, particle, sigma_c, rng)
        out, n2 = apply_collapse(psi, particle, X, sigma_c)
        if n2 >= 1e-14:
            t = psi.time if time is None else time
            return out, CollapseEvent(t, particle, X)
    raise NumericalAbort("grw_collapse_norm", "collapse norm degenerate after 100 resamples")


def grw_evolve(psi: GridState, V: PotentialSpec, w: ParticleWeights, p: EvolutionParams,
               g: GrwParams) -> tuple[GridState, list[CollapseEvent]]:
    """Schrodinger evolution interrupted by Poisson-timed GRW collapses.

    Total collapse rate is N*lam; the hit particle is uniform over N.  With
    lam = 0 the result is bitwise identical to :func:`split_step_evolve`.
    """
    if p.dt <= 0:
        raise ValueError("GRW evolution runs forward in time only")
    spec = psi.spec
    g.check(spec)
    masses = _masses_for(spec, w)
    v = V.evaluate(spec, w)
    check_dt_guard(v, p.dt)
    stepper = _Stepper(spec, v, masses)
    rng = generator(g.seed)
    N = spec.num_particles
    t0, t_end = psi.time, psi.time + p.steps * p.dt
    a = np.array(psi.amplitudes)
    n_ref = psi.norm_sq()
    events: list[CollapseEvent] = []
    rate = N * g.lam
    next_hit = t0 + rng.exponential(1 / rate) if rate > 0 else np.inf
    step = 0
    t = t0
    while step < p.steps:
        t_next = t0 + (step + 1) * p.dt
        if next_hit >= t_next:
            a = _advance(stepper, a, p.dt, 1, p.norm_tolerance, n_ref)
        else:
            while next_hit < t_next:
                if next_hit > t:
                    a = _advance(stepper, a, next_hit - t, 1, p.norm_tolerance, n_ref)
                cur, ev = grw_collapse(GridState(spec, a, next_hit), int(rng.integers(N)),
                                       g.sigma_c, rng, time=next_hit)
                a = np.array(cur.amplitudes)
                events.append(ev)
                t = next_hit
                next_hit = t + rng.exponential(1 / rate)
            if t_next > t:
                a = _advance(stepper, a, t_next - t, 1, p.norm_tolerance, n_ref)
        t = t_next
        step += 1
    return GridState(spec, a, t_end), events
