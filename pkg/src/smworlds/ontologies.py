"""Single-world rivals to the matter density: Bohmian trajectories and Bell's
independent-sampling many-worlds variant ("Sip"), with ensemble statistics.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .branches import BranchSet
from .dynamics import EvolutionParams, PotentialSpec, Propagator
from .errors import NumericalAbort
from .hilbert import FiniteState, GridSpec, GridState, ParticleWeights, State
from .rng import derive_seed, ensemble_map, generator

NODE_FLOOR = 1e-12
MAX_HELD_STEPS = 10
KS_ALPHA = 1e-3


@dataclass(frozen=True, eq=False)
class BohmTrajectory:
    """Trajectories of an ensemble: ``configurations[t, j, :]`` is member
    ``j`` at ``times[t]``.  A single trajectory is an ensemble of one."""

    times: np.ndarray
    configurations: np.ndarray
    degenerate: np.ndarray
    seed: int | None = None
    final_state: GridState | None = None

    @property
    def count(self) -> int:
        return self.configurations.shape[1]

    @property
    def final(self) -> np.ndarray:
        return self.configurations[-1]

    def path(self, j: int) -> "BohmTrajectory":
        return BohmTrajectory(self.times, self.configurations[:, j:j + 1], self.degenerate[j:j + 1],
                              self.seed, self.final_state)


@dataclass(frozen=True, eq=False)
class SipHistory:
    times: np.ndarray
    configurations: np.ndarray  # (T, D) positions, or (T,) basis indices for finite states
    cells: np.ndarray           # flat cell / basis index per time
    seed: int


@dataclass(frozen=True)
class EnsembleStats:
    count: int
    histograms: tuple
    ks_statistics: tuple[float, ...]
    ks_pvalues: tuple[float, ...]
    critical_value: float
    passed: bool
    degenerate_fraction: float = 0.0
    occupancy: dict = field(default_factory=dict)
    diagnostic: str = ""


@dataclass(frozen=True)
class Occupancy:
    fractions: dict
    expected: dict
    std_errors: dict
    residue: float
    labels: np.ndarray = field(compare=False)

    def within(self, sigmas: float = 3.0) -> bool:
        return all(abs(self.fractions.get(k, 0.0) - e) <= sigmas * self.std_errors[k] + 1e-12
                   for k, e in self.expected.items())


@dataclass(frozen=True)
class TypicalityEstimate:
    estimate: float
    low: float
    high: float
    hits: int
    count: int


# --------------------------------------------------------------------------
# velocity field


def _masses(spec: GridSpec, masses) -> np.ndarray:
    m = masses.as_array() if isinstance(masses, ParticleWeights) else np.asarray(masses, dtype=float)
    m = np.broadcast_to(m, (spec.num_particles,))
    if np.any(m <= 0):
        raise ValueError("masses must be positive")
    return np.repeat(m, spec.space_dim)


def spectral_gradient(spec: GridSpec, amps: np.ndarray) -> list[np.ndarray]:
    """d psi / d x_a for every configuration axis, by FFT differentiation."""
    k = spec.wavenumbers()
    ft = np.fft.fftn(amps)
    out = []
    for a in range(spec.ndim):
        shape = [1] * spec.ndim
        shape[a] = spec.points_per_axis
        out.append(np.fft.ifftn(ft * (1j * k).reshape(shape)))
    return out


def _interp(spec: GridSpec, fields: Sequence[np.ndarray], q: np.ndarray) -> list[np.ndarray]:
    """Periodic multilinear interpolation at points ``q`` of shape (M, D)."""
    n, dx, L = spec.points_per_axis, spec.dx, spec.extent
    u = (q + L / 2) / dx - 0.5
    i0 = np.floor(u).astype(np.int64)
    f = u - i0
    out = [np.zeros(q.shape[0], dtype=complex) for _ in fields]
    for corner in itertools.product((0, 1), repeat=spec.ndim):
        c = np.array(corner)
        wgt = np.prod(np.where(c == 1, f, 1 - f), axis=1)
        idx = tuple(np.mod(i0[:, a] + c[a], n) for a in range(spec.ndim))
        for o, fld in zip(out, fields):
            o += wgt * fld[idx]
    return out


class _Field:
    """psi and its gradient on the grid, ready for point evaluation."""

    def __init__(self, spec: GridSpec, amps: np.ndarray, grads: list[np.ndarray] | None = None):
        self.spec = spec
        self.amps = amps
        self.grads = spectral_gradient(spec, amps) if grads is None else grads
        self.floor = NODE_FLOOR * float(np.max(np.abs(amps) ** 2))

    @staticmethod
    def mix(a: "_Field", b: "_Field") -> "_Field":
        return _Field(a.spec, 0.5 * (a.amps + b.amps), [0.5 * (x + y) for x, y in zip(a.grads, b.grads)])

    def velocity(self, q: np.ndarray, inv_m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        vals = _interp(self.spec, [self.amps, *self.grads], q)
        psi, grads = vals[0], vals[1:]
        dens = np.abs(psi) ** 2
        node = dens < self.floor
        safe = np.where(node, 1.0, dens)
        v = np.column_stack([np.imag(np.conj(psi) * g) / safe for g in grads]) * inv_m
        v[node] = 0.0
        return v, node


def bohm_velocity(psi: GridState, q, masses) -> tuple[np.ndarray, np.ndarray]:
    """Guidance velocity (1/m_i) Im(grad_i psi / psi) at configuration(s) ``q``.

    Returns ``(v, node)``; ``node`` flags points where |psi|^2 falls below
    1e-12 max|psi|^2, where ``v`` is set to zero and callers hold their
    previous velocity.
    """
    spec = psi.spec
    q = np.asarray(q, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != spec.ndim:
        raise ValueError(f"configuration has {q.shape[1]} coordinates, grid has {spec.ndim}")
    L = spec.extent
    if np.any(q < -L / 2) or np.any(q >= L / 2):
        raise ValueError("configuration outside the periodic domain")
    v, node = _Field(spec, np.asarray(psi.amplitudes)).velocity(q, 1 / _masses(spec, masses))
    return (v[0], node[0]) if single else (v, node)


# --------------------------------------------------------------------------
# trajectories


def bohm_evolve(psi0: GridState, Q0, V: PotentialSpec, masses: ParticleWeights,
                p: EvolutionParams, record_every: int = 1, seed: int | None = None) -> BohmTrajectory:
    """Fourth-order Runge-Kutta for the guidance equation, interleaved with
    split-step updates of psi.  Midpoint fields use the linear interpolation
    of psi between the stored steps.  ``Q0`` is (D,) or (M, D)."""
    spec = psi0.spec
    Q = np.atleast_2d(np.array(Q0, dtype=float))
    if Q.shape[1] != spec.ndim:
        raise ValueError("initial configuration has the wrong dimension")
    L = spec.extent
    if np.any(Q < -L / 2) or np.any(Q >= L / 2):
        raise ValueError("initial configuration outside the periodic domain")
    inv_m = 1 / _masses(spec, masses)
    prop = Propagator(spec, V, masses, p.dt, p.norm_tolerance)
    dt = p.dt
    amps = np.array(psi0.amplitudes)
    F0 = _Field(spec, amps)
    held_v = np.zeros_like(Q)
    held_for = np.zeros(Q.shape[0], dtype=np.int64)
    degenerate = np.zeros(Q.shape[0], dtype=bool)
    times = [psi0.time]
    configs = [Q.copy()]
    n_ref = psi0.norm_sq()
    dv = spec.cell_volume

    def vel(F, q):
        v, node = F.velocity(spec.wrap(q), inv_m)
        v[node] = held_v[node]
        return v, node

    for s in range(p.steps):
        new = prop.step_array(amps)
        nn = float(np.sum(np.abs(new) ** 2) * dv)
        if not np.isfinite(nn) or abs(nn - n_ref) > max(p.norm_tolerance * (s + 1), 1e-12) * n_ref:
            raise NumericalAbort("norm_conservation", f"norm drift during Bohm evolution at step {s + 1}")
        F1 = _Field(spec, new)
        Fm = _Field.mix(F0, F1)
        k1, node = vel(F0, Q)
        k2, _ = vel(Fm, Q + 0.5 * dt * k1)
        k3, _ = vel(Fm, Q + 0.5 * dt * k2)
        k4, _ = vel(F1, Q + dt * k3)
        Q = spec.wrap(Q + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4))
        held_for = np.where(node, held_for + 1, 0)
        degenerate |= held_for > MAX_HELD_STEPS
        held_v = np.where(node[:, None], held_v, k1)
        amps, F0 = new, F1
        if (s + 1) % record_every == 0 or s + 1 == p.steps:
            times.append(psi0.time + (s + 1) * dt)
            configs.append(Q.copy())
    final = GridState(spec, amps, psi0.time + p.steps * dt)
    return BohmTrajectory(np.array(times), np.array(configs), degenerate, seed, final)


# --------------------------------------------------------------------------
# |psi|^2 sampling


def sample_psi2(psi: State, count: int, seed: int) -> np.ndarray:
    """Draw configurations from |psi|^2: inverse CDF over cells, then a
    uniform position inside the chosen cell.  Finite states give basis
    indices."""
    rng = generator(seed)
    prob = psi.probabilities().reshape(-1)
    cdf = np.cumsum(prob)
    idx = np.searchsorted(cdf, rng.random(count) * cdf[-1], side="right")
    idx = np.minimum(idx, prob.size - 1)
    if isinstance(psi, FiniteState):
        return idx
    spec = psi.spec
    cells = np.column_stack(np.unravel_index(idx, spec.shape))
    jitter = rng.random((count, spec.ndim))
    return -spec.extent / 2 + (cells + jitter) * spec.dx


def _flat_cells(spec: GridSpec, q: np.ndarray) -> np.ndarray:
    cells = spec.cell_of(q)
    return np.ravel_multi_index(tuple(cells.T), spec.shape)


def marginal_cdf(psi: GridState, axis: int) -> Callable[[np.ndarray], np.ndarray]:
    """Piecewise-linear CDF of the |psi|^2 marginal along one axis."""
    spec = psi.spec
    other = tuple(a for a in range(spec.ndim) if a != axis)
    p = np.sum(psi.probabilities(), axis=other) if other else psi.probabilities()
    p = p / p.sum()
    edges = -spec.extent / 2 + np.arange(spec.points_per_axis + 1) * spec.dx
    c = np.concatenate([[0.0], np.cumsum(p)])
    return lambda x: np.interp(x, edges, c)


def ks_against(psi: GridState, samples: np.ndarray) -> tuple[list[float], list[float]]:
    st, pv = [], []
    for a in range(psi.spec.ndim):
        r = stats.kstest(samples[:, a], marginal_cdf(psi, a))
        st.append(float(r.statistic))
        pv.append(float(r.pvalue))
    return st, pv


def ks_critical(count: int, alpha: float = KS_ALPHA) -> float:
    return float(stats.kstwo.ppf(1 - alpha, count))


def equivariance_check(psi0: GridState, V: PotentialSpec, masses: ParticleWeights, p: EvolutionParams,
                       count: int, seed: int, initial: np.ndarray | None = None,
                       branches: BranchSet | None = None, bins: int = 64) -> EnsembleStats:
    """Evolve an ensemble drawn from |psi0|^2 (or ``initial``) and test the
    end positions against the |psi_T|^2 marginals, axis by axis."""
    Q0 = sample_psi2(psi0, count, seed) if initial is None else np.asarray(initial, dtype=float)
    if p.steps == 0:
        final, QT, degenerate = psi0, Q0, np.zeros(len(Q0), dtype=bool)
    else:
        traj = bohm_evolve(psi0, Q0, V, masses, p, record_every=p.steps, seed=seed)
        final, QT, degenerate = traj.final_state, traj.final, traj.degenerate
    st, pv = ks_against(final, QT)
    crit = ks_critical(len(QT))
    L = psi0.spec.extent
    hists = tuple(np.histogram(QT[:, a], bins=bins, range=(-L / 2, L / 2))[0] for a in range(QT.shape[1]))
    deg = float(np.mean(degenerate))
    occ = {}
    if branches is not None:
        ids = branches.locate(_flat_cells(psi0.spec, QT))
        for b in branches:
            occ[b.id] = float(np.mean(ids == b.id))
    diag = ""
    passed = all(s < crit for s in st)
    if deg > 0.01:
        passed = False
        diag = f"{deg:.1%} of trajectories degenerate (held velocity > {MAX_HELD_STEPS} steps)"
    elif not passed:
        diag = f"KS statistic {max(st):.4f} above critical value {crit:.4f}"
    return EnsembleStats(len(QT), hists, tuple(st), tuple(pv), crit, passed, deg, occ, diag)


# --------------------------------------------------------------------------
# Sip


def sip_history(path: Sequence[State], seed: int, times: Sequence[float] | None = None) -> SipHistory:
    """One independent |psi_t|^2 draw per time, each from its own sub-seed."""
    path = list(path)
    draws, cells = [], []
    for j, psi in enumerate(path):
        q = sample_psi2(psi, 1, derive_seed(seed, j))
        if isinstance(psi, FiniteState):
            draws.append(int(q[0]))
            cells.append(int(q[0]))
        else:
            draws.append(q[0])
            cells.append(int(_flat_cells(psi.spec, q)[0]))
    t = np.array([psi.time for psi in path] if times is None else times, dtype=float)
    return SipHistory(t, np.array(draws), np.array(cells, dtype=np.int64), seed)


def sip_ensemble(path: Sequence[State], count: int, seed: int) -> np.ndarray:
    """``count`` independent Sip histories along ``path`` as flat cell (or
    basis) indices, shape (times, count)."""
    out = []
    for j, psi in enumerate(path):
        q = sample_psi2(psi, count, derive_seed(seed, j))
        out.append(q if isinstance(psi, FiniteState) else _flat_cells(psi.spec, q))
    return np.array(out, dtype=np.int64)


def chi2_marginal(psi: State, cells: np.ndarray, min_expected: float = 5.0) -> tuple[float, float]:
    """Pearson chi^2 of sampled cells against |psi|^2.  Consecutive cells are
    pooled until every bin expects at least ``min_expected`` counts."""
    prob = psi.probabilities().reshape(-1)
    prob = prob / prob.sum()
    n = len(cells)
    obs = np.bincount(np.asarray(cells), minlength=prob.size).astype(float)
    edges = [0]
    acc = 0.0
    for i, pi in enumerate(prob):
        acc += pi * n
        if acc >= min_expected:
            edges.append(i + 1)
            acc = 0.0
    if edges[-1] != prob.size:
        if len(edges) > 1:
            edges[-1] = prob.size
        else:
            edges.append(prob.size)
    o = np.add.reduceat(obs, edges[:-1])
    e = np.add.reduceat(prob * n, edges[:-1])
    if len(o) < 2:
        return 0.0, 1.0
    r = stats.chisquare(o, e * o.sum() / e.sum())
    return float(r.statistic), float(r.pvalue)


def label_flip_rate(labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size < 2:
        return 0.0
    return float(np.mean(labels[1:] != labels[:-1]))


def sip_occupancy(h: SipHistory, bs: BranchSet | Sequence[BranchSet]) -> Occupancy:
    """Fraction of times the sampled configuration sits in each branch."""
    sets = [bs] * len(h.cells) if isinstance(bs, BranchSet) else list(bs)
    if len(sets) != len(h.cells):
        raise ValueError("one branch set per history time expected")
    labels = np.array([s.locate(c) for s, c in zip(sets, h.cells)], dtype=np.int64)
    T = len(labels)
    residue = float(np.mean(labels < 0))
    if residue >= 0.01:
        raise ValueError(f"{residue:.2%} of samples fall outside every branch (limit 1%)")
    ref = sets[0]
    tot = sum(b.norm_sq for b in ref)
    fractions = {b.id: float(np.mean(labels == b.id)) for b in ref}
    expected = {b.id: b.norm_sq / tot for b in ref}
    se = {k: math.sqrt(max(e * (1 - e), 0.0) / T) for k, e in expected.items()}
    return Occupancy(fractions, expected, se, residue, labels)


# --------------------------------------------------------------------------
# history typicality


def wilson_interval(hits: int, count: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval; at 0 or ``count`` hits the open side uses the
    exact one-sided bound (the "rule of three")."""
    alpha = 1 - confidence
    if hits == count:
        return alpha ** (1 / count), 1.0
    if hits == 0:
        return 0.0, 1 - alpha ** (1 / count)
    ci = stats.binomtest(hits, count).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


def history_typicality(prop: Callable[[BohmTrajectory], bool], psi0: GridState | Sequence[GridState],
                       V: PotentialSpec, masses: ParticleWeights, p: EvolutionParams, count: int,
                       seed: int, record_every: int | None = None, threads: int | None = None
                       ) -> TypicalityEstimate:
    """|psi0|^2-measure of the initial configurations whose Bohmian history
    has ``prop``, by Monte Carlo.

    A sequence of grid states stands for their (non-interacting) product;
    each factor is then sampled and evolved on its own grid and the
    trajectories are concatenated coordinate-wise.
    """
    factors = [psi0] if isinstance(psi0, GridState) else list(psi0)
    every = p.steps if record_every is None else record_every

    def run(k):
        psi = factors[k]
        s = derive_seed(seed, k)
        return bohm_evolve(psi, sample_psi2(psi, count, s), V, masses, p, record_every=max(every, 1), seed=s)

    parts = ensemble_map(run, range(len(factors)), threads)
    configs = np.concatenate([t.configurations for t in parts], axis=2)
    degenerate = np.any([t.degenerate for t in parts], axis=0)
    ens = BohmTrajectory(parts[0].times, configs, degenerate, seed)
    hits = sum(bool(prop(ens.path(j))) for j in range(count))
    lo, hi = wilson_interval(hits, count)
    return TypicalityEstimate(hits / count, lo, hi, hits, count)
