"""The matter density m(x, t) on physical space.

For a grid state the density at a physical cell is the weighted sum over
particles of that particle's marginal of |psi|^2, divided by the physical
cell volume (nearest-cell binning of the delta function).  Finite models use
discrete sites instead of cells.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .hilbert import DensityMatrix, FiniteState, GridState, ParticleWeights


@dataclass(frozen=True)
class MassDensityField:
    """Density values on a physical-space grid (``coords`` set) or on a
    discrete list of sites (``labels`` set)."""

    values: np.ndarray
    cell_volume: float
    time: float = 0.0
    coords: tuple[np.ndarray, ...] | None = None
    labels: tuple | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if (self.coords is None) == (self.labels is None):
            raise ValueError("field needs exactly one of coords or labels")
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))
            if v.shape != (len(self.labels),):
                raise ValueError("one value per label expected")
        else:
            coords = tuple(np.asarray(c, dtype=float) for c in self.coords)
            for c in coords:
                c.setflags(write=False)
            object.__setattr__(self, "coords", coords)
            if v.shape != tuple(len(c) for c in coords):
                raise ValueError("values do not match coordinate axes")

    @property
    def is_grid(self) -> bool:
        return self.coords is not None

    def integral(self) -> float:
        return float(np.sum(self.values) * self.cell_volume)

    def at(self, site) -> float:
        """Value at a discrete site (0 for sites the field does not carry)."""
        if self.labels is None:
            raise ValueError("field is not discrete")
        try:
            return float(self.values[self.labels.index(tuple(site))])
        except ValueError:
            return 0.0

    def as_dict(self) -> dict:
        if self.labels is None:
            raise ValueError("field is not discrete")
        return {lab: float(v) for lab, v in zip(self.labels, self.values)}

    def __add__(self, other: "MassDensityField") -> "MassDensityField":
        if self.is_grid != other.is_grid or self.values.shape != other.values.shape:
            raise ValueError("fields have different geometry")
        if self.is_grid:
            if not all(np.array_equal(a, b) for a, b in zip(self.coords, other.coords)):
                raise ValueError("fields have different geometry")
            return MassDensityField(self.values + other.values, self.cell_volume, self.time, coords=self.coords)
        if self.labels != other.labels:
            raise ValueError("fields have different sites")
        return MassDensityField(self.values + other.values, self.cell_volume, self.time, labels=self.labels)


@dataclass(frozen=True)
class Region:
    """Axis-aligned half-open box ``[lo, hi)`` per physical axis, or an
    explicit set of discrete sites.  Grid cells are the sites
    ``("cell", i0, i1, ...)``."""

    box: tuple[tuple[float, float], ...] | None = None
    sites: frozenset | None = None

    def __post_init__(self):
        if (self.box is None) == (self.sites is None):
            raise ValueError("region needs exactly one of box or sites")
        if self.box is not None:
            box = tuple((float(lo), float(hi)) for lo, hi in self.box)
            if any(not lo < hi for lo, hi in box):
                raise ValueError("empty box")
            object.__setattr__(self, "box", box)
        else:
            sites = frozenset(tuple(s) for s in self.sites)
            if not sites:
                raise ValueError("empty site set")
            object.__setattr__(self, "sites", sites)

    @classmethod
    def of_box(cls, *bounds) -> "Region":
        return cls(box=tuple(bounds))

    @classmethod
    def of_sites(cls, sites: Iterable) -> "Region":
        return cls(sites=frozenset(tuple(s) for s in sites))

    @classmethod
    def of_cells(cls, cells: Iterable) -> "Region":
        """Explicit grid cells given by their index tuples (or ints in 1D)."""
        return cls.of_sites(("cell", *np.atleast_1d(c).astype(int).tolist()) for c in cells)

    @classmethod
    def lab(cls, m: MassDensityField, name: str) -> "Region":
        """All sites of ``m`` that belong to the named region (e.g. "B")."""
        return cls.of_sites(s for s in m.labels if s[0] == name)


def _check_weights(n: int, w: ParticleWeights) -> None:
    if len(w) != n:
        raise ValueError(f"{len(w)} particle weights for {n} particles")


def matter_density(psi: GridState, w: ParticleWeights) -> MassDensityField:
    spec = psi.spec
    _check_weights(spec.num_particles, w)
    prob = psi.probabilities()
    acc = np.zeros((spec.points_per_axis,) * spec.space_dim)
    for i, wi in enumerate(w.values):
        axes = spec.particle_axes(i)
        other = tuple(a for a in range(spec.ndim) if a not in axes)
        acc = acc + wi * (np.sum(prob, axis=other) if other else prob)
    dv = spec.physical_cell_volume
    x = spec.axis()
    return MassDensityField(acc / dv, dv, psi.time, coords=(x,) * spec.space_dim)


def _position_factors(psi: FiniteState):
    pos = [(k, f) for k, f in enumerate(psi.factors) if f.kind == "position"]
    if not pos:
        raise ValueError("state has no position-label factors")
    return pos


def finite_density(psi: FiniteState, w: ParticleWeights) -> MassDensityField:
    """m(site) = sum_i w_i <psi| P_i(site) |psi> over discrete sites."""
    pos = _position_factors(psi)
    particles = sorted({f.particle for _, f in pos})
    if particles != list(range(len(w))):
        raise ValueError(f"position factors cover particles {particles}, weights for {len(w)}")
    prob = psi.probabilities()
    sites: list = []
    vals: dict = {}
    for k, f in pos:
        other = tuple(a for a in range(prob.ndim) if a != k)
        marg = np.sum(prob, axis=other)
        for j, label in enumerate(f.labels):
            s = f.site(label)
            if s not in vals:
                sites.append(s)
                vals[s] = 0.0
            vals[s] += w.values[f.particle] * float(marg[j])
    return MassDensityField(np.array([vals[s] for s in sites]), 1.0, psi.time, labels=sites)


def density_from_reduced(rho: DensityMatrix, w: ParticleWeights,
                         particle_offset: int = 0) -> MassDensityField:
    """m on the sites of the kept factors, from the diagonal of rho_B only.

    ``w`` holds weights for the particles located by the kept factors;
    particle ``i`` of the full model uses ``w.values[i - particle_offset]``.
    """
    diag = rho.diagonal()
    sites: list = []
    vals: dict = {}
    for k, f in enumerate(rho.basis):
        if f.kind != "position":
            continue
        other = tuple(a for a in range(diag.ndim) if a != k)
        marg = np.sum(diag, axis=other)
        for j, label in enumerate(f.labels):
            s = f.site(label)
            if s not in vals:
                sites.append(s)
                vals[s] = 0.0
            vals[s] += w.values[f.particle - particle_offset] * float(marg[j])
    if not sites:
        raise ValueError("reduced basis has no position factors")
    return MassDensityField(np.array([vals[s] for s in sites]), 1.0, 0.0, labels=sites)


def restrict(m: MassDensityField, r: Region) -> MassDensityField:
    if m.is_grid and r.sites is not None:
        shape = m.values.shape
        cells = sorted(s[1:] for s in r.sites if s[0] == "cell" and len(s) == len(shape) + 1)
        if len(cells) != len(r.sites):
            raise ValueError("grid fields are restricted by boxes or ('cell', i, ...) sites")
        if any(not 0 <= i < n for c in cells for i, n in zip(c, shape)):
            raise ValueError("cell index outside the grid")
        vals = [m.values[c] for c in cells]
        return MassDensityField(vals, m.cell_volume, m.time, labels=[("cell", *c) for c in cells])
    if m.is_grid:
        if len(r.box) != len(m.coords):
            raise ValueError("box dimension does not match field")
        keep = []
        for c, (lo, hi) in zip(m.coords, r.box):
            idx = np.nonzero((c >= lo) & (c < hi))[0]
            if idx.size == 0:
                raise ValueError("region contains no cells")
            keep.append(idx)
        vals = m.values[np.ix_(*keep)]
        return MassDensityField(vals, m.cell_volume, m.time, coords=tuple(c[k] for c, k in zip(m.coords, keep)))
    if r.sites is None:
        raise ValueError("discrete fields are restricted by site sets")
    idx = [j for j, s in enumerate(m.labels) if s in r.sites]
    if not idx:
        raise ValueError("region contains no sites of the field")
    return MassDensityField(m.values[idx], m.cell_volume, m.time, labels=[m.labels[j] for j in idx])


def max_abs_diff(a: MassDensityField, b: MassDensityField) -> float:
    """Sup-norm distance; discrete fields are compared on the union of sites."""
    if a.is_grid:
        return float(np.max(np.abs(a.values - b.values)))
    sites = list(dict.fromkeys(list(a.labels) + list(b.labels)))
    return max(abs(a.at(s) - b.at(s)) for s in sites)


def sum_fields(fields: Sequence[MassDensityField]) -> MassDensityField:
    out = fields[0]
    for f in fields[1:]:
        out = out + f
    return out
