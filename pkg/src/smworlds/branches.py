"""Worlds as branches of the wave function.

A branch is a component psi_l of psi living on a support (a set of grid
cells, or the range of a projector) disjoint from the other branches.  Its
weight is mu_l = ||psi_l||^2 * sum_i w_i, the integral of its density m_l.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .density import MassDensityField, finite_density, matter_density
from .errors import BranchExplosion
from .hilbert import FiniteState, GridState, ParticleWeights, State, inner

BRANCH_CAP = 4096
DROP_BELOW = 1e-14


def default_weights(psi: State) -> ParticleWeights:
    if isinstance(psi, GridState):
        return ParticleWeights.unit(psi.spec.num_particles)
    return ParticleWeights.unit(max(psi.num_particles, 1))


def _cell_volume(psi: State) -> float:
    return psi.spec.cell_volume if isinstance(psi, GridState) else 1.0


@dataclass(frozen=True, eq=False)
class Branch:
    """One world.  The component state is materialized lazily from the
    source state and the branch's support or projector matrix; analytic
    branches (weights known in closed form) carry neither."""

    id: int
    weight: float
    norm_sq: float
    label: Any = None
    support: np.ndarray | None = None
    matrix: np.ndarray | None = None
    source: State | None = None
    weights: ParticleWeights | None = None
    parent_id: int | None = None

    @property
    def support_size(self) -> int:
        if self.support is not None:
            return int(self.support.size)
        if self.matrix is not None:
            return int(np.count_nonzero(np.abs(self.component_state.vector) > 0))
        return 0

    @cached_property
    def component_state(self) -> State | None:
        if self.source is None:
            return None
        flat = self.source.amplitudes.reshape(-1)
        if self.support is not None:
            out = np.zeros_like(flat)
            out[self.support] = flat[self.support]
        else:
            out = self.matrix @ flat
        return self.source.with_amplitudes(out.reshape(self.source.amplitudes.shape))

    @cached_property
    def density(self) -> MassDensityField | None:
        psi = self.component_state
        if psi is None:
            return None
        w = self.weights or default_weights(psi)
        return matter_density(psi, w) if isinstance(psi, GridState) else finite_density(psi, w)


@dataclass(frozen=True, eq=False)
class BranchSet:
    branches: tuple[Branch, ...]
    source: State | None
    method: str
    time: float = 0.0
    weights: ParticleWeights | None = None
    residue: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.branches)

    def __iter__(self):
        return iter(self.branches)

    def __getitem__(self, k) -> Branch:
        return self.branches[k]

    @property
    def total_weight(self) -> float:
        return math.fsum(b.weight for b in self.branches)

    def weight_vector(self) -> np.ndarray:
        return np.array([b.weight for b in self.branches])

    def by_id(self, bid: int) -> Branch:
        for b in self.branches:
            if b.id == bid:
                return b
        raise KeyError(bid)

    def by_label(self, label) -> Branch:
        for b in self.branches:
            if b.label == label:
                return b
        raise KeyError(label)

    def branch_map(self) -> np.ndarray:
        """Branch id per flat basis index / cell (-1 where no branch)."""
        cached = self.__dict__.get("_map")
        if cached is None:
            if self.source is None:
                raise ValueError("analytic branch sets have no supports")
            cached = np.full(self.source.amplitudes.size, -1, dtype=np.int64)
            for b in self.branches:
                if b.support is None:
                    raise ValueError("branch map needs support-based branches")
                cached[b.support] = b.id
            cached.setflags(write=False)
            object.__setattr__(self, "_map", cached)
        return cached

    def locate(self, flat_index) -> np.ndarray:
        """Branch ids for flat indices (-1 where no branch holds the index)."""
        return self.branch_map()[np.asarray(flat_index, dtype=np.int64)]

    def reconstruct(self) -> State:
        """Sum of the branch components."""
        parts = [b.component_state for b in self.branches]
        total = sum(p.amplitudes for p in parts)
        return parts[0].with_amplitudes(total)


@dataclass(frozen=True)
class MacrostateFamily:
    """Mutually orthogonal projectors with labels.

    Diagonal projectors are given by flat basis-index ``supports``; general
    ones by dense ``matrices``.  ``acts_on`` names the factors the projectors
    read, when known (needed for :func:`pairing`).
    """

    dim: int
    labels: tuple
    supports: tuple[np.ndarray, ...] | None = None
    matrices: tuple[np.ndarray, ...] | None = None
    acts_on: frozenset | None = None

    def __post_init__(self):
        if (self.supports is None) == (self.matrices is None):
            raise ValueError("family needs exactly one of supports or matrices")
        n = len(self.supports if self.supports is not None else self.matrices)
        if len(self.labels) != n:
            raise ValueError("one label per projector expected")
        if self.supports is not None:
            sups = tuple(np.unique(np.asarray(s, dtype=np.int64)) for s in self.supports)
            allidx = np.concatenate(sups) if sups else np.array([], dtype=np.int64)
            if allidx.size and (allidx.min() < 0 or allidx.max() >= self.dim):
                raise ValueError("support index out of range")
            if np.unique(allidx).size != allidx.size:
                raise ValueError("projector family is not orthogonal (supports overlap)")
            object.__setattr__(self, "supports", sups)
        else:
            mats = tuple(np.asarray(m, dtype=complex) for m in self.matrices)
            for k, P in enumerate(mats):
                if P.shape != (self.dim, self.dim):
                    raise ValueError("projector has the wrong shape")
                for j, Q in enumerate(mats):
                    target = P if j == k else 0
                    if np.max(np.abs(P @ Q - target)) > 1e-12:
                        raise ValueError("projector family is not orthogonal")
            object.__setattr__(self, "matrices", mats)
        object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def complete(self) -> bool:
        if self.supports is not None:
            return sum(s.size for s in self.supports) == self.dim
        return bool(np.max(np.abs(sum(self.matrices) - np.eye(self.dim))) <= 1e-12)

    @classmethod
    def from_supports(cls, dim, supports, labels=None, acts_on=None) -> "MacrostateFamily":
        supports = list(supports)
        labels = tuple(range(len(supports))) if labels is None else tuple(labels)
        return cls(dim, labels, supports=tuple(supports),
                   acts_on=None if acts_on is None else frozenset(acts_on))

    @classmethod
    def from_matrices(cls, matrices, labels=None, acts_on=None) -> "MacrostateFamily":
        matrices = list(matrices)
        labels = tuple(range(len(matrices))) if labels is None else tuple(labels)
        return cls(matrices[0].shape[0], labels, matrices=tuple(matrices),
                   acts_on=None if acts_on is None else frozenset(acts_on))

    @classmethod
    def identity(cls, dim: int) -> "MacrostateFamily":
        return cls.from_supports(dim, [np.arange(dim)], labels=("all",))

    @classmethod
    def on_factors(cls, factors, names: Sequence[str],
                   classify: Callable[[tuple[str, ...]], Any]) -> "MacrostateFamily":
        """Diagonal family reading the named factors.

        ``classify`` maps the labels of the named factors to a macrostate
        label, or None to leave that basis sector out of every projector.
        """
        factors = tuple(factors)
        dims = [f.dim for f in factors]
        pos = [next(k for k, f in enumerate(factors) if f.name == n) for n in names]
        groups: dict = {}
        for combo in np.ndindex(*[dims[k] for k in pos]):
            key = classify(tuple(factors[k].labels[j] for k, j in zip(pos, combo)))
            if key is not None:
                groups.setdefault(key, []).append(combo)
        grids = np.indices(dims).reshape(len(dims), -1)
        flat = np.arange(int(np.prod(dims)))
        supports, labels = [], []
        for key, combos in groups.items():
            mask = np.zeros(flat.size, dtype=bool)
            for combo in combos:
                sel = np.ones(flat.size, dtype=bool)
                for k, j in zip(pos, combo):
                    sel &= grids[k] == j
                mask |= sel
            supports.append(flat[mask])
            labels.append(key)
        return cls.from_supports(int(np.prod(dims)), supports, labels, acts_on=names)

    def projector_matrix(self, k: int) -> np.ndarray:
        if self.matrices is not None:
            return self.matrices[k]
        P = np.zeros((self.dim, self.dim), dtype=complex)
        P[self.supports[k], self.supports[k]] = 1.0
        return P


@dataclass(frozen=True, eq=False)
class BranchLineage:
    sets: tuple[BranchSet, ...]
    parents: tuple[dict, ...]          # per step: child id -> parent id
    overlaps: tuple[np.ndarray, ...]   # per step: |<child, U parent>|^2, rows = children
    leakage: tuple[float, ...]
    bound: float = 1e-3

    @property
    def reliable(self) -> bool:
        return all(l <= self.bound for l in self.leakage)

    def children(self, step: int, parent_id: int) -> list[int]:
        return sorted(c for c, p in self.parents[step].items() if p == parent_id)

    def weight_defects(self, step: int) -> dict[int, float]:
        """Per parent: mu_parent - sum of children's mu."""
        pset, cset = self.sets[step], self.sets[step + 1]
        out = {}
        for b in pset:
            kids = self.children(step, b.id)
            out[b.id] = b.weight - math.fsum(cset.by_id(c).weight for c in kids)
        return out

    def leaves(self) -> BranchSet:
        return self.sets[-1]

    def depth(self) -> int:
        return len(self.parents)


# --------------------------------------------------------------------------
# grid decomposition


def _components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Face-connected components with periodic wrap, ids ordered by lowest
    flat cell index (1-based, 0 = background)."""
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    lab, n = ndimage.label(mask, structure=structure)
    if n == 0:
        return lab, 0
    parent = np.arange(n + 1)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for ax in range(mask.ndim):
        first = np.take(lab, 0, axis=ax)
        last = np.take(lab, -1, axis=ax)
        both = (first > 0) & (last > 0)
        for a, b in zip(first[both].tolist(), last[both].tolist()):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(a) for a in range(n + 1)])
    merged = roots[lab]
    uniq, first = np.unique(merged.reshape(-1), return_index=True)
    keep = uniq > 0
    order = uniq[keep][np.argsort(first[keep])].tolist()
    remap = np.zeros(n + 1, dtype=np.int64)
    for new, old in enumerate(order, start=1):
        remap[old] = new
    return remap[merged], len(order)


def _count_components(p: np.ndarray, eps_rel: float) -> int:
    return _components(p >= eps_rel * p.max())[1]


def decompose_grid(psi: GridState, eps_rel: float = 1e-6, weights: ParticleWeights | None = None,
                   sensitivity: bool = True, cap: int = BRANCH_CAP) -> BranchSet:
    """Branches = connected regions of {|psi|^2 >= eps_rel max|psi|^2}; every
    other cell joins the component of its nearest super-threshold cell."""
    if not 0 < eps_rel < 1:
        raise ValueError("eps_rel must lie in (0, 1)")
    w = weights or default_weights(psi)
    p = np.abs(psi.amplitudes) ** 2
    pmax = float(p.max())
    if pmax < 1e-300:
        raise ValueError("state vanishes everywhere; nothing to decompose")
    comp, ncomp = _components(p >= eps_rel * pmax)
    if ncomp > cap:
        raise BranchExplosion(ncomp, cap)
    n = psi.spec.points_per_axis
    flat_comp = comp.reshape(-1)
    sub = np.nonzero(flat_comp == 0)[0]
    if sub.size and ncomp > 1:
        sup = np.nonzero(flat_comp > 0)[0]
        sup_pts = np.column_stack(np.unravel_index(sup, comp.shape)).astype(float)
        sub_pts = np.column_stack(np.unravel_index(sub, comp.shape)).astype(float)
        tree = cKDTree(sup_pts, boxsize=n)
        k = min(8, sup.size)
        dist, idx = tree.query(sub_pts, k=k)
        dist = dist.reshape(sub.size, k)
        idx = idx.reshape(sub.size, k)
        cand = flat_comp[sup[idx]]
        tied = dist <= dist[:, :1] * (1 + 1e-12) + 1e-12
        cand = np.where(tied, cand, np.iinfo(np.int64).max)
        flat_comp = flat_comp.copy()
        flat_comp[sub] = cand.min(axis=1)
    elif sub.size:
        flat_comp = flat_comp.copy()
        flat_comp[sub] = 1

    dv = psi.spec.cell_volume
    flat_p = p.reshape(-1)
    order = np.argsort(flat_comp, kind="stable")
    bounds = np.searchsorted(flat_comp[order], np.arange(1, ncomp + 2))
    raw = []
    for c in range(ncomp):
        support = np.sort(order[bounds[c]:bounds[c + 1]])
        n2 = math.fsum(flat_p[support].tolist()) * dv
        raw.append((n2, int(support[0]), support))
    raw.sort(key=lambda r: (-r[0], r[1]))
    branches = tuple(
        Branch(id=k, weight=n2 * w.total, norm_sq=n2, label=k, support=support, source=psi, weights=w)
        for k, (n2, _, support) in enumerate(raw))
    meta = {"eps_rel": eps_rel}
    if sensitivity:
        counts = {eps_rel / 10: _count_components(p, eps_rel / 10), eps_rel: ncomp,
                  eps_rel * 10: _count_components(p, min(eps_rel * 10, 0.999))}
        meta["sensitivity"] = counts
        meta["stable"] = len(set(counts.values())) == 1
    return BranchSet(branches, psi, "threshold", psi.time, w, 0.0, meta)


# --------------------------------------------------------------------------
# projector decomposition


def _projected_norms(psi: State, fam: MacrostateFamily) -> list[float]:
    flat = np.ascontiguousarray(psi.amplitudes).reshape(-1)
    dv = _cell_volume(psi)
    if fam.supports is not None:
        p = np.abs(flat) ** 2
        return [float(np.sum(p[s])) * dv for s in fam.supports]
    return [float(np.sum(np.abs(P @ flat) ** 2)) * dv for P in fam.matrices]


def decompose_projectors(psi: State, fam: MacrostateFamily, weights: ParticleWeights | None = None,
                         cap: int = BRANCH_CAP) -> BranchSet:
    if fam.dim != psi.amplitudes.size:
        raise ValueError(f"family dimension {fam.dim} != state dimension {psi.amplitudes.size}")
    w = weights or default_weights(psi)
    branches = []
    kept = 0.0
    for k, n2 in enumerate(_projected_norms(psi, fam)):
        if n2 * w.total < DROP_BELOW:
            continue
        kept += n2
        branches.append(Branch(
            id=len(branches), weight=n2 * w.total, norm_sq=n2, label=fam.labels[k],
            support=fam.supports[k] if fam.supports is not None else None,
            matrix=fam.matrices[k] if fam.matrices is not None else None,
            source=psi, weights=w))
        if len(branches) > cap:
            raise BranchExplosion(len(branches), cap)
    residue = max(psi.norm_sq() - kept, 0.0) * w.total
    return BranchSet(tuple(branches), psi, "projectors", psi.time, w, residue,
                     {"complete": fam.complete})


def analytic_branch_set(labels: Sequence, norms_sq: Sequence[float], weights: ParticleWeights,
                        time: float = 0.0, method: str = "analytic") -> BranchSet:
    """Branches known only through their weights (no component states)."""
    bs = tuple(Branch(id=k, weight=float(n2) * weights.total, norm_sq=float(n2), label=lab, weights=weights)
               for k, (lab, n2) in enumerate(zip(labels, norms_sq)))
    return BranchSet(bs, None, method, time, weights)


# --------------------------------------------------------------------------
# typicality


def weight_of(predicate: Callable[[Branch], bool], bs: BranchSet) -> float:
    """Weight fraction of the branches satisfying ``predicate``."""
    if len(bs) == 0:
        raise ValueError("empty branch set")
    hit = [b.weight for b in bs if predicate(b)]
    if len(hit) == len(bs):
        return 1.0
    total = math.fsum(b.weight for b in bs)
    return math.fsum(hit) / total


def is_typical(predicate: Callable[[Branch], bool], bs: BranchSet, eps: float) -> bool:
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    return weight_of(predicate, bs) >= 1 - eps


# --------------------------------------------------------------------------
# refinement


def refine(bs: BranchSet, finer: MacrostateFamily) -> BranchSet:
    """Split every branch along a finer family; children keep ``parent_id``."""
    children = []
    residue = bs.residue
    w = bs.weights or ParticleWeights.unit(1)
    for b in bs:
        psi = b.component_state
        if psi is None:
            raise ValueError("analytic branches cannot be refined")
        if finer.dim != psi.amplitudes.size:
            raise ValueError("family dimension does not match the state")
        dv = _cell_volume(psi)
        flat = psi.amplitudes.reshape(-1)
        pieces = []
        if b.support is not None and finer.supports is not None:
            covered = 0
            for k, s in enumerate(finer.supports):
                inter = np.intersect1d(b.support, s, assume_unique=True)
                covered += inter.size
                if inter.size:
                    pieces.append((k, inter, None))
            if covered != b.support.size:
                raise ValueError(f"family does not refine branch {b.id}: support not covered")
        else:
            P = np.zeros((finer.dim, finer.dim), dtype=complex)
            if b.support is not None:
                P[b.support, b.support] = 1.0
            else:
                P = b.matrix
            acc = np.zeros_like(P)
            for k in range(len(finer)):
                Q = finer.projector_matrix(k)
                if np.max(np.abs(P @ Q - Q @ P)) > 1e-12:
                    raise ValueError(f"family does not refine branch {b.id}: projectors do not commute")
                PQ = Q @ P
                acc = acc + PQ
                if np.any(np.abs(PQ) > 0):
                    pieces.append((k, None, PQ))
            if np.max(np.abs(acc - P)) > 1e-12:
                raise ValueError(f"family does not refine branch {b.id}: not covered")
        for k, sup, mat in pieces:
            if sup is not None:
                n2 = math.fsum((np.abs(flat[sup]) ** 2).tolist()) * dv
            else:
                n2 = float(np.sum(np.abs(mat @ bs.source.amplitudes.reshape(-1)) ** 2)) * dv
            if n2 * w.total < DROP_BELOW:
                residue += n2 * w.total
                continue
            children.append(Branch(
                id=len(children), weight=n2 * w.total, norm_sq=n2, label=(b.label, finer.labels[k]),
                support=sup, matrix=mat, source=bs.source, weights=bs.weights, parent_id=b.id))
    if len(children) > BRANCH_CAP:
        raise BranchExplosion(len(children), BRANCH_CAP)
    return BranchSet(tuple(children), bs.source, "refined", bs.time, bs.weights, residue,
                     dict(bs.meta, refined_from=bs.method))


# --------------------------------------------------------------------------
# lineage


def track(sets: Sequence[BranchSet], propagate: Callable[[State, float, float], State],
          leakage_bound: float = 1e-3) -> BranchLineage:
    """Link each branch at t_{k+1} to the branch at t_k whose evolved
    component overlaps it most.

    ``propagate(state, t_from, t_to)`` is the evolution between consecutive
    set times.  Leakage per step is the fraction of child norm not carried by
    the matched parent; steps above ``leakage_bound`` make the lineage
    unreliable but do not abort.
    """
    sets = tuple(sets)
    parents_per_step, overlaps_per_step, leak = [], [], []
    for k in range(len(sets) - 1):
        pset, cset = sets[k], sets[k + 1]
        evolved = [propagate(b.component_state, pset.time, cset.time) for b in pset]
        kids = [b.component_state for b in cset]
        O = np.array([[abs(inner(c, u)) ** 2 for u in evolved] for c in kids])
        pw = np.array([b.weight for b in pset])
        pid = np.array([b.id for b in pset])
        links = {}
        carried = 0.0
        for r, child in enumerate(cset):
            row = O[r]
            best = row.max()
            cands = np.nonzero(np.isclose(row, best, rtol=1e-12, atol=0.0))[0]
            j = min(cands, key=lambda c: (-pw[c], pid[c]))
            links[child.id] = int(pid[j])
            if child.norm_sq > 0:
                carried += row[j] / child.norm_sq
        total = math.fsum(b.norm_sq for b in cset)
        parents_per_step.append(links)
        overlaps_per_step.append(O)
        leak.append(float(max(1.0 - carried / total, 0.0)) if total > 0 else 1.0)
    return BranchLineage(sets, tuple(parents_per_step), tuple(overlaps_per_step), tuple(leak), leakage_bound)


# --------------------------------------------------------------------------
# pairing


@dataclass(frozen=True)
class Pairing:
    matrix: np.ndarray
    row_labels: tuple
    col_labels: tuple

    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    def col_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=0)


def pairing(psi: FiniteState, side_a: MacrostateFamily, side_b: MacrostateFamily) -> Pairing:
    """Joint weights ||P_a P_b psi||^2 of the worlds on two sides."""
    if side_a.acts_on is None or side_b.acts_on is None:
        raise ValueError("pairing needs families that declare the factors they act on")
    if side_a.acts_on & side_b.acts_on:
        raise ValueError(f"families overlap on factors {sorted(side_a.acts_on & side_b.acts_on)}")
    v = psi.vector
    M = np.zeros((len(side_a), len(side_b)))
    for a in range(len(side_a)):
        for b in range(len(side_b)):
            if side_a.supports is not None and side_b.supports is not None:
                s = np.intersect1d(side_a.supports[a], side_b.supports[b], assume_unique=True)
                M[a, b] = float(np.sum(np.abs(v[s]) ** 2))
            else:
                u = side_a.projector_matrix(a) @ (side_b.projector_matrix(b) @ v)
                M[a, b] = float(np.sum(np.abs(u) ** 2))
    return Pairing(M, side_a.labels, side_b.labels)
