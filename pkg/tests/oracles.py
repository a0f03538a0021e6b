"""Reference values computed by routes independent of the package code."""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np


def free_gaussian_width(sigma0: float, t: float, mass: float = 1.0) -> float:
    """Position std of a free Gaussian (hbar = 1)."""
    return sigma0 * math.sqrt(1 + (t / (2 * mass * sigma0 ** 2)) ** 2)


def binomial_window_weight(n: int, p: str, window: str) -> Fraction:
    """Exact sum of C(n,k) p^k (1-p)^(n-k) over |k/n - p| <= window, with p
    and window given as decimal strings so they are exact rationals."""
    P, W = Fraction(p), Fraction(window)
    return sum((math.comb(n, k) * P ** k * (1 - P) ** (n - k)
                for k in range(n + 1) if abs(Fraction(k, n) - P) <= W), Fraction(0))


def binomial_window_count(n: int, p: str, window: str) -> Fraction:
    P, W = Fraction(p), Fraction(window)
    return Fraction(sum(math.comb(n, k) for k in range(n + 1) if abs(Fraction(k, n) - P) <= W), 2 ** n)


def fringe_spacing(t: float, d: float, mass: float = 1.0) -> float:
    return 2 * math.pi * t / (mass * d)


def naive_matter_density(amps: np.ndarray, n: int, N: int, dx: float, weights) -> np.ndarray:
    """m on a 1D grid by looping over every configuration cell."""
    m = np.zeros(n)
    dv = dx ** N
    for idx in itertools.product(range(n), repeat=N):
        p = abs(amps[idx]) ** 2 * dv
        for i in range(N):
            m[idx[i]] += weights[i] * p
    return m / dx


def naive_partial_trace(vec: np.ndarray, dims: tuple, keep: tuple) -> np.ndarray:
    """rho_keep[a, b] = sum over traced labels of psi[a, t] conj(psi[b, t])."""
    psi = vec.reshape(dims)
    traced = [k for k in range(len(dims)) if k not in keep]
    kd = [dims[k] for k in keep]
    D = int(np.prod(kd))
    rho = np.zeros((D, D), dtype=complex)
    for a in itertools.product(*[range(d) for d in kd]):
        for b in itertools.product(*[range(d) for d in kd]):
            s = 0j
            for t in itertools.product(*[range(dims[k]) for k in traced]):
                ia = [0] * len(dims)
                ib = [0] * len(dims)
                for k, v in zip(keep, a):
                    ia[k] = v
                for k, v in zip(keep, b):
                    ib[k] = v
                for k, v in zip(traced, t):
                    ia[k] = ib[k] = v
                s += psi[tuple(ia)] * np.conj(psi[tuple(ib)])
            rho[np.ravel_multi_index(a, kd), np.ravel_multi_index(b, kd)] = s
    return rho


def taylor_unitary(H: np.ndarray, t: float, terms: int = 80) -> np.ndarray:
    """exp(-iHt) by scaling and squaring of a Taylor series."""
    s = max(0, int(math.ceil(math.log2(max(np.linalg.norm(H, 2) * abs(t), 1e-300)))) + 1)
    A = -1j * H * t / 2 ** s
    U = np.eye(len(H), dtype=complex)
    term = np.eye(len(H), dtype=complex)
    for k in range(1, terms):
        term = term @ A / k
        U = U + term
    for _ in range(s):
        U = U @ U
    return U


# EPR branch densities on Bob's three sites (z=-1, z=0, z=+1)
EPR_Z_BRANCHES = ({"z=-1": 0.5, "z=0": 0.0, "z=+1": 0.0}, {"z=-1": 0.0, "z=0": 0.0, "z=+1": 0.5})
EPR_X_BRANCHES = ({"z=-1": 0.25, "z=0": 0.0, "z=+1": 0.25},) * 2
EPR_Z_PAIRING = np.array([[0.0, 0.5], [0.5, 0.0]])
EPR_X_PAIRING = np.full((2, 2), 0.25)
