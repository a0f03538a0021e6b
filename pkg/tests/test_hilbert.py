import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_partial_trace
from smworlds.hilbert import (DensityMatrix, Factor, FiniteState, GridSpec, GridState, ParticleWeights,
                              apply_local, basis_state, embed_operator, gaussian_packet, inner, ket, normalize,
                              partial_trace, shift, tensor)


def random_finite(dims, seed):
    rng = np.random.default_rng(seed)
    factors = [Factor(f"f{k}", tuple(str(j) for j in range(d)), "position", particle=k, region=f"r{k}")
               for k, d in enumerate(dims)]
    a = rng.normal(size=dims) + 1j * rng.normal(size=dims)
    return normalize(FiniteState(factors, a))


# --------------------------------------------------------------------------
# grids


@pytest.mark.parametrize("n", [7, 12, 4, 100])
def test_grid_rejects_bad_sizes(n):
    with pytest.raises(ValueError):
        GridSpec(1, 1, n, 10.0)


def test_grid_rejects_bad_dimension_and_extent():
    with pytest.raises(ValueError):
        GridSpec(1, 4, 8, 10.0)
    with pytest.raises(ValueError):
        GridSpec(1, 1, 8, 0.0)
    with pytest.raises(ValueError):
        GridSpec(0, 1, 8, 1.0)


def test_grid_geometry():
    g = GridSpec(2, 3, 16, 8.0)
    assert g.ndim == 6
    assert g.shape == (16,) * 6
    assert g.dx == 0.5
    assert g.cell_volume == 0.5 ** 6
    assert g.physical_cell_volume == 0.125
    x = g.axis()
    assert np.allclose(x, -x[::-1])
    assert np.allclose(np.diff(x), 0.5)
    assert g.particle_axes(1) == (3, 4, 5)


def test_cell_of_is_periodic():
    g = GridSpec(1, 1, 8, 8.0)
    assert g.cell_of([-4.0]) == 0
    assert g.cell_of([3.99]) == 7
    assert g.cell_of([4.0]) == 0
    assert g.cell_of([-4.01]) == 7


def test_amplitude_shape_checked():
    with pytest.raises(ValueError):
        GridState(GridSpec(1, 1, 8, 1.0), np.zeros(16))


def test_grid_state_is_immutable():
    psi = gaussian_packet(GridSpec(1, 1, 32, 10.0), [[0.0]])
    with pytest.raises(ValueError):
        psi.amplitudes[0] = 1.0


@given(c=st.floats(-5, 5), sigma=st.floats(0.5, 1.5), k=st.floats(-3, 3))
def test_gaussian_packet_moments(c, sigma, k):
    spec = GridSpec(1, 1, 256, 40.0)
    psi = gaussian_packet(spec, [[c]], sigma, [[k]])
    assert psi.norm_sq() == pytest.approx(1.0, abs=1e-12)
    p = psi.probabilities()
    x = spec.axis()
    mean = np.sum(p * x)
    assert mean == pytest.approx(c, abs=1e-8)
    assert math.sqrt(np.sum(p * (x - mean) ** 2)) == pytest.approx(sigma, rel=1e-6)
    # momentum expectation from the spectrum
    phi = np.fft.fft(psi.amplitudes)
    pk = np.abs(phi) ** 2
    assert np.sum(pk * spec.wavenumbers()) / np.sum(pk) == pytest.approx(k, abs=1e-6)


def test_gaussian_wraps_smoothly_across_boundary():
    spec = GridSpec(1, 1, 128, 20.0)
    edge = gaussian_packet(spec, [[10.0]], 1.0)
    inside = gaussian_packet(spec, [[0.0]], 1.0)
    assert np.allclose(np.abs(np.roll(edge.amplitudes, 64)), np.abs(inside.amplitudes), atol=1e-12)


def test_shift_translates_all_particles():
    spec = GridSpec(2, 1, 32, 16.0)
    psi = gaussian_packet(spec, [[-2.0], [3.0]], 1.0)
    moved = shift(psi, 4)
    ref = gaussian_packet(spec, [[0.0], [5.0]], 1.0)
    assert np.allclose(moved.amplitudes, ref.amplitudes, atol=1e-12)
    assert np.array_equal(shift(psi, 32).amplitudes, psi.amplitudes)


def test_grid_inner_product_scales_with_cell_volume():
    spec = GridSpec(1, 2, 32, 10.0)
    psi = gaussian_packet(spec, [[0.0, 0.0]], 1.0)
    assert inner(psi, psi) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        inner(psi, gaussian_packet(GridSpec(1, 2, 32, 12.0), [[0.0, 0.0]], 1.0))


def test_normalize_rejects_zero():
    with pytest.raises(ValueError):
        normalize(GridState(GridSpec(1, 1, 8, 1.0), np.zeros(8)))


# --------------------------------------------------------------------------
# finite bases


def test_factor_validation():
    with pytest.raises(ValueError):
        Factor("a", ("x", "x"), "spin")
    with pytest.raises(ValueError):
        Factor("a", ("x", "y"), "position")  # needs a particle index
    f = Factor("a", ("x", "y"), "position", particle=0, region="lab")
    assert f.site("y") == ("lab", "y")


def test_duplicate_factor_names_rejected():
    f = Factor("s", ("u", "d"), "spin")
    with pytest.raises(ValueError):
        FiniteState((f, f), np.ones(4))


def test_ket_and_basis_state():
    f = (Factor("a", ("0", "1"), "spin"), Factor("b", ("0", "1"), "spin"))
    s = ket(f, [(1 / math.sqrt(2), ("0", "1")), (-1 / math.sqrt(2), ("1", "0"))])
    assert s.norm_sq() == pytest.approx(1.0)
    assert basis_state(f, ("1", "1")).vector[3] == 1.0


def test_tensor_checks_time():
    a = basis_state([Factor("a", ("0", "1"), "spin")], ["0"], time=0.0)
    b = basis_state([Factor("b", ("0", "1"), "spin")], ["1"], time=1.0)
    with pytest.raises(ValueError):
        tensor(a, b)
    c = tensor(a, basis_state([Factor("b", ("0", "1"), "spin")], ["1"]))
    assert c.dims == (2, 2)
    assert c.vector[1] == 1.0


@given(seed=st.integers(0, 10 ** 6), keep=st.sampled_from([(0,), (1,), (2,), (0, 2), (2, 0), (1, 2)]))
def test_partial_trace_matches_naive_sum(seed, keep):
    psi = random_finite((2, 3, 2), seed)
    rho = partial_trace(psi, [f"f{k}" for k in keep])
    ref = naive_partial_trace(psi.vector, psi.dims, keep)
    assert np.allclose(rho.entries, ref, atol=1e-13)
    rho.check()


@given(seed=st.integers(0, 10 ** 6))
def test_reduced_state_invariants(seed):
    psi = random_finite((3, 2, 4), seed)
    rho = partial_trace(psi, ["f2", "f0"])
    assert np.max(np.abs(rho.entries - rho.entries.conj().T)) <= 1e-12
    assert abs(rho.trace() - 1) <= 1e-10
    assert np.linalg.eigvalsh(rho.entries).min() >= -1e-10


def test_partial_trace_requires_proper_subset():
    psi = random_finite((2, 2), 0)
    with pytest.raises(ValueError):
        partial_trace(psi, ["f0", "f1"])
    with pytest.raises(ValueError):
        partial_trace(psi, [])


def test_density_matrix_check_catches_violations():
    f = (Factor("a", ("0", "1"), "spin"),)
    with pytest.raises(ValueError):
        DensityMatrix(f, np.array([[1.0, 0.0], [0.0, 0.5]])).check()
    with pytest.raises(ValueError):
        DensityMatrix(f, np.array([[0.5, 0.1], [0.0, 0.5]])).check()
    with pytest.raises(ValueError):
        DensityMatrix(f, np.array([[1.5, 0.0], [0.0, -0.5]])).check()


def test_local_operations_leave_distant_reduced_state_alone():
    psi = random_finite((2, 3, 2), 7)
    rng = np.random.default_rng(1)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6)))
    after = apply_local(psi, q, ["f0", "f1"])
    assert np.allclose(partial_trace(after, ["f2"]).entries, partial_trace(psi, ["f2"]).entries, atol=1e-14)


@given(seed=st.integers(0, 10 ** 6), on=st.sampled_from([["f0"], ["f1"], ["f2", "f0"], ["f1", "f2"]]))
def test_apply_local_matches_embedded_matrix(seed, on):
    psi = random_finite((2, 3, 2), seed)
    rng = np.random.default_rng(seed)
    d = int(np.prod([psi.dims[psi.factor_index(n)] for n in on]))
    op = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    direct = apply_local(psi, op, on).vector
    full = embed_operator(psi, op, on) @ psi.vector
    assert np.allclose(direct, full, atol=1e-12)


def test_apply_local_checks_shape():
    psi = random_finite((2, 3), 0)
    with pytest.raises(ValueError):
        apply_local(psi, np.eye(2), ["f1"])


# --------------------------------------------------------------------------
# weights


def test_weights():
    w = ParticleWeights.mass(1.0, 2.5)
    assert w.total == 3.5
    assert len(ParticleWeights.unit(4)) == 4
    assert ParticleWeights.charge(-1.0, 1.0).total == 0.0
    with pytest.raises(ValueError):
        ParticleWeights.mass(1.0, 0.0)
    with pytest.raises(ValueError):
        ParticleWeights("unit", (2.0,))
    with pytest.raises(ValueError):
        ParticleWeights("volume", (1.0,))
