import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import free_gaussian_width
from smworlds import branches as br
from smworlds.dynamics import EvolutionParams, PotentialSpec
from smworlds.hilbert import GridSpec, GridState, ParticleWeights, gaussian_packet, normalize
from smworlds.ontologies import (bohm_evolve, bohm_velocity, chi2_marginal, equivariance_check,
                                 history_typicality, ks_critical, label_flip_rate, sample_psi2, sip_ensemble,
                                 sip_history, sip_occupancy, wilson_interval)
from smworlds.scenarios import record_chain_state, sequence_family, splitting_packet

SPEC = GridSpec(1, 1, 256, 40.0)
FREE = PotentialSpec.zero()
M1 = ParticleWeights.mass(1.0)


def cat(weights=(0.5, 0.5)):
    a = (math.sqrt(weights[0]) * gaussian_packet(SPEC, [[-10.0]], 1.0).amplitudes
         + math.sqrt(weights[1]) * gaussian_packet(SPEC, [[10.0]], 1.0).amplitudes)
    return normalize(GridState(SPEC, a))


# --------------------------------------------------------------------------
# guidance


def test_plane_wave_velocity_is_k_over_m():
    k = 2 * math.pi * 4 / SPEC.extent
    psi = normalize(GridState(SPEC, np.exp(1j * k * SPEC.axis())))
    v, node = bohm_velocity(psi, np.array([[0.3], [-7.1], [19.9]]), ParticleWeights.mass(2.0))
    assert np.allclose(v[:, 0], k / 2.0, atol=1e-10)
    assert not node.any()


def test_real_wavefunction_gives_rest():
    psi = gaussian_packet(SPEC, [[1.0]], 1.0)
    v, _ = bohm_velocity(psi, [2.5], M1)
    assert abs(v[0]) <= 1e-12


def test_velocity_flags_nodes():
    a = np.array(gaussian_packet(SPEC, [[0.0]], 1.0, [[1.0]]).amplitudes)
    a[SPEC.axis() > 5] = 0
    v, node = bohm_velocity(GridState(SPEC, a), [[0.0], [10.0]], M1)
    assert list(node) == [False, True]
    assert v[1, 0] == 0.0


def test_velocity_outside_domain_rejected():
    psi = gaussian_packet(SPEC, [[0.0]], 1.0)
    with pytest.raises(ValueError):
        bohm_velocity(psi, [20.0], M1)


@given(q0=st.floats(-2.5, 2.5))
def test_free_gaussian_trajectories_scale_with_width(q0):
    psi = gaussian_packet(SPEC, [[0.0]], 1.0)
    t = bohm_evolve(psi, [[q0]], FREE, M1, EvolutionParams(0.01, 200), record_every=200)
    ratio = free_gaussian_width(1.0, 2.0)
    assert t.final[0, 0] == pytest.approx(q0 * ratio, abs=2e-3 * max(1.0, abs(q0)))


def test_moving_packet_trajectory_follows_group_velocity():
    # the centre moves at k/m; interpolation error shrinks as dx^2
    errs = []
    for n in (256, 512, 1024):
        spec = GridSpec(1, 1, n, 40.0)
        psi = gaussian_packet(spec, [[-5.0]], 1.0, [[2.0]])
        t = bohm_evolve(psi, [[-5.0]], FREE, M1, EvolutionParams(0.01, 200))
        assert t.configurations.shape == (201, 1, 1)
        errs.append(abs(t.final[0, 0] + 1.0))
    assert errs[-1] <= 1e-3
    assert 3.0 <= errs[0] / errs[1] <= 5.0 and 3.0 <= errs[1] / errs[2] <= 5.0


# --------------------------------------------------------------------------
# equivariance


def test_sampling_matches_born_rule():
    psi = cat((0.3, 0.7))
    q = sample_psi2(psi, 20000, seed=1)
    left = np.mean(q[:, 0] < 0)
    assert abs(left - 0.3) <= 3 * math.sqrt(0.21 / 20000)


def test_finite_sampling_frequencies():
    psi = record_chain_state(2, 0.7)
    idx = sample_psi2(psi, 20000, seed=4)
    p = np.abs(psi.vector) ** 2
    for j in np.nonzero(p > 0)[0]:
        assert abs(np.mean(idx == j) - p[j]) <= 4 * math.sqrt(p[j] * (1 - p[j]) / 20000)


def test_equivariance_passes_for_free_gaussian():
    psi = gaussian_packet(SPEC, [[0.0]], 1.0, [[0.5]])
    stats = equivariance_check(psi, FREE, M1, EvolutionParams(0.01, 100), count=3000, seed=2)
    assert stats.passed, stats.diagnostic
    assert stats.critical_value == pytest.approx(ks_critical(3000))


def test_equivariance_fails_for_a_wrong_ensemble():
    psi = gaussian_packet(SPEC, [[0.0]], 1.0, [[0.5]])
    wrong = sample_psi2(gaussian_packet(SPEC, [[0.0]], 1.3), 3000, seed=3)
    stats = equivariance_check(psi, FREE, M1, EvolutionParams(0.01, 100), count=3000, seed=2, initial=wrong)
    assert not stats.passed


def test_equivariance_reports_branch_occupancy():
    psi = cat((0.4, 0.6))
    bs = br.decompose_grid(psi, weights=M1)
    stats = equivariance_check(psi, FREE, M1, EvolutionParams(0.01, 1), count=5000, seed=6, branches=bs)
    assert abs(stats.occupancy[0] - 0.6) <= 3 * math.sqrt(0.24 / 5000)


# --------------------------------------------------------------------------
# Sip


def test_sip_marginal_chi2_per_time():
    path = [cat(), cat((0.2, 0.8))]
    cells = sip_ensemble(path, 5000, seed=8)
    for psi, c in zip(path, cells):
        _, p = chi2_marginal(psi, c)
        assert p > 1e-3


def test_chi2_detects_wrong_distribution():
    cells = sip_ensemble([cat((0.2, 0.8))], 5000, seed=8)[0]
    _, p = chi2_marginal(cat(), cells)
    assert p < 1e-6


def test_sip_labels_flip_half_the_time_on_an_even_cat():
    psi = cat()
    bs = br.decompose_grid(psi, weights=M1)
    T = 10000
    h = sip_history([psi] * T, seed=5)
    occ = sip_occupancy(h, bs)
    rate = label_flip_rate(occ.labels)
    assert abs(rate - 0.5) <= 3 * math.sqrt(0.25 / (T - 1))


def test_sip_occupancy_on_four_branch_record_state():
    psi = record_chain_state(2, 0.7)
    bs = br.decompose_projectors(psi, sequence_family(2), ParticleWeights.unit(2))
    assert sorted(round(b.norm_sq, 12) for b in bs) == [0.09, 0.21, 0.21, 0.49]
    occ = sip_occupancy(sip_history([psi] * 10000, seed=9), bs)
    assert occ.within(3.0)
    assert occ.residue == 0.0


def test_sip_occupancy_refuses_uncovered_samples():
    psi = record_chain_state(2, 0.7)
    bs = br.decompose_projectors(psi, br.MacrostateFamily.from_supports(9, [[4]], ["UU"]), ParticleWeights.unit(2))
    with pytest.raises(ValueError):
        sip_occupancy(sip_history([psi] * 200, seed=1), bs)


def test_sip_history_is_seeded():
    psi = cat()
    a = sip_history([psi] * 50, seed=3)
    b = sip_history([psi] * 50, seed=3)
    assert np.array_equal(a.cells, b.cells)
    assert not np.array_equal(a.cells, sip_history([psi] * 50, seed=4).cells)


# --------------------------------------------------------------------------
# history typicality


@given(hits=st.integers(0, 500), extra=st.integers(0, 500))
def test_wilson_interval_brackets_estimate(hits, extra):
    n = hits + extra
    if n == 0:
        return
    lo, hi = wilson_interval(hits, n)
    assert 0.0 <= lo <= hits / n <= hi <= 1.0


def test_wilson_interval_boundaries_use_exact_bound():
    lo, hi = wilson_interval(0, 100)
    assert lo == 0.0 and hi == pytest.approx(1 - 0.05 ** 0.01)
    lo, hi = wilson_interval(100, 100)
    assert hi == 1.0 and lo == pytest.approx(0.05 ** 0.01)


def test_history_typicality_of_a_recorded_outcome():
    psi = splitting_packet(SPEC, (0.7, 0.3), k0=5.0)
    est = history_typicality(lambda tr: tr.final[0, 0] > 0, psi, FREE, M1, EvolutionParams(0.01, 250),
                             count=2000, seed=12)
    assert est.low <= 0.7 <= est.high
    assert est.count == 2000


def test_history_typicality_over_independent_trials():
    psi = splitting_packet(SPEC, (0.5, 0.5), k0=5.0)
    est = history_typicality(lambda tr: bool(np.all(tr.final[0] > 0)), [psi, psi], FREE, M1,
                             EvolutionParams(0.01, 250), count=2000, seed=13)
    assert est.low <= 0.25 <= est.high
