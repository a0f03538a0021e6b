import math

import numpy as np
import pytest

from oracles import (EPR_X_BRANCHES, EPR_X_PAIRING, EPR_Z_BRANCHES, EPR_Z_PAIRING, binomial_window_count,
                     binomial_window_weight)
from smworlds import branches as br
from smworlds import scenarios as sc
from smworlds.hilbert import ParticleWeights


def test_registry_lists_every_scenario():
    assert set(sc.SCENARIOS) == {"stern_gerlach_sequence", "epr", "cat_1d", "cat_split", "two_slit",
                                 "torus_invariant", "grwm_cat"}
    assert sc.SCENARIOS["epr"].section == "§5"
    assert sc.SCENARIOS["torus_invariant"].section == "§7 fn. 9"
    for info in sc.SCENARIOS.values():
        for name, (_, default, _) in info.params.items():
            assert name in info.func.__code__.co_varnames


# --------------------------------------------------------------------------
# Stern-Gerlach


@pytest.mark.parametrize("n", [1, 3, 6, 10])
def test_explicit_record_chain_matches_binomial(n):
    res = sc.stern_gerlach_sequence(n=n, p=0.7)
    assert res.checks["count_weights_match_formula"]
    assert res.summary["sequence_branch_count"] == 2 ** n
    assert res.summary["residue"] <= 1e-12
    if n <= 6:
        assert res.checks["lineage_reliable"]


def test_sequence_weights_are_products():
    psi = sc.record_chain_state(3, 0.7)
    bs = br.decompose_projectors(psi, sc.sequence_family(3), ParticleWeights.unit(3))
    for b in bs:
        ups = b.label.count("U")
        assert b.norm_sq == pytest.approx(0.7 ** ups * 0.3 ** (3 - ups), abs=1e-13)
        assert b.weight == pytest.approx(3 * b.norm_sq, abs=1e-12)


@pytest.mark.parametrize("n", [10, 100, 137])
def test_typical_weight_matches_exact_rational(n):
    res = sc.stern_gerlach_sequence(n=n, p=0.7, window=0.1)
    exact = float(binomial_window_weight(n, "0.7", "0.1"))
    assert abs(res.summary["typical_weight"] - exact) <= 1e-10
    assert abs(res.summary["count_fraction"] - float(binomial_window_count(n, "0.7", "0.1"))) <= 1e-12


def test_weight_exceeds_count_fraction_at_default_size():
    res = sc.stern_gerlach_sequence()
    assert res.checks["weight_exceeds_count_fraction"]
    assert res.summary["typical_weight"] > 0.97
    assert res.summary["count_fraction"] < 0.05
    assert res.summary["is_typical"]


def test_large_n_bins_count_classes():
    res = sc.stern_gerlach_sequence(n=10 ** 6, p=0.7, window=0.01)
    classes = res.series["count_classes"]
    assert len(classes) <= br.BRANCH_CAP
    assert res.summary["typical_weight"] == pytest.approx(1.0, abs=1e-10)
    assert math.fsum(b.norm_sq for b in classes) == pytest.approx(1.0, abs=1e-10)
    assert not res.failed_checks()


def test_degenerate_probability():
    res = sc.stern_gerlach_sequence(n=20, p=1.0)
    assert res.summary["degenerate"] and res.summary["typical_weight"] == 1.0
    with pytest.raises(ValueError):
        sc.stern_gerlach_sequence(n=0)


def test_in_window_is_inclusive():
    assert sc.in_window(80, 100, 0.7, 0.1)
    assert not sc.in_window(81, 100, 0.7, 0.1)
    assert sc.label_in_window((60, 65), 100, 0.7, 0.1)
    assert not sc.label_in_window((55, 65), 100, 0.7, 0.1)


# --------------------------------------------------------------------------
# EPR


@pytest.mark.parametrize("setting,branches,pairing", [("z", EPR_Z_BRANCHES, EPR_Z_PAIRING),
                                                       ("x", EPR_X_BRANCHES, EPR_X_PAIRING)])
def test_epr(setting, branches, pairing):
    res = sc.epr(setting)
    assert not res.failed_checks()
    assert res.summary["no_signaling_delta"] <= 1e-12
    for got, want in zip(res.summary["branch_B_densities"], branches):
        assert all(abs(got[k] - want[k]) <= 1e-12 for k in want)
    assert np.allclose(res.summary["pairing"], pairing, atol=1e-12)
    assert res.summary["m_B"] == pytest.approx({"z=-1": 0.5, "z=0": 0.0, "z=+1": 0.5}, abs=1e-12)


def test_epr_hamiltonian_is_hermitian():
    H = sc.epr_hamiltonian(3)
    assert np.allclose(H, H.conj().T)
    assert {name for name, *_ in sc.finite_models()} >= {"stern_gerlach_3", "two_site_hopping"}


# --------------------------------------------------------------------------
# cat, split, two-slit, torus


def test_cat_1d():
    res = sc.cat_1d()
    assert not res.failed_checks(), res.failed_checks()
    assert res.summary["additivity_error"] <= 1e-10
    assert res.summary["transparency_error"] <= 1e-8
    assert res.summary["lineage_max_leakage"] <= 1e-3
    assert res.summary["initial_branch_weights"] == pytest.approx([0.5, 0.5], abs=1e-10)


@pytest.mark.slow
def test_cat_1d_spectator_is_unaffected():
    res = sc.cat_1d(with_spectator=True, n=128, samples=4)
    assert res.checks["spectator_unaffected"]
    assert not res.failed_checks()


def test_cat_1d_rejects_overlapping_packets():
    with pytest.raises(ValueError):
        sc.cat_1d(separation_sigmas=4)


def test_cat_split_weights_follow_amplitudes():
    res = sc.cat_split(weights=(0.3, 0.7))
    assert not res.failed_checks()
    assert sorted(res.summary["child_weights"]) == pytest.approx([0.3, 0.7], abs=1e-6)


def test_two_slit_fringes_and_trajectories():
    res = sc.two_slit(trajectories=200)
    assert not res.failed_checks(), res.failed_checks()
    assert res.summary["fringe_spacing"] == pytest.approx(res.summary["predicted_spacing"], rel=0.1)
    assert res.summary["axis_crossings"] == 0
    assert len(res.trajectories) == 200 * 61


def test_single_slit_has_no_fringes():
    res = sc.two_slit(single_slit=True, trajectories=0)
    assert res.checks == {"no_fringes": True}


def test_torus_full_symmetrization_is_constant():
    res = sc.torus_invariant("all")
    assert not res.failed_checks()
    assert res.summary["mean_density"] == pytest.approx(res.summary["expected_density"], rel=1e-12)


@pytest.mark.parametrize("which", ["half", "none"])
def test_torus_partial_symmetrization_is_not_constant(which):
    res = sc.torus_invariant(which)
    assert res.checks["nonconstant_density"]


def test_torus_with_momentum_still_constant():
    assert not sc.torus_invariant("all", momentum=1.0).failed_checks()


# --------------------------------------------------------------------------
# GRWm and comparisons


def test_grwm_selects_one_world():
    res = sc.grwm_cat(runs=100, seed=4)
    assert not res.failed_checks(), res.summary
    assert res.summary["single_survivor_fraction"] >= 0.99


def test_grwm_off_keeps_both_worlds():
    res = sc.grwm_cat(lam=0.0, runs=3)
    assert res.checks == {"no_collapse": True}
    assert res.summary["mean_dominant_fraction"] == pytest.approx(0.5, abs=1e-6)


def test_grwm_requires_enough_collapses():
    with pytest.raises(ValueError):
        sc.grwm_cat(lam=1.0, horizon=1.0, runs=1)


def test_compare_cat_all_ontologies_agree():
    rows = sc.compare_cat(["sm", "grwm", "bohm", "sip"], runs=60, count=1000, sip_times=2000, seed=1)
    assert {r["ontology"] for r in rows} == {"sm", "grwm", "bohm", "sip"}
    assert all(r["agree"] for r in rows), rows
    worlds = {r["ontology"]: r["worlds"] for r in rows}
    assert worlds == {"sm": 2, "grwm": 1, "bohm": 1, "sip": 1}


def test_compare_stern_gerlach_small():
    rows = sc.compare_stern_gerlach(["sm", "sip"], n=4, sip_times=4000, seed=2)
    assert all(r["agree"] for r in rows), rows
    with pytest.raises(ValueError):
        sc.compare_stern_gerlach(["grwm"])
