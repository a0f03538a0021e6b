import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smworlds import cli
from smworlds.density import MassDensityField
from smworlds.errors import NumericalAbort
from smworlds.export import format_cell, read_csv, read_smf, sha256_file, write_csv, write_smf
from smworlds.scenarios import ScenarioResult


def write_cfg(path, **cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def run(tmp_path, cfg, *extra, name="out"):
    out = tmp_path / name
    code = cli.main(["run", write_cfg(tmp_path / f"{name}.json", **cfg), "--out", str(out), *extra])
    return code, out


# --------------------------------------------------------------------------
# list


def test_list_text(capsys):
    assert cli.main(["list"]) == 0
    text = capsys.readouterr().out
    assert "epr  [§5]" in text
    assert "torus_invariant  [§7 fn. 9]" in text


def test_list_json(capsys):
    assert cli.main(["list", "--json"]) == 0
    cat = json.loads(capsys.readouterr().out)
    ids = {e["id"]: e for e in cat}
    assert ids["stern_gerlach_sequence"]["parameters"]["n"]["default"] == 100
    assert ids["cat_1d"]["compare"] and not ids["epr"]["compare"]


# --------------------------------------------------------------------------
# run


def test_run_epr_writes_artifacts(tmp_path, capsys):
    code, out = run(tmp_path, {"scenario": "epr", "params": {"alice_setting": "x"}, "seed": 7})
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["summary"]["no_signaling_delta"] <= 1e-12
    assert all(summary["checks"].values())
    rows = read_csv(out / "branches.csv")
    assert list(rows[0]) == list(cli.BRANCH_COLUMNS)
    assert [float(r["weight"]) for r in rows] == pytest.approx([1.0, 1.0], abs=1e-12)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["config"]["seed"] == 7
    for rel, digest in manifest["files"].items():
        assert sha256_file(out / rel) == digest
    assert "fields/m_B.smf" in manifest["files"]
    printed = json.loads(capsys.readouterr().out)
    assert printed["no_signaling_delta"] == summary["summary"]["no_signaling_delta"]


def test_repeat_runs_are_byte_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("SM_THREADS", "1")
    cfg = {"scenario": "grwm_cat", "params": {"runs": 5}, "grid": {"points_per_axis": 128}, "seed": 3}
    _, a = run(tmp_path, cfg, name="a")
    _, b = run(tmp_path, cfg, name="b")
    ma = json.loads((a / "manifest.json").read_text())["files"]
    mb = json.loads((b / "manifest.json").read_text())["files"]
    assert ma == mb and ma


def test_seed_flag_overrides_config(tmp_path):
    cfg = {"scenario": "grwm_cat", "params": {"runs": 3}, "grid": {"points_per_axis": 128}, "seed": 1}
    _, a = run(tmp_path, cfg, "--seed", "99", name="a")
    assert json.loads((a / "manifest.json").read_text())["config"]["seed"] == 99


def test_output_selection(tmp_path):
    cfg = {"scenario": "epr", "outputs": {"fields": False, "branches": False, "trajectories": False,
                                          "summary": True}}
    code, out = run(tmp_path, cfg)
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "summary.json"]


def test_trajectories_written(tmp_path):
    cfg = {"scenario": "two_slit", "params": {"trajectories": 5, "horizon": 0.5, "record_every": 50},
           "grid": {"points_per_axis": 128}}
    code, out = run(tmp_path, cfg)
    rows = read_csv(out / "trajectories.csv")
    assert {"trajectory", "time", "q0", "q1", "branch_id"} <= set(rows[0])
    assert len(rows) == 5 * 3


# --------------------------------------------------------------------------
# configuration errors


@pytest.mark.parametrize("cfg", [
    {"scenario": "epr", "bogus": 1},
    {"scenario": "epr", "params": {"bogus": 1}},
    {"scenario": "nope"},
    {"scenario": "epr", "seed": -1},
    {"scenario": "epr", "params": {"alice_setting": 3}},
    {"scenario": "cat_1d", "grid": {"points_per_axis": 100}},
    {"scenario": "cat_1d", "params": {"separation_sigmas": 4}},
    {"scenario": "grwm_cat", "params": {"lam": 1.0, "runs": 1}},
    {"scenario": "epr", "grid": {"dt": 0.1}},
])
def test_bad_configs_exit_2(tmp_path, capsys, cfg):
    code, _ = run(tmp_path, cfg)
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_unreadable_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["run", str(bad)]) == 2
    assert cli.main(["run", str(tmp_path / "missing.json")]) == 2


# --------------------------------------------------------------------------
# aborts


def test_violated_invariant_exits_3(tmp_path, monkeypatch, capsys):
    res = ScenarioResult("epr", {}, 0)
    res.checks["no_signaling"] = False
    monkeypatch.setattr(cli, "execute", lambda cfg: res)
    code, out = run(tmp_path, {"scenario": "epr"})
    assert code == 3
    assert "invariant violated: no_signaling" in capsys.readouterr().err
    assert json.loads((out / "manifest.json").read_text())["status"] == "failed"


def test_numerical_abort_exits_3(tmp_path, monkeypatch, capsys):
    def boom(cfg):
        raise NumericalAbort("norm_conservation", "norm drifted")
    monkeypatch.setattr(cli, "execute", boom)
    code, out = run(tmp_path, {"scenario": "epr"})
    assert code == 3
    assert "norm_conservation" in capsys.readouterr().err
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed" and "norm_conservation" in manifest["diagnostic"]


# --------------------------------------------------------------------------
# compare


def test_compare_stern_gerlach(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", scenario="stern_gerlach_sequence", ontologies=["sm", "sip"],
                    params={"n": 3, "sip_times": 3000}, seed=5)
    assert cli.main(["compare", cfg, "--out", str(tmp_path / "c")]) == 0
    rows = read_csv(tmp_path / "c" / "comparison.csv")
    assert {r["ontology"] for r in rows} == {"sm", "sip"}
    assert all(r["agree"] == "true" for r in rows)
    assert "ontology" in capsys.readouterr().out


@pytest.mark.parametrize("cfg", [
    {"scenario": "epr", "ontologies": ["sm"]},
    {"scenario": "stern_gerlach_sequence", "ontologies": ["grwm"]},
    {"scenario": "cat_1d"},
])
def test_unsupported_comparisons_exit_2(tmp_path, cfg):
    assert cli.main(["compare", write_cfg(tmp_path / "c.json", **cfg), "--out", str(tmp_path / "c")]) == 2


# --------------------------------------------------------------------------
# formats


@given(shape=st.lists(st.integers(1, 5), min_size=1, max_size=3), seed=st.integers(0, 2 ** 32 - 1),
       t=st.floats(-1e3, 1e3))
def test_smf_round_trip_is_bitwise(tmp_path_factory, shape, seed, t):
    vals = np.random.default_rng(seed).normal(size=shape)
    m = MassDensityField(vals, 0.125, time=t, coords=tuple(np.arange(k, dtype=float) for k in shape))
    p = tmp_path_factory.mktemp("smf") / "m.smf"
    write_smf(p, m)
    back, vol, time = read_smf(p)
    assert back.tobytes() == vals.tobytes() and vol == 0.125 and time == t
    raw = p.read_bytes()
    assert raw[:4] == b"SMF1" and len(raw) == 4 + 8 + 4 * len(shape) + 16 + 8 * vals.size


def test_smf_rejects_other_files(tmp_path):
    p = tmp_path / "x.smf"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError):
        read_smf(p)


@given(x=st.floats(allow_nan=False, allow_infinity=False))
def test_csv_reals_round_trip(x):
    assert float(format_cell(x)) == x


def test_csv_uses_crlf(tmp_path):
    p = tmp_path / "t.csv"
    write_csv(p, [{"a": 0.1, "b": True, "c": None}])
    assert p.read_bytes() == b"a,b,c\r\n0.10000000000000001,true,\r\n"
