import csv
import json

import jsonschema
import numpy as np
import pytest

from talbotlau import constants as const
from talbotlau.cli import main
from talbotlau.records import FringeScanRecord, dump_fringe_scans, load_records
from talbotlau.report import report_schema

SMALL = ["ensemble.velocity_nodes=8", "ensemble.mass_nodes=8", "scan.total_points=240",
         "macro.sigma_q_points=3", "macro.tau_points=501"]


def _sets(items):
    out = []
    for s in items:
        out += ["--set", s]
    return out


@pytest.fixture
def outdir(tmp_path, monkeypatch):
    monkeypatch.setenv("TALBOTLAU_OUTPUT_DIR", str(tmp_path))
    return tmp_path


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_power_scan_csv(outdir):
    assert main(["predict", "power-scan", "-o", "ps.csv"] + _sets(SMALL[:2])) == 0
    rows = _read_csv(outdir / "ps.csv")
    assert list(rows[0]) == ["P2_mW", "V_quantum", "V_classical", "transmission"]
    meta = json.loads((outdir / "ps.meta.json").read_text())
    assert meta["columns"] == list(rows[0])
    assert len(meta["config_digest"]) == 64
    t = np.array([float(r["transmission"]) for r in rows])
    assert np.all(np.diff(t) <= 1e-12) and t[0] == pytest.approx(1.0)


def test_predict_is_deterministic(outdir):
    args = ["predict", "transmission"] + _sets(SMALL[:2])
    assert main(args + ["-o", "a.csv"]) == 0
    assert main(args + ["-o", "b.csv"]) == 0
    assert (outdir / "a.csv").read_bytes() == (outdir / "b.csv").read_bytes()


def test_map_output(outdir):
    over = SMALL[:2] + ["map.mass_points=6", "map.p2_points=5"]
    assert main(["predict", "map", "-o", "m.csv"] + _sets(over)) == 0
    rows = _read_csv(outdir / "m.csv")
    assert len(rows) == 30
    assert list(rows[0]) == ["mass_kDa", "P2_mW", "V_quantum", "V_classical", "delta_V", "valid"]
    meta = json.loads((outdir / "m.meta.json").read_text())
    c = meta["contours"]
    assert c["half_talbot_length_equals_L_kDa"] == pytest.approx(2 * c["talbot_length_equals_L_kDa"], rel=1e-12)


def test_predict_visibility(outdir):
    assert main(["predict", "visibility", "-o", "v.json"] + _sets(SMALL[:2])) == 0
    doc = json.loads((outdir / "v.json").read_text())
    assert doc["V_quantum"] == pytest.approx(doc["contrast_scale"] * doc["V_quantum_ideal"], rel=1e-12)


def test_negative_power_is_validation_error(outdir, capsys):
    assert main(["predict", "visibility", "--set", "setup.g2.power=-5 mW"]) == 1
    assert "setup.g2.power" in capsys.readouterr().err


def test_bad_config_file_names_line(outdir, tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("setup:\n  g1:\n    power: 62 parsecs\n")
    assert main(["predict", "visibility", "-c", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "line 3" in err and "setup.g1.power" in err


def test_missing_seed(outdir, capsys):
    assert main(["synthesize", "fringe"] + _sets(SMALL)) == 1
    assert "seed" in capsys.readouterr().err


def test_seed_from_config(outdir):
    assert main(["synthesize", "tof", "-o", "t.json", "--set", "seed=4"]) == 0
    doc = json.loads((outdir / "t.json").read_text())
    assert doc["seed"] == 4


def test_synthesize_is_reproducible(outdir):
    for name in ("a.json", "b.json"):
        assert main(["synthesize", "fringe", "--seed", "3", "-o", name] + _sets(SMALL)) == 0
    assert (outdir / "a.json").read_bytes() == (outdir / "b.json").read_bytes()
    assert main(["synthesize", "fringe", "--seed", "4", "-o", "c.json"] + _sets(SMALL)) == 0
    assert (outdir / "a.json").read_bytes() != (outdir / "c.json").read_bytes()
    fmt, recs, doc = load_records(str(outdir / "a.json"))
    assert sum(len(r) for r in recs) == 240
    assert doc["seed"] == 3 and len(doc["config_digest"]) == 64


def test_analyze_fringe_and_tof(outdir):
    assert main(["synthesize", "fringe", "--seed", "1", "-o", "f.json"] + _sets(SMALL)) == 0
    assert main(["analyze", "fringe-fit", str(outdir / "f.json"), "-o", "ff.json"]) == 0
    res = json.loads((outdir / "ff.json").read_text())
    assert res["n_failed"] == 0 and len(res["results"]) == 4
    assert all(0 <= r["visibility"] <= 1 for r in res["results"])
    assert main(["synthesize", "tof", "--seed", "1", "-o", "t.json"]) == 0
    assert main(["analyze", "tof-fit", str(outdir / "t.json"), "-o", "tf.json"]) == 0
    row = json.loads((outdir / "tf.json").read_text())["results"][0]
    assert row["v_mean_m_per_s"] == pytest.approx(160.0, rel=0.02)


def test_analyze_refuses_mixed_digests(outdir):
    assert main(["synthesize", "fringe", "--seed", "1", "-o", "a.json"] + _sets(SMALL)) == 0
    assert main(["synthesize", "fringe", "--seed", "1", "-o", "b.json"]
                + _sets(SMALL + ["setup.g2.power=14 mW"])) == 0
    files = [str(outdir / "a.json"), str(outdir / "b.json")]
    assert main(["analyze", "fringe-fit"] + files) == 1
    assert main(["analyze", "fringe-fit", "--force", "-o", "x.json"] + files) == 0
    assert len(json.loads((outdir / "x.json").read_text())["config_digests"]) == 2


def test_analyze_wrong_format(outdir):
    assert main(["synthesize", "tof", "--seed", "1", "-o", "t.json"]) == 0
    assert main(["analyze", "fringe-fit", str(outdir / "t.json")]) == 3


def _zero_record_file(path):
    x = np.arange(12) * 133e-9 / 6
    good = FringeScanRecord(x, np.ones(12), np.tile([110, 100, 90, 90, 100, 110], 2), (0.06, 0.015, 0.07), 1e-21)
    zero = FringeScanRecord(x, np.ones(12), np.zeros(12, dtype=int), (0.06, 0.015, 0.07), 1e-21)
    dump_fringe_scans(str(path), [good, zero], "0" * 64, 0)


def test_fit_error_needs_keep_going(outdir):
    _zero_record_file(outdir / "z.json")
    assert main(["analyze", "fringe-fit", str(outdir / "z.json")]) == 2
    assert main(["analyze", "fringe-fit", "--keep-going", str(outdir / "z.json"), "-o", "k.json"]) == 0
    res = json.loads((outdir / "k.json").read_text())
    assert res["n_failed"] == 1
    assert [r["index"] for r in res["results"]] == [0, 1]
    assert "error" in res["results"][1] and "visibility" in res["results"][0]


def test_malformed_json_reports_byte_offset(outdir, capsys):
    bad = outdir / "bad.json"
    text = '{"format": "talbotlau.fringe-scans/1", "records": [1, 2,, 3]}'
    bad.write_text(text)
    assert main(["analyze", "fringe-fit", str(bad)]) == 3
    err = capsys.readouterr().err
    assert f"byte {text.index(',,') + 1}" in err


def test_macroscopicity_empty_file_list(outdir):
    assert main(["macroscopicity"] + _sets(SMALL)) == 1


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("macro")
    assert main(["synthesize", "fringe", "--seed", "1", "-o", str(d / "data.json")] + _sets(SMALL)) == 0
    return d


def test_macroscopicity_report_matches_schema(small_dataset, capsys):
    out = small_dataset / "report.json"
    code = main(["macroscopicity", str(small_dataset / "data.json"), "-o", str(out),
                 "--acknowledge-boundary"] + _sets(SMALL))
    assert code == 0
    stdout = capsys.readouterr().out
    assert "mu = " in stdout
    doc = json.loads(out.read_text())
    jsonschema.validate(doc, report_schema())
    fmt, recs, data_doc = load_records(str(small_dataset / "data.json"))
    assert doc["data_digests"] == [data_doc["data_digest"]]
    assert np.isfinite(doc["mu"])


def test_macroscopicity_refuses_other_config(small_dataset):
    args = ["macroscopicity", str(small_dataset / "data.json"), "--acknowledge-boundary", "--no-convergence"]
    other = SMALL + ["setup.g2.power=14 mW"]
    assert main(args + _sets(other) + ["-o", str(small_dataset / "r1.json")]) == 1
    assert main(args + _sets(other) + ["--force", "-o", str(small_dataset / "r2.json")]) == 0


def test_boundary_warning_exit_code(outdir):
    # scale-one Asimov fringes leave no room for decoherence: the likelihood stays flat up to
    # the large-tau edge of the grid, which holds more than the tolerated posterior mass
    over = SMALL + ["contrast_scale=1"]
    assert main(["synthesize", "fringe", "--seed", "2", "--asimov", "-o", "a.json"] + _sets(over)) == 0
    args = ["macroscopicity", str(outdir / "a.json"), "--no-convergence", "-o", "r.json"] + _sets(over)
    assert main(args) == 2
    assert main(args + ["--acknowledge-boundary"]) == 0


def test_constants_output(capsys):
    assert main(["constants"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["constants"]["h"] == 6.62607015e-34
    sp = doc["species_at_effective_mass"]
    assert sp["mass_kDa"] > 100
    assert len(sp["ionization_thresholds_eV"]) == 3
    assert doc["talbot_length_m"] > 0
    assert set(doc["gratings_at_v_mean"]) == {"g1", "g2", "g3"}


def test_unknown_subcommand():
    assert main(["frobnicate"]) == 1
