import csv
import hashlib
import json

import numpy as np
import pytest

from recimaging.cli import main
from recimaging.experiments import (
    DEFAULTS,
    SCENARIOS,
    ConfigError,
    Table,
    apply_overrides,
    emit_plotdata,
    git_style_hash,
    run,
    stage_seed,
    validate,
    with_defaults,
)


def read_csv(path):
    with open(path) as f:
        lines = f.read().splitlines()
    assert lines[0].startswith("# manifest=")
    return list(csv.DictReader(lines[1:]))


TWO_POINT = {"scenario": "two-point", "seed": 1, "physical": {"gammas": [0.05, 0.1]},
             "sampling": {"S": [1.0, 100.0, 1e4]}}

SINGLE = {"scenario": "single-source", "seed": 3,
          "prior": {"W": 20},
          "sampling": {"S": [1.0, 1e4, 1e8]}}


class TestValidate:
    def test_defaults_are_valid(self):
        for s in SCENARIOS:
            assert validate({"scenario": s}) == [], s

    def test_q_mismatch(self):
        v = validate({"scenario": "multi-source", "physical": {"Q": 2, "centroids": [0.0]}})
        assert any(m.startswith("physical.") and "centroid" in m for m in v)

    def test_negative_sigma(self):
        v = validate({"scenario": "single-source", "physical": {"sigma": -1.0}})
        assert any(m.startswith("physical.sigma") for m in v)

    def test_unknown_key(self):
        v = validate({"scenario": "two-point", "physical": {"gamma": 0.1}})
        assert any("physical.gamma" in m for m in v)

    def test_unknown_scenario(self):
        assert validate({"scenario": "holography"})

    def test_method_not_allowed(self):
        assert validate({"scenario": "two-point", "methods": ["direct"]})

    def test_face_default(self):
        assert validate({"scenario": "face", "physical": {"M": 3, "Lbig": 10.0, "sigma": 1.0}}) == []

    def test_missing_image_dir(self, tmp_path):
        v = validate({"scenario": "face", "prior": {"image_dir": str(tmp_path / "nope")}})
        assert any("prior.image_dir" in m for m in v)

    def test_source_size_against_gap(self):
        v = validate({"scenario": "multi-source", "physical": {"alphas": [0.5, 2.0]}})
        assert v

    def test_does_not_mutate(self):
        cfg = {"scenario": "single-source", "physical": {"sigma": 2.0}}
        before = json.dumps(cfg, sort_keys=True)
        validate(cfg)
        assert json.dumps(cfg, sort_keys=True) == before

    def test_with_defaults_fills_sections(self):
        cfg = with_defaults({"scenario": "discriminate"})
        assert cfg["physical"]["d_sep"] == DEFAULTS["discriminate"]["physical"]["d_sep"]


class TestOverrides:
    def test_json_values_and_strings(self):
        cfg = apply_overrides({"physical": {"sigma": 1.0}},
                              ["physical.sigma=2.5", "methods=[\"direct\"]", "output_dir=out/x"])
        assert cfg["physical"]["sigma"] == 2.5
        assert cfg["methods"] == ["direct"]
        assert cfg["output_dir"] == "out/x"

    def test_creates_sections(self):
        assert apply_overrides({}, ["prior.W=7"]) == {"prior": {"W": 7}}

    def test_malformed(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["physical.sigma"])

    def test_input_untouched(self):
        cfg = {"physical": {"sigma": 1.0}}
        apply_overrides(cfg, ["physical.sigma=3"])
        assert cfg["physical"]["sigma"] == 1.0


class TestManifestPieces:
    def test_git_style_hash(self):
        assert git_style_hash(b"abc") == hashlib.sha256(b"blob 3\0abc").hexdigest()

    def test_stage_seeds_differ_and_repeat(self):
        assert stage_seed(1, "prior") == stage_seed(1, "prior")
        assert stage_seed(1, "prior") != stage_seed(1, "test")
        assert stage_seed(1, "prior") != stage_seed(2, "prior")

    def test_emit_plotdata(self, tmp_path):
        t = Table(("S", "method", "C_T"))
        t.add(1e10, "spade", 2.9999999999)
        t.add(1.0, "direct", 1.0)
        paths = emit_plotdata({"ct": t}, tmp_path, "abc123")
        lines = paths["ct"].read_text().splitlines()
        assert lines == ["# manifest=abc123", "S,method,C_T", "10000000000.0,spade,2.9999999999", "1.0,direct,1.0"]

    def test_table_row_length(self):
        with pytest.raises(ValueError):
            Table(("a", "b")).add(1)


class TestRuns:
    def test_two_point_closed_form(self, tmp_path):
        res = run(TWO_POINT, tmp_path)
        rows = read_csv(res.paths["closed_form"])
        assert len(rows) == 2
        for r in rows:
            assert float(r["rel_err"]) < 1e-4
        beta = read_csv(res.paths["beta"])
        assert set(beta[0]) >= {"method", "alpha", "k", "beta_sq", "lambda", "censored"}
        ct = read_csv(res.paths["ct"])
        assert list(ct[0]) == ["S", "method", "alpha", "C_T"]
        man = json.loads(res.paths["manifest"].read_text())
        assert man["input_hash"] == res.manifest.input_hash
        for name, p in res.paths.items():
            if name != "manifest":
                assert p.read_text().startswith(f"# manifest={man['input_hash']}")
                assert man["artifacts"][name] == git_style_hash(p.read_bytes())

    def test_byte_identical_reruns(self, tmp_path):
        a = run(TWO_POINT, tmp_path / "a")
        b = run(TWO_POINT, tmp_path / "b")
        for name, p in a.paths.items():
            if name != "manifest":
                assert p.read_bytes() == b.paths[name].read_bytes()

    def test_single_source_slopes(self, tmp_path):
        res = run(SINGLE, tmp_path)
        slopes = {(r["method"], int(r["k"])): float(r["slope"]) for r in read_csv(res.paths["slopes"])}
        for k, target in ((1, -2), (2, -4)):
            assert abs(slopes[("direct", k)] - target) < 0.3
        for k, target in ((1, -2), (2, -2), (3, -4), (4, -4)):
            assert abs(slopes[("spade", k)] - target) < 0.3

    def test_workers_do_not_change_output(self, tmp_path, monkeypatch):
        cfg = dict(SINGLE, prior={"W": 8})
        a = run(cfg, tmp_path / "serial")
        monkeypatch.setenv("REC_IMAGING_WORKERS", "2")
        b = run(cfg, tmp_path / "pool")
        for name in ("beta", "ct", "slopes"):
            assert a.paths[name].read_bytes() == b.paths[name].read_bytes()

    def test_invalid_config_raises(self, tmp_path):
        with pytest.raises(ConfigError) as e:
            run({"scenario": "two-point", "physical": {"sigma": -1}}, tmp_path)
        assert e.value.violations


class TestCli:
    def test_list_scenarios(self, capsys):
        assert main(["list-scenarios"]) == 0
        out = capsys.readouterr().out
        for s in SCENARIOS:
            assert s in out

    def test_validate_ok(self, tmp_path, capsys):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"scenario": "face"}))
        assert main(["validate", "--config", str(f)]) == 0
        assert capsys.readouterr().out.strip() == "ok"

    def test_validate_reports(self, tmp_path, capsys):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"scenario": "multi-source"}))
        assert main(["validate", "--config", str(f), "--set", "physical.centroids=[0.0]"]) == 1
        assert "physical." in capsys.readouterr().out

    def test_bad_json(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text("{not json")
        assert main(["validate", "--config", str(f)]) == 1

    def test_missing_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1

    def test_run_writes_artifacts(self, tmp_path, capsys):
        f = tmp_path / "c.json"
        f.write_text(json.dumps(TWO_POINT))
        rc = main(["run", "--config", str(f), "--output-dir", str(tmp_path / "out"),
                   "--set", "physical.gammas=[0.1]"])
        assert rc == 0
        paths = json.loads(capsys.readouterr().out)
        rows = read_csv(paths["closed_form"])
        assert [float(r["gamma"]) for r in rows] == [0.1]

    def test_runtime_error_exit_code(self, tmp_path, monkeypatch):
        import recimaging.cli as cli

        def boom(*a, **k):
            raise RuntimeError("disk on fire")

        monkeypatch.setattr(cli, "run", boom)
        assert main(["run", "--set", "scenario=two-point", "--output-dir", str(tmp_path)]) == 2


def test_discriminate_small(tmp_path):
    cfg = {"scenario": "discriminate", "seed": 5,
           "physical": {"alphas": [0.1, 0.3, 1.0]},
           "sampling": {"S": 1000, "repetitions": 50},
           "learning": {"augment": 50}}
    res = run(cfg, tmp_path)
    rows = read_csv(res.paths["discrimination"])
    assert {r["method"] for r in rows} == {"direct", "spade"}
    for r in rows:
        assert 0.0 <= float(r["P_succ_mean"]) <= 1.0
        assert float(r["chernoff_C"]) >= 0.0
    C = {(r["method"], float(r["alpha"])): float(r["chernoff_C"]) for r in rows}
    # SPADE separates one from two points better than direct imaging at small alpha
    assert C[("spade", 0.1)] > C[("direct", 0.1)]
    assert np.isfinite(list(C.values())).all()
