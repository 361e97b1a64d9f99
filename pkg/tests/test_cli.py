import filecmp
import json
import os

import pytest

from sqbsde.cli import ConfigError, main, parse_config, validate_config

GOOD = """[experiment]
kind = bsde
title = unit
T = 1.0

[generator]
delta = 1.0

[terminal]
exp_affine = 0.0 1.0

[numerics]
n_steps = 10
n_paths = 2000
seed = 3
"""

# each entry must be rejected at validation time with a positioned error
INVALID_CONFIGS = {
    "unknown-section": GOOD + "\n[bogus]\nx = 1\n",
    "unknown-key": GOOD.replace("title = unit", "title = unit\nspeed = 9"),
    "missing-kind": GOOD.replace("kind = bsde\n", ""),
    "bad-kind": GOOD.replace("kind = bsde", "kind = quantum"),
    "bad-float": GOOD.replace("T = 1.0", "T = fast"),
    "nonpositive-T": GOOD.replace("T = 1.0", "T = 0.0"),
    "missing-generator": GOOD.replace("[generator]\ndelta = 1.0\n\n", ""),
    "negative-delta": GOOD.replace("delta = 1.0", "delta = -1.0"),
    "negative-alpha": GOOD.replace("delta = 1.0",
                                   "delta = 1.0\nalpha = -0.5"),
    "even-mirror-exponent": GOOD.replace("delta = 1.0",
                                         "delta = 0.5\nsign = negative"),
    "terminal-syntax": GOOD.replace("exp_affine = 0.0 1.0", "expr = exp("),
    "terminal-both": GOOD.replace("exp_affine = 0.0 1.0",
                                  "exp_affine = 0.0 1.0\nconst = 1.0"),
    "terminal-missing": GOOD.replace("exp_affine = 0.0 1.0\n", ""),
    "terminal-zero": GOOD.replace("exp_affine = 0.0 1.0", "const = 0.0"),
    "bad-int": GOOD.replace("n_steps = 10", "n_steps = 2.5"),
    "nonpositive-paths": GOOD.replace("n_paths = 2000", "n_paths = 0"),
    "weights-cap": GOOD.replace("n_paths = 2000",
                                "n_paths = 30000\nmode = weights"),
    "duplicate-key": GOOD.replace("delta = 1.0", "delta = 1.0\ndelta = 2.0"),
    "duplicate-section": GOOD + "\n[generator]\ndelta = 2.0\n",
    "bad-sign-choice": GOOD.replace("delta = 1.0",
                                    "delta = 1.0\nsign = sideways"),
}

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def _write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


def _check_sorted_keys(text):
    def hook(pairs):
        keys = [k for k, _ in pairs]
        assert keys == sorted(keys), f"unsorted keys: {keys}"
        return dict(pairs)

    return json.loads(text, object_pairs_hook=hook)


class TestParseConfig:
    def test_positions(self):
        cfg = parse_config("# c\n[alpha]\n  x = 1\ny = two\n")
        sec = cfg["alpha"]
        assert (sec.line, sec.col) == (2, 1)
        assert (sec.items["x"].key_line, sec.items["x"].key_col) == (3, 3)
        assert sec.items["x"].val_col == 7
        assert sec.items["y"].raw == "two"

    def test_duplicate_section_names_first(self):
        with pytest.raises(ConfigError) as ei:
            parse_config("[a]\nx = 1\n[a]\n")
        assert ei.value.line == 3
        assert "first seen at line 1" in str(ei.value)

    def test_duplicate_key_names_first(self):
        with pytest.raises(ConfigError) as ei:
            parse_config("[a]\nx = 1\nx = 2\n")
        assert ei.value.line == 3

    def test_key_outside_section(self):
        with pytest.raises(ConfigError) as ei:
            parse_config("x = 1\n")
        assert ei.value.line == 1

    def test_malformed_header(self):
        with pytest.raises(ConfigError):
            parse_config("[a\nx = 1\n")

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config("\n# note\n[s]\n# more\nk = v # trailing\n")
        assert cfg["s"].items["k"].raw == "v"


class TestValidation:
    def test_good_config_passes(self, tmp_path, capsys):
        rc = main(["validate", _write(tmp_path, GOOD)])
        assert rc == 0
        assert "OK" in capsys.readouterr().out

    @pytest.mark.parametrize("name", sorted(INVALID_CONFIGS))
    def test_invalid_config_positioned(self, name, tmp_path, capsys):
        rc = main(["validate", _write(tmp_path, INVALID_CONFIGS[name])])
        captured = capsys.readouterr()
        assert rc == 2
        lines = captured.err.strip().splitlines()
        assert lines[0].startswith("error: ")
        obj = json.loads(lines[-1])
        assert obj["error"]["code"] == 2
        assert obj["error"]["line"] >= 1
        assert obj["error"]["col"] >= 1

    def test_missing_file(self, capsys):
        rc = main(["validate", "/nonexistent/nope.ini"])
        assert rc == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_shipped_configs_validate(self, capsys):
        names = sorted(os.listdir(CONFIG_DIR))
        assert len(names) >= 5
        for name in names:
            rc = main(["validate", os.path.join(CONFIG_DIR, name)])
            assert rc == 0, f"{name} failed validation"
        capsys.readouterr()

    def test_validate_config_returns_plan(self):
        plan = validate_config(parse_config(GOOD))
        assert plan["kind"] == "bsde"
        assert plan["numerics"]["n_paths"] == 2000
        assert plan["T"] == 1.0


class TestCatalog:
    def test_catalog_lists_oracles(self, capsys):
        rc = main(["catalog"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "exp-affine: transform-exact oracle" in out
        assert "cosine: Neumann series oracle" in out


class TestRun:
    def test_run_writes_report_and_csv(self, tmp_path, capsys):
        cfg = _write(tmp_path, GOOD)
        out = tmp_path / "out"
        rc = main(["run", cfg, "--out", str(out)])
        captured = capsys.readouterr()
        assert rc == 0
        assert (out / "report.json").exists()
        assert (out / "field.csv").exists()
        assert str(out / "report.json") in captured.out
        assert "y0 =" in captured.out

    def test_report_json_keys_sorted_and_complete(self, tmp_path, capsys):
        cfg = _write(tmp_path, GOOD)
        out = tmp_path / "out"
        main(["run", cfg, "--out", str(out)])
        capsys.readouterr()
        text = (out / "report.json").read_text(encoding="utf-8")
        rep = _check_sorted_keys(text)
        for key in ("experiment", "inputs", "overrides", "assumptions",
                    "headline", "diagnostics", "tables"):
            assert key in rep
        assert rep["headline"]["oracle_y0"] == pytest.approx(4.4816890703,
                                                             rel=1e-9)

    def test_csv_is_lf_only(self, tmp_path, capsys):
        cfg = _write(tmp_path, GOOD)
        out = tmp_path / "out"
        main(["run", cfg, "--out", str(out)])
        capsys.readouterr()
        raw = (out / "field.csv").read_bytes()
        assert b"\r" not in raw
        header = raw.split(b"\n", 1)[0].decode()
        assert header.split(",")[0] == "t"

    def test_reruns_are_bit_identical(self, tmp_path, capsys):
        cfg = _write(tmp_path, GOOD)
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", cfg, "--out", str(a)])
        main(["run", cfg, "--out", str(b)])
        capsys.readouterr()
        for name in os.listdir(a):
            if name == "report.json":
                # the override block records the differing --out values
                ra = json.loads((a / name).read_text())
                rb = json.loads((b / name).read_text())
                ra["overrides"].pop("out"), rb["overrides"].pop("out")
                assert ra == rb
            else:
                assert filecmp.cmp(a / name, b / name, shallow=False), name

    def test_seed_override_changes_results_and_is_recorded(self, tmp_path,
                                                           capsys):
        cfg = _write(tmp_path, GOOD)
        a, b = tmp_path / "a", tmp_path / "b"
        main(["run", cfg, "--out", str(a)])
        main(["run", cfg, "--out", str(b), "--seed", "99"])
        capsys.readouterr()
        ra = json.loads((a / "report.json").read_text())
        rb = json.loads((b / "report.json").read_text())
        assert rb["overrides"]["seed"] == 99
        assert ra["headline"]["y0"] != rb["headline"]["y0"]

    def test_negative_seed_rejected(self, tmp_path, capsys):
        cfg = _write(tmp_path, GOOD)
        rc = main(["run", cfg, "--seed", "-1", "--out",
                   str(tmp_path / "o")])
        assert rc == 2
        capsys.readouterr()

    def test_numerical_failure_exits_3(self, tmp_path, capsys):
        bad = GOOD.replace("n_paths = 2000", "n_paths = 6") \
                  .replace("seed = 3", "seed = 3\nbasis_degree = 8")
        cfg = _write(tmp_path, bad)
        rc = main(["run", cfg, "--out", str(tmp_path / "o")])
        captured = capsys.readouterr()
        assert rc == 3
        obj = json.loads(captured.err.strip().splitlines()[-1])
        assert obj["error"]["code"] == 3
        assert obj["error"]["kind"] == "numerical"
        assert obj["error"]["type"] == "IllConditioned"
        assert "rank-deficient" in obj["error"]["message"]

    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as ei:
            main(["frobnicate"])
        assert ei.value.code == 2
        capsys.readouterr()
