import json
from pathlib import Path

import pytest
from pytest_cases import parametrize

import emattn.ops
from emattn import ConfigError
from emattn.main import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, RunConfig, main
from emattn.utils_reports import report_body

GOLDEN = json.loads((Path(__file__).parent / "golden" / "report_fields.json").read_text())


def _run_json(capsys, *argv):
    code = main(list(argv) + ["--format", "json", "-q"])
    captured = capsys.readouterr()
    assert code == EXIT_OK, captured.err
    return json.loads(captured.out)


def _small_train_config(tmp_path, **extra):
    path = tmp_path / "train.json"
    content = dict(n_train=48, n_val=16, batch_size=16)
    content.update(extra)
    path.write_text(json.dumps(content))
    return str(path)


# ------------- report structure


def test_report_fields(capsys, tmp_path):
    docs = {
        "analyze": _run_json(capsys, "analyze"),
        "gradcheck": _run_json(capsys, "gradcheck", "--attention", "se", "--channels", "4", "--batch", "1"),
        "train": _run_json(capsys, "train", "--steps", "2", "--config", _small_train_config(tmp_path)),
        "bench": _run_json(capsys, "bench", "--shapes", "1x32x4x4"),
        "compare": _run_json(capsys, "compare"),
    }
    for sub, doc in docs.items():
        assert list(doc) == GOLDEN["top_level"]
        assert doc["subcommand"] == sub
        assert list(doc["config_echo"]) == GOLDEN["config_echo"]
        assert list(doc["results"]) == GOLDEN["results"][sub]
        assert list(report_body(doc)) == GOLDEN["top_level"][:-1]


def test_text_format(capsys):
    assert main(["analyze", "-q"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert "subcommand: analyze" in lines
    assert "  params: 23705252" in lines


def test_out_file(capsys, tmp_path):
    out = tmp_path / "report.json"
    assert main(["analyze", "--format", "json", "--out", str(out), "-q"]) == EXIT_OK
    assert capsys.readouterr().out == ""
    assert json.loads(out.read_text())["results"]["params"] == 23705252


# ------------- analyze and compare


def test_analyze_resnet50(capsys):
    doc = _run_json(capsys, "analyze")
    assert doc["results"]["params"] == 23705252
    assert doc["config_echo"]["input_hw"] == [32, 32]

    doc = _run_json(capsys, "analyze", "--attention", "ca")
    assert doc["results"]["params"] == 25622140
    assert doc["config_echo"]["reduction"] is None


def test_analyze_mobilenetv2_with_ema(capsys):
    doc = _run_json(capsys, "analyze", "--backbone", "mobilenetv2", "--classes", "1000", "--attention", "ema",
                    "--input-hw", "224")
    assert doc["results"]["params"] == 3504872 + 2300
    assert doc["results"]["attention_layers"] == 14
    assert doc["results"]["skipped_sites"] == ["features.1", "features.2", "features.3"]


def test_analyze_dump(capsys):
    doc = _run_json(capsys, "analyze", "--dump")
    assert doc["results"]["layers"][0].startswith("conv1")


def test_config_file_is_overridden_by_flags(capsys, tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"backbone": "mobilenetv2", "classes": 1000, "input_hw": [64, 64]}))
    doc = _run_json(capsys, "analyze", "--config", str(path), "--input-hw", "224x224")
    assert doc["config_echo"]["backbone"] == "mobilenetv2"
    assert doc["config_echo"]["input_hw"] == [224, 224]
    assert doc["results"]["params"] == 3504872


def test_compare(capsys):
    doc = _run_json(capsys, "compare")
    assert doc["results"]["backbone"] == "resnet50-cifar"
    methods = [r["method"] for r in doc["results"]["rows"]]
    assert methods[0] == "baseline" and "+EMA" in methods


# ------------- gradcheck


def test_gradcheck_defaults_pass(capsys):
    doc = _run_json(capsys, "gradcheck")
    assert doc["results"]["passed"] is True
    assert doc["results"]["module"] == "ema"
    assert doc["results"]["compared"] == 2 * 8 * 5 * 7 + 44
    assert list(doc["results"]["per_parameter"])[0] == "x"


def test_gradcheck_ca(capsys):
    doc = _run_json(capsys, "gradcheck", "--attention", "ca", "--reduction", "4")
    assert doc["results"]["passed"] is True
    assert doc["results"]["module"] == "ca"


def test_gradcheck_detects_a_wrong_derivative(capsys, monkeypatch):
    monkeypatch.setattr(emattn.ops.sigmoid.spec, "vjp", lambda g, out, x: {"x": g * out})
    assert main(["gradcheck", "--format", "json", "-q"]) == EXIT_NUMERIC
    doc = json.loads(capsys.readouterr().out)
    assert doc["results"]["passed"] is False


# ------------- train


def test_train_zero_steps(capsys, tmp_path):
    doc = _run_json(capsys, "train", "--steps", "0", "--config", _small_train_config(tmp_path))
    assert doc["results"]["losses"] == [] and doc["results"]["steps"] == 0
    assert doc["results"]["dataset"] == {"name": "synth-quadrant", "train": 48, "val": 16, "classes": 4}


def test_train_is_reproducible(capsys, tmp_path):
    cfg = _small_train_config(tmp_path)
    a = _run_json(capsys, "train", "--attention", "ema", "--steps", "4", "--seed", "5", "--config", cfg)
    b = _run_json(capsys, "train", "--attention", "ema", "--steps", "4", "--seed", "5", "--config", cfg)
    assert report_body(a) == report_body(b)
    assert len(a["results"]["losses"]) == 4


def test_train_echoes_the_variant(capsys, tmp_path):
    doc = _run_json(capsys, "train", "--attention", "ema", "--variant", "no_cross_spatial", "--steps", "1",
                    "--config", _small_train_config(tmp_path))
    assert doc["config_echo"]["variant"] == "no_cross_spatial"
    assert doc["results"]["model"]["variant"] == "no_cross_spatial"


def test_train_ablation_widens_the_trunk(capsys, tmp_path):
    doc = _run_json(capsys, "train", "--attention", "ema", "--variant", "EMA_16", "--steps", "1",
                    "--config", _small_train_config(tmp_path))
    assert doc["results"]["model"]["width"] == 32
    assert doc["results"]["model"]["hyper"] == 16


# ------------- bench


def test_bench(capsys):
    doc = _run_json(capsys, "bench", "--shapes", "1x32x4x4,1x32x8x8", "--reps", "30")
    rows = doc["results"]["rows"]
    assert [r["shape"] for r in rows] == [[1, 32, 4, 4], [1, 32, 8, 8]]
    assert all(r["reps"] == 30 for r in rows)


# ------------- errors


def test_unknown_backbone(capsys):
    assert main(["analyze", "--backbone", "vgg"]) == EXIT_CONFIG
    assert "'backbone'" in capsys.readouterr().err


@parametrize(argv=[["analyze", "--attention", "cbam"], ["analyze", "--attention", "ema", "--groups", "3"],
                   ["analyze", "--attention", "ca", "--variant", "EMA_16"], ["analyze", "--format", "xml"],
                   ["analyze", "--input-hw", "0x4"], ["gradcheck", "--attention", "none"],
                   ["gradcheck", "--channels", "6"], ["bench", "--reps", "29"], ["bench", "--shapes", "1x2x3"],
                   ["train", "--steps", "-1"]])
def test_configuration_errors(argv, capsys):
    assert main(argv) == EXIT_CONFIG
    assert "emattn %s: error:" % argv[0] in capsys.readouterr().err


def test_argparse_errors(capsys):
    assert main(["analyze", "--groups", "many"]) == EXIT_CONFIG
    assert main(["nothing"]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG


def test_config_file_errors(capsys, tmp_path):
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"epochs": 3}))
    assert main(["analyze", "--config", str(unknown)]) == EXIT_CONFIG
    assert "'epochs'" in capsys.readouterr().err

    broken = tmp_path / "broken.json"
    broken.write_text("{")
    assert main(["analyze", "--config", str(broken)]) == EXIT_CONFIG
    assert main(["analyze", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_missing_dataset(capsys, tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "cifar-100-binary")]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_run_config():
    cfg = RunConfig.from_mapping({"subcommand": "gradcheck"})
    assert (cfg.attention, cfg.groups, cfg.hyper, cfg.input_hw) == ("ema", 4, 4, (5, 7))
    cfg = RunConfig.from_mapping({"subcommand": "analyze", "attention": "SE"})
    assert cfg.attention == "se" and cfg.hyper == 16
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"attention": "se"})
