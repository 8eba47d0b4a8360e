import json

import pytest

from artlab.cli import EXIT_CONFIG, EXIT_OK, main


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["filter", "--manifest", "x.jsonl", "--definitely-not-a-flag"])
    assert excinfo.value.code == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as excinfo:
        main(["transmogrify"])
    assert excinfo.value.code == 2


def test_generate_missing_adapter_is_config_error(tmp_path, capsys):
    code = main(["generate", "--base", str(tmp_path / "missing_base.pt"),
                 "--prompt", "a quiet lake"])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "--base" in err or "--adapter" in err


def test_generate_named_missing_field(tmp_path, capsys, stack):
    code = main(["generate", "--base", str(stack["base"]), "--prompt", "a lake"])
    assert code == EXIT_CONFIG
    assert "--adapter" in capsys.readouterr().err


def test_dry_run_writes_nothing(tmp_path, stack, capsys):
    out_dir = tmp_path / "dry"
    code = main([
        "generate", "--base", str(stack["base"]),
        "--adapter", str(stack["adapter_w50_up"]),
        "--prompt", "a quiet lake", "--out-dir", str(out_dir), "--dry-run",
    ])
    assert code == EXIT_OK
    assert not out_dir.exists()
    assert "prompt" in capsys.readouterr().out


def test_filter_dry_run_validates_config(tmp_path, stack):
    config = {"filter": {"image_concepts": ["painting"],
                         "per_concept_threshold": {"painting": 10.0}}}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(config))
    code = main(["filter", "--manifest", str(stack["manifest"]),
                 "--config", str(cfg_path), "--dry-run"])
    assert code == EXIT_OK


def test_filter_missing_manifest_is_config_error(tmp_path):
    code = main(["filter", "--manifest", str(tmp_path / "nope.jsonl")])
    assert code == EXIT_CONFIG


def test_bad_config_extension_is_config_error(tmp_path, stack):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("x = 1")
    code = main(["filter", "--manifest", str(stack["manifest"]), "--config", str(cfg)])
    assert code == EXIT_CONFIG


def test_probe_inversion_dry_run(stack):
    code = main(["probe-inversion", "--base", str(stack["base"]),
                 "--exemplars", str(stack["exemplars"]), "--dry-run"])
    assert code == EXIT_OK


def test_attribute_requires_corpora(tmp_path, stack, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"attribution": {"features_path": str(stack["features"]),
                                               "corpora": []}}))
    query = stack["exemplars"] / "exemplar000.png"
    code = main(["attribute", "--query", str(query), "--config", str(cfg),
                 "--out-dir", str(tmp_path)])
    assert code == EXIT_CONFIG
