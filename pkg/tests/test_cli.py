from __future__ import annotations

import json

import numpy as np
import pytest

from lumaforge.cli import EXIT_FATAL, EXIT_OK, EXIT_PARTIAL, main
from lumaforge.imagecore import load_image, to_u8
from lumaforge.lightops import apply_exposure


def _augment(corpus, out, *extra):
    return main(["augment", str(corpus.annotation_file), str(corpus.image_root),
                 "--out", str(out), *extra])


def test_augment_twice_gives_identical_manifests(small_corpus, tmp_path, capsys):
    assert _augment(small_corpus, tmp_path / "a", "--seed", "7") == EXIT_OK
    assert _augment(small_corpus, tmp_path / "b", "--seed", "7") == EXIT_OK
    a = (tmp_path / "a" / "manifest.json").read_bytes()
    assert a == (tmp_path / "b" / "manifest.json").read_bytes()
    assert "[OK] 3 pairs written" in capsys.readouterr().out


def test_augment_requires_a_seed(small_corpus, tmp_path):
    with pytest.raises(SystemExit) as exc:
        _augment(small_corpus, tmp_path / "out")
    assert exc.value.code == 2


def test_missing_annotation_file_is_fatal(tmp_path, capsys):
    missing = tmp_path / "nowhere.json"
    code = main(["augment", str(missing), str(tmp_path), "--out", str(tmp_path / "out"), "--seed", "1"])
    assert code == EXIT_FATAL
    assert str(missing) in capsys.readouterr().err


def test_unreadable_image_is_partial(small_corpus, tmp_path, capsys):
    small_corpus.image_path(2).write_bytes(b"\x89PNG but not really")
    code = main(["--json", "augment", str(small_corpus.annotation_file), str(small_corpus.image_root),
                 "--out", str(tmp_path / "out"), "--seed", "3"])
    assert code == EXIT_PARTIAL
    doc = json.loads(capsys.readouterr().out)
    assert doc["exit_code"] == EXIT_PARTIAL
    assert doc["pairs"] == 2
    assert [s["image_id"] for s in doc["skipped"]] == ["2"]


def test_preview_identity_gamma(small_corpus, tmp_path):
    src = small_corpus.image_path(1)
    dest = tmp_path / "g.png"
    assert main(["preview", str(src), "gamma", "--param", "gamma=1", "--out", str(dest)]) == EXIT_OK
    assert np.array_equal(to_u8(load_image(dest)), to_u8(load_image(src)))


def test_preview_exposure_matches_library(small_corpus, tmp_path):
    src = small_corpus.image_path(1)
    assert main(["preview", str(src), "exposure", "--param", "ev=0.5"]) == EXIT_OK
    dest = src.with_name(f"{src.stem}_exposure.png")
    assert np.array_equal(to_u8(load_image(dest)), to_u8(apply_exposure(load_image(src), 0.5)))


def test_preview_respects_severity_tier(small_corpus, tmp_path, capsys):
    src = str(small_corpus.image_path(1))
    out = str(tmp_path / "x.png")
    code = main(["preview", src, "color_cast", "--param", "hue_deg=30", "--param", "strength=0.2",
                 "--severity", "1", "--out", out])
    assert code == EXIT_FATAL
    assert "not available at severity 1" in capsys.readouterr().err
    assert main(["preview", src, "exposure", "--param", "ev=1.0", "--severity", "1", "--out", out]) == EXIT_FATAL
    assert main(["preview", src, "exposure", "--param", "ev=0.2", "--severity", "1", "--out", out]) == EXIT_OK
    assert main(["preview", src, "exposure", "--param", "ev=0.2", "--severity", "2", "--out", out]) == EXIT_FATAL
    assert "inside the severity 1 interval" in capsys.readouterr().err
    assert main(["preview", src, "exposure", "--param", "ev=-0.5", "--severity", "2", "--out", out]) == EXIT_OK


def test_preview_rejects_bad_param_syntax(small_corpus, tmp_path, capsys):
    code = main(["preview", str(small_corpus.image_path(1)), "gamma", "--param", "gamma", "--out", str(tmp_path / "x.png")])
    assert code == EXIT_FATAL
    assert "NAME=VALUE" in capsys.readouterr().err


def test_validate_and_report(small_corpus, tmp_path, capsys):
    out = tmp_path / "out"
    assert _augment(small_corpus, out, "--seed", "5", "--variants-per-image", "2") == EXIT_OK
    assert main(["validate", str(out / "manifest.json")]) == EXIT_OK
    assert "[OK] 6 pairs verified" in capsys.readouterr().out

    csv_path = tmp_path / "rows.csv"
    assert main(["report", str(out), "--csv", str(csv_path)]) == EXIT_OK
    text = capsys.readouterr().out
    for tier in (1, 2, 3):
        assert f"severity {tier}: n=" in text
    doc = json.loads((out / "report.json").read_text())
    assert sum(t["n"] for t in doc["tiers"]) == 6
    assert len(csv_path.read_text().strip().splitlines()) == 7


def test_validate_fails_on_tampered_variant(small_corpus, tmp_path, capsys):
    out = tmp_path / "out"
    assert _augment(small_corpus, out, "--seed", "5", "--severity", "3") == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    victim = manifest["pairs"][0]
    (out / victim["variant_path"]).write_bytes((out / victim["clean_path"]).read_bytes())
    assert main(["--json", "validate", str(out)]) == EXIT_FATAL
    doc = json.loads(capsys.readouterr().out)
    assert doc["exit_code"] == EXIT_FATAL
    assert len(doc["mismatches"]) == 1


def test_lca_selftest_json(capsys):
    assert main(["--json", "lca-selftest"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["ok"] is True
    assert "sigmoid_gate_init=0.26894" in [c["name"] for c in doc["checks"]]


def test_config_dump(tmp_path, capsys):
    assert main(["--config-dump"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["severity_config"]["max_ops"] == {"1": 1, "2": 2, "3": 3}
    assert doc["tier_boundaries"]["color_cast"]["strength"] == "single"

    user = tmp_path / "user.json"
    user.write_text(json.dumps({"max_ops": {"3": 2}}))
    assert main(["--config", str(user), "--config-dump"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["severity_config"]["max_ops"]["3"] == 2


def test_no_command_prints_help(capsys):
    assert main([]) == EXIT_FATAL
    assert "augment" in capsys.readouterr().err
