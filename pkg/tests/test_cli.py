from __future__ import annotations

import json

import numpy as np
import pytest
import yaml

from factorlab import cli
from factorlab.factorspace import FactorRegistry, observed_tuples
from factorlab.synthworld.dataset import load_png

NOVEL = "lens=fisheye,sensor=thermal,view=drone,domain=real"
FAST = ["--steps", "2"]


def run(*argv) -> int:
    return cli.dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> pretrain -> invert-s1 -> invert-s2 on a tiny smoke world."""
    root = tmp_path_factory.mktemp("run")
    data, ck = root / "data", root / "ck"
    common = ["--data-root", data]
    assert run("synth", *common, "--preset", "smoke", "--samples", 6, "--resolution", 16) == 0
    assert run("pretrain", *common, "--out", ck / "bb.ckpt", "--train-steps", 6, "--batch-size", 4,
               "--widths", "8,16,16") == 0
    assert run("invert-s1", *common, "--backbone", ck / "bb.ckpt", "--out", ck / "s1.ckpt", "--n", 2,
               "--epochs", 1, "--max-steps", 3, "--val-fraction", 0.2) == 0
    assert run("invert-s2", *common, "--backbone", ck / "bb.ckpt", "--state", ck / "s1.ckpt", "--out",
               ck / "s2.ckpt", "--n", 2, "--epochs", 1, "--max-steps", 2, "--datasets", "smoke_a,smoke_c") == 0
    return root, data, ck


def test_synth_writes_registry_and_manifest(pipeline):
    _, data, _ = pipeline
    reg = FactorRegistry.load(data / "registry.yaml")
    assert len(reg.datasets) == 4
    lines = (data / "metadata.jsonl").read_text().splitlines()
    assert len(lines) == 24
    manifest = json.loads((data / "manifest.synth.json").read_text())
    assert manifest["command"] == "synth"
    assert len(manifest["config_digest"]) == 64
    assert str(data / "registry.yaml") in manifest["artifacts"]


def test_training_artifacts(pipeline):
    _, _, ck = pipeline
    for name in ("bb.ckpt", "bb.json", "s1.ckpt", "s1.jsonl", "s2.ckpt", "s2.jsonl", "manifest.pretrain.json",
                 "manifest.invert-s1.json", "manifest.invert-s2.json"):
        assert (ck / name).exists(), name
    s2_log = [json.loads(line) for line in (ck / "s2.jsonl").read_text().splitlines()]
    assert [e["dataset"] for e in s2_log if e["stage"] == "S2"] == ["smoke_a", "smoke_c"]
    manifest = json.loads((ck / "manifest.invert-s2.json").read_text())
    assert str(ck / "bb.ckpt") in manifest["inputs"]


def test_generate_novel_tuple(pipeline):
    root, data, ck = pipeline
    out = root / "gen"
    code = run("generate", NOVEL, "--count", 3, "--data-root", data, "--backbone", ck / "bb.ckpt",
               "--state", ck / "s2.ckpt", "--specific", "sensor=smoke_c", "--out", out, *FAST)
    assert code == 0
    pngs = sorted(out.glob("*.png"))
    assert len(pngs) == 3
    assert load_png(pngs[0]).shape == (16, 16, 3)
    meta = json.loads((out / "generation.json").read_text())
    assert meta["membership"] == "novel"
    manifest = json.loads((out / "manifest.generate.json").read_text())
    assert sorted(manifest["artifacts"]) == sorted(str(p) for p in pngs + [out / "generation.json"])


def test_generate_with_control_and_zeroshot(pipeline):
    root, data, ck = pipeline
    src = sorted((data / "smoke_a").glob("*.png"))[0]
    out = root / "gen-ctrl"
    assert run("generate", NOVEL, "--count", 2, "--data-root", data, "--backbone", ck / "bb.ckpt",
               "--method", "zeroshot", "--control-from", src, "--out", out, *FAST) == 0
    assert len(list(out.glob("*.png"))) == 2


def test_generate_is_deterministic(pipeline):
    root, data, ck = pipeline
    outs = []
    for k in range(2):
        out = root / f"det{k}"
        assert run("generate", NOVEL, "--count", 2, "--seed", 5, "--data-root", data, "--backbone", ck / "bb.ckpt",
                   "--state", ck / "s1.ckpt", "--out", out, *FAST) == 0
        outs.append([p.read_bytes() for p in sorted(out.glob("*.png"))])
    assert outs[0] == outs[1]


def test_invalid_tuple_exit_code_and_no_artifacts(pipeline, capsys):
    root, data, ck = pipeline
    out = root / "bad"
    code = run("generate", "lens=wide,sensor=rgb,view=front,domain=real", "--data-root", data,
               "--backbone", ck / "bb.ckpt", "--state", ck / "s1.ckpt", "--out", out)
    assert code == cli.EXIT_INVALID_TUPLE
    assert not out.exists()
    assert "invalid tuple" in capsys.readouterr().err
    assert run("generate", "lens=normal", "--data-root", data, "--backbone", ck / "bb.ckpt",
               "--out", out) == cli.EXIT_INVALID_TUPLE


def test_missing_checkpoint_exit_code(pipeline):
    root, data, _ = pipeline
    code = run("generate", NOVEL, "--data-root", data, "--backbone", root / "nope.ckpt", "--out", root / "x")
    assert code == cli.EXIT_MISSING_FILE


def test_checkpoint_errors(pipeline, tmp_path):
    root, data, ck = pipeline
    other = tmp_path / "other.ckpt"
    assert run("pretrain", "--data-root", data, "--out", other, "--train-steps", 1, "--batch-size", 2,
               "--widths", "8,16,16", "--seed", 1) == 0
    code = run("generate", NOVEL, "--data-root", data, "--backbone", other, "--state", ck / "s1.ckpt",
               "--out", tmp_path / "g", *FAST)
    assert code == cli.EXIT_CHECKPOINT
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes((ck / "bb.ckpt").read_bytes()[:100])
    assert run("generate", NOVEL, "--data-root", data, "--backbone", broken, "--method", "zeroshot",
               "--out", tmp_path / "g2") == cli.EXIT_CHECKPOINT


def test_usage_errors(pipeline, tmp_path):
    root, data, ck = pipeline
    assert run("frobnicate") == cli.EXIT_USAGE
    assert run("synth", "--preset", "smoke", "--resolution", 20, "--data-root", tmp_path) == cli.EXIT_USAGE
    assert run("generate", NOVEL, "--data-root", data, "--backbone", ck / "bb.ckpt", "--method", "zeroshot",
               "--guidance", -1, "--out", tmp_path / "g") == cli.EXIT_USAGE
    assert run("generate", NOVEL, "--data-root", data, "--backbone", ck / "bb.ckpt", "--out",
               tmp_path / "g") == cli.EXIT_MISSING_FILE


def test_data_root_from_environment(pipeline, monkeypatch, tmp_path):
    monkeypatch.setenv(cli.DATA_ROOT_ENV, str(tmp_path / "envdata"))
    assert run("synth", "--preset", "smoke", "--samples", 1, "--resolution", 16) == 0
    assert (tmp_path / "envdata" / "registry.yaml").exists()
    monkeypatch.delenv(cli.DATA_ROOT_ENV)
    assert run("synth", "--preset", "smoke") == cli.EXIT_USAGE


def test_config_file_overrides_flags(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"samples": 2, "resolution": 16, "data-root": str(tmp_path / "d")}))
    assert run("synth", "--preset", "smoke", "--samples", 50, "--config", cfg) == 0
    assert len((tmp_path / "d" / "metadata.jsonl").read_text().splitlines()) == 8
    manifest = json.loads((tmp_path / "d" / "manifest.synth.json").read_text())
    assert str(cfg) in manifest["inputs"]
    cfg.write_text(yaml.safe_dump({"bogus": 1}))
    assert run("synth", "--preset", "smoke", "--config", cfg) == cli.EXIT_USAGE


def test_evaluate_existing_suite_and_report(pipeline):
    root, data, ck = pipeline
    out = root / "eval"
    code = run("evaluate", "--data-root", data, "--backbone", ck / "bb.ckpt", "--state", ck / "s2.ckpt",
               "--suite", "existing", "--conditioning", "all", "--count", 2, "--classifier", root / "clf.ckpt",
               "--classifier-per-tuple", 10, "--out", out, *FAST)
    assert code == 0
    assert (root / "clf.ckpt").exists()
    reg = FactorRegistry.load(data / "registry.yaml")
    expected = {t.to_string() for t in observed_tuples(reg)}
    for mode in ("text", "edge"):
        for method in ("multi", "zeroshot"):
            rep = json.loads((out / f"metrics.existing.{mode}.{method}.json").read_text())
            assert set(rep["descriptor"]["tuples"]) == expected
            assert rep["sample_count"] == 2 * len(expected)
            assert 0.0 <= rep["faa"]["average"] <= 1.0
            saved = np.load(out / f"images.existing.{mode}.{method}.npz")
            assert saved["images"].shape == (2 * len(expected), 16, 16, 3)
            assert saved["images"].dtype == np.uint8
        assert (out / f"montage.existing.{mode}.png").exists()
    assert run("report", "--metrics-dir", out, "--out", out / "table") == 0
    table = (out / "table.md").read_text()
    assert table.count("| existing |") == 4
    assert run("project", "--state", ck / "s2.ckpt", "--out", root / "proj.json") == 0
    proj = json.loads((root / "proj.json").read_text())
    assert {t["kind"] for t in proj["tokens"]} == {"general", "specific"}


def test_ablate_overflow_is_checked_before_work(pipeline, tmp_path):
    root, data, ck = pipeline
    out = tmp_path / "abl"
    code = run("ablate", "--data-root", data, "--backbone", ck / "bb.ckpt", "--classifier", tmp_path / "c.ckpt",
               "--ns", "1,17", "--out", out)
    assert code == cli.EXIT_PROMPT
    assert not out.exists() and not (tmp_path / "c.ckpt").exists()


def test_ablate_sweep_artifacts(pipeline):
    root, data, ck = pipeline
    out = root / "abl"
    code = run("ablate", "--data-root", data, "--backbone", ck / "bb.ckpt", "--classifier", root / "clf.ckpt",
               "--ns", "1,2", "--epochs", 1, "--max-steps", 2, "--count", 2, "--out", out, *FAST)
    assert code == 0
    summary = json.loads((out / "ablation.json").read_text())
    assert [s["n"] for s in summary] == [1, 2]
    assert all("average" in s["faa"] and "ffd" in s for s in summary)
    for n in (1, 2):
        assert (out / f"inversion.n{n}.ckpt").exists()
