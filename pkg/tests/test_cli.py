import json

import pytest

from eegsal.cli import main
from eegsal.datasets import load_dataset, load_map

SMALL = ["--channels", "8", "--samples", "64", "--size", "16"]
QUICK_BASE = ["--pretrain-records", "8", "--pretrain-ae-steps", "5", "--pretrain-unet-steps", "5"]


def run(*argv):
    return main([str(a) for a in argv])


def echo(out):
    return json.loads((out / "config.json").read_text())["args"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--n", 8, *SMALL, "--seed", 3, "--out", root / "ds") == 0
    assert run("train1", "--data", root / "ds", "--preset", "desk", "--steps", 3, *QUICK_BASE,
               "--out", root / "s1") == 0
    assert run("train2", "--data", root / "ds", "--stage1", root / "s1/stage1.ckpt", "--preset", "desk",
               "--steps", 2, "--out", root / "s2") == 0
    return root


def test_synth_writes_dataset_with_manifest(tmp_path):
    assert run("synth", "--n", 64, "--seed", 7, "--out", tmp_path / "ds") == 0
    ds = load_dataset(tmp_path / "ds")
    assert len(ds) == 64 and (tmp_path / "ds/manifest.json").is_file()
    assert ds.splits.count("test") == 16


def test_synth_is_byte_identical_on_rerun(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--n", 6, *SMALL, "--seed", 1, "--out", tmp_path / name) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        if rel.name == "config.json":
            continue
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_synth_rejects_empty_dataset(tmp_path):
    assert run("synth", "--n", 0, "--out", tmp_path / "ds") == 2


def test_train_dry_run_echoes_published_values(tmp_path, capsys):
    assert run("train1", "--dry-run", "--out", tmp_path / "a") == 0
    a = echo(tmp_path / "a")
    assert (a["lr"], a["t0"], a["eta_min"], a["batch_size"], a["steps"], a["precision"]) == (
        0.002, 5000, 1e-6, 8, 212000, "half")
    assert run("train2", "--dry-run", "--out", tmp_path / "b") == 0
    b = echo(tmp_path / "b")
    assert (b["lr"], b["batch_size"], b["grad_accum"], b["eta_min"], b["steps"]) == (1e-4, 2, 4, 1e-5, 65000)
    assert '"lr": 0.002' in capsys.readouterr().out


def test_step_override_is_recorded(tmp_path):
    assert run("train1", "--dry-run", "--steps", 500, "--out", tmp_path) == 0
    assert echo(tmp_path)["steps"] == 500 and echo(tmp_path)["lr"] == 0.002


def test_train_artifacts(trained):
    assert {p.name for p in (trained / "s1").iterdir()} >= {"base.ckpt", "stage1.ckpt", "stage1_loss.csv",
                                                           "config.json"}
    assert (trained / "s2/stage2.ckpt").is_file()
    assert len((trained / "s2/stage2_loss.csv").read_text().splitlines()) == 3


def _generate(trained, out, *extra):
    return run("generate", "--data", trained / "ds", "--stage1", trained / "s1/stage1.ckpt", "--steps", 3,
               "--out", out, *extra)


def _pngs(d):
    return {p.name: p.read_bytes() for p in sorted((d / "recon").glob("*.png"))}


def test_generate_is_reproducible_and_covers_test_split(trained, tmp_path):
    s2 = trained / "s2/stage2.ckpt"
    assert _generate(trained, tmp_path / "a", "--with-saliency", "--stage2", s2) == 0
    assert _generate(trained, tmp_path / "b", "--with-saliency", "--stage2", s2) == 0
    a = _pngs(tmp_path / "a")
    assert a == _pngs(tmp_path / "b")
    assert len(a) == load_dataset(trained / "ds").splits.count("test")


def test_fresh_control_matches_eeg_only(trained, tmp_path):
    assert _generate(trained, tmp_path / "eeg", "--eeg-only") == 0
    assert _generate(trained, tmp_path / "fresh", "--with-saliency", "--fresh-control") == 0
    assert _pngs(tmp_path / "eeg") == _pngs(tmp_path / "fresh")


def test_generate_usage_errors(trained, tmp_path):
    assert _generate(trained, tmp_path / "x", "--with-saliency") == 2
    assert _generate(trained, tmp_path / "y") == 2


def test_evaluate_self_comparison_and_missing(trained, tmp_path):
    ds = load_dataset(trained / "ds")
    gt = tmp_path / "gt" / "recon"
    gt.mkdir(parents=True)
    test_ids = [r.stimulus_id for r, s in zip(ds.records, ds.splits) if s == "test"]
    for sid in test_ids:
        (gt / f"{sid}.png").write_bytes((trained / "ds/images" / f"{sid}.png").read_bytes())
    partial = tmp_path / "partial" / "recon"
    partial.mkdir(parents=True)
    for sid in test_ids[1:]:
        (partial / f"{sid}.png").write_bytes((gt / f"{sid}.png").read_bytes())
    out = tmp_path / "eval"
    assert run("evaluate", "--data", trained / "ds", "--recon", gt, "--recon", f"part={partial}",
               "--gt-saliency", "fallback", "--out", out) == 0
    rep = json.loads((out / "report_gt.json").read_text())
    assert rep["pixcorr"] == pytest.approx(1.0) and rep["ssim"] == pytest.approx(1.0)
    assert rep["saliency_cc"] == pytest.approx(1.0) and rep["saliency_kl"] == pytest.approx(0.0, abs=1e-12)
    assert all(v == 1.0 for v in rep["two_way_accuracy"].values())
    assert json.loads((out / "report_part.json").read_text())["missing"] == [test_ids[0]]
    table = (out / "comparison.md").read_text()
    assert "| gt |" in table and "| part |" in table
    assert (out / "grid.png").is_file()


def test_config_replay(trained, tmp_path):
    assert _generate(trained, tmp_path / "a", "--eeg-only", "--seed", 4) == 0
    assert run("generate", "--config", tmp_path / "a/config.json", "--out", tmp_path / "b") == 0
    assert _pngs(tmp_path / "a") == _pngs(tmp_path / "b")
    assert echo(tmp_path / "b")["seed"] == 4


def test_config_unknown_key_or_wrong_command(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"command": "synth", "args": {"n": 3, "bogus": 1}}))
    assert run("synth", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 2
    (tmp_path / "d.json").write_text(json.dumps({"command": "train1", "args": {}}))
    assert run("synth", "--config", tmp_path / "d.json", "--out", tmp_path / "o") == 2


def test_saliency_predict(trained, tmp_path):
    assert run("saliency-predict", "--images", trained / "ds/images", "--out", tmp_path) == 0
    maps = sorted(tmp_path.glob("*.png"))
    assert len(maps) == 8
    m = load_map(maps[0])
    assert m.ndim == 2 and m.max() == pytest.approx(1.0, abs=1 / 255)


def test_runtime_errors_exit_1(tmp_path):
    assert run("train2", "--data", tmp_path / "nope", "--stage1", tmp_path / "x.ckpt", "--out", tmp_path / "o") == 1
    assert run("bogus-command") == 2
