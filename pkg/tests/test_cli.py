"""
End-to-end runs of the command line on a tiny space and synthetic data.
"""
import json

import pytest
import torch

from nasbnn.main import COMMANDS, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL, EXIT_OK, main
from nasbnn.searchspace import largest, smallest

from conftest import make_tiny_space

PAPER_ND = "332,353,674,695,147,520"
DATASET = {"kind": "synthetic", "num_samples": 64, "num_classes": 4, "image_size": 8, "val_per_class": 2}


def _write(path, document):
    path.write_text(json.dumps(document))
    return str(path)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """Space, configs and a trained supernet shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("cli")
    space = make_tiny_space()
    paths = {
        "root": root,
        "space": _write(root / "space.json", space.model_dump(mode="json")),
        "train_cfg": _write(root / "train.json", {"batch_size": 16, "calib_batches": 1, "dataset": DATASET}),
        "search_cfg": _write(root / "search.json", {"population": 4, "generations": 1, "calib_batches": 1,
                                                     "batch_size": 16}),
        "arch": _write(root / "arch.json", largest(space).to_dict()),
        "small_arch": _write(root / "small.json", smallest(space).to_dict()),
    }
    code = main(["train", "--preset", "smoke", "--config", paths["train_cfg"], "--space", paths["space"],
                 "--device", "cpu", "--out", str(root / "train")])
    assert code == EXIT_OK
    paths["checkpoint"] = str(root / "train" / "supernet.pt")
    return paths


def test_space_stats(capsys, tmp_path):
    assert main(["space-stats", "--space", "paper", "--out", str(tmp_path)]) == EXIT_OK
    output = capsys.readouterr().out
    assert f"Architectures with ND:    {PAPER_ND}" in output
    assert f"{3 * 36 * 1872 ** 3 * (12 ** 8 + 12 ** 9):,}" in output
    assert "ND / unconstrained:       8.39e-05" in output
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["space_id"] == "paper"


def test_malformed_space(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    assert main(["space-stats", "--space", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    invalid = _write(tmp_path / "invalid.json", {"stem_channel_choices": [8], "stages": [
        {"depth_choices": [1], "channel_choices": [6], "kernel_choices": [3], "group_choices": [4]}]})
    assert main(["space-stats", "--space", invalid, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert json.loads((tmp_path / "manifest.json").read_text())["status"].startswith("failed")


def test_unknown_config_field(tmp_path):
    cfg = _write(tmp_path / "cfg.json", {"epochz": 1})
    assert main(["train", "--preset", "smoke", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_dataset_error(tmp_path):
    cfg = _write(tmp_path / "cfg.json", {"dataset": dict(DATASET, val_per_class=100)})
    assert main(["train", "--preset", "smoke", "--config", cfg, "--device", "cpu", "--out", str(tmp_path)]) == EXIT_DATA


def test_train_outputs(run):
    train_dir = run["root"] / "train"
    assert (train_dir / "supernet.pt").exists()
    assert (train_dir / "metrics.jsonl").read_text().strip()
    assert json.loads((train_dir / "manifest.json").read_text())["space_id"] == "tiny"


def test_search(run):
    out = run["root"] / "search"
    code = main(["search", "--preset", "smoke", "--config", run["search_cfg"], "--checkpoint", run["checkpoint"],
                 "--device", "cpu", "--out", str(out)])
    assert code == EXIT_OK
    front = json.loads((out / "front.json").read_text())
    assert front
    assert all(0.0 <= item["acc"] <= 1.0 for item in front)
    for name in ("candidates.csv", "front.png", "front.md", "manifest.json"):
        assert (out / name).exists()


def test_export_and_eval_agree(run):
    export_dir = run["root"] / "export"
    assert main(["export", "--checkpoint", run["checkpoint"], "--arch", run["arch"], "--calib-batches", "1",
                 "--device", "cpu", "--out", str(export_dir)]) == EXIT_OK
    bundle = str(export_dir / "subnet.pt")

    assert main(["eval", "--bundle", bundle, "--device", "cpu", "--out", str(run["root"] / "eval-bundle")]) == EXIT_OK
    assert main(["eval", "--checkpoint", run["checkpoint"], "--arch", run["arch"], "--calib-batches", "1",
                 "--device", "cpu", "--out", str(run["root"] / "eval-inherit")]) == EXIT_OK
    from_bundle = json.loads((run["root"] / "eval-bundle" / "eval.json").read_text())
    inherited = json.loads((run["root"] / "eval-inherit" / "eval.json").read_text())
    assert from_bundle == inherited
    assert from_bundle["test_acc"] is not None


def test_export_rejects_other_space(run, tmp_path):
    arch = json.loads(open(run["arch"]).read())
    arch["space_id"] = "paper"
    other = _write(tmp_path / "arch.json", arch)
    assert main(["export", "--checkpoint", run["checkpoint"], "--arch", other, "--device", "cpu",
                 "--out", str(tmp_path)]) == EXIT_CONFIG


def test_eval_needs_a_model(tmp_path):
    assert main(["eval", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_finetune(run):
    export_dir = run["root"] / "export-small"
    assert main(["export", "--checkpoint", run["checkpoint"], "--arch", run["small_arch"], "--calib-batches", "0",
                 "--device", "cpu", "--out", str(export_dir)]) == EXIT_OK
    out = run["root"] / "finetune"
    assert main(["finetune", "--preset", "smoke", "--config", run["train_cfg"], "--bundle",
                 str(export_dir / "subnet.pt"), "--device", "cpu", "--out", str(out)]) == EXIT_OK
    assert (out / "subnet-finetuned.pt").exists()


def test_report(run, tmp_path):
    search_dir = run["root"] / "report-search"
    assert main(["search", "--preset", "smoke", "--config", run["search_cfg"], "--checkpoint", run["checkpoint"],
                 "--device", "cpu", "--out", str(search_dir)]) == EXIT_OK
    code = main(["report", "--candidates", str(search_dir / "candidates.csv"), "--front",
                 str(search_dir / "front.json"), "--arch", run["arch"], "--space", run["space"],
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    report = (tmp_path / "report.md").read_text()
    assert "## Pareto front" in report
    assert (tmp_path / "arch-layers.csv").exists()
    assert (tmp_path / "front.png").exists()


def test_report_without_candidates(tmp_path):
    candidates = tmp_path / "candidates.csv"
    candidates.write_text("arch_hash,ops_m,acc,budget_m,arch\n")
    assert main(["report", "--candidates", str(candidates), "--out", str(tmp_path / "out")]) == EXIT_OK
    assert (tmp_path / "out" / "front.png").exists()


def test_report_preset_breakdown(tmp_path):
    assert main(["report", "--arch", "nas-bnn-a", "--out", str(tmp_path)]) == EXIT_OK
    assert "20.81M" in (tmp_path / "report.md").read_text()


def test_ablate(run, capsys):
    out = run["root"] / "ablate"
    code = main(["ablate", "--checkpoint", run["checkpoint"], "--checkpoint", run["checkpoint"], "--config",
                 run["search_cfg"], "--preset", "smoke", "--samples", "3", "--device", "cpu", "--out", str(out)])
    assert code == EXIT_OK
    summary = json.loads((out / "ablation.json").read_text())
    assert [item["run"] for item in summary] == ["train", "train-2"]
    assert all(item["n"] == 3 for item in summary)
    assert summary[0]["mean"] == summary[1]["mean"]
    assert summary[0]["switches"]["distill"] is True
    for name in ("subnets.csv", "ablation.png", "ablation.md"):
        assert (out / name).exists()
    assert "| train-2 |" in capsys.readouterr().out


def test_invalid_checkpoint_config(run, tmp_path):
    container = torch.load(run["checkpoint"], map_location="cpu", weights_only=False)
    container["train_config"]["batch_size"] = 0
    broken = tmp_path / "broken.pt"
    torch.save(container, broken)
    code = main(["search", "--preset", "smoke", "--config", run["search_cfg"], "--checkpoint", str(broken),
                 "--device", "cpu", "--out", str(tmp_path)])
    assert code == EXIT_CONFIG
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "failed: CheckpointError"


def test_unexpected_error_still_writes_manifest(tmp_path, monkeypatch):
    def crash(args, manifest):
        raise RuntimeError("boom")

    monkeypatch.setitem(COMMANDS, "space-stats", crash)
    assert main(["space-stats", "--space", "paper", "--out", str(tmp_path)]) == EXIT_INTERNAL
    assert json.loads((tmp_path / "manifest.json").read_text())["status"] == "failed: RuntimeError"
