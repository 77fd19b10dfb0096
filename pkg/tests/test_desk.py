"""
Desk-scale CIFAR-10 runs (hours on one accelerator). Skipped unless NASBNN_RUN_SLOW=1.
"""
import json
import statistics

import numpy as np
import pytest

from nasbnn.config import (SEARCH_PRESETS, TRAIN_PRESETS, ExecMode, SearchConfig, TrainConfig, default_device,
                           load_config)
from nasbnn.datasets import ingest_dataset
from nasbnn.evosearch import evaluate, evolve, recalibrate_bn
from nasbnn.searchspace import DESK_CIFAR_SPACE, sample_uniform
from nasbnn.supernet import build, extract_subnet
from nasbnn.trainer import finetune, train

pytestmark = pytest.mark.slow


def _spearman(x, y) -> float:
    rx = np.argsort(np.argsort(x)).astype(float)
    ry = np.argsort(np.argsort(y)).astype(float)
    return float(np.corrcoef(rx, ry)[0, 1])


def _mean_random_train_acc(metrics_path, epoch: int) -> float:
    records = [json.loads(line) for line in metrics_path.read_text().splitlines()]
    return statistics.mean(r["train_acc_random"] for r in records if "step" in r and r["epoch"] == epoch)


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    cfg = load_config(TrainConfig, TRAIN_PRESETS, "desk")
    data = ingest_dataset(cfg.dataset)
    net = build(DESK_CIFAR_SPACE, cfg.net, default_device(), seed=cfg.seed)
    result = train(net, cfg, data, out / "bi-teacher")
    return {"out": out, "cfg": cfg, "data": data, "net": net, "result": result}


def test_random_subnets_learn(desk):
    net, data = desk["net"], desk["data"]
    for seed in range(20):
        arch = sample_uniform(DESK_CIFAR_SPACE, seed)
        assert evaluate(net, arch, data.val, data.train, calib_batches=16, batch_size=256) >= 0.40


def test_front_spreads_with_ops(desk):
    cfg = load_config(SearchConfig, SEARCH_PRESETS, "desk")
    front = evolve(desk["net"], DESK_CIFAR_SPACE, cfg, desk["data"].val, desk["data"].train)
    assert len(front) >= 3
    assert _spearman([e.ops for e in front], [e.acc for e in front]) >= 0.5
    assert all(a.acc <= b.acc for a, b in zip(front, front[1:]))
    desk["front"] = front


def test_bi_teacher_beats_binary_teacher(desk):
    cfg = desk["cfg"].model_copy(update={"teacher_mode": ExecMode.BWBA})
    control_net = build(DESK_CIFAR_SPACE, cfg.net, default_device(), seed=cfg.seed)
    control = train(control_net, cfg, desk["data"], desk["out"] / "bwba-teacher")
    epoch = cfg.epochs
    assert _mean_random_train_acc(control.metrics, epoch) < _mean_random_train_acc(desk["result"].metrics, epoch)


def test_finetune_does_not_hurt(desk):
    front = desk.get("front")
    if not front:
        pytest.skip("needs the searched front")
    arch = front[len(front) // 2].arch
    recalibrate_bn(desk["net"], arch, desk["data"].train, calib_batches=16, batch_size=256)
    bundle = extract_subnet(desk["net"], arch)
    gains = []
    for seed in range(3):
        cfg = load_config(TrainConfig, TRAIN_PRESETS, "desk-finetune", overrides={"seed": seed})
        result = finetune(bundle, cfg, desk["data"], default_device())
        assert result.acc_after >= result.acc_before - 0.002
        gains.append(result.acc_after - result.acc_before)
    assert statistics.median(gains) >= 0.003
