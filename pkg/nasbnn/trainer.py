"""
Supernet training with the sandwich rule and Bi-Teacher distillation,
plus the finetuning step for extracted subnets.
"""
import json
import logging
import math
import random
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import NasBnnError
from .checkpoint import capture_rng_state, load_checkpoint, load_weights, restore_rng_state, save_checkpoint
from .config import ExecMode, TrainConfig, config_payload
from .datasets import Dataset
from .evosearch import accuracy, evaluate
from .searchspace import Architecture, as_rng, largest, sample_uniform, smallest
from .supernet import BinarySubnet, Supernet, restore_bn, snapshot_bn

logger = logging.getLogger(__name__)

SUPERNET_KIND = "supernet"
METRICS_NAME = "metrics.jsonl"


class TrainingError(NasBnnError):
    """Training cannot proceed."""
    pass


class NonFiniteLossError(TrainingError):
    """A loss term became NaN or infinite."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss in term '{term}': {value}")
        self.term = term
        self.value = value


class StepLosses(NamedTuple):
    ce_teacher: float
    kl_smallest: float
    kl_random: Tuple[float, ...]
    total: float
    train_acc_random: float = 0.0
    distill: bool = True

    def to_record(self) -> Dict:
        record = self._asdict()
        record["kl_random"] = list(self.kl_random)
        return record


class TrainResult(NamedTuple):
    checkpoint: Path
    metrics: Path
    epochs: int
    last: Optional[StepLosses]


class FinetuneResult(NamedTuple):
    bundle: Dict
    acc_before: float
    acc_after: float


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)
        torch.backends.cudnn.benchmark = False


def distill_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """KL(p_teacher || p_student) at temperature 1; the teacher never receives gradient."""
    log_p = F.log_softmax(student_logits, dim=1)
    q = F.softmax(teacher_logits.detach(), dim=1)
    return F.kl_div(log_p, q, reduction="batchmean")


def _finite(loss: torch.Tensor, term: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(term, value)
    return value


def param_groups(model: nn.Module, weight_decay: float) -> List[Dict]:
    """Weight decay on conv and linear weights only; BN, binarizer, theta and LSQ steps are exempt."""
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if name.endswith(".weight") and ".bn." not in name:
            decay.append(param)
        else:
            no_decay.append(param)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def build_optimizer(model: nn.Module, cfg: TrainConfig, total_steps: int):
    optimizer = torch.optim.Adam(param_groups(model, cfg.weight_decay), lr=cfg.lr_init)
    total_steps = max(1, total_steps)

    def schedule(step: int) -> float:
        if cfg.schedule == "constant":
            return 1.0
        return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, schedule)
    return optimizer, scheduler


def sandwich_step(net: Supernet, batch: Tuple[torch.Tensor, torch.Tensor], cfg: TrainConfig,
                  rng: Union[random.Random, int, None] = None,
                  optimizer: Optional[torch.optim.Optimizer] = None) -> StepLosses:
    """
    One sandwich-rule iteration.

    The largest subnet runs in `cfg.teacher_mode` against the labels; its
    detached logits supervise the smallest subnet and `num_random_subnets`
    ND-uniform subnets (BWBA). Gradients accumulate over all passes and, when
    an optimizer is given, a single update is applied.
    """
    images, labels = batch
    if images.shape[0] == 0:
        raise TrainingError("empty batch")
    rng = as_rng(rng)
    space = net.space
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)

    net.activate(largest(space))
    teacher_logits = net(images, cfg.teacher_mode)
    ce = F.cross_entropy(teacher_logits, labels)
    ce_value = _finite(ce, "ce_teacher")
    ce.backward()
    teacher = teacher_logits.detach()

    students: List[Tuple[str, Architecture]] = [("kl_smallest", smallest(space))]
    for i in range(cfg.num_random_subnets):
        students.append((f"kl_random[{i}]", sample_uniform(space, rng, apply_nd=cfg.apply_nd)))

    values: List[float] = []
    correct = 0.0
    for term, arch in students:
        net.activate(arch)
        logits = net(images, ExecMode.BWBA)
        loss = distill_loss(logits, teacher) if cfg.distill else F.cross_entropy(logits, labels)
        values.append(_finite(loss, term))
        loss.backward()
        if term != "kl_smallest":
            correct += (logits.detach().argmax(dim=1) == labels).float().mean().item()

    if optimizer is not None:
        optimizer.step()
    net.deactivate()

    kl_random = tuple(values[1:])
    return StepLosses(
        ce_teacher=ce_value,
        kl_smallest=values[0],
        kl_random=kl_random,
        total=ce_value + values[0] + sum(kl_random),
        train_acc_random=correct / len(kl_random) if kl_random else 0.0,
        distill=cfg.distill,
    )


def _append_jsonl(path: Path, record: Dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


class SupernetTrainer:
    """Owns the optimizer, schedule and sampling RNG of one supernet training run."""

    def __init__(self, net: Supernet, cfg: TrainConfig, data: Dataset, out_dir: Union[str, Path]):
        self.net = net
        self.cfg = cfg
        self.data = data
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.out_dir / METRICS_NAME
        self.drop_last = len(data.train) >= cfg.batch_size
        self.steps_per_epoch = (len(data.train) // cfg.batch_size if self.drop_last
                                else math.ceil(len(data.train) / cfg.batch_size))
        self.optimizer, self.scheduler = build_optimizer(net, cfg, cfg.epochs * self.steps_per_epoch)
        self.rng = random.Random(cfg.seed)
        self.epoch = 0
        self.global_step = 0
        self.optimizer_steps = 0

    @property
    def device(self) -> torch.device:
        return next(self.net.parameters()).device

    def step(self, images: torch.Tensor, labels: torch.Tensor) -> StepLosses:
        self.net.train()
        losses = sandwich_step(self.net, (images.to(self.device), labels.to(self.device)), self.cfg,
                               self.rng, self.optimizer)
        self.optimizer_steps += 1
        lr = self.optimizer.param_groups[0]["lr"]
        self.scheduler.step()
        self.global_step += 1
        _append_jsonl(self.metrics_path, {"step": self.global_step, "epoch": self.epoch + 1, "lr": lr,
                                          **losses.to_record()})
        return losses

    def validate(self) -> Dict[str, float]:
        """Held-out accuracy of the largest and smallest subnets; BN statistics are restored afterwards."""
        snapshot = snapshot_bn(self.net)
        space = self.net.space
        try:
            result = {
                name: evaluate(self.net, arch, self.data.val, self.data.train, self.cfg.calib_batches,
                               self.cfg.batch_size, self.cfg.seed)
                for name, arch in (("val_acc_largest", largest(space)), ("val_acc_smallest", smallest(space)))
            }
        finally:
            restore_bn(self.net, snapshot)
            self.net.deactivate()
        return result

    def state(self) -> Dict:
        return {
            "state": self.net.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "sampler_rng": self.rng.getstate(),
            "global_step": self.global_step,
            "space": self.net.space.model_dump(mode="json"),
            "net": self.net.net.model_dump(mode="json"),
            "train_config": config_payload(self.cfg),
        }

    def save(self, name: str = "supernet.pt") -> Path:
        return save_checkpoint(self.out_dir / name, SUPERNET_KIND, self.state(), self.net.space.name,
                               epoch=self.epoch, config=self.cfg, rng_state=capture_rng_state())

    def resume(self, path: Union[str, Path]) -> None:
        container = load_checkpoint(path, kind=SUPERNET_KIND, space_id=self.net.space.name)
        load_weights(self.net, container.get("state"), str(path))
        load_weights(self.optimizer, container.get("optimizer"), str(path))
        load_weights(self.scheduler, container.get("scheduler"), str(path))
        self.rng.setstate(container["sampler_rng"])
        self.global_step = container["global_step"]
        self.epoch = container["metadata"]["epoch"]
        restore_rng_state(container["metadata"]["rng_state"])
        logger.info("resumed from %s at epoch %d", path, self.epoch)

    def fit(self) -> TrainResult:
        last: Optional[StepLosses] = None
        checkpoint = self.out_dir / "supernet.pt"
        while self.epoch < self.cfg.epochs:
            epoch_seed = self.cfg.seed * 100003 + self.epoch
            batches = self.data.train.batches(self.cfg.batch_size, seed=epoch_seed, augment=True,
                                              drop_last=self.drop_last)
            for images, labels in batches:
                last = self.step(images, labels)
            self.epoch += 1
            if last is not None:
                logger.info("epoch %d/%d: ce_teacher %.4f kl_smallest %.4f total %.4f lr %.2e",
                            self.epoch, self.cfg.epochs, last.ce_teacher, last.kl_smallest, last.total,
                            self.optimizer.param_groups[0]["lr"])
            if self.epoch % self.cfg.eval_every == 0 or self.epoch == self.cfg.epochs:
                accs = self.validate()
                _append_jsonl(self.metrics_path, {"epoch": self.epoch, "kind": "eval", **accs})
                logger.info("epoch %d held-out accuracy: largest %.4f smallest %.4f", self.epoch,
                            accs["val_acc_largest"], accs["val_acc_smallest"])
            if self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == self.cfg.epochs:
                checkpoint = self.save()
        if not checkpoint.exists():
            checkpoint = self.save()
        return TrainResult(checkpoint, self.metrics_path, self.epoch, last)


def train(net: Supernet, cfg: TrainConfig, data: Dataset, out_dir: Union[str, Path],
          resume: Optional[Union[str, Path]] = None) -> TrainResult:
    """Run (or continue) supernet training; writes metrics.jsonl and supernet.pt into `out_dir`."""
    trainer = SupernetTrainer(net, cfg, data, out_dir)
    if resume is not None:
        trainer.resume(resume)
    return trainer.fit()


def finetune(bundle: Dict, cfg: TrainConfig, data: Dataset, device: Optional[str] = None) -> FinetuneResult:
    """Plain BWBA cross-entropy training of an extracted subnet; reports held-out accuracy before and after."""
    subnet = BinarySubnet.from_bundle(bundle)
    if device is not None:
        subnet = subnet.to(device)
    target = next(subnet.parameters()).device
    before = accuracy(subnet, data.val, cfg.batch_size)
    if cfg.epochs > 0:
        drop_last = len(data.train) >= cfg.batch_size
        steps = cfg.epochs * (len(data.train) // cfg.batch_size if drop_last
                              else math.ceil(len(data.train) / cfg.batch_size))
        optimizer, scheduler = build_optimizer(subnet, cfg, steps)
        loss = None
        for epoch in range(cfg.epochs):
            subnet.train()
            batches = data.train.batches(cfg.batch_size, seed=cfg.seed * 100003 + epoch, augment=True,
                                         drop_last=drop_last)
            for images, labels in batches:
                optimizer.zero_grad(set_to_none=True)
                loss = F.cross_entropy(subnet(images.to(target), ExecMode.BWBA), labels.to(target))
                _finite(loss, "ce")
                loss.backward()
                optimizer.step()
                scheduler.step()
            if loss is not None:
                logger.info("finetune epoch %d/%d: loss %.4f", epoch + 1, cfg.epochs, loss.item())
    after = accuracy(subnet, data.val, cfg.batch_size)
    logger.info("finetune: held-out accuracy %.4f -> %.4f", before, after)
    return FinetuneResult(subnet.to_bundle(), before, after)
