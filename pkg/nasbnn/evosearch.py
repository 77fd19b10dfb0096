"""
Evolutionary Pareto search over a trained supernet.
Held-out split construction, per-subnet BN recalibration, accuracy
estimation and banded-budget evolution.
"""
import logging
import math
from fractions import Fraction
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch

from . import NasBnnError
from .config import ExecMode, SearchConfig
from .costmodel import count_ops
from .searchspace import (Architecture, SearchSpace, as_rng, cardinality, crossover, iter_architectures,
                          mutate, sample_uniform, smallest, validate)
from .supernet import Supernet, reset_bn_for_calibration, restore_bn, snapshot_bn

logger = logging.getLogger(__name__)


class SearchError(NasBnnError):
    """Search cannot run (e.g. every budget is below the smallest subnet)."""
    pass


class SplitError(NasBnnError):
    """Held-out split cannot be built or is empty."""
    pass


class ParetoEntry(NamedTuple):
    arch: Architecture
    ops: int
    acc: float
    budget: Optional[float] = None      # M OPs bucket the candidate was evaluated in

    @property
    def ops_m(self) -> float:
        return self.ops / 10 ** 6

    def to_dict(self) -> Dict:
        return {"arch": self.arch.to_dict(), "ops_m": round(self.ops_m, 2), "acc": self.acc}


# ============================================================================
# SPLITS
# ============================================================================

def build_val_split(labels: Sequence[int], per_class: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Hold out `per_class` random images of every class.

    Returns:
        (train_indices, val_indices), disjoint and sorted
    """
    if per_class <= 0:
        raise SplitError(f"per_class must be positive, got {per_class} (empty split)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    held_out = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < per_class:
            raise SplitError(f"class {cls} has {len(members)} images, fewer than {per_class}")
        held_out.append(rng.choice(members, size=per_class, replace=False))
    val_idx = np.sort(np.concatenate(held_out))
    train_mask = np.ones(len(labels), dtype=bool)
    train_mask[val_idx] = False
    return np.flatnonzero(train_mask), val_idx


def _device_of(net: torch.nn.Module) -> torch.device:
    return next(net.parameters()).device


# ============================================================================
# EVALUATION
# ============================================================================

@torch.no_grad()
def recalibrate_bn(net: Supernet, arch: Architecture, calib_split, calib_batches: int,
                   batch_size: int = 256, seed: int = 0) -> None:
    """Recompute running BN statistics of `arch` from training batches; weights are untouched."""
    if calib_batches <= 0 or calib_split is None:
        return
    net.activate(arch)
    reset_bn_for_calibration(net)
    device = _device_of(net)
    was_training = net.training
    net.train()
    try:
        for i, (images, _) in enumerate(calib_split.batches(batch_size, seed=seed)):
            if i >= calib_batches:
                break
            net(images.to(device), ExecMode.BWBA)
    finally:
        net.train(was_training)


@torch.no_grad()
def accuracy(model: torch.nn.Module, split, batch_size: int = 256, mode: ExecMode = ExecMode.BWBA) -> float:
    """Top-1 accuracy of a model (supernet with an active subnet, or a BinarySubnet)."""
    if split is None or len(split) == 0:
        raise SplitError("cannot evaluate on an empty split")
    device = _device_of(model)
    was_training = model.training
    model.eval()
    correct = 0
    total = 0
    try:
        for images, labels in split.batches(batch_size):
            logits = model(images.to(device), mode)
            correct += (logits.argmax(dim=1).cpu() == labels).sum().item()
            total += labels.numel()
    finally:
        model.train(was_training)
    return correct / total


def evaluate(net: Supernet, arch: Architecture, val_split, calib_split=None, calib_batches: int = 32,
             batch_size: int = 256, seed: int = 0) -> float:
    """Activate, recalibrate BN on training data, then top-1 in BWBA mode on the held-out split."""
    if val_split is None or len(val_split) == 0:
        raise SplitError("cannot evaluate on an empty split")
    net.activate(arch)
    recalibrate_bn(net, arch, calib_split, calib_batches, batch_size, seed)
    return accuracy(net, val_split, batch_size)


class AccuracySummary(NamedTuple):
    n: int
    mean: float
    std: float
    min: float
    q25: float
    median: float
    q75: float
    max: float

    @classmethod
    def of(cls, accs: Sequence[float]) -> "AccuracySummary":
        if len(accs) == 0:
            raise SearchError("no accuracies to summarize")
        values = np.asarray(accs, dtype=np.float64)
        q25, median, q75 = np.quantile(values, [0.25, 0.5, 0.75])
        return cls(len(values), float(values.mean()), float(values.std()), float(values.min()), float(q25),
                   float(median), float(q75), float(values.max()))


def evaluate_random(net: Supernet, space: SearchSpace, n: int, val_split, calib_split=None,
                    calib_batches: int = 32, batch_size: int = 256, seed: int = 0,
                    apply_nd: bool = True) -> List[ParetoEntry]:
    """
    Held-out accuracy of `n` uniformly drawn subnets, each after its own BN recalibration.

    The same seed draws the same architectures on any supernet of the space,
    so distributions from differently trained supernets are comparable.
    BN statistics are restored and the supernet deactivated afterwards.
    """
    if n <= 0:
        raise SearchError(f"need at least one subnet to sample, got {n}")
    rng = as_rng(seed)
    snapshot = snapshot_bn(net)
    entries = []
    try:
        for i in range(n):
            arch = sample_uniform(space, rng, apply_nd=apply_nd)
            acc = evaluate(net, arch, val_split, calib_split, calib_batches, batch_size, seed)
            entries.append(ParetoEntry(arch, count_ops(space, arch).total_ops, acc))
            if (i + 1) % 100 == 0:
                logger.info("evaluated %d/%d random subnets", i + 1, n)
    finally:
        restore_bn(net, snapshot)
        net.deactivate()
    return entries


# ============================================================================
# PARETO
# ============================================================================

def pareto_filter(entries: Iterable) -> List:
    """Maximal non-dominated subset under (min ops, max acc), sorted by ops; duplicates collapse."""
    ordered = sorted(entries, key=lambda e: (e.ops, -e.acc))
    front = []
    best = -math.inf
    for entry in ordered:
        if entry.acc > best:
            front.append(entry)
            best = entry.acc
    return front


def _rank_key(entry: ParetoEntry):
    return (-entry.acc, entry.ops, entry.arch.arch_hash)


class EvolutionarySearch:
    """
    Banded-budget evolution: one sub-population per OPs band, parents chosen
    by accuracy inside the band, children land in whichever band they cost.
    """

    def __init__(self, net: Supernet, space: SearchSpace, cfg: SearchConfig, val_split, calib_split=None):
        self.net = net
        self.space = space
        self.cfg = cfg
        self.val_split = val_split
        self.calib_split = calib_split
        self.rng = as_rng(cfg.seed)
        self.budgets = [Fraction(str(b)) * 10 ** 6 for b in cfg.ops_budgets] or [None]
        self.quota = max(1, math.ceil(cfg.population / len(self.budgets)))
        self.evaluated: Dict[str, ParetoEntry] = {}

    def bucket_of(self, exact_ops: Fraction) -> Optional[int]:
        for i, budget in enumerate(self.budgets):
            if budget is None or exact_ops <= budget:
                return i
        return None

    def _candidate(self, arch: Architecture) -> Optional[Tuple[int, ParetoEntry]]:
        """Evaluate once per architecture; None when it exceeds every budget."""
        result = validate(self.space, arch)
        if not result.ok:
            raise SearchError(f"candidate failed validation: {result.violations[0].message}")
        breakdown = count_ops(self.space, arch)
        bucket = self.bucket_of(breakdown.exact_ops)
        if bucket is None:
            return None
        key = arch.arch_hash
        if key not in self.evaluated:
            acc = evaluate(self.net, arch, self.val_split, self.calib_split, self.cfg.calib_batches,
                           self.cfg.batch_size, self.cfg.seed)
            budget = self.cfg.ops_budgets[bucket] if self.cfg.ops_budgets else None
            self.evaluated[key] = ParetoEntry(arch, breakdown.total_ops, acc, budget)
        return bucket, self.evaluated[key]

    def _check_feasible(self) -> None:
        floor = count_ops(self.space, smallest(self.space)).exact_ops
        if self.budgets[0] is not None and floor > self.budgets[0]:
            raise SearchError(f"budget {self.cfg.ops_budgets[0]}M is infeasible: smallest subnet costs "
                              f"{float(floor) / 1e6:.2f}M")

    def _initial_population(self) -> List[List[ParetoEntry]]:
        buckets: List[List[ParetoEntry]] = [[] for _ in self.budgets]
        if cardinality(self.space) <= self.cfg.population:
            for arch in iter_architectures(self.space):
                placed = self._candidate(arch)
                if placed is not None:
                    buckets[placed[0]].append(placed[1])
            return buckets
        attempts = self.quota * len(self.budgets) * self.cfg.max_sample_factor
        for _ in range(attempts):
            if all(len(b) >= self.quota for b in buckets):
                break
            arch = sample_uniform(self.space, self.rng)
            breakdown = count_ops(self.space, arch)
            bucket = self.bucket_of(breakdown.exact_ops)
            if bucket is None or len(buckets[bucket]) >= self.quota:
                continue
            if any(e.arch.arch_hash == arch.arch_hash for e in buckets[bucket]):
                continue
            buckets[bucket].append(self._candidate(arch)[1])
        for budget, members in zip(self.cfg.ops_budgets, buckets):
            if not members:
                logger.warning("no initial candidate found under the %sM band", budget)
        return buckets

    def _next_generation(self, buckets: List[List[ParetoEntry]]) -> List[List[ParetoEntry]]:
        cfg = self.cfg
        nxt: List[List[ParetoEntry]] = []
        parent_pools = []
        for members in buckets:
            members = sorted(members, key=_rank_key)
            n_parents = max(1, math.ceil(cfg.parent_fraction * len(members))) if members else 0
            parent_pools.append(members[:n_parents])
            nxt.append(list(members[:n_parents]))

        for parents in parent_pools:
            if not parents:
                continue
            needed = self.quota - len(parents)
            for _ in range(needed * cfg.max_sample_factor):
                if needed <= 0:
                    break
                if len(parents) > 1 and self.rng.random() < cfg.crossover_fraction:
                    a, b = self.rng.sample(parents, 2)
                    child = crossover(self.space, a.arch, b.arch, self.rng)
                else:
                    child = mutate(self.space, self.rng.choice(parents).arch, cfg.mutation_prob, self.rng)
                placed = self._candidate(child)
                if placed is None:
                    continue
                bucket, entry = placed
                if len(nxt[bucket]) >= self.quota:
                    continue
                if any(e.arch.arch_hash == entry.arch.arch_hash for e in nxt[bucket]):
                    continue
                nxt[bucket].append(entry)
                needed -= 1
        return nxt

    def run(self) -> List[ParetoEntry]:
        self._check_feasible()
        snapshot = snapshot_bn(self.net)
        try:
            buckets = self._initial_population()
            for generation in range(self.cfg.generations):
                buckets = self._next_generation(buckets)
                best = [f"{max((e.acc for e in b), default=0.0):.3f}" for b in buckets]
                logger.info("generation %d/%d: %d evaluated, best acc per band %s",
                            generation + 1, self.cfg.generations, len(self.evaluated), best)
        finally:
            restore_bn(self.net, snapshot)
            self.net.deactivate()
        return pareto_filter(self.evaluated.values())


def evolve(net: Supernet, space: SearchSpace, cfg: SearchConfig, val_split, calib_split=None) -> List[ParetoEntry]:
    """Search the accuracy-OPs front; every entry fits its band and validates."""
    return EvolutionarySearch(net, space, cfg, val_split, calib_split).run()
