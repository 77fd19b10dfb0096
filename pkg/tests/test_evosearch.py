import random
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
import torch

from nasbnn.config import SearchConfig
from nasbnn.costmodel import count_ops
from nasbnn.evosearch import (AccuracySummary, ParetoEntry, SearchError, SplitError, accuracy, build_val_split,
                              evaluate, evaluate_random, evolve, pareto_filter, recalibrate_bn)
from nasbnn.searchspace import Architecture, largest, smallest, validate
from nasbnn.supernet import build

DUMMY = Architecture(8, ())


def _entry(ops, acc):
    return ParetoEntry(DUMMY, ops, acc)


def _budgets(space):
    low = float(count_ops(space, smallest(space)).exact_ops) / 1e6
    high = float(count_ops(space, largest(space)).exact_ops) / 1e6
    return [round((low + high) / 2, 6), round(high * 1.01, 6)]


def _bn_state(net):
    return {name: t.clone() for name, t in net.state_dict().items() if "running" in name}


class TestValSplit:

    def test_per_class_counts(self):
        labels = np.repeat(np.arange(5), 10)
        train_idx, val_idx = build_val_split(labels, 3, seed=0)
        assert Counter(labels[val_idx].tolist()) == {c: 3 for c in range(5)}
        assert not set(train_idx) & set(val_idx)
        assert len(train_idx) + len(val_idx) == len(labels)

    def test_deterministic(self):
        labels = np.repeat(np.arange(4), 20)
        first = build_val_split(labels, 5, seed=7)
        second = build_val_split(labels, 5, seed=7)
        np.testing.assert_array_equal(first[1], second[1])
        assert not np.array_equal(first[1], build_val_split(labels, 5, seed=8)[1])

    def test_empty_split(self):
        with pytest.raises(SplitError):
            build_val_split([0, 1, 2], 0)

    def test_short_class(self):
        with pytest.raises(SplitError, match="class 1"):
            build_val_split([0, 0, 0, 1], 2)


class TestPareto:

    def test_small_example(self):
        entries = [_entry(10, 0.5), _entry(20, 0.4), _entry(30, 0.6), _entry(30, 0.55)]
        front = pareto_filter(entries)
        assert [(e.ops, e.acc) for e in front] == [(10, 0.5), (30, 0.6)]

    def test_duplicates_collapse(self):
        front = pareto_filter([_entry(10, 0.5), _entry(10, 0.5), _entry(5, 0.2)])
        assert [(e.ops, e.acc) for e in front] == [(5, 0.2), (10, 0.5)]

    def test_empty(self):
        assert pareto_filter([]) == []

    def test_matches_brute_force(self):
        rng = random.Random(0)
        entries = [_entry(rng.randint(1, 200), rng.randint(0, 100) / 100) for _ in range(1000)]
        front = pareto_filter(entries)
        for e in front:
            assert not any(o.ops <= e.ops and o.acc >= e.acc and (o.ops, o.acc) != (e.ops, e.acc) for o in entries)
        for e in entries:
            assert any(f.ops <= e.ops and f.acc >= e.acc for f in front)
        assert all(a.ops < b.ops and a.acc < b.acc for a, b in zip(front, front[1:]))

    def test_entry_document(self):
        doc = ParetoEntry(DUMMY, 20_810_392, 0.5).to_dict()
        assert doc["ops_m"] == 20.81
        assert doc["arch"]["stem_channels"] == 8


class TestEvaluation:

    def test_recalibration_keeps_weights(self, tiny_net, tiny_space, tiny_data):
        weights = {name: p.detach().clone() for name, p in tiny_net.named_parameters()}
        recalibrate_bn(tiny_net, largest(tiny_space), tiny_data.train, calib_batches=2, batch_size=16)
        assert all(torch.equal(p, weights[name]) for name, p in tiny_net.named_parameters())
        assert tiny_net.stem.bn.momentum is None
        assert not torch.equal(tiny_net.stem.bn.running_mean, torch.zeros_like(tiny_net.stem.bn.running_mean))

    def test_no_calibration_batches(self, tiny_net, tiny_space, tiny_data):
        before = _bn_state(tiny_net)
        recalibrate_bn(tiny_net, largest(tiny_space), tiny_data.train, calib_batches=0)
        after = _bn_state(tiny_net)
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_evaluate_is_deterministic(self, tiny_net, tiny_space, tiny_data):
        arch = smallest(tiny_space)
        runs = [evaluate(tiny_net, arch, tiny_data.val, tiny_data.train, calib_batches=2, batch_size=16)
                for _ in range(2)]
        assert runs[0] == runs[1]
        assert 0.0 <= runs[0] <= 1.0

    def test_empty_split(self, tiny_net, tiny_space, tiny_data):
        with pytest.raises(SplitError):
            evaluate(tiny_net, largest(tiny_space), tiny_data.val.subset([]))

    def test_accuracy_restores_mode(self, tiny_net, tiny_space, tiny_data):
        tiny_net.activate(largest(tiny_space))
        tiny_net.train()
        accuracy(tiny_net, tiny_data.val, batch_size=4)
        assert tiny_net.training


class TestRandomSubnets:

    def test_summary_statistics(self):
        summary = AccuracySummary.of([0.1, 0.2, 0.3, 0.4])
        assert summary.n == 4
        assert summary.mean == pytest.approx(0.25)
        assert summary.median == pytest.approx(0.25)
        assert summary.q25 == pytest.approx(0.175)
        assert summary.q75 == pytest.approx(0.325)
        assert summary.std == pytest.approx(0.111803, abs=1e-6)
        assert (summary.min, summary.max) == (0.1, 0.4)

    def test_empty_summary(self):
        with pytest.raises(SearchError):
            AccuracySummary.of([])

    def test_draws_valid_subnets(self, tiny_net, tiny_space, tiny_data):
        before = _bn_state(tiny_net)
        entries = evaluate_random(tiny_net, tiny_space, 4, tiny_data.val, tiny_data.train, calib_batches=1,
                                  batch_size=16, seed=3)
        assert len(entries) == 4
        for entry in entries:
            assert validate(tiny_space, entry.arch).ok
            assert entry.ops == count_ops(tiny_space, entry.arch).total_ops
            assert 0.0 <= entry.acc <= 1.0
        assert tiny_net.active is None
        after = _bn_state(tiny_net)
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_same_seed_same_draws(self, tiny_space, tiny_data):
        runs = [evaluate_random(build(tiny_space, seed=s), tiny_space, 3, tiny_data.val, tiny_data.train,
                                calib_batches=1, batch_size=16, seed=7) for s in (0, 1)]
        assert [e.arch for e in runs[0]] == [e.arch for e in runs[1]]

    def test_needs_a_sample(self, tiny_net, tiny_space, tiny_data):
        with pytest.raises(SearchError):
            evaluate_random(tiny_net, tiny_space, 0, tiny_data.val)


class TestEvolve:

    def test_singleton_space(self, singleton_space, tiny_data):
        net = build(singleton_space, seed=0)
        cfg = SearchConfig(population=4, generations=1, calib_batches=1, batch_size=16, ops_budgets=[1000.0])
        front = evolve(net, singleton_space, cfg, tiny_data.val, tiny_data.train)
        assert [e.arch for e in front] == [largest(singleton_space)]

    def test_front_respects_budgets(self, tiny_net, tiny_space, tiny_data):
        cfg = SearchConfig(population=8, generations=2, calib_batches=1, batch_size=16,
                           ops_budgets=_budgets(tiny_space))
        before = _bn_state(tiny_net)
        front = evolve(tiny_net, tiny_space, cfg, tiny_data.val, tiny_data.train)
        assert front
        for entry in front:
            assert validate(tiny_space, entry.arch).ok
            assert entry.ops <= Fraction(str(entry.budget)) * 10 ** 6
            assert count_ops(tiny_space, entry.arch).total_ops == entry.ops
        assert tiny_net.active is None
        after = _bn_state(tiny_net)
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_seeded(self, tiny_space, tiny_data):
        cfg = SearchConfig(population=6, generations=1, calib_batches=1, batch_size=16,
                           ops_budgets=_budgets(tiny_space))
        fronts = [evolve(build(tiny_space, seed=0), tiny_space, cfg, tiny_data.val, tiny_data.train)
                  for _ in range(2)]
        assert [(e.arch, e.acc) for e in fronts[0]] == [(e.arch, e.acc) for e in fronts[1]]

    def test_infeasible_budget(self, tiny_net, tiny_space, tiny_data):
        cfg = SearchConfig(population=4, generations=1, ops_budgets=[1e-9])
        with pytest.raises(SearchError, match="infeasible"):
            evolve(tiny_net, tiny_space, cfg, tiny_data.val, tiny_data.train)
