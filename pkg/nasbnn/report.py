"""
Search reports: front JSON, candidate CSV, accuracy-vs-OPs plot, Markdown
tables, per-layer cost tables and random-subnet accuracy distributions.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from .costmodel import CSV_COLUMNS, CostBreakdown
from .evosearch import AccuracySummary, ParetoEntry
from .searchspace import Architecture, parse_architecture

logger = logging.getLogger(__name__)

CANDIDATE_COLUMNS = ("arch_hash", "ops_m", "acc", "budget_m", "arch")
DISTRIBUTION_COLUMNS = ("run", "arch_hash", "ops_m", "acc", "arch")

PathLike = Union[str, Path]


def write_front_json(entries: Sequence[ParetoEntry], path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps([e.to_dict() for e in entries], indent=2))
    return path


def read_front_json(path: PathLike) -> List[ParetoEntry]:
    items = json.loads(Path(path).read_text())
    return [ParetoEntry(parse_architecture(item["arch"]), round(item["ops_m"] * 10 ** 6), item["acc"])
            for item in items]


def write_candidates_csv(entries: Sequence[ParetoEntry], path: PathLike) -> Path:
    """Every evaluated candidate, one row each."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CANDIDATE_COLUMNS)
        for e in entries:
            writer.writerow([e.arch.arch_hash, f"{e.ops_m:.4f}", f"{e.acc:.6f}",
                             "" if e.budget is None else e.budget, e.arch.to_json(indent=None)])
    return path


def read_candidates_csv(path: PathLike) -> List[ParetoEntry]:
    entries = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            entries.append(ParetoEntry(
                arch=parse_architecture(json.loads(row["arch"])),
                ops=round(float(row["ops_m"]) * 10 ** 6),
                acc=float(row["acc"]),
                budget=float(row["budget_m"]) if row.get("budget_m") else None,
            ))
    return entries


def write_layer_costs_csv(breakdown: CostBreakdown, path: PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for row in breakdown.layers:
            writer.writerow(list(row))
    return path


def plot_front(candidates: Sequence[ParetoEntry], front: Sequence[ParetoEntry], path: PathLike,
               title: str = "Accuracy vs OPs") -> Path:
    """Static scatter of all candidates with the front highlighted; empty inputs give an empty plot."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    if candidates:
        ax.scatter([e.ops_m for e in candidates], [100 * e.acc for e in candidates], s=10, c="0.7",
                   label="evaluated")
    if front:
        ax.plot([e.ops_m for e in front], [100 * e.acc for e in front], "o-", c="tab:red", ms=4,
                label="Pareto front")
    ax.set_xlabel("OPs (M)")
    ax.set_ylabel("Top-1 (%)")
    ax.set_title(title)
    if candidates or front:
        ax.legend(loc="lower right")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def markdown_table(entries: Sequence[ParetoEntry], names: Optional[Sequence[str]] = None) -> str:
    """Model / OPs (M) / Top-1 (%) table."""
    lines = ["| Model | OPs (M) | Top-1 (%) |", "|---|---:|---:|"]
    for i, e in enumerate(entries):
        name = names[i] if names else f"front-{i + 1}"
        lines.append(f"| {name} | {e.ops_m:.2f} | {100 * e.acc:.2f} |")
    return "\n".join(lines) + "\n"


def architecture_summary(archs: Dict[str, Architecture]) -> str:
    """Side-by-side per-layer c*_k*_g* columns, one per named architecture."""
    names = list(archs)
    columns = [archs[n].summary() for n in names]
    depth = max((len(c) for c in columns), default=0)
    lines = ["| " + " | ".join(names) + " |", "|" + "---|" * len(names)]
    for i in range(depth):
        lines.append("| " + " | ".join(c[i] if i < len(c) else "" for c in columns) + " |")
    return "\n".join(lines) + "\n"


# ============================================================================
# RANDOM-SUBNET DISTRIBUTIONS
# ============================================================================

def write_distribution_csv(runs: Dict[str, Sequence[ParetoEntry]], path: PathLike) -> Path:
    """Every sampled subnet of every run, one row each."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(DISTRIBUTION_COLUMNS)
        for run, entries in runs.items():
            for e in entries:
                writer.writerow([run, e.arch.arch_hash, f"{e.ops_m:.4f}", f"{e.acc:.6f}", e.arch.to_json(indent=None)])
    return path


def write_ablation_json(summaries: Dict[str, AccuracySummary], switches: Dict[str, Dict], path: PathLike) -> Path:
    path = Path(path)
    document = [{"run": run, "switches": switches.get(run, {}), **summary._asdict()}
                for run, summary in summaries.items()]
    path.write_text(json.dumps(document, indent=2))
    return path


def ablation_table(summaries: Dict[str, AccuracySummary], switches: Dict[str, Dict]) -> str:
    """Run / switches / mean ± std / quartiles of top-1 (%)."""
    lines = ["| Run | Switches | N | Mean (%) | Std | Q25 | Median | Q75 |", "|---|---|---:|---:|---:|---:|---:|---:|"]
    for run, s in summaries.items():
        flags = ", ".join(f"{k}={v}" for k, v in switches.get(run, {}).items())
        lines.append(f"| {run} | {flags} | {s.n} | {100 * s.mean:.2f} | {100 * s.std:.2f} | {100 * s.q25:.2f} "
                     f"| {100 * s.median:.2f} | {100 * s.q75:.2f} |")
    return "\n".join(lines) + "\n"


def plot_distributions(runs: Dict[str, Sequence[ParetoEntry]], path: PathLike,
                       title: str = "Random subnet accuracy") -> Path:
    """One box per run over its sampled subnets."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(runs)), 4), constrained_layout=True)
    names = [name for name, entries in runs.items() if entries]
    if names:
        ax.boxplot([[100 * e.acc for e in runs[name]] for name in names])
        ax.set_xticks(range(1, len(names) + 1))
        ax.set_xticklabels(names, rotation=20)
    ax.set_ylabel("Top-1 (%)")
    ax.set_title(title)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
