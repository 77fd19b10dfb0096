"""
NAS-BNN command line
space-stats | train | search | export | finetune | eval | ablate | report
"""
# Load environment variables FIRST
from dotenv import load_dotenv
load_dotenv()

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from pydantic import ValidationError

from . import NasBnnError, __version__
from .checkpoint import (RunManifest, check_space, config_hash, load_checkpoint, load_weights, read_block,
                         save_checkpoint)
from .config import (SEARCH_PRESETS, TRAIN_PRESETS, ConfigError, NetConfig, SearchConfig, TrainConfig,
                     config_payload, default_device, load_config, log_level)
from .costmodel import count_ops, count_params
from .datasets import DatasetError, ingest_dataset
from .evosearch import (AccuracySummary, EvolutionarySearch, SplitError, accuracy, evaluate, evaluate_random,
                        pareto_filter, recalibrate_bn)
from .report import (ablation_table, architecture_summary, markdown_table, plot_distributions, plot_front,
                     read_candidates_csv, read_front_json, write_ablation_json, write_candidates_csv,
                     write_distribution_csv, write_front_json, write_layer_costs_csv)
from .searchspace import (SearchSpace, cardinality, group_width_diagnostics, largest, load_architecture,
                          load_space, smallest, stage_table)
from .supernet import BinarySubnet, Supernet, build, extract_subnet
from .trainer import SUPERNET_KIND, NonFiniteLossError, finetune, seed_everything, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SUBNET_KIND = "subnet"


# ============================================================================
# HELPERS
# ============================================================================

def _space_for(args, default: str = "desk-cifar") -> SearchSpace:
    return load_space(args.space or default)


def _device(args, configured: Optional[str] = None) -> str:
    return args.device or configured or default_device()


def _train_config(args, default_preset: str) -> TrainConfig:
    overrides = {"seed": args.seed, "deterministic": True if args.deterministic else None}
    return load_config(TrainConfig, TRAIN_PRESETS, args.preset or default_preset, args.config, overrides)


def load_supernet(path: str, device: str) -> Tuple[Supernet, Dict]:
    """Rebuild a supernet from a training checkpoint."""
    container = load_checkpoint(path, kind=SUPERNET_KIND)
    net = Supernet(read_block(container, "space", SearchSpace), read_block(container, "net", NetConfig))
    load_weights(net, container.get("state"), path)
    return net.to(device), container


def load_bundle(path: str) -> Dict:
    return load_checkpoint(path, kind=SUBNET_KIND)


def _format_count(n: int) -> str:
    return f"{n:,} (≈{float(n):.2e})"


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_space_stats(args, manifest: RunManifest) -> None:
    space = load_space(args.space or args.preset or "paper")
    manifest.space_id = space.name
    free = cardinality(space, apply_nd=False)
    nd = cardinality(space, apply_nd=True)
    low = count_ops(space, smallest(space))
    high = count_ops(space, largest(space))

    print(f"🔎 Search space: {space.name}")
    print("=" * 60)
    print(f"Architectures without ND: {_format_count(free)}")
    print(f"Architectures with ND:    {_format_count(nd)}")
    print(f"ND / unconstrained:       {nd / free:.2e}")
    print(f"OPs range at {space.input_resolution}px:     {low.format_ops()} .. {high.format_ops()}")
    print()
    print(f"{'Input':>6}  {'Operator':<17} {'Depth':<8} {'Channels':<20} {'Kernel':<8} {'Groups':<8} Stride")
    for row in stage_table(space):
        print(f"{row['input']:>6}  {row['operator']:<17} {row['depth']:<8} "
              f"{str(row['channels']):<20} {str(row['kernels']):<8} {str(row['groups']):<8} {row['stride']}")
    manifest.artifacts["stats"] = json.dumps({"cardinality": free, "cardinality_nd": nd,
                                              "ops_min": low.total_ops, "ops_max": high.total_ops})


def cmd_train(args, manifest: RunManifest) -> None:
    cfg = _train_config(args, "desk")
    space = _space_for(args, "paper" if (args.preset or "").startswith("paper") else "desk-cifar")
    manifest.config_hash, manifest.space_id, manifest.seed = manifest_fields(cfg, space)
    seed_everything(cfg.seed, cfg.deterministic)
    data = ingest_dataset(cfg.dataset)
    net = build(space, cfg.net, _device(args, cfg.device), seed=cfg.seed)
    result = train(net, cfg, data, args.out, resume=args.resume)
    manifest.artifacts.update({"checkpoint": str(result.checkpoint), "metrics": str(result.metrics)})
    print(f"✅ Trained {result.epochs} epochs -> {result.checkpoint}")


def cmd_search(args, manifest: RunManifest) -> None:
    cfg = load_config(SearchConfig, SEARCH_PRESETS, args.preset or "desk", args.config, {"seed": args.seed})
    device = _device(args, cfg.device)
    net, container = load_supernet(args.checkpoint, device)
    train_cfg = read_block(container, "train_config", TrainConfig)
    manifest.config_hash, manifest.space_id, manifest.seed = manifest_fields(cfg, net.space)
    seed_everything(cfg.seed, args.deterministic)
    data = ingest_dataset(train_cfg.dataset)

    search = EvolutionarySearch(net, net.space, cfg, data.val, data.train)
    front = search.run()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluated = sorted(search.evaluated.values(), key=lambda e: (e.ops, -e.acc))
    manifest.artifacts.update({
        "front": str(write_front_json(front, out / "front.json")),
        "candidates": str(write_candidates_csv(evaluated, out / "candidates.csv")),
        "plot": str(plot_front(evaluated, front, out / "front.png")),
    })
    (out / "front.md").write_text(markdown_table(front))
    print(f"✅ Evaluated {len(evaluated)} candidates, front of {len(front)}")
    print(markdown_table(front))


def cmd_export(args, manifest: RunManifest) -> None:
    device = _device(args)
    net, container = load_supernet(args.checkpoint, device)
    arch = load_architecture(args.arch)
    check_space(arch.space_id, container["metadata"]["space_id"])
    manifest.space_id = net.space.name
    if args.calib_batches > 0:
        train_cfg = read_block(container, "train_config", TrainConfig)
        data = ingest_dataset(train_cfg.dataset)
        recalibrate_bn(net, arch, data.train, args.calib_batches, train_cfg.batch_size, train_cfg.seed)
    bundle = extract_subnet(net, arch)
    bundle["train_config"] = container["train_config"]
    out = Path(args.out) / "subnet.pt"
    save_checkpoint(out, SUBNET_KIND, bundle, net.space.name, epoch=container["metadata"]["epoch"],
                    config=container.get("train_config"))
    cost = count_ops(net.space, arch)
    params = count_params(net.space, arch)
    manifest.artifacts["bundle"] = str(out)
    print(f"📦 Exported {args.arch} -> {out}")
    print(f"   OPs: {cost.format_ops()}  (BOPs {cost.bops:,}, Int8OPs {cost.int8_ops:,}, FLOPs {cost.flops:,})")
    print(f"   Size: {params.model_size_mb:.2f} MB")
    narrow = [r for r in group_width_diagnostics(net.space, arch) if r["below_minimum"]]
    if narrow:
        labels = ", ".join("s{stage}.{layer}={per_group}".format(**r) for r in narrow)
        print(f"   Layers under 48 channels per group: {labels}")


def cmd_finetune(args, manifest: RunManifest) -> None:
    cfg = _train_config(args, "desk-finetune")
    bundle = load_bundle(args.bundle)
    manifest.config_hash, manifest.space_id, manifest.seed = manifest_fields(cfg, None, bundle)
    seed_everything(cfg.seed, cfg.deterministic)
    data = ingest_dataset(cfg.dataset)
    result = finetune(bundle, cfg, data, _device(args, cfg.device))
    result.bundle["train_config"] = config_payload(cfg)
    out = Path(args.out) / "subnet-finetuned.pt"
    save_checkpoint(out, SUBNET_KIND, result.bundle, bundle["metadata"]["space_id"], epoch=cfg.epochs, config=cfg)
    manifest.artifacts["bundle"] = str(out)
    print(f"✅ Finetuned {cfg.epochs} epochs: held-out {100 * result.acc_before:.2f}% -> "
          f"{100 * result.acc_after:.2f}%")


def cmd_eval(args, manifest: RunManifest) -> None:
    cfg = _train_config(args, "desk")
    device = _device(args, cfg.device)
    if args.bundle:
        bundle = load_bundle(args.bundle)
        model = BinarySubnet.from_bundle(bundle).to(device)
        manifest.space_id = bundle["metadata"]["space_id"]
        if "train_config" in bundle and not args.config:
            cfg = read_block(bundle, "train_config", TrainConfig)
        data = ingest_dataset(cfg.dataset)
        val = accuracy(model, data.val, cfg.batch_size)
        test = accuracy(model, data.test, cfg.batch_size) if data.test is not None else None
    else:
        if not (args.checkpoint and args.arch):
            raise ConfigError("eval needs --bundle, or --checkpoint together with --arch")
        net, container = load_supernet(args.checkpoint, device)
        arch = load_architecture(args.arch)
        check_space(arch.space_id, container["metadata"]["space_id"])
        manifest.space_id = net.space.name
        cfg = read_block(container, "train_config", TrainConfig)
        data = ingest_dataset(cfg.dataset)
        val = evaluate(net, arch, data.val, data.train, args.calib_batches, cfg.batch_size, cfg.seed)
        test = accuracy(net, data.test, cfg.batch_size) if data.test is not None else None
    result = {"val_acc": val, "test_acc": test}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(result, indent=2))
    manifest.artifacts["eval"] = str(out / "eval.json")
    print(f"🎯 Held-out top-1: {100 * val:.2f}%")
    if test is not None:
        print(f"🎯 Test top-1:     {100 * test:.2f}%")


def ablation_switches(cfg: TrainConfig) -> Dict[str, object]:
    """The training switches an ablation compares."""
    return {"teacher_mode": cfg.teacher_mode.value, "distill": cfg.distill, "apply_nd": cfg.apply_nd,
            "weight_norm": cfg.net.weight_norm, "bi_transform": cfg.net.bi_transform}


def _run_name(path: str, taken: Dict) -> str:
    checkpoint = Path(path)
    name = checkpoint.parent.name or checkpoint.stem
    base, i = name, 2
    while name in taken:
        name = f"{base}-{i}"
        i += 1
    return name


def cmd_ablate(args, manifest: RunManifest) -> None:
    cfg = load_config(SearchConfig, SEARCH_PRESETS, args.preset or "desk", args.config, {"seed": args.seed})
    device = _device(args, cfg.device)
    manifest.config_hash, manifest.seed = config_hash(cfg), cfg.seed
    seed_everything(cfg.seed, args.deterministic)
    runs, summaries, switches, datasets = {}, {}, {}, {}
    space_id = None
    for path in args.checkpoint:
        net, container = load_supernet(path, device)
        if space_id is not None and net.space.name != space_id:
            raise ConfigError(f"{path} belongs to space '{net.space.name}', the other runs to '{space_id}'")
        space_id = manifest.space_id = net.space.name
        train_cfg = read_block(container, "train_config", TrainConfig)
        key = train_cfg.dataset.model_dump_json()
        if key not in datasets:
            datasets[key] = ingest_dataset(train_cfg.dataset)
        data = datasets[key]
        name = _run_name(path, runs)
        runs[name] = evaluate_random(net, net.space, args.samples, data.val, data.train, cfg.calib_batches,
                                     cfg.batch_size, cfg.seed, apply_nd=not args.unconstrained)
        summaries[name] = AccuracySummary.of([e.acc for e in runs[name]])
        switches[name] = ablation_switches(train_cfg)
        logger.info("%s: mean held-out accuracy %.4f over %d subnets", name, summaries[name].mean, args.samples)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = ablation_table(summaries, switches)
    (out / "ablation.md").write_text(table)
    manifest.artifacts.update({
        "subnets": str(write_distribution_csv(runs, out / "subnets.csv")),
        "summary": str(write_ablation_json(summaries, switches, out / "ablation.json")),
        "plot": str(plot_distributions(runs, out / "ablation.png")),
        "table": str(out / "ablation.md"),
    })
    print(f"🧪 {args.samples} random subnets per run, shared seed {cfg.seed}")
    print(table)


def cmd_report(args, manifest: RunManifest) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    candidates = read_candidates_csv(args.candidates) if args.candidates else []
    front = read_front_json(args.front) if args.front else pareto_filter(candidates)
    manifest.artifacts["plot"] = str(plot_front(candidates, front, out / "front.png"))

    sections = ["## Pareto front\n", markdown_table(front)]
    if front:
        names = [f"front-{i + 1}" for i in range(len(front))]
        sections += ["\n## Architectures\n", architecture_summary(dict(zip(names, (e.arch for e in front))))]
    if args.arch:
        space = _space_for(args, "paper")
        for source in args.arch:
            arch = load_architecture(source)
            breakdown = count_ops(space, arch, count_elementwise=args.count_elementwise)
            name = Path(source).stem
            path = write_layer_costs_csv(breakdown, out / f"{name}-layers.csv")
            manifest.artifacts[f"layers:{name}"] = str(path)
            sections.append(f"\n- {name}: {breakdown.format_ops()} OPs "
                            f"(+{breakdown.elementwise_flops / 1e6:.2f}M elementwise FLOPs not counted by default)\n")
    (out / "report.md").write_text("".join(sections))
    manifest.artifacts["report"] = str(out / "report.md")
    print(f"📊 Report written to {out}")


def manifest_fields(cfg, space: Optional[SearchSpace], bundle: Optional[Dict] = None):
    space_id = space.name if space is not None else bundle["metadata"]["space_id"]
    return config_hash(cfg), space_id, getattr(cfg, "seed", 0)


# ============================================================================
# PARSER
# ============================================================================

COMMANDS: Dict[str, Callable] = {
    "space-stats": cmd_space_stats,
    "train": cmd_train,
    "search": cmd_search,
    "export": cmd_export,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nasbnn", description="Binary neural architecture search")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file overriding the preset")
        p.add_argument("--preset", help="bundled preset name")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
        p.add_argument("--space", help="search-space preset name or JSON file")
        p.add_argument("--device", help="torch device (default: NASBNN_DEVICE or cuda if available)")
        return p

    add("space-stats", "cardinalities, OPs range and stage table of a search space")
    p = add("train", "train a supernet with the sandwich rule")
    p.add_argument("--resume", help="supernet checkpoint to continue from")
    p = add("search", "evolutionary Pareto search on a trained supernet")
    p.add_argument("--checkpoint", required=True)
    p = add("export", "extract a subnet bundle with inherited weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--arch", required=True, help="architecture JSON file or preset name")
    p.add_argument("--calib-batches", type=int, default=32, help="BN recalibration batches (0 to skip)")
    p = add("finetune", "finetune an extracted subnet bundle")
    p.add_argument("--bundle", required=True)
    p = add("eval", "held-out and test accuracy of a bundle or an inherited subnet")
    p.add_argument("--bundle")
    p.add_argument("--checkpoint")
    p.add_argument("--arch")
    p.add_argument("--calib-batches", type=int, default=32)
    p = add("ablate", "accuracy distribution of random subnets across trained supernets")
    p.add_argument("--checkpoint", action="append", required=True, help="supernet checkpoint (repeatable)")
    p.add_argument("--samples", type=int, default=1000, help="random subnets per checkpoint")
    p.add_argument("--unconstrained", action="store_true", help="sample without the ND constraint")
    p = add("report", "plot and tables from search outputs")
    p.add_argument("--candidates", help="candidates CSV from search")
    p.add_argument("--front", help="front JSON from search")
    p.add_argument("--arch", action="append", help="architecture for a per-layer cost CSV (repeatable)")
    p.add_argument("--count-elementwise", action="store_true", help="bill BN/activation/shortcut FLOPs")
    return parser


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, NonFiniteLossError):
        return EXIT_NUMERIC
    if isinstance(error, (DatasetError, SplitError)):
        return EXIT_DATA
    return EXIT_CONFIG


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    manifest = RunManifest.start(args.command, {"argv": list(argv if argv is not None else sys.argv[1:])},
                                 args.space or args.preset or "", args.seed or 0)
    code = EXIT_OK
    try:
        COMMANDS[args.command](args, manifest)
        manifest.finish("ok")
    except (NasBnnError, FileNotFoundError, ValidationError) as e:
        code = exit_code_for(e)
        logger.error("%s failed: %s", args.command, e)
        print(f"❌ {e}", file=sys.stderr)
        manifest.finish(f"failed: {type(e).__name__}")
    except Exception as e:
        code = EXIT_INTERNAL
        logger.exception("%s crashed", args.command)
        print(f"❌ unexpected {type(e).__name__}: {e}", file=sys.stderr)
        manifest.finish(f"failed: {type(e).__name__}")
    try:
        manifest.write(args.out)
    except OSError as e:
        logger.error("cannot write run manifest: %s", e)
    return code


if __name__ == "__main__":
    sys.exit(main())
