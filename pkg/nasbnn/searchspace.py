"""
Binary search space for NAS-BNN.
Architecture encoding, the choice catalog, the Non-Decreasing (ND) constraint,
exact cardinality and the sampling / evolution primitives.
"""
import hashlib
import json
import logging
import random
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from . import NasBnnError

logger = logging.getLogger(__name__)

PRESET_DIR = Path(__file__).parent / "presets"

RngLike = Union[int, random.Random, None]


class SearchSpaceError(NasBnnError):
    """Invalid space, architecture document or unsatisfiable request."""
    pass


# ============================================================================
# CHOICE CATALOG
# ============================================================================

def _positive_choices(v: Tuple[int, ...]) -> Tuple[int, ...]:
    if not v:
        raise ValueError("choice set must not be empty")
    if any(x <= 0 for x in v):
        raise ValueError(f"choices must be positive integers, got {list(v)}")
    return tuple(sorted(set(v)))


class StageSpec(BaseModel):
    """Choices of one searchable stage (one row of the search-space table)."""
    model_config = ConfigDict(frozen=True)

    depth_choices: Tuple[int, ...]
    channel_choices: Tuple[int, ...]
    kernel_choices: Tuple[int, ...]
    group_choices: Tuple[int, ...]
    stride: int = 1

    @field_validator('depth_choices', 'kernel_choices', 'group_choices')
    def validate_choice_set(cls, v):
        return _positive_choices(v)

    @field_validator('channel_choices')
    def validate_channels(cls, v):
        if len(set(v)) != len(v):
            raise ValueError(f"channel choices must be distinct, got {list(v)}")
        return _positive_choices(v)

    @field_validator('kernel_choices')
    def validate_kernels(cls, v):
        if any(k % 2 == 0 for k in v):
            raise ValueError(f"kernel sizes must be odd, got {list(v)}")
        return v

    @field_validator('stride')
    def validate_stride(cls, v):
        if v <= 0:
            raise ValueError("stride must be positive")
        return v

    @model_validator(mode='after')
    def validate_divisibility(self):
        for c in self.channel_choices:
            for g in self.group_choices:
                if c % g:
                    raise ValueError(f"channel choice {c} is not divisible by group choice {g}")
        return self

    @property
    def choices_per_layer(self) -> int:
        return len(self.channel_choices) * len(self.kernel_choices) * len(self.group_choices)


class SearchSpace(BaseModel):
    """Stem choices plus an ordered list of stages; hashable so tables can be cached."""
    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    stem_channel_choices: Tuple[int, ...]
    stem_stride: int = 2
    stem_kernel: int = 3
    in_channels: int = 3
    stages: Tuple[StageSpec, ...]
    input_resolution: int = 224
    num_classes: int = 1000

    @field_validator('stem_channel_choices')
    def validate_stem(cls, v):
        return _positive_choices(v)

    @field_validator('stem_stride', 'stem_kernel', 'in_channels', 'input_resolution', 'num_classes')
    def validate_positive(cls, v):
        if v <= 0:
            raise ValueError("must be a positive integer")
        return v

    @model_validator(mode='after')
    def validate_stage_boundaries(self):
        widths = [self.stem_channel_choices] + [s.channel_choices for s in self.stages]
        for i in range(1, len(widths)):
            if max(widths[i - 1]) > min(widths[i]):
                message = (f"stage {i}: max width {max(widths[i - 1])} of the previous stage exceeds "
                           f"min width {min(widths[i])}; the ND constraint is no longer stage-local")
                if self.name == "paper":
                    raise ValueError(message)
                logger.warning(message)
        return self

    @property
    def total_stride(self) -> int:
        stride = self.stem_stride
        for stage in self.stages:
            stride *= stage.stride
        return stride


def feature_sizes(space: SearchSpace, resolution: Optional[int] = None) -> List[int]:
    """Spatial size after the stem and after every stage; raises if a stride does not divide."""
    size = resolution or space.input_resolution
    sizes = []
    for stride in [space.stem_stride] + [s.stride for s in space.stages]:
        if size % stride:
            raise SearchSpaceError(f"resolution {resolution or space.input_resolution} is incompatible "
                                   f"with the stride plan (size {size} not divisible by {stride})")
        size //= stride
        sizes.append(size)
    return sizes


# ============================================================================
# ARCHITECTURE ENCODING
# ============================================================================

class LayerChoice(NamedTuple):
    """Channel width, kernel size and groups of one separable layer."""
    channels: int
    kernel: int
    groups: int

    @property
    def label(self) -> str:
        return f"c{self.channels}_k{self.kernel}_g{self.groups}"


class Architecture(NamedTuple):
    """One candidate network of a search space."""
    stem_channels: int
    stages: Tuple[Tuple[LayerChoice, ...], ...]
    space_id: str = "custom"

    @property
    def depths(self) -> Tuple[int, ...]:
        return tuple(len(layers) for layers in self.stages)

    def channel_sequence(self) -> List[int]:
        """Stem width followed by every layer width, in network order."""
        return [self.stem_channels] + [layer.channels for layers in self.stages for layer in layers]

    def iter_layers(self) -> Iterator[Tuple[int, int, int, LayerChoice]]:
        """Yield (stage index, layer index, input width, layer) with 0-based indices."""
        c_in = self.stem_channels
        for s, layers in enumerate(self.stages):
            for j, layer in enumerate(layers):
                yield s, j, c_in, layer
                c_in = layer.channels

    @property
    def out_channels(self) -> int:
        return self.channel_sequence()[-1]

    def to_dict(self) -> Dict:
        return {
            "stem_channels": self.stem_channels,
            "stages": [{"layers": [{"c": l.channels, "k": l.kernel, "g": l.groups} for l in layers]}
                       for layers in self.stages],
            "space_id": self.space_id,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Architecture":
        return parse_architecture(data)

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @property
    def arch_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(canonical.encode()).hexdigest()

    def summary(self) -> List[str]:
        """Architecture-summary rows: 'Conv2d c24_k3_g1', 'S1-L1 c48_k3_g1', ..."""
        rows = [f"Conv2d c{self.stem_channels}"]
        for s, layers in enumerate(self.stages):
            rows.extend(f"S{s + 1}-L{j + 1} {layer.label}" for j, layer in enumerate(layers))
        return rows


class LayerDocument(BaseModel):
    c: int
    k: int
    g: int


class StageDocument(BaseModel):
    layers: List[LayerDocument]


class ArchitectureDocument(BaseModel):
    """JSON interchange schema for architectures."""
    stem_channels: int
    stages: List[StageDocument]
    space_id: str = "custom"


def parse_architecture(data: Dict) -> Architecture:
    """Build an Architecture from its JSON document; schema errors name the bad field."""
    try:
        doc = ArchitectureDocument.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        raise SearchSpaceError(f"invalid architecture document at '{field}': {first['msg']}")
    return Architecture(
        stem_channels=doc.stem_channels,
        stages=tuple(tuple(LayerChoice(l.c, l.k, l.g) for l in stage.layers) for stage in doc.stages),
        space_id=doc.space_id,
    )


def load_architecture(source: Union[str, Path]) -> Architecture:
    """Load an architecture from a JSON path or a bundled preset name (e.g. 'nas-bnn-a')."""
    path = Path(source)
    if not path.exists():
        candidates = [PRESET_DIR / f"{source}.json", PRESET_DIR / str(source)]
        path = next((p for p in candidates if p.exists()), None)
        if path is None:
            raise SearchSpaceError(f"architecture file or preset not found: {source}")
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SearchSpaceError(f"cannot read architecture {path}: {e}")
    return parse_architecture(data)


def list_presets() -> List[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("nas-bnn-*.json"))


# ============================================================================
# SPACE PRESETS
# ============================================================================

PAPER_SPACE = SearchSpace(
    name="paper",
    stem_channel_choices=(24, 32, 48),
    stem_stride=2,
    stages=(
        StageSpec(depth_choices=(2, 3), channel_choices=(48, 64, 96), kernel_choices=(3,), group_choices=(1,), stride=1),
        StageSpec(depth_choices=(2, 3), channel_choices=(96, 128, 192), kernel_choices=(3, 5), group_choices=(1, 2), stride=2),
        StageSpec(depth_choices=(2, 3), channel_choices=(192, 256, 384), kernel_choices=(3, 5), group_choices=(2, 4), stride=2),
        StageSpec(depth_choices=(8, 9), channel_choices=(384, 512, 768), kernel_choices=(3, 5), group_choices=(4, 8), stride=2),
        StageSpec(depth_choices=(2, 3), channel_choices=(768, 1024, 1536), kernel_choices=(3, 5), group_choices=(8, 16), stride=2),
    ),
    input_resolution=224,
    num_classes=1000,
)

# Same structure at CIFAR scale: widths / 4, no early downsampling, stage-4 depth {3, 4}
DESK_CIFAR_SPACE = SearchSpace(
    name="desk-cifar",
    stem_channel_choices=(6, 8, 12),
    stem_stride=1,
    stages=(
        StageSpec(depth_choices=(2, 3), channel_choices=(12, 16, 24), kernel_choices=(3,), group_choices=(1,), stride=1),
        StageSpec(depth_choices=(2, 3), channel_choices=(24, 32, 48), kernel_choices=(3, 5), group_choices=(1, 2), stride=1),
        StageSpec(depth_choices=(2, 3), channel_choices=(48, 64, 96), kernel_choices=(3, 5), group_choices=(2, 4), stride=2),
        StageSpec(depth_choices=(3, 4), channel_choices=(96, 128, 192), kernel_choices=(3, 5), group_choices=(4, 8), stride=2),
        StageSpec(depth_choices=(2, 3), channel_choices=(192, 256, 384), kernel_choices=(3, 5), group_choices=(8, 16), stride=2),
    ),
    input_resolution=32,
    num_classes=10,
)

SPACE_PRESETS = {
    "paper": PAPER_SPACE,
    "desk-cifar": DESK_CIFAR_SPACE,
}


def load_space(source: Union[str, Path]) -> SearchSpace:
    """Resolve a preset name or read a SearchSpace JSON document."""
    if str(source) in SPACE_PRESETS:
        return SPACE_PRESETS[str(source)]
    path = Path(source)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise SearchSpaceError(f"cannot read search space {source}: {e}")
    try:
        return SearchSpace.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise SearchSpaceError(f"invalid search space field '{field}': {first['msg']}")


def stage_table(space: SearchSpace) -> List[Dict]:
    """Per-stage rows (stem first) with map size, for reports."""
    sizes = feature_sizes(space)
    rows = [{
        "input": space.input_resolution, "operator": "Conv2d", "depth": "1",
        "channels": list(space.stem_channel_choices), "kernels": [space.stem_kernel],
        "groups": [1], "stride": space.stem_stride,
    }]
    for i, stage in enumerate(space.stages):
        rows.append({
            "input": sizes[i], "operator": "Separable Conv2d",
            "depth": "{" + ", ".join(map(str, stage.depth_choices)) + "}",
            "channels": list(stage.channel_choices), "kernels": list(stage.kernel_choices),
            "groups": list(stage.group_choices), "stride": stage.stride,
        })
    return rows


# ============================================================================
# VALIDATION
# ============================================================================

class Violation(NamedTuple):
    stage: int      # 1-based, 0 is the stem
    layer: int      # 1-based, 0 for stage-level fields
    field: str
    message: str


class ValidationResult(NamedTuple):
    violations: Tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(space: SearchSpace, arch: Architecture, apply_nd: bool = True) -> ValidationResult:
    """Check choice membership, group divisibility and (optionally) the ND constraint."""
    violations = []
    if arch.stem_channels not in space.stem_channel_choices:
        violations.append(Violation(0, 0, "stem_channels",
                                    f"stem width {arch.stem_channels} not in {list(space.stem_channel_choices)}"))
    if len(arch.stages) != len(space.stages):
        violations.append(Violation(0, 0, "stages",
                                    f"expected {len(space.stages)} stages, got {len(arch.stages)}"))
        return ValidationResult(tuple(violations))

    prev = arch.stem_channels
    for s, (spec, layers) in enumerate(zip(space.stages, arch.stages), start=1):
        if len(layers) not in spec.depth_choices:
            violations.append(Violation(s, 0, "depth",
                                        f"stage {s} depth {len(layers)} not in {list(spec.depth_choices)}"))
        for j, layer in enumerate(layers, start=1):
            c, k, g = layer
            where = f"stage {s}, layer {j}"
            if c not in spec.channel_choices:
                violations.append(Violation(s, j, "channels", f"{where}: width {c} not in {list(spec.channel_choices)}"))
            if k not in spec.kernel_choices:
                violations.append(Violation(s, j, "kernel", f"{where}: kernel {k} not in {list(spec.kernel_choices)}"))
            if g not in spec.group_choices:
                violations.append(Violation(s, j, "groups", f"{where}: groups {g} not in {list(spec.group_choices)}"))
            elif c % g or prev % g:
                violations.append(Violation(s, j, "groups",
                                            f"{where}: groups {g} must divide input width {prev} and width {c}"))
            if apply_nd and c < prev:
                if j > 1:
                    message = f"ND at stage {s}, layers {j - 1}→{j}"
                else:
                    message = f"ND at stage {s}, layer 1 (input width {prev} > {c})"
                violations.append(Violation(s, j, "channels", message))
            prev = c
    return ValidationResult(tuple(violations))


def group_width_diagnostics(space: SearchSpace, arch: Architecture, minimum: int = 48) -> List[Dict]:
    """Per-layer input channels per group; rows below `minimum` are flagged, never rejected."""
    rows = []
    for s, j, c_in, layer in arch.iter_layers():
        per_group = c_in // layer.groups
        rows.append({"stage": s + 1, "layer": j + 1, "in_channels": c_in, "groups": layer.groups,
                     "per_group": per_group, "below_minimum": per_group < minimum})
    return rows


# ============================================================================
# EXTREMA
# ============================================================================

def _pick_groups(spec: StageSpec, c_in: int, c: int, prefer_small: bool) -> int:
    ordered = spec.group_choices if prefer_small else tuple(reversed(spec.group_choices))
    for g in ordered:
        if c % g == 0 and c_in % g == 0:
            return g
    raise SearchSpaceError(f"no group choice in {list(spec.group_choices)} divides widths {c_in} and {c}")


def _extreme(space: SearchSpace, big: bool) -> Architecture:
    pick = max if big else min
    stem = pick(space.stem_channel_choices)
    stages = []
    prev = stem
    for spec in space.stages:
        layers = []
        for _ in range(pick(spec.depth_choices)):
            c = pick(spec.channel_choices)
            if c < prev:
                c = _smallest_at_least(spec, prev)
            # densest convolution (fewest groups) is the highest-capacity choice
            layers.append(LayerChoice(c, pick(spec.kernel_choices), _pick_groups(spec, prev, c, prefer_small=big)))
            prev = c
        stages.append(tuple(layers))
    return Architecture(stem, tuple(stages), space.name)


def largest(space: SearchSpace) -> Architecture:
    """Max depth, width and kernel, min groups everywhere."""
    return _extreme(space, big=True)


def smallest(space: SearchSpace) -> Architecture:
    """Min depth, width and kernel, max groups everywhere."""
    return _extreme(space, big=False)


# ============================================================================
# CARDINALITY (exact, arbitrary precision)
# ============================================================================

def _multiplicity(spec: StageSpec, prev: int, c: int, apply_nd: bool) -> int:
    """Number of (kernel, groups) pairs that realise a layer of width c after width prev."""
    if apply_nd and c < prev:
        return 0
    groups = sum(1 for g in spec.group_choices if c % g == 0 and prev % g == 0)
    return len(spec.kernel_choices) * groups


@lru_cache(maxsize=32)
def _completion_tables(space: SearchSpace, apply_nd: bool):
    """
    Backward dynamic program over the last channel width.

    Returns (fill, after) where fill[s][j][p] counts the ways to place j more
    layers in stage s after width p and complete every later stage, and
    after[s][p] counts completions of stages s.. given incoming width p.
    """
    widths = sorted(set(space.stem_channel_choices).union(*(s.channel_choices for s in space.stages)))
    n = len(space.stages)
    after: List[Dict[int, int]] = [dict() for _ in range(n + 1)]
    after[n] = {p: 1 for p in widths}
    fill: List[List[Dict[int, int]]] = [[] for _ in range(n)]
    for s in reversed(range(n)):
        spec = space.stages[s]
        tables = [after[s + 1]]
        for _ in range(max(spec.depth_choices)):
            nxt = tables[-1]
            tables.append({
                p: sum(_multiplicity(spec, p, c, apply_nd) * nxt[c] for c in spec.channel_choices)
                for p in widths
            })
        fill[s] = tables
        after[s] = {p: sum(tables[d][p] for d in spec.depth_choices) for p in widths}
    return fill, after


def cardinality(space: SearchSpace, apply_nd: bool = True) -> int:
    """Exact number of valid architectures (Python integers, no overflow)."""
    _, after = _completion_tables(space, apply_nd)
    return sum(after[0][c] for c in space.stem_channel_choices)


def iter_architectures(space: SearchSpace, apply_nd: bool = True) -> Iterator[Architecture]:
    """Exhaustively enumerate valid architectures; only sensible for tiny spaces."""
    def stage_fill(s: int, prev: int, remaining: int, acc: Tuple[LayerChoice, ...]):
        spec = space.stages[s]
        if remaining == 0:
            yield acc, prev
            return
        for c in spec.channel_choices:
            if apply_nd and c < prev:
                continue
            for k in spec.kernel_choices:
                for g in spec.group_choices:
                    if c % g or prev % g:
                        continue
                    yield from stage_fill(s, c, remaining - 1, acc + (LayerChoice(c, k, g),))

    def stages_from(s: int, prev: int):
        if s == len(space.stages):
            yield ()
            return
        for d in space.stages[s].depth_choices:
            for layers, last in stage_fill(s, prev, d, ()):
                for rest in stages_from(s + 1, last):
                    yield (layers,) + rest

    for stem in space.stem_channel_choices:
        for stages in stages_from(0, stem):
            yield Architecture(stem, stages, space.name)


# ============================================================================
# SAMPLING AND EVOLUTION PRIMITIVES
# ============================================================================

def as_rng(rng: RngLike) -> random.Random:
    """Seeds become fresh generators; generators are used as-is."""
    if isinstance(rng, random.Random):
        return rng
    return random.Random(rng)


def _weighted_choice(rng: random.Random, options: Sequence[Tuple[object, int]]):
    total = sum(w for _, w in options)
    if total <= 0:
        raise SearchSpaceError("no admissible choice (empty space)")
    r = rng.randrange(total)
    for value, weight in options:
        if r < weight:
            return value
        r -= weight
    raise AssertionError("unreachable")


def sample_uniform(space: SearchSpace, rng: RngLike = None, apply_nd: bool = True) -> Architecture:
    """
    Draw an architecture uniformly from the valid set.

    Sequential draws weighted by exact completion counts, so the result is
    uniform over the whole (ND-constrained) space without rejection.
    """
    rng = as_rng(rng)
    fill, after = _completion_tables(space, apply_nd)
    stem = _weighted_choice(rng, [(c, after[0][c]) for c in space.stem_channel_choices])
    prev = stem
    stages = []
    for s, spec in enumerate(space.stages):
        tables = fill[s]
        depth = _weighted_choice(rng, [(d, tables[d][prev]) for d in spec.depth_choices])
        layers = []
        for remaining in range(depth, 0, -1):
            options = []
            for c in spec.channel_choices:
                if apply_nd and c < prev:
                    continue
                weight = tables[remaining - 1][c]
                for k in spec.kernel_choices:
                    for g in spec.group_choices:
                        if c % g == 0 and prev % g == 0:
                            options.append((LayerChoice(c, k, g), weight))
            layer = _weighted_choice(rng, options)
            layers.append(layer)
            prev = layer.channels
        stages.append(tuple(layers))
    return Architecture(stem, tuple(stages), space.name)


def _smallest_at_least(spec: StageSpec, width: int) -> int:
    for c in spec.channel_choices:
        if c >= width:
            return c
    raise SearchSpaceError(f"irreparable architecture: no width choice in {list(spec.channel_choices)} "
                           f"reaches the predecessor width {width}")


def repair_nd(space: SearchSpace, arch: Architecture) -> Architecture:
    """Raise (never lower) widths that fall below their predecessor; then fix group divisibility."""
    prev = arch.stem_channels
    stages = []
    for spec, layers in zip(space.stages, arch.stages):
        fixed = []
        for c, k, g in layers:
            if c < prev:
                c = _smallest_at_least(spec, prev)
            if c % g or prev % g:
                admissible = [x for x in spec.group_choices if c % x == 0 and prev % x == 0]
                if not admissible:
                    raise SearchSpaceError(f"irreparable architecture: no groups divide {prev} and {c}")
                g = min(admissible, key=lambda x: (abs(x - g), x))
            fixed.append(LayerChoice(c, k, g))
            prev = c
        stages.append(tuple(fixed))
    return arch._replace(stages=tuple(stages))


def mutate(space: SearchSpace, arch: Architecture, mutation_prob: float, rng: RngLike = None) -> Architecture:
    """Resample every gene independently with `mutation_prob`, then ND-repair."""
    rng = as_rng(rng)

    def maybe(current, choices):
        return rng.choice(choices) if rng.random() < mutation_prob else current

    stem = maybe(arch.stem_channels, space.stem_channel_choices)
    stages = []
    for spec, layers in zip(space.stages, arch.stages):
        depth = maybe(len(layers), spec.depth_choices)
        new_layers = []
        for i in range(depth):
            # extra layers start as copies of the last one
            base = layers[min(i, len(layers) - 1)]
            new_layers.append(LayerChoice(
                maybe(base.channels, spec.channel_choices),
                maybe(base.kernel, spec.kernel_choices),
                maybe(base.groups, spec.group_choices),
            ))
        stages.append(tuple(new_layers))
    return repair_nd(space, Architecture(stem, tuple(stages), arch.space_id))


def crossover(space: SearchSpace, a: Architecture, b: Architecture, rng: RngLike = None) -> Architecture:
    """Uniform crossover: every gene comes from a random parent; then ND-repair."""
    rng = as_rng(rng)

    def pick(x, y):
        return x if rng.random() < 0.5 else y

    stem = pick(a.stem_channels, b.stem_channels)
    stages = []
    for layers_a, layers_b in zip(a.stages, b.stages):
        depth = pick(len(layers_a), len(layers_b))
        child = []
        for i in range(depth):
            if i < len(layers_a) and i < len(layers_b):
                la, lb = layers_a[i], layers_b[i]
                child.append(LayerChoice(pick(la.channels, lb.channels), pick(la.kernel, lb.kernel),
                                         pick(la.groups, lb.groups)))
            else:
                child.append(layers_a[i] if i < len(layers_a) else layers_b[i])
        stages.append(tuple(child))
    return repair_nd(space, Architecture(stem, tuple(stages), a.space_id))
