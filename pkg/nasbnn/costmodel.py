"""
OPs accounting for binary architectures.
Computes FLOPs, Int8OPs and BOPs per layer and the combined
OPs = FLOPs + Int8OPs / 8 + BOPs / 64 as an exact rational.
"""
import logging
from fractions import Fraction
from typing import List, NamedTuple, Optional, Tuple

from . import NasBnnError
from .searchspace import Architecture, SearchSpace, SearchSpaceError, feature_sizes, validate

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("stage", "layer", "type", "in_c", "out_c", "k", "g", "H", "W", "flops", "int8_ops", "bops")


class CostModelError(NasBnnError):
    """Architecture or resolution cannot be costed."""
    pass


class LayerCost(NamedTuple):
    """One row of the per-layer cost table (stage 0 is the stem, stage -1 the head)."""
    stage: int
    layer: int
    type: str
    in_c: int
    out_c: int
    k: int
    g: int
    H: int
    W: int
    flops: int = 0
    int8_ops: int = 0
    bops: int = 0


class CostBreakdown(NamedTuple):
    flops: int
    int8_ops: int
    bops: int
    elementwise_flops: int
    layers: Tuple[LayerCost, ...] = ()

    @property
    def exact_ops(self) -> Fraction:
        return Fraction(self.flops) + Fraction(self.int8_ops, 8) + Fraction(self.bops, 64)

    @property
    def total_ops(self) -> int:
        return round(self.exact_ops)

    @property
    def ops_m(self) -> float:
        return float(self.exact_ops / 10 ** 6)

    def format_ops(self) -> str:
        return f"{self.ops_m:.2f}M"


class ParamCount(NamedTuple):
    binary_params: int
    int8_params: int
    fp_params: int
    model_size_bytes: int

    @property
    def model_size_mb(self) -> float:
        return self.model_size_bytes / 10 ** 6


def conv_macs(in_c: int, out_c: int, k: int, groups: int, h_out: int, w_out: int) -> int:
    """MACs of a (grouped) convolution: out_c * (in_c / groups) * k^2 * H_out * W_out."""
    if in_c % groups or out_c % groups:
        raise CostModelError(f"groups {groups} must divide in={in_c} and out={out_c}")
    return out_c * (in_c // groups) * k * k * h_out * w_out


def conv_params(in_c: int, out_c: int, k: int, groups: int = 1) -> int:
    return out_c * (in_c // groups) * k * k


def _check(space: SearchSpace, arch: Architecture) -> None:
    result = validate(space, arch, apply_nd=False)
    if not result.ok:
        raise CostModelError(f"architecture is not valid for space '{space.name}': {result.violations[0].message}")


def count_ops(space: SearchSpace, arch: Architecture, input_resolution: Optional[int] = None,
              count_elementwise: bool = False) -> CostBreakdown:
    """
    Cost an architecture at the given resolution.

    Args:
        space: Search space (stride plan, stem kernel, classes)
        arch: Architecture to cost
        input_resolution: Square input size, defaults to the space's
        count_elementwise: Add BN / activation / shortcut overhead to FLOPs

    Returns:
        CostBreakdown whose layer rows sum exactly to its totals
    """
    _check(space, arch)
    resolution = input_resolution or space.input_resolution
    try:
        sizes = feature_sizes(space, resolution)
    except SearchSpaceError as e:
        raise CostModelError(str(e))

    rows: List[LayerCost] = []
    elementwise = 0

    h = sizes[0]
    k0 = space.stem_kernel
    rows.append(LayerCost(0, 0, "stem", space.in_channels, arch.stem_channels, k0, 1, h, h,
                          int8_ops=conv_macs(space.in_channels, arch.stem_channels, k0, 1, h, h)))
    elementwise += arch.stem_channels * h * h  # stem BN

    h_in = h
    for s, j, c_in, layer in arch.iter_layers():
        stride = space.stages[s].stride if j == 0 else 1
        h_out = h_in // stride
        c, k, g = layer
        rows.append(LayerCost(s + 1, j + 1, "conv_a", c_in, c_in, k, g, h_out, h_out,
                              bops=conv_macs(c_in, c_in, k, g, h_out, h_out)))
        rows.append(LayerCost(s + 1, j + 1, "conv_b", c_in, c, 1, 1, h_out, h_out,
                              bops=conv_macs(c_in, c, 1, 1, h_out, h_out)))
        # RSign on inputs; BN, shortcut add and RPReLU on outputs of both convs
        block = c_in * h_in * h_in + 3 * c_in * h_out * h_out
        block += c_in * h_out * h_out + 3 * c * h_out * h_out
        if stride > 1:
            block += c_in * h_in * h_in
        elementwise += block
        if count_elementwise:
            rows.append(LayerCost(s + 1, j + 1, "elementwise", c_in, c, 0, 0, h_out, h_out, flops=block))
        h_in = h_out

    c_last = arch.out_channels
    rows.append(LayerCost(-1, 0, "avgpool", c_last, c_last, h_in, 1, h_in, h_in, flops=c_last * h_in * h_in))
    rows.append(LayerCost(-1, 1, "linear", c_last, space.num_classes, 1, 1, 1, 1,
                          flops=c_last * space.num_classes + space.num_classes))
    if count_elementwise:
        rows.append(LayerCost(0, 0, "elementwise", arch.stem_channels, arch.stem_channels, 0, 0, h, h,
                              flops=arch.stem_channels * h * h))

    breakdown = CostBreakdown(
        flops=sum(r.flops for r in rows),
        int8_ops=sum(r.int8_ops for r in rows),
        bops=sum(r.bops for r in rows),
        elementwise_flops=elementwise,
        layers=tuple(rows),
    )
    logger.debug("cost %s: %s", arch.arch_hash[:8], breakdown.format_ops())
    return breakdown


def count_params(space: SearchSpace, arch: Architecture, fp_bits: int = 32) -> ParamCount:
    """
    Deployed parameter count and model size.

    Binary conv weights at 1 bit, stem weights at 8 bits, BN / RSign /
    RPReLU / linear parameters at `fp_bits`.
    """
    _check(space, arch)
    binary = 0
    fp = 4 * arch.stem_channels  # stem BN: weight, bias, running mean, running var
    int8 = conv_params(space.in_channels, arch.stem_channels, space.stem_kernel)
    for _, _, c_in, (c, k, g) in arch.iter_layers():
        binary += conv_params(c_in, c_in, k, g) + conv_params(c_in, c, 1, 1)
        fp += c_in + 4 * c_in + 3 * c_in    # conv_a: RSign, BN, RPReLU
        fp += c_in + 4 * c + 3 * c          # conv_b
    fp += arch.out_channels * space.num_classes + space.num_classes
    bits = binary + 8 * int8 + fp_bits * fp
    return ParamCount(binary, int8, fp, -(-bits // 8))
