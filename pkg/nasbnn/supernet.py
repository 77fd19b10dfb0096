"""
Elastic weight-sharing binary supernet.

MobileNetV1-style stages of separable blocks (grouped k x k binary conv that
keeps the width, then a 1x1 binary conv that sets it), each conv wrapped in
RSign -> conv -> BN -> + real-valued shortcut -> RPReLU. Subnets are views:
first-c channels, centered kernels, block-diagonal groups, first-d blocks.
"""
import logging
import math
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import NasBnnError
from .binops import LsqQuantizer, RPReLU, RSign, bi_transform, binary_conv, weight_normalize
from .checkpoint import load_weights, read_block
from .config import ExecMode, NetConfig
from .searchspace import Architecture, SearchSpace, parse_architecture, validate

logger = logging.getLogger(__name__)

BUNDLE_KIND = "subnet"

__all__ = ["ExecMode", "Supernet", "BinarySubnet", "SupernetError", "build", "extract_subnet"]


class SupernetError(NasBnnError):
    """Invalid space for building, invalid subnet, or a bad forward call."""
    pass


# ============================================================================
# SLICING
# ============================================================================

def center_crop(weight: torch.Tensor, k: int) -> torch.Tensor:
    """Centered k x k crop of the last two axes."""
    k_max = weight.shape[-1]
    if k > k_max or (k_max - k) % 2:
        raise SupernetError(f"cannot crop kernel {k_max} to {k}")
    start = (k_max - k) // 2
    return weight[..., start:start + k, start:start + k]


def group_slice(weight: torch.Tensor, c_out: int, c_in: int, groups: int, stored_groups: int) -> torch.Tensor:
    """
    Active [c_out, c_in / groups, k, k] weight from a dense store grouped at `stored_groups`.

    Filter o of active block b = o // (c_out / groups) reads stored columns
    [(b mod m) * w, (b mod m) * w + w) with w = c_in / groups and m = groups / stored_groups.
    """
    if groups % stored_groups:
        raise SupernetError(f"groups {groups} is not a multiple of the stored groups {stored_groups}")
    w = c_in // groups
    m = groups // stored_groups
    per_block = c_out // groups
    rows = weight[:c_out]
    blocks = torch.arange(c_out, device=weight.device) // per_block
    offsets = (blocks % m) * w
    index = offsets.view(-1, 1) + torch.arange(w, device=weight.device).view(1, -1)
    index = index.view(c_out, w, 1, 1).expand(-1, -1, rows.shape[-2], rows.shape[-1])
    return torch.gather(rows, 1, index)


def real_shortcut(x: torch.Tensor, c_out: int, stride: int, strict: bool) -> torch.Tensor:
    """Bi-Real shortcut: average pool on stride, tiling concatenation when the width grows."""
    if stride > 1:
        x = F.avg_pool2d(x, kernel_size=stride, stride=stride)
    c_in = x.shape[1]
    if c_out > c_in:
        x = x.repeat(1, math.ceil(c_out / c_in), 1, 1)[:, :c_out]
    elif c_out < c_in:
        if strict:
            raise SupernetError(f"width decreases from {c_in} to {c_out}; ND constraint violated")
        x = x[:, :c_out]
    return x


# ============================================================================
# LAYERS
# ============================================================================

class BinaryUnit(nn.Module):
    """RSign -> binary conv -> BN -> + shortcut -> RPReLU, with storage at max width."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, groups: int = 1, stride: int = 1):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise SupernetError(f"stored groups {groups} must divide {in_channels} and {out_channels}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.groups = groups
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels // groups, kernel_size, kernel_size))
        nn.init.kaiming_normal_(self.weight, mode="fan_out", nonlinearity="relu")
        self.theta = nn.Parameter(torch.eye(kernel_size * kernel_size))
        self.rsign = RSign(in_channels)
        self.bn = nn.BatchNorm2d(out_channels)
        self.rprelu = RPReLU(out_channels)

    def active_weight(self, c_in: int, c_out: int, k: int, groups: int) -> torch.Tensor:
        return group_slice(center_crop(self.weight, k), c_out, c_in, groups, self.groups)

    def _batch_norm(self, x: torch.Tensor) -> torch.Tensor:
        bn = self.bn
        c = x.shape[1]
        factor = 0.0
        if bn.training:
            bn.num_batches_tracked.add_(1)
            factor = 1.0 / float(bn.num_batches_tracked) if bn.momentum is None else bn.momentum
        return F.batch_norm(x, bn.running_mean[:c], bn.running_var[:c], bn.weight[:c], bn.bias[:c],
                            bn.training, factor, bn.eps)

    def forward(self, x: torch.Tensor, c_out: int, k: int, groups: int, mode: ExecMode,
                net: NetConfig) -> torch.Tensor:
        c_in = x.shape[1]
        if c_in % groups or c_out % groups:
            raise SupernetError(f"groups {groups} must divide widths {c_in} and {c_out}")
        weight = self.active_weight(c_in, c_out, k, groups)
        if net.weight_norm:
            weight = weight_normalize(weight)
        teacher = mode == ExecMode.FWBA

        if mode == ExecMode.FWFA:
            act = x
        else:
            act = self.rsign(x, detach=teacher)

        if mode == ExecMode.BWBA:
            if net.bi_transform:
                weight = bi_transform(weight, self.theta)
            out = binary_conv(act, weight, groups=groups, stride=self.stride, padding=k // 2,
                              scale=net.weight_scale)
        else:
            out = F.conv2d(act, weight, stride=self.stride, padding=k // 2, groups=groups)

        out = self._batch_norm(out) + real_shortcut(x, c_out, self.stride, net.strict_nd)
        return self.rprelu(out, detach=teacher)

    def export_state(self, c_in: int, c_out: int, k: int, groups: int) -> Dict[str, torch.Tensor]:
        """Sliced tensors under this unit's parameter names, at exact subnet shape."""
        n = k * k
        state = {
            "weight": self.active_weight(c_in, c_out, k, groups),
            "theta": self.theta[:n, :n],
            "rsign.shift": self.rsign.shift[:c_in],
            "bn.weight": self.bn.weight[:c_out],
            "bn.bias": self.bn.bias[:c_out],
            "bn.running_mean": self.bn.running_mean[:c_out],
            "bn.running_var": self.bn.running_var[:c_out],
            "bn.num_batches_tracked": self.bn.num_batches_tracked,
            "rprelu.shift_in": self.rprelu.shift_in[:c_out],
            "rprelu.slope": self.rprelu.slope[:c_out],
            "rprelu.shift_out": self.rprelu.shift_out[:c_out],
        }
        return {name: t.detach().clone().contiguous() for name, t in state.items()}


class SeparableBlock(nn.Module):
    """conv_a: grouped k x k, c_in -> c_in with the stride; conv_b: 1x1, c_in -> c."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, groups: int, stride: int):
        super().__init__()
        self.conv_a = BinaryUnit(in_channels, in_channels, kernel_size, groups, stride)
        self.conv_b = BinaryUnit(in_channels, out_channels, 1, 1, 1)

    def forward(self, x: torch.Tensor, c_out: int, k: int, groups: int, mode: ExecMode, net: NetConfig):
        x = self.conv_a(x, x.shape[1], k, groups, mode, net)
        return self.conv_b(x, c_out, 1, 1, mode, net)


class StemConv(nn.Module):
    """First convolution (8-bit LSQ weights and inputs when enabled) followed by BN."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int):
        super().__init__()
        self.stride = stride
        self.kernel_size = kernel_size
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        nn.init.kaiming_normal_(self.weight, mode="fan_out", nonlinearity="relu")
        self.bn = nn.BatchNorm2d(out_channels)
        self.weight_quant = LsqQuantizer(8)
        self.input_quant = LsqQuantizer(8, init_step=4.0 / 127)
        self.weight_quant.init_from(self.weight)

    def forward(self, x: torch.Tensor, c_out: int, net: NetConfig) -> torch.Tensor:
        weight = self.weight[:c_out]
        if net.quantize_stem:
            weight = self.weight_quant(weight)
            x = self.input_quant(x)
        x = F.conv2d(x, weight, stride=self.stride, padding=self.kernel_size // 2)
        bn = self.bn
        factor = 0.0
        if bn.training:
            bn.num_batches_tracked.add_(1)
            factor = 1.0 / float(bn.num_batches_tracked) if bn.momentum is None else bn.momentum
        return F.batch_norm(x, bn.running_mean[:c_out], bn.running_var[:c_out], bn.weight[:c_out],
                            bn.bias[:c_out], bn.training, factor, bn.eps)


# ============================================================================
# NETWORKS
# ============================================================================

class _BinaryNetwork(nn.Module):
    """Layout and forward pass shared by the supernet and extracted subnets."""

    def __init__(self, space: SearchSpace, net: NetConfig, stem_channels: int,
                 stage_layouts: List[List[Tuple[int, int, int, int]]], head_channels: int):
        super().__init__()
        self.space = space
        self.net = net
        self.stem = StemConv(space.in_channels, stem_channels, space.stem_kernel, space.stem_stride)
        self.stages = nn.ModuleList()
        for spec, layout in zip(space.stages, stage_layouts):
            blocks = nn.ModuleList()
            for j, (c_in, c_out, k, g) in enumerate(layout):
                blocks.append(SeparableBlock(c_in, c_out, k, g, spec.stride if j == 0 else 1))
            self.stages.append(blocks)
        self.classifier = nn.Linear(head_channels, space.num_classes)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.space.in_channels:
            raise SupernetError(f"expected [batch, {self.space.in_channels}, H, W] images, got {tuple(x.shape)}")
        stride = self.space.total_stride
        if x.shape[-1] % stride or x.shape[-2] % stride:
            raise SupernetError(f"resolution {tuple(x.shape[-2:])} is not divisible by the total stride {stride}")

    def run(self, x: torch.Tensor, arch: Architecture, mode: ExecMode) -> torch.Tensor:
        self._check_input(x)
        mode = ExecMode(mode)
        x = self.stem(x, arch.stem_channels, self.net)
        for blocks, layers in zip(self.stages, arch.stages):
            for block, layer in zip(blocks, layers):
                x = block(x, layer.channels, layer.kernel, layer.groups, mode, self.net)
        x = torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)
        return F.linear(x, self.classifier.weight[:, :x.shape[1]].contiguous(), self.classifier.bias)


class Supernet(_BinaryNetwork):
    """All weights at the space maxima; `activate` selects the subnet view used by `forward`."""

    def __init__(self, space: SearchSpace, net: Optional[NetConfig] = None):
        net = net or NetConfig()
        layouts = []
        prev_max = max(space.stem_channel_choices)
        for spec in space.stages:
            g_min = min(spec.group_choices)
            if any(g % g_min for g in spec.group_choices):
                raise SupernetError(f"group choices {list(spec.group_choices)} must be multiples of {g_min}")
            if prev_max % g_min:
                raise SupernetError(f"stored groups {g_min} must divide the input width {prev_max}")
            layout = []
            for j in range(max(spec.depth_choices)):
                c_in = prev_max if j == 0 else max(spec.channel_choices)
                layout.append((c_in, max(spec.channel_choices), max(spec.kernel_choices), g_min))
            layouts.append(layout)
            prev_max = max(spec.channel_choices)
        super().__init__(space, net, max(space.stem_channel_choices), layouts, prev_max)
        self.active: Optional[Architecture] = None

    def activate(self, arch: Architecture) -> None:
        result = validate(self.space, arch, apply_nd=self.net.strict_nd)
        if not result.ok:
            raise SupernetError(f"cannot activate invalid architecture: {result.violations[0].message}")
        self.active = arch

    def deactivate(self) -> None:
        self.active = None

    def forward(self, x: torch.Tensor, mode: ExecMode = ExecMode.BWBA) -> torch.Tensor:
        if self.active is None:
            raise SupernetError("no active subnet; call activate() first")
        return self.run(x, self.active, mode)


class BinarySubnet(_BinaryNetwork):
    """Standalone network holding exactly one architecture's weights."""

    def __init__(self, space: SearchSpace, arch: Architecture, net: Optional[NetConfig] = None):
        net = net or NetConfig()
        layouts: List[List[Tuple[int, int, int, int]]] = [[] for _ in arch.stages]
        for s, j, c_in, layer in arch.iter_layers():
            layouts[s].append((c_in, layer.channels, layer.kernel, layer.groups))
        super().__init__(space, net, arch.stem_channels, layouts, arch.out_channels)
        self.arch = arch

    def forward(self, x: torch.Tensor, mode: ExecMode = ExecMode.BWBA) -> torch.Tensor:
        return self.run(x, self.arch, mode)

    def to_bundle(self) -> Dict:
        return {
            "kind": BUNDLE_KIND,
            "arch": self.arch.to_dict(),
            "space": self.space.model_dump(mode="json"),
            "net": self.net.model_dump(mode="json"),
            "state": {k: v.detach().cpu().clone() for k, v in self.state_dict().items()},
        }

    @classmethod
    def from_bundle(cls, bundle: Dict) -> "BinarySubnet":
        if bundle.get("kind") != BUNDLE_KIND:
            raise SupernetError(f"not a subnet bundle (kind={bundle.get('kind')!r})")
        space = read_block(bundle, "space", SearchSpace)
        subnet = cls(space, parse_architecture(bundle["arch"]), read_block(bundle, "net", NetConfig))
        load_weights(subnet, bundle.get("state"), "subnet bundle")
        return subnet

    def param_counts(self) -> Dict[str, int]:
        """Deployed parameter counts: binary conv weights, int8 stem, full-precision rest."""
        counts = {"binary_params": 0, "int8_params": self.stem.weight.numel(), "fp_params": 0}
        for name, tensor in self.state_dict().items():
            if name.startswith("stem.") and name.endswith("weight") and "bn" not in name:
                continue
            if name.endswith("num_batches_tracked") or name.endswith("theta") or "quant" in name:
                continue
            if name.endswith(("conv_a.weight", "conv_b.weight")):
                counts["binary_params"] += tensor.numel()
            else:
                counts["fp_params"] += tensor.numel()
        return counts


def build(space: SearchSpace, net: Optional[NetConfig] = None, device: Optional[str] = None,
          seed: Optional[int] = None) -> Supernet:
    """Construct a supernet at the space maxima, BiTransforms at identity."""
    if seed is not None:
        torch.manual_seed(seed)
    supernet = Supernet(space, net)
    if device is not None:
        supernet = supernet.to(device)
    logger.info("built supernet for space '%s' with %d parameters", space.name,
                sum(p.numel() for p in supernet.parameters()))
    return supernet


def extract_subnet(supernet: Supernet, arch: Architecture) -> Dict:
    """
    Materialize one architecture's weights, BN statistics and binarizer
    parameters into a standalone bundle (BinarySubnet.from_bundle loads it).
    """
    result = validate(supernet.space, arch, apply_nd=supernet.net.strict_nd)
    if not result.ok:
        raise SupernetError(f"cannot extract invalid architecture: {result.violations[0].message}")

    state: Dict[str, torch.Tensor] = {}
    stem = supernet.stem
    c0 = arch.stem_channels
    state["stem.weight"] = stem.weight[:c0]
    for name in ("weight", "bias", "running_mean", "running_var"):
        state[f"stem.bn.{name}"] = getattr(stem.bn, name)[:c0]
    state["stem.bn.num_batches_tracked"] = stem.bn.num_batches_tracked
    state["stem.weight_quant.step"] = stem.weight_quant.step
    state["stem.input_quant.step"] = stem.input_quant.step

    for s, j, c_in, layer in arch.iter_layers():
        block = supernet.stages[s][j]
        prefix = f"stages.{s}.{j}."
        for name, t in block.conv_a.export_state(c_in, c_in, layer.kernel, layer.groups).items():
            state[prefix + "conv_a." + name] = t
        for name, t in block.conv_b.export_state(c_in, layer.channels, 1, 1).items():
            state[prefix + "conv_b." + name] = t

    state["classifier.weight"] = supernet.classifier.weight[:, :arch.out_channels]
    state["classifier.bias"] = supernet.classifier.bias
    state = {k: v.detach().cpu().clone().contiguous() for k, v in state.items()}

    return {
        "kind": BUNDLE_KIND,
        "arch": arch.to_dict(),
        "space": supernet.space.model_dump(mode="json"),
        "net": supernet.net.model_dump(mode="json"),
        "state": state,
    }


# ============================================================================
# BATCH-NORM STATE
# ============================================================================

def bn_layers(module: nn.Module) -> List[nn.BatchNorm2d]:
    return [m for m in module.modules() if isinstance(m, nn.BatchNorm2d)]


def snapshot_bn(module: nn.Module) -> List[Dict[str, torch.Tensor]]:
    return [{"running_mean": bn.running_mean.clone(), "running_var": bn.running_var.clone(),
             "num_batches_tracked": bn.num_batches_tracked.clone(), "momentum": bn.momentum}
            for bn in bn_layers(module)]


def restore_bn(module: nn.Module, snapshot: List[Dict]) -> None:
    for bn, saved in zip(bn_layers(module), snapshot):
        bn.running_mean.copy_(saved["running_mean"])
        bn.running_var.copy_(saved["running_var"])
        bn.num_batches_tracked.copy_(saved["num_batches_tracked"])
        bn.momentum = saved["momentum"]


def reset_bn_for_calibration(module: nn.Module) -> None:
    """Zero the running statistics and switch to a cumulative average."""
    for bn in bn_layers(module):
        bn.reset_running_stats()
        bn.momentum = None
