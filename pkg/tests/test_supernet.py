import pytest
import torch

from nasbnn.config import ExecMode, NetConfig
from nasbnn.costmodel import count_params
from nasbnn.searchspace import PAPER_SPACE, Architecture, LayerChoice, largest, sample_uniform, smallest
from nasbnn.supernet import (BinarySubnet, BinaryUnit, Supernet, SupernetError, build, center_crop,
                             extract_subnet, group_slice, real_shortcut)


def _params(net):
    return {name: p.detach().clone() for name, p in net.named_parameters()}


def _logits(net, arch, images, mode=ExecMode.BWBA):
    net.eval()
    net.activate(arch)
    with torch.no_grad():
        return net(images, mode)


class TestSlicing:

    def test_center_crop(self):
        w = torch.arange(25.0).view(1, 1, 5, 5)
        torch.testing.assert_close(center_crop(w, 3), w[..., 1:4, 1:4])
        with pytest.raises(SupernetError):
            center_crop(w, 2)

    def test_block_diagonal(self):
        w = torch.arange(16.0).view(4, 4, 1, 1)
        out = group_slice(w, c_out=4, c_in=4, groups=2, stored_groups=1)
        assert out.shape == (4, 2, 1, 1)
        torch.testing.assert_close(out[0].flatten(), w[0, 0:2].flatten())
        torch.testing.assert_close(out[1].flatten(), w[1, 0:2].flatten())
        torch.testing.assert_close(out[2].flatten(), w[2, 2:4].flatten())
        torch.testing.assert_close(out[3].flatten(), w[3, 2:4].flatten())

    def test_groups_on_grouped_storage(self):
        w = torch.arange(32.0).view(8, 4, 1, 1)      # stored at g_min = 2, 8 inputs
        out = group_slice(w, c_out=8, c_in=8, groups=4, stored_groups=2)
        assert out.shape == (8, 2, 1, 1)
        torch.testing.assert_close(out[2].flatten(), w[2, 2:4].flatten())
        torch.testing.assert_close(out[4].flatten(), w[4, 0:2].flatten())

    def test_equal_groups_is_prefix(self):
        w = torch.randn(8, 4, 3, 3)
        torch.testing.assert_close(group_slice(w, 6, 8, 2, 2), w[:6])

    def test_tiling_shortcut(self):
        x = torch.tensor([1.0, 2.0]).view(1, 2, 1, 1)
        assert real_shortcut(x, 4, 1, strict=True).flatten().tolist() == [1.0, 2.0, 1.0, 2.0]
        assert real_shortcut(x, 3, 1, strict=True).flatten().tolist() == [1.0, 2.0, 1.0]

    def test_shortcut_pools_on_stride(self):
        x = torch.arange(16.0).view(1, 1, 4, 4)
        out = real_shortcut(x, 1, 2, strict=True)
        torch.testing.assert_close(out, torch.nn.functional.avg_pool2d(x, 2))

    def test_decreasing_width(self):
        x = torch.randn(1, 4, 2, 2)
        with pytest.raises(SupernetError):
            real_shortcut(x, 2, 1, strict=True)
        torch.testing.assert_close(real_shortcut(x, 2, 1, strict=False), x[:, :2])

    def test_nested_views(self):
        unit = BinaryUnit(16, 16, 5, groups=1)
        small = unit.active_weight(8, 8, 3, 1)
        big = unit.active_weight(16, 16, 3, 1)
        torch.testing.assert_close(small, big[:8, :8])
        torch.testing.assert_close(unit.active_weight(16, 16, 3, 1), center_crop(unit.active_weight(16, 16, 5, 1), 3))


class TestBuild:

    def test_paper_layout(self):
        with torch.device("meta"):
            net = Supernet(PAPER_SPACE)
        stage4 = net.stages[3]
        assert len(stage4) == 9
        assert tuple(stage4[0].conv_a.weight.shape) == (384, 96, 5, 5)
        assert all(tuple(b.conv_a.weight.shape) == (768, 192, 5, 5) for b in stage4[1:])
        assert tuple(stage4[1].conv_b.weight.shape) == (768, 768, 1, 1)
        assert tuple(stage4[0].conv_a.theta.shape) == (25, 25)
        assert tuple(net.stem.weight.shape) == (48, 3, 3, 3)
        assert net.classifier.in_features == 1536

    def test_theta_starts_at_identity(self, tiny_net):
        for blocks in tiny_net.stages:
            for block in blocks:
                n = block.conv_a.kernel_size ** 2
                torch.testing.assert_close(block.conv_a.theta.detach(), torch.eye(n))

    def test_stored_conv_weights_match_largest(self, tiny_space, tiny_net):
        stored = sum(u.weight.numel() for blocks in tiny_net.stages for b in blocks for u in (b.conv_a, b.conv_b))
        assert stored == count_params(tiny_space, largest(tiny_space)).binary_params

    def test_rejects_non_multiple_groups(self, tiny_space):
        stages = (tiny_space.stages[0], tiny_space.stages[1].model_copy(update={"group_choices": (4, 2 * 3)}))
        with pytest.raises(SupernetError):
            Supernet(tiny_space.model_copy(update={"stages": stages}))

    def test_singleton_space(self, singleton_space, images):
        net = build(singleton_space, seed=0)
        arch = largest(singleton_space)
        assert arch == smallest(singleton_space)
        bundle = extract_subnet(net, arch)
        assert sum(t.numel() for name, t in bundle["state"].items() if name.endswith("conv_a.weight")) == \
            net.stages[0][0].conv_a.weight.numel()


class TestForward:

    def test_requires_active_subnet(self, tiny_net, images):
        with pytest.raises(SupernetError):
            tiny_net(images)

    def test_rejects_bad_resolution(self, tiny_net, tiny_space):
        tiny_net.activate(largest(tiny_space))
        with pytest.raises(SupernetError):
            tiny_net(torch.randn(2, 3, 7, 7))
        with pytest.raises(SupernetError):
            tiny_net(torch.randn(2, 1, 8, 8))

    def test_rejects_invalid_arch(self, tiny_net, tiny_space):
        arch = largest(tiny_space)
        with pytest.raises(SupernetError):
            tiny_net.activate(arch._replace(stem_channels=5))

    @pytest.mark.parametrize("mode", list(ExecMode))
    def test_finite_logits(self, tiny_net, tiny_space, mode):
        logits = _logits(tiny_net, smallest(tiny_space), torch.zeros(2, 3, 8, 8), mode)
        assert logits.shape == (2, 4)
        assert torch.isfinite(logits).all()

    def test_deterministic(self, tiny_net, tiny_space, images):
        arch = sample_uniform(tiny_space, 3)
        torch.testing.assert_close(_logits(tiny_net, arch, images), _logits(tiny_net, arch, images), rtol=0, atol=0)

    def test_binary_weights_make_modes_agree(self, tiny_space, images):
        net = build(tiny_space, NetConfig(weight_norm=False), seed=1)
        with torch.no_grad():
            for blocks in net.stages:
                for block in blocks:
                    for unit in (block.conv_a, block.conv_b):
                        unit.weight.copy_(unit.weight.ge(0).float() * 2 - 1)
        arch = largest(tiny_space)
        torch.testing.assert_close(_logits(net, arch, images, ExecMode.FWBA), _logits(net, arch, images, ExecMode.BWBA))

    def test_activation_order_independent(self, tiny_net, tiny_space, images):
        a, b = largest(tiny_space), smallest(tiny_space)
        first = _logits(tiny_net, a, images)
        _logits(tiny_net, b, images)
        torch.testing.assert_close(_logits(tiny_net, a, images), first, rtol=0, atol=0)

    def test_activation_leaves_weights_untouched(self, tiny_net, tiny_space, images):
        before = _params(tiny_net)
        for arch in (largest(tiny_space), smallest(tiny_space), largest(tiny_space)):
            _logits(tiny_net, arch, images)
        tiny_net.deactivate()
        after = _params(tiny_net)
        assert all(torch.equal(before[name], after[name]) for name in before)

    def test_width_decrease_needs_relaxed_net(self, tiny_space, images):
        arch = Architecture(8, ((LayerChoice(16, 3, 1), LayerChoice(8, 3, 1)), (LayerChoice(16, 3, 2),)), "tiny")
        strict = build(tiny_space, seed=0)
        with pytest.raises(SupernetError):
            strict.activate(arch)
        relaxed = build(tiny_space, NetConfig(strict_nd=False), seed=0)
        assert torch.isfinite(_logits(relaxed, arch, images)).all()


class TestExtract:

    @pytest.mark.parametrize("pick", ["largest", "smallest", "random"])
    def test_round_trip_is_bit_exact(self, tiny_net, tiny_space, images, pick):
        arch = {"largest": largest, "smallest": smallest}.get(pick, lambda s: sample_uniform(s, 11))(tiny_space)
        expected = _logits(tiny_net, arch, images)
        subnet = BinarySubnet.from_bundle(extract_subnet(tiny_net, arch))
        subnet.eval()
        with torch.no_grad():
            torch.testing.assert_close(subnet(images), expected, rtol=0, atol=0)

    def test_param_count_matches_cost_model(self, tiny_net, tiny_space):
        arch = smallest(tiny_space)
        counts = BinarySubnet.from_bundle(extract_subnet(tiny_net, arch)).param_counts()
        expected = count_params(tiny_space, arch)
        assert counts == {"binary_params": expected.binary_params, "int8_params": expected.int8_params,
                          "fp_params": expected.fp_params}

    def test_never_activated_arch(self, tiny_net, tiny_space):
        assert tiny_net.active is None
        bundle = extract_subnet(tiny_net, sample_uniform(tiny_space, 5))
        assert bundle["kind"] == "subnet"
        assert tiny_net.active is None

    def test_invalid_arch(self, tiny_net, tiny_space):
        with pytest.raises(SupernetError):
            extract_subnet(tiny_net, largest(tiny_space)._replace(stem_channels=6))

    def test_from_bundle_checks_kind(self, tiny_net, tiny_space):
        bundle = extract_subnet(tiny_net, largest(tiny_space))
        bundle["kind"] = "supernet"
        with pytest.raises(SupernetError):
            BinarySubnet.from_bundle(bundle)
