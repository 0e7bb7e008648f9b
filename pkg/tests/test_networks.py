"""Network architectures: shape contracts, placement rules, initialization."""

import pytest
import torch

from sigan import (
    AttentionBudgetError,
    ConfigError,
    DiscriminatorArch,
    GeneratorArch,
    NonLocalBlock,
    PatchDiscriminator,
    ROLE_DA,
    ROLE_F,
    ROLE_G,
    ShapeMismatchError,
    UNetGenerator,
    init_params,
)
from sigan.networks import conv_output_size


# -- shape arithmetic oracle (independent of torch) ---------------------------


def _trace_disc_shapes(size: int, arch: DiscriminatorArch) -> list[int]:
    sizes = [size]
    for stride in arch.strides:
        sizes.append((sizes[-1] + 2 * arch.padding - arch.kernel) // stride + 1)
    return sizes


def test_discriminator_shape_oracle_256_and_128():
    arch = DiscriminatorArch()
    assert _trace_disc_shapes(256, arch) == [256, 128, 64, 32, 31, 30]
    assert _trace_disc_shapes(128, arch) == [128, 64, 32, 16, 15, 14]
    assert arch.output_hw(256) == 30
    assert arch.output_hw(128) == 14


def test_discriminator_module_matches_oracle():
    arch = DiscriminatorArch()
    disc = PatchDiscriminator(arch, ROLE_DA)
    with torch.no_grad():
        for size in (256, 128, 64, 32):
            out = disc(torch.zeros(1, 1, size, size))
            assert out.shape == (1, 1, arch.output_hw(size), arch.output_hw(size))


def test_discriminator_minimum_input_size():
    arch = DiscriminatorArch()
    assert arch.min_input_size() == 24
    with pytest.raises(ConfigError):
        arch.output_hw(16)
    disc = PatchDiscriminator(arch, ROLE_DA)
    with pytest.raises(ConfigError):
        disc(torch.zeros(1, 1, 16, 16))


def test_conv_output_size_formula():
    assert conv_output_size(256, 4, 2, 1) == 128
    assert conv_output_size(32, 4, 1, 1) == 31


# -- generator architecture descriptor ----------------------------------------


def test_default_arch_widths_cap_at_512():
    arch = GeneratorArch(image_size=256)
    assert arch.resolved_depth == 8
    assert arch.widths == [64, 128, 256, 512, 512, 512, 512, 512]


def test_depth_adapts_to_image_size():
    assert GeneratorArch(image_size=64).resolved_depth == 6
    assert GeneratorArch(image_size=192).resolved_depth == 6
    assert GeneratorArch(image_size=32, base_width=4).resolved_depth == 5


def test_explicit_depth_must_divide_image_size():
    with pytest.raises(ConfigError):
        GeneratorArch(image_size=96, depth=6)
    arch = GeneratorArch(image_size=96, depth=5)
    assert arch.resolved_depth == 5


def test_norm_absent_on_first_and_bottleneck_blocks():
    arch = GeneratorArch(image_size=64)
    flags = [arch.encoder_has_norm(i) for i in range(arch.resolved_depth)]
    assert flags[0] is False and flags[-1] is False
    assert all(flags[1:-1])


def test_parameter_shapes_match_module_exactly():
    arch = GeneratorArch(image_size=32, base_width=4)
    module = UNetGenerator(arch, ROLE_G)
    actual = {name: tuple(p.shape) for name, p in module.named_parameters()}
    assert arch.parameter_shapes() == actual
    assert arch.num_parameters() == sum(p.numel() for p in module.parameters())


def test_parameter_shapes_match_at_default_scale():
    arch = GeneratorArch(image_size=256)
    module = UNetGenerator(arch, ROLE_G)
    actual = {name: tuple(p.shape) for name, p in module.named_parameters()}
    assert arch.parameter_shapes() == actual
    assert arch.num_parameters() == sum(p.numel() for p in module.parameters())


def test_nonlocal_placement_obeys_budget():
    arch = GeneratorArch(image_size=256)
    stage = arch.nonlocal_stage()
    assert arch.decoder_resolution(stage) == 64  # last stage within the budget
    assert arch.decoder_resolution(stage + 1) == 128
    small = GeneratorArch(image_size=32, base_width=4)
    assert small.decoder_resolution(small.nonlocal_stage()) <= 64


def test_nonlocal_disabled_drops_the_block():
    arch = GeneratorArch(image_size=32, base_width=4, nonlocal_enabled=False)
    module = UNetGenerator(arch, ROLE_G)
    assert module.nonlocal_block is None


# -- generator forward ---------------------------------------------------------


def test_generator_preserves_shape_at_64():
    arch = GeneratorArch(image_size=64, base_width=4)
    module = UNetGenerator(arch, ROLE_G)
    with torch.no_grad():
        out = module(torch.rand(2, 1, 64, 64) * 2 - 1)
    assert out.shape == (2, 1, 64, 64)


def test_generator_output_in_tanh_range(tiny_gen_arch):
    module = UNetGenerator(tiny_gen_arch, ROLE_F)
    with torch.no_grad():
        out = module(torch.rand(3, 1, 32, 32) * 2 - 1)
    assert float(out.min()) >= -1.0 and float(out.max()) <= 1.0


def test_generator_rejects_wrong_shape(tiny_gen_arch):
    module = UNetGenerator(tiny_gen_arch, ROLE_G)
    with pytest.raises(ShapeMismatchError):
        module(torch.zeros(1, 1, 16, 16))
    with pytest.raises(ShapeMismatchError):
        module(torch.zeros(1, 3, 32, 32))
    with pytest.raises(ShapeMismatchError):
        module(torch.zeros(1, 32, 32))


def test_generator_rejects_non_finite_input(tiny_gen_arch):
    module = UNetGenerator(tiny_gen_arch, ROLE_G)
    bad = torch.zeros(1, 1, 32, 32)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        module(bad)


def test_generator_role_validated(tiny_gen_arch):
    with pytest.raises(ConfigError):
        UNetGenerator(tiny_gen_arch, "not_a_role")


# -- non-local block -----------------------------------------------------------


def test_nonlocal_zero_input_gives_zero_output():
    block = NonLocalBlock()
    out = block(torch.zeros(2, 3, 4, 4))
    assert torch.allclose(out, torch.zeros_like(out), atol=1e-7)


def test_nonlocal_single_position_doubles_features():
    block = NonLocalBlock()
    f = torch.randn(2, 5, 1, 1)
    out = block(f)
    assert torch.allclose(out, 2.0 * f, atol=1e-6)


def test_nonlocal_attention_rows_sum_to_one():
    block = NonLocalBlock()
    f = torch.randn(2, 3, 4, 4)
    attn = block.attention(f)
    assert attn.shape == (2, 16, 16)
    assert torch.allclose(attn.sum(dim=-1), torch.ones(2, 16), atol=1e-6)


def test_nonlocal_constant_map_passes_through_doubled():
    block = NonLocalBlock()
    f = torch.full((1, 2, 3, 3), 0.7)
    assert torch.allclose(block(f), 2.0 * f, atol=1e-6)


def test_nonlocal_budget_error():
    block = NonLocalBlock(max_positions=16)
    with pytest.raises(AttentionBudgetError):
        block(torch.zeros(1, 2, 5, 5))


def test_nonlocal_projection_variant_has_params_and_preserves_shape():
    block = NonLocalBlock(channels=4, use_projections=True)
    assert sum(p.numel() for p in block.parameters()) == 4 * (4 * 4 + 4)
    out = block(torch.randn(1, 4, 3, 3))
    assert out.shape == (1, 4, 3, 3)


# -- initialization -------------------------------------------------------------


def test_init_is_deterministic_per_seed(tiny_gen_arch, tiny_disc_arch):
    g1, f1, da1, _ = init_params(tiny_gen_arch, tiny_disc_arch, seed=4)
    g2, f2, da2, _ = init_params(tiny_gen_arch, tiny_disc_arch, seed=4)
    g3, _, _, _ = init_params(tiny_gen_arch, tiny_disc_arch, seed=5)
    for a, b in ((g1, g2), (f1, f2), (da1, da2)):
        for k, v in a.state_dict().items():
            assert torch.equal(v, b.state_dict()[k])
    assert not torch.equal(
        g1.state_dict()["enc_convs.0.weight"], g3.state_dict()["enc_convs.0.weight"]
    )


def test_init_distributions(tiny_gen_arch, tiny_disc_arch):
    g, _, _, _ = init_params(
        GeneratorArch(image_size=64, base_width=32), tiny_disc_arch, seed=0
    )
    conv_w = g.state_dict()["enc_convs.2.weight"]
    assert abs(float(conv_w.std()) - 0.02) < 0.002
    assert abs(float(conv_w.mean())) < 0.002
    norm_w = g.state_dict()["enc_norms.2.weight"]
    assert abs(float(norm_w.mean()) - 1.0) < 0.05
    assert torch.equal(g.state_dict()["enc_convs.0.bias"], torch.zeros_like(g.state_dict()["enc_convs.0.bias"]))


def test_generators_and_discriminators_differ_between_roles(tiny_gen_arch, tiny_disc_arch):
    g, f, da, db = init_params(tiny_gen_arch, tiny_disc_arch, seed=0)
    assert g.role == ROLE_G and f.role == ROLE_F
    assert not torch.equal(g.state_dict()["enc_convs.0.weight"], f.state_dict()["enc_convs.0.weight"])
    assert not torch.equal(da.state_dict()["layers.0.weight"], db.state_dict()["layers.0.weight"])


def test_instance_and_no_norm_variants_forward():
    for norm in ("instance", "none"):
        arch = GeneratorArch(image_size=32, base_width=4, norm=norm)
        module = UNetGenerator(arch, ROLE_G)
        with torch.no_grad():
            out = module(torch.rand(1, 1, 32, 32) * 2 - 1)
        assert out.shape == (1, 1, 32, 32)
        actual = {name: tuple(p.shape) for name, p in module.named_parameters()}
        assert arch.parameter_shapes() == actual


def test_batchnorm_single_sample_trains_without_error(tiny_gen_arch):
    # The bottleneck reaches 1x1 spatial extent; batch statistics over a
    # single 1x1 position are degenerate, which is why that block skips norm.
    module = UNetGenerator(tiny_gen_arch, ROLE_G)
    module.train()
    out = module(torch.rand(2, 1, 32, 32) * 2 - 1)
    assert torch.isfinite(out).all()
