from dataclasses import replace

import pytest
import torch
from torch import nn

from cdgan.errors import InvalidConfigError, InvalidLabelError, ShapeMismatchError
from cdgan.model import (
    DomainLabel,
    ModelConfig,
    build_model,
    discriminate,
    encode,
    generate,
)


def conv_out(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def describe(layers):
    """Render layers in the cXkYsZ / R / u notation used by the architecture table."""
    out = []
    for layer in layers:
        name = type(layer).__name__
        if name == "ResidualBlock":
            out.append(f"R{layer.channels}")
        elif name == "OutputLayer":
            out.append(f"u{layer.conv.out_channels}")
        elif name == "ConvBlock" and isinstance(layer.conv, nn.ConvTranspose2d):
            out.append(f"u{layer.conv.out_channels}")
        else:
            conv = layer.conv if hasattr(layer, "conv") else layer
            out.append(f"c{conv.out_channels}k{conv.kernel_size[0]}s{conv.stride[0]}")
    return out


class TestArchitecture:
    def test_full_scale_layout(self):
        cfg = ModelConfig(n_domains=4, image_size=256)
        m = build_model(cfg)
        assert describe(m.encoder_x.layers) == ["c64k7s1", "c128k3s2", "c256k3s2",
                                                "R256", "R256", "R256", "R256"]
        assert describe(m.generator_x.layers) == ["R256", "R256", "R256", "R256",
                                                  "u256", "u128", "u3"]
        assert describe(m.discriminator_x.layers) == ["c64k3s2", "c128k3s2", "c256k3s2",
                                                      "c512k3s2", "c1024k3s2", "c5k2s1"]
        assert m.tied_groups == [("encoder_x", 1, "encoder_y", 1), ("encoder_x", 7, "encoder_y", 7),
                                 ("generator_x", 1, "generator_y", 1),
                                 ("generator_x", 6, "generator_y", 6)]

    def test_no_sharing(self):
        m = build_model(ModelConfig.no_sharing(n_domains=2, image_size=8, base_channels=4,
                                               disc_depth=3))
        assert m.tied_groups == []
        w_x = m.encoder_x.layers[0].conv.weight
        w_y = m.encoder_y.layers[0].conv.weight
        assert w_x is not w_y
        assert not torch.equal(w_x, w_y)

    @pytest.mark.parametrize("k,enc,gen", [
        (1, [1, 7], [1, 6]),
        (2, [1, 2, 6, 7], [1, 2, 5, 6]),
        (3, [1, 2, 3, 5, 6, 7], [1, 2, 3, 4, 5, 6]),
        (4, [1, 2, 3, 4, 5, 6, 7], [1, 2, 3, 4, 5, 6]),
    ])
    def test_shared_layer_counts(self, k, enc, gen):
        cfg = ModelConfig(n_domains=2, image_size=8, base_channels=4, disc_depth=3,
                          n_shared_layers=k)
        assert cfg.shared_layers() == (enc, gen)

    def test_lowest_only_and_highest_only(self):
        kw = dict(n_domains=2, image_size=8, base_channels=4, disc_depth=3)
        low = ModelConfig(share_highest=False, **kw)
        high = ModelConfig(share_lowest=False, **kw)
        assert low.shared_layers() == ([1], [6])
        assert high.shared_layers() == ([7], [1])

    def test_tied_layers_are_one_object(self, micro_config):
        m = build_model(micro_config)
        for net_a, i, net_b, j in m.tied_groups:
            assert m.layer(net_a, i) is m.layer(net_b, j)
        assert m.tying_gap() == 0.0

    def test_seeded_init_is_deterministic(self, micro_config):
        a, b = build_model(micro_config), build_model(micro_config)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)
        c = build_model(ModelConfig(**{**micro_config.to_dict(), "seed": 1}))
        assert not torch.equal(a.encoder_x.layers[1].conv.weight, c.encoder_x.layers[1].conv.weight)

    def test_init_statistics(self):
        m = build_model(ModelConfig(n_domains=4, image_size=32, disc_depth=4))
        w = m.encoder_x.layers[3].conv1.weight
        assert abs(w.mean().item()) < 1e-3
        assert w.std().item() == pytest.approx(0.02, rel=0.05)
        assert torch.count_nonzero(m.encoder_x.layers[3].conv1.bias) == 0


class TestConfigValidation:
    def test_stride_divisibility(self):
        with pytest.raises(InvalidConfigError):
            ModelConfig(n_domains=2, image_size=30, disc_depth=3)

    def test_disc_depth_collapse(self):
        with pytest.raises(InvalidConfigError):
            ModelConfig(n_domains=2, image_size=32, disc_depth=6)

    def test_zero_shared_requires_flags_off(self):
        with pytest.raises(InvalidConfigError):
            ModelConfig(n_domains=2, image_size=8, disc_depth=3, n_shared_layers=0)

    def test_shared_range(self):
        with pytest.raises(InvalidConfigError):
            ModelConfig(n_domains=2, image_size=8, disc_depth=3, n_shared_layers=5)

    def test_spatial_arithmetic(self):
        cfg = ModelConfig(n_domains=4, image_size=256)
        size = 256
        for _ in range(5):
            size = conv_out(size, 3, 2, 1)
        assert cfg.disc_prehead_size == size == 8
        assert cfg.disc_head_size == conv_out(size, 2, 1, 0) == 7
        assert ModelConfig(n_domains=4, image_size=32, n_conv_layers=3, disc_depth=4).latent_size == 8


class TestForward:
    def test_desk_scale_shapes(self):
        cfg = ModelConfig(n_domains=4, image_size=32, disc_depth=4)
        m = build_model(cfg)
        x = torch.rand(1, 3, 32, 32) * 2 - 1
        with torch.no_grad():
            z = encode(m, "X", x)
            assert z.shape == (1, 256, 8, 8)
            y = generate(m, "Y", z, 2)
            assert y.shape == x.shape
            d = discriminate(m, "Y", y)
        assert d.realness.shape == (1,)
        assert d.class_posterior.shape == (1, 4)

    @pytest.mark.parametrize("enc", ["X", "Y"])
    @pytest.mark.parametrize("gen", ["X", "Y"])
    def test_shape_round_trip_and_range(self, micro_config, enc, gen):
        m = build_model(micro_config)
        x = torch.rand(3, 3, 8, 8) * 2 - 1
        with torch.no_grad():
            out = generate(m, gen, encode(m, enc, x) * 50, [0, 1, 1])
        assert out.shape == x.shape
        assert out.abs().max().item() <= 1.0

    def test_determinism(self, micro_config):
        m = build_model(micro_config)
        z = torch.randn(2, 32, 2, 2)
        with torch.no_grad():
            a = generate(m, "X", z, DomainLabel(1, 2))
            b = generate(m, "X", z, DomainLabel(1, 2))
        assert torch.equal(a, b)

    def test_label_changes_output(self, micro_config):
        m = build_model(micro_config)
        z = torch.randn(1, 32, 2, 2)
        with torch.no_grad():
            assert not torch.equal(generate(m, "X", z, 0), generate(m, "X", z, 1))

    def test_label_pathways(self, micro_config):
        plain = build_model(replace(micro_config, conditional_norm=False, label_at_output=False))
        m = build_model(micro_config)
        width = plain.generator_x.layers[-1].conv.in_channels
        assert m.generator_x.layers[-1].conv.in_channels == width + 2
        assert not any(type(mod).__name__ == "CondInstanceNorm" for mod in plain.modules())
        assert any(type(mod).__name__ == "CondInstanceNorm" for mod in m.modules())

    def test_conditional_norm_modulates_per_domain(self, micro_config):
        m = build_model(replace(micro_config, label_at_output=False))
        z = torch.randn(1, 32, 2, 2)
        with torch.no_grad():
            block = m.generator_x.layers[1]
            block.norm1.embed.weight.normal_()
            a = block(z, torch.tensor([[1.0, 0.0]]))
            b = block(z, torch.tensor([[0.0, 1.0]]))
        assert not torch.equal(a, b)
        with pytest.raises(InvalidLabelError):
            block(z)

    def test_tied_towers_use_same_layer(self, micro_config):
        m = build_model(micro_config)
        assert m.encoder_x.layers[0] is m.encoder_y.layers[0]
        assert m.encoder_x.layers[6] is m.encoder_y.layers[6]
        assert m.generator_x.layers[0] is m.generator_y.layers[0]
        assert m.generator_x.layers[5] is m.generator_y.layers[5]
        assert m.encoder_x.layers[1] is not m.encoder_y.layers[1]

    def test_zero_head_gives_neutral_outputs(self, small_config):
        m = build_model(small_config)
        with torch.no_grad():
            m.discriminator_x.head.weight.zero_()
            m.discriminator_x.head.bias.zero_()
            d = discriminate(m, "X", torch.rand(2, 3, 16, 16))
        assert torch.allclose(d.realness, torch.full((2,), 0.5))
        assert torch.allclose(d.class_posterior, torch.full((2, 4), 0.25))

    def test_posterior_is_simplex(self, small_config):
        m = build_model(small_config)
        with torch.no_grad():
            for layer in m.discriminator_y.layers:
                for p in layer.parameters():
                    p.normal_(0, 0.5)
            d = discriminate(m, "Y", torch.rand(5, 3, 16, 16) * 2 - 1)
        assert (d.class_posterior >= 0).all()
        assert torch.allclose(d.class_posterior.sum(1), torch.ones(5), atol=1e-6)
        assert ((d.realness > 0) & (d.realness < 1)).all()

    def test_shape_errors(self, micro_config):
        m = build_model(micro_config)
        with pytest.raises(ShapeMismatchError):
            encode(m, "X", torch.zeros(1, 3, 16, 16))
        with pytest.raises(ShapeMismatchError):
            generate(m, "X", torch.zeros(1, 16, 2, 2), 0)
        with pytest.raises(ShapeMismatchError):
            discriminate(m, "X", torch.zeros(1, 1, 8, 8))

    def test_label_errors(self, micro_config):
        m = build_model(micro_config)
        z = torch.zeros(2, 32, 2, 2)
        with pytest.raises(InvalidLabelError):
            generate(m, "X", z, 2)
        with pytest.raises(InvalidLabelError):
            generate(m, "X", z, [0, 1, 1])
        with pytest.raises(InvalidLabelError):
            DomainLabel(3, 2)

    def test_domain_label_one_hot(self):
        lab = DomainLabel(2, 4)
        assert lab.one_hot == (0.0, 0.0, 1.0, 0.0)
        assert sum(lab.one_hot) == 1.0


@pytest.mark.slow
def test_full_scale_forward_shapes():
    cfg = ModelConfig(n_domains=4, image_size=256)
    m = build_model(cfg)
    with torch.no_grad():
        z = encode(m, "X", torch.zeros(2, 3, 256, 256))
        assert z.shape == (2, 256, 64, 64)
        img = generate(m, "Y", z[:1], 2)
        assert img.shape == (1, 3, 256, 256)
        d = m.discriminator_x
        h = img
        for layer in d.layers[:-1]:
            h = layer(h)
        assert h.shape[-2:] == (8, 8)
        assert d.layers[-1](h).shape[-2:] == (7, 7)
