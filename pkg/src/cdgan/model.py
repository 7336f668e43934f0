"""Encoders, label-conditioned generators and auxiliary-classifier discriminators.

Two role-positional towers (X and Y) each hold an encoder, a generator and a
discriminator.  Selected layers of the two encoders and of the two generators
are tied: the tower modules hold the *same* ``nn.Module`` object, so tied
weights share storage, receive summed gradients, and can never drift apart.

Layer indices are 1-based and follow the architecture table layout:

    encoder      c{b}k7s1, c{2b}k3s2, c{4b}k3s2, R{4b} x n_res
    generator    R{4b} x n_res, u{4b}, u{2b}, u{C}
    discriminator c{b}k3s2, c{2b}k3s2, ..., c(1+n_d)k2s1
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InvalidConfigError, InvalidLabelError, ShapeMismatchError

TOWERS = ("X", "Y")
NETWORKS = (
    "encoder_x",
    "encoder_y",
    "generator_x",
    "generator_y",
    "discriminator_x",
    "discriminator_y",
)


@dataclass(frozen=True)
class ModelConfig:
    n_domains: int
    image_size: int
    image_channels: int = 3
    base_channels: int = 64
    n_residual_blocks: int = 4
    n_conv_layers: int = 3
    disc_depth: int = 6
    share_lowest: bool = True
    share_highest: bool = True
    n_shared_layers: int = 1
    # instance norm inside the discriminator stack; the first layer never gets one
    disc_norm: bool = True
    # per-domain scale and shift on every generator instance norm
    conditional_norm: bool = True
    # tiled label also feeds the output conv, which has no norm after it
    label_at_output: bool = True
    leaky_slope: float = 0.2
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def positive(name):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise InvalidConfigError(f"{name} must be a positive integer, got {v!r}")

        for name in ("n_domains", "image_size", "image_channels", "base_channels",
                     "n_conv_layers", "disc_depth"):
            positive(name)
        if self.n_residual_blocks < 0:
            raise InvalidConfigError("n_residual_blocks must be >= 0")
        if not 0 <= self.n_shared_layers <= 4:
            raise InvalidConfigError(
                f"n_shared_layers must lie in [0, 4], got {self.n_shared_layers}")
        if self.n_shared_layers == 0 and (self.share_lowest or self.share_highest):
            raise InvalidConfigError(
                "n_shared_layers=0 requires share_lowest=share_highest=False")
        stride = 2 ** (self.n_conv_layers - 1)
        if self.image_size % stride:
            raise InvalidConfigError(
                f"image_size {self.image_size} is not divisible by the encoder "
                f"stride {stride}")
        if self.disc_head_size < 1:
            raise InvalidConfigError(
                f"disc_depth {self.disc_depth} collapses a {self.image_size}px image "
                f"below 1x1 at the discriminator head")
        if self.n_shared_layers > min(self.n_encoder_layers, self.n_generator_layers - 1):
            raise InvalidConfigError("n_shared_layers exceeds the network depth")
        if self.leaky_slope < 0 or self.init_std <= 0:
            raise InvalidConfigError("leaky_slope must be >= 0 and init_std > 0")

    @classmethod
    def no_sharing(cls, **kwargs) -> "ModelConfig":
        kwargs.update(n_shared_layers=0, share_lowest=False, share_highest=False)
        return cls(**kwargs)

    @property
    def latent_channels(self) -> int:
        return self.base_channels * 2 ** (self.n_conv_layers - 1)

    @property
    def latent_size(self) -> int:
        return self.image_size // 2 ** (self.n_conv_layers - 1)

    @property
    def n_encoder_layers(self) -> int:
        return self.n_conv_layers + self.n_residual_blocks

    @property
    def n_generator_layers(self) -> int:
        return self.n_residual_blocks + self.n_conv_layers

    @property
    def disc_prehead_size(self) -> int:
        size = self.image_size
        for _ in range(self.disc_depth - 1):
            size = (size + 2 - 3) // 2 + 1
        return size

    @property
    def disc_head_size(self) -> int:
        return self.disc_prehead_size - 1

    def shared_layers(self) -> tuple[list[int], list[int]]:
        """Return the 1-based tied layer indices for (encoders, generators).

        The encoder's lowest layers sit at the image end (first), the
        generator's lowest layers sit just before its output layer.
        """
        k = self.n_shared_layers
        n_enc, n_gen_body = self.n_encoder_layers, self.n_generator_layers - 1
        enc, gen = set(), set()
        if k and self.share_lowest:
            enc.update(range(1, k + 1))
            gen.update(range(n_gen_body - k + 1, n_gen_body + 1))
        if k and self.share_highest:
            enc.update(range(n_enc - k + 1, n_enc + 1))
            gen.update(range(1, k + 1))
        return sorted(enc), sorted(gen)

    def to_dict(self) -> dict:
        return asdict(self)


def _init_weights(module: nn.Module, std: float, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


class CondInstanceNorm(nn.Module):
    """Instance norm whose affine output is further scaled and shifted per domain.

    The domain embedding starts at zero, so a fresh layer equals plain
    instance norm.  A tiled label is spatially constant and the next instance
    norm would remove it; modulating after the norm keeps it visible.
    """

    def __init__(self, channels: int, n_cond: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=True)
        self.embed = nn.Linear(n_cond, 2 * channels, bias=False)
        nn.init.zeros_(self.embed.weight)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        gamma, beta = self.embed(cond.to(x.dtype)).chunk(2, dim=1)
        return self.norm(x) * (1 + gamma[:, :, None, None]) + beta[:, :, None, None]


def _make_norm(channels: int, n_cond: int) -> nn.Module:
    return CondInstanceNorm(channels, n_cond) if n_cond else nn.InstanceNorm2d(channels, affine=True)


def _apply_norm(norm: nn.Module, x: Tensor, cond: Tensor | None) -> Tensor:
    if isinstance(norm, CondInstanceNorm):
        if cond is None:
            raise InvalidLabelError("a label-conditioned layer needs a label")
        return norm(x, cond)
    return norm(x)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride, slope, norm=True, transpose=False,
                 n_cond=0):
        super().__init__()
        pad = kernel // 2
        if transpose:
            self.conv = nn.ConvTranspose2d(in_ch, out_ch, kernel, stride, padding=pad,
                                           output_padding=stride - 1)
        else:
            self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride, padding=pad)
        self.norm = _make_norm(out_ch, n_cond) if norm else None
        self.slope = slope

    def forward(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        x = self.conv(x)
        if self.norm is not None:
            x = _apply_norm(self.norm, x, cond)
        return F.leaky_relu(x, self.slope)


class ResidualBlock(nn.Module):
    """Two same-width 3x3 conv layers with an identity skip.

    ``extra_in`` widens the first conv's input (label channels); the skip path
    only carries the first ``channels`` input channels.
    """

    def __init__(self, channels: int, slope: float, extra_in: int = 0, n_cond: int = 0):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels + extra_in, channels, 3, 1, padding=1)
        self.norm1 = _make_norm(channels, n_cond)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, padding=1)
        self.norm2 = _make_norm(channels, n_cond)
        self.slope = slope

    def forward(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        h = F.leaky_relu(_apply_norm(self.norm1, self.conv1(x), cond), self.slope)
        h = _apply_norm(self.norm2, self.conv2(h), cond)
        return x[:, : self.channels] + h


class OutputLayer(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, 1, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return torch.tanh(self.conv(x))


def _encoder_layers(cfg: ModelConfig) -> list[nn.Module]:
    b, s = cfg.base_channels, cfg.leaky_slope
    layers: list[nn.Module] = [ConvBlock(cfg.image_channels, b, 7, 1, s)]
    ch = b
    for _ in range(cfg.n_conv_layers - 1):
        layers.append(ConvBlock(ch, ch * 2, 3, 2, s))
        ch *= 2
    layers += [ResidualBlock(ch, s) for _ in range(cfg.n_residual_blocks)]
    return layers


def _generator_layers(cfg: ModelConfig) -> list[nn.Module]:
    s, nd = cfg.leaky_slope, cfg.n_domains
    nc = nd if cfg.conditional_norm else 0
    ch = cfg.latent_channels
    layers: list[nn.Module] = []
    for i in range(cfg.n_residual_blocks):
        layers.append(ResidualBlock(ch, s, extra_in=nd if i == 0 else 0, n_cond=nc))
    extra = nd if not layers else 0
    # fractional-strided layers keep width on the first step, then halve: u256, u128
    widths = [cfg.latent_channels // 2 ** i for i in range(cfg.n_conv_layers - 1)]
    for w in widths:
        layers.append(ConvBlock(ch + extra, w, 3, 2, s, transpose=True, n_cond=nc))
        ch, extra = w, 0
    if cfg.label_at_output:
        extra += nd
    layers.append(OutputLayer(ch + extra, cfg.image_channels))
    return layers


def _discriminator_layers(cfg: ModelConfig) -> list[nn.Module]:
    b, s = cfg.base_channels, cfg.leaky_slope
    layers: list[nn.Module] = []
    ch = cfg.image_channels
    for i in range(cfg.disc_depth - 1):
        out = b * 2 ** i
        layers.append(ConvBlock(ch, out, 3, 2, s, norm=cfg.disc_norm and i > 0))
        ch = out
    layers.append(nn.Conv2d(ch, 1 + cfg.n_domains, 2, 1))
    return layers


class Encoder(nn.Module):
    def __init__(self, layers: Sequence[nn.Module]):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class Generator(nn.Module):
    def __init__(self, layers: Sequence[nn.Module], n_domains: int):
        super().__init__()
        self.layers = nn.ModuleList(layers)
        self.n_domains = n_domains

    def forward(self, z: Tensor, onehot: Tensor) -> Tensor:
        tiled = onehot.to(z.dtype)[:, :, None, None].expand(-1, -1, z.shape[2], z.shape[3])
        h = torch.cat([z, tiled], dim=1)
        for layer in self.layers[:-1]:
            h = layer(h, onehot)
        out = self.layers[-1]
        if out.conv.in_channels > h.shape[1]:
            tiled = onehot.to(h.dtype)[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
            h = torch.cat([h, tiled], dim=1)
        return out(h)


class DiscOutput(NamedTuple):
    realness: Tensor
    class_logits: Tensor
    class_posterior: Tensor


class Discriminator(nn.Module):
    def __init__(self, layers: Sequence[nn.Module]):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    @property
    def head(self) -> nn.Conv2d:
        return self.layers[-1]

    def forward(self, x: Tensor) -> DiscOutput:
        for layer in self.layers:
            x = layer(x)
        pooled = x.mean(dim=(2, 3))
        logits = pooled[:, 1:]
        return DiscOutput(torch.sigmoid(pooled[:, 0]), logits, torch.softmax(logits, dim=1))


TiedGroup = tuple[str, int, str, int]


class CDGAN(nn.Module):
    """The six networks plus the bookkeeping of which layers are tied."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)

        enc_shared, gen_shared = config.shared_layers()
        enc_x = _encoder_layers(config)
        enc_y = _encoder_layers(config)
        g_x = _generator_layers(config)
        g_y = _generator_layers(config)
        d_x = _discriminator_layers(config)
        d_y = _discriminator_layers(config)
        for layers in (enc_x, enc_y, g_x, g_y, d_x, d_y):
            for layer in layers:
                _init_weights(layer, config.init_std, gen)
        for i in enc_shared:
            enc_y[i - 1] = enc_x[i - 1]
        for i in gen_shared:
            g_y[i - 1] = g_x[i - 1]

        self.encoder_x = Encoder(enc_x)
        self.encoder_y = Encoder(enc_y)
        self.generator_x = Generator(g_x, config.n_domains)
        self.generator_y = Generator(g_y, config.n_domains)
        self.discriminator_x = Discriminator(d_x)
        self.discriminator_y = Discriminator(d_y)
        self.tied_groups: list[TiedGroup] = (
            [("encoder_x", i, "encoder_y", i) for i in enc_shared]
            + [("generator_x", i, "generator_y", i) for i in gen_shared]
        )

    def network(self, name: str) -> nn.Module:
        if name not in NETWORKS:
            raise KeyError(name)
        return getattr(self, name)

    def layer(self, network: str, index: int) -> nn.Module:
        return self.network(network).layers[index - 1]

    def encoder(self, tower: str) -> Encoder:
        return self.encoder_x if _tower(tower) == "X" else self.encoder_y

    def generator(self, tower: str) -> Generator:
        return self.generator_x if _tower(tower) == "X" else self.generator_y

    def discriminator(self, tower: str) -> Discriminator:
        return self.discriminator_x if _tower(tower) == "X" else self.discriminator_y

    def named_layer_parameters(self):
        """Yield ``(network/layer-index/param-name, tensor)`` for every network.

        Tied layers appear once under each network that owns them.
        """
        for net in NETWORKS:
            for i, layer in enumerate(self.network(net).layers, start=1):
                for pname, p in layer.named_parameters():
                    yield f"{net}/{i}/{pname}", p

    def eg_parameters(self) -> list[nn.Parameter]:
        return _unique(p for net in NETWORKS[:4] for p in self.network(net).parameters())

    def d_parameters(self) -> list[nn.Parameter]:
        return _unique(p for net in NETWORKS[4:] for p in self.network(net).parameters())

    def tying_gap(self) -> float:
        """Largest absolute element-wise difference over all tied groups."""
        worst = 0.0
        for net_a, i, net_b, j in self.tied_groups:
            pa = dict(self.layer(net_a, i).named_parameters())
            pb = dict(self.layer(net_b, j).named_parameters())
            for name, ta in pa.items():
                diff = (ta.detach() - pb[name].detach()).abs().max().item()
                worst = max(worst, diff)
        return worst


ModelParams = CDGAN


def build_model(config: ModelConfig) -> CDGAN:
    return CDGAN(config)


def _unique(params) -> list[nn.Parameter]:
    seen, out = set(), []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def _tower(tower: str) -> str:
    t = str(tower).upper()
    if t not in TOWERS:
        raise ValueError(f"tower must be 'X' or 'Y', got {tower!r}")
    return t


@dataclass(frozen=True)
class DomainLabel:
    id: int
    n_domains: int
    one_hot: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if not 0 <= self.id < self.n_domains:
            raise InvalidLabelError(
                f"label {self.id} is outside [0, {self.n_domains})")
        object.__setattr__(
            self, "one_hot", tuple(1.0 if i == self.id else 0.0 for i in range(self.n_domains)))


LabelLike = Union[int, DomainLabel, Sequence[int], Tensor]


def label_ids(label: LabelLike, batch: int, n_domains: int) -> Tensor:
    """Normalize any label spelling into a (batch,) int64 tensor, validated."""
    if isinstance(label, DomainLabel):
        label = label.id
    if isinstance(label, Tensor):
        ids = label.to(torch.int64).reshape(-1)
    elif isinstance(label, int):
        ids = torch.tensor([label], dtype=torch.int64)
    else:
        ids = torch.as_tensor(list(label), dtype=torch.int64).reshape(-1)
    if ids.numel() == 1 and batch != 1:
        ids = ids.expand(batch)
    if ids.numel() != batch:
        raise InvalidLabelError(f"{ids.numel()} labels for a batch of {batch}")
    if ((ids < 0) | (ids >= n_domains)).any():
        raise InvalidLabelError(f"label ids {ids.tolist()} outside [0, {n_domains})")
    return ids


def one_hot(ids: Tensor, n_domains: int) -> Tensor:
    return F.one_hot(ids, n_domains).to(torch.get_default_dtype())


def _check_images(cfg: ModelConfig, images: Tensor) -> None:
    want = (cfg.image_channels, cfg.image_size, cfg.image_size)
    if images.dim() != 4 or tuple(images.shape[1:]) != want:
        raise ShapeMismatchError(
            f"expected images of shape (N, {want[0]}, {want[1]}, {want[2]}), "
            f"got {tuple(images.shape)}")


def encode(params: CDGAN, tower: str, images: Tensor) -> Tensor:
    _check_images(params.config, images)
    return params.encoder(tower)(images)


def generate(params: CDGAN, tower: str, z: Tensor, label: LabelLike) -> Tensor:
    cfg = params.config
    want = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    if z.dim() != 4 or tuple(z.shape[1:]) != want:
        raise ShapeMismatchError(
            f"expected latent of shape (N, {want[0]}, {want[1]}, {want[2]}), "
            f"got {tuple(z.shape)}")
    ids = label_ids(label, z.shape[0], cfg.n_domains)
    return params.generator(tower)(z, one_hot(ids, cfg.n_domains).to(z.dtype))


def discriminate(params: CDGAN, tower: str, images: Tensor) -> DiscOutput:
    _check_images(params.config, images)
    return params.discriminator(tower)(images)
