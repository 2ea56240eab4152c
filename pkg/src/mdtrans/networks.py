"""Content/style encoders, AdaIN decoder, discriminator with domain classifier,
domain style extractor and a frozen feature network used by the metrics."""

from __future__ import annotations

from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DomainStyleRepresentation, Rng, TrainConfig, check_image_batch, one_hot

ADAIN_EPS = 1e-5


def adain(z: torch.Tensor, gamma, beta, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Adaptive instance normalization.

    Normalizes every (sample, channel) plane of ``z`` to zero mean and unit std
    over its spatial positions, then rescales with ``gamma`` and shifts with
    ``beta``. ``gamma``/``beta`` may be scalars, ``[C]`` or ``[N, C]``.
    """
    if z.dim() != 4:
        raise ValueError(f"adain expects [N, C, H, W], got {tuple(z.shape)}")
    n, c = z.shape[:2]
    gamma = _per_channel(gamma, n, c, z, "gamma")
    beta = _per_channel(beta, n, c, z, "beta")
    mu = z.mean(dim=(2, 3), keepdim=True)
    var = z.var(dim=(2, 3), keepdim=True, unbiased=False)
    return gamma * (z - mu) / torch.sqrt(var + eps) + beta


def _per_channel(v, n: int, c: int, like: torch.Tensor, name: str) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=like.dtype, device=like.device)
    if v.dim() == 0:
        return v
    if v.dim() == 1:
        if v.shape[0] != c:
            raise ValueError(f"{name} has {v.shape[0]} channels, feature map has {c}")
        return v.view(1, c, 1, 1)
    if v.dim() == 2:
        if v.shape[1] != c or v.shape[0] not in (1, n):
            raise ValueError(f"{name} shape {tuple(v.shape)} incompatible with [{n}, {c}]")
        return v.view(v.shape[0], c, 1, 1)
    raise ValueError(f"{name} must be scalar, [C] or [N, C]")


def feature_stats(z: torch.Tensor, eps: float = ADAIN_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-(sample, channel) mean and epsilon-regularized std, as used inside adain."""
    mu = z.mean(dim=(2, 3))
    var = z.var(dim=(2, 3), unbiased=False)
    return mu, torch.sqrt(var + eps)


class ResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.body(x)


class ContentEncoder(nn.Module):
    """Two stride-2 downsamplings followed by instance-normalized residual blocks.

    Gaussian noise is added to the outputs of the last two residual blocks in
    training mode only.
    """

    n_downsample = 2

    def __init__(self, content_channels: int = 256, n_res_blocks: int = 4, noise_scale: float = 1.0):
        super().__init__()
        dim = max(content_channels // 4, 1)
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, dim, 7), nn.InstanceNorm2d(dim), nn.ReLU(True)]
        for i in range(self.n_downsample):
            out = content_channels if i == self.n_downsample - 1 else dim * 2
            layers += [nn.Conv2d(dim, out, 4, 2, 1), nn.InstanceNorm2d(out), nn.ReLU(True)]
            dim = out
        self.stem = nn.Sequential(*layers)
        self.blocks = nn.ModuleList(ResBlock(dim) for _ in range(n_res_blocks))
        self.noise_scale = noise_scale
        self.noisy_blocks = set(range(max(n_res_blocks - 2, 0), n_res_blocks))
        self.out_channels = dim

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        factor = 2 ** self.n_downsample
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}")
        h = self.stem(x)
        for i, block in enumerate(self.blocks):
            h = block(h)
            if self.training and self.noise_scale > 0 and i in self.noisy_blocks:
                h = h + self.noise_scale * torch.randn(h.shape, generator=generator, dtype=h.dtype)
        return h


class StyleEncoder(nn.Module):
    """Strided convolutions, global average pooling and a 1x1 projection; no normalization."""

    def __init__(self, style_dim: int = 8, dim: int = 64, n_downsample: int = 4):
        super().__init__()
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, dim, 7), nn.ReLU(True)]
        for i in range(n_downsample):
            out = dim * 2 if i < 2 else dim
            layers += [nn.Conv2d(dim, out, 4, 2, 1), nn.ReLU(True)]
            dim = out
        layers += [nn.AdaptiveAvgPool2d(1), nn.Conv2d(dim, style_dim, 1, 1, 0)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x).flatten(1)


class DomainStyleExtractor(nn.Module):
    """One 4x4 stride-1 convolution, ``n_layers`` 4x4 stride-2 convolutions with ReLU,
    global average pooling and a 1x1 stride-1 convolution."""

    def __init__(self, style_dim: int = 8, dim: int = 64, n_layers: int = 6):
        super().__init__()
        # asymmetric padding keeps the stride-1 4x4 convolution size-preserving
        layers = [nn.ZeroPad2d((1, 2, 1, 2)), nn.Conv2d(3, dim, 4, 1), nn.ReLU(True)]
        cap = dim * 4
        for _ in range(n_layers):
            out = min(dim * 2, cap)
            layers += [nn.Conv2d(dim, out, 4, 2, 1), nn.ReLU(True)]
            dim = out
        layers += [nn.AdaptiveAvgPool2d(1), nn.Conv2d(dim, style_dim, 1, 1, 0)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x).flatten(1)


class AdaINResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3))
        self.conv2 = nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3))
        self.dim = dim

    def forward(self, x, params):
        # params: [N, 4 * dim] laid out as (gamma1, beta1, gamma2, beta2)
        g1, b1, g2, b2 = params.split(self.dim, dim=1)
        h = F.relu(adain(self.conv1(x), 1 + g1, b1))
        h = adain(self.conv2(h), 1 + g2, b2)
        return x + h


class Decoder(nn.Module):
    """Maps (content, style, domain) to an image.

    Style code and one-hot domain are concatenated and fed to a 3-layer MLP that
    emits the AdaIN parameters of every residual block. The MLP output is read as
    an offset around unit scale, so an all-zero MLP output leaves features normalized.
    """

    blocks_per_res = 2

    def __init__(self, content_channels: int = 256, n_res_blocks: int = 4, style_dim: int = 8,
                 n_domains: int = 4, mlp_dim: int = 256):
        super().__init__()
        dim = content_channels
        self.n_domains = n_domains
        self.blocks = nn.ModuleList(AdaINResBlock(dim) for _ in range(n_res_blocks))
        self.n_adain_params = 2 * dim * n_res_blocks * self.blocks_per_res
        self.mlp = nn.Sequential(
            nn.Linear(style_dim + n_domains, mlp_dim), nn.ReLU(True),
            nn.Linear(mlp_dim, mlp_dim), nn.ReLU(True),
            nn.Linear(mlp_dim, max(self.n_adain_params, 1)),
        )
        up = []
        for _ in range(2):
            out = max(dim // 2, 1)
            up += [nn.Upsample(scale_factor=2, mode="nearest"), nn.ReflectionPad2d(2),
                   nn.Conv2d(dim, out, 5), nn.GroupNorm(1, out), nn.ReLU(True)]
            dim = out
        up += [nn.ReflectionPad2d(3), nn.Conv2d(dim, 3, 7), nn.Tanh()]
        self.up = nn.Sequential(*up)

    def adain_params(self, style: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cond = torch.cat([style, one_hot(labels, self.n_domains).to(style.dtype)], dim=1)
        return self.mlp(cond)

    def forward(self, content, style, labels):
        if not content.shape[0] == style.shape[0] == labels.shape[0]:
            raise ValueError(
                f"batch mismatch: content {content.shape[0]}, style {style.shape[0]}, "
                f"labels {labels.shape[0]}")
        params = self.adain_params(style, labels)
        h = content
        per_block = 2 * self.blocks_per_res * content.shape[1]
        for i, block in enumerate(self.blocks):
            h = block(h, params[:, i * per_block:(i + 1) * per_block])
        return self.up(h)


class Discriminator(nn.Module):
    """Shared stack of 4x4 stride-2 convolutions with two heads: a patch realness
    map and per-domain class logits (spatially averaged)."""

    def __init__(self, n_domains: int = 4, dim: int = 64, n_layers: int = 6):
        super().__init__()
        layers = [nn.Conv2d(3, dim, 4, 2, 1), nn.LeakyReLU(0.01)]
        for _ in range(n_layers - 1):
            layers += [nn.Conv2d(dim, dim * 2, 4, 2, 1), nn.LeakyReLU(0.01)]
            dim *= 2
        self.trunk = nn.Sequential(*layers)
        self.real_head = nn.Conv2d(dim, 1, 3, 1, 1, bias=False)
        self.cls_head = nn.Conv2d(dim, n_domains, 1, 1, 0, bias=False)

    def forward(self, x):
        h = self.trunk(x)
        return self.real_head(h), self.cls_head(h).mean(dim=(2, 3))


class FeatureExtractor(nn.Module):
    """Fixed, seeded, untrained convolutional stack exposing four feature taps.

    Stands in for a pretrained perception network in the perceptual loss and the
    diversity/quality metrics. Parameters are frozen at construction.
    """

    def __init__(self, seed: int = 0, widths: Sequence[int] = (16, 32, 64, 64)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        cin = 3
        for i, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, 1 if i == 0 else 2, 1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            self.stages.append(nn.Sequential(conv, nn.ReLU()))
            cin = w
        self.channel_weights = [torch.full((w,), 1.0) for w in widths]
        self.requires_grad_(False)
        self.eval()

    def forward(self, x) -> list[torch.Tensor]:
        taps = []
        h = x
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        return taps


class Translator(nn.Module):
    """All five sub-networks under their checkpoint name prefixes."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.content_enc = ContentEncoder(cfg.content_channels, cfg.n_res_blocks, cfg.noise_scale)
        self.style_enc = StyleEncoder(cfg.style_dim, cfg.style_channels, cfg.style_downsample)
        self.decoder = Decoder(cfg.content_channels, cfg.n_res_blocks, cfg.style_dim,
                               cfg.n_domains, cfg.mlp_dim)
        self.disc = Discriminator(cfg.n_domains, cfg.disc_channels, cfg.disc_layers)
        self.domain_ext = DomainStyleExtractor(cfg.style_dim, cfg.style_channels, cfg.ext_layers)

    def parameter_map(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def load_parameter_map(self, params) -> None:
        own = self.state_dict()
        missing = set(own) - set(params)
        if missing:
            raise KeyError(f"checkpoint lacks parameter {sorted(missing)[0]}")
        for name, tensor in own.items():
            value = torch.as_tensor(params[name])
            if tuple(value.shape) != tuple(tensor.shape):
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {tuple(value.shape)} vs "
                    f"model {tuple(tensor.shape)}")
            with torch.no_grad():
                tensor.copy_(value)


def init_seed(generator: torch.Generator) -> int:
    return int(torch.randint(0, 2 ** 62, (1,), generator=generator))


def seeded_init(factory, generator: torch.Generator):
    """Build a module with weights drawn from a seed taken off ``generator``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed(generator))
        return factory()


def build_translator(cfg: TrainConfig, rng: Rng) -> Translator:
    return seeded_init(lambda: Translator(cfg), rng.init)


def reinit_submodules(model: Translator, names: Iterable[str], rng: Rng) -> None:
    cfg = model.cfg
    factories = {
        "content_enc": lambda: ContentEncoder(cfg.content_channels, cfg.n_res_blocks, cfg.noise_scale),
        "style_enc": lambda: StyleEncoder(cfg.style_dim, cfg.style_channels, cfg.style_downsample),
        "decoder": lambda: Decoder(cfg.content_channels, cfg.n_res_blocks, cfg.style_dim,
                                   cfg.n_domains, cfg.mlp_dim),
        "disc": lambda: Discriminator(cfg.n_domains, cfg.disc_channels, cfg.disc_layers),
        "domain_ext": lambda: DomainStyleExtractor(cfg.style_dim, cfg.style_channels, cfg.ext_layers),
    }
    for name in names:
        setattr(model, name, seeded_init(factories[name], rng.init))


# ---------------------------------------------------------------------------
# functional entry points

def encode_content(enc: ContentEncoder, x: torch.Tensor, training: bool = False,
                   rng: Rng | None = None) -> torch.Tensor:
    check_image_batch(x)
    was = enc.training
    enc.train(training)
    try:
        return enc(x, generator=rng.noise if rng is not None else None)
    finally:
        enc.train(was)


def encode_style(enc: StyleEncoder, x: torch.Tensor) -> torch.Tensor:
    check_image_batch(x)
    return enc(x)


def decode(dec: Decoder, content: torch.Tensor, style: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() == 0:
        labels = labels.expand(content.shape[0])
    return dec(content, style, labels)


def discriminate(disc: Discriminator, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    check_image_batch(x)
    return disc(x)


def extract_domain_style(ext: DomainStyleExtractor, x: torch.Tensor) -> torch.Tensor:
    check_image_batch(x)
    return ext(x)


@torch.no_grad()
def aggregate_domain_styles(ext: DomainStyleExtractor,
                            streams: Sequence[Iterable[torch.Tensor]],
                            names: Sequence[str] | None = None) -> DomainStyleRepresentation:
    """Mean extractor output over every image of each domain.

    ``streams[i]`` yields image batches of domain ``i``.
    """
    vectors, counts = [], []
    for i, stream in enumerate(streams):
        total, count = None, 0
        for batch in stream:
            out = extract_domain_style(ext, batch).double()
            total = out.sum(0) if total is None else total + out.sum(0)
            count += batch.shape[0]
        if count == 0:
            label = names[i] if names is not None else str(i)
            raise ValueError(f"domain {label!r} has no images")
        vectors.append((total / count).float())
        counts.append(count)
    return DomainStyleRepresentation(torch.stack(vectors).numpy(), counts)
