"""Network definitions.

The reconstructive sub-network is an encoder-decoder-encoder: the generator
compresses an image to a latent code and decodes it back, and a second
encoder with identical topology re-encodes the reconstruction so latent
codes can be compared. An adversarial discriminator scores images and
exposes its penultimate feature map for feature matching. All blocks on
this path are pre-activation residual blocks. The discriminative
sub-network is a standard U-Net over the channel-wise concatenation of
input and reconstruction, emitting two-class logits per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def _stage_count(resolution: int) -> int:
    # spatial size halves per stage and must land exactly on 8
    size, stages = resolution, 0
    while size > 8 and size % 2 == 0:
        size //= 2
        stages += 1
    if size != 8 or stages < 1:
        raise ValueError(
            f"resolution {resolution} is not 8 * 2^k for k >= 1; "
            "cannot build the encoder stage ladder")
    return stages


def _stage_widths(base_width: int, stages: int) -> list[int]:
    cap = base_width * 8
    return [min(base_width * (2 ** i), cap) for i in range(stages + 1)]


class ResidualBlock(nn.Module):
    """Pre-activation residual block with an identity shortcut.

    norm -> act -> conv3x3 -> norm -> act -> conv3x3, added to the input.
    Channel count is constant, so the shortcut is a pure identity and the
    block computes exactly x when the branch parameters are zero.
    """

    def __init__(self, channels: int, negative_slope: float = 0.0):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.negative_slope = negative_slope

    def _act(self, t: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(t, self.negative_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self._act(self.bn1(x)))
        h = self.conv2(self._act(self.bn2(h)))
        return x + h


class Encoder(nn.Module):
    """Residual downsampling ladder ending in a compact latent code.

    ``bottleneck="conv"`` keeps a spatial code (latent_channels x 8 x 8);
    ``bottleneck="dense"`` flattens into a latent vector of latent_dim.
    """

    def __init__(self, channels: int, resolution: int, base_width: int,
                 bottleneck: str = "conv", latent_channels: int = 32,
                 latent_dim: int = 2048):
        super().__init__()
        stages = _stage_count(resolution)
        widths = _stage_widths(base_width, stages)
        self.bottleneck = bottleneck
        self.stem = nn.Conv2d(channels, widths[0], 3, padding=1)
        body = []
        for i in range(stages):
            body += [ResidualBlock(widths[i], 0.2), ResidualBlock(widths[i], 0.2),
                     nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)]
        self.body = nn.Sequential(*body)
        self.head_norm = nn.BatchNorm2d(widths[-1])
        if bottleneck == "conv":
            self.head = nn.Conv2d(widths[-1], latent_channels, 3, padding=1)
        elif bottleneck == "dense":
            self.head = nn.Linear(widths[-1] * 8 * 8, latent_dim)
        else:
            raise ValueError(f"unknown bottleneck '{bottleneck}'")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.body(self.stem(x))
        h = F.leaky_relu(self.head_norm(h), 0.2)
        if self.bottleneck == "conv":
            return self.head(h)
        return self.head(h.flatten(1))


class Decoder(nn.Module):
    """Mirror of the encoder: latent code back to an image in [0, 1]."""

    def __init__(self, channels: int, resolution: int, base_width: int,
                 bottleneck: str = "conv", latent_channels: int = 32,
                 latent_dim: int = 2048):
        super().__init__()
        stages = _stage_count(resolution)
        widths = _stage_widths(base_width, stages)
        self.bottleneck = bottleneck
        self.inner_width = widths[-1]
        if bottleneck == "conv":
            self.head = nn.Conv2d(latent_channels, widths[-1], 3, padding=1)
        elif bottleneck == "dense":
            self.head = nn.Linear(latent_dim, widths[-1] * 8 * 8)
        else:
            raise ValueError(f"unknown bottleneck '{bottleneck}'")
        body = []
        for i in reversed(range(stages)):
            body += [nn.ConvTranspose2d(widths[i + 1], widths[i], 4, stride=2, padding=1),
                     ResidualBlock(widths[i]), ResidualBlock(widths[i])]
        self.body = nn.Sequential(*body)
        self.out_norm = nn.BatchNorm2d(widths[0])
        self.out_conv = nn.Conv2d(widths[0], channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if self.bottleneck == "conv":
            h = self.head(z)
        else:
            h = self.head(z).reshape(z.shape[0], self.inner_width, 8, 8)
        h = self.body(h)
        h = F.relu(self.out_norm(h))
        return torch.sigmoid(self.out_conv(h))


class Generator(nn.Module):
    """Encoder-decoder pair; forward returns (reconstruction, latent)."""

    def __init__(self, encoder: Encoder, decoder: Decoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        latent = self.encoder(x)
        return self.decoder(latent), latent


class Discriminator(nn.Module):
    """Residual image critic returning (score in (0, 1), feature map).

    The feature map is the activation entering the scoring head, used as
    the feature-matching target.
    """

    def __init__(self, channels: int, resolution: int, base_width: int):
        super().__init__()
        stages = _stage_count(resolution)
        widths = _stage_widths(base_width, stages)
        self.stem = nn.Conv2d(channels, widths[0], 3, padding=1)
        body = []
        for i in range(stages):
            body += [ResidualBlock(widths[i], 0.2),
                     nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)]
        self.body = nn.Sequential(*body)
        self.score_norm = nn.BatchNorm2d(widths[-1])
        self.score_conv = nn.Conv2d(widths[-1], 1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        features = self.body(self.stem(x))
        h = F.leaky_relu(self.score_norm(features), 0.2)
        score = torch.sigmoid(self.score_conv(h).mean(dim=(1, 2, 3), keepdim=False))
        return score.unsqueeze(1), features


class _DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class UNetSegmenter(nn.Module):
    """U-Net over stacked (input, reconstruction); two-class pixel logits."""

    def __init__(self, in_channels: int, base_width: int = 32, depth: int = 4):
        super().__init__()
        cap = base_width * 8
        widths = [min(base_width * (2 ** i), cap) for i in range(depth + 1)]
        self.depth = depth
        self.down = nn.ModuleList()
        prev = in_channels
        for i in range(depth):
            self.down.append(_DoubleConv(prev, widths[i]))
            prev = widths[i]
        self.bottom = _DoubleConv(prev, widths[depth])
        self.up = nn.ModuleList()
        self.up_conv = nn.ModuleList()
        for i in reversed(range(depth)):
            self.up.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.up_conv.append(_DoubleConv(widths[i] * 2, widths[i]))
        self.head = nn.Conv2d(widths[0], 2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % (2 ** self.depth) or x.shape[-1] % (2 ** self.depth):
            raise ValueError(
                f"input {tuple(x.shape[-2:])} not divisible by 2^{self.depth}")
        skips = []
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.bottom(h)
        for up, conv, skip in zip(self.up, self.up_conv, reversed(skips)):
            h = up(h)
            h = conv(torch.cat((skip, h), dim=1))
        return self.head(h)


def anomaly_probabilities(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel anomaly probability from two-class logits: (B, 1, H, W)."""
    return F.softmax(logits, dim=1)[:, 1:2]


@dataclass
class NetworkBundle:
    generator: Generator
    encoder2: Encoder
    discriminator: Discriminator
    segmenter: UNetSegmenter

    def modules(self):
        return (self.generator, self.encoder2, self.discriminator, self.segmenter)

    def train(self) -> "NetworkBundle":
        for m in self.modules():
            m.train()
        return self

    def eval(self) -> "NetworkBundle":
        for m in self.modules():
            m.eval()
        return self


def init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.normal_(module.weight, 1.0, 0.02)
        nn.init.zeros_(module.bias)


def build_bundle(cfg) -> NetworkBundle:
    """Instantiate all four networks for a config and initialize weights."""
    kwargs = dict(bottleneck=cfg.bottleneck, latent_channels=cfg.latent_channels,
                  latent_dim=cfg.latent_dim)
    generator = Generator(
        Encoder(cfg.channels, cfg.resolution, cfg.base_width, **kwargs),
        Decoder(cfg.channels, cfg.resolution, cfg.base_width, **kwargs),
    )
    encoder2 = Encoder(cfg.channels, cfg.resolution, cfg.base_width, **kwargs)
    discriminator = Discriminator(cfg.channels, cfg.resolution, cfg.base_width)
    segmenter = UNetSegmenter(2 * cfg.channels, cfg.unet_base_width, cfg.unet_depth)
    bundle = NetworkBundle(generator, encoder2, discriminator, segmenter)
    for m in bundle.modules():
        m.apply(init_weights)
    return bundle


def _check_finite(t: torch.Tensor, stage: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise RuntimeError(f"non-finite values in {stage} output")
    return t


def forward_pipeline(bundle: NetworkBundle, x: torch.Tensor
                     ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Full pass: returns (reconstruction, latent, re-encoded latent, heatmap).

    The heatmap is the anomaly-class probability of the segmenter applied
    to the (input, reconstruction) stack. Raises on non-finite values,
    naming the stage that produced them.
    """
    recon, latent = bundle.generator(x)
    _check_finite(recon, "reconstruction")
    _check_finite(latent, "latent")
    latent2 = _check_finite(bundle.encoder2(recon), "re-encoded latent")
    logits = _check_finite(bundle.segmenter(torch.cat((x, recon), dim=1)),
                           "segmentation")
    return recon, latent, latent2, anomaly_probabilities(logits)
