"""The three networks: U-Net segmenter, patch discriminator, and a frozen
pretrained feature extractor used by the perceptual loss.

The extractor follows the VGG-19 convolutional topology up to relu5_1 and can
run either from real pretrained weights (a torchvision-format state dict) or,
for fully offline operation, from fixed-seed random frozen weights with the
identical topology.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ExtractorWeightsError

EXTRACTOR_WEIGHTS_ENV = "CHOROIDSEG_VGG19_WEIGHTS"
EXTRACTOR_FALLBACK_SEED = 7919
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# Channel counts of the extractor taps (relu1_1 .. relu5_1).
PYRAMID_CHANNELS = (64, 128, 256, 512, 512)


@dataclass(frozen=True)
class SegmenterConfig:
    input_channels: int = 1
    num_classes: int = 2
    base_width: int = 32
    depth: int = 4

    def validate(self) -> None:
        if self.base_width < 4:
            raise ConfigError(f"base_width {self.base_width} must be >= 4")
        if self.depth < 2:
            raise ConfigError(f"depth {self.depth} must be >= 2")


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_channels: int = 2
    widths: tuple[int, ...] = (64, 128, 256, 512)
    strides: tuple[int, ...] = (2, 2, 2, 1)

    def validate(self) -> None:
        if len(self.widths) != len(self.strides):
            raise ConfigError("discriminator widths and strides must have equal length")
        if any(w < 1 for w in self.widths) or any(s not in (1, 2) for s in self.strides):
            raise ConfigError("discriminator widths must be >= 1 and strides in {1, 2}")


class FeaturePyramid(NamedTuple):
    """Activations from the extractor's five tapped layers, shallow to deep."""

    levels: tuple[torch.Tensor, ...]


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically (re-)initialize all parameters of `module`.

    Uses an explicit generator so construction order elsewhere cannot shift
    the result; weights get Kaiming-normal init, biases zero.
    """
    gen = torch.Generator().manual_seed(seed)
    for name, param in module.named_parameters():
        with torch.no_grad():
            if param.dim() >= 2:
                nn.init.kaiming_normal_(param, a=0.2, generator=gen)
            else:
                param.zero_()


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder segmenter with skip connections and a softmax head.

    Output is a per-pixel class probability map of the same spatial size as
    the input; the class axis sums to 1 everywhere.
    """

    def __init__(self, config: SegmenterConfig = SegmenterConfig()):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_width * (2 ** d) for d in range(config.depth)]

        self.encoders = nn.ModuleList()
        in_ch = config.input_channels
        for w in widths:
            self.encoders.append(_double_conv(in_ch, w))
            in_ch = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(widths[-1], widths[-1] * 2)

        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        up_in = widths[-1] * 2
        for w in reversed(widths):
            self.upsamplers.append(nn.ConvTranspose2d(up_in, w, 2, stride=2))
            self.decoders.append(_double_conv(2 * w, w))
            up_in = w
        self.head = nn.Conv2d(widths[0], config.num_classes, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h, w = images.shape[-2:]
        factor = 2 ** self.config.depth
        if h % factor or w % factor:
            raise ConfigError(
                f"input spatial size {h}x{w} must be divisible by 2^depth = {factor}"
            )
        skips = []
        x = images
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return torch.softmax(self.head(x), dim=1)


class PatchDiscriminator(nn.Module):
    """Fully convolutional patch classifier over probability maps.

    Emits a single-channel grid of logistic scores in (0,1), each judging one
    receptive-field patch as probability-of-source. No normalization layers:
    the forward pass is a pure function of the parameters.
    """

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        config.validate()
        self.config = config
        layers: list[nn.Module] = []
        in_ch = config.input_channels
        for width, stride in zip(config.widths, config.strides):
            layers.append(nn.Conv2d(in_ch, width, 4, stride=stride, padding=1))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            in_ch = width
        layers.append(nn.Conv2d(in_ch, 1, 4, stride=1, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, probs: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.body(probs))

    def output_size(self, input_size: int) -> int:
        """Spatial side of the patch map for a square input."""
        n = input_size
        for stride in self.config.strides:
            n = (n + 2 - 4) // stride + 1
        return n + 2 - 4 + 1  # final stride-1 projection


# VGG-19 convolutional layout through conv5_1, grouped so each group ends at a
# tapped activation (relu1_1, relu2_1, relu3_1, relu4_1, relu5_1).
_EXTRACTOR_GROUPS: tuple[tuple[tuple[int, int], ...], ...] = (
    ((3, 64),),
    ((64, 64), (-1, -1), (64, 128)),
    ((128, 128), (-1, -1), (128, 256)),
    ((256, 256), (256, 256), (256, 256), (-1, -1), (256, 512)),
    ((512, 512), (512, 512), (512, 512), (-1, -1), (512, 512)),
)


class FeatureExtractor(nn.Module):
    """Frozen feature pyramid network for the perceptual loss.

    Accepts single-channel maps in [0,1]; replicates them to 3 channels and
    applies the fixed per-channel input normalization of the pretrained
    network. Gradients flow to the input, never to the weights.
    """

    def __init__(self, mode: str = "pretrained", weights_path: Optional[str] = None):
        super().__init__()
        if mode not in ("pretrained", "fallback"):
            raise ConfigError(f"extractor mode {mode!r} must be 'pretrained' or 'fallback'")
        self.mode = mode
        self.slices = nn.ModuleList()
        for group in _EXTRACTOR_GROUPS:
            layers: list[nn.Module] = []
            for in_ch, out_ch in group:
                if in_ch == -1:
                    layers.append(nn.MaxPool2d(2))
                else:
                    layers.append(nn.Conv2d(in_ch, out_ch, 3, padding=1))
                    layers.append(nn.ReLU(inplace=True))
            self.slices.append(nn.Sequential(*layers))

        if mode == "pretrained":
            self._load_pretrained(weights_path)
        else:
            init_parameters(self, EXTRACTOR_FALLBACK_SEED)

        self.register_buffer("input_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()

    def _conv_modules(self) -> list[nn.Conv2d]:
        return [m for s in self.slices for m in s if isinstance(m, nn.Conv2d)]

    def _load_pretrained(self, weights_path: Optional[str]) -> None:
        path = weights_path or os.environ.get(EXTRACTOR_WEIGHTS_ENV)
        state = None
        if path:
            if not Path(path).is_file():
                raise ExtractorWeightsError(f"extractor weights file not found: {path}")
            state = torch.load(path, map_location="cpu", weights_only=True)
            if not isinstance(state, dict):
                raise ExtractorWeightsError(f"{path} does not hold a state dict")
        else:
            try:
                from torchvision.models import VGG19_Weights, vgg19

                state = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).state_dict()
            except Exception as exc:
                raise ExtractorWeightsError(
                    "pretrained extractor weights unavailable: "
                    f"{exc}. Download https://download.pytorch.org/models/vgg19-dcbb9e9d.pth "
                    f"and point {EXTRACTOR_WEIGHTS_ENV} (or the extractor_weights config key) "
                    "at the file, or set extractor = fallback for offline runs."
                ) from exc
        # torchvision layout: features.<idx>.weight / .bias, convs in order.
        conv_keys = sorted(
            {k.split(".")[1] for k in state if k.startswith("features.") and k.endswith(".weight")},
            key=int,
        )
        convs = self._conv_modules()
        if len(conv_keys) < len(convs):
            raise ExtractorWeightsError(
                f"state dict has {len(conv_keys)} conv layers, need at least {len(convs)}"
            )
        with torch.no_grad():
            for conv, idx in zip(convs, conv_keys):
                conv.weight.copy_(state[f"features.{idx}.weight"])
                conv.bias.copy_(state[f"features.{idx}.bias"])

    def forward(self, maps: torch.Tensor) -> FeaturePyramid:
        if maps.dim() != 4 or maps.shape[1] != 1:
            raise ValueError(f"extractor expects Bx1xHxW maps, got {tuple(maps.shape)}")
        x = maps.repeat(1, 3, 1, 1)
        x = (x - self.input_mean.to(x.dtype)) / self.input_std.to(x.dtype)
        levels = []
        for slice_ in self.slices:
            x = slice_(x)
            levels.append(x)
        return FeaturePyramid(levels=tuple(levels))
