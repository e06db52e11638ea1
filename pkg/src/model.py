#!/usr/bin/env python3
"""
Modified U-net with inception blocks and residual skip connections

Every regular convolution block of the U-net is replaced by an inception block
(four parallel branches concatenated along channels). Skip connections from the
down path pass through a residual convolution before being concatenated in the
matching up block. Parameters are exposed in named groups so fine-tuning schemes
can freeze whole blocks:

    Down-1 .. Down-L, Bottleneck, Up-1 .. Up-L, Head

Up-i works at the same resolution as Down-i and owns the residual skip coming
from it.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError

logger = logging.getLogger(__name__)

ParamGroupMap = Dict[str, Dict[str, nn.Parameter]]

INCEPTION_BRANCHES = 4


@dataclass
class ModelConfig:
    """Network shape; height and width must be divisible by 2**n_levels"""
    n_levels: int = 4
    base_channels: int = 16
    height: int = 64
    width: int = 64
    input_channels: int = 1

    def __post_init__(self):
        if self.n_levels < 1:
            raise ConfigError(f"n_levels must be >= 1, got {self.n_levels}")
        if self.base_channels < INCEPTION_BRANCHES or self.base_channels % INCEPTION_BRANCHES:
            raise ConfigError(f"base_channels must be a positive multiple of {INCEPTION_BRANCHES}, got {self.base_channels}")
        if self.input_channels != 1:
            raise ConfigError("input_channels is fixed at 1 (one b-value image per sample)")
        factor = 2 ** self.n_levels
        if self.height <= 0 or self.width <= 0 or self.height % factor or self.width % factor:
            raise ConfigError(
                f"input size {self.height}x{self.width} is not divisible by 2**n_levels = {factor}"
            )

    def channels(self, level: int) -> int:
        """Feature channels of down/up level (1-based); doubles per level"""
        return self.base_channels * 2 ** (level - 1)

    def group_names(self) -> List[str]:
        downs = [f"Down-{i}" for i in range(1, self.n_levels + 1)]
        ups = [f"Up-{i}" for i in range(1, self.n_levels + 1)]
        return downs + ["Bottleneck"] + ups + ["Head"]


class InceptionBlock(nn.Module):
    """
    Four parallel branches concatenated along channels

    1×1 conv; 1×1 → 3×3 conv; 1×1 → 5×5 conv; 3×3 max-pool → 1×1 conv.
    All branches use same-padding so spatial size is preserved.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if out_channels % INCEPTION_BRANCHES:
            raise ValueError(f"out_channels must be divisible by {INCEPTION_BRANCHES}, got {out_channels}")
        width = out_channels // INCEPTION_BRANCHES
        self.branch1 = nn.Sequential(
            nn.Conv2d(in_channels, width, kernel_size=1),
            nn.ReLU(),
        )
        self.branch3 = nn.Sequential(
            nn.Conv2d(in_channels, width, kernel_size=1),
            nn.ReLU(),
            nn.Conv2d(width, width, kernel_size=3, padding=1),
            nn.ReLU(),
        )
        self.branch5 = nn.Sequential(
            nn.Conv2d(in_channels, width, kernel_size=1),
            nn.ReLU(),
            nn.Conv2d(width, width, kernel_size=5, padding=2),
            nn.ReLU(),
        )
        self.branch_pool = nn.Sequential(
            nn.MaxPool2d(kernel_size=3, stride=1, padding=1),
            nn.Conv2d(in_channels, width, kernel_size=1),
            nn.ReLU(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.branch1(x), self.branch3(x), self.branch5(x), self.branch_pool(x)], dim=1)


class ResidualSkip(nn.Module):
    """y = x + conv(x), channel preserving"""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv(x)


class DownBlock(nn.Module):
    """Inception block followed by 2×2 max-pool; also returns the pre-pool features for the skip"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.inception = InceptionBlock(in_channels, out_channels)
        self.pool = nn.MaxPool2d(kernel_size=2)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        features = self.inception(x)
        return self.pool(features), features


class UpBlock(nn.Module):
    """2× transposed-conv upsample, concatenate the residual-processed skip, inception block"""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.upsample = nn.ConvTranspose2d(in_channels, skip_channels, kernel_size=2, stride=2)
        self.skip = ResidualSkip(skip_channels)
        self.inception = InceptionBlock(2 * skip_channels, out_channels)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.inception(torch.cat([self.upsample(x), self.skip(skip)], dim=1))


class ModifiedUNet(nn.Module):
    """Encoder-decoder producing a single-channel probability map"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        levels = config.n_levels
        self.down_blocks = nn.ModuleList()
        in_channels = config.input_channels
        for level in range(1, levels + 1):
            self.down_blocks.append(DownBlock(in_channels, config.channels(level)))
            in_channels = config.channels(level)
        self.bottleneck = InceptionBlock(config.channels(levels), 2 * config.channels(levels))
        # up_blocks[i - 1] is Up-i and pairs with Down-i
        self.up_blocks = nn.ModuleList()
        for level in range(1, levels + 1):
            below = 2 * config.channels(levels) if level == levels else config.channels(level + 1)
            self.up_blocks.append(UpBlock(below, config.channels(level), config.channels(level)))
        self.head = nn.Conv2d(config.channels(1), 1, kernel_size=1)

    def check_input(self, x: torch.Tensor):
        expected = (self.config.input_channels, self.config.height, self.config.width)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        skips = []
        for block in self.down_blocks:
            x, features = block(x)
            skips.append(features)
        x = self.bottleneck(x)
        for level in reversed(range(self.config.n_levels)):
            x = self.up_blocks[level](x, skips[level])
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))

    def parameter_groups(self) -> ParamGroupMap:
        """Named parameters partitioned by block"""
        groups: ParamGroupMap = {name: {} for name in self.config.group_names()}
        for name, param in self.named_parameters():
            groups[group_of(name)][name] = param
        return groups


def group_of(parameter_name: str) -> str:
    """
    Map a parameter name of ModifiedUNet to its group

    Examples:
        'down_blocks.0.inception.branch1.0.weight' -> 'Down-1'
        'up_blocks.2.skip.conv.bias' -> 'Up-3'
    """
    head, _, rest = parameter_name.partition('.')
    if head == "down_blocks":
        return f"Down-{int(rest.split('.')[0]) + 1}"
    if head == "up_blocks":
        return f"Up-{int(rest.split('.')[0]) + 1}"
    if head == "bottleneck":
        return "Bottleneck"
    if head == "head":
        return "Head"
    raise KeyError(f"parameter {parameter_name!r} belongs to no group")


def build_model(config: ModelConfig, seed: int = 0) -> Tuple[ModifiedUNet, ParamGroupMap]:
    """
    Build the network with deterministic initialisation

    The global torch RNG state is left untouched.

    Args:
        config: Network shape
        seed: Initialisation seed

    Returns:
        (model, parameter groups)
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ModifiedUNet(config)
    return model, model.parameter_groups()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def forward(model: ModifiedUNet, image: np.ndarray) -> np.ndarray:
    """
    Soft mask for one H×W image

    Args:
        model: Network (switched to eval mode)
        image: H×W real array

    Returns:
        H×W array with values in [0, 1]
    """
    image = np.asarray(image)
    if image.shape != (model.config.height, model.config.width):
        raise ValueError(f"image shape {image.shape} does not match model input "
                         f"{(model.config.height, model.config.width)}")
    return predict_batch(model, image[None])[0]


def predict_batch(model: ModifiedUNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Soft masks for a stack of images (N×H×W)"""
    model.eval()
    dtype = model_dtype(model)
    outputs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = torch.as_tensor(np.ascontiguousarray(images[start:start + batch_size]), dtype=dtype)[:, None]
            outputs.append(model(chunk)[:, 0].cpu().numpy())
    if not outputs:
        return np.zeros((0, model.config.height, model.config.width), dtype=np.float32)
    return np.concatenate(outputs, axis=0)
