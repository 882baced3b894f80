"""Small convolutional image encoder producing 1/4-resolution feature maps."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

DOWNSAMPLE = 4


def uniform_init_(module: nn.Module, generator: torch.Generator) -> None:
    """Uniform ``[-a, a]`` init with ``a = sqrt(1 / fan_in)`` for weights and biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            fan_in = m.weight[0].numel()
            a = math.sqrt(1.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=generator,
                                          dtype=m.weight.dtype) * 2 * a - a)
                if m.bias is not None:
                    m.bias.copy_(torch.rand(m.bias.shape, generator=generator,
                                            dtype=m.bias.dtype) * 2 * a - a)


class ImageEncoder(nn.Module):
    """Two stride-2 3x3 convolutions with ReLU, then a stride-1 refinement conv.

    Args:
        channels: output feature channels ``C``.
        hidden: channels of the intermediate maps (defaults to ``channels``).
    """

    def __init__(self, channels: int = 32, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.channels = channels
        self.conv1 = nn.Conv2d(3, hidden, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(hidden, channels, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, stride=1, padding=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Encode ``(B, 3, H, W)`` images into ``(B, C, H/4, W/4)`` maps."""
        h, w = images.shape[-2:]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"image size {h}x{w} is not a multiple of {DOWNSAMPLE}")
        x = F.relu(self.conv1(images))
        x = F.relu(self.conv2(x))
        return self.conv3(x)


def encode_view(image, encoder: ImageEncoder) -> torch.Tensor:
    """Encode one ``H x W x 3`` image (array or tensor) into a ``C x H/4 x W/4`` map."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {tuple(image.shape)}")
    dtype = next(encoder.parameters()).dtype
    x = image.to(dtype).permute(2, 0, 1).unsqueeze(0)
    return encoder(x)[0]
