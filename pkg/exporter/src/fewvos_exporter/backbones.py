"""Backbone feature extraction.

Features are exported raw (unnormalized); the consumer owns the
normalization convention.  Random initialization is seeded so exports
without pretrained weights are still reproducible.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

IMAGENET_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(3, 1, 1)
IMAGENET_STD = torch.tensor([0.229, 0.224, 0.225]).view(3, 1, 1)

RESNET_STAGES = ("layer1", "layer2", "layer3", "layer4")


class TinyBackbone(nn.Module):
    """Two strided convolutions; cheap stand-in for integration tests."""

    def __init__(self, channels: int = 16):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, channels, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=1),
        )

    def forward(self, x):
        return self.body(x)


class FeatureExtractor:
    """Maps RGB uint8 frames to feature maps with a fixed channel count."""

    def __init__(self, backbone: str = "resnet50", stage: str = "layer3",
                 weights: str | None = None, seed: int = 0):
        torch.manual_seed(seed)
        if backbone == "tiny":
            self.model = TinyBackbone()
            self._normalize = False
        elif backbone == "resnet50":
            if stage not in RESNET_STAGES:
                raise ValueError(f"stage must be one of {RESNET_STAGES}, got {stage!r}")
            from torchvision.models import resnet50
            from torchvision.models.feature_extraction import (
                create_feature_extractor,
            )

            net = resnet50(weights=None)
            if weights:
                state = torch.load(Path(weights), map_location="cpu",
                                   weights_only=True)
                net.load_state_dict(state)
            self.model = create_feature_extractor(net, return_nodes={stage: "out"})
            self._normalize = True
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.backbone = backbone
        self.model.eval()

    @torch.no_grad()
    def extract(self, image: np.ndarray) -> np.ndarray:
        """RGB HxWx3 uint8 -> float32 feature map [C, h, w]."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an RGB image, got shape {image.shape}")
        x = torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)
        if self._normalize:
            x = (x - IMAGENET_MEAN) / IMAGENET_STD
        out = self.model(x[None])
        if isinstance(out, dict):
            out = out["out"]
        return out[0].numpy().astype(np.float32)
