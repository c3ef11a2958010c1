"""Desk-scale CAM network: a small conv backbone and a bias-free classifier."""

import torch
from torch import nn


class TinyBackbone(nn.Module):
    """Four 3x3 conv blocks, the last three with stride 2 (output stride 8)."""

    output_stride = 8

    def __init__(self, channels=(16, 32, 48, 64), in_channels=3):
        super().__init__()
        layers = []
        prev = in_channels
        for i, c in enumerate(channels):
            layers.append(nn.Conv2d(prev, c, 3, stride=1 if i == 0 else 2, padding=1))
            layers.append(nn.GroupNorm(4, c))
            layers.append(nn.ReLU(inplace=False))
            prev = c
        self.body = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x):
        return self.body(x - 0.5)


class CamNet(nn.Module):
    """Backbone plus classifier matrix ``W`` of shape (C, K).

    Column 0 is the background class and is never trained or read.
    """

    def __init__(self, n_classes, backbone=None):
        super().__init__()
        self.backbone = backbone or TinyBackbone()
        self.n_classes = n_classes
        self.classifier = nn.Parameter(torch.randn(self.backbone.out_channels, n_classes) * 0.01)

    def features(self, x):
        return self.backbone(x)

    def logits(self, z):
        """Class score maps ``W^T z`` of shape (n, K, h, w)."""
        return torch.einsum("ck,nchw->nkhw", self.classifier, z)

    def forward(self, x):
        return torch.sigmoid(self.logits(self.features(x)))

    def n_parameters(self):
        return sum(p.numel() for p in self.parameters())
