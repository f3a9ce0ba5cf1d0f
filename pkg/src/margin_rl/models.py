"""Classifier architectures plus an analytic two-class linear model for oracles."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .margin import ClassifierHandle


class MnistCNN(nn.Module):
    """Two strided 4x4 convolutions and a two-layer head for 1x28x28 inputs."""

    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 16, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Flatten(),
        )
        # 32 channels x 7 x 7 after two stride-2 convolutions on 28x28
        self.classifier = nn.Sequential(
            nn.Linear(32 * 7 * 7, 100),
            nn.ReLU(),
            nn.Linear(100, num_classes),
        )

    def forward(self, x):
        return self.classifier(self.features(x))


class PreActBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False))

    def forward(self, x):
        out = F.relu(self.bn1(x))
        shortcut = self.shortcut(out) if hasattr(self, "shortcut") else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + shortcut


class PreActResNet18(nn.Module):
    def __init__(self, num_classes: int = 10, in_channels: int = 3):
        super().__init__()
        self.in_planes = 64
        self.conv1 = nn.Conv2d(in_channels, 64, 3, stride=1, padding=1, bias=False)
        self.layer1 = self._make_layer(64, 2, stride=1)
        self.layer2 = self._make_layer(128, 2, stride=2)
        self.layer3 = self._make_layer(256, 2, stride=2)
        self.layer4 = self._make_layer(512, 2, stride=2)
        self.bn = nn.BatchNorm2d(512)
        self.linear = nn.Linear(512, num_classes)

    def _make_layer(self, planes, num_blocks, stride):
        layers = []
        for s in [stride] + [1] * (num_blocks - 1):
            layers.append(PreActBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = self.conv1(x)
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        out = F.relu(self.bn(out))
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.linear(out)


@dataclass(frozen=True)
class SyntheticLinearSpec:
    """Two-class model with logits (w.x + b, -(w.x + b))."""

    w: tuple
    b: float = 0.0

    def __post_init__(self):
        if not any(v != 0 for v in self.w):
            raise ValueError("synthetic weight vector must be nonzero")


class SyntheticLinear(nn.Module):
    def __init__(self, spec: SyntheticLinearSpec):
        super().__init__()
        self.spec = spec
        self.register_buffer("w", torch.tensor(spec.w, dtype=torch.float64))
        self.b = float(spec.b)

    def forward(self, x):
        m = x.flatten(1).to(self.w.dtype) @ self.w + self.b
        return torch.stack([m, -m], dim=1).to(x.dtype)


def analytic_margin(spec: SyntheticLinearSpec, x: torch.Tensor) -> float:
    """Distance along the sign-gradient direction to the synthetic boundary.

    The class is whatever the model predicts at ``x`` (ties go to class 0).
    Moving by eps along that direction changes the score m = w.x + b by
    eps * ||w||_1 toward zero.
    """
    w = torch.tensor(spec.w, dtype=torch.float64)
    m = float(x.flatten().to(torch.float64) @ w + spec.b)
    return abs(m) / float(w.abs().sum())


MODEL_NAMES = ("mnist_cnn", "preact_resnet18")


def build_model(spec, num_classes: int = 10, in_channels: int = 3) -> ClassifierHandle:
    if isinstance(spec, SyntheticLinearSpec):
        return ClassifierHandle(SyntheticLinear(spec))
    if spec == "mnist_cnn":
        return ClassifierHandle(MnistCNN(num_classes))
    if spec == "preact_resnet18":
        return ClassifierHandle(PreActResNet18(num_classes, in_channels))
    raise ValueError(f"unknown model spec {spec!r}; expected one of {MODEL_NAMES} or a SyntheticLinearSpec")
