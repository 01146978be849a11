"""Perceptual distance backends used alongside the pixel term."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import BackendError, RandomSource


class ToyPerceptual(nn.Module):
    """Mean squared difference of a frozen random three-layer conv feature stack.

    Self-distance is exactly zero and the distance is smooth almost everywhere.
    """

    name = "toy"

    def __init__(self, seed: int = 0, widths=(8, 16, 16)):
        super().__init__()
        g = RandomSource(seed, 0x70).generator()
        self.n_layers = len(widths)
        c_in = 3
        for i, c in enumerate(widths):
            w = torch.randn(c, c_in, 3, 3, generator=g, dtype=torch.float64) / (c_in * 9) ** 0.5
            self.register_buffer(f"w{i}", w)
            c_in = c

    def features(self, x):
        feats = []
        for i in range(self.n_layers):
            w = getattr(self, f"w{i}").to(x.dtype)
            x = F.leaky_relu(F.conv2d(x, w, stride=2 if i else 1, padding=1), 0.2)
            feats.append(x)
        return feats

    def forward(self, a, b):
        if b.shape[0] == 1 and a.shape[0] > 1:
            b = b.expand_as(a)
        return sum(((fa - fb) ** 2).mean() for fa, fb in zip(self.features(a), self.features(b)))


class LpipsPerceptual(nn.Module):
    """LPIPS through the optional ``lpips`` package."""

    name = "lpips"

    def __init__(self, net: str = "vgg"):
        super().__init__()
        try:
            import lpips
        except ImportError as exc:
            raise BackendError("the 'lpips' package is not installed") from exc
        try:
            self.model = lpips.LPIPS(net=net, verbose=False).eval()
        except Exception as exc:  # noqa: BLE001 - weight download / load failures
            raise BackendError(f"could not load LPIPS weights: {exc}") from exc
        for p in self.model.parameters():
            p.requires_grad_(False)

    def forward(self, a, b):
        if b.shape[0] == 1 and a.shape[0] > 1:
            b = b.expand_as(a)
        return self.model(a.float(), b.float()).mean().to(a.dtype)


def make_perceptual(name: str, seed: int = 0) -> nn.Module:
    if name == "toy":
        return ToyPerceptual(seed)
    if name == "lpips":
        return LpipsPerceptual()
    raise BackendError(f"unknown perceptual backend {name!r}")
