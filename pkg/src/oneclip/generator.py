"""Style-based generator / discriminator pair and the latent-space operations on them.

The architecture follows the usual StyleGAN2 layout (mapping MLP, modulated
convolutions with demodulation, skip ``torgb`` outputs, residual
discriminator) at whatever resolution a preset asks for. Noise inputs are
buffers drawn once at construction so synthesis is a pure function of the
latent.
"""

from __future__ import annotations

import contextlib
import copy
import math
from typing import Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import (
    ArgumentError,
    LatentCode,
    LatentKind,
    RandomSource,
    ShapeError,
    VersionError,
    as_generator,
)
from .presets import DatasetPreset

TORGB = "ToRGB"
MAPPING = "Mapping"
SQRT2 = math.sqrt(2.0)


def _lrelu(x):
    return F.leaky_relu(x, 0.2) * SQRT2


class EqualLinear(nn.Module):
    """Linear layer with runtime weight scaling (equalized learning rate)."""

    def __init__(self, c_in, c_out, bias_init=0.0, lr_mul=1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(c_out, c_in) / lr_mul)
        self.bias = nn.Parameter(torch.full((c_out,), float(bias_init)))
        self.scale = lr_mul / math.sqrt(c_in)
        self.lr_mul = lr_mul

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias * self.lr_mul)


class EqualConv2d(nn.Module):
    def __init__(self, c_in, c_out, kernel, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(c_out, c_in, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.scale = 1 / math.sqrt(c_in * kernel * kernel)
        self.padding = kernel // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class MappingNetwork(nn.Module):
    def __init__(self, latent_dim: int, n_layers: int, lr_mul: float = 0.01):
        super().__init__()
        self.layers = nn.ModuleList(
            EqualLinear(latent_dim, latent_dim, lr_mul=lr_mul) for _ in range(n_layers)
        )

    def forward(self, z):
        x = z * torch.rsqrt(z.square().mean(-1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = _lrelu(layer(x))
        return x


class ModulatedConv(nn.Module):
    def __init__(self, c_in, c_out, kernel, w_dim, demodulate=True, upsample=False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(c_out, c_in, kernel, kernel))
        self.affine = EqualLinear(w_dim, c_in, bias_init=1.0)
        self.demodulate = demodulate
        self.upsample = upsample
        self.padding = kernel // 2
        self.scale = 1 / math.sqrt(c_in * kernel * kernel)

    def forward(self, x, w):
        n, c_in = x.shape[:2]
        styles = self.affine(w)
        weight = self.weight[None] * styles[:, None, :, None, None] * self.scale
        if self.demodulate:
            weight = weight * torch.rsqrt(weight.square().sum((2, 3, 4), keepdim=True) + 1e-8)
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        c_out = weight.shape[1]
        out = F.conv2d(
            x.reshape(1, n * c_in, *x.shape[2:]),
            weight.reshape(n * c_out, c_in, *weight.shape[3:]),
            padding=self.padding,
            groups=n,
        )
        return out.reshape(n, c_out, *out.shape[2:])


class StyleLayer(nn.Module):
    def __init__(self, c_in, c_out, w_dim, resolution, noise_gen, upsample=False):
        super().__init__()
        self.conv = ModulatedConv(c_in, c_out, 3, w_dim, upsample=upsample)
        self.register_buffer("noise", torch.randn(1, 1, resolution, resolution, generator=noise_gen))
        self.noise_strength = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x, w):
        x = self.conv(x, w) + self.noise * self.noise_strength
        return _lrelu(x + self.bias.view(1, -1, 1, 1))


class ToRGB(nn.Module):
    def __init__(self, c_in, w_dim):
        super().__init__()
        self.conv = ModulatedConv(c_in, 3, 1, w_dim, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x, w):
        return self.conv(x, w) + self.bias.view(1, -1, 1, 1)


class SynthesisNetwork(nn.Module):
    """Consumes a W+ stack of shape (n, L, d); L = 2*log2(resolution) - 2."""

    def __init__(self, resolution, latent_dim, channels, noise_gen):
        super().__init__()
        self.resolution = resolution
        self.n_blocks = int(math.log2(resolution)) - 2
        self.layer_count = 2 * self.n_blocks + 2
        c4 = channels(4)
        self.const = nn.Parameter(torch.randn(c4, 4, 4))
        self.conv4 = StyleLayer(c4, c4, latent_dim, 4, noise_gen)
        self.torgb4 = ToRGB(c4, latent_dim)
        self.blocks = nn.ModuleList()
        c_prev = c4
        for b in range(1, self.n_blocks + 1):
            res = 4 * 2**b
            c = channels(res)
            block = nn.Module()
            block.conv0 = StyleLayer(c_prev, c, latent_dim, res, noise_gen, upsample=True)
            block.conv1 = StyleLayer(c, c, latent_dim, res, noise_gen)
            block.torgb = ToRGB(c, latent_dim)
            self.blocks.append(block)
            c_prev = c

    def forward(self, ws):
        n = ws.shape[0]
        x = self.const[None].expand(n, -1, -1, -1).to(ws.dtype)
        x = self.conv4(x, ws[:, 0])
        img = self.torgb4(x, ws[:, 1])
        for b, block in enumerate(self.blocks, start=1):
            x = block.conv0(x, ws[:, 2 * b - 1])
            x = block.conv1(x, ws[:, 2 * b])
            img = F.interpolate(img, scale_factor=2, mode="bilinear", align_corners=False)
            img = img + block.torgb(x, ws[:, 2 * b + 1])
        return torch.tanh(img)


class StyleGenerator(nn.Module):
    """Mapping + synthesis. ``spec`` holds the constructor arguments for rebuilding."""

    def __init__(
        self,
        resolution: int = 32,
        latent_dim: int = 64,
        mapping_layers: int = 2,
        channel_base: int = 1024,
        channel_max: int = 32,
        seed: int = 0,
        mapping: nn.Module | None = None,
    ):
        super().__init__()
        self.spec = dict(
            resolution=resolution,
            latent_dim=latent_dim,
            mapping_layers=mapping_layers,
            channel_base=channel_base,
            channel_max=channel_max,
            seed=seed,
        )
        noise_gen = RandomSource(seed, 0x4E).generator()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(RandomSource(seed, 0x6E).derived_seed())
            self.mapping = mapping if mapping is not None else MappingNetwork(latent_dim, mapping_layers)
            self.synthesis = SynthesisNetwork(
                resolution, latent_dim, lambda r: min(channel_base // r, channel_max), noise_gen
            )
        self.latent_dim = latent_dim
        self.layer_count = self.synthesis.layer_count
        self.output_resolution = resolution
        self.frozen_parts: frozenset[str] = frozenset()

    def forward(self, ws):
        return self.synthesis(ws)


def build_generator(preset: DatasetPreset, seed: int = 0) -> StyleGenerator:
    gen = StyleGenerator(
        resolution=preset.resolution,
        latent_dim=preset.latent_dim,
        mapping_layers=preset.mapping_layers,
        channel_base=preset.channel_base,
        channel_max=preset.channel_max,
        seed=seed,
    )
    assert gen.layer_count == preset.layer_count, (gen.layer_count, preset.layer_count)
    return gen


def _part_of(name: str) -> str | None:
    if name.startswith("mapping."):
        return MAPPING
    if "torgb" in name:
        return TORGB
    return None


def freeze(gen: nn.Module, parts: Iterable[str]) -> nn.Module:
    """Stop gradients for the named parts (``ToRGB`` and/or ``Mapping``)."""
    parts = frozenset(parts)
    unknown = parts - {TORGB, MAPPING}
    if unknown:
        raise ArgumentError(f"cannot freeze {sorted(unknown)}")
    for name, p in gen.named_parameters():
        p.requires_grad_(_part_of(name) not in parts)
    gen.frozen_parts = parts
    return gen


def parameters_of(gen: nn.Module, part: str) -> dict[str, torch.Tensor]:
    return {n: p for n, p in gen.named_parameters() if _part_of(n) == part}


def trainable_parameters(gen: nn.Module) -> list[nn.Parameter]:
    return [p for p in gen.parameters() if p.requires_grad]


@contextlib.contextmanager
def no_param_grad(module: nn.Module):
    """Temporarily stop gradients into ``module``'s parameters."""
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


def clone_generator(gen: nn.Module) -> nn.Module:
    return copy.deepcopy(gen)


def _dtype_of(gen: nn.Module) -> torch.dtype:
    return next(gen.parameters()).dtype


def sample_w(gen, rng: RandomSource | torch.Generator, n: int) -> LatentCode:
    """Map ``n`` standard-normal draws through the mapping network; returns an (n, d) W code."""
    if n < 1:
        raise ArgumentError("n must be at least 1")
    z = torch.randn(n, gen.latent_dim, generator=as_generator(rng), dtype=torch.float64)
    return LatentCode.w(gen.mapping(z.to(_dtype_of(gen))))


def mean_latent(gen, n_samples: int = 10_000, rng: RandomSource | torch.Generator | None = None) -> LatentCode:
    if n_samples < 1:
        raise ArgumentError("n_samples must be at least 1")
    g = as_generator(rng if rng is not None else RandomSource(0, 0x3E))
    total, done = None, 0
    with torch.no_grad():
        while done < n_samples:
            m = min(4096, n_samples - done)
            s = sample_w(gen, g, m).data.sum(0)
            total = s if total is None else total + s
            done += m
    return LatentCode.w(total / n_samples)


def synthesize(gen, code: LatentCode | torch.Tensor) -> torch.Tensor:
    """Render a W or W+ code; W codes are broadcast to every layer."""
    if isinstance(code, torch.Tensor):
        code = LatentCode.w(code) if code.ndim <= 2 else LatentCode.wplus(code)
    ws = code.broadcast(gen.layer_count).data.to(_dtype_of(gen))
    return gen(ws)


def style_mix(code: LatentCode, replacement: LatentCode, k: int) -> LatentCode:
    """Replace the last ``k`` rows of a W+ code with one W vector."""
    if code.kind != LatentKind.WPLUS:
        raise ArgumentError("style_mix needs a W+ code; broadcast W codes first")
    layers = code.data.shape[-2]
    if not 0 <= k <= layers:
        raise ArgumentError(f"k={k} outside [0, {layers}]")
    if k == 0:
        return code
    rep = replacement.data
    if rep.ndim != 1:
        raise ShapeError("replacement must be a single W vector")
    data = code.data.clone()
    data[..., layers - k :, :] = rep.to(data.dtype)
    return LatentCode.wplus(data)


class DBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv0 = EqualConv2d(c_in, c_in, 3)
        self.conv1 = EqualConv2d(c_in, c_out, 3)
        self.skip = EqualConv2d(c_in, c_out, 1, bias=False)

    def forward(self, x):
        y = _lrelu(self.conv0(x))
        y = F.avg_pool2d(_lrelu(self.conv1(y)), 2)
        return (y + self.skip(F.avg_pool2d(x, 2))) / SQRT2


class Discriminator(nn.Module):
    """Residual discriminator with optional patch heads on intermediate features.

    ``patch_heads[str(l)]`` reads the backbone feature after the first ``l``
    residual stages (spatial size ``resolution / 2**l``).
    """

    def __init__(
        self,
        resolution: int = 32,
        channel_base: int = 1024,
        channel_max: int = 32,
        patch_layers: Iterable[int] = (1, 2),
        seed: int = 0,
    ):
        super().__init__()
        self.spec = dict(
            resolution=resolution,
            channel_base=channel_base,
            channel_max=channel_max,
            patch_layers=tuple(patch_layers),
            seed=seed,
        )
        ch = lambda r: min(channel_base // r, channel_max)  # noqa: E731
        self.resolution = resolution
        self.n_stages = int(math.log2(resolution)) - 2
        self.stage_channels = [ch(resolution // 2**i) for i in range(self.n_stages + 1)]
        self.patch_heads = nn.ModuleDict()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(RandomSource(seed, 0x64).derived_seed())
            self.from_rgb = EqualConv2d(3, ch(resolution), 1)
            self.stages = nn.ModuleList(
                DBlock(self.stage_channels[i], self.stage_channels[i + 1])
                for i in range(self.n_stages)
            )
            c4 = ch(4)
            self.head_conv = EqualConv2d(c4, c4, 3)
            self.head_fc = EqualLinear(c4 * 16, c4)
            self.head_out = EqualLinear(c4, 1)
            for l in patch_layers:
                self.add_patch_head(l)

    def add_patch_head(self, l: int):
        if not 1 <= l <= self.n_stages:
            raise ArgumentError(f"patch layer {l} outside [1, {self.n_stages}]")
        c = self.stage_channels[l]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(RandomSource(self.spec["seed"], 0x100 + l).derived_seed())
            self.patch_heads[str(l)] = nn.Sequential(
                EqualConv2d(c, c, 3), nn.LeakyReLU(0.2), EqualConv2d(c, 1, 1)
            )
        self.spec["patch_layers"] = tuple(sorted(int(k) for k in self.patch_heads))

    def features(self, images, upto: int | None = None) -> list[torch.Tensor]:
        """Backbone features; entry ``l`` is the output of the first ``l`` stages."""
        upto = self.n_stages if upto is None else upto
        x = _lrelu(self.from_rgb(images))
        feats = [x]
        for stage in self.stages[:upto]:
            x = stage(x)
            feats.append(x)
        return feats

    def global_score(self, images):
        x = self.features(images)[-1]
        x = _lrelu(self.head_conv(x))
        x = _lrelu(self.head_fc(x.flatten(1)))
        return self.head_out(x).squeeze(1)

    def patch_logits(self, images, layers) -> list[torch.Tensor]:
        layers = list(layers)
        missing = [l for l in layers if str(l) not in self.patch_heads]
        if missing:
            raise KeyError(f"no patch head registered for layers {missing}")
        feats = self.features(images, max(layers))
        return [self.patch_heads[str(l)](feats[l]) for l in layers]

    def forward(self, images):
        return self.global_score(images)


def build_discriminator(preset: DatasetPreset, seed: int = 0) -> Discriminator:
    return Discriminator(
        resolution=preset.resolution,
        channel_base=preset.channel_base,
        channel_max=preset.channel_max,
        patch_layers=preset.patch_layers,
        seed=seed,
    )


def _check_resolution(disc, images):
    res = getattr(disc, "resolution", None)
    if images.ndim != 4 or (res is not None and images.shape[-1] != res):
        raise ShapeError(f"discriminator expects {res}px images, got {tuple(images.shape)}")


def global_score(disc, images: torch.Tensor) -> torch.Tensor:
    """One logit per image."""
    _check_resolution(disc, images)
    return disc.global_score(images)


def patch_score(disc, images: torch.Tensor, layers: Iterable[int]) -> torch.Tensor:
    """Per image: spatial mean of each requested head's logit map, averaged over heads."""
    _check_resolution(disc, images)
    maps = disc.patch_logits(images, layers)
    return torch.stack([m.mean((1, 2, 3)) for m in maps]).mean(0)


SOURCE_FORMAT = "oneclip-source"
SOURCE_VERSION = 1


def save_source(path, gen: StyleGenerator, disc: Discriminator | None = None) -> None:
    """Write a pre-trained generator (and optionally its discriminator)."""
    torch.save(
        {
            "format": SOURCE_FORMAT,
            "version": SOURCE_VERSION,
            "generator_spec": dict(gen.spec),
            "generator": gen.state_dict(),
            "discriminator_spec": None if disc is None else dict(disc.spec),
            "discriminator": None if disc is None else disc.state_dict(),
        },
        path,
    )


def load_source(path) -> tuple[StyleGenerator, Discriminator | None]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise VersionError(f"{path} is not a readable source checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != SOURCE_FORMAT:
        raise VersionError(f"{path} is not a {SOURCE_FORMAT} file")
    if payload.get("version") != SOURCE_VERSION:
        raise VersionError(f"source checkpoint version {payload.get('version')} != {SOURCE_VERSION}")
    gen = StyleGenerator(**payload["generator_spec"])
    gen.load_state_dict(payload["generator"])
    disc = None
    if payload["discriminator"] is not None:
        spec = dict(payload["discriminator_spec"])
        spec["patch_layers"] = tuple(spec["patch_layers"])
        disc = Discriminator(**spec)
        disc.load_state_dict(payload["discriminator"])
    return gen, disc
