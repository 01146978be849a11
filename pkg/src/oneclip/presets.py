"""Per-dataset constants for the adaptation runs.

Presets are plain data; override single fields with ``dataclasses.replace``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core_types import ArgumentError

LAMBDA_REG = 0.01
LAMBDA_CON = 10.0
LAMBDA_PATCH = 1.0
LEARNING_RATE = 0.02
TEXT_ITERATIONS = 1000
NEAR_DOMAIN_ITERATIONS = 1000
TEXT_SOURCE = "Photo"
TEXT_MIX_K_FFHQ = 11


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    resolution: int
    patch_size: int
    patch_layers: tuple[int, ...]
    mix_k: int
    layer_count: int
    batch_size: int
    default_iterations: int
    text_mix_k: int
    latent_dim: int = 512
    channel_base: int = 32768
    channel_max: int = 512
    mapping_layers: int = 8
    patch_negatives: int = 8

    def channels(self, res: int) -> int:
        return min(self.channel_base // res, self.channel_max)


PRESETS: dict[str, DatasetPreset] = {
    "ffhq": DatasetPreset(
        "ffhq", 1024, 128, (5, 6), 7, 18, 2, 2000, TEXT_MIX_K_FFHQ
    ),
    "church": DatasetPreset(
        "church", 256, 64, (3, 4), 6, 14, 4, 1500, 9, channel_base=16384
    ),
    "cars": DatasetPreset(
        "cars", 512, 32, (4, 5), 7, 16, 2, 2000, 10
    ),
    # patch size and batch size for AFHQ dog are not published; cars values reused.
    "afhq_dog": DatasetPreset(
        "afhq_dog", 512, 32, (4, 5), 9, 16, 2, 2000, 10
    ),
    "toy": DatasetPreset(
        "toy", 32, 16, (1, 2), 3, 8, 4, 200, 5,
        latent_dim=64, channel_base=1024, channel_max=32, mapping_layers=2,
        patch_negatives=4,
    ),
}


def get_preset(name: str) -> DatasetPreset:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
