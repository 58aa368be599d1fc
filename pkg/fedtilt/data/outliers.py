from dataclasses import dataclass

import numpy as np

from fedtilt.data.dataset import Shard


def _check_fraction(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class GaussianNoise:
    """Additive N(mean, std^2) noise on every feature of the selected samples.

    Args:
        mean: Mean of the noise.
        std: Standard deviation of the noise.
        sample_fraction: Share of the candidate samples to corrupt.
        target_class: Restrict candidates to this class. All samples are candidates when None.
    """

    mean: float = 0.0
    std: float = 0.15
    sample_fraction: float = 0.1
    target_class: int | None = None

    def __post_init__(self) -> None:
        if self.std <= 0:
            raise ValueError(f"std must be positive, got {self.std}")
        _check_fraction("sample_fraction", self.sample_fraction)


@dataclass(frozen=True)
class PixelCorruption:
    """Replace a fraction of the coordinates of the selected samples with uniform values in [0, 1]."""

    pixel_fraction: float = 0.3
    sample_fraction: float = 0.3

    def __post_init__(self) -> None:
        _check_fraction("pixel_fraction", self.pixel_fraction)
        _check_fraction("sample_fraction", self.sample_fraction)


@dataclass(frozen=True)
class OutlierSpec:
    """Which outliers to inject and whether to draw a fresh subset every round.

    Args:
        kind: The corruption to apply.
        persistent: Re-inject into a new random subset every global round. When False the same
            subset and values are used in every round.
    """

    kind: GaussianNoise | PixelCorruption
    persistent: bool = True


def inject_outliers(shard: Shard, spec: OutlierSpec, round_index: int, seed: int) -> Shard:
    """Return a corrupted copy of a clean shard; the shard itself is never modified."""
    kind = spec.kind
    candidates = np.arange(len(shard))
    if isinstance(kind, GaussianNoise) and kind.target_class is not None:
        candidates = np.flatnonzero(shard.labels == kind.target_class)
    num_selected = int(np.floor(kind.sample_fraction * len(candidates)))
    if num_selected == 0:
        return shard

    rng = np.random.default_rng([seed, round_index if spec.persistent else 0])
    selected = np.sort(rng.choice(candidates, size=num_selected, replace=False))
    features = shard.features.copy()
    if isinstance(kind, GaussianNoise):
        features[selected] += rng.normal(kind.mean, kind.std, size=(num_selected, shard.input_dim))
    else:
        num_pixels = int(np.floor(kind.pixel_fraction * shard.input_dim))
        for row in selected:
            pixels = rng.choice(shard.input_dim, size=num_pixels, replace=False)
            features[row, pixels] = rng.uniform(0.0, 1.0, size=num_pixels)
    return Shard(features, shard.labels)
