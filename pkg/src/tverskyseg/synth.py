"""Synthetic class-imbalanced CT-like volumes.

Each volume is a noisy soft-tissue background with one to three bright,
soft-edged ellipsoids; the label is the ellipsoids' support.  Sizes are
drawn so the foreground occupies a small, configurable fraction of the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import VolumeSample, split_dataset, write_manifest, write_raw_volume


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    extent: int = 32
    count: int = 30
    fg_min: float = 0.005
    fg_max: float = 0.03
    ellipsoids_min: int = 1
    ellipsoids_max: int = 3
    aspect_max: float = 1.6
    background_hu: float = 40.0
    contrast_hu: float = 110.0
    noise_hu: float = 20.0
    edge_width: float = 0.15
    spacing_mm: tuple[float, float, float] = (2.0, 0.8, 0.8)
    seed: int = 0
    max_attempts: int = 200

    def validate(self) -> None:
        if self.extent < 4:
            raise InfeasibleConfig(f"extent must be >= 4, got {self.extent}")
        if self.count < 3:
            raise InfeasibleConfig(f"count must be >= 3 to form train/val/test splits, got {self.count}")
        if not 0 < self.fg_min <= self.fg_max <= 0.05:
            raise InfeasibleConfig(
                f"foreground fraction range must satisfy 0 < fg_min <= fg_max <= 0.05, "
                f"got [{self.fg_min}, {self.fg_max}]"
            )
        if not 1 <= self.ellipsoids_min <= self.ellipsoids_max:
            raise InfeasibleConfig(
                f"need 1 <= ellipsoids_min <= ellipsoids_max, got {self.ellipsoids_min}, {self.ellipsoids_max}"
            )
        n_vox = self.extent ** 3
        if self.fg_max * n_vox < self.ellipsoids_max * 7:
            raise InfeasibleConfig(
                f"extent {self.extent} with fg_max {self.fg_max} allows {self.fg_max * n_vox:.1f} "
                f"foreground voxels, too few for {self.ellipsoids_max} ellipsoids"
            )
        if self.aspect_max < 1:
            raise InfeasibleConfig(f"aspect_max must be >= 1, got {self.aspect_max}")


def _ellipsoid_field(shape, center, radii):
    zz, yy, xx = np.meshgrid(*(np.arange(s, dtype=np.float64) for s in shape), indexing="ij")
    return np.sqrt(((zz - center[0]) / radii[0]) ** 2
                   + ((yy - center[1]) / radii[1]) ** 2
                   + ((xx - center[2]) / radii[2]) ** 2)


def _try_volume(cfg: SynthConfig, rng: np.random.Generator):
    shape = (cfg.extent,) * 3
    n_vox = cfg.extent ** 3
    target = rng.uniform(cfg.fg_min, cfg.fg_max) * n_vox
    k = int(rng.integers(cfg.ellipsoids_min, cfg.ellipsoids_max + 1))
    shares = rng.dirichlet(np.full(k, 2.0)) * target
    label = np.zeros(shape, dtype=bool)
    soft = np.zeros(shape, dtype=np.float64)
    for vol in shares:
        aspects = rng.uniform(1.0, cfg.aspect_max, size=3)
        scale = (vol / (4.0 / 3.0 * math.pi * np.prod(aspects))) ** (1.0 / 3.0)
        radii = np.maximum(scale * aspects, 1.0)
        margin = radii + 1
        center = [rng.uniform(m, s - 1 - m) if s - 1 - m > m else (s - 1) / 2 for m, s in zip(margin, shape)]
        r = _ellipsoid_field(shape, center, radii)
        label |= r <= 1.0
        soft = np.maximum(soft, 1.0 / (1.0 + np.exp((r - 1.0) / cfg.edge_width)))
    image = cfg.background_hu + cfg.contrast_hu * soft + rng.normal(0.0, cfg.noise_hu, size=shape)
    return image.astype(np.float32), label.astype(np.uint8)


def generate_volume(cfg: SynthConfig, rng: np.random.Generator, sample_id: str) -> VolumeSample:
    lo, hi = cfg.fg_min * cfg.extent ** 3, cfg.fg_max * cfg.extent ** 3
    for _ in range(cfg.max_attempts):
        image, label = _try_volume(cfg, rng)
        if lo <= label.sum() <= hi:
            return VolumeSample(image, label, cfg.spacing_mm, sample_id)
    raise InfeasibleConfig(
        f"could not hit foreground fraction [{cfg.fg_min}, {cfg.fg_max}] in {cfg.max_attempts} attempts"
    )


def gen_synthetic(cfg: SynthConfig, out_dir) -> Path:
    """Generate ``cfg.count`` volumes plus ``manifest.json`` under ``out_dir``.

    All volumes are built in memory first, so an infeasible configuration
    writes nothing.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    width = max(3, len(str(cfg.count - 1)))
    samples = [generate_volume(cfg, rng, f"synth{i:0{width}d}") for i in range(cfg.count)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_raw_volume(s, out)
    write_manifest(split_dataset([s.id for s in samples], cfg.seed), out)
    return out
