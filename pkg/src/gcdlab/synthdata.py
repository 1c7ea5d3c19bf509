"""Procedural paired (image, labeled mask) samples.

Scenes are non-overlapping rotated ellipses on a textured background; three
semantic classes with distinct size priors and base colors so class
identity is visually learnable at 32x32. Masks carry per-pixel instance
ids; a side map assigns each instance its semantic class.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import CapacityError, ConfigError, ShapeError
from .imageio import read_pgm16, read_ppm, write_pgm16, write_ppm


@dataclass
class LabeledMask:
    """Integer instance grid (0 = background) plus instance -> class map."""

    grid: np.ndarray
    classes: dict[int, int]

    def validate(self, n_classes: int | None = None) -> None:
        ids = set(np.unique(self.grid).tolist()) - {0}
        if ids != set(self.classes):
            raise ShapeError(
                f"mask ids {sorted(ids)} do not match class map keys "
                f"{sorted(self.classes)}"
            )
        if n_classes is not None:
            bad = [c for c in self.classes.values() if not 1 <= c <= n_classes]
            if bad:
                raise ShapeError(f"class labels out of range: {bad}")

    def instance_ids(self) -> list[int]:
        return sorted(self.classes)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape  # type: ignore[return-value]


@dataclass
class SynthConfig:
    size: int = 32
    n_classes: int = 3
    # per-class inclusive object-count ranges
    counts: list[tuple[int, int]] = field(
        default_factory=lambda: [(0, 4), (0, 4), (0, 4)]
    )
    # per-class half-axis ranges, pixels
    radii: list[tuple[float, float]] = field(
        default_factory=lambda: [(1.6, 2.3), (1.9, 2.7), (2.2, 3.2)]
    )
    colors: list[tuple[float, float, float]] = field(
        default_factory=lambda: [
            (0.80, 0.22, 0.22),
            (0.22, 0.70, 0.28),
            (0.26, 0.34, 0.82),
        ]
    )
    background: tuple[float, float, float] = (0.94, 0.91, 0.86)
    noise: float = 0.04
    color_jitter: float = 0.05
    margin: float = 1.5
    max_retries: int = 1000

    def __post_init__(self):
        for name in ("counts", "radii", "colors"):
            if len(getattr(self, name)) != self.n_classes:
                raise ConfigError(f"{name} must have one entry per class")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown dataset config keys: {sorted(bad)}")
        return cls(**d)


def config_hash(obj) -> str:
    """sha256 of the canonical JSON rendering of a config-like object."""
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _ellipse_mask(size, cr, cc, ra, rb, theta):
    """Boolean grid of pixels whose centers fall inside the rotated ellipse."""
    r = np.arange(size, dtype=np.float64)[:, None]
    c = np.arange(size, dtype=np.float64)[None, :]
    dr = r - cr
    dc = c - cc
    u = (dr * math.cos(theta) + dc * math.sin(theta)) / ra
    v = (-dr * math.sin(theta) + dc * math.cos(theta)) / rb
    return u * u + v * v <= 1.0


def generate_sample(seed: int, config: SynthConfig) -> tuple[np.ndarray, LabeledMask]:
    """One (image, mask) pair; pure in (seed, config)."""
    gen = rngmod.stream(seed, "synth")
    size = config.size
    grid = np.zeros((size, size), dtype=np.int32)
    occupied = np.zeros((size, size), dtype=bool)
    classes: dict[int, int] = {}
    image = np.empty((size, size, 3), dtype=np.float64)
    image[:] = np.asarray(config.background)

    next_id = 1
    for cls in range(1, config.n_classes + 1):
        lo, hi = config.counts[cls - 1]
        n_obj = int(gen.integers(lo, hi + 1))
        rlo, rhi = config.radii[cls - 1]
        for _ in range(n_obj):
            placed = False
            for _attempt in range(config.max_retries):
                ra = gen.uniform(rlo, rhi)
                rb = gen.uniform(rlo, rhi)
                theta = gen.uniform(0.0, math.pi)
                reach = max(ra, rb)
                if size - 2 - reach <= 1 + reach:
                    continue
                cr = gen.uniform(1 + reach, size - 2 - reach)
                cc = gen.uniform(1 + reach, size - 2 - reach)
                body = _ellipse_mask(size, cr, cc, ra, rb, theta)
                if not body.any():
                    continue
                # enforce the inter-object gap by dilating the candidate
                halo = _ellipse_mask(
                    size, cr, cc, ra + config.margin, rb + config.margin, theta
                )
                if (halo & occupied).any():
                    continue
                assert not (body & (grid != 0)).any()
                grid[body] = next_id
                occupied |= body
                color = np.asarray(config.colors[cls - 1]) + gen.uniform(
                    -config.color_jitter, config.color_jitter, size=3
                )
                image[body] = color
                classes[next_id] = cls
                next_id += 1
                placed = True
                break
            if not placed:
                raise CapacityError(
                    f"could not place object of class {cls} after "
                    f"{config.max_retries} retries; reduce counts or radii"
                )

    image += gen.uniform(-config.noise, config.noise, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    mask = LabeledMask(grid=grid, classes=classes)
    mask.validate(config.n_classes)
    return image, mask


# -- dataset on disk -------------------------------------------------------


def sample_name(index: int) -> str:
    return f"s{index:05d}"


def build_dataset(
    config: SynthConfig,
    n_train: int,
    n_test: int,
    seed: int,
    out_dir: str | Path,
) -> dict:
    """Write images (PPM), masks (PGM16 + class-map JSON) and a manifest."""
    if n_train <= 0 or n_test <= 0:
        raise ConfigError("n_train and n_test must be positive")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    records = []
    for idx in range(n_train + n_test):
        name = sample_name(idx)
        image, mask = generate_sample(rngmod.derive_key(seed, "sample", idx), config)
        write_ppm(out / "images" / f"{name}.ppm", image)
        write_pgm16(out / "masks" / f"{name}.pgm", mask.grid)
        class_map = {str(k): v for k, v in sorted(mask.classes.items())}
        (out / "masks" / f"{name}.classes.json").write_text(
            json.dumps(class_map, sort_keys=True)
        )
        records.append(
            {
                "id": name,
                "image": f"images/{name}.ppm",
                "mask": f"masks/{name}.pgm",
                "classes": f"masks/{name}.classes.json",
                "split": "train" if idx < n_train else "test",
            }
        )

    manifest = {
        "schema": "gcdlab-manifest-1",
        "seed": seed,
        "config": config.to_dict(),
        "config_hash": config_hash(config),
        "records": records,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(str(path))
    return json.loads(path.read_text())


def load_record(data_dir: str | Path, record: dict) -> tuple[np.ndarray, LabeledMask]:
    root = Path(data_dir)
    image = read_ppm(root / record["image"])
    grid = read_pgm16(root / record["mask"])
    class_map = json.loads((root / record["classes"]).read_text())
    mask = LabeledMask(grid=grid, classes={int(k): int(v) for k, v in class_map.items()})
    return image, mask


def load_mask(path: str | Path) -> LabeledMask:
    """Read a mask PGM plus its sibling .classes.json."""
    path = Path(path)
    grid = read_pgm16(path)
    side = path.with_suffix("").with_suffix(".classes.json")
    if not side.exists():
        side = path.parent / (path.stem + ".classes.json")
    class_map = json.loads(side.read_text())
    return LabeledMask(grid=grid, classes={int(k): int(v) for k, v in class_map.items()})
