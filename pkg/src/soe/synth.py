"""Synthetic head phantoms with geometry-derived labels.

Each phantom is a smoothed ellipsoidal head with a bright cortical shell of
thickness ``t``, a dark ventricle ellipsoid of size ``v`` and two asymmetric
landmarks (brainstem and cerebellum), so that no rotation other than the
identity maps a phantom onto itself. The class label is ``v > v_threshold``
and the age analogue is a decreasing affine function of ``t`` plus noise.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .fileio import atomic_write
from .so3 import AxisAngle, from_axis_angle
from .volume import Volume, centered_coords, read_volume, write_volume

AGE_MIN, AGE_MAX = 54.4, 90.9
NOISE_SIGMA = 0.02
VALID_DIMS = (16, 32, 64)

# latent laws, as fractions of the grid size n
V_RANGE = (0.07, 0.15)
V_THRESHOLD = 0.11
T_RANGE = (0.04, 0.10)
AGE_NOISE = 2.0
ORIENT_JITTER = np.deg2rad(10.0)


@dataclass
class Phantom:
    id: str
    volume: Volume
    class_label: int
    age_value: float
    ventricle: float
    thickness: float


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {self.fractions}")


def label_from_ventricle(v: float, threshold: float = V_THRESHOLD) -> int:
    return int(v > threshold)


def age_from_thickness(t: float, noise: float = 0.0) -> float:
    frac = (t - T_RANGE[0]) / (T_RANGE[1] - T_RANGE[0])
    return float(np.clip(AGE_MAX - frac * (AGE_MAX - AGE_MIN) + noise, AGE_MIN, AGE_MAX))


def _ellipsoid(c: np.ndarray, center, semi) -> np.ndarray:
    """Implicit value sum(((c - center) / semi)^2); < 1 inside."""
    return np.sum(((c - np.asarray(center)) / np.asarray(semi)) ** 2, axis=-1)


def render(n: int, ventricle: float, thickness: float, rng: np.random.Generator) -> np.ndarray:
    """Rasterize one phantom at n^3 given its latent sizes (fractions of n)."""
    c = centered_coords(n) / n
    axis = rng.standard_normal(3)
    R = from_axis_angle(AxisAngle(axis / np.linalg.norm(axis), rng.uniform(0, ORIENT_JITTER))).m
    c = c @ R + rng.uniform(-0.02, 0.02, 3)  # small pose jitter

    head = np.array([0.40, 0.34, 0.31]) * rng.uniform(0.95, 1.05, 3)
    inner = head - thickness
    vol = np.zeros((n, n, n))
    vol[_ellipsoid(c, 0, head) < 1] = 1.0
    vol[_ellipsoid(c, 0, inner) < 1] = 0.55
    # landmarks break every symmetry of the ellipsoids
    vol[_ellipsoid(c, (-0.05, -0.12, -0.10), (0.07, 0.06, 0.16)) < 1] = 0.8   # brainstem
    vol[_ellipsoid(c, (-0.22, 0.10, -0.14), (0.09, 0.12, 0.07)) < 1] = 0.75   # cerebellum
    vent = np.array([1.6, 0.7, 0.8]) * ventricle
    vol[_ellipsoid(c, (0.06, 0.05, 0.04), vent) < 1] = 0.1
    vol = ndimage.gaussian_filter(vol, sigma=0.04 * n, mode="constant")
    vol += rng.normal(0.0, NOISE_SIGMA, vol.shape)
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def generate_one(index: int, dim: int, seed: int, v_threshold: float = V_THRESHOLD) -> Phantom:
    rng = np.random.default_rng([seed, index])
    v = rng.uniform(*V_RANGE)
    t = rng.uniform(*T_RANGE)
    age = age_from_thickness(t, rng.normal(0.0, AGE_NOISE))
    vol = Volume(render(dim, v, t, rng))
    return Phantom(f"ph{seed}_{index:05d}", vol, label_from_ventricle(v, v_threshold), age, v, t)


def generate(n_samples: int, dim: int, seed: int, v_threshold: float = V_THRESHOLD) -> list[Phantom]:
    """Deterministic phantoms; item ``i`` depends only on (seed, i)."""
    if dim not in VALID_DIMS:
        raise ValueError(f"dim must be one of {VALID_DIMS}, got {dim}")
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    return [generate_one(i, dim, seed, v_threshold) for i in range(n_samples)]


def _split_key(seed: int, item_id: str) -> bytes:
    return hashlib.sha256(f"{seed}:{item_id}".encode()).digest()


def split(items: Sequence, spec: SplitSpec = SplitSpec(),
          key: Callable | None = None) -> tuple[list, list, list]:
    """Deterministic train/val/test split keyed on item ids.

    Items are ordered by a hash of (seed, id), so membership depends on the ids
    and the seed but not on input order.
    """
    if len(items) == 0:
        raise ValueError("cannot split an empty collection")
    key = key or (lambda it: getattr(it, "id", it))
    ordered = sorted(items, key=lambda it: _split_key(spec.seed, str(key(it))))
    n = len(ordered)
    n_train = int(round(spec.fractions[0] * n))
    n_val = min(int(round(spec.fractions[1] * n)), n - n_train)
    return ordered[:n_train], ordered[n_train:n_train + n_val], ordered[n_train + n_val:]


def stack(phantoms: Sequence[Phantom]) -> np.ndarray:
    return np.stack([p.volume.data for p in phantoms]) if phantoms else np.zeros((0,))


# -- manifest ------------------------------------------------------------------

MANIFEST_FIELDS = ("id", "path", "class_label", "age_value", "split")


def write_dataset(out_dir, splits: dict[str, Sequence[Phantom]]) -> Path:
    """Write one SOEV file per phantom plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    rows = []
    for split_name, items in splits.items():
        for p in items:
            rel = f"volumes/{p.id}.vol"
            write_volume(out_dir / rel, p.volume)
            rows.append({"id": p.id, "path": rel, "class_label": p.class_label,
                         "age_value": repr(float(p.age_value)), "split": split_name})
    lines = [",".join(MANIFEST_FIELDS)] + [",".join(str(r[f]) for f in MANIFEST_FIELDS) for r in rows]
    manifest = out_dir / "manifest.csv"
    atomic_write(manifest, "\n".join(lines) + "\n")
    return manifest


def read_dataset(manifest) -> dict[str, list[Phantom]]:
    manifest = Path(manifest)
    out: dict[str, list[Phantom]] = {"train": [], "val": [], "test": []}
    with manifest.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise ValueError(f"manifest columns must be {MANIFEST_FIELDS}, got {reader.fieldnames}")
        for row in reader:
            vol = read_volume(manifest.parent / row["path"])
            p = Phantom(row["id"], vol, int(row["class_label"]), float(row["age_value"]),
                        float("nan"), float("nan"))
            out.setdefault(row["split"], []).append(p)
    return out
