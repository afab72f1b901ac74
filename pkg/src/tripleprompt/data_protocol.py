"""Synthetic planted datasets, label-masking protocols and the dataset format.

On disk a dataset is a directory with

* ``manifest.json``: counts, grid dims, seeds, checksum
* ``features.bin``: little-endian float32, image-major, row-major grid,
  each region vector contiguous
* ``labels.csv``: one row per image, ``image_id`` then M values in {-1, 0, 1}
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .prompt_context import keyed_unit_vector

FORMAT_NAME = "tripleprompt-dataset"
FORMAT_VERSION = 1
DEFAULT_CONFUSION_ANGLE = 0.35


class DatasetFormatError(ValueError):
    pass


class ChecksumError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int = 700
    num_classes: int = 10
    height: int = 4
    width: int = 4
    feature_dim: int = 16
    prototype_seed: int = 0
    image_seed: int = 1
    noise_sigma: float = 0.1
    signal: float = 1.0
    min_planted: int = 1
    max_planted: int = 3
    confusion_pairs: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "confusion_pairs",
                           tuple((int(a), int(b), float(t)) for a, b, t in self.confusion_pairs))
        if self.num_images < 1 or self.num_classes < 1:
            raise ValueError("num_images and num_classes must be >= 1")
        if self.height < 1 or self.width < 1 or self.feature_dim < 1:
            raise ValueError("grid and feature dims must be >= 1")
        if self.noise_sigma < 0 or not self.signal > 0:
            raise ValueError("noise_sigma must be >= 0 and signal > 0")
        if not 1 <= self.min_planted <= self.max_planted:
            raise ValueError("need 1 <= min_planted <= max_planted")
        if self.max_planted > min(self.num_classes, self.height * self.width):
            raise ValueError(
                f"max_planted={self.max_planted} exceeds min(M={self.num_classes}, "
                f"H*W={self.height * self.width})"
            )
        for a, b, angle in self.confusion_pairs:
            if not (0 <= a < self.num_classes and 0 <= b < self.num_classes) or a == b:
                raise ValueError(f"bad confusion pair ({a}, {b})")
            if not 0 < angle <= math.pi / 2:
                raise ValueError(f"confusion angle must lie in (0, pi/2], got {angle}")


@dataclass
class Dataset:
    features: np.ndarray  # (n, H, W, D_v) float32
    labels: np.ndarray  # (n, M) int8 in {-1, 0, 1}
    meta: dict = field(default_factory=dict)

    @property
    def num_images(self) -> int:
        return self.features.shape[0]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def flat_features(self) -> np.ndarray:
        """(n, H*W, D_v) float64 view used by the head."""
        n, h, w, d = self.features.shape
        return self.features.reshape(n, h * w, d).astype(np.float64)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], dict(self.meta))

    def checksum(self) -> str:
        return _checksum(_features_bytes(self.features), _labels_bytes(self.labels))


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """Unit class prototypes, with confusion pairs rotated to their angle."""
    u = np.stack([keyed_unit_vector(spec.prototype_seed, m, spec.feature_dim)
                  for m in range(spec.num_classes)])
    for a, b, angle in spec.confusion_pairs:
        v = u[b] - (u[b] @ u[a]) * u[a]
        v /= np.linalg.norm(v)
        u[b] = math.cos(angle) * u[a] + math.sin(angle) * v
    return u


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Each image plants k classes, one distinct region each; the rest is noise."""
    protos = class_prototypes(spec)
    rng = np.random.default_rng([spec.image_seed, 0xDA7A])
    n, r, d = spec.num_images, spec.height * spec.width, spec.feature_dim
    feats = np.empty((n, r, d))
    labels = -np.ones((n, spec.num_classes), dtype=np.int8)
    for i in range(n):
        k = int(rng.integers(spec.min_planted, spec.max_planted + 1))
        classes = rng.choice(spec.num_classes, size=k, replace=False)
        regions = rng.choice(r, size=k, replace=False)
        feats[i] = spec.noise_sigma * rng.standard_normal((r, d))
        feats[i, regions] += spec.signal * protos[classes]
        labels[i, classes] = 1
    meta = {"spec": _spec_dict(spec)}
    return Dataset(feats.reshape(n, spec.height, spec.width, d).astype(np.float32), labels, meta)


def _spec_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d["confusion_pairs"] = [list(p) for p in spec.confusion_pairs]
    return d


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_labels(full: np.ndarray, keep_proportion: float, seed: int) -> np.ndarray:
    """Keep a uniformly random subset of cells; the rest become unknown (0)."""
    if not 0 < keep_proportion <= 1:
        raise ValueError(f"keep_proportion must lie in (0, 1], got {keep_proportion}")
    full = np.asarray(full)
    if np.any(full == 0):
        raise ValueError("mask_labels expects a fully annotated matrix")
    n_keep = _round_half_up(keep_proportion * full.size)
    rng = np.random.default_rng([int(seed), 0x3A5C])
    keep = rng.choice(full.size, size=n_keep, replace=False)
    out = np.zeros_like(full)
    out.flat[keep] = full.flat[keep]
    return out


@dataclass(frozen=True)
class SplitSpec:
    seen_classes: tuple[int, ...]
    unseen_classes: tuple[int, ...]

    def __post_init__(self):
        if set(self.seen_classes) & set(self.unseen_classes):
            raise ValueError("seen and unseen classes overlap")

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(sorted(self.seen_classes + self.unseen_classes))


def split_zero_shot(num_classes: int, unseen_fraction: float, seed: int) -> SplitSpec:
    if not 0 < unseen_fraction < 1:
        raise ValueError(f"unseen_fraction must lie in (0, 1), got {unseen_fraction}")
    n_unseen = _round_half_up(unseen_fraction * num_classes)
    if n_unseen == 0 or n_unseen == num_classes:
        raise ValueError(
            f"unseen_fraction={unseen_fraction} leaves an empty side for {num_classes} classes"
        )
    perm = np.random.default_rng([int(seed), 0x2E50]).permutation(num_classes)
    unseen = tuple(sorted(int(c) for c in perm[:n_unseen]))
    seen = tuple(sorted(int(c) for c in perm[n_unseen:]))
    return SplitSpec(seen, unseen)


def hide_unseen(labels: np.ndarray, split: SplitSpec) -> np.ndarray:
    """Training labels with every unseen class set to unknown."""
    out = np.array(labels, copy=True)
    out[:, list(split.unseen_classes)] = 0
    return out


# ---------------------------------------------------------------------------
# persistence


def _features_bytes(features: np.ndarray) -> bytes:
    return np.ascontiguousarray(features, dtype="<f4").tobytes()


def _labels_bytes(labels: np.ndarray) -> bytes:
    lines = [",".join([str(i)] + [str(int(v)) for v in row]) for i, row in enumerate(labels)]
    return ("\n".join(lines) + "\n").encode("ascii")


def _checksum(feat_bytes: bytes, label_bytes: bytes) -> str:
    h = hashlib.sha256()
    h.update(feat_bytes)
    h.update(label_bytes)
    return h.hexdigest()


def save_dataset(path: str | Path, ds: Dataset) -> dict:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, h, w, d = ds.features.shape
    fb, lb = _features_bytes(ds.features), _labels_bytes(ds.labels)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "num_images": n,
        "num_classes": ds.num_classes,
        "height": h,
        "width": w,
        "feature_dim": d,
        "checksum": _checksum(fb, lb),
        "meta": ds.meta,
    }
    (path / "features.bin").write_bytes(fb)
    (path / "labels.csv").write_bytes(lb)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        fb = (path / "features.bin").read_bytes()
        lb = (path / "labels.csv").read_bytes()
    except FileNotFoundError as e:
        raise DatasetFormatError(f"missing dataset file: {e.filename}") from None
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"manifest.json is not valid JSON: {e}") from None

    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError("unrecognised dataset format or version")
    try:
        n, m = int(manifest["num_images"]), int(manifest["num_classes"])
        h, w, d = int(manifest["height"]), int(manifest["width"]), int(manifest["feature_dim"])
        expected = manifest["checksum"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"malformed manifest: {e}") from None
    if min(n, m, h, w, d) < 1:
        raise DatasetFormatError("manifest dimensions must be positive")
    if len(fb) != 4 * n * h * w * d:
        raise DatasetFormatError(
            f"features.bin holds {len(fb)} bytes; header implies {4 * n * h * w * d}"
        )
    if _checksum(fb, lb) != expected:
        raise ChecksumError(f"checksum mismatch in {path}")

    features = np.frombuffer(fb, dtype="<f4").reshape(n, h, w, d).astype(np.float32)
    labels = _parse_labels(lb, n, m)
    return Dataset(features, labels, manifest.get("meta", {}))


def _parse_labels(raw: bytes, n: int, m: int) -> np.ndarray:
    rows = raw.decode("ascii").splitlines()
    if len(rows) != n:
        raise DatasetFormatError(f"labels.csv has {len(rows)} rows, expected {n}")
    labels = np.empty((n, m), dtype=np.int8)
    for i, line in enumerate(rows):
        parts = line.split(",")
        if len(parts) != m + 1 or parts[0] != str(i):
            raise DatasetFormatError(f"labels.csv row {i} is malformed")
        vals = [int(v) for v in parts[1:]]
        if any(v not in (-1, 0, 1) for v in vals):
            raise DatasetFormatError(f"labels.csv row {i} has values outside {{-1, 0, 1}}")
        labels[i] = vals
    return labels
