"""Synthetic open-set protocols and feature-file ingestion.

The generator lays out Gaussian class clusters that mimic the structure of
the ImageNet-style protocols at desk scale. All class centers sit on one
sphere (constant input magnitude, like bounded deep activations), so
"semantic distance" becomes angular distance: K known classes occupy
orthogonal axes, and negative / unknown class centers are rotated away
from a known anchor center by a controllable chord offset. Offsets near 0
drop unknown clusters on top of known ones (hard, P3-like); large offsets
rotate them toward directions no known class activates (easy, P1-like).
Known and negative classes span the train/val/test splits with fresh draws
per split; unknown classes exist only in the test split.

Labels are 1-based: tau in 1..K for knowns, K+1 for negatives and unknowns
(the category tag disambiguates the two).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import SeededRng

__all__ = [
    "SPLITS",
    "CATEGORIES",
    "ProtocolSpec",
    "ProtocolData",
    "generate_protocol",
    "save_features_csv",
    "load_features_csv",
]

SPLITS = ("train", "val", "test")
CATEGORIES = ("known", "negative", "unknown")


@dataclass
class ProtocolSpec:
    """Geometry and size of a synthetic protocol.

    `neg_offset` / `unk_offset` multiply the base center spacing (4x the
    cluster spread) to give the chord distance between a negative /
    unknown class center and the known-class region. Offsets saturate at
    the placement sphere's diameter (sqrt(2) in spacing units).
    """

    n_known: int = 3
    n_negative_classes: int = 2
    n_unknown_classes: int = 2
    dim: int = 8
    train_samples: int = 30
    val_samples: int = 20
    test_samples: int = 40
    neg_offset: float = 0.5
    unk_offset: float = 1.2
    cluster_spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_known", "n_negative_classes", "n_unknown_classes",
                     "train_samples", "val_samples", "test_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dim < max(self.n_known, 2):
            raise ValueError(
                f"dim={self.dim} too small to place {self.n_known} known classes distinctly"
            )
        if self.neg_offset <= 0 or self.unk_offset <= 0:
            raise ValueError("offsets must be positive")
        if self.cluster_spread <= 0:
            raise ValueError("cluster_spread must be positive")

    @property
    def base_spacing(self):
        # adjacent known centers sit one base spacing apart
        return 4.0 * self.cluster_spread


@dataclass
class ProtocolData:
    """Feature rows with split/category/label tags and a provenance manifest."""

    x: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    categories: np.ndarray
    manifest: dict

    def __len__(self):
        return self.x.shape[0]

    @property
    def n_known(self):
        known = self.labels[self.categories == "known"]
        return int(known.max()) if known.size else 0

    def subset(self, split=None, categories=None):
        """Rows matching the split and/or category filter, order preserved."""
        mask = np.ones(len(self), dtype=bool)
        if split is not None:
            mask &= self.splits == split
        if categories is not None:
            wanted = (categories,) if isinstance(categories, str) else tuple(categories)
            mask &= np.isin(self.categories, wanted)
        return ProtocolData(
            x=self.x[mask],
            labels=self.labels[mask],
            splits=self.splits[mask],
            categories=self.categories[mask],
            manifest=self.manifest,
        )


def _offset_center(rng, known_centers, radius, target_chord):
    """A center on the placement sphere at roughly `target_chord` from the
    nearest known center.

    The direction starts at a randomly chosen known anchor and rotates
    along the sphere by the angle matching the chord. Candidate rotation
    directions are redrawn (up to 50 times) until the center also keeps
    `target_chord` to every *other* known center; the best candidate wins
    otherwise. Deterministic for a given generator state.
    """
    target = min(target_chord, 2.0 * radius * 0.999)
    anchor = known_centers[int(rng.integers(0, known_centers.shape[0]))] / radius
    angle = 2.0 * np.arcsin(target / (2.0 * radius))
    best, best_min = None, -1.0
    for _ in range(50):
        v = rng.normal(0.0, 1.0, anchor.size)
        v -= (v @ anchor) * anchor
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            continue
        center = radius * (np.cos(angle) * anchor + np.sin(angle) * v / norm)
        min_dist = float(np.min(np.linalg.norm(known_centers - center, axis=1)))
        if min_dist > best_min:
            best, best_min = center, min_dist
        if min_dist >= 0.95 * target:
            break
    return best


def generate_protocol(spec, seed=None):
    """Deterministic synthetic protocol for a spec and seed.

    Draw order is fixed (centers first, then samples nested by category,
    class, split), so identical inputs give byte-identical data.
    """
    seed = spec.seed if seed is None else int(seed)
    rng = SeededRng(seed)
    spacing = spec.base_spacing
    radius = spacing / np.sqrt(2.0)  # adjacent known centers one spacing apart

    known_centers = np.zeros((spec.n_known, spec.dim))
    for i in range(spec.n_known):
        known_centers[i, i] = radius

    neg_centers = np.stack([
        _offset_center(rng, known_centers, radius, spec.neg_offset * spacing)
        for _ in range(spec.n_negative_classes)
    ])
    unk_centers = np.stack([
        _offset_center(rng, known_centers, radius, spec.unk_offset * spacing)
        for _ in range(spec.n_unknown_classes)
    ])

    per_split = {"train": spec.train_samples, "val": spec.val_samples,
                 "test": spec.test_samples}
    rows, labels, splits, cats = [], [], [], []

    def emit(center, label, category, split_names):
        for split in split_names:
            n = per_split[split]
            rows.append(center + spec.cluster_spread * rng.normal(0.0, 1.0, (n, spec.dim)))
            labels.append(np.full(n, label, dtype=np.int64))
            splits.extend([split] * n)
            cats.extend([category] * n)

    for i in range(spec.n_known):
        emit(known_centers[i], i + 1, "known", SPLITS)
    for j in range(spec.n_negative_classes):
        emit(neg_centers[j], spec.n_known + 1, "negative", SPLITS)
    for j in range(spec.n_unknown_classes):
        emit(unk_centers[j], spec.n_known + 1, "unknown", ("test",))

    manifest = {"generator": "gaussian-simplex-v1", "seed": seed, "spec": asdict(spec)}
    return ProtocolData(
        x=np.concatenate(rows, axis=0),
        labels=np.concatenate(labels),
        splits=np.asarray(splits),
        categories=np.asarray(cats),
        manifest=manifest,
    )


def save_features_csv(data, path):
    """Canonical CSV form: header split,category,label,f0..f{D-1}; floats
    written with repr (shortest round-trip), LF line endings."""
    dim = data.x.shape[1]
    header = "split,category,label," + ",".join(f"f{i}" for i in range(dim))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for i in range(len(data)):
            feats = ",".join(repr(float(v)) for v in data.x[i])
            fh.write(f"{data.splits[i]},{data.categories[i]},{int(data.labels[i])},{feats}\n")


def load_features_csv(path):
    """Parse a feature CSV, validating structure row by row.

    Raises ValueError naming the offending line for malformed rows,
    dimension mismatches, bad tokens, or category/label inconsistencies.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        cols = header.split(",")
        if cols[:3] != ["split", "category", "label"] or len(cols) < 4:
            raise ValueError(f"{path}: bad header {header!r}")
        dim = len(cols) - 3
        for i, name in enumerate(cols[3:]):
            if name != f"f{i}":
                raise ValueError(f"{path}: bad feature column {name!r} (expected f{i})")

        xs, labels, splits, cats = [], [], [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != 3 + dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {3 + dim} fields, found {len(parts)}"
                )
            split, category, label_str = parts[0], parts[1], parts[2]
            if split not in SPLITS:
                raise ValueError(f"{path}:{lineno}: unknown split token {split!r}")
            if category not in CATEGORIES:
                raise ValueError(f"{path}:{lineno}: unknown category token {category!r}")
            try:
                label = int(label_str)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label {label_str!r} is not an integer") from None
            if label < 1:
                raise ValueError(f"{path}:{lineno}: label must be a positive integer")
            try:
                feats = [float(v) for v in parts[3:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed feature value") from None
            xs.append(feats)
            labels.append(label)
            splits.append(split)
            cats.append(category)

    if not xs:
        raise ValueError(f"{path}: no data rows")
    data = ProtocolData(
        x=np.asarray(xs, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        splits=np.asarray(splits),
        categories=np.asarray(cats),
        manifest={"source": "csv"},
    )
    _validate_consistency(data, path)
    return data


def _validate_consistency(data, path):
    known = data.categories == "known"
    if not np.any(known):
        raise ValueError(f"{path}: file contains no known-category samples")
    n_known = int(data.labels[known].max())
    known_labels = set(data.labels[known].tolist())
    if known_labels != set(range(1, n_known + 1)):
        raise ValueError(f"{path}: known labels must cover 1..K, found {sorted(known_labels)}")
    other = ~known
    if np.any(data.labels[other] != n_known + 1):
        bad = sorted(set(data.labels[other][data.labels[other] != n_known + 1].tolist()))
        raise ValueError(
            f"{path}: negative/unknown samples must carry label K+1={n_known + 1}, found {bad}"
        )
    if np.any((data.categories == "unknown") & (data.splits != "test")):
        raise ValueError(f"{path}: unknown-category samples may only appear in the test split")
