"""Procedural toy shapes, train-time augmentation, test-time corruption,
and plain-text point-cloud / manifest IO.

All generators draw from a `numpy.random.Generator` seeded per spec, so
identical specs produce bitwise-identical clouds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PointCloud

CLASS_KINDS = ("sphere", "cube", "torus", "cylinder", "plane-pair")


class ParseError(ValueError):
    """Malformed point-cloud or manifest file."""


@dataclass
class ShapeSpec:
    kind: str
    n_points: int
    jitter_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CLASS_KINDS:
            raise ValueError(f"unknown shape kind '{self.kind}'")
        if self.n_points < 8:
            raise ValueError("n_points must be >= 8")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")


@dataclass
class CorruptionSpec:
    replace_ratio: float = 0.0
    noise_low: float = -1.0
    noise_high: float = 1.0
    sparsify_to: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.replace_ratio <= 1.0:
            raise ValueError("replace_ratio must lie in [0, 1]")
        if self.noise_low >= self.noise_high:
            raise ValueError("noise_low must be < noise_high")


def _sphere(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, (v[:, 2] > 0).astype(np.int64)


def _cube(n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    axis = rng.integers(0, 3, size=n)
    sign = rng.integers(0, 2, size=n) * 2 - 1
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    pts[np.arange(n), axis] = sign
    return pts, (axis * 2 + (sign > 0)).astype(np.int64)


def _torus(n: int, rng, big_r: float = 0.7, small_r: float = 0.3):
    u = rng.uniform(0.0, 2 * np.pi, size=n)
    # rejection on the tube angle corrects for surface area
    v = np.empty(n)
    filled = 0
    while filled < n:
        cand = rng.uniform(0.0, 2 * np.pi, size=n)
        accept = rng.uniform(0.0, 1.0, size=n) < (big_r + small_r * np.cos(cand)) / (big_r + small_r)
        take = cand[accept][: n - filled]
        v[filled:filled + take.size] = take
        filled += take.size
    ring = big_r + small_r * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), small_r * np.sin(v)], axis=1)
    return pts, (np.cos(v) > 0).astype(np.int64)


def _cylinder(n: int, rng, radius: float = 0.5, half_h: float = 1.0):
    side_area = 2 * np.pi * radius * 2 * half_h
    cap_area = np.pi * radius ** 2
    probs = np.array([side_area, cap_area, cap_area])
    probs /= probs.sum()
    part = rng.choice(3, size=n, p=probs)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    r_cap = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
    z = np.where(part == 0, rng.uniform(-half_h, half_h, size=n),
                 np.where(part == 1, -half_h, half_h))
    r = np.where(part == 0, radius, r_cap)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts, part.astype(np.int64)


def _plane_pair(n: int, rng, gap: float = 0.5):
    side = rng.integers(0, 2, size=n)
    pts = np.stack([rng.uniform(-1.0, 1.0, size=n),
                    rng.uniform(-1.0, 1.0, size=n),
                    np.where(side == 1, gap, -gap)], axis=1)
    return pts, side.astype(np.int64)


_GENERATORS = {
    "sphere": _sphere,
    "cube": _cube,
    "torus": _torus,
    "cylinder": _cylinder,
    "plane-pair": _plane_pair,
}


def gen_shape(spec: ShapeSpec) -> PointCloud:
    """Sample a unit-scale shape surface (centered, max extent 1).

    Per-point labels are analytic region ids (hemisphere, cube face, ...);
    `class_id` is the shape's index in CLASS_KINDS.
    """
    rng = np.random.default_rng(spec.seed)
    pts, regions = _GENERATORS[spec.kind](spec.n_points, rng)
    if spec.jitter_sigma > 0:
        pts = pts + rng.normal(0.0, spec.jitter_sigma, size=pts.shape)
    return PointCloud(coords=pts, labels=regions,
                      class_id=CLASS_KINDS.index(spec.kind))


def augment(pc: PointCloud, rng: np.random.Generator) -> PointCloud:
    """Training augmentation: per-axis scale in [0.8, 1.25], translation in
    [-0.1, 0.1]^3, then random dropout of up to 20% of the points, the
    dropped rows replaced by duplicates of the first point so N stays
    fixed.

    Draw order: scale (3), translation (3), dropout ratio (1), dropout
    row choice.
    """
    scale = rng.uniform(0.8, 1.25, size=3)
    shift = rng.uniform(-0.1, 0.1, size=3)
    ratio = rng.uniform(0.0, 0.2)
    coords = pc.coords * scale + shift
    feats = None if pc.feats is None else pc.feats.copy()
    labels = None if pc.labels is None else pc.labels.copy()
    n_drop = int(np.floor(ratio * pc.n))
    if n_drop > 0:
        drop = rng.choice(pc.n, size=n_drop, replace=False)
        coords[drop] = coords[0]
        if feats is not None:
            feats[drop] = feats[0]
        if labels is not None:
            labels[drop] = labels[0]
    return PointCloud(coords=coords, feats=feats, labels=labels, class_id=pc.class_id)


def inject_noise(pc: PointCloud, spec: CorruptionSpec, rng: np.random.Generator,
                 feature_mode: str = "coords") -> PointCloud:
    """Replace round(ratio * N) randomly picked points by i.i.d. uniform
    noise in [noise_low, noise_high]^3; all other rows stay untouched.

    Replaced rows' features are re-derived from the new coordinates
    (`feature_mode="coords"`, requires 3 channels) or zeroed ("zero").
    """
    n_rep = int(round(spec.replace_ratio * pc.n))
    coords = pc.coords.copy()
    feats = None if pc.feats is None else pc.feats.copy()
    if n_rep > 0:
        idx = rng.choice(pc.n, size=n_rep, replace=False)
        noise = rng.uniform(spec.noise_low, spec.noise_high, size=(n_rep, 3))
        coords[idx] = noise
        if feats is not None:
            if feature_mode == "coords" and feats.shape[1] == 3:
                feats[idx] = noise
            else:
                feats[idx] = 0.0
    labels = None if pc.labels is None else pc.labels.copy()
    return PointCloud(coords=coords, feats=feats, labels=labels, class_id=pc.class_id)


def sparsify(pc: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Uniform random subset of n points without replacement."""
    if not 1 <= n <= pc.n:
        raise ValueError(f"subset size must lie in [1, {pc.n}], got {n}")
    idx = rng.choice(pc.n, size=n, replace=False)
    return PointCloud(
        coords=pc.coords[idx],
        feats=None if pc.feats is None else pc.feats[idx],
        labels=None if pc.labels is None else pc.labels[idx],
        class_id=pc.class_id)


# ---------------------------------------------------------------------------
# file IO
# ---------------------------------------------------------------------------

def write_cloud(pc: PointCloud, path) -> None:
    """Plain-text format: header 'N D has_labels', then one line per point
    with 'x y z f1..fD [label]'. Round-trips losslessly (17 significant
    digits)."""
    d = 0 if pc.feats is None else pc.feats.shape[1]
    has_labels = 0 if pc.labels is None else 1
    with open(path, "w") as f:
        f.write(f"{pc.n} {d} {has_labels}\n")
        for i in range(pc.n):
            cells = [f"{v:.17g}" for v in pc.coords[i]]
            if pc.feats is not None:
                cells += [f"{v:.17g}" for v in pc.feats[i]]
            if pc.labels is not None:
                cells.append(str(int(pc.labels[i])))
            f.write(" ".join(cells) + "\n")


def read_cloud(path) -> PointCloud:
    """Parse the text format written by `write_cloud`; malformed content
    raises ParseError with the offending line number."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}: line 1: empty file, expected 'N D has_labels' header")
    head = lines[0].split()
    if len(head) != 3:
        raise ParseError(f"{path}: line 1: header must be 'N D has_labels'")
    try:
        n, d, has_labels = (int(x) for x in head)
    except ValueError:
        raise ParseError(f"{path}: line 1: non-integer header fields") from None
    if has_labels not in (0, 1):
        raise ParseError(f"{path}: line 1: has_labels must be 0 or 1")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise ParseError(f"{path}: header says {n} points but body has {len(body)} lines")
    want = 3 + d + has_labels
    coords = np.empty((n, 3))
    feats = np.empty((n, d)) if d else None
    labels = np.empty(n, dtype=np.int64) if has_labels else None
    for i, ln in enumerate(body):
        cells = ln.split()
        if len(cells) != want:
            raise ParseError(f"{path}: line {i + 2}: expected {want} fields, got {len(cells)}")
        try:
            vals = [float(x) for x in cells[:3 + d]]
        except ValueError:
            raise ParseError(f"{path}: line {i + 2}: non-numeric field") from None
        coords[i] = vals[:3]
        if d:
            feats[i] = vals[3:3 + d]
        if has_labels:
            try:
                labels[i] = int(cells[-1])
            except ValueError:
                raise ParseError(f"{path}: line {i + 2}: non-integer label") from None
    return PointCloud(coords=coords, feats=feats, labels=labels)


def write_manifest(entries: list[tuple[str, str]], path) -> None:
    """One '<path> <tag>' line per sample; tags are train or test."""
    with open(path, "w") as f:
        for sample_path, tag in entries:
            if tag not in ("train", "test"):
                raise ValueError(f"manifest tag must be train|test, got '{tag}'")
            f.write(f"{sample_path} {tag}\n")


def read_manifest(path) -> list[tuple[str, str]]:
    entries = []
    with open(path) as f:
        for i, ln in enumerate(f, start=1):
            if not ln.strip():
                continue
            parts = ln.split()
            if len(parts) != 2 or parts[1] not in ("train", "test"):
                raise ParseError(f"{path}: line {i}: expected '<path> train|test'")
            entries.append((parts[0], parts[1]))
    return entries


def load_manifest_clouds(path) -> tuple[list[PointCloud], list[PointCloud]]:
    """Read every cloud named by a manifest, split into (train, test).

    Classification class ids are recovered from constant per-point labels.
    """
    base = Path(path).parent
    train, test = [], []
    for sample_path, tag in read_manifest(path):
        p = Path(sample_path)
        pc = read_cloud(p if p.is_absolute() else base / p)
        if pc.labels is not None and np.all(pc.labels == pc.labels[0]):
            pc.class_id = int(pc.labels[0])
        (train if tag == "train" else test).append(pc)
    return train, test


def make_classification_set(n_clouds: int, n_points: int, jitter: float,
                            seed: int) -> list[PointCloud]:
    """Balanced round-robin mix of the five toy classes."""
    clouds = []
    for i in range(n_clouds):
        kind = CLASS_KINDS[i % len(CLASS_KINDS)]
        clouds.append(gen_shape(ShapeSpec(kind, n_points, jitter, seed=seed * 100003 + i)))
    return clouds


def make_segmentation_set(n_clouds: int, n_points: int, jitter: float, seed: int,
                          kind: str = "sphere") -> list[PointCloud]:
    """Single-shape clouds whose per-point region labels are the target."""
    return [gen_shape(ShapeSpec(kind, n_points, jitter, seed=seed * 100003 + i))
            for i in range(n_clouds)]
