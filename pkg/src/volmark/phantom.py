"""Synthetic volumes with planted five-landmark constellations.

Each volume is a speckled background (directional intensity ramps times
per-voxel multiplicative noise) with one bright Gaussian blob per landmark.
The constellation is jittered, scaled, optionally mirrored (relabeling the
eyes), rotated, and placed so every ground-truth box fits inside the
volume. Generation is a pure function of (template, dims, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assignment import GroundTruth
from .landmarks import LANDMARK_NAMES, LEFT_EYE, NUM_LANDMARKS, RIGHT_EYE, derive_seed

BOX_MARGIN = 12.0  # half-extent of the largest GT box


def _default_points() -> np.ndarray:
    # x lateral (mirror axis), y vertical, z depth; symmetric about x = 0
    return np.array(
        [
            [-9.0, -4.0, 0.0],  # left eye
            [0.0, -10.0, 1.5],  # mid eyebrow
            [9.0, -4.0, 0.0],  # right eye
            [0.0, 2.5, 4.5],  # nose
            [0.0, 14.0, 1.0],  # chin
        ]
    )


@dataclass
class ConstellationTemplate:
    """Canonical landmark layout and augmentation ranges.

    points: (5, 3) voxel offsets from the face center with the eyes
    mirrored about the x = 0 plane. jitter: per-point displacement std in
    voxels. Blob sigmas/amplitudes control rendering (eyes are the small
    sharp blobs).
    """

    points: np.ndarray = field(default_factory=_default_points)
    jitter: np.ndarray = field(default_factory=lambda: np.array([1.2, 1.2, 1.2, 1.2, 1.5]))
    scale_range: tuple[float, float] = (0.9, 1.15)
    rotation_max_deg: float = 25.0
    mirror_prob: float = 0.5
    blob_sigma: np.ndarray = field(default_factory=lambda: np.array([2.0, 3.5, 2.0, 3.5, 3.5]))
    blob_amplitude: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.6, 1.0, 0.8, 0.68]))
    background_level: float = 0.22
    noise_sigma: float = 0.30
    ramp_gain: float = 0.1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.jitter = np.asarray(self.jitter, dtype=np.float64)
        self.blob_sigma = np.asarray(self.blob_sigma, dtype=np.float64)
        self.blob_amplitude = np.asarray(self.blob_amplitude, dtype=np.float64)
        if self.points.shape != (NUM_LANDMARKS, 3):
            raise ValueError(f"template needs ({NUM_LANDMARKS}, 3) points")
        diffs = self.points[:, None, :] - self.points[None, :, :]
        dist = np.linalg.norm(diffs, axis=-1)
        if np.any(dist[~np.eye(NUM_LANDMARKS, dtype=bool)] <= 0):
            raise ValueError("template points must be pairwise distinct")


@dataclass
class PhantomVolume:
    """A rendered volume with its ground truth."""

    voxels: np.ndarray  # (nx, ny, nz) float32 in [0, 1]
    gt: GroundTruth
    seed: int
    spacing_mm: float = 1.3
    name: str = ""

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


def rotation_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    """Rotation composed from per-axis rotations (x, then y, then z)."""
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def generate(
    template: ConstellationTemplate,
    dims: tuple[int, int, int] = (96, 96, 96),
    seed: int = 0,
    spacing_mm: float = 1.3,
) -> PhantomVolume:
    """Render one phantom; identical (template, dims, seed) is bit-identical."""
    dims = tuple(int(v) for v in dims)
    rng = np.random.default_rng(seed)

    pts = template.points + rng.standard_normal((NUM_LANDMARKS, 3)) * template.jitter[:, None]
    pts = pts * rng.uniform(*template.scale_range)

    mirrored = bool(rng.random() < template.mirror_prob)
    if mirrored:
        pts[:, 0] = -pts[:, 0]
        # a reflected left eye is anatomically a right eye
        pts[[LEFT_EYE, RIGHT_EYE]] = pts[[RIGHT_EYE, LEFT_EYE]]

    max_rad = math.radians(template.rotation_max_deg)
    angles = rng.uniform(-max_rad, max_rad, size=3)
    pts = pts @ rotation_matrix(*angles).T

    lo = BOX_MARGIN - pts.min(axis=0)
    hi = np.array(dims, dtype=np.float64) - BOX_MARGIN - pts.max(axis=0)
    if np.any(hi < lo):
        raise ValueError(f"dims {dims} cannot contain the constellation with margin {BOX_MARGIN}")
    center = np.array([rng.uniform(lo[a], hi[a]) for a in range(3)])
    landmarks = pts + center

    voxels = _render(landmarks, dims, template, rng)
    return PhantomVolume(
        voxels=voxels,
        gt=GroundTruth.from_landmarks(landmarks),
        seed=seed,
        spacing_mm=spacing_mm,
    )


def _render(landmarks, dims, template, rng) -> np.ndarray:
    nx, ny, nz = dims
    # directional ramps stand in for beam attenuation across the volume
    axes = [
        (np.arange(n, dtype=np.float64) + 0.5) / n - 0.5 for n in dims
    ]
    base = np.full(dims, template.background_level)
    for _ in range(2):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        gain = rng.uniform(0.03, template.ramp_gain)
        proj = (
            axes[0][:, None, None] * direction[0]
            + axes[1][None, :, None] * direction[1]
            + axes[2][None, None, :] * direction[2]
        )
        base = base * (1.0 + gain * proj * 2.0)
    noise = np.maximum(1.0 + template.noise_sigma * rng.standard_normal(dims), 0.05)
    vol = base * noise

    xs = np.arange(nx, dtype=np.float64) + 0.5
    ys = np.arange(ny, dtype=np.float64) + 0.5
    zs = np.arange(nz, dtype=np.float64) + 0.5
    for i in range(NUM_LANDMARKS):
        sigma = float(template.blob_sigma[i])
        amp = float(template.blob_amplitude[i])
        p = landmarks[i]
        reach = int(math.ceil(4.0 * sigma))
        sl = []
        for a, n in enumerate(dims):
            lo = max(int(math.floor(p[a] - reach)), 0)
            hi = min(int(math.ceil(p[a] + reach)) + 1, n)
            sl.append((lo, hi))
        dx = xs[sl[0][0] : sl[0][1]] - p[0]
        dy = ys[sl[1][0] : sl[1][1]] - p[1]
        dz = zs[sl[2][0] : sl[2][1]] - p[2]
        r2 = (
            dx[:, None, None] ** 2
            + dy[None, :, None] ** 2
            + dz[None, None, :] ** 2
        )
        vol[sl[0][0] : sl[0][1], sl[1][0] : sl[1][1], sl[2][0] : sl[2][1]] += amp * np.exp(
            -r2 / (2.0 * sigma * sigma)
        )
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def dataset(
    n: int = 152,
    split: tuple[int, int] | None = None,
    seed: int = 0,
    template: ConstellationTemplate | None = None,
    dims: tuple[int, int, int] = (96, 96, 96),
    spacing_mm: float = 1.3,
) -> tuple[list[PhantomVolume], list[PhantomVolume]]:
    """Generate n phantoms and split them into disjoint train/test lists.

    The default split holds out 32 of 152 (scaled proportionally for other
    n). Volume seeds and split membership derive from the master seed, so
    the same seed reproduces the same datasets exactly.
    """
    if template is None:
        template = ConstellationTemplate()
    if n < 2:
        raise ValueError("need at least 2 volumes to split")
    if split is None:
        n_test = min(max(int(round(n * 32 / 152)), 1), n - 1)
        split = (n - n_test, n_test)
    if split[0] + split[1] != n or split[0] < 1 or split[1] < 1:
        raise ValueError(f"split {split} incompatible with n={n}")
    volumes = []
    for i in range(n):
        vol = generate(template, dims, derive_seed(seed, f"volume-{i}"), spacing_mm)
        vol.name = f"vol_{i:04d}"
        volumes.append(vol)
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(n)
    test_idx = sorted(int(i) for i in order[: split[1]])
    test_set = set(test_idx)
    train = [volumes[i] for i in range(n) if i not in test_set]
    test = [volumes[i] for i in test_idx]
    return train, test


def save_volume(vol: PhantomVolume, directory, name: str | None = None) -> None:
    """Write <name>.json (header) and <name>.raw (little-endian f32,
    x-fastest order)."""
    directory = Path(directory)
    name = name or vol.name or "volume"
    header = {
        "dims": list(vol.dims),
        "spacing_mm": [vol.spacing_mm] * 3,
        "dtype": "f32",
        "order": "x-fastest",
        "landmarks": {
            LANDMARK_NAMES[i]: [float(v) for v in vol.gt.landmarks[i]]
            for i in range(NUM_LANDMARKS)
        },
        "boxes": {
            LANDMARK_NAMES[i]: [float(v) for v in vol.gt.boxes[i]]
            for i in range(NUM_LANDMARKS)
        },
        "seed": vol.seed,
    }
    (directory / f"{name}.json").write_text(json.dumps(header, indent=2) + "\n")
    vol.voxels.astype("<f4").ravel(order="F").tofile(directory / f"{name}.raw")


def load_volume(directory, name: str) -> PhantomVolume:
    directory = Path(directory)
    header = json.loads((directory / f"{name}.json").read_text())
    dims = tuple(header["dims"])
    raw = np.fromfile(directory / f"{name}.raw", dtype="<f4")
    if raw.size != dims[0] * dims[1] * dims[2]:
        raise ValueError(f"{name}.raw holds {raw.size} voxels, header says {dims}")
    voxels = raw.reshape(dims, order="F")
    landmarks = np.array([header["landmarks"][k] for k in LANDMARK_NAMES])
    boxes = np.array([header["boxes"][k] for k in LANDMARK_NAMES])
    return PhantomVolume(
        voxels=voxels,
        gt=GroundTruth(landmarks, boxes),
        seed=int(header.get("seed", -1)),
        spacing_mm=float(header["spacing_mm"][0]),
        name=name,
    )
