"""Synthetic blastocyst-like segmentation data.

Each image is a randomised nested-ellipse figure: outer ring (ZP), inner
ring (TE), cavity (BL) and an off-centre blob (ICM) on background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("BG", "ZP", "TE", "BL", "ICM")
BG, ZP, TE, BL, ICM = range(5)
# grey level of each class before texture noise
BASE_INTENSITY = np.array([0.10, 0.75, 0.50, 0.25, 0.90])
TEXTURE_SIGMA = 0.05
MIN_SIZE = 16
MAX_ROTATION_DEG = 35.0

TRAIN_STREAM, TEST_STREAM = 0, 1


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float64 in [0, 1]
    mask: np.ndarray   # (H, W) int64 labels


@dataclass
class ClientData:
    train: list
    val: list

    @property
    def count(self) -> int:
        return len(self.train) + len(self.val)


def _ellipse(yy, xx, cy, cx, ry, rx, theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _render_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = (size - 1) / 2.0
    cy, cx = centre + rng.uniform(-0.06, 0.06, 2) * size
    ry, rx = rng.uniform(0.30, 0.42, 2) * size
    theta = rng.uniform(0, np.pi)
    zp_w = rng.uniform(0.14, 0.20)
    te_w = rng.uniform(0.12, 0.18)
    mask = np.zeros((size, size), dtype=np.int64)
    mask[_ellipse(yy, xx, cy, cx, ry, rx, theta)] = ZP
    inner = 1.0 - zp_w
    mask[_ellipse(yy, xx, cy, cx, ry * inner, rx * inner, theta)] = TE
    cavity = inner - te_w
    mask[_ellipse(yy, xx, cy, cx, ry * cavity, rx * cavity, theta)] = BL
    # ICM: blob hugging the cavity wall at a random bearing
    bearing = rng.uniform(0, 2 * np.pi)
    offset = rng.uniform(0.35, 0.55) * cavity
    by = cy + np.sin(bearing) * ry * offset
    bx = cx + np.cos(bearing) * rx * offset
    br = rng.uniform(0.30, 0.42) * cavity * min(ry, rx)
    blob = _ellipse(yy, xx, by, bx, br, br * rng.uniform(0.8, 1.25), rng.uniform(0, np.pi))
    mask[blob & (mask == BL)] = ICM
    return mask


def render_image(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    img = BASE_INTENSITY[mask] + TEXTURE_SIGMA * rng.standard_normal(mask.shape)
    return np.clip(img, 0.0, 1.0)[None, :, :]


def generate_dataset(seed: int, n_samples: int, size: int, stream: int = TRAIN_STREAM) -> list[Sample]:
    """Deterministic corpus; ``stream`` separates disjoint corpora (train pool vs test set)."""
    if size < MIN_SIZE:
        raise ValueError(f"image size {size} too small to hold five regions (need >= {MIN_SIZE})")
    rng = np.random.default_rng([seed, 0xDA7A, stream])
    out = []
    for _ in range(n_samples):
        mask = _render_mask(rng, size)
        out.append(Sample(render_image(mask, rng), mask))
    return out


def train_count(m: int) -> int:
    """round-half-up(0.85 m), leaving at least one validation sample."""
    return min((85 * m + 50) // 100, m - 1)


def partition(samples: list[Sample], counts, seed: int) -> list[ClientData]:
    """Seeded shuffle, then contiguous blocks of ``counts``; each block split 85/15."""
    counts = [int(c) for c in counts]
    if any(c < 2 for c in counts):
        raise ValueError(f"every client needs >= 2 samples for a train/val split, got {counts}")
    if sum(counts) > len(samples):
        raise ValueError(f"need {sum(counts)} samples for counts {counts}, only {len(samples)} available")
    order = np.random.default_rng([seed, 0x9A27]).permutation(len(samples))
    clients, start = [], 0
    for c in counts:
        block = [samples[i] for i in order[start:start + c]]
        start += c
        k = train_count(c)
        clients.append(ClientData(train=block[:k], val=block[k:]))
    return clients


def rotate_nearest(arr: np.ndarray, angle_deg: float, fill) -> np.ndarray:
    """Rotate a 2-D grid about its centre with nearest-neighbour sampling."""
    h, w = arr.shape
    t = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source pixel
    sy = np.cos(t) * (yy - cy) - np.sin(t) * (xx - cx) + cy
    sx = np.sin(t) * (yy - cy) + np.cos(t) * (xx - cx) + cx
    iy, ix = np.rint(sy).astype(np.int64), np.rint(sx).astype(np.int64)
    inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.full_like(arr, fill)
    out[inside] = arr[iy[inside], ix[inside]]
    return out


def apply_transform(sample: Sample, hflip: bool, vflip: bool, angle_deg: float) -> Sample:
    img, mask = sample.image[0], sample.mask
    if hflip:
        img, mask = img[:, ::-1], mask[:, ::-1]
    if vflip:
        img, mask = img[::-1, :], mask[::-1, :]
    if angle_deg != 0.0:
        img = rotate_nearest(img, angle_deg, BASE_INTENSITY[BG])
        mask = rotate_nearest(mask, angle_deg, BG)
    return Sample(np.ascontiguousarray(img)[None, :, :], np.ascontiguousarray(mask))


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    return apply_transform(sample, hflip, vflip, angle)


def stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def background_fraction(masks: np.ndarray) -> float:
    return float((masks == BG).mean())
