"""Deterministic synthetic face-like images with analytic ground-truth
landmarks, horizontal-flip augmentation, and dataset persistence.

All randomness comes from the counter-based Philox (4x64) generator keyed
by the sample seed, so regeneration from (seed, config) is bit-identical
across runs and platforms.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import container


@dataclass
class FaceLayoutConfig:
    image_size: int = 96
    num_landmarks: int = 10
    max_rotation_deg: float = 20.0
    scale_range: tuple = (0.9, 1.1)
    max_translation_frac: float = 0.05
    margin: float = 2.0

    def __post_init__(self):
        if self.num_landmarks < 5:
            raise ValueError(f"need at least 5 landmarks, got {self.num_landmarks}")

    def to_dict(self):
        return {
            "image_size": self.image_size,
            "num_landmarks": self.num_landmarks,
            "max_rotation_deg": self.max_rotation_deg,
            "scale_range": list(self.scale_range),
            "max_translation_frac": self.max_translation_frac,
            "margin": self.margin,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scale_range"] = tuple(d.get("scale_range", (0.9, 1.1)))
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray      # 3 x H x W, values in [0, 1]
    landmarks: np.ndarray  # N x 2 pixel (x, y)
    tags: list
    seed: int


def canonical_layout(config):
    """Landmark offsets from the face center, mirror-symmetric in x.

    Order: left eye, right eye, nose, left mouth corner, right mouth
    corner, then jaw contour points on the lower face ellipse.
    """
    s = config.image_size
    a, b = 0.30 * s, 0.36 * s  # ellipse semi-axes
    pts = [(-0.45 * a, -0.35 * b), (0.45 * a, -0.35 * b),
           (0.0, 0.05 * b), (-0.40 * a, 0.45 * b), (0.40 * a, 0.45 * b)]
    k = config.num_landmarks - 5
    for j in range(k):
        phi = np.pi * (j + 1) / (k + 1)
        pts.append((a * np.cos(phi), b * np.sin(phi)))
    return np.asarray(pts, dtype=np.float64), (a, b)


def swap_map(config):
    """Involutive left/right landmark index pairing for horizontal flips."""
    k = config.num_landmarks - 5
    mapping = [1, 0, 2, 4, 3] + [5 + (k - 1 - j) for j in range(k)]
    return np.asarray(mapping, dtype=np.int64)


def _render(config, center, rot, scl, a, b, rng):
    """Draw the face as smooth intensity blobs; fully vectorized."""
    s = config.image_size
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    cos_r, sin_r = np.cos(rot), np.sin(rot)
    # map pixels back into the canonical (unrotated, unscaled) face frame
    dx, dy = xs - center[0], ys - center[1]
    u = (cos_r * dx + sin_r * dy) / scl
    v = (-sin_r * dx + cos_r * dy) / scl

    face = np.exp(-((u / a) ** 2 + (v / b) ** 2) ** 4)
    edge_r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    outline = np.exp(-((edge_r - 1.0) * 6.0) ** 2)

    canonical, _ = canonical_layout(config)
    blobs = np.zeros((s, s))
    for i in (0, 1, 2):
        sigma = 2.5 if i < 2 else 1.8
        blobs += np.exp(-((u - canonical[i, 0]) ** 2 + (v - canonical[i, 1]) ** 2) / (2 * sigma ** 2))
    # mouth: capsule between the two mouth corners
    p0, p1 = canonical[3], canonical[4]
    seg = p1 - p0
    tt = np.clip(((u - p0[0]) * seg[0] + (v - p0[1]) * seg[1]) / (seg @ seg), 0.0, 1.0)
    dist2 = (u - (p0[0] + tt * seg[0])) ** 2 + (v - (p0[1] + tt * seg[1])) ** 2
    mouth = np.exp(-dist2 / (2 * 1.5 ** 2))

    base = rng.uniform(0.05, 0.25, size=3)
    tint = rng.uniform(0.4, 0.9, size=3)
    image = np.empty((3, s, s))
    for ch in range(3):
        image[ch] = base[ch] + tint[ch] * (0.6 * face + 0.5 * outline) + 0.8 * blobs + 0.7 * mouth
    return np.clip(image, 0.0, 1.0)


def generate_sample(seed, config):
    """Render one face with a random affine perturbation; landmarks are the
    analytic positions of the rendered features. Deterministic in seed."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    canonical, (a, b) = canonical_layout(config)
    s = config.image_size
    lo, hi = config.margin, s - 1 - config.margin

    for attempt in range(10):
        rot = np.deg2rad(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
        scl = rng.uniform(*config.scale_range)
        shift = rng.uniform(-config.max_translation_frac, config.max_translation_frac, size=2) * s
        center = np.array([(s - 1) / 2.0, (s - 1) / 2.0]) + shift
        cos_r, sin_r = np.cos(rot), np.sin(rot)
        rot_mat = np.array([[cos_r, -sin_r], [sin_r, cos_r]])
        landmarks = center + scl * (canonical @ rot_mat.T)
        # snap to a 2^-20 px grid: on this grid (width-1) - x is exact in
        # float64, making horizontal flips bit-exact involutions
        landmarks = np.round(landmarks * 2.0 ** 20) / 2.0 ** 20
        if (landmarks >= lo).all() and (landmarks <= hi).all():
            image = _render(config, center, rot, scl, a, b, rng)
            return Sample(image=image, landmarks=landmarks, tags=[], seed=int(seed))
    raise ValueError(f"could not place landmarks inside bounds after 10 tries (seed {seed})")


def horizontal_flip(sample, mapping):
    """Mirror the image about the vertical axis and re-index landmarks."""
    n = sample.landmarks.shape[0]
    perm = np.asarray(mapping, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(perm[perm], np.arange(n)):
        raise ValueError("flip mapping must be an involutive permutation over all landmarks")
    width = sample.image.shape[2]
    flipped = sample.landmarks.copy()
    flipped[:, 0] = (width - 1) - flipped[:, 0]
    return Sample(image=np.ascontiguousarray(sample.image[:, :, ::-1]),
                  landmarks=flipped[perm], tags=list(sample.tags), seed=sample.seed)


def generate_dataset(count, base_seed, config, threads=1):
    """Samples for seeds [base_seed, base_seed + count). Generation is
    independent per seed, so ``threads`` > 1 just fans it out; the result
    order (and content) is identical either way."""
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda i: generate_sample(base_seed + i, config), range(count)))
    return [generate_sample(base_seed + i, config) for i in range(count)]


def write_dataset(path, samples, config):
    """Dataset directory: images.lotr container, samples.jsonl sidecar,
    config.json with the generator parameters."""
    os.makedirs(path, exist_ok=True)
    container.write_tensors(os.path.join(path, "images.lotr"),
                            {f"image_{i:06d}": s.image for i, s in enumerate(samples)})
    with open(os.path.join(path, "samples.jsonl"), "w") as fh:
        for i, s in enumerate(samples):
            fh.write(json.dumps({"index": i, "landmarks": s.landmarks.tolist(),
                                 "tags": s.tags, "seed": s.seed}) + "\n")
    with open(os.path.join(path, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)


def read_dataset(path):
    """Load a dataset directory; returns (samples, FaceLayoutConfig)."""
    images = container.read_tensors(os.path.join(path, "images.lotr"))
    with open(os.path.join(path, "samples.jsonl")) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if len(records) != len(images):
        raise container.ContainerError(
            f"dataset count mismatch: {len(images)} images vs {len(records)} sidecar records")
    with open(os.path.join(path, "config.json")) as fh:
        cfg_dict = json.load(fh)
    # the CLI records its full invocation in config.json with the generator
    # parameters under a "layout" key
    config = FaceLayoutConfig.from_dict(cfg_dict.get("layout", cfg_dict))
    samples = []
    for rec in records:
        image = images[f"image_{rec['index']:06d}"]
        samples.append(Sample(image=image,
                              landmarks=np.asarray(rec["landmarks"], dtype=np.float64),
                              tags=list(rec["tags"]), seed=int(rec["seed"])))
    return samples, config
