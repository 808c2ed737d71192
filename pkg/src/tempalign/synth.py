"""Synthetic clips with exact ground truth.

Each clip shows one stick figure on a smooth textured background. The
supporting frame at offset ``d`` is the key scene seen through the camera
affine ``A**d`` (``A`` being the per-frame-gap motion), with independent
Gaussian jitter added to every joint. Only the key frame is degraded, by a
horizontal box blur and an optional occluding rectangle filled with
background texture.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d

from .heatmaps import PoseAnnotation

__all__ = [
    "SynthConfig", "MotionSpec", "Clip", "sample_motion", "gen_clip", "degrade",
    "gen_dataset", "Dataset", "pixel_affine_to_theta", "export_dataset", "write_ppm",
    "read_ppm", "SKELETON",
]

# (parent, child) limbs of the five-joint figure: 0 head, 1 torso, 2/3 hands, 4 foot
SKELETON = ((1, 0), (1, 2), (1, 3), (1, 4))

JOINT_COLORS = np.array([
    [1.0, 0.15, 0.15],
    [0.95, 0.95, 0.2],
    [0.15, 0.9, 0.2],
    [0.2, 0.35, 1.0],
    [0.95, 0.3, 0.95],
    [0.2, 0.95, 0.95],
    [1.0, 0.6, 0.1],
    [0.6, 0.3, 0.1],
])
LIMB_COLOR = np.array([0.85, 0.85, 0.85])


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 48
    n_joints: int = 5
    window: tuple = (-2, -1, 1, 2)
    max_translation: float = 8.0
    max_rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    jitter_std: float = 1.0
    blur_choices: tuple = (21, 25, 29)
    occluder_prob: float = 0.5
    occluder_size: tuple = (10, 18)
    limb_length: tuple = (11.0, 17.0)
    joint_radius: float = 2.5
    limb_radius: float = 1.2
    texture_amplitude: float = 0.12

    def validate(self):
        if self.height % 4 or self.width % 4:
            raise ValueError("image extents must be divisible by 4")
        if self.n_joints < 2:
            raise ValueError("need at least two joints")
        if self.n_joints > len(JOINT_COLORS):
            raise ValueError(f"at most {len(JOINT_COLORS)} joints supported")
        if any(b < 1 or b % 2 == 0 for b in self.blur_choices):
            raise ValueError("blur widths must be odd and >= 1")
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_json(cls, d: dict) -> SynthConfig:
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known}
        return cls(**kw)


@dataclass
class MotionSpec:
    """Ground-truth motion and key-frame degradation of one clip.

    ``global_affine`` maps each offset to a ``[2,3]`` pixel-coordinate
    affine taking key-frame positions to that supporting frame.
    ``occluder`` is ``(x0, y0, w, h)`` in pixels or None.
    """

    global_affine: dict
    jitter_std: float = 0.0
    blur_kernel: int = 1
    occluder: tuple | None = None

    def validate(self, height: int, width: int):
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError(f"blur_kernel must be odd and >= 1, got {self.blur_kernel}")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be non-negative")
        if self.occluder is not None:
            x0, y0, w, h = self.occluder
            if x0 < 0 or y0 < 0 or w <= 0 or h <= 0 or x0 + w > width or y0 + h > height:
                raise ValueError(f"occluder {self.occluder} not inside the {height}x{width} frame")
        for d, a in self.global_affine.items():
            a = np.asarray(a)
            if a.shape != (2, 3) or not np.all(np.isfinite(a)):
                raise ValueError(f"affine for delta={d} must be a finite 2x3 matrix")
        return self

    def to_json(self) -> dict:
        return {
            "global_affine": {str(d): np.asarray(a).tolist() for d, a in self.global_affine.items()},
            "jitter_std": self.jitter_std,
            "blur_kernel": self.blur_kernel,
            "occluder": list(self.occluder) if self.occluder is not None else None,
        }


@dataclass
class Clip:
    key: np.ndarray                      # [3,H,W]
    supports: dict                       # delta -> [3,H,W]
    key_ann: PoseAnnotation
    support_anns: dict                   # delta -> PoseAnnotation
    spec: MotionSpec
    seed: int
    background: np.ndarray = field(repr=False, default=None)


def _homog(a) -> np.ndarray:
    m = np.eye(3)
    m[:2] = a
    return m


def _affine_power(a: np.ndarray, k: int) -> np.ndarray:
    return np.linalg.matrix_power(_homog(a), k)[:2] if k >= 0 else \
        np.linalg.matrix_power(np.linalg.inv(_homog(a)), -k)[:2]


def pixel_affine_to_theta(a, height: int, width: int) -> np.ndarray:
    """Sampling parameters that undo a pixel-space motion.

    If the supporting frame shows key-frame point ``p`` at ``a @ (p, 1)``,
    warping the supporting frame (or any feature map on the same normalized
    lattice) with the returned theta lines it up with the key frame.
    """
    n = np.array([[2.0 / width, 0.0, 1.0 / width - 1.0],
                  [0.0, 2.0 / height, 1.0 / height - 1.0],
                  [0.0, 0.0, 1.0]])
    return (n @ _homog(a) @ np.linalg.inv(n))[:2]


def sample_motion(config: SynthConfig, rng: np.random.Generator) -> MotionSpec:
    cx, cy = (config.width - 1) / 2, (config.height - 1) / 2
    r = config.max_translation * np.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * np.pi)
    tx, ty = r * np.cos(phi), r * np.sin(phi)
    ang = np.deg2rad(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg))
    s = rng.uniform(*config.scale_range)
    rot = s * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    c = np.array([cx, cy])
    step = np.concatenate([rot, (c - rot @ c + [tx, ty])[:, None]], axis=1)
    affines = {d: _affine_power(step, d) for d in config.window}
    blur = int(rng.choice(config.blur_choices))
    occ = None
    if rng.uniform() < config.occluder_prob:
        lo, hi = config.occluder_size
        w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        w, h = min(w, config.width), min(h, config.height)
        occ = (int(rng.integers(0, config.width - w + 1)), int(rng.integers(0, config.height - h + 1)), w, h)
    return MotionSpec(affines, config.jitter_std, blur, occ)


def _sample_pose(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Joint positions of a random stick figure, kept clear of the borders."""
    j = config.n_joints
    lo, hi = config.limb_length
    margin = config.joint_radius + 3
    for _ in range(1000):
        root = np.array([config.width / 2, config.height / 2]) + rng.uniform(-5, 5, 2)
        pts = np.zeros((j, 2))
        pts[1 % j] = root
        base = {0: -np.pi / 2, 2: np.pi * 0.85, 3: np.pi * 0.15, 4: np.pi / 2}
        for k in range(j):
            if k == 1:
                continue
            mean_ang = base.get(k, rng.uniform(0, 2 * np.pi))
            ang = mean_ang + rng.uniform(-0.6, 0.6)
            length = rng.uniform(lo, hi) * (1.2 if k == 4 else 1.0)
            pts[k] = root + length * np.array([np.cos(ang), np.sin(ang)])
        inside = ((pts[:, 0] >= margin) & (pts[:, 0] <= config.width - 1 - margin)
                  & (pts[:, 1] >= margin) & (pts[:, 1] <= config.height - 1 - margin))
        if inside.all():
            return pts
    raise RuntimeError("could not place a figure inside the frame")


def _limbs(n_joints: int):
    limbs = [e for e in SKELETON if e[0] < n_joints and e[1] < n_joints]
    for k in range(5, n_joints):
        limbs.append((1, k))
    if n_joints == 2:
        limbs = [(1, 0)]
    return limbs


class _Texture:
    """Smooth random RGB field defined on continuous world coordinates."""

    def __init__(self, rng, amplitude):
        self.freq = rng.uniform(0.08, 0.35, size=(3, 4, 2)) * rng.choice([-1, 1], size=(3, 4, 2))
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, 4))
        self.base = rng.uniform(0.25, 0.45, size=3)
        self.amp = amplitude

    def __call__(self, x, y):
        out = np.empty((3,) + x.shape)
        for c in range(3):
            acc = np.zeros_like(x)
            for k in range(4):
                acc += np.sin(self.freq[c, k, 0] * x + self.freq[c, k, 1] * y + self.phase[c, k])
            out[c] = self.base[c] + self.amp * acc / 2
        return out


def _render(config: SynthConfig, joints: np.ndarray, texture: _Texture, affine=None,
            radius_scale: float = 1.0) -> np.ndarray:
    h, w = config.height, config.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if affine is None:
        wx, wy = xs, ys
    else:
        inv = np.linalg.inv(_homog(affine))
        wx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
        wy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    img = texture(wx, wy)
    for a, b in _limbs(len(joints)):
        _capsule(img, xs, ys, joints[a], joints[b], config.limb_radius * radius_scale, LIMB_COLOR)
    for k, p in enumerate(joints):
        _capsule(img, xs, ys, p, p, config.joint_radius * radius_scale, JOINT_COLORS[k])
    return np.clip(img, 0.0, 1.0)


def _capsule(img, xs, ys, p, q, radius, color):
    """Alpha-blend an anti-aliased capsule (coverage from a 1-px ramp)."""
    d = q - p
    ll = float(d @ d)
    if ll > 0:
        t = np.clip(((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / ll, 0.0, 1.0)
    else:
        t = 0.0
    dist = np.hypot(xs - (p[0] + t * d[0]), ys - (p[1] + t * d[1]))
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    img *= 1 - alpha
    img += alpha * color[:, None, None]


def degrade(image: np.ndarray, spec: MotionSpec, background: np.ndarray | None = None) -> np.ndarray:
    """Horizontal box blur of width ``spec.blur_kernel``, then the occluder.

    The occluder rectangle is filled from ``background`` (the frame's
    texture without the figure); with no background given it is filled with
    the image's mean color.
    """
    out = np.asarray(image, dtype=np.float64)
    if spec.blur_kernel > 1:
        out = uniform_filter1d(out, size=spec.blur_kernel, axis=-1, mode="nearest")
    else:
        out = out.copy()
    if spec.occluder is not None:
        x0, y0, w, h = spec.occluder
        if background is not None:
            out[:, y0:y0 + h, x0:x0 + w] = background[:, y0:y0 + h, x0:x0 + w]
        else:
            out[:, y0:y0 + h, x0:x0 + w] = out.mean(axis=(1, 2))[:, None, None]
    return out


def _in_frame(pts, h, w):
    return (pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1)


def _occluded(pts, occ):
    if occ is None:
        return np.zeros(len(pts), dtype=bool)
    x0, y0, w, h = occ
    return (pts[:, 0] >= x0) & (pts[:, 0] < x0 + w) & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + h)


def gen_clip(config: SynthConfig, seed: int, spec: MotionSpec | None = None) -> Clip:
    """Render one clip; identical ``(config, seed, spec)`` give identical clips."""
    config.validate()
    rng = np.random.default_rng([int(seed), 7])
    joints = _sample_pose(config, rng)
    texture = _Texture(rng, config.texture_amplitude)
    sampled = sample_motion(config, rng)
    spec = spec if spec is not None else sampled
    spec.validate(config.height, config.width)
    h, w = config.height, config.width
    supports, support_anns = {}, {}
    for d in sorted(spec.global_affine):
        a = np.asarray(spec.global_affine[d], dtype=np.float64)
        moved = joints @ a[:, :2].T + a[:, 2]
        if spec.jitter_std > 0:
            moved = moved + rng.normal(0.0, spec.jitter_std, moved.shape)
        rs = np.sqrt(abs(np.linalg.det(a[:, :2])))
        supports[d] = _render(config, moved, texture, a, rs).astype(np.float32)
        support_anns[d] = PoseAnnotation(moved, _in_frame(moved, h, w))
    clean = _render(config, joints, texture)
    background = texture(*np.mgrid[0:h, 0:w][::-1].astype(np.float64))
    key = degrade(clean, spec, np.clip(background, 0, 1)).astype(np.float32)
    visible = _in_frame(joints, h, w) & ~_occluded(joints, spec.occluder)
    return Clip(key, supports, PoseAnnotation(joints, visible), support_anns, spec, int(seed),
                background=np.clip(background, 0, 1).astype(np.float32))


@dataclass
class Dataset:
    clips: list
    train_idx: np.ndarray
    val_idx: np.ndarray
    config: SynthConfig

    def split(self, which: str) -> list:
        idx = self.train_idx if which == "train" else self.val_idx
        return [self.clips[i] for i in idx]


def gen_dataset(config: SynthConfig, n_clips: int, seed: int) -> Dataset:
    """``n_clips`` clips with seeds ``seed + i``; the last 20% form the validation split."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    clips = [gen_clip(config, seed + i) for i in range(n_clips)]
    n_val = int(round(0.2 * n_clips))
    n_train = n_clips - n_val
    return Dataset(clips, np.arange(n_train), np.arange(n_train, n_clips), config)


def batch_arrays(clips, window):
    """Stack clips into ``(key [B,3,H,W], {delta: [B,3,H,W]})``."""
    key = np.stack([c.key for c in clips])
    supports = {d: np.stack([c.supports[d] for c in clips]) for d in window}
    return key, supports


# -- export ------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 from a ``[3,H,W]`` float image in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        parts.append(data[start:pos])
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / maxval


def export_dataset(dataset: Dataset, out_dir) -> None:
    """One directory per clip: ``key.ppm``, ``supp_<d>.ppm`` and ``clip.json``."""
    os.makedirs(out_dir, exist_ok=True)
    for i, clip in enumerate(dataset.clips):
        cdir = os.path.join(out_dir, f"clip_{i:05d}")
        os.makedirs(cdir, exist_ok=True)
        write_ppm(os.path.join(cdir, "key.ppm"), clip.key)
        for d, img in clip.supports.items():
            write_ppm(os.path.join(cdir, f"supp_{d:+d}.ppm"), img)
        meta = {
            "seed": clip.seed,
            "split": "train" if i in set(dataset.train_idx.tolist()) else "val",
            "key": clip.key_ann.to_json(),
            "supports": {f"{d:+d}": a.to_json() for d, a in clip.support_anns.items()},
            "motion": clip.spec.to_json(),
        }
        with open(os.path.join(cdir, "clip.json"), "w") as fh:
            json.dump(meta, fh, indent=1)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(dataset.config.to_json(), fh, indent=2)


def identity_spec(window=(-2, -1, 1, 2)) -> MotionSpec:
    eye = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return MotionSpec({d: eye.copy() for d in window})


def translation_spec(tx: float, ty: float = 0.0, window=(-2, -1, 1, 2), **kw) -> MotionSpec:
    return MotionSpec({d: np.array([[1.0, 0.0, tx * d], [0.0, 1.0, ty * d]]) for d in window}, **kw)
