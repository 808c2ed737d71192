"""Feature extraction, two-stage temporal alignment and aggregation.

A supporting frame's feature is aligned to the key frame in two steps: a
global affine warp whose parameters are regressed from the feature pair,
then a per-pixel refinement by modulated deformable convolution whose
offsets and masks are estimated from the warped feature and the key
feature. The key feature itself only drives the estimators; it never
enters the deformable convolution. All alignment weights are shared
across supporting offsets.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .heatmaps import DetectionHead
from .nn import Conv2d, Linear, Module, ResidualBlock, param
from .tensor import Tensor
from .warp import IDENTITY_THETA, affine_grid, grid_sample, modulated_deform_conv, normalized_lattice

__all__ = [
    "ModelConfig", "Backbone", "GTMNet", "LCMNet", "FrameFeatures", "PoseModel",
    "aggregate", "global_transform", "save_checkpoint", "load_checkpoint", "config_hash",
]


@dataclass
class ModelConfig:
    channels: int = 32
    backbone_widths: tuple = (16, 32, 32)
    gtm_hidden: int = 32
    gtm_coords: bool = True
    antialias: bool = True
    lcm_blocks: int = 2
    kernel: int = 3
    n_joints: int = 5
    head_layers: int = 3
    use_gtm: bool = True
    use_lcm: bool = True
    dtype: str = "float32"

    def to_json(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d


class Backbone(Module):
    """Four 3x3 convolutions with two 2x downsamplings: output is input / 4.

    Stands in for a large pretrained backbone. relu follows every layer but
    the last. With ``antialias`` the downsampling layers run at stride 1 and
    are followed by a fixed blur-and-subsample, which keeps the features much
    closer to shift-equivariant (so a warp of the features tracks a warp of
    the image); otherwise they are plain stride-2 convolutions.
    """

    def __init__(self, channels=32, widths=(16, 32, 32), rng=None, dtype=np.float32, init="he",
                 antialias=False):
        w = (3,) + tuple(widths) + (channels,)
        self.down = (False, True, True, False)
        self.antialias = antialias
        self.convs = [Conv2d(a, b, 3, stride=1 if antialias or not d else 2, rng=rng, dtype=dtype, init=init)
                      for a, b, d in zip(w[:-1], w[1:], self.down)]

    def __call__(self, images: Tensor) -> Tensor:
        if images.shape[-1] % 4 or images.shape[-2] % 4:
            raise ValueError(f"image extents {images.shape[-2:]} must be divisible by 4")
        squeeze = images.ndim == 3
        x = T.reshape(images, (1,) + images.shape) if squeeze else images
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = T.relu(x)
            if self.antialias and self.down[i]:
                x = T.blur_pool(x)
        return T.reshape(x, x.shape[1:]) if squeeze else x


class GTMNet(Module):
    """Affine-parameter regressor over a channel-concatenated feature pair.

    The final layer has zero weights and an identity bias, so the untrained
    network returns the identity transform for every input.
    """

    def __init__(self, channels=32, hidden=32, rng=None, dtype=np.float32, coords=False):
        self.coords = coords
        self.conv1 = Conv2d(2 * channels + (2 if coords else 0), hidden, 3, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(hidden, hidden, 3, rng=rng, dtype=dtype)
        self.fc = Linear(hidden, 6, rng=rng, dtype=dtype, init="zero")
        self.fc.bias.data[:] = IDENTITY_THETA.reshape(-1)

    def __call__(self, z_key: Tensor, z_supp: Tensor) -> Tensor:
        if z_key.shape != z_supp.shape:
            raise T.ShapeError(f"estimate_affine: {z_key.shape} vs {z_supp.shape}")
        parts = [z_key, z_supp]
        if self.coords:
            n, _, h, w = z_key.shape
            lat = normalized_lattice(h, w, z_key.dtype)[:, :2].T.reshape(2, h, w)
            parts.append(Tensor(np.broadcast_to(lat, (n, 2, h, w)), dtype=z_key.dtype))
        x = T.concat(parts, axis=1)
        x = T.relu(self.conv1(x))
        x = T.relu(self.conv2(x))
        theta = self.fc(T.global_avg_pool(x))
        return T.reshape(theta, (theta.shape[0], 2, 3))


class _FieldBranch(Module):
    def __init__(self, cin, width, cout, blocks, rng, dtype):
        self.stem = Conv2d(cin, width, 3, rng=rng, dtype=dtype)
        self.blocks = [ResidualBlock(width, rng=rng, dtype=dtype) for _ in range(blocks)]
        self.head = Conv2d(width, cout, 3, rng=rng, dtype=dtype, init="zero")

    def __call__(self, x):
        x = T.relu(self.stem(x))
        for b in self.blocks:
            x = b(x)
        return self.head(x)


class LCMNet(Module):
    """Offset and mask estimators plus the calibrating deformable kernel.

    Heads start at zero, so initial offsets are 0 and initial masks are
    sigmoid(0) = 0.5. The deformable kernel starts as twice the identity
    (center tap, matching channel), so the untrained module passes the
    warped feature through unchanged.
    """

    def __init__(self, channels=32, kernel=3, blocks=2, rng=None, dtype=np.float32):
        k = kernel * kernel
        self.kernel = kernel
        self.offset_net = _FieldBranch(2 * channels, channels, 2 * k, blocks, rng, dtype)
        self.mask_net = _FieldBranch(2 * channels, channels, k, blocks, rng, dtype)
        w = np.zeros((channels, channels, kernel, kernel))
        w[np.arange(channels), np.arange(channels), kernel // 2, kernel // 2] = 2.0
        self.weight = param(w, dtype)
        self.bias = param(np.zeros(channels), dtype)

    def estimate_field(self, z_bar: Tensor, z_key: Tensor) -> tuple[Tensor, Tensor]:
        x = T.concat([z_bar, z_key], axis=1)
        return self.offset_net(x), T.sigmoid(self.mask_net(x))

    def __call__(self, z_bar: Tensor, z_key: Tensor, field=None) -> Tensor:
        """Refine ``z_bar``; pass ``field=(offsets, masks)`` to skip estimation."""
        if z_bar.shape != z_key.shape:
            raise T.ShapeError(f"local_calibrate: {z_bar.shape} vs {z_key.shape}")
        offsets, masks = self.estimate_field(z_bar, z_key) if field is None else field
        return modulated_deform_conv(z_bar, offsets, masks, self.weight, self.bias)


def global_transform(z_supp: Tensor, theta: Tensor) -> Tensor:
    """Warp a supporting feature by ``theta`` (``[N,2,3]`` or ``[2,3]``)."""
    h, w = z_supp.shape[-2:]
    return grid_sample(z_supp, affine_grid(theta, h, w))


def aggregate(z_key: Tensor, aligned) -> Tensor:
    """``z_key`` plus the sum of aligned supporting features.

    ``aligned`` maps offsets to tensors (or is any iterable of tensors).
    Summation runs in sorted-offset order so the result does not depend on
    how the mapping was built.
    """
    items = [aligned[k] for k in sorted(aligned)] if isinstance(aligned, dict) else list(aligned)
    out = z_key
    for z in items:
        if z.shape != z_key.shape:
            raise T.ShapeError(f"aggregate: {z.shape} vs key {z_key.shape}")
        out = out + z
    return out


@dataclass
class FrameFeatures:
    z_t: Tensor
    z_supp: dict = field(default_factory=dict)
    aligned: dict = field(default_factory=dict)   # delta -> (z_bar, z_barbar)
    thetas: dict = field(default_factory=dict)


class PoseModel(Module):
    """Backbone, alignment modules and detection head as one trainable unit."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        c = self.config
        dtype = np.dtype(c.dtype)
        rng = np.random.default_rng([seed, 1])
        self.backbone = Backbone(c.channels, c.backbone_widths, rng=rng, dtype=dtype,
                                 antialias=c.antialias)
        self.gtm = GTMNet(c.channels, c.gtm_hidden, rng=np.random.default_rng([seed, 2]), dtype=dtype,
                          coords=c.gtm_coords)
        self.lcm = LCMNet(c.channels, c.kernel, c.lcm_blocks, rng=np.random.default_rng([seed, 3]), dtype=dtype)
        self.head = DetectionHead(c.channels, c.n_joints, c.head_layers,
                                  rng=np.random.default_rng([seed, 4]), dtype=dtype)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def trainable(self) -> dict[str, Tensor]:
        """Parameters that actually influence the output under this config."""
        params = self.parameters()
        drop = []
        if not self.config.use_gtm:
            drop.append("gtm.")
        if not self.config.use_lcm:
            drop.append("lcm.")
        return {k: v for k, v in params.items() if not any(k.startswith(d) for d in drop)}

    def extract_features(self, images) -> Tensor:
        return self.backbone(images if isinstance(images, Tensor) else Tensor(images, dtype=self.dtype))

    def estimate_affine(self, z_key: Tensor, z_supp: Tensor) -> Tensor:
        squeeze = z_key.ndim == 3
        if squeeze:
            z_key, z_supp = (T.reshape(z, (1,) + z.shape) for z in (z_key, z_supp))
        theta = self.gtm(z_key, z_supp)
        return T.reshape(theta, (2, 3)) if squeeze else theta

    def local_calibrate(self, z_bar: Tensor, z_key: Tensor, field=None) -> Tensor:
        squeeze = z_bar.ndim == 3
        if squeeze:
            z_bar, z_key = (T.reshape(z, (1,) + z.shape) for z in (z_bar, z_key))
            if field is not None:
                field = tuple(T.reshape(f, (1,) + f.shape) for f in field)
        out = self.lcm(z_bar, z_key, field)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def forward_pipeline(self, key, supports: dict, window) -> tuple[Tensor, FrameFeatures]:
        """Align every requested supporting frame to the key frame and aggregate.

        ``key`` is ``[B,3,H,W]`` and ``supports`` maps each offset to a
        ``[B,3,H,W]`` array. All frames share one backbone call and all
        offsets share one pass through each alignment module.
        """
        window = list(window)
        for d in window:
            if d not in supports:
                raise KeyError(f"clip has no supporting frame for delta={d}")
        key = np.asarray(key.data if isinstance(key, Tensor) else key)
        if key.ndim == 3:
            raise ValueError("forward_pipeline expects a batch axis on the key frame")
        b = key.shape[0]
        frames = np.concatenate([key] + [np.asarray(supports[d]) for d in window], axis=0)
        z_all = self.extract_features(Tensor(frames, dtype=self.dtype))
        z_t = z_all[0:b]
        feats = FrameFeatures(z_t=z_t)
        if not window:
            return z_t, feats
        n = len(window)
        z_s = z_all[b:]
        z_key_rep = T.concat([z_t] * n, axis=0)
        if self.config.use_gtm:
            theta = self.gtm(z_key_rep, z_s)
            z_bar = global_transform(z_s, theta)
        else:
            theta, z_bar = None, z_s
        z_bb = self.lcm(z_bar, z_key_rep) if self.config.use_lcm else z_bar
        for i, d in enumerate(window):
            sl = slice(i * b, (i + 1) * b)
            feats.z_supp[d] = z_s[sl]
            feats.aligned[d] = (z_bar[sl], z_bb[sl])
            if theta is not None:
                feats.thetas[d] = theta[sl]
        z_tilde = aggregate(z_t, {d: feats.aligned[d][1] for d in window})
        return z_tilde, feats

    def __call__(self, key, supports, window):
        z_tilde, feats = self.forward_pipeline(key, supports, window)
        return self.head(z_tilde), z_tilde, feats


# -- checkpoints -------------------------------------------------------------

def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, params: dict, meta: dict) -> None:
    """Write ``u64 manifest length | JSON manifest | TACT blobs``.

    The manifest maps each parameter name to the byte offset and length of
    its blob, counted from the first byte after the manifest.
    """
    blobs, entries, pos = [], {}, 0
    for name in sorted(params):
        p = params[name]
        blob = T.dumps_tensor(p.data if isinstance(p, Tensor) else p)
        entries[name] = {"offset": pos, "length": len(blob)}
        blobs.append(blob)
        pos += len(blob)
    manifest = dict(meta)
    manifest["tensors"] = entries
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    (n,) = struct.unpack_from("<Q", buf, 0)
    manifest = json.loads(buf[8:8 + n])
    base = 8 + n
    params = {}
    for name, ent in manifest["tensors"].items():
        t, end = T.loads_tensor(buf, base + ent["offset"])
        if end - (base + ent["offset"]) != ent["length"]:
            raise ValueError(f"checkpoint entry {name} has inconsistent length")
        params[name] = t.data
    return params, manifest
