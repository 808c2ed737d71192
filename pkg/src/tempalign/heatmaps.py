"""Ground-truth heatmaps, the detection head, heatmap losses, decoding and PCK."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import Tensor

__all__ = [
    "PoseAnnotation", "to_heatmap_coords", "to_image_coords", "render_heatmap",
    "render_batch", "DetectionHead", "heatmap_loss", "total_loss", "decode_heatmap",
    "pck", "pck_report", "write_report",
]

DEFAULT_SIGMA = 1.5


@dataclass
class PoseAnnotation:
    """``joints`` is ``[J,2]`` of ``(x, y)``; ``visible`` is ``[J]`` bool."""

    joints: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        if self.visible is None:
            self.visible = np.ones(len(self.joints), dtype=bool)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.visible) != len(self.joints):
            raise ValueError("joints and visibility differ in length")

    def __len__(self):
        return len(self.joints)

    def to_json(self) -> dict:
        return {"joints": self.joints.tolist(), "visible": self.visible.tolist()}


def to_heatmap_coords(xy, stride: int = 4) -> np.ndarray:
    """Image pixel coordinates to heatmap lattice units (pixel-center aligned)."""
    return (np.asarray(xy, dtype=np.float64) + 0.5) / stride - 0.5


def to_image_coords(uv, stride: int = 4) -> np.ndarray:
    return (np.asarray(uv, dtype=np.float64) + 0.5) * stride - 0.5


def render_heatmap(ann: PoseAnnotation, h: int, w: int, sigma: float = DEFAULT_SIGMA,
                   stride: int = 1) -> np.ndarray:
    """Gaussian bump per visible joint, ``[J,h,w]``.

    Joints are mapped into heatmap units and snapped to the nearest lattice
    point, so every visible channel peaks at exactly 1.0. Invisible joints
    yield all-zero channels.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    uv = np.rint(to_heatmap_coords(ann.joints, stride)) if stride != 1 else np.rint(ann.joints)
    out = np.zeros((len(ann), h, w))
    vs = np.arange(h)[:, None]
    us = np.arange(w)[None, :]
    for j, ((u, v), vis) in enumerate(zip(uv, ann.visible)):
        if not vis:
            continue
        if not (0 <= u < w and 0 <= v < h):
            raise ValueError(f"visible joint {j} at {ann.joints[j]} falls outside the {h}x{w} heatmap")
        out[j] = np.exp(-((us - u) ** 2 + (vs - v) ** 2) / (2 * sigma ** 2))
    return out


def render_batch(anns, h, w, sigma=DEFAULT_SIGMA, stride=4) -> np.ndarray:
    return np.stack([render_heatmap(a, h, w, sigma, stride) for a in anns])


class DetectionHead(Module):
    """Stack of 3x3 convolutions ``C -> C -> ... -> J``; relu between, linear output."""

    def __init__(self, channels: int, n_joints: int, n_layers: int = 3, rng=None,
                 dtype=np.float32, init="he"):
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = [channels] * n_layers + [n_joints]
        self.convs = [Conv2d(a, b, 3, rng=rng, dtype=dtype, init=init)
                      for a, b in zip(widths[:-1], widths[1:])]
        # small output layer: predicted maps start near zero, like the targets
        self.convs[-1].weight.data *= 0.05

    def __call__(self, z: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            z = conv(z)
            if i < len(self.convs) - 1:
                z = T.relu(z)
        return z


def heatmap_loss(pred: Tensor, target, visible) -> Tensor:
    """Mean squared error over the channels of visible joints only.

    ``pred`` and ``target`` are ``[B,J,h,w]`` (or ``[J,h,w]``), ``visible``
    is ``[B,J]`` (or ``[J]``). Invisible channels count neither in the sum
    nor in the element count.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise T.ShapeError(f"heatmap_loss: prediction {pred.shape} vs target {target.shape}")
    vis = np.asarray(visible, dtype=bool).reshape(pred.shape[:-2])
    n_vis = int(vis.sum())
    if n_vis == 0:
        raise ValueError("heatmap_loss: no visible joints, loss undefined")
    mask = np.broadcast_to(vis[..., None, None], pred.shape).astype(pred.dtype)
    diff = pred - Tensor(target)
    sq = T.mul(T.mul(diff, diff), Tensor(mask))
    count = n_vis * pred.shape[-1] * pred.shape[-2]
    return T.scale(T.sum(sq), 1.0 / count)


def total_loss(l_h, l_mi, beta: float):
    """``L_H + beta * L_MI``; tensors in, tensor out, floats in, float out."""
    if isinstance(l_h, Tensor) or isinstance(l_mi, Tensor):
        l_h = l_h if isinstance(l_h, Tensor) else Tensor(l_h)
        l_mi = l_mi if isinstance(l_mi, Tensor) else Tensor(np.asarray(l_mi, dtype=l_h.dtype))
        for v in (l_h.data, l_mi.data, beta):
            if not np.all(np.isfinite(v)):
                raise T.NonFiniteError("total_loss: non-finite input")
        return T.add(l_h, T.scale(l_mi, beta))
    if not all(np.isfinite(v) for v in (l_h, l_mi, beta)):
        raise T.NonFiniteError("total_loss: non-finite input")
    return l_h + beta * l_mi


def decode_heatmap(maps) -> np.ndarray:
    """Argmax location per channel as ``(x, y)`` lattice coordinates.

    Works on ``[J,h,w]`` or ``[B,J,h,w]``. Ties go to the smallest
    row-major index (numpy's argmax order). No sub-pixel refinement.
    """
    maps = np.asarray(maps.data if isinstance(maps, Tensor) else maps)
    h, w = maps.shape[-2:]
    flat = maps.reshape(maps.shape[:-2] + (h * w,)).argmax(axis=-1)
    return np.stack([flat % w, flat // w], axis=-1).astype(np.float64)


def _reference_size(gt: np.ndarray) -> np.ndarray:
    span = gt.max(axis=-2) - gt.min(axis=-2)
    return np.sqrt((span ** 2).sum(axis=-1))


def pck(pred, gt, visible, threshold_frac: float = 0.1):
    """Percentage of correct keypoints.

    A visible joint counts as correct when its distance to ground truth is at
    most ``threshold_frac`` times the diagonal of the ground-truth skeleton's
    bounding box. Inputs are ``[J,2]`` / ``[J]`` for one sample or batched
    ``[B,J,2]`` / ``[B,J]``.

    Returns ``(per_joint, mean)``: per-joint accuracy over the samples where
    the joint is visible (NaN when never visible), and the mean over samples
    of each sample's mean over its visible joints.
    """
    if threshold_frac <= 0:
        raise ValueError("threshold_frac must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    vis = np.asarray(visible, dtype=bool)
    if pred.ndim == 2:
        pred, gt, vis = pred[None], gt[None], vis[None]
    if pred.shape != gt.shape or vis.shape != gt.shape[:-1]:
        raise ValueError(f"pck: shapes {pred.shape}, {gt.shape}, {vis.shape} disagree")
    ref = _reference_size(gt)
    if np.any(ref <= 0):
        raise ValueError("pck: zero reference size (degenerate ground-truth skeleton)")
    dist = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    correct = (dist <= threshold_frac * ref[:, None]) & vis
    n_vis = vis.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(n_vis > 0, correct.sum(axis=0) / np.maximum(n_vis, 1), np.nan)
    has_vis = vis.any(axis=1)
    per_sample = correct.sum(axis=1)[has_vis] / vis.sum(axis=1)[has_vis]
    mean = float(per_sample.mean()) if per_sample.size else float("nan")
    return per_joint, mean


def pck_report(pred, gt, visible, thresholds=(0.05, 0.1, 0.2)) -> dict:
    """The evaluation report: per-joint and mean PCK at each threshold."""
    pred = np.asarray(pred)
    n = 1 if pred.ndim == 2 else pred.shape[0]
    report = {"sample_count": int(n), "thresholds": list(thresholds), "results": {}}
    for t in thresholds:
        per_joint, mean = pck(pred, gt, visible, t)
        report["results"][f"{t:g}"] = {
            "threshold": t,
            "mean_pck": mean,
            "per_joint_pck": [None if np.isnan(v) else float(v) for v in per_joint],
        }
    return report


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
