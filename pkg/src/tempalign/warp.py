"""Differentiable spatial kernels: affine grids, bilinear sampling and
modulated deformable convolution.

Conventions shared by all three kernels:

* normalized coordinates use pixel centers, ``xn = (2*i + 1) / W - 1``, so
  the identity affine map samples every pixel exactly at its own center;
* samples falling outside the input are zero padded, corner by corner;
* deformable offsets are ``(dy, dx)`` pairs in input pixel units, channel
  ``2k`` holding ``dy`` and ``2k+1`` holding ``dx`` of kernel tap ``k``.

Batched layouts are ``[N,C,H,W]`` features, ``[N,2,3]`` affine parameters
and ``[N,H,W,2]`` grids with ``(x, y)`` in the last axis. 3-D inputs (a
single sample) are accepted and returned without the batch axis.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, _make, reshape

__all__ = ["IDENTITY_THETA", "normalized_lattice", "affine_grid", "grid_sample",
           "modulated_deform_conv"]

IDENTITY_THETA = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def normalized_lattice(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """``[h*w, 3]`` rows of ``(xn, yn, 1)`` in row-major pixel order."""
    xs = (2 * np.arange(w) + 1) / w - 1
    ys = (2 * np.arange(h) + 1) / h - 1
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)], axis=1).astype(dtype)


def affine_grid(theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Map the output lattice through ``theta``: ``[N,2,3] -> [N,out_h,out_w,2]``."""
    if out_h < 1 or out_w < 1:
        raise ValueError("affine_grid: output extents must be >= 1")
    if not np.all(np.isfinite(theta.data)):
        raise ValueError("affine_grid: non-finite theta")
    squeeze = theta.ndim == 2
    if squeeze:
        theta = reshape(theta, (1, 2, 3))
    if theta.ndim != 3 or theta.shape[1:] != (2, 3):
        raise ShapeError(f"affine_grid: theta must be [N,2,3], got {theta.shape}")
    n = theta.shape[0]
    base = normalized_lattice(out_h, out_w, theta.dtype)
    coords = np.einsum("pk,njk->npj", base, theta.data)

    def backward_fn(g):
        g = g.reshape(n, out_h * out_w, 2)
        return (np.einsum("npj,pk->njk", g, base),)

    out = _make("affine_grid", coords.reshape(n, out_h, out_w, 2), (theta,), backward_fn)
    return reshape(out, (out_h, out_w, 2)) if squeeze else out


class _Bilinear:
    """Sparse bilinear gather over rows of a ``[N*H*W, C]`` feature matrix.

    Each sample row combines up to four pixel rows; invalid (out-of-bounds)
    corners are simply absent, which is what zero padding means here.
    Also carries the matrices of the weights' derivatives with respect to
    the sample's y and x pixel coordinates.
    """

    def __init__(self, py, px, batch, n, h, w, dtype):
        m = py.size
        y0 = np.floor(py)
        x0 = np.floor(px)
        fy = (py - y0).astype(dtype)
        fx = (px - x0).astype(dtype)
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        one = dtype.type(1)
        corners = (
            (0, 0, (one - fy) * (one - fx), -(one - fx), -(one - fy)),
            (0, 1, (one - fy) * fx, -fx, one - fy),
            (1, 0, fy * (one - fx), one - fx, -fy),
            (1, 1, fy * fx, fx, fy),
        )
        rows, cols, wv, wy, wx = [], [], [], [], []
        sample_idx = np.arange(m)
        for dy, dx, cw, cwy, cwx in corners:
            yc = y0 + dy
            xc = x0 + dx
            ok = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
            rows.append(sample_idx[ok])
            cols.append((batch[ok] * h + yc[ok]) * w + xc[ok])
            wv.append(cw[ok])
            wy.append(cwy[ok])
            wx.append(cwx[ok])
        self.shape = (m, n * h * w)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        self._rc = (rows, cols)
        self.S = self._csr(np.concatenate(wv))
        self._wy = np.concatenate(wy)
        self._wx = np.concatenate(wx)

    def _csr(self, data):
        return sp.csr_matrix((data, self._rc), shape=self.shape)

    def d_dy(self):
        return self._csr(self._wy)

    def d_dx(self):
        return self._csr(self._wx)


def _rows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n * h * w, c)


def _unrows(r: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    return np.ascontiguousarray(r.reshape(n, h, w, c).transpose(0, 3, 1, 2))


def _snap(p: np.ndarray, tol: float) -> np.ndarray:
    r = np.rint(p)
    return np.where(np.abs(p - r) <= tol, r, p)


def grid_sample(feature: Tensor, grid: Tensor) -> Tensor:
    """Bilinearly sample ``feature [N,C,H,W]`` at ``grid [N,Ho,Wo,2]``."""
    squeeze = feature.ndim == 3
    if squeeze:
        feature = reshape(feature, (1,) + feature.shape)
        grid = reshape(grid, (1,) + grid.shape)
    if feature.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != feature.shape[0]:
        raise ShapeError(f"grid_sample: feature {feature.shape} incompatible with grid {grid.shape}")
    n, c, h, w = feature.shape
    _, ho, wo, _ = grid.shape
    dtype = feature.dtype
    gx = grid.data[..., 0].reshape(-1).astype(np.float64)
    gy = grid.data[..., 1].reshape(-1).astype(np.float64)
    # a low-precision grid cannot hold pixel centers exactly; coordinates within
    # its rounding error of a lattice point are put on it
    tol = 4 * np.finfo(grid.dtype).eps * max(h, w)
    px = _snap(((gx + 1) * w - 1) / 2, tol)
    py = _snap(((gy + 1) * h - 1) / 2, tol)
    batch = np.repeat(np.arange(n), ho * wo)
    bil = _Bilinear(py, px, batch, n, h, w, dtype)
    rows = _rows(feature.data)
    out = np.asarray(bil.S @ rows).astype(dtype)
    out4 = np.ascontiguousarray(out.reshape(n, ho, wo, c).transpose(0, 3, 1, 2))

    def backward_fn(g):
        gr = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c)
        gf = _unrows(np.asarray(bil.S.T @ gr), feature.shape) if feature.requires_grad else None
        gg = None
        if grid.requires_grad:
            dpx = np.einsum("mc,mc->m", gr, np.asarray(bil.d_dx() @ rows))
            dpy = np.einsum("mc,mc->m", gr, np.asarray(bil.d_dy() @ rows))
            gg = np.stack([dpx * (w / 2), dpy * (h / 2)], axis=-1).reshape(grid.shape).astype(dtype)
        return gf, gg

    out_t = _make("grid_sample", out4, (feature, grid), backward_fn)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def modulated_deform_conv(x: Tensor, offsets: Tensor, masks: Tensor, weight: Tensor,
                          bias: Tensor | None = None) -> Tensor:
    """Stride-1, same-padded modulated deformable convolution.

    Tap ``k`` of the kernel at output pixel ``p`` reads ``x`` bilinearly at
    ``p + p_k + offsets_k(p)`` and is scaled by ``masks_k(p)`` before the
    usual weighted sum over taps and input channels.

    Shapes: ``x [N,Cin,H,W]``, ``offsets [N,2K,H,W]``, ``masks [N,K,H,W]``,
    ``weight [Cout,Cin,kh,kw]`` with ``K = kh*kw``, ``bias [Cout]``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x, offsets, masks = (reshape(t, (1,) + t.shape) for t in (x, offsets, masks))
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"modulated_deform_conv: input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    k = kh * kw
    if masks.shape != (n, k, h, w):
        raise ShapeError(f"modulated_deform_conv: masks {masks.shape} != {(n, k, h, w)} for a {kh}x{kw} kernel")
    if offsets.shape != (n, 2 * k, h, w):
        raise ShapeError(f"modulated_deform_conv: offsets {offsets.shape} != {(n, 2 * k, h, w)} for a {kh}x{kw} kernel")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"modulated_deform_conv: bias {bias.shape} != ({o},)")
    dtype = x.dtype
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ki, kj = np.meshgrid(np.arange(kh) - ph, np.arange(kw) - pw, indexing="ij")
    off = offsets.data.reshape(n, k, 2, h, w)
    yy = np.arange(h)[None, None, :, None] + ki.reshape(1, k, 1, 1) + off[:, :, 0]
    xx = np.arange(w)[None, None, None, :] + kj.reshape(1, k, 1, 1) + off[:, :, 1]
    batch = np.repeat(np.arange(n), k * h * w)
    bil = _Bilinear(yy.reshape(-1), xx.reshape(-1), batch, n, h, w, dtype)
    rows = _rows(x.data)
    sampled = np.asarray(bil.S @ rows).astype(dtype)            # [N*K*H*W, C]
    m = masks.data.reshape(-1, 1)
    cols = (sampled * m).reshape(n, k, h * w, c).transpose(0, 3, 1, 2).reshape(n, c * k, h * w)
    wm = weight.data.reshape(o, c * k)
    out = np.matmul(wm, cols)
    if bias is not None:
        out += bias.data[:, None]

    def backward_fn(g):
        g2 = g.reshape(n, o, h * w)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(wm.T, g2).reshape(n, c, k, h * w).transpose(0, 2, 3, 1).reshape(-1, c)
        gm = np.einsum("mc,mc->m", gcols, sampled).reshape(masks.shape)
        gs = gcols * m
        gx = _unrows(np.asarray(bil.S.T @ gs), x.shape) if x.requires_grad else None
        goff = None
        if offsets.requires_grad:
            dpy = np.einsum("mc,mc->m", gs, np.asarray(bil.d_dy() @ rows))
            dpx = np.einsum("mc,mc->m", gs, np.asarray(bil.d_dx() @ rows))
            goff = np.stack([dpy.reshape(n, k, h, w), dpx.reshape(n, k, h, w)], axis=2)
            goff = goff.reshape(offsets.shape).astype(dtype)
        grads = (gx, goff, gm.astype(dtype), gw)
        if bias is not None:
            grads += (g2.sum(axis=(0, 2)),)
        return grads

    parents = (x, offsets, masks, weight) + ((bias,) if bias is not None else ())
    out_t = _make("deform_conv", out.reshape(n, o, h, w), parents, backward_fn)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t
