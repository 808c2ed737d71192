"""Mutual-information machinery.

Exact plug-in values for discrete joints (used as oracles), a trainable
contrastive lower bound for continuous features, and the assembled
feature-level objective

    L_MI = [I(y;z_t) - I(z_t;z~)] + [I(y;z_s) - I(z_s;z~)] - alpha * [I(y;z~) - I(z_t;z~)]

in which each term is a contrastive estimate with its own critic. All
values are in nats.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numba import njit

from . import tensor as T
from .nn import Linear, Module, param
from .tensor import Tensor

__all__ = [
    "DiscreteJoint", "mi_discrete", "cmi_discrete", "decomposition_residual",
    "Critic", "estimate_mi_contrastive", "MITermSet", "TERM_NAMES", "make_critics",
    "assemble_mi_loss", "mi_loss", "LabelEmbedding", "embed_label", "gaussian_mi",
]

TERM_NAMES = ("i_y_zt", "i_y_zsupp", "i_y_ztilde", "i_zt_ztilde", "i_zsupp_ztilde")


# -- discrete oracles --------------------------------------------------------

class DiscreteJoint:
    """A validated probability table over finite alphabets."""

    def __init__(self, pmf, atol: float = 1e-12):
        p = np.asarray(pmf, dtype=np.float64)
        if p.ndim < 2:
            raise ValueError("a joint pmf needs at least two axes")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("pmf entries must be finite and non-negative")
        if abs(p.sum() - 1.0) > atol:
            raise ValueError(f"pmf sums to {p.sum()!r}, not 1")
        self.pmf = p

    @property
    def sizes(self) -> tuple[int, ...]:
        return self.pmf.shape


def _pmf(joint, ndim) -> np.ndarray:
    p = joint.pmf if isinstance(joint, DiscreteJoint) else DiscreteJoint(joint).pmf
    if p.ndim != ndim:
        raise ValueError(f"expected a {ndim}-way table, got shape {p.shape}")
    return p


def _mi_table(p: np.ndarray) -> float:
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / (pa * pb)[nz])))


def mi_discrete(joint) -> float:
    """``I(a;b)`` of a 2-way table, with ``0 log 0 = 0``."""
    return max(_mi_table(_pmf(joint, 2)), 0.0)


def cmi_discrete(joint) -> float:
    """``I(a;b|c)`` of a 3-way table indexed ``[a, b, c]``."""
    p = _pmf(joint, 3)
    total = 0.0
    for c in range(p.shape[2]):
        pc = p[:, :, c].sum()
        if pc > 0:
            total += pc * _mi_table(p[:, :, c] / pc)
    return max(total, 0.0)


def decomposition_residual(joint) -> float:
    """``|I(y;z~|z) - [I(y;z~) - I(z~;z) + I(z~;z|y)]|`` for a table ``[y, z~, z]``.

    Exactly zero in real arithmetic for every joint distribution.
    """
    p = _pmf(joint, 3)
    lhs = cmi_discrete(p)
    rhs = (mi_discrete(p.sum(axis=2))
           - mi_discrete(p.sum(axis=0))
           + cmi_discrete(p.transpose(1, 2, 0)))
    return abs(lhs - rhs)


def gaussian_mi(rho: float) -> float:
    """Analytic MI of a bivariate normal with correlation ``rho``."""
    return -0.5 * np.log1p(-rho * rho)


# -- contrastive estimator ---------------------------------------------------

@njit(cache=True, fastmath=True)
def _pair_fwd(ha, hb, w2, b2):
    n_a, n_h = ha.shape
    n_b = hb.shape[0]
    out = np.empty((n_a, n_b), ha.dtype)
    for i in range(n_a):
        a = ha[i]
        for j in range(n_b):
            bj = hb[j]
            s = b2
            for h in range(n_h):
                s += max(a[h] + bj[h], 0.0) * w2[h]
            out[i, j] = s
    return out


@njit(cache=True, fastmath=True)
def _pair_bwd(ha, hb, w2, g):
    n_a, n_h = ha.shape
    n_b = hb.shape[0]
    ga = np.zeros_like(ha)
    gb = np.zeros_like(hb)
    gw2 = np.zeros_like(w2)
    for i in range(n_a):
        a = ha[i]
        gai = ga[i]
        for j in range(n_b):
            bj = hb[j]
            gbj = gb[j]
            gij = g[i, j]
            for h in range(n_h):
                v = a[h] + bj[h]
                if v > 0:
                    gw2[h] += gij * v
                    t = gij * w2[h]
                    gai[h] += t
                    gbj[h] += t
    return ga, gb, gw2


def pair_scores(ha: Tensor, hb: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """``S[i,j] = relu(ha[i] + hb[j]) @ w2 + b2`` without materializing pairs.

    The hidden pre-activations of a two-layer critic applied to every
    (a_i, b_j) concatenation split into a row term and a column term; this
    fused primitive evaluates all ``len(ha) * len(hb)`` pairs at once.
    """
    if ha.ndim != 2 or hb.ndim != 2 or ha.shape[1] != hb.shape[1] or w2.shape != (ha.shape[1],):
        raise T.ShapeError(f"pair_scores: {ha.shape}, {hb.shape}, {w2.shape}")
    dt = ha.dtype
    a, b, w = (np.ascontiguousarray(t.data, dtype=dt) for t in (ha, hb, w2))
    out = _pair_fwd(a, b, w, dt.type(b2.data.reshape(-1)[0]))

    def backward_fn(g):
        ga, gb, gw = _pair_bwd(a, b, w, np.ascontiguousarray(g, dtype=dt))
        return ga, gb, gw, np.array([g.sum()], dtype=dt)

    return T._make("pair_scores", out, (ha, hb, w2, b2), backward_fn)


def _as_vectors(x: Tensor) -> Tensor:
    if x.ndim == 4:
        return T.global_avg_pool(x)
    if x.ndim == 2:
        return x
    raise T.ShapeError(f"critic inputs must be [B,C,H,W] or [B,C], got {x.shape}")


class Critic(Module):
    """Two-layer scorer of a (u, v) pair.

    Each input is global-average pooled to a vector, the two vectors are
    concatenated and passed through ``Linear(da+db, hidden) -> relu ->
    Linear(hidden, 1)``.
    """

    def __init__(self, dim_a: int, dim_b: int, hidden: int = 64, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim_a = dim_a
        self.fc1 = Linear(dim_a + dim_b, hidden, rng=rng, dtype=dtype)
        self.w2 = param(rng.standard_normal(hidden) * 0.1, dtype)
        self.b2 = param(np.zeros(1), dtype)

    def _hidden_terms(self, a, b):
        pa, pb = _as_vectors(a), _as_vectors(b)
        w1 = self.fc1.weight
        if pa.shape[1] + pb.shape[1] != w1.shape[0]:
            raise T.ShapeError(f"critic expects {w1.shape[0]} input features, got {pa.shape[1]}+{pb.shape[1]}")
        ha = T.bias_add(T.matmul(pa, w1[:self.dim_a]), self.fc1.bias)
        hb = T.matmul(pb, w1[self.dim_a:])
        return ha, hb

    def scores(self, a: Tensor, b: Tensor) -> Tensor:
        """All-pairs score matrix ``S[i,j] = f(a_i, b_j)``, shape ``[B,B]``."""
        ha, hb = self._hidden_terms(a, b)
        return pair_scores(ha, hb, self.w2, self.b2)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        """Scores of the aligned pairs only, shape ``[B]``."""
        ha, hb = self._hidden_terms(a, b)
        h = T.relu(ha + hb)
        w2 = T.reshape(self.w2, (self.w2.shape[0], 1))
        return T.reshape(T.bias_add(T.matmul(h, w2), self.b2), (h.shape[0],))


def estimate_mi_contrastive(a: Tensor, b: Tensor, critic: Critic) -> Tensor:
    """Contrastive lower bound on ``I(a;b)`` from ``B`` paired rows.

    ``mean_i [ S_ii - log((1/B) sum_j exp S_ij) ]``, which can never exceed
    ``log B``.
    """
    n = a.shape[0]
    if n < 2:
        raise ValueError("contrastive estimate needs a batch of at least 2")
    if b.shape[0] != n:
        raise T.ShapeError(f"batch sizes differ: {n} vs {b.shape[0]}")
    s = critic.scores(a, b)
    ls = T.log_softmax(s, axis=1)
    diag = T.take(T.reshape(ls, (n * n,)), np.arange(n) * (n + 1))
    return T.add_scalar(T.mean(diag), float(np.log(n)))


# -- assembled objective -----------------------------------------------------

@dataclass
class MITermSet:
    i_y_zt: float = 0.0
    i_y_zsupp: float = 0.0
    i_y_ztilde: float = 0.0
    i_zt_ztilde: float = 0.0
    i_zsupp_ztilde: float = 0.0

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def assemble_mi_loss(terms, alpha: float):
    """Combine five term estimates (tensors or floats) into ``L_MI``.

    ``terms`` maps the names in :data:`TERM_NAMES` to values.
    """
    t = terms.as_dict() if isinstance(terms, MITermSet) else terms
    vanish_key = t["i_y_zt"] - t["i_zt_ztilde"]
    vanish_supp = t["i_y_zsupp"] - t["i_zsupp_ztilde"]
    complementary = t["i_y_ztilde"] - t["i_zt_ztilde"]
    if isinstance(complementary, Tensor):
        return vanish_key + vanish_supp - T.scale(complementary, alpha)
    return vanish_key + vanish_supp - alpha * complementary


def make_critics(dim_y: int, channels: int, hidden: int = 64, seed: int = 0,
                 dtype=np.float32) -> dict[str, Critic]:
    dims = {
        "i_y_zt": (dim_y, channels), "i_y_zsupp": (dim_y, channels),
        "i_y_ztilde": (dim_y, channels), "i_zt_ztilde": (channels, channels),
        "i_zsupp_ztilde": (channels, channels),
    }
    return {name: Critic(*dims[name], hidden=hidden, rng=np.random.default_rng([seed, 50 + i]), dtype=dtype)
            for i, name in enumerate(TERM_NAMES)}


def _term_inputs(y_emb, z_t, z_supp, z_tilde):
    supp = list(z_supp.values()) if isinstance(z_supp, dict) else (
        list(z_supp) if isinstance(z_supp, (list, tuple)) else [z_supp])
    return {
        "i_y_zt": [(y_emb, z_t)],
        "i_y_zsupp": [(y_emb, z) for z in supp],
        "i_y_ztilde": [(y_emb, z_tilde)],
        "i_zt_ztilde": [(z_t, z_tilde)],
        "i_zsupp_ztilde": [(z, z_tilde) for z in supp],
    }


def mi_loss(y_emb, z_t, z_supp, z_tilde, critics: dict, alpha: float = 1.0):
    """Estimate the five MI terms and assemble ``L_MI``.

    ``z_supp`` is one tensor or a mapping/list of them (one per supporting
    offset); the two supporting-frame terms are averaged over offsets.
    Returns ``(L_MI tensor, terms)`` where ``terms`` maps names to scalar
    tensors; gradients reach both critics and features.
    """
    missing = [n for n in TERM_NAMES if n not in critics]
    if missing:
        raise KeyError(f"missing critics for {missing}")
    terms = {}
    for name, pairs in _term_inputs(y_emb, z_t, z_supp, z_tilde).items():
        if not pairs:
            raise ValueError(f"{name}: no supporting features")
        est = [estimate_mi_contrastive(a, b, critics[name]) for a, b in pairs]
        total = est[0]
        for e in est[1:]:
            total = total + e
        terms[name] = T.scale(total, 1.0 / len(est)) if len(est) > 1 else total
    return assemble_mi_loss(terms, alpha), terms


def term_values(terms: dict) -> MITermSet:
    return MITermSet(**{k: float(v.item() if isinstance(v, Tensor) else v) for k, v in terms.items()})


# -- label embedding ---------------------------------------------------------

class LabelEmbedding:
    """Fixed random projection of ground-truth heatmaps ``[B,J,h,w] -> [B,D]``.

    Implemented as a strided convolution whose kernel and stride span the
    whole map, with zero bias. Its weights are never trained.
    """

    def __init__(self, n_joints: int, h: int, w: int, dim: int = 32, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 99])
        self.kernel = Tensor(rng.standard_normal((dim, n_joints, h, w)) / np.sqrt(n_joints * h * w),
                             dtype=dtype)
        self.dim = dim

    def __call__(self, heatmaps) -> Tensor:
        hm = Tensor(np.asarray(heatmaps.data if isinstance(heatmaps, Tensor) else heatmaps,
                               dtype=self.kernel.dtype))
        squeeze = hm.ndim == 3
        if squeeze:
            hm = T.reshape(hm, (1,) + hm.shape)
        h, w = self.kernel.shape[-2:]
        out = T.conv2d(hm, self.kernel, stride=(h, w), padding=0)
        out = T.reshape(out, (out.shape[0], self.dim))
        return T.reshape(out, (self.dim,)) if squeeze else out


def embed_label(heatmaps, embedding: LabelEmbedding) -> Tensor:
    return embedding(heatmaps)
