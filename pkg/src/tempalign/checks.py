"""Gradient and exact-identity suites, the Gaussian MI benchmark and the
alignment-recovery benchmark.

Shared by the ``gradcheck`` / ``mi-bench`` commands and the test-suite.
Every gradient check runs in float64 against central differences with
step 1e-5 over at least ten random instances.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .alignment import ModelConfig, PoseModel, global_transform
from .gradcheck import gradcheck
from .heatmaps import DetectionHead, heatmap_loss
from .mi import Critic, decomposition_residual, estimate_mi_contrastive, gaussian_mi
from .nn import Module
from .tensor import Tensor
from .warp import affine_grid, grid_sample, modulated_deform_conv, normalized_lattice

SMOOTH_TOL = 1e-6
WARP_TOL = 1e-4
N_INSTANCES = 10


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name:38s} {self.value:.3e} (tol {self.tol:.0e}) {self.detail}"


def _instances(name, fn, sampler, tol, n=N_INSTANCES, seed=0, **kw) -> CheckResult:
    worst, attempts = 0.0, 0
    for i in range(n):
        rep = gradcheck(fn, sampler=sampler, tol=tol, seed=seed * 1000 + i, **kw)
        worst = max(worst, rep.max_rel_err)
        attempts += rep.attempts
    return CheckResult(name, worst, tol, worst < tol, f"{n} instances, {attempts} draws")


# -- primitives --------------------------------------------------------------

def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _away_from_zero(rng, *shape, gap=0.1):
    x = rng.uniform(gap, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda a, b: T.add(a, b), lambda r: [_u(r, 3, 4), _u(r, 3, 4)]),
    "sub": (lambda a, b: T.sub(a, b), lambda r: [_u(r, 3, 4), _u(r, 3, 4)]),
    "mul": (lambda a, b: T.mul(a, b), lambda r: [_u(r, 3, 4), _u(r, 3, 4)]),
    "scalar_mul": (lambda a: T.scale(a, -1.7), lambda r: [_u(r, 5)]),
    "matmul": (lambda a, b: T.matmul(a, b), lambda r: [_u(r, 3, 4), _u(r, 4, 2)]),
    "bias_add": (lambda x, b: T.bias_add(x, b), lambda r: [_u(r, 2, 3, 2, 2), _u(r, 3)]),
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, 1, 1), lambda r: [_u(r, 1, 2, 5, 5), _u(r, 3, 2, 3, 3), _u(r, 3)]),
    "conv2d_stride2": (lambda x, w: T.conv2d(x, w, None, 2, 1), lambda r: [_u(r, 2, 2, 6, 5), _u(r, 2, 2, 3, 3)]),
    "relu": (lambda x: T.relu(x), lambda r: [_away_from_zero(r, 16)]),
    "sigmoid": (lambda x: T.sigmoid(x), lambda r: [_u(r, 16)]),
    "tanh": (lambda x: T.tanh(x), lambda r: [_u(r, 16)]),
    "exp": (lambda x: T.exp(x), lambda r: [_u(r, 8)]),
    "log": (lambda x: T.log(x), lambda r: [_u(r, 8, lo=0.5, hi=3.0)]),
    "sum": (lambda x: T.sum(x, axis=1), lambda r: [_u(r, 3, 4, 2)]),
    "mean": (lambda x: T.mean(x), lambda r: [_u(r, 3, 4)]),
    "log_softmax": (lambda x: T.log_softmax(x, axis=1), lambda r: [_u(r, 4, 5)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), lambda r: [_u(r, 2, 3, 2, 2), _u(r, 2, 1, 2, 2)]),
    "global_avg_pool": (lambda x: T.global_avg_pool(x), lambda r: [_u(r, 2, 3, 4, 3)]),
    "blur_pool": (lambda x: T.blur_pool(x), lambda r: [_u(r, 2, 2, 4, 6)]),
    "reshape": (lambda x: T.reshape(x, (6, 2)), lambda r: [_u(r, 3, 4)]),
    "slice": (lambda x: T.getitem(x, (slice(1, 3), slice(None, None, 2))), lambda r: [_u(r, 4, 5)]),
    "composite5": (
        lambda x, w, v: T.mean(T.mul(T.tanh(T.matmul(x, w)), T.sigmoid(v))),
        lambda r: [_u(r, 3, 4), _u(r, 4, 2), _u(r, 3, 2)],
    ),
}


def primitive_checks() -> list[CheckResult]:
    return [_instances(f"primitive/{name}", fn, sampler, SMOOTH_TOL)
            for name, (fn, sampler) in PRIMITIVES.items()]


# -- warp kernels ------------------------------------------------------------

def _guarded(v, gap=0.05):
    frac = v - np.floor(v)
    return np.all((frac >= gap) & (frac <= 1 - gap))


def _grid_pixels(grid, h, w):
    return ((grid[..., 0] + 1) * w - 1) / 2, ((grid[..., 1] + 1) * h - 1) / 2


def _theta_sampler(h, w, out_h, out_w, c=2):
    def sample(rng):
        while True:
            theta = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]) + rng.uniform(-0.3, 0.3, (2, 3))
            grid = (normalized_lattice(out_h, out_w) @ theta.T).reshape(out_h, out_w, 2)
            px, py = _grid_pixels(grid, h, w)
            if _guarded(px) and _guarded(py):
                return [rng.standard_normal((1, c, h, w)), theta[None]]
    return sample


def _grid_sampler(h, w, out_h, out_w, c=2):
    def sample(rng):
        px = rng.integers(-1, w, (1, out_h, out_w)) + rng.uniform(0.05, 0.95, (1, out_h, out_w))
        py = rng.integers(-1, h, (1, out_h, out_w)) + rng.uniform(0.05, 0.95, (1, out_h, out_w))
        grid = np.stack([(2 * px + 1) / w - 1, (2 * py + 1) / h - 1], axis=-1)
        return [rng.standard_normal((1, c, h, w)), grid]
    return sample


def _deform_sampler(n=1, c=2, o=2, h=4, w=4, k=3):
    def sample(rng):
        kk = k * k
        off = rng.integers(-1, 1, (n, 2 * kk, h, w)) + rng.uniform(0.05, 0.95, (n, 2 * kk, h, w))
        return [rng.standard_normal((n, c, h, w)), off, rng.uniform(0.05, 0.95, (n, kk, h, w)),
                rng.standard_normal((o, c, k, k)), rng.standard_normal(o)]
    return sample


def warp_checks() -> list[CheckResult]:
    return [
        _instances("warp/affine_grid+grid_sample (theta, feature)",
                   lambda f, th: grid_sample(f, affine_grid(th, 3, 3)), _theta_sampler(4, 5, 3, 3), WARP_TOL),
        _instances("warp/grid_sample (feature, grid)", grid_sample, _grid_sampler(4, 5, 3, 4), WARP_TOL),
        _instances("warp/modulated_deform_conv (x,O,M,W,b)", modulated_deform_conv, _deform_sampler(), WARP_TOL),
    ]


# -- network pieces ----------------------------------------------------------

def _bind(module: Module, path: str, value: Tensor) -> None:
    parts = path.split(".")
    obj = module
    for p in parts[:-1]:
        obj = obj[int(p)] if p.isdigit() else getattr(obj, p)
    setattr(obj, parts[-1], value)


def _param_fn(module: Module, names, body):
    """Wrap ``body(module, *extra)`` as a function of the named parameters."""
    def fn(*tensors):
        k = len(names)
        for name, t in zip(names, tensors[:k]):
            _bind(module, name, t)
        return body(*tensors[k:])
    return fn


def head_check() -> CheckResult:
    head = DetectionHead(3, 2, n_layers=3, rng=np.random.default_rng(0), dtype=np.float64)
    names = sorted(head.parameters())
    shapes = [head.parameters()[n].shape for n in names]

    def sample(rng):
        return [rng.standard_normal(s) * 0.5 for s in shapes] + [rng.standard_normal((1, 3, 4, 3))]
    return _instances("head/detection_head weights", _param_fn(head, names, lambda z: head(z)), sample, WARP_TOL)


def critic_check() -> CheckResult:
    critic = Critic(3, 2, hidden=6, rng=np.random.default_rng(0), dtype=np.float64)
    names = sorted(critic.parameters())
    shapes = [critic.parameters()[n].shape for n in names]

    def sample(rng):
        return [rng.standard_normal(s) for s in shapes] + [rng.standard_normal((5, 3)), rng.standard_normal((5, 2))]
    fn = _param_fn(critic, names, lambda a, b: estimate_mi_contrastive(a, b, critic))
    return _instances("critic/contrastive bound (params, inputs)", fn, sample, WARP_TOL)


MICRO = ModelConfig(channels=3, backbone_widths=(3, 3, 3), gtm_hidden=3, lcm_blocks=1, kernel=3,
                    n_joints=2, head_layers=2, dtype="float64")


def end_to_end_check(max_entries: int = 4) -> CheckResult:
    """Heatmap loss of a one-sample micro model w.r.t. every trainable tensor.

    Parameters are redrawn for each instance (away from the identity and
    zero initializations, which sit exactly on bilinear kinks), and each
    tensor is probed at up to ``max_entries`` random coordinates.
    """
    model = PoseModel(MICRO, seed=0)
    params = model.trainable()
    names = sorted(params)
    shapes = [params[n].shape for n in names]
    window = (-1, 1)
    img_rng = np.random.default_rng(5)
    key = img_rng.uniform(0, 1, (1, 3, 8, 8))
    supports = {d: img_rng.uniform(0, 1, (1, 3, 8, 8)) for d in window}
    target = img_rng.uniform(0, 1, (1, 2, 2, 2))
    vis = np.ones((1, 2), dtype=bool)

    def sample(rng):
        out = []
        for n, s in zip(names, shapes):
            v = rng.standard_normal(s) * 0.5
            if n == "gtm.fc.bias":
                v = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]) + rng.uniform(-0.2, 0.2, 6)
            out.append(v)
        return out

    def body():
        hm, _, _ = model(key, supports, window)
        return heatmap_loss(hm, target, vis)
    return _instances("end_to_end/micro pose model (all params)", _param_fn(model, names, body), sample,
                      WARP_TOL, max_entries=max_entries)


# -- exact identities --------------------------------------------------------

def identity_checks() -> list[CheckResult]:
    rng = np.random.default_rng(0)
    out = []
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    zero_off = np.zeros((2, 18, 6, 5))
    ones = np.ones((2, 9, 6, 5))
    dc = modulated_deform_conv(Tensor(x), Tensor(zero_off), Tensor(ones), Tensor(w), Tensor(b)).data
    ref = T.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    err = float(np.abs(dc - ref).max())
    out.append(CheckResult("identity/deform_conv(O=0,M=1)==conv2d f64", err, 1e-12, err < 1e-12))
    f = rng.standard_normal((2, 4, 7, 9)).astype(np.float32)
    eye = np.tile(np.array([[[1, 0, 0], [0, 1, 0]]], dtype=np.float32), (2, 1, 1))
    g = grid_sample(Tensor(f), affine_grid(Tensor(eye), 7, 9)).data
    err = float(np.abs(g - f).max())
    out.append(CheckResult("identity/grid_sample(identity) f32", err, 1e-6, err < 1e-6))
    worst = 0.0
    for _ in range(50):
        p = rng.uniform(0, 1, (4, 4, 4))
        worst = max(worst, decomposition_residual(p / p.sum()))
    out.append(CheckResult("identity/MI chain-rule residual (50x)", worst, 1e-12, worst < 1e-12))
    return out


def run_all(log=print, include_end_to_end: bool = True) -> tuple[bool, list[CheckResult]]:
    t0 = time.perf_counter()
    results = []
    groups = [primitive_checks, warp_checks, lambda: [head_check()], lambda: [critic_check()], identity_checks]
    if include_end_to_end:
        groups.insert(4, lambda: [end_to_end_check()])
    for group in groups:
        for r in group():
            results.append(r)
            if log:
                log(r.line())
    ok = all(r.passed for r in results)
    if log:
        log(f"{sum(r.passed for r in results)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return ok, results


# -- MI benchmark ------------------------------------------------------------

@dataclass
class BenchRow:
    rho: float
    estimate: float
    truth: float
    max_batch_estimate: float
    log_b: float
    low: float
    high: float

    @property
    def passed(self) -> bool:
        return self.low <= self.estimate <= self.high and self.max_batch_estimate <= self.log_b + 1e-6


def bench_bounds(rho: float, truth: float) -> tuple[float, float]:
    if rho == 0.0:
        return -0.02, 0.02
    return 0.6 * truth, truth + 0.05


def mi_bench(rhos=(0.0, 0.5, 0.9), batch: int = 512, steps: int = 2000, lr: float = 1e-3,
             eval_batches: int = 20, seed: int = 0, log=print) -> list[BenchRow]:
    """Train a critic on correlated Gaussian pairs and compare with the exact MI.

    The critic sees fresh batches each step; the reported estimate is the
    mean bound over ``eval_batches`` held-out batches after training.
    """
    from .train import AdamState, adam_step

    rows = []
    for rho in rhos:
        rng = np.random.default_rng([seed, int(round(rho * 1000))])
        critic = Critic(1, 1, hidden=64, rng=np.random.default_rng([seed, 7]), dtype=np.float32)
        params = critic.parameters()
        state = AdamState()
        s = np.sqrt(1 - rho ** 2)

        def draw():
            a = rng.standard_normal((batch, 1))
            b = rho * a + s * rng.standard_normal((batch, 1))
            return Tensor(a, dtype=np.float32), Tensor(b, dtype=np.float32)

        t0 = time.perf_counter()
        peak = -np.inf
        for _ in range(steps):
            a, b = draw()
            est = estimate_mi_contrastive(a, b, critic)
            peak = max(peak, float(est.item()))
            grads = T.backward(T.scale(est, -1.0), params)
            adam_step(params, grads, state, lr)
        vals = []
        with T.no_grad():
            for _ in range(eval_batches):
                vals.append(float(estimate_mi_contrastive(*draw(), critic).item()))
        peak = max(peak, max(vals))
        truth = gaussian_mi(rho)
        lo, hi = bench_bounds(rho, truth)
        row = BenchRow(rho, float(np.mean(vals)), truth, peak, float(np.log(batch)), lo, hi)
        rows.append(row)
        if log:
            log(f"rho={rho:.1f} estimate={row.estimate:.4f} I*={truth:.4f} range=[{lo:.4f},{hi:.4f}] "
                f"max={peak:.4f} logB={row.log_b:.4f} {'PASS' if row.passed else 'FAIL'} "
                f"({time.perf_counter() - t0:.0f}s)")
    return rows


# -- alignment recovery ------------------------------------------------------

@dataclass
class AlignRow:
    seed: int
    reduction: float
    oracle_reduction: float
    t_within: float  # fraction of held-out pairs with |theta13 error| < 0.1
    d_unaligned: float
    d_aligned: float

    @property
    def passed(self) -> bool:
        return self.reduction >= 0.5


def translation_pairs(n: int, seed: int, max_shift: float = 8.0, config=None):
    """Clean (key, support, theta) triples related by a pure translation.

    The shift is uniform in a disk of radius ``max_shift`` pixels; no jitter,
    blur, occluder, rotation or scaling.
    """
    from .synth import SynthConfig, gen_clip, pixel_affine_to_theta, translation_spec

    cfg = config or SynthConfig(jitter_std=0.0, blur_choices=(1,), occluder_prob=0.0)
    rng = np.random.default_rng([seed, 21])
    keys, supps, thetas = [], [], []
    for i in range(n):
        r = max_shift * np.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * np.pi)
        spec = translation_spec(r * np.cos(phi), r * np.sin(phi), window=(1,))
        clip = gen_clip(cfg, int(rng.integers(2 ** 31)), spec)
        keys.append(clip.key)
        supps.append(clip.supports[1])
        thetas.append(pixel_affine_to_theta(spec.global_affine[1], cfg.height, cfg.width))
    return np.stack(keys), np.stack(supps), np.stack(thetas).astype(np.float32)


def interior_mask(theta: np.ndarray, h: int, w: int, border: int = 2) -> np.ndarray:
    """``[N,1,h,w]`` mask of key positions that sit, and sample, at least
    ``border`` feature pixels away from the map edge.

    Features within that band of the edge are dominated by zero padding,
    which does not move with the image, so no warp can align them.
    """
    g = affine_grid(Tensor(theta), h, w).data
    px = ((g[..., 0] + 1) * w - 1) / 2
    py = ((g[..., 1] + 1) * h - 1) / 2
    m = (px >= border) & (px <= w - 1 - border) & (py >= border) & (py <= h - 1 - border)
    inner = np.zeros((h, w), bool)
    inner[border:h - border, border:w - border] = True
    return (m & inner)[:, None].astype(np.float32)


def alignment_bench(seeds=range(5), n_train: int = 400, n_val: int = 100, steps: int = 1000,
                    batch: int = 32, lr: float = 1e-3, border: int = 2, log=print) -> list[AlignRow]:
    """Train the global transformation regressor on translated pairs and
    measure how much it shrinks the key/support feature distance.

    Features come from a freshly initialised backbone (frozen); the
    regressor is fitted to the generating transform, then judged on held-out
    pairs by the mean masked L2 distance between the key feature and the
    warped support feature, relative to the unwarped one.
    """
    from .train import AdamState, adam_step

    rows = []
    for seed in seeds:
        t0 = time.perf_counter()
        model = PoseModel(ModelConfig(), seed=seed)
        k_tr, s_tr, th_tr = translation_pairs(n_train, 2 * seed)
        k_va, s_va, th_va = translation_pairs(n_val, 2 * seed + 1)
        with T.no_grad():
            feats = [model.extract_features(Tensor(x)).data for x in (k_tr, s_tr, k_va, s_va)]
        zk_tr, zs_tr, zk_va, zs_va = feats
        params = model.gtm.parameters()
        state = AdamState()
        rng = np.random.default_rng([seed, 23])
        for _ in range(steps):
            idx = rng.choice(n_train, batch, replace=False)
            diff = model.gtm(Tensor(zk_tr[idx]), Tensor(zs_tr[idx])) - Tensor(th_tr[idx])
            loss = T.mean(T.mul(diff, diff))
            adam_step(params, T.backward(loss, params), state, lr)
        with T.no_grad():
            th = model.gtm(Tensor(zk_va), Tensor(zs_va)).data
            mask = interior_mask(th_va, *zk_va.shape[-2:], border=border)

            def dist(z):
                return float(np.sqrt((((z - zk_va) * mask) ** 2).sum(axis=(1, 2, 3))).mean())

            d_un = dist(zs_va)
            d_al = dist(global_transform(Tensor(zs_va), Tensor(th)).data)
            d_or = dist(global_transform(Tensor(zs_va), Tensor(th_va)).data)
        row = AlignRow(seed, 1 - d_al / d_un, 1 - d_or / d_un,
                       float(np.mean(np.abs(th[:, :, 2] - th_va[:, :, 2]).max(axis=1) < 0.1)), d_un, d_al)
        rows.append(row)
        if log:
            log(f"seed={seed} reduction={row.reduction:.3f} (true transform {row.oracle_reduction:.3f}) "
                f"translation within 0.1: {row.t_within:.2f} {'PASS' if row.passed else 'FAIL'} "
                f"({time.perf_counter() - t0:.0f}s)")
    return rows
