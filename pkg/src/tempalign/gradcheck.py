"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

__all__ = ["GradcheckReport", "gradcheck"]


@dataclass
class GradcheckReport:
    """Outcome of one gradient check.

    ``max_rel_err`` normalizes each entry's discrepancy by
    ``max(|analytic|, |numeric|, 1e-3 * S)`` where ``S`` is the largest
    gradient magnitude over all inputs; the floor keeps entries whose true
    gradient is exactly zero from turning roundoff into huge ratios.
    """

    max_rel_err: float
    max_abs_err: float
    attempts: int = 1
    kinks: list = field(default_factory=list)
    passed: bool | None = None

    def __str__(self):
        status = {None: "", True: " PASS", False: " FAIL"}[self.passed]
        return (f"max_rel_err={self.max_rel_err:.3e} max_abs_err={self.max_abs_err:.3e} "
                f"attempts={self.attempts} kinks={len(self.kinks)}{status}")


def _check_once(fn, arrays, eps, rng, max_entries, kink_tol):
    inputs = [Tensor(a.copy(), requires_grad=True, name=f"in{i}") for i, a in enumerate(arrays)]
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)
    analytic = backward(out, {t.name: t for t in inputs}, grad_output=proj)

    def f(vals):
        with no_grad():
            return float(np.sum(fn(*[Tensor(v) for v in vals]).data * proj))

    kinks = []
    base = [a.copy() for a in arrays]
    f0 = f(base)
    per_input = []
    for i, arr in enumerate(arrays):
        ga = analytic[f"in{i}"].reshape(-1)
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        numeric = np.empty(len(flat_idx))
        jumps = np.empty(len(flat_idx))
        for n, j in enumerate(flat_idx):
            work = base[i].reshape(-1)
            orig = work[j]
            work[j] = orig + eps
            fp = f(base)
            work[j] = orig - eps
            fm = f(base)
            work[j] = orig
            numeric[n] = (fp - fm) / (2 * eps)
            jumps[n] = abs((fp - f0) - (f0 - fm)) / eps
        per_input.append((i, flat_idx, ga[flat_idx], numeric, jumps, np.max(np.abs(ga), initial=0.0)))
    scale = max(max(np.max(np.abs(n), initial=0.0), s) for _, _, _, n, _, s in per_input)
    floor = 1e-3 * scale if scale > 0 else 1.0
    max_rel = max_abs = 0.0
    for i, flat_idx, ga_sel, numeric, jumps, _ in per_input:
        diff = np.abs(ga_sel - numeric)
        rel = diff / np.maximum(np.maximum(np.abs(ga_sel), np.abs(numeric)), floor)
        max_abs = max(max_abs, float(diff.max(initial=0.0)))
        max_rel = max(max_rel, float(rel.max(initial=0.0)))
        for n in np.flatnonzero(jumps > kink_tol * max(scale, 1e-12)):
            kinks.append((i, int(flat_idx[n])))
    return max_rel, max_abs, kinks


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray] | None = None,
              eps: float = 1e-5, tol: float | None = None, seed: int = 0,
              sampler: Callable[[np.random.Generator], Sequence[np.ndarray]] | None = None,
              max_entries: int | None = None, kink_tol: float = 1e-2,
              max_resamples: int = 5) -> GradcheckReport:
    """Compare ``fn``'s reverse-mode gradients against central differences.

    ``fn`` maps float64 tensors to a tensor of any shape; the check is run on
    the scalar ``sum(fn(*inputs) * r)`` with a fixed random projection ``r``.
    If ``sampler`` is given, it draws fresh inputs; when a check fails at a
    point where the one-sided differences disagree (a kink such as relu at
    zero or a bilinear cell boundary) the inputs are resampled, at most
    ``max_resamples`` times.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if inputs is None and sampler is None:
        raise ValueError("need inputs or a sampler")
    rng = np.random.default_rng(seed)
    attempts = 0
    all_kinks = []
    while True:
        arrays = sampler(rng) if (sampler is not None and (inputs is None or attempts)) else inputs
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise ValueError("gradcheck inputs must be finite")
        attempts += 1
        max_rel, max_abs, kinks = _check_once(fn, arrays, eps, rng, max_entries, kink_tol)
        all_kinks.extend(kinks)
        passed = None if tol is None else max_rel < tol
        if passed is False and kinks and sampler is not None and attempts <= max_resamples:
            continue
        return GradcheckReport(max_rel, max_abs, attempts, all_kinks, passed)
