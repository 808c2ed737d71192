"""Optimizer, training loop, evaluation and the ablation runner."""
from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .alignment import ModelConfig, PoseModel, config_hash, load_checkpoint, save_checkpoint
from .heatmaps import decode_heatmap, heatmap_loss, pck_report, render_batch, to_image_coords, total_loss
from .mi import TERM_NAMES, LabelEmbedding, make_critics, mi_loss
from .synth import Dataset, SynthConfig, batch_arrays, gen_dataset, pixel_affine_to_theta
from .tensor import Tensor, backward, no_grad

__all__ = [
    "VARIANTS", "WINDOWS", "TrainConfig", "AdamState", "adam_step", "MetricsRow", "MetricsLogger",
    "TrainResult", "TrainingAborted", "train", "evaluate", "evaluate_model", "ablate",
    "dataset_hash", "METRICS_HEADER",
]

VARIANTS = ("baseline", "gtm", "gtm+lcm", "full")
WINDOWS = ((-1,), (-1, 1), (-2, -1, 1), (-2, -1, 1, 2))
METRICS_HEADER = ("step", "epoch", "l_h", *TERM_NAMES, "l_mi", "l_total", "val_pck", "secs")


@dataclass
class TrainConfig:
    variant: str = "full"
    window: tuple = (-2, -1, 1, 2)
    alpha: float = 1.0
    beta: float = 0.1
    lr: float = 1e-3
    critic_lr: float = 1e-3
    epochs: int = 15
    pretrain_epochs: int = 0
    gtm_warmup_steps: int = 400
    align_weight: float = 1.0
    batch: int = 16
    seed: int = 0
    data_seed: int = 1000
    n_clips: int = 375
    sigma: float = 1.5
    label_dim: int = 32
    critic_hidden: int = 64
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    out_dir: str | None = None
    record_time: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.epochs < 1 or self.batch < 2:
            raise ValueError("need epochs >= 1 and batch >= 2 (the MI bound needs two samples)")
        missing = [d for d in self.window if d not in self.synth.window]
        if missing:
            raise ValueError(f"window offsets {missing} are not generated by the data config")
        if not np.isfinite(self.beta) or not np.isfinite(self.alpha):
            raise ValueError("alpha and beta must be finite")
        self.synth.validate()
        return self

    def resolved(self) -> TrainConfig:
        """Apply the variant's gating to window, beta and the alignment modules."""
        self.validate()
        window, beta = tuple(self.window), self.beta
        gtm = lcm = True
        if self.variant == "baseline":
            window, beta, gtm, lcm = (), 0.0, False, False
        elif self.variant == "gtm":
            beta, lcm = 0.0, False
        elif self.variant == "gtm+lcm":
            beta = 0.0
        model = replace(self.model, use_gtm=gtm, use_lcm=lcm, n_joints=self.synth.n_joints)
        return replace(self, window=window, beta=beta, model=model)

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("synth", "model")}
        d["window"] = list(self.window)
        d["synth"] = self.synth.to_json()
        d["model"] = self.model.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> TrainConfig:
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        synth = SynthConfig.from_json(d.pop("synth", {}))
        mfields = set(ModelConfig.__dataclass_fields__)
        mdict = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("model", {}).items() if k in mfields}
        if "window" in d:
            d["window"] = tuple(d["window"])
        return cls(synth=synth, model=ModelConfig(**mdict), **d)


def dataset_hash(cfg: TrainConfig) -> str:
    return config_hash({"synth": cfg.synth.to_json(), "n_clips": cfg.n_clips, "data_seed": cfg.data_seed})


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on each parameter's data.

    ``params`` maps names to tensors (or arrays), ``grads`` to arrays of the
    same shapes. Returns ``state`` (also updated in place).
    """
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name}")
        if np.shape(grads[name]) != data.shape:
            raise T.ShapeError(f"adam_step: {name} has shape {data.shape}, gradient {np.shape(grads[name])}")
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else p
        g = np.asarray(grads[name], dtype=data.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(data.dtype)
    return state


# -- metrics -----------------------------------------------------------------

@dataclass
class MetricsRow:
    step: int
    epoch: int
    l_h: float
    terms: dict | None
    l_mi: float
    l_total: float
    beta: float
    val_pck: float | None = None
    per_joint_pck: list | None = None
    secs: float | None = None

    def check(self, tol: float = 1e-6):
        expect = self.l_h + self.beta * self.l_mi
        if abs(self.l_total - expect) > tol * max(1.0, abs(expect)):
            raise AssertionError(f"step {self.step}: l_total={self.l_total!r} != l_h + beta*l_mi = {expect!r}")

    def cells(self) -> list:
        def fmt(v):
            return "" if v is None else repr(float(v))
        terms = [fmt(self.terms[n]) if self.terms else "" for n in TERM_NAMES]
        return [str(self.step), str(self.epoch), fmt(self.l_h), *terms, fmt(self.l_mi),
                fmt(self.l_total), fmt(self.val_pck), fmt(self.secs)]


class MetricsLogger:
    """Append-only metrics CSV with the fixed header; checks the loss identity on every row."""

    def __init__(self, path=None):
        self.path = path
        self.rows: list[MetricsRow] = []
        if path:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    def log(self, row: MetricsRow):
        row.check()
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row.cells())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()


# -- training ----------------------------------------------------------------

class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    best_val_pck: float
    final_val_pck: float
    best_epoch: int
    history: list
    metrics: MetricsLogger
    model: PoseModel
    config: TrainConfig
    checkpoint: str | None = None


def _targets(clips, cfg: TrainConfig):
    h, w = cfg.synth.height // 4, cfg.synth.width // 4
    tgt = render_batch([c.key_ann for c in clips], h, w, cfg.sigma, 4)
    vis = np.stack([c.key_ann.visible for c in clips])
    return tgt, vis


def _pooled(x: Tensor) -> Tensor:
    return T.global_avg_pool(x) if x.ndim == 4 else x


def _detached(x: Tensor) -> Tensor:
    return Tensor(x.data)


def evaluate_model(model: PoseModel, clips, window, batch: int = 32, thresholds=(0.05, 0.1, 0.2)) -> dict:
    """PCK report of ``model`` on ``clips`` (predictions decoded to image pixels)."""
    preds, gts, vis = [], [], []
    with no_grad():
        for i in range(0, len(clips), batch):
            chunk = clips[i:i + batch]
            key, supp = batch_arrays(chunk, window)
            hm, _, _ = model(key, supp, window)
            preds.append(to_image_coords(decode_heatmap(hm.data), 4))
            gts.append(np.stack([c.key_ann.joints for c in chunk]))
            vis.append(np.stack([c.key_ann.visible for c in chunk]))
    return pck_report(np.concatenate(preds), np.concatenate(gts), np.concatenate(vis), thresholds)


def _checkpoint_meta(cfg: TrainConfig, **extra) -> dict:
    return {"config": cfg.to_json(), "config_hash": config_hash(cfg.to_json()),
            "dataset_hash": dataset_hash(cfg), "seed": cfg.seed, **extra}


def train(config: TrainConfig, dataset: Dataset | None = None, graph_probe=None) -> TrainResult:
    """Train one model; writes metrics, checkpoints and resolved config into ``out_dir`` if set.

    Per step the model takes one Adam step on ``L_H + beta * L_MI`` (the MI
    part only for the full variant with beta > 0), then the five critics take
    one Adam step maximizing their bounds on detached features of the same
    batch. ``graph_probe``, if given, is a :class:`tensor.Graph` that records
    every primitive applied during training.
    """
    cfg = config.resolved()
    out = cfg.out_dir
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.json"), "w") as fh:
            json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
    if dataset is None:
        dataset = gen_dataset(cfg.synth, cfg.n_clips, cfg.data_seed)
    train_clips, val_clips = dataset.split("train"), dataset.split("val")
    model = PoseModel(cfg.model, seed=cfg.seed)
    if cfg.pretrain_epochs:
        model.load_state_dict({**model.state_dict(), **pretrain_single_frame(cfg, dataset)})
    if cfg.gtm_warmup_steps and cfg.model.use_gtm and cfg.window:
        warm_start_gtm(model, cfg, train_clips)
    params = model.trainable()
    opt = AdamState()
    use_mi = cfg.variant == "full"
    h, w = cfg.synth.height // 4, cfg.synth.width // 4
    if use_mi:
        critics = make_critics(cfg.label_dim, cfg.model.channels, cfg.critic_hidden, seed=cfg.seed,
                               dtype=model.dtype)
        critic_params = {f"{n}.{k}": v for n, c in critics.items() for k, v in c.parameters().items()}
        critic_opt = AdamState()
        embed = LabelEmbedding(cfg.synth.n_joints, h, w, cfg.label_dim, seed=cfg.data_seed, dtype=model.dtype)
    logger = MetricsLogger(os.path.join(out, "metrics.csv") if out else None)
    order_rng = np.random.default_rng([cfg.seed, 11])
    timings = []
    best, best_epoch, history, step = -1.0, -1, [], 0
    ckpt_path = os.path.join(out, "best.ckpt") if out else None
    best_state = None
    ctx = graph_probe if graph_probe is not None else _Null()
    with ctx:
        for epoch in range(cfg.epochs):
            perm = order_rng.permutation(len(train_clips))
            n_batches = len(perm) // cfg.batch
            for bi in range(n_batches):
                t0 = time.perf_counter()
                idx = perm[bi * cfg.batch:(bi + 1) * cfg.batch]
                clips = [train_clips[i] for i in idx]
                key, supp = batch_arrays(clips, cfg.window)
                tgt, vis = _targets(clips, cfg)
                try:
                    hm, z_tilde, feats = model(key, supp, cfg.window)
                    l_h = heatmap_loss(hm, tgt, vis)
                    terms = None
                    l_mi_val = 0.0
                    if use_mi:
                        y = embed(tgt)
                        pooled = (_pooled(feats.z_t), {d: _pooled(z) for d, z in feats.z_supp.items()},
                                  _pooled(z_tilde))
                        if cfg.beta != 0.0:
                            l_mi, _ = mi_loss(y, *pooled, critics, cfg.alpha)
                            loss = total_loss(l_h, l_mi, cfg.beta)
                        else:
                            loss = l_h
                    else:
                        loss = l_h
                    if cfg.align_weight and feats.thetas:
                        loss = loss + T.scale(_align_loss(feats.thetas, clips, cfg), cfg.align_weight)
                    grads = backward(loss, params)
                except T.NonFiniteError as exc:
                    _abort(out, model, cfg, step, epoch, clips, exc)
                for g in grads.values():
                    if not np.all(np.isfinite(g)):
                        _abort(out, model, cfg, step, epoch, clips, "non-finite gradient")
                adam_step(params, grads, opt, cfg.lr)
                if use_mi:
                    # critics see detached features; their bound is recomputed so the
                    # logged terms are exactly those that entered the critic step
                    det = (_detached(pooled[0]), {d: _detached(z) for d, z in pooled[1].items()},
                           _detached(pooled[2]))
                    l_mi_c, term_t = mi_loss(y, *det, critics, cfg.alpha)
                    obj = term_t[TERM_NAMES[0]]
                    for n in TERM_NAMES[1:]:
                        obj = obj + term_t[n]
                    cgrads = backward(T.scale(obj, -1.0), critic_params)
                    adam_step(critic_params, cgrads, critic_opt, cfg.critic_lr)
                    terms = {n: float(term_t[n].item()) for n in TERM_NAMES}
                    l_mi_val = float(l_mi_c.item())
                l_h_val = float(l_h.item())
                l_total_val = float(total_loss(l_h_val, l_mi_val, cfg.beta))
                secs = time.perf_counter() - t0
                timings.append(secs)
                last = bi == n_batches - 1
                val = None
                per_joint = None
                if last:
                    rep = evaluate_model(model, val_clips, cfg.window)
                    r = rep["results"]["0.1"]
                    val, per_joint = r["mean_pck"], r["per_joint_pck"]
                    history.append(val)
                    if val > best:
                        best, best_epoch = val, epoch
                        best_state = model.state_dict()
                        if ckpt_path:
                            save_checkpoint(ckpt_path, model.parameters(),
                                            _checkpoint_meta(cfg, epoch=epoch, val_pck=val))
                logger.log(MetricsRow(step, epoch, l_h_val, terms, l_mi_val, l_total_val, cfg.beta,
                                      val, per_joint, secs if cfg.record_time else None))
                step += 1
    if out:
        save_checkpoint(os.path.join(out, "last.ckpt"), model.parameters(),
                        _checkpoint_meta(cfg, epoch=cfg.epochs - 1, val_pck=history[-1]))
        with open(os.path.join(out, "timing.json"), "w") as fh:
            json.dump({"steps": len(timings), "total_secs": float(np.sum(timings)),
                       "mean_step_secs": float(np.mean(timings))}, fh, indent=2)
        with open(os.path.join(out, "summary.json"), "w") as fh:
            json.dump({"best_val_pck": best, "best_epoch": best_epoch, "final_val_pck": history[-1],
                       "history": history, "variant": cfg.variant, "window": list(cfg.window),
                       "seed": cfg.seed}, fh, indent=2)
    final = history[-1]
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(best, final, best_epoch, history, logger, model, cfg, ckpt_path)


_PRETRAIN_CACHE: dict = {}


def pretrain_single_frame(cfg: TrainConfig, dataset: Dataset) -> dict:
    """Backbone and head weights after ``pretrain_epochs`` of key-frame-only training.

    Stands in for a backbone pretrained on still images: every variant
    starts from the same single-frame detector for a given seed. Results are
    memoized per (seed, data, schedule) within the process.
    """
    key = (cfg.seed, dataset_hash(cfg), cfg.pretrain_epochs, cfg.batch, cfg.lr, cfg.sigma,
           config_hash(replace(cfg.model, use_gtm=False, use_lcm=False).to_json()))
    if key in _PRETRAIN_CACHE:
        return {k: v.copy() for k, v in _PRETRAIN_CACHE[key].items()}
    model = PoseModel(replace(cfg.model, use_gtm=False, use_lcm=False), seed=cfg.seed)
    params = model.trainable()
    opt = AdamState()
    clips = dataset.split("train")
    rng = np.random.default_rng([cfg.seed, 12])
    for _ in range(cfg.pretrain_epochs):
        perm = rng.permutation(len(clips))
        for bi in range(len(perm) // cfg.batch):
            chunk = [clips[i] for i in perm[bi * cfg.batch:(bi + 1) * cfg.batch]]
            key_img, _ = batch_arrays(chunk, ())
            tgt, vis = _targets(chunk, cfg)
            hm, _, _ = model(key_img, {}, ())
            adam_step(params, backward(heatmap_loss(hm, tgt, vis), params), opt, cfg.lr)
    state = {k: v for k, v in model.state_dict().items() if k.startswith(("backbone.", "head."))}
    _PRETRAIN_CACHE[key] = state
    return {k: v.copy() for k, v in state.items()}


def _align_loss(thetas: dict, clips, cfg: TrainConfig) -> Tensor:
    """Mean squared error between predicted and ground-truth sampling thetas."""
    h, w = cfg.synth.height, cfg.synth.width
    total = None
    for d in sorted(thetas):
        th = thetas[d]
        gt = np.stack([pixel_affine_to_theta(c.spec.global_affine[d], h, w) for c in clips]).astype(th.dtype)
        diff = th - Tensor(gt)
        term = T.mean(T.mul(diff, diff))
        total = term if total is None else total + term
    return T.scale(total, 1.0 / len(thetas))


def warm_start_gtm(model: PoseModel, cfg: TrainConfig, clips, log=None) -> list[float]:
    """Regress the GTM onto the generator's inter-frame affine, backbone frozen.

    Each step draws ``batch`` clips and every offset in the window; the
    target is the sampling theta that undoes the clip's known motion. Only
    GTM parameters move. Returns the loss trace.
    """
    window = tuple(cfg.window)
    key, supp = batch_arrays(clips, window)
    h, w = cfg.synth.height, cfg.synth.width
    with no_grad():
        z_key = model.extract_features(Tensor(key, dtype=model.dtype)).data
        z_supp = {d: model.extract_features(Tensor(supp[d], dtype=model.dtype)).data for d in window}
    target = {d: np.stack([pixel_affine_to_theta(c.spec.global_affine[d], h, w) for c in clips]).astype(model.dtype)
              for d in window}
    params = model.gtm.parameters()
    opt = AdamState()
    rng = np.random.default_rng([cfg.seed, 13])
    trace = []
    for step in range(cfg.gtm_warmup_steps):
        idx = rng.choice(len(clips), size=min(cfg.batch, len(clips)), replace=False)
        zk = np.concatenate([z_key[idx]] * len(window))
        zs = np.concatenate([z_supp[d][idx] for d in window])
        tgt = np.concatenate([target[d][idx] for d in window])
        diff = model.gtm(Tensor(zk), Tensor(zs)) - Tensor(tgt)
        loss = T.mean(T.mul(diff, diff))
        adam_step(params, backward(loss, params), opt, cfg.lr)
        trace.append(float(loss.item()))
        if log and step % 100 == 0:
            log(f"gtm warm start step {step}: {trace[-1]:.5f}")
    return trace


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _abort(out, model, cfg, step, epoch, clips, reason):
    diag = {"step": step, "epoch": epoch, "clip_seeds": [c.seed for c in clips], "reason": str(reason)}
    if out:
        with open(os.path.join(out, "abort.json"), "w") as fh:
            json.dump(diag, fh, indent=2)
        save_checkpoint(os.path.join(out, "last_good.ckpt"), model.parameters(),
                        _checkpoint_meta(cfg, epoch=epoch, step=step))
    raise TrainingAborted(f"non-finite loss at step {step}: {reason}; batch clip seeds {diag['clip_seeds']}")


# -- evaluation --------------------------------------------------------------

def load_model(path) -> tuple[PoseModel, TrainConfig, dict]:
    params, manifest = load_checkpoint(path)
    cfg = TrainConfig.from_json(manifest["config"])
    model = PoseModel(cfg.model, seed=cfg.seed)
    model.load_state_dict(params)
    return model, cfg, manifest


def evaluate(checkpoint, dataset: Dataset | None = None, split: str = "val",
             data_config: TrainConfig | None = None) -> dict:
    """Report PCK at 0.05/0.1/0.2 of a checkpoint on a dataset split.

    The dataset is identified by ``data_config`` (defaults to the
    checkpoint's own); its hash must equal the one stored in the checkpoint.
    """
    model, cfg, manifest = load_model(checkpoint)
    dcfg = data_config or cfg
    if dataset_hash(dcfg) != manifest["dataset_hash"]:
        raise ValueError(f"dataset hash {dataset_hash(dcfg)} does not match checkpoint "
                         f"{manifest['dataset_hash']}")
    if dataset is None:
        dataset = gen_dataset(dcfg.synth, dcfg.n_clips, dcfg.data_seed)
    report = evaluate_model(model, dataset.split(split), cfg.window)
    report.update({"split": split, "variant": cfg.variant, "window": list(cfg.window),
                   "checkpoint_epoch": manifest.get("epoch"), "dataset_hash": manifest["dataset_hash"]})
    return report


# -- ablation ----------------------------------------------------------------

ABLATION_HEADER = ("table", "cell", "seed", "variant", "window", "val_pck", "status")


def _fmt_window(window) -> str:
    return "{" + ",".join(f"{d:+d}" for d in window) + "}"


def ablation_cells(base: TrainConfig, seeds) -> list[tuple[str, str, TrainConfig]]:
    cells = []
    for v in VARIANTS:
        for s in sorted(seeds):
            cells.append(("components", v, replace(base, variant=v, window=(-2, -1, 1, 2), seed=s)))
    for win in WINDOWS:
        for s in sorted(seeds):
            cells.append(("window", _fmt_window(win), replace(base, variant="full", window=win, seed=s)))
    return cells


def ablate(base: TrainConfig, seeds, out_dir=None, dataset: Dataset | None = None, log=None) -> list[dict]:
    """Run the component and window ablations; return one row per (cell, seed).

    Identical configurations are trained once (the full model with the
    four-frame window appears in both tables). A run that aborts is recorded
    with status ``failed`` and the grid continues.
    """
    seeds = sorted(set(int(s) for s in seeds))
    if len(seeds) < 3:
        raise ValueError("ablation needs at least 3 seeds")
    if dataset is None:
        dataset = gen_dataset(base.synth, base.n_clips, base.data_seed)
    done: dict[str, tuple[float, str]] = {}
    rows = []
    for table, cell, cfg in ablation_cells(base, seeds):
        key = config_hash(replace(cfg, out_dir=None).resolved().to_json())
        if key not in done:
            run_dir = None
            if out_dir:
                run_dir = os.path.join(out_dir, "runs", f"{cfg.variant}_{_fmt_window(cfg.window)}_s{cfg.seed}")
            t0 = time.perf_counter()
            try:
                res = train(replace(cfg, out_dir=run_dir), dataset)
                done[key] = (res.best_val_pck, "ok")
            except (TrainingAborted, T.NonFiniteError) as exc:
                done[key] = (float("nan"), "failed")
                if log:
                    log(f"run {table}/{cell}/seed {cfg.seed} failed: {exc}")
            if log:
                log(f"{table:10s} {cell:14s} seed={cfg.seed} pck={done[key][0]:.4f} "
                    f"({time.perf_counter() - t0:.0f}s)")
        pck_val, status = done[key]
        rows.append({"table": table, "cell": cell, "seed": cfg.seed, "variant": cfg.variant,
                     "window": _fmt_window(cfg.window), "val_pck": pck_val, "status": status})
    if out_dir:
        write_ablation(rows, out_dir)
    return rows


def summarize(rows) -> list[dict]:
    out = []
    seen = []
    for r in rows:
        if (r["table"], r["cell"]) not in seen:
            seen.append((r["table"], r["cell"]))
    for table, cell in seen:
        vals = np.array([r["val_pck"] for r in rows if r["table"] == table and r["cell"] == cell
                         and r["status"] == "ok"])
        n_failed = sum(1 for r in rows if r["table"] == table and r["cell"] == cell and r["status"] != "ok")
        out.append({"table": table, "cell": cell, "n": len(vals), "failed": n_failed,
                    "mean": float(vals.mean()) if len(vals) else float("nan"),
                    "std": float(vals.std(ddof=1)) if len(vals) > 1 else float("nan")})
    return out


def write_ablation(rows, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r["table"], r["cell"], r["seed"], r["variant"], r["window"],
                        repr(float(r["val_pck"])), r["status"]])
    with open(os.path.join(out_dir, "ablation_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("table", "cell", "n", "failed", "mean_val_pck", "std_val_pck", "mean_pm_std"))
        for s in summarize(rows):
            w.writerow([s["table"], s["cell"], s["n"], s["failed"], f"{s['mean']:.4f}", f"{s['std']:.4f}",
                        f"{s['mean']:.4f}±{s['std']:.4f}"])


def read_ablation(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["val_pck"] = float(r["val_pck"])
    return rows
