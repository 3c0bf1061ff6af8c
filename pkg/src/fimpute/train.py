"""Training objectives, schedules and loops for the local model, the gap model and fine-tuning."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import fim_gap as fg
from . import fim_local as fl
from .recnet import NetConfig, ParameterStore, config_dict
from .synthgen import GenerationRecord, fine_grid

logger = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "split", "loss_f_nll", "loss_euler", "loss_x0", "total"]


class TrainingError(RuntimeError):
    def __init__(self, msg, last_good: ParameterStore | None = None):
        super().__init__(msg)
        self.last_good = last_good


class Stage(str, Enum):
    LOCAL = "local"
    GAP = "gap"
    FINETUNE = "finetune"


@dataclass(frozen=True)
class Constant:
    lr: float


@dataclass(frozen=True)
class CosineAnneal:
    lr_hi: float
    lr_lo: float
    epochs: int


def lr_at(schedule, epoch: int) -> float:
    """Learning rate for ``epoch`` (0-based); cosine reaches ``lr_lo`` at the final epoch."""
    if isinstance(schedule, Constant):
        return schedule.lr
    if schedule.epochs <= 1:
        return schedule.lr_hi
    frac = min(epoch, schedule.epochs - 1) / (schedule.epochs - 1)
    return schedule.lr_lo + 0.5 * (schedule.lr_hi - schedule.lr_lo) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainConfig:
    stage: Stage = Stage.LOCAL
    schedule: object = field(default_factory=lambda: Constant(1e-3))
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 2000
    seed: int = 0
    clip_norm: float = 10.0
    val_fraction: float = 0.1
    checkpoint_every: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        lrs = [self.schedule.lr] if isinstance(self.schedule, Constant) else [
            self.schedule.lr_hi, self.schedule.lr_lo]
        if any(lr < 0 for lr in lrs):
            raise ValueError("learning rate must be non-negative")


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7919, int(epoch)]))


def torch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed), 104729, int(epoch)]).generate_state(1)[0])


# ---------------------------------------------------------------- objectives

def gaussian_nll(err, log_var):
    """``err^2 / (2 Var) + log(Var) / 2`` without the constant."""
    return 0.5 * err**2 * torch.exp(-log_var) + 0.5 * log_var


@dataclass
class LocalBatch:
    values: torch.Tensor  # (B, T) normalised observations, zero padded
    times: torch.Tensor  # (B, T)
    lengths: list
    grid_t: torch.Tensor  # (B, L) normalised fine-grid times
    f: torch.Tensor  # (B, L) normalised derivative targets
    x: torch.Tensor  # (B, L) normalised solution targets
    x0: torch.Tensor  # (B,) normalised value at the first observation

    def take(self, idx) -> "LocalBatch":
        idx = np.asarray(idx)
        lengths = [self.lengths[i] for i in idx]
        T = max(lengths)
        it = torch.as_tensor(idx)
        return LocalBatch(self.values[it, :T], self.times[it, :T], lengths, self.grid_t[it],
                          self.f[it], self.x[it], self.x0[it])


def prepare_local(records: list[GenerationRecord], dtype=torch.float32) -> LocalBatch:
    """Normalise each record by its own observations and rescale its targets to match."""
    B = len(records)
    T = max(len(r.y) for r in records)
    L = records[0].fine_grid_len
    vals = np.zeros((B, T))
    tms = np.zeros((B, T))
    gt, ft, xt = np.zeros((B, L)), np.zeros((B, L)), np.zeros((B, L))
    x0 = np.zeros(B)
    lengths = []
    for i, r in enumerate(records):
        tn, yn, norm = fl.normalize(r.obs_times, r.y)
        n = tn.shape[0]
        vals[i, :n], tms[i, :n] = yn, tn
        lengths.append(n)
        gt[i] = norm.times_to_norm(fine_grid(L))
        ft[i] = r.f * norm.tau_range / norm.y_range
        xt[i] = (r.x - norm.y_min) / norm.y_range
        x0[i] = xt[i, r.obs_idx[0]]
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return LocalBatch(as_t(vals), as_t(tms), lengths, as_t(gt), as_t(ft), as_t(xt), as_t(x0))


def loss_local(batch: LocalBatch, f_mean, f_log_var, x0_mean, x0_log_var) -> dict:
    """Per-record sums of the three terms, averaged over the batch."""
    f_nll = gaussian_nll(batch.f - f_mean, f_log_var).sum(-1)
    dt = batch.grid_t[:, 1:] - batch.grid_t[:, :-1]
    euler = (batch.x[:, 1:] - (batch.x[:, :-1] + f_mean[:, :-1] * dt)).abs().sum(-1)
    x0 = gaussian_nll(batch.x0 - x0_mean, x0_log_var)
    parts = {"loss_f_nll": f_nll.mean(), "loss_euler": euler.mean(), "loss_x0": x0.mean()}
    parts["total"] = parts["loss_f_nll"] + parts["loss_euler"] + parts["loss_x0"]
    for k, v in parts.items():
        if not torch.isfinite(v):
            raise TrainingError(f"non-finite {k}")
    return parts


def local_forward_loss(model: fl.FIMLocal, batch: LocalBatch) -> dict:
    return loss_local(batch, *model(batch.values, batch.times, batch.lengths, batch.grid_t))


@dataclass
class GapBatch:
    set_u: torch.Tensor  # (B, 4, E) frozen set embeddings
    stats: torch.Tensor  # (B, 4, 9)
    q: torch.Tensor  # (B,)
    t_local: torch.Tensor  # (B, M) gap-local query times, padded
    f: torch.Tensor  # (B, M) globally normalised targets
    mask: torch.Tensor  # (B, M) 1 inside the gap
    diff: torch.Tensor  # (B,) gap length in global normalised time


def prepare_gap(local: fl.FIMLocal, records: list[GenerationRecord], dtype=torch.float32) -> GapBatch:
    if any(r.gap is None for r in records):
        raise ValueError("gap training needs temporal-gap records")
    items = []
    for r in records:
        tn, yn, norm = fl.normalize(r.obs_times, r.y)
        t_grid = fine_grid(r.fine_grid_len)
        gap_n = tuple(norm.times_to_norm(t_grid[list(r.gap)]))
        split = fg.split_sets(tn, gap_n)
        u, s = fg.encode_sets(local, tn, yn, split)
        inside = np.flatnonzero((t_grid >= t_grid[r.gap[0]]) & (t_grid <= t_grid[r.gap[1]]))
        if inside.shape[0] == 0:
            raise ValueError(f"record {r.seed}: gap contains no fine-grid points")
        tq = fg.local_gap_time(norm.times_to_norm(t_grid[inside]), gap_n)
        items.append((u, s, split.q, tq, r.f[inside] * norm.tau_range / norm.y_range,
                      max(gap_n[1] - gap_n[0], fg.TAU_DIFF_FLOOR)))
    M = max(it[3].shape[0] for it in items)
    B = len(items)
    tq = np.zeros((B, M))
    ft = np.zeros((B, M))
    mask = np.zeros((B, M))
    for i, it in enumerate(items):
        m = it[3].shape[0]
        tq[i, :m], ft[i, :m], mask[i, :m] = it[3], it[4], 1.0
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return GapBatch(torch.stack([it[0] for it in items]).to(dtype),
                    torch.stack([it[1] for it in items]).to(dtype),
                    torch.tensor([it[2] for it in items]), as_t(tq), as_t(ft), as_t(mask),
                    as_t([it[5] for it in items]))


def loss_gap(batch: GapBatch, f_mean, f_log_var) -> torch.Tensor:
    """Derivative NLL summed over in-gap fine-grid points, averaged over records."""
    if not bool((batch.mask.sum(-1) > 0).all()):
        raise TrainingError("empty gap intersection with the fine grid")
    nll = gaussian_nll(batch.f - f_mean, f_log_var) * batch.mask
    loss = nll.sum(-1).mean()
    if not torch.isfinite(loss):
        raise TrainingError("non-finite gap loss")
    return loss


def gap_forward_loss(local: fl.FIMLocal, gap_model: fg.FIMGap, batch: GapBatch) -> torch.Tensor:
    u_q = gap_model(batch.set_u, batch.stats, batch.q)
    m, lv = local.query(u_q, batch.t_local)
    d = batch.diff.view(-1, 1)
    return loss_gap(batch, m / d, lv - 2.0 * torch.log(d))


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    params: ParameterStore
    history: list  # metric rows
    best: ParameterStore | None = None


def split_train_val(n: int, val_fraction: float, seed: int):
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 31337])).permutation(n)
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _row(epoch, split, parts):
    return {"epoch": epoch, "split": split,
            **{k: float(parts.get(k, float("nan"))) for k in METRIC_FIELDS[2:]}}


def write_metrics(path, rows) -> None:
    from .datasets import atomic_path

    with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _mean_parts(acc: dict, weights: list) -> dict:
    tot = sum(weights)
    return {k: sum(v * w for v, w in zip(vals, weights)) / tot for k, vals in acc.items()}


def _optimizer(params, cfg: TrainConfig):
    return torch.optim.AdamW(params, lr=lr_at(cfg.schedule, 0), betas=(0.9, 0.999), eps=1e-8,
                             weight_decay=cfg.weight_decay)


def _save_checkpoint(ckpt_dir, tag, module, opt, epoch, history, config):
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    ParameterStore.from_module(module, config).save(ckpt_dir / f"{tag}.fimw")
    torch.save({"optimizer": opt.state_dict(), "epoch": epoch, "history": history,
                "params": module.state_dict()}, ckpt_dir / f"{tag}.state.pt")


def run_epochs(module: nn.Module, batches_fn, eval_fn, n_train: int, cfg: TrainConfig,
               start_epoch: int = 0, opt=None, history=None, ckpt_dir=None,
               config: dict | None = None, epoch_end_hook=None) -> TrainResult:
    """Shared minibatch loop. ``batches_fn(indices)`` yields losses (dicts with ``total``)."""
    trainable = [p for p in module.parameters() if p.requires_grad]
    opt = opt or _optimizer(trainable, cfg)
    history = list(history or [])
    best_val, best = math.inf, None
    last_good = ParameterStore.from_module(module, config)
    last_good = ParameterStore({k: v.clone() for k, v in last_good.items()}, config)
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(cfg.schedule, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        torch.manual_seed(torch_seed(cfg.seed, epoch))
        order = epoch_rng(cfg.seed, epoch).permutation(n_train)
        module.train()
        acc, weights = {}, []
        try:
            for start in range(0, n_train, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                parts = batches_fn(idx)
                opt.zero_grad(set_to_none=True)
                parts["total"].backward()
                if cfg.clip_norm:
                    nn.utils.clip_grad_norm_(trainable, cfg.clip_norm)
                opt.step()
                for k, v in parts.items():
                    acc.setdefault(k, []).append(float(v.detach()) if torch.is_tensor(v) else float(v))
                weights.append(len(idx))
        except TrainingError as exc:
            raise TrainingError(f"epoch {epoch}: {exc}", last_good) from exc
        if not all(bool(torch.isfinite(p).all()) for p in trainable):
            raise TrainingError(f"epoch {epoch}: parameters became non-finite", last_good)
        history.append(_row(epoch, "train", _mean_parts(acc, weights)))
        module.eval()
        val = eval_fn() if eval_fn is not None else None
        if val is not None:
            history.append(_row(epoch, "val", val))
        last_good = ParameterStore({k: v.detach().clone() for k, v in module.state_dict().items()},
                                   config)
        if val is not None and val["total"] < best_val:
            best_val, best = val["total"], last_good
            if ckpt_dir:
                _save_checkpoint(ckpt_dir, "best", module, opt, epoch + 1, history, config)
        if ckpt_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _save_checkpoint(ckpt_dir, f"epoch{epoch + 1:05d}", module, opt, epoch + 1, history,
                             config)
        if epoch_end_hook is not None:
            epoch_end_hook(epoch, history)
    module.eval()
    return TrainResult(ParameterStore.from_module(module, config), history, best)


def _chunked_eval(fn, n, chunk=256):
    acc, weights = {}, []
    with torch.no_grad():
        for s in range(0, n, chunk):
            idx = np.arange(s, min(n, s + chunk))
            for k, v in fn(idx).items():
                acc.setdefault(k, []).append(float(v.detach()) if torch.is_tensor(v) else float(v))
            weights.append(len(idx))
    return _mean_parts(acc, weights) if weights else None


def model_config(cfg: TrainConfig, kind: str) -> dict:
    return {"kind": kind, "net": config_dict(cfg.net)}


def train_local(records: list[GenerationRecord], cfg: TrainConfig, model: fl.FIMLocal | None = None,
                ckpt_dir=None, resume=None, epoch_end_hook=None) -> tuple[fl.FIMLocal, TrainResult]:
    torch.manual_seed(cfg.seed)
    model = model or fl.FIMLocal(cfg.net)
    model.to(cfg.dtype)
    tr, va = split_train_val(len(records), cfg.val_fraction, cfg.seed)

    train_all = prepare_local([records[i] for i in tr], cfg.dtype)

    def loss_fn(idx):
        return local_forward_loss(model, train_all.take(idx))

    val_batch = prepare_local([records[i] for i in va], cfg.dtype) if len(va) else None

    def eval_fn():
        if val_batch is None:
            return None
        with torch.no_grad():
            return {k: float(v) for k, v in local_forward_loss(model, val_batch).items()}

    opt, start, history = None, 0, None
    if resume is not None:
        state = torch.load(resume, weights_only=False)
        model.load_state_dict(state["params"])
        opt = _optimizer([p for p in model.parameters() if p.requires_grad], cfg)
        opt.load_state_dict(state["optimizer"])
        start, history = state["epoch"], state["history"]
    result = run_epochs(model, loss_fn, eval_fn, len(tr), cfg, start, opt, history, ckpt_dir,
                        model_config(cfg, "local"), epoch_end_hook)
    return model, result


def train_gap(local: fl.FIMLocal, records: list[GenerationRecord], cfg: TrainConfig,
              gap_model: fg.FIMGap | None = None, ckpt_dir=None,
              epoch_end_hook=None) -> tuple[fg.FIMGap, TrainResult]:
    """Train only the gap parameters; the local model is frozen throughout."""
    fg.freeze(local)
    local.to(cfg.dtype)
    torch.manual_seed(cfg.seed)
    gap_model = gap_model or fg.FIMGap(cfg.net)
    gap_model.to(cfg.dtype)
    tr, va = split_train_val(len(records), cfg.val_fraction, cfg.seed)
    train_b = prepare_gap(local, [records[i] for i in tr], cfg.dtype)
    val_b = prepare_gap(local, [records[i] for i in va], cfg.dtype) if len(va) else None

    def sub(b: GapBatch, idx):
        idx = torch.as_tensor(idx)
        return GapBatch(b.set_u[idx], b.stats[idx], b.q[idx], b.t_local[idx], b.f[idx],
                        b.mask[idx], b.diff[idx])

    def loss_fn(idx):
        loss = gap_forward_loss(local, gap_model, sub(train_b, idx))
        return {"loss_f_nll": loss, "total": loss}

    def eval_fn():
        if val_b is None:
            return None
        with torch.no_grad():
            loss = float(gap_forward_loss(local, gap_model, val_b))
        return {"loss_f_nll": loss, "total": loss}

    result = run_epochs(gap_model, loss_fn, eval_fn, len(tr), cfg, ckpt_dir=ckpt_dir,
                        config=model_config(cfg, "gap"), epoch_end_hook=epoch_end_hook)
    return gap_model, result


def train(stage, dataset, cfg: TrainConfig, local: fl.FIMLocal | None = None, **kw):
    stage = Stage(stage)
    if stage is Stage.LOCAL:
        if any(r.gap is not None for r in dataset):
            raise ValueError("local training expects a point-wise dataset")
        return train_local(dataset, cfg, **kw)
    if stage is Stage.GAP:
        if local is None:
            raise ValueError("gap training needs pretrained local weights")
        return train_gap(local, dataset, cfg, **kw)
    raise ValueError("use finetune_reconstruction for the fine-tuning stage")


# ---------------------------------------------------------------- fine-tuning

def _torch_interp(x, xp, fp):
    """Piecewise-linear interpolation, differentiable in ``fp``; ``xp`` increasing."""
    idx = torch.clamp(torch.searchsorted(xp, x) - 1, 0, xp.shape[0] - 2)
    x0, x1 = xp[idx], xp[idx + 1]
    w = (x - x0) / (x1 - x0)
    return fp[idx] * (1 - w) + fp[idx + 1] * w


def windowed_reconstruction(model: fl.FIMLocal, times, values, windowing, query_times=None):
    """Differentiable version of the composed trajectory at ``query_times`` (original units)."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    q = times if query_times is None else np.asarray(query_times, dtype=np.float64)
    dt = next(model.parameters()).dtype
    windows = fl.plan_windows(times, windowing)
    parts = []
    for win in windows:
        sl = slice(win.lo, win.hi + 1)
        tn, yn, norm = fl.normalize(times[sl], values[sl])
        u = model.encode(torch.as_tensor(yn, dtype=dt)[None], torch.as_tensor(tn, dtype=dt)[None])
        x0, _ = model.initial(u)
        qn = norm.times_to_norm(q)
        lo, hi = min(0.0, float(qn.min())), max(1.0, float(qn.max()))
        n = int(math.ceil(fl.dense_grid_size(len(tn)) * (hi - lo)))
        grid = torch.linspace(lo, hi, n, dtype=dt)
        f, _ = model.query(u, grid[None])
        f = f[0]
        cum = torch.cat([torch.zeros(1, dtype=dt),
                         torch.cumsum(0.5 * (f[1:] + f[:-1]) * (grid[1:] - grid[:-1]), 0)])
        at = _torch_interp(torch.as_tensor(np.append(qn, 0.0), dtype=dt), grid, cum)
        xn = x0[0] + at[:-1] - at[-1]
        parts.append(xn * norm.y_range + norm.y_min)
    if len(parts) == 1:
        return parts[0]
    comp = fl.ComposedOutput(windows, [None] * len(windows))
    w, _ = comp._weights(q)
    w = torch.as_tensor(w, dtype=dt)
    return sum(w[k] * parts[k] for k in range(len(parts)))


def finetune_reconstruction(model: fl.FIMLocal, series: list, cfg: TrainConfig, windowing,
                            targets: list | None = None) -> tuple[fl.FIMLocal, TrainResult]:
    """Minimise mean absolute reconstruction error at observation times, one series per step.

    ``series`` holds ``(times, values)`` pairs fed to the model; ``targets``
    optionally supplies the values to reconstruct (defaults to the inputs).
    """
    model.to(cfg.dtype)
    targets = targets or [v for _, v in series]
    tgt = [torch.as_tensor(np.asarray(t), dtype=cfg.dtype) for t in targets]
    fcfg = TrainConfig(**{**cfg.__dict__, "batch_size": 1, "val_fraction": 0.0})

    def loss_fn(idx):
        i = int(idx[0])
        t, v = series[i]
        rec = windowed_reconstruction(model, t, v, windowing)
        loss = (rec - tgt[i]).abs().mean()
        if not torch.isfinite(loss):
            raise TrainingError("non-finite reconstruction loss")
        return {"total": loss}

    result = run_epochs(model, loss_fn, None, len(series), fcfg, config=model_config(cfg, "local"))
    return model, result


def reconstruction_mae(model: fl.FIMLocal, series: list, windowing, targets=None) -> float:
    targets = targets or [v for _, v in series]
    errs = []
    model.eval()
    with torch.no_grad():
        for (t, v), y in zip(series, targets):
            rec = windowed_reconstruction(model, t, v, windowing).double().numpy()
            errs.append(np.mean(np.abs(rec - np.asarray(y))))
    return float(np.mean(errs))
