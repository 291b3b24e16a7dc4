"""SGD with momentum, early stopping, grid search and patient-level cross-validation."""
import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import network
from .data import CropPolicy, FoldPlan, ImageSet, assert_patient_disjoint, batch_rng, load_batch
from .errors import ConfigError, DataError, DivergenceError
from .layers import one_hot, softmax_loss
from .tensor import STREAM_DROPOUT, STREAM_INIT, make_rng

log = logging.getLogger(__name__)

DEFAULT_LR = {"DT": 0.01, "SFT": 0.001, "DFT": 0.001}


@dataclass
class TrainConfig:
    base_lr: float = None  # None -> regime default (0.01 DT, 0.001 SFT/DFT)
    momentum: float = 0.9
    l2: float = 0.005
    batch_size: int = 32
    lr_gamma: float = 0.1
    lr_step: int = 10  # epochs between decays
    max_epochs: int = 30
    patience: int = 3  # consecutive validation-loss increases; None disables early stopping
    seed: int = 0
    init: str = "uniform_scaled"

    def __post_init__(self):
        if self.base_lr is not None and not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.l2 < 0 or self.batch_size < 1 or self.max_epochs < 1 or self.lr_step < 1:
            raise ConfigError("l2 >= 0, batch_size >= 1, max_epochs >= 1 and lr_step >= 1 required")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 or None")

    def lr_for(self, regime):
        return self.base_lr if self.base_lr is not None else DEFAULT_LR[regime]

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)  # name -> (dW, db): previous update
    iteration: int = 0
    epoch: int = 0

    def lr(self, cfg, base_lr, multiplier=1.0):
        return base_lr * multiplier * cfg.lr_gamma ** (self.epoch // cfg.lr_step)


def sgd_step(params, grads, state, cfg, base_lr, multipliers=None):
    """One momentum update of every parameter layer in ``params`` (in place).

    ``params`` maps names to objects with ``weights``/``bias`` arrays. L2
    decay is added to the weight gradient (biases are not decayed), then
    dW <- mu*dW - lr*grad and W <- W + dW.
    """
    multipliers = multipliers or {}
    updates = []
    for name, p in params.items():
        mult = multipliers.get(name, 1.0)
        if mult == 0.0 or name not in grads:
            continue
        gw, gb = grads[name]
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise DivergenceError(name, state.iteration)
        updates.append((name, p, gw, gb, state.lr(cfg, base_lr, mult)))
    for name, p, gw, gb, lr in updates:
        if cfg.l2:
            gw = gw + p.weights.dtype.type(cfg.l2) * p.weights
        vw, vb = state.velocity.get(name, (np.zeros_like(p.weights), np.zeros_like(p.bias)))
        vw = cfg.momentum * vw - lr * gw
        vb = cfg.momentum * vb - lr * gb
        p.weights += vw.astype(p.weights.dtype, copy=False)
        p.bias += vb.astype(p.bias.dtype, copy=False)
        state.velocity[name] = (vw.astype(p.weights.dtype, copy=False), vb.astype(p.bias.dtype, copy=False))
    state.iteration += 1
    return params, state


def should_stop(val_losses, patience):
    """True once the last ``patience`` epoch-over-epoch changes were all increases."""
    if patience is None or len(val_losses) <= patience:
        return False
    tail = val_losses[-(patience + 1):]
    return all(b > a for a, b in zip(tail, tail[1:]))


def best_epoch(val_losses):
    """1-based epoch of the minimum validation loss (earliest on ties)."""
    return int(np.argmin(val_losses)) + 1


@dataclass
class TrainResult:
    state: dict
    best_epoch: int
    best_val_loss: float
    history: list  # dicts: epoch, train_loss, val_loss, lr

    def checkpoint(self, spec, **metadata):
        meta = {"spec": spec.name, "epoch": self.best_epoch, "val_loss": self.best_val_loss}
        meta.update(metadata)
        return network.Checkpoint({k: (w.copy(), b.copy()) for k, (w, b) in self.state.items()}, meta)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])])


def evaluate_loss(model, data, crop, batch_size=64):
    """Mean softmax loss over ``data`` in inference mode with centre crops."""
    if len(data) == 0:
        raise DataError("cannot evaluate an empty set")
    policy = CropPolicy(crop, "eval")
    total = 0.0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        x, y = load_batch(data, idx, policy)
        logits = model.logits(x).astype(np.float64)
        loss, _ = softmax_loss(logits, one_hot(y, logits.shape[1]))
        total += loss * len(idx)
    return total / len(data)


def predict(model, data, crop, batch_size=64):
    """(N, classes) probabilities over ``data`` with centre crops."""
    policy = CropPolicy(crop, "eval")
    out = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        x, _ = load_batch(data, idx, policy)
        out.append(network.forward(model, x))
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes))


def train(model, train_set, val_set, cfg, history_path=None, on_epoch=None):
    """Train ``model`` in place; return the best-validation-epoch weights and the history.

    Stops when the validation loss rose for ``cfg.patience`` consecutive
    epochs or after ``cfg.max_epochs``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation sets must be non-empty")
    assert_patient_disjoint(train_set.patient_set, val_set.patient_set)
    classes = model.spec.num_classes
    if len(set(train_set.labels.tolist())) < classes:
        raise DataError("training split is missing a class")
    crop = model.spec.input_shape[-1]
    policy = CropPolicy(crop, "train")
    base_lr = cfg.lr_for(model.regime)
    order_rng = batch_rng(cfg.seed, 0)
    crop_rng = batch_rng(cfg.seed, 1)
    drop_rng = make_rng(cfg.seed, STREAM_DROPOUT)
    state = OptimizerState()
    history = []
    best = None
    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch - 1
        lr = state.lr(cfg, base_lr)
        perm = order_rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y = load_batch(train_set, idx, policy, crop_rng)
            logits = model.logits(x, train=True, rng=drop_rng)
            loss, g = softmax_loss(logits, one_hot(y, classes, logits.dtype))
            if not np.isfinite(loss):
                raise DivergenceError("loss", state.iteration)
            sgd_step(model.params, model.backward(g), state, cfg, base_lr, model.multipliers)
            total += loss * len(idx)
        val = evaluate_loss(model, val_set, crop)
        if not np.isfinite(val):
            raise DivergenceError("loss", state.iteration, f"validation loss diverged at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": total / len(train_set), "val_loss": val, "lr": lr})
        if best is None or val < best[1]:
            best = (epoch, val, model.state())
        if on_epoch:
            on_epoch(history[-1])
        if should_stop([h["val_loss"] for h in history], cfg.patience):
            break
    if history_path:
        write_history(history, history_path)
    model.load_state(best[2])
    return TrainResult(best[2], best[0], best[1], history)


# ---------------------------------------------------------------- cross-validation

@dataclass
class FoldResult:
    fold: int
    checkpoint: network.Checkpoint
    val_loss: float
    history: list


def _fold_job(args):
    spec, regime, cfg, dev, plan, fold = args
    train_p, val_p = plan.train_val(fold)
    fold_cfg = replace(cfg, seed=cfg.seed * 1000 + fold)
    model = network.build(spec, regime, make_rng(fold_cfg.seed, STREAM_INIT), cfg.init)
    res = train(model, dev.subset(train_p), dev.subset(val_p), fold_cfg)
    ckpt = res.checkpoint(spec, regime=regime.regime, fold=fold, seed=fold_cfg.seed)
    return FoldResult(fold, ckpt, res.best_val_loss, res.history)


def _map(fn, jobs, n_jobs):
    if n_jobs and n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_cv(plan, spec, regime, cfg, dev, jobs=1):
    """Train one model per fold; return the per-fold best checkpoints, ordered by fold."""
    if not isinstance(plan, FoldPlan) or plan.k < 2:
        raise ConfigError("run_cv needs a fold plan with at least two folds")
    if isinstance(dev, ImageSet):
        missing = set(plan.patients) - set(dev.patient_set)
        if missing:
            raise DataError(f"fold plan names patients absent from the data: {sorted(missing)[:5]}")
    return _map(_fold_job, [(spec, regime, cfg, dev, plan, f) for f in range(plan.k)], jobs)


def _grid_cell(args):
    spec, regime, cfg, dev, plan, fold = args
    try:
        return _fold_job(args).val_loss
    except DivergenceError as exc:
        log.warning("grid cell %s fold %d diverged: %s", asdict(cfg), fold, exc)
        return None


def grid_search(grid, plan, spec, regime, dev, base_cfg=None, table_path=None, jobs=1):
    """Return ``(best_overrides, table)``.

    Each grid entry is a dict of :class:`TrainConfig` overrides; the winner
    minimises the mean best-validation loss over the folds. Entries with a
    diverged fold are marked failed and excluded.
    """
    if not grid:
        raise ConfigError("grid must contain at least one hyperparameter set")
    base_cfg = base_cfg or TrainConfig()
    cfgs = [replace(base_cfg, **g) for g in grid]
    jobs_list = [(spec, regime, c, dev, plan, f) for c in cfgs for f in range(plan.k)]
    scores = _map(_grid_cell, jobs_list, jobs)
    table = []
    for i, g in enumerate(grid):
        fold_losses = scores[i * plan.k:(i + 1) * plan.k]
        failed = any(s is None for s in fold_losses)
        table.append({"index": i, **{k: g[k] for k in sorted(g)},
                      "fold_losses": fold_losses,
                      "mean_val_loss": None if failed else float(np.mean(fold_losses)),
                      "status": "failed" if failed else "ok"})
    ok = [row for row in table if row["status"] == "ok"]
    if not ok:
        raise DivergenceError("grid", 0, "every hyperparameter set diverged")
    best = min(ok, key=lambda row: (row["mean_val_loss"], row["index"]))
    if table_path:
        write_grid_table(table, grid, table_path)
    return dict(grid[best["index"]]), table


def write_grid_table(table, grid, path):
    keys = sorted({k for g in grid for k in g})
    k = len(table[0]["fold_losses"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", *keys, *(f"fold{i}_val_loss" for i in range(k)), "mean_val_loss", "status"])
        for row in table:
            w.writerow([row["index"], *(row.get(key, "") for key in keys),
                        *("" if s is None else repr(s) for s in row["fold_losses"]),
                        "" if row["mean_val_loss"] is None else repr(row["mean_val_loss"]), row["status"]])


def read_grid_table(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
