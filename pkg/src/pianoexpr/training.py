"""Losses, GradNorm loss balancing and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from .features import TARGET_FEATURES, ModelIO
from .model import HEADS, ModelConfig, forward_batch, init_params, shared_layer_name
from .numerics.optim import AdamState, LrSchedule, adam_step, lr_at
from .numerics.tensor import Tensor, add, backward, div, mul, no_grad, sub, tabs, tsum

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-4


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class WindowSet:
    """A stack of windows: inputs (N, W, 6), targets (N, W, 3), mask (N, W), pianist (N,)."""

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    pianist: np.ndarray

    def __post_init__(self):
        n = len(self.inputs)
        if not (len(self.targets) == len(self.mask) == len(self.pianist) == n):
            raise ValueError("WindowSet arrays disagree on the number of windows")

    def __len__(self):
        return len(self.inputs)

    @classmethod
    def from_windows(cls, windows: list[ModelIO], pianists) -> "WindowSet":
        if not windows:
            raise ValueError("no windows")
        return cls(
            np.stack([w.inputs for w in windows]),
            np.stack([w.targets for w in windows]),
            np.stack([w.mask for w in windows]),
            np.asarray(pianists, dtype=np.int64).reshape(len(windows)),
        )

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.inputs[idx], self.targets[idx], self.mask[idx], self.pianist[idx])

    def save(self, directory, prefix: str) -> None:
        d = Path(directory)
        for name in ("inputs", "targets", "mask", "pianist"):
            np.save(d / f"{prefix}_{name}.npy", getattr(self, name))

    @classmethod
    def load(cls, directory, prefix: str) -> "WindowSet":
        d = Path(directory)
        return cls(*(np.load(d / f"{prefix}_{name}.npy") for name in ("inputs", "targets", "mask", "pianist")))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def feature_loss(pred, target, mask, alpha: float = 1e-3) -> Tensor:
    """Masked mean relative error.

    Each unmasked note contributes |y - t| / |t|, or alpha * |y - t| when the
    target is zero; the sum is divided by the number of unmasked notes.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, dtype=np.float64))
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.asarray(mask)
    if target.shape != pred.shape or mask.shape != pred.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ValueError("all positions are masked; the loss is undefined")
    denom = np.where(target != 0, np.abs(target), 1.0 / alpha).astype(pred.dtype)
    per_note = div(tabs(sub(pred, target)), denom)
    return div(tsum(mul(per_note, (mask != 0).astype(pred.dtype))), float(count))


@dataclass
class LossWeights:
    w_v: float = 1.0
    w_dd: float = 1.0
    w_ioi: float = 1.0

    def __post_init__(self):
        if min(self.as_array()) <= 0:
            raise ValueError(f"loss weights must be positive: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_v, self.w_dd, self.w_ioi], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "LossWeights":
        return cls(*(float(x) for x in a))


def total_loss(losses: dict, weights: LossWeights):
    """Weighted sum of the three feature losses (Tensors or floats)."""
    w = weights.as_array()
    terms = [mul(losses[h], float(wi)) if isinstance(losses[h], Tensor) else losses[h] * wi
             for h, wi in zip(HEADS, w)]
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t) if isinstance(out, Tensor) or isinstance(t, Tensor) else out + t
    return out


def _renormalize(w: np.ndarray, total: float = 3.0, floor: float = 0.0) -> np.ndarray:
    """Rescale to sum to ``total`` with every entry >= ``floor``.

    Entries that would fall below the floor are pinned there and the rest
    share the remainder.  A final ulp-level nudge makes Python's left-to-right
    sum exact; the last free entry is tried first since it is the final addend.
    """
    w = np.maximum(np.asarray(w, dtype=np.float64), floor)
    pinned = np.zeros(len(w), dtype=bool)
    for _ in range(len(w)):
        free_total = total - floor * pinned.sum()
        w[~pinned] *= free_total / w[~pinned].sum()
        w[pinned] = floor
        low = (w < floor) & ~pinned
        if not low.any():
            break
        pinned |= low
    free = [i for i in range(len(w)) if not pinned[i]]
    for i in free[::-1] + sorted(free, key=lambda k: -w[k]):
        trial = w.copy()
        trial[i] += total - sum(float(x) for x in trial)
        for _ in range(64):
            s = sum(float(x) for x in trial)
            if s == total:
                break
            trial[i] = np.nextafter(trial[i], np.inf if s < total else -np.inf)
        if s == total and trial.min() >= floor:
            return trial
    return w


def gradnorm_update(weights: LossWeights, grad_norms, loss_ratios, alpha: float = 1.5,
                    lr_w: float = 0.025, floor: float = WEIGHT_FLOOR) -> LossWeights:
    """One GradNorm step on the loss weights.

    ``grad_norms`` are the norms of each unweighted task loss's gradient with
    respect to the shared layer; ``loss_ratios`` are current / initial task
    losses.  The balancing objective is sum_t |G_t - mean(G) * r_t**alpha|
    with G_t = w_t * norm_t and r_t the ratio relative to the mean ratio; the
    target term is held constant, as in the original method.
    """
    norms = np.asarray(grad_norms, dtype=np.float64)
    ratios = np.asarray(loss_ratios, dtype=np.float64)
    if not (np.all(np.isfinite(norms)) and np.all(np.isfinite(ratios))):
        raise TrainingError(f"non-finite GradNorm inputs: norms {norms}, ratios {ratios}")
    if np.any(norms < 0):
        raise ValueError(f"gradient norms must be non-negative: {norms}")
    w = weights.as_array()
    G = w * norms
    r = ratios / ratios.mean() if ratios.mean() > 0 else np.ones_like(ratios)
    target = G.mean() * r ** alpha
    diff = G - target
    # float noise in mean(G) must not move a balanced system
    diff[np.abs(diff) <= 1e-12 * max(np.abs(G).max(), 1e-300)] = 0.0
    # d(objective)/dw_t = sign(diff_t) * norm_t; stepping on the sign alone
    # keeps lr_w independent of the loss scale, and every task above its
    # target loses weight even after renormalization
    w = _renormalize(w - lr_w * np.sign(diff), floor=floor)
    return LossWeights.from_array(w)


def gradnorm_objective(weights, grad_norms, loss_ratios, alpha: float = 1.5) -> float:
    w = np.asarray(weights, dtype=np.float64)
    G = w * np.asarray(grad_norms, dtype=np.float64)
    ratios = np.asarray(loss_ratios, dtype=np.float64)
    r = ratios / ratios.mean()
    return float(np.abs(G - G.mean() * r ** alpha).sum())


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 400
    patience: int = 30
    alpha_loss: float = 1e-3
    learning_rate: float = 1e-4
    weight_decay: float = 1e-7
    T_0: int = 10
    T_mult: int = 2
    eta_min: float = 0.0
    gradnorm: bool = True
    gradnorm_alpha: float = 1.5
    gradnorm_lr: float = 0.025
    initial_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "initial_weights", tuple(float(w) for w in self.initial_weights))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise ValueError("need 0 < patience < max_epochs")

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.learning_rate, self.T_0, self.T_mult, self.eta_min)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    params: dict[str, Tensor]
    model_config: ModelConfig
    train_config: TrainConfig
    adam: AdamState
    weights: LossWeights
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    initial_losses: np.ndarray | None = None
    best_val: float = math.inf
    best_epoch: int = 0
    pianists: tuple[str, ...] = ()
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, model_config: ModelConfig, train_config: TrainConfig,
               params: dict[str, Tensor] | None = None, pianists=()) -> "TrainState":
        return cls(
            params=params if params is not None else init_params(model_config),
            model_config=model_config,
            train_config=train_config,
            adam=AdamState(learning_rate=train_config.learning_rate, weight_decay=train_config.weight_decay),
            weights=LossWeights(*train_config.initial_weights),
            rng=np.random.default_rng(train_config.seed),
            pianists=tuple(pianists),
        )

    # -- persistence -------------------------------------------------------

    def to_checkpoint(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {f"param/{k}": p.data for k, p in self.params.items()}
        arrays.update({f"adam_m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"adam_v/{k}": v for k, v in self.adam.v.items()})
        meta = {
            "format": 1,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "adam": {k: getattr(self.adam, k) for k in
                     ("learning_rate", "weight_decay", "beta1", "beta2", "epsilon", "step")},
            "loss_weights": asdict(self.weights),
            "epoch": self.epoch,
            "seed": self.train_config.seed,
            "rng_state": self.rng.bit_generator.state,
            "initial_losses": None if self.initial_losses is None else [float(x) for x in self.initial_losses],
            "best_val": None if math.isinf(self.best_val) else self.best_val,
            "best_epoch": self.best_epoch,
            "pianists": list(self.pianists),
            "history": self.history,
        }
        return arrays, meta

    def save(self, path) -> None:
        ckpt.save(path, *self.to_checkpoint())

    @classmethod
    def load(cls, path) -> "TrainState":
        arrays, meta = ckpt.load(path)
        mc = meta["model_config"]
        model_config = ModelConfig.from_dict({**mc, **{k: tuple(v) for k, v in mc.items() if isinstance(v, list)}})
        train_config = TrainConfig.from_dict(
            {**meta["train_config"], "initial_weights": tuple(meta["train_config"]["initial_weights"])})
        params = {k[len("param/"):]: Tensor(v, requires_grad=True, name=k[len("param/"):])
                  for k, v in arrays.items() if k.startswith("param/")}
        adam = AdamState(**meta["adam"])
        adam.m = {k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")}
        adam.v = {k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")}
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        return cls(
            params=params, model_config=model_config, train_config=train_config, adam=adam,
            weights=LossWeights(**meta["loss_weights"]), rng=rng, epoch=meta["epoch"],
            initial_losses=None if meta["initial_losses"] is None else np.array(meta["initial_losses"]),
            best_val=math.inf if meta["best_val"] is None else meta["best_val"],
            best_epoch=meta["best_epoch"], pianists=tuple(meta["pianists"]), history=meta["history"],
        )


def load_model(path) -> tuple[dict[str, Tensor], ModelConfig, tuple[str, ...]]:
    state = TrainState.load(path)
    return state.params, state.model_config, state.pianists


# ---------------------------------------------------------------------------
# Epochs
# ---------------------------------------------------------------------------

def batch_losses(params, config: ModelConfig, batch: WindowSet, alpha: float,
                 rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    preds = forward_batch(params, config, batch.inputs, batch.mask, batch.pianist, rng)
    return {h: feature_loss(preds[h], batch.targets[..., i], batch.mask, alpha)
            for i, h in enumerate(HEADS)}


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield order[start:start + size]


def _zero_grads(params):
    for p in params.values():
        p.grad = None


def task_grad_norms(params, config: ModelConfig, batch: WindowSet, alpha: float) -> np.ndarray:
    """Norm of each unweighted task loss's gradient on the shared layer."""
    shared = params[shared_layer_name(config)]
    losses = batch_losses(params, config, batch, alpha)
    norms = []
    for h in HEADS:
        _zero_grads(params)
        backward(losses[h])
        g = shared.grad
        norms.append(0.0 if g is None else float(np.sqrt(np.sum(g.astype(np.float64) ** 2))))
    _zero_grads(params)
    return np.array(norms)


def train_epoch(state: TrainState, data: WindowSet) -> dict:
    """One pass over ``data``; returns per-feature mean training losses.

    The learning rate follows the warm-restart schedule by epoch.  A GradNorm
    weight update runs once at the end of the epoch.
    """
    if len(data) == 0:
        raise TrainingError("empty training data")
    cfg = state.train_config
    epoch = state.epoch + 1
    lr = lr_at(cfg.schedule, state.epoch)
    state.adam.learning_rate = lr
    order = state.rng.permutation(len(data))
    sums = np.zeros(len(HEADS))
    count = 0
    for b, idx in enumerate(_batches(len(data), cfg.batch_size, order)):
        batch = data.subset(idx)
        n = int(np.count_nonzero(batch.mask))
        if n == 0:
            raise TrainingError(f"epoch {epoch} batch {b}: batch contains only padding")
        dropout_rng = state.rng if state.model_config.dropout > 0 else None
        losses = batch_losses(state.params, state.model_config, batch, cfg.alpha_loss, dropout_rng)
        total = total_loss(losses, state.weights)
        values = np.array([losses[h].item() for h in HEADS])
        if not (np.all(np.isfinite(values)) and math.isfinite(total.item())):
            raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}: {dict(zip(HEADS, values))}")
        _zero_grads(state.params)
        backward(total)
        grads = {k: p.grad for k, p in state.params.items() if p.grad is not None}
        adam_step(state.params, grads, state.adam)
        sums += values * n
        count += n
    _zero_grads(state.params)
    train_losses = sums / count
    if state.initial_losses is None:
        state.initial_losses = train_losses.copy()

    if cfg.gradnorm:
        probe = data.subset(np.arange(min(cfg.batch_size, len(data))))
        norms = task_grad_norms(state.params, state.model_config, probe, cfg.alpha_loss)
        ratios = train_losses / np.where(state.initial_losses > 0, state.initial_losses, 1.0)
        state.weights = gradnorm_update(state.weights, norms, ratios, cfg.gradnorm_alpha, cfg.gradnorm_lr)
    state.epoch = epoch
    return {"epoch": epoch, "lr": lr, **{f"train_{h}": float(v) for h, v in zip(HEADS, train_losses)},
            "train_total": float(train_losses.sum())}


def evaluate_losses(params, config: ModelConfig, data: WindowSet, alpha: float = 1e-3,
                    batch_size: int = 16) -> dict[str, float]:
    """Per-feature loss over every unmasked note in ``data`` (no graph)."""
    if len(data) == 0:
        raise ValueError("empty evaluation data")
    sums = np.zeros(len(HEADS))
    count = 0
    with no_grad():
        for idx in _batches(len(data), batch_size, np.arange(len(data))):
            batch = data.subset(idx)
            n = int(np.count_nonzero(batch.mask))
            if n == 0:
                continue
            losses = batch_losses(params, config, batch, alpha)
            sums += np.array([losses[h].item() for h in HEADS]) * n
            count += n
    if count == 0:
        raise ValueError("evaluation data contains only padding")
    return dict(zip(HEADS, (sums / count).tolist()))


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int, best: float = math.inf, best_epoch: int = 0):
        self.patience = patience
        self.best = best
        self.best_epoch = best_epoch

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; return True if training should stop."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            return False
        return epoch - self.best_epoch >= self.patience


@dataclass
class FitResult:
    best_checkpoint: Path | None
    best_val: float
    best_epoch: int
    stopped_epoch: int
    history: list[dict]
    state: TrainState
    best_blob: tuple | None = None


def fit(state: TrainState, train: WindowSet, val: WindowSet, out_dir=None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train until ``max_epochs`` or early stopping.

    Validation loss is the unweighted sum of the three feature losses, so the
    stopping rule does not depend on the GradNorm weights.  With ``out_dir``
    the best state goes to ``best.ckpt``, the latest to ``last.ckpt`` and one
    JSON line per epoch to ``train_log.jsonl``.
    """
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("train and validation splits must be non-empty")
    cfg = state.train_config
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    stopper = EarlyStopping(cfg.patience, state.best_val, state.best_epoch)
    best_path = out / "best.ckpt" if out is not None else None
    best_blob = None
    stopped = state.epoch
    while state.epoch < cfg.max_epochs:
        record = train_epoch(state, train)
        val_losses = evaluate_losses(state.params, state.model_config, val, cfg.alpha_loss, cfg.batch_size)
        val_total = float(sum(val_losses.values()))
        record.update({f"val_{h}": v for h, v in val_losses.items()})
        record["val_total"] = val_total
        record.update({"w_v": state.weights.w_v, "w_dd": state.weights.w_dd, "w_ioi": state.weights.w_ioi})
        stop = stopper.update(state.epoch, val_total)
        state.best_val, state.best_epoch = stopper.best, stopper.best_epoch
        state.history.append(record)
        if state.best_epoch == state.epoch:
            if out is not None:
                state.save(best_path)
            else:
                best_blob = state.to_checkpoint()
        if out is not None:
            state.save(out / "last.ckpt")
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        log.info("epoch %d lr %.3g train %.4f val %.4f", state.epoch, record["lr"],
                 record["train_total"], val_total)
        if on_epoch is not None:
            on_epoch(record)
        stopped = state.epoch
        if stop:
            break
    return FitResult(best_path, state.best_val, state.best_epoch, stopped, state.history, state, best_blob)
