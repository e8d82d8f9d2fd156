"""Test-set losses and average errors, velocity KDE curves and expression curves."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .midi_io import DEFAULT_TEMPO, MidiDocument, TOKEN_RESOLUTION, ticks_to_seconds
from .model import HEADS, ModelConfig, forward_batch
from .numerics import no_grad
from .tokenizer import TokenSequence
from .training import WindowSet, feature_loss

ROW_NAMES = {"velocity": "Velocity", "dd": "Duration Deviation", "ioi": "Inter-Onset Interval"}
VELOCITY_BIN = 2  # raw MIDI velocity steps per velocity token
KDE_GRID = np.arange(0.0, 127.0 + 0.25, 0.5)
BANDWIDTH_FLOOR = 0.5
SMOOTH_WINDOW = 25


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureResult:
    feature: str
    loss: float
    error_tokens: float  # loss * mean |target| in token units (velocity tokens or ticks)
    error: float         # the same in velocity steps or seconds
    unit: str
    count: int


@dataclass(frozen=True)
class EvalReport:
    results: tuple[FeatureResult, ...]

    def __getitem__(self, feature: str) -> FeatureResult:
        for r in self.results:
            if r.feature == feature:
                return r
        raise KeyError(feature)

    def to_dict(self) -> dict:
        return {r.feature: asdict(r) for r in self.results}

    def to_text(self) -> str:
        lines = [f"{'Feature':<22}{'Loss':<8}Average Error"]
        for r in self.results:
            suffix = "s" if r.unit == "seconds" else ""
            lines.append(f"{ROW_NAMES[r.feature]:<22}{r.loss:.4f}  ±{r.error:.4f}{suffix}")
        return "\n".join(lines) + "\n"


def ticks_to_default_seconds(ticks: float) -> float:
    """Seconds for a tick span at 384 ticks per beat and 120 BPM."""
    ref = MidiDocument(TOKEN_RESOLUTION)
    return float(ticks) * ticks_to_seconds(TOKEN_RESOLUTION, ref) / TOKEN_RESOLUTION


def evaluate_predictions(preds: dict, targets, mask, alpha: float = 1e-3) -> EvalReport:
    """Build a report from predictions (N, W) per head against targets (N, W, 3)."""
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask)
    if targets.ndim == 2:
        targets, mask = targets[None], mask[None]
        preds = {h: np.asarray(v)[None] for h, v in preds.items()}
    keep = mask != 0
    count = int(keep.sum())
    if count == 0:
        raise EvalError("empty test set: no unmasked notes")
    results = []
    for i, head in enumerate(HEADS):
        pred = np.asarray(preds[head], dtype=np.float64)[keep]
        tgt = targets[..., i][keep]
        loss = feature_loss(pred, tgt, np.ones_like(tgt), alpha).item()
        nonzero = np.abs(tgt[tgt != 0])
        err_tokens = loss * float(nonzero.mean()) if nonzero.size else 0.0
        if head == "velocity":
            err, unit = err_tokens * VELOCITY_BIN, "velocity"
        else:
            err, unit = ticks_to_default_seconds(err_tokens), "seconds"
        results.append(FeatureResult(head, loss, err_tokens, err, unit, count))
    return EvalReport(tuple(results))


def predict(params, config: ModelConfig, data: WindowSet, batch_size: int = 16) -> dict[str, np.ndarray]:
    out = {h: [] for h in HEADS}
    with no_grad():
        for start in range(0, len(data), batch_size):
            b = data.subset(np.arange(start, min(start + batch_size, len(data))))
            preds = forward_batch(params, config, b.inputs, b.mask, b.pianist)
            for h in HEADS:
                out[h].append(preds[h].data.astype(np.float64))
    return {h: np.concatenate(v) for h, v in out.items()}


def evaluate(params, config: ModelConfig, data: WindowSet, alpha: float = 1e-3,
             batch_size: int = 16) -> EvalReport:
    if len(data) == 0:
        raise EvalError("empty test set")
    return evaluate_predictions(predict(params, config, data, batch_size), data.targets, data.mask, alpha)


# ---------------------------------------------------------------------------
# Velocity distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    label: str = ""


def silverman_bandwidth(x: np.ndarray) -> float:
    return max(1.06 * float(np.std(x, ddof=1)) * len(x) ** -0.2, BANDWIDTH_FLOOR)


def velocity_kde(velocities, label: str = "", grid: np.ndarray | None = None) -> KdeCurve:
    """Gaussian KDE of raw MIDI velocities on a fixed 0..127 grid, normalized to unit area."""
    x = np.asarray(velocities, dtype=np.float64).ravel()
    if x.size < 2:
        raise EvalError(f"need at least 2 samples for a KDE, got {x.size}")
    grid = KDE_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    bw = silverman_bandwidth(x)
    z = (grid[:, None] - x[None, :]) / bw
    density = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * bw * np.sqrt(2 * np.pi))
    area = np.trapezoid(density, grid)
    if area > 0:
        density = density / area
    return KdeCurve(grid, density, bw, label)


def distribution_overlap(a: KdeCurve, b: KdeCurve) -> float:
    """Shared area of two densities on the same grid."""
    if a.grid.shape != b.grid.shape or not np.array_equal(a.grid, b.grid):
        raise EvalError("KDE curves are on different grids")
    return float(np.clip(np.trapezoid(np.minimum(a.density, b.density), a.grid), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Expression curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpressionCurves:
    velocity: np.ndarray
    duration: np.ndarray
    velocity_flat: bool  # zero variance, curve is all zeros
    duration_flat: bool


def moving_average(x, window: int) -> np.ndarray:
    """Centered moving average; windows shrink symmetrically at the edges."""
    x = np.asarray(x, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise EvalError(f"smoothing window must be a positive odd integer, got {window}")
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(len(x))
    reach = np.minimum(np.minimum(idx, len(x) - 1 - idx), half)
    lo, hi = idx - reach, idx + reach + 1
    return (csum[hi] - csum[lo]) / (hi - lo)


def standardize_and_smooth(x, window: int = SMOOTH_WINDOW) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(x), True
    return moving_average((x - x.mean()) / std, window), False


def expression_curves(seq: TokenSequence, window: int = SMOOTH_WINDOW) -> ExpressionCurves:
    arr = seq.to_array()
    if len(arr) <= window:
        raise EvalError(f"sequence of {len(arr)} notes is not longer than the window {window}")
    vel, vflat = standardize_and_smooth(arr[:, 1], window)
    dur, dflat = standardize_and_smooth(arr[:, 2], window)
    return ExpressionCurves(vel, dur, vflat, dflat)


def write_columns(path, x, y, header: str = "") -> None:
    """Two whitespace-separated numeric columns, one row per point."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("column lengths differ")
    lines = [f"# {header}"] if header else []
    lines += [f"{a:.6f} {b:.9g}" for a, b in zip(x, y)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_kde(path, curve: KdeCurve) -> None:
    write_columns(path, curve.grid, curve.density, f"velocity density {curve.label} bw={curve.bandwidth:.6g}")


__all__ = [
    "EvalReport", "FeatureResult", "KdeCurve", "ExpressionCurves", "evaluate", "evaluate_predictions",
    "velocity_kde", "distribution_overlap", "expression_curves", "standardize_and_smooth",
    "moving_average", "write_columns", "write_kde", "DEFAULT_TEMPO",
]
