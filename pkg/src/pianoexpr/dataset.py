"""Dataset manifests, piece-level splits and window preparation.

A manifest is a JSON-lines file, one record per performance:

    {"performance": "perf/a.mid", "score": "score/a.mid", "pianist": "Claudio Arrau", "piece": "op27-2"}

An optional ``"split"`` field ("train", "validation" or "test") pins the
record; otherwise the split is derived per piece from a seed, so all
performances of one piece (and all their augmented copies) land together.
Relative paths resolve against the data root, which defaults to the
manifest's directory.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import AlignmentError, PianistId, augment, pair_windows, scale_score_to_performance, WINDOW_SIZE
from .midi_io import MidiError, TOKEN_RESOLUTION, load_midi, rescale_resolution
from .tokenizer import TokenError
from .training import WindowSet

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
SPLIT_RATIO = (8, 1, 1)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    performance: str
    score: str
    pianist: str
    piece: str
    split: str | None = None

    def __post_init__(self):
        if self.split is not None and self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}, expected one of {SPLITS}")


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ManifestError(f"{path}: {e.strerror or e}") from e
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rec = json.loads(line)
            rows.append(ManifestRow(**{k: rec[k] for k in ("performance", "score", "pianist")},
                                    piece=str(rec.get("piece", rec["score"])), split=rec.get("split")))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ManifestError(f"{path}:{lineno}: bad manifest record ({e})") from e
    if not rows:
        raise ManifestError(f"{path}: manifest is empty")
    return rows


def write_manifest(path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            rec = {k: v for k, v in asdict(r).items() if v is not None}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def split_counts(n: int) -> tuple[int, int, int]:
    """Pieces per split for an 8:1:1 ratio; val and test get one each once there are 3 pieces."""
    total = sum(SPLIT_RATIO)
    n_val = max(round(n * SPLIT_RATIO[1] / total), 1) if n >= 3 else 0
    n_test = max(round(n * SPLIT_RATIO[2] / total), 1) if n >= 3 else 0
    return n - n_val - n_test, n_val, n_test


def assign_splits(rows: list[ManifestRow], seed: int) -> dict[str, str]:
    """Piece -> split.  Pinned rows keep their split; the rest are shuffled with ``seed``."""
    pinned: dict[str, str] = {}
    for r in rows:
        if r.split is None:
            continue
        if pinned.setdefault(r.piece, r.split) != r.split:
            raise ManifestError(f"piece {r.piece!r} is pinned to both {pinned[r.piece]} and {r.split}")
    free = sorted({r.piece for r in rows} - set(pinned))
    order = np.random.default_rng(seed).permutation(len(free))
    n_train, n_val, _ = split_counts(len(free))
    out = dict(pinned)
    for rank, i in enumerate(order):
        out[free[i]] = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
    return out


def pianist_vocabulary(rows: list[ManifestRow]) -> tuple[str, ...]:
    return tuple(sorted({r.pianist for r in rows}))


def resolve(path: str, root: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else root / p


def load_pair(row: ManifestRow, root: Path):
    docs = []
    for path in (row.score, row.performance):
        full = resolve(path, root)
        try:
            docs.append(rescale_resolution(load_midi(full), TOKEN_RESOLUTION))
        except (OSError, MidiError) as e:
            raise MidiError(f"{full}: {e}") from e
    return docs[0], docs[1]


@dataclass
class PreparedDataset:
    splits: dict[str, WindowSet | None]
    pianists: tuple[str, ...]
    piece_splits: dict[str, str]
    seed: int
    window: int
    failures: list[dict] = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def save(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = []
        for name, ws in self.splits.items():
            if ws is None:
                continue
            ws.save(d, name)
            written += [d / f"{name}_{k}.npy" for k in ("inputs", "targets", "mask", "pianist")]
        meta = {"pianists": list(self.pianists), "seed": self.seed, "window": self.window,
                "piece_splits": self.piece_splits, "counts": self.counts, "failures": self.failures}
        (d / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return written + [d / "dataset.json"]


def load_dataset_meta(directory) -> dict:
    path = Path(directory) / "dataset.json"
    if not path.is_file():
        raise ManifestError(f"{path}: not a prepared dataset (run prepare first)")
    return json.loads(path.read_text())


def load_split(directory, name: str) -> WindowSet:
    d = Path(directory)
    if not (d / f"{name}_inputs.npy").is_file():
        raise ManifestError(f"{d}: split {name!r} has no windows")
    return WindowSet.load(d, name)


def prepare(rows: list[ManifestRow], root, seed: int = 0, window_size: int = WINDOW_SIZE,
            augmentation: bool = True) -> PreparedDataset:
    """Scale, augment, align and window every pair; failed pairs are recorded and skipped."""
    root = Path(root)
    pianists = pianist_vocabulary(rows)
    piece_splits = assign_splits(rows, seed)
    windows = {s: [] for s in SPLITS}
    labels = {s: [] for s in SPLITS}
    failures = []
    pairs = {s: 0 for s in SPLITS}
    for i, row in enumerate(rows):
        split = piece_splits[row.piece]
        pid = PianistId(pianists.index(row.pianist), row.pianist)
        try:
            score, perf = load_pair(row, root)
            score = scale_score_to_performance(score, perf)
            copies = augment(score, perf) if augmentation else [(score, perf)]
            got = [w for s, p in copies for w in pair_windows(s, p, pid, window_size)]
        except (AlignmentError, MidiError, TokenError, ValueError) as e:
            failures.append({"row": i, "performance": row.performance, "score": row.score, "error": str(e)})
            log.warning("row %d (%s): %s", i, row.performance, e)
            continue
        windows[split] += got
        labels[split] += [pid.index] * len(got)
        pairs[split] += 1
    sets = {s: WindowSet.from_windows(windows[s], labels[s]) if windows[s] else None for s in SPLITS}
    counts = {s: {"pieces": sum(1 for v in piece_splits.values() if v == s), "pairs": pairs[s],
                  "windows": len(windows[s])} for s in SPLITS}
    return PreparedDataset(sets, pianists, piece_splits, seed, window_size, failures, counts)
