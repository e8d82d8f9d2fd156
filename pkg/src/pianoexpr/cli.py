"""Command-line entry point: tokenize, prepare, train, render, eval, stats.

Every command writes into the directory given by ``--out`` and records the
files it produced, with sizes and SHA-256 digests, in ``run_manifest.json``.
Settings come from defaults, then the ``--config`` file (flat ``key = value``
lines), then ``--set key=value`` and ``--seed`` on the command line.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .dataset import ManifestError, load_dataset_meta, load_split, prepare, read_manifest
from .evaluation import (
    EvalError,
    distribution_overlap,
    evaluate_predictions,
    expression_curves,
    predict,
    velocity_kde,
    write_kde,
)
from .features import AlignedPair, AlignmentError, PianistId, build_model_io, reconstruct_performance
from .midi_io import MidiDocument, MidiError, NoteEvent, TOKEN_RESOLUTION, load_midi, rescale_resolution, save_midi
from .model import HEADS, ConfigError, ModelConfig, forward
from .tokenizer import TICKS_PER_BAR, TokenError, detokenize, dump_tokens, parse_tokens, tokenize
from .training import TrainConfig, TrainingError, TrainState, fit, load_model

log = logging.getLogger("pianoexpr")

DATA_ROOT_ENV = "EPR_DATA_ROOT"
MANIFEST_NAME = "run_manifest.json"
PREPARE_KEYS = {"augment": bool}

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignments(lines, source: str) -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key != "seed" and key not in _MODEL_KEYS | _TRAIN_KEYS | set(PREPARE_KEYS):
            raise CliError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = parse_value(value)
    return out


def load_settings(args) -> dict:
    settings = {}
    if args.config:
        path = Path(args.config)
        try:
            settings.update(parse_assignments(path.read_text().splitlines(), str(path)))
        except OSError as e:
            raise CliError(f"{path}: cannot read config ({e.strerror or e})") from e
    settings.update(parse_assignments(args.set or [], "--set"))
    if args.seed is not None:
        settings["seed"] = args.seed
    return settings


def split_settings(settings: dict) -> tuple[dict, dict]:
    model = {k: v for k, v in settings.items() if k in _MODEL_KEYS}
    train = {k: v for k, v in settings.items() if k in _TRAIN_KEYS}
    return model, train


# ---------------------------------------------------------------------------
# Run directory bookkeeping
# ---------------------------------------------------------------------------

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def record_outputs(out: Path, command: str, files, settings: dict | None = None) -> None:
    """Merge this command's outputs into the run manifest."""
    path = out / MANIFEST_NAME
    manifest = json.loads(path.read_text()) if path.is_file() else {"version": __version__, "commands": {}}
    entries = []
    for f in sorted({Path(f) for f in files}):
        entries.append({"path": f.relative_to(out).as_posix(), "bytes": f.stat().st_size, "sha256": sha256(f)})
    manifest["commands"][command] = {"settings": settings or {}, "files": entries}
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(f"{out}: cannot create output directory ({e.strerror or e})") from e
    return out


def slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_") or "unnamed"


def read_midi_file(path) -> MidiDocument:
    try:
        return rescale_resolution(load_midi(path), TOKEN_RESOLUTION)
    except OSError as e:
        raise CliError(f"{path}: cannot read ({e.strerror or e})") from e
    except MidiError as e:
        raise CliError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_tokenize(args) -> int:
    """MIDI -> token dump, or a ``.tokens`` dump back to MIDI."""
    src = Path(args.input)
    out = out_dir(args)
    if src.suffix == ".tokens":
        try:
            seq = parse_tokens(src.read_text())
        except OSError as e:
            raise CliError(f"{src}: cannot read ({e.strerror or e})") from e
        except TokenError as e:
            raise CliError(f"{src}: {e}") from e
        dest = out / f"{src.stem}.mid"
        save_midi(detokenize(seq), dest)
    else:
        try:
            seq = tokenize(read_midi_file(src))
        except TokenError as e:
            raise CliError(f"{src}: {e}") from e
        dest = out / f"{src.stem}.tokens"
        dest.write_text(dump_tokens(seq))
    print(f"{len(seq)} notes -> {dest}")
    record_outputs(out, "tokenize", [dest])
    return 0


def cmd_prepare(args) -> int:
    settings = load_settings(args)
    manifest = Path(args.manifest)
    root = Path(args.data_root or os.environ.get(DATA_ROOT_ENV) or manifest.parent)
    try:
        rows = read_manifest(manifest)
    except ManifestError as e:
        raise CliError(str(e)) from e
    window = int(settings.get("window", ModelConfig.window))
    data = prepare(rows, root, seed=int(settings.get("seed", 0)), window_size=window,
                   augmentation=bool(settings.get("augment", True)))
    out = out_dir(args)
    files = data.save(out)
    for name, c in data.counts.items():
        print(f"{name:<11} pieces {c['pieces']:>4}  pairs {c['pairs']:>5}  windows {c['windows']:>6}")
    for f in data.failures:
        print(f"error: row {f['row']} ({f['performance']}): {f['error']}", file=sys.stderr)
    record_outputs(out, "prepare", files, {**settings, "window": window})
    return 1 if data.failures else 0


def cmd_train(args) -> int:
    settings = load_settings(args)
    model_kw, train_kw = split_settings(settings)
    if "seed" in settings:
        model_kw["seed"] = train_kw["seed"] = settings["seed"]
    try:
        meta = load_dataset_meta(args.dataset)
        train = load_split(args.dataset, "train")
        val = load_split(args.dataset, "validation")
    except ManifestError as e:
        raise CliError(str(e)) from e
    out = out_dir(args)
    last = out / "last.ckpt"
    if args.resume:
        if not last.is_file():
            raise CliError(f"{last}: nothing to resume from")
        state = TrainState.load(last)
        if train_kw:
            state.train_config = dataclasses.replace(state.train_config, **train_kw)
        print(f"resuming at epoch {state.epoch}")
    else:
        if "window" in model_kw and model_kw["window"] != meta["window"]:
            raise CliError(f"window {model_kw['window']} does not match the dataset window {meta['window']}")
        model_kw.update(window=meta["window"], num_pianists=len(meta["pianists"]))
        try:
            state = TrainState.create(ModelConfig.from_dict(model_kw), TrainConfig.from_dict(train_kw),
                                      pianists=meta["pianists"])
        except (ConfigError, ValueError, TypeError) as e:
            raise CliError(f"bad configuration: {e}") from e
        for stale in ("train_log.jsonl", "best.ckpt", "last.ckpt"):
            (out / stale).unlink(missing_ok=True)
    result = fit(state, train, val, out)
    print(f"stopped after epoch {result.stopped_epoch}; best epoch {result.best_epoch} "
          f"val {result.best_val:.6f}")
    record_outputs(out, "train", [out / "best.ckpt", last, out / "train_log.jsonl"], settings)
    return 0


def find_pianist(label: str, known) -> int:
    for i, name in enumerate(known):
        if name == label or name.lower() == label.lower() or slug(name).lower() == slug(label).lower():
            return i
    raise CliError(f"unknown pianist {label!r}; known pianists: {', '.join(known)}")


def render_document(params, config: ModelConfig, score: MidiDocument, pianist: int) -> MidiDocument:
    """Predict a performance for a whole score, one window at a time.

    Each window is bar-rebased as in training; its predicted onsets are
    shifted back so absolute time continues across the seam, and the gap
    between windows is the score's gap there (the last IOI of a window is
    not predicted).
    """
    notes = score.notes
    out: list[NoteEvent] = []
    prev_last = None
    for start in range(0, len(notes), config.window):
        chunk = notes[start:start + config.window]
        shift = (chunk[0].onset // TICKS_PER_BAR) * TICKS_PER_BAR
        seq = tokenize(MidiDocument(TOKEN_RESOLUTION, [
            NoteEvent(n.pitch, n.onset - shift, n.offset - shift, n.velocity) for n in chunk]))
        io = build_model_io(AlignedPair(seq, seq, PianistId(pianist)), config.window)
        preds = forward(params, config, io, pianist)
        n = len(seq)
        anchor = chunk[0].onset if prev_last is None else prev_last + chunk[0].onset - notes[start - 1].onset
        offset = (anchor // TICKS_PER_BAR) * TICKS_PER_BAR
        perf = reconstruct_performance(seq, *(preds[h][:n] for h in HEADS), first_onset=anchor - offset)
        doc = detokenize(perf)
        out += [NoteEvent(x.pitch, x.onset + offset, x.offset + offset, x.velocity) for x in doc.notes]
        prev_last = offset + perf.onsets()[-1]
    return MidiDocument(TOKEN_RESOLUTION, out, list(score.tempos))


def load_checkpoint(path):
    try:
        return load_model(path)
    except OSError as e:
        raise CliError(f"{path}: cannot read checkpoint ({e.strerror or e})") from e
    except (CheckpointError, KeyError, ValueError) as e:
        raise CliError(f"{path}: {e}") from e


def cmd_render(args) -> int:
    params, config, known = load_checkpoint(args.checkpoint)
    pianist = find_pianist(args.pianist, known)
    score = read_midi_file(args.score)
    if not score.notes:
        raise CliError(f"{args.score}: score has no notes")
    try:
        doc = render_document(params, config, score, pianist)
    except (TokenError, AlignmentError) as e:
        raise CliError(f"{args.score}: {e}") from e
    out = out_dir(args)
    dest = out / f"{Path(args.score).stem}_{slug(known[pianist])}.mid"
    save_midi(doc, dest)
    print(f"{len(doc.notes)} notes -> {dest}")
    record_outputs(out, "render", [dest], {"pianist": known[pianist]})
    return 0


def token_velocity_to_midi(tokens) -> np.ndarray:
    t = np.clip(np.floor(np.asarray(tokens, dtype=np.float64) + 0.5), 0, 63)
    return t * 2 + 1


def cmd_eval(args) -> int:
    params, config, known = load_checkpoint(args.checkpoint)
    try:
        data = load_split(args.dataset, args.split)
    except ManifestError as e:
        raise CliError(str(e)) from e
    preds = predict(params, config, data, args.batch_size)
    try:
        report = evaluate_predictions(preds, data.targets, data.mask)
    except EvalError as e:
        raise CliError(f"{args.dataset}: {e}") from e
    out = out_dir(args)
    files = [out / "report.txt", out / "report.json"]
    files[0].write_text(report.to_text())
    files[1].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(report.to_text(), end="")
    overlaps = {}
    keep = data.mask != 0
    for k in np.unique(data.pianist):
        rows = data.pianist == k
        label = known[k] if k < len(known) else str(k)
        real = token_velocity_to_midi(data.targets[rows][..., 0][keep[rows]])
        gen = token_velocity_to_midi(preds["velocity"][rows][keep[rows]])
        if real.size < 2:
            continue
        curves = {"P": velocity_kde(real, f"{label} P"), "G": velocity_kde(gen, f"{label} G")}
        for tag, c in curves.items():
            path = out / f"kde_{slug(label)}_{tag}.txt"
            write_kde(path, c)
            files.append(path)
        overlaps[label] = distribution_overlap(curves["P"], curves["G"])
    files.append(out / "overlap.json")
    files[-1].write_text(json.dumps(overlaps, indent=2, sort_keys=True) + "\n")
    record_outputs(out, "eval", files, {"split": args.split})
    return 0


def read_groups(path) -> list[dict]:
    """JSON lines of {"path", "pianist", "group"}; group defaults to "P"."""
    rows = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise CliError(f"{path}: cannot read ({e.strerror or e})") from e
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rows.append({"path": rec["path"], "pianist": rec["pianist"], "group": rec.get("group", "P")})
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CliError(f"{path}:{lineno}: bad record ({e})") from e
    if not rows:
        raise CliError(f"{path}: no MIDI files listed")
    return rows


def cmd_stats(args) -> int:
    rows = read_groups(args.listing)
    root = Path(args.data_root or os.environ.get(DATA_ROOT_ENV) or Path(args.listing).parent)
    out = out_dir(args)
    velocities: dict[tuple[str, str], list[np.ndarray]] = {}
    files = []
    for r in rows:
        p = Path(r["path"])
        p = p if p.is_absolute() else root / p
        doc = read_midi_file(p)
        velocities.setdefault((r["pianist"], r["group"]), []).append(
            np.array([n.velocity for n in doc.notes], dtype=np.float64))
        if args.curves:
            try:
                c = expression_curves(tokenize(doc), args.window)
            except EvalError as e:
                log.warning("%s: no curves (%s)", p, e)
            else:
                dest = out / f"curves_{slug(r['pianist'])}_{slug(r['group'])}_{p.stem}.txt"
                np.savetxt(dest, np.column_stack([np.arange(len(c.velocity)), c.velocity, c.duration]),
                           fmt=["%d", "%.9g", "%.9g"], header="note velocity duration")
                files.append(dest)
    curves = {}
    for (pianist, group), vs in sorted(velocities.items()):
        try:
            curves[(pianist, group)] = c = velocity_kde(np.concatenate(vs), f"{pianist} {group}")
        except EvalError as e:
            raise CliError(f"{args.listing}: group {pianist}/{group}: {e}") from e
        dest = out / f"kde_{slug(pianist)}_{slug(group)}.txt"
        write_kde(dest, c)
        files.append(dest)
    keys = sorted(curves)
    matrix = [[distribution_overlap(curves[a], curves[b]) for b in keys] for a in keys]
    groups = sorted({g for _, g in keys}, key=lambda g: (g != "P", g))  # performances first
    pairs = {}
    for pianist in sorted({p for p, _ in keys}):
        for i, a in enumerate(groups):
            for b in groups[i + 1:]:
                if (pianist, a) in curves and (pianist, b) in curves:
                    pairs.setdefault(pianist, {})[f"{a} vs {b}"] = distribution_overlap(
                        curves[(pianist, a)], curves[(pianist, b)])
    dest = out / "overlap.json"
    dest.write_text(json.dumps({"labels": [f"{p} | {g}" for p, g in keys], "matrix": matrix, "pairs": pairs},
                               indent=2, sort_keys=True) + "\n")
    files.append(dest)
    for pianist, d in pairs.items():
        for k, v in d.items():
            print(f"{pianist:<24}{k:<14}{v:.4f}")
    record_outputs(out, "stats", files)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="run directory for all outputs")
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--seed", type=int, help="overrides the seed from the config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")

    parser = argparse.ArgumentParser(prog="pianoexpr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", parents=[common], help="MIDI to token dump (or .tokens back to MIDI)")
    p.add_argument("input")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("prepare", parents=[common], help="build train/validation/test windows from a manifest")
    p.add_argument("manifest")
    p.add_argument("--data-root", help=f"base for relative paths (default ${DATA_ROOT_ENV} or the manifest dir)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train on a prepared dataset")
    p.add_argument("dataset")
    p.add_argument("--resume", action="store_true", help="continue from last.ckpt in the run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render a score in one pianist's style")
    p.add_argument("score")
    p.add_argument("--pianist", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="losses, average errors and velocity KDEs on a split")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--batch-size", type=int, default=16)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", parents=[common], help="velocity KDEs and overlaps for a grouped MIDI set")
    p.add_argument("listing", help='JSON lines of {"path", "pianist", "group"}')
    p.add_argument("--data-root", help=f"base for relative paths (default ${DATA_ROOT_ENV} or the listing dir)")
    p.add_argument("--curves", action="store_true", help="also write smoothed expression curves per file")
    p.add_argument("--window", type=int, default=25, help="smoothing window for --curves")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
    except TrainingError as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror or e}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
