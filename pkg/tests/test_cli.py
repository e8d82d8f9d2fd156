import json

import numpy as np
import pytest

from pianoexpr.cli import CliError, main, parse_assignments, render_document
from pianoexpr.dataset import ManifestRow, assign_splits, read_manifest, split_counts
from pianoexpr.features import N_AUGMENT
from pianoexpr.midi_io import MidiDocument, NoteEvent, load_midi, save_midi
from pianoexpr.model import ModelConfig, init_params
from pianoexpr.synthetic import perform, random_score
from pianoexpr.tokenizer import parse_tokens

from pipeline_fixture import TINY_CONFIG, run_pipeline, write_corpus


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipe"))


class TestConfig:
    def test_parse(self):
        got = parse_assignments(["# c", "hidden_dim = 16", "gradnorm = false  # off", "dtype=float64",
                                 "initial_weights = [1, 1, 1]"], "x")
        assert got == {"hidden_dim": 16, "gradnorm": False, "dtype": "float64", "initial_weights": [1, 1, 1]}

    def test_unknown_key(self):
        with pytest.raises(CliError, match="x:2: unknown config key 'hiden'"):
            parse_assignments(["seed = 1", "hiden = 3"], "x")

    def test_missing_equals(self):
        with pytest.raises(CliError, match="key = value"):
            parse_assignments(["window 3"], "x")


class TestSplits:
    def test_ten_pieces(self):
        assert split_counts(10) == (8, 1, 1)
        rows = [ManifestRow(f"p{i}.mid", f"s{i}.mid", "A", f"piece{i}") for i in range(10)]
        got = assign_splits(rows, seed=0)
        assert sorted(got.values()).count("train") == 8
        assert list(got.values()).count("validation") == list(got.values()).count("test") == 1

    def test_seeded(self):
        rows = [ManifestRow("p", "s", "A", f"piece{i}") for i in range(20)]
        assert assign_splits(rows, 4) == assign_splits(rows, 4)
        assert any(assign_splits(rows, 4) != assign_splits(rows, s) for s in range(5, 10))

    def test_pinned_rows(self):
        rows = [ManifestRow("p", "s", "A", "x", split="test")] + [ManifestRow("p", "s", "A", f"y{i}") for i in range(9)]
        assert assign_splits(rows, 0)["x"] == "test"

    def test_manifest_errors(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"score": "a"}\n')
        with pytest.raises(ValueError, match="m.jsonl:1"):
            read_manifest(tmp_path / "m.jsonl")


class TestPrepare:
    def test_counts_and_split_containment(self, pipeline):
        meta = json.loads((pipeline["dataset"] / "dataset.json").read_text())
        assert {k: v["pieces"] for k, v in meta["counts"].items()} == {"train": 8, "validation": 1, "test": 1}
        # 40 notes in windows of 32 gives 2 windows per copy, 10 copies per pair, 2 pianists per piece
        for split, c in meta["counts"].items():
            assert c["pairs"] == 2 * c["pieces"]
            assert c["windows"] == c["pairs"] * N_AUGMENT * 2
        assert meta["seed"] == 3 and meta["window"] == 32
        assert meta["failures"] == []

    def test_failed_pair_reported_and_run_continues(self, tmp_path, capsys):
        manifest = write_corpus(tmp_path, pieces=3, pianists=1)
        bad = load_midi(tmp_path / "data" / "perf0_0.mid")
        bad.notes[5] = NoteEvent(bad.notes[5].pitch + 1, bad.notes[5].onset, bad.notes[5].offset, 60)
        save_midi(MidiDocument(bad.resolution, bad.notes), tmp_path / "data" / "perf0_0.mid")
        rc = main(["prepare", str(manifest), "--out", str(tmp_path / "ds"), "--set", "window=32"])
        assert rc == 1
        meta = json.loads((tmp_path / "ds" / "dataset.json").read_text())
        assert [f["row"] for f in meta["failures"]] == [0]
        assert sum(c["pairs"] for c in meta["counts"].values()) == 2
        assert "perf0_0.mid" in capsys.readouterr().err

    def test_data_root_env(self, tmp_path, monkeypatch):
        manifest = write_corpus(tmp_path / "corpus", pieces=3, pianists=1)
        moved = tmp_path / "elsewhere.jsonl"
        moved.write_text(manifest.read_text())
        monkeypatch.setenv("EPR_DATA_ROOT", str(manifest.parent))
        assert main(["prepare", str(moved), "--out", str(tmp_path / "ds"), "--set", "window=32"]) == 0

    def test_missing_manifest(self, tmp_path, capsys):
        assert main(["prepare", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "o")]) == 1
        assert "none.jsonl" in capsys.readouterr().err


class TestTrain:
    def test_writes_checkpoints_and_log(self, pipeline):
        assert pipeline["best"].is_file() and pipeline["last"].is_file()
        log = [json.loads(l) for l in pipeline["log"].read_text().splitlines()]
        assert [r["epoch"] for r in log] == [1, 2, 3]
        manifest = json.loads((pipeline["run"] / "run_manifest.json").read_text())
        assert {f["path"] for f in manifest["commands"]["train"]["files"]} == {
            "best.ckpt", "last.ckpt", "train_log.jsonl"}

    def test_resume_continues_epochs(self, pipeline, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        for name in ("last.ckpt", "train_log.jsonl", "best.ckpt"):
            (run / name).write_bytes(pipeline[{"last.ckpt": "last", "train_log.jsonl": "log",
                                               "best.ckpt": "best"}[name]].read_bytes())
        assert main(["train", str(pipeline["dataset"]), "--out", str(run), "--resume",
                     "--set", "max_epochs=5"]) == 0
        log = [json.loads(l)["epoch"] for l in (run / "train_log.jsonl").read_text().splitlines()]
        assert log == [1, 2, 3, 4, 5]

    def test_resume_without_checkpoint(self, pipeline, tmp_path, capsys):
        assert main(["train", str(pipeline["dataset"]), "--out", str(tmp_path), "--resume"]) == 1
        assert "last.ckpt" in capsys.readouterr().err

    def test_not_a_dataset(self, tmp_path, capsys):
        assert main(["train", str(tmp_path), "--out", str(tmp_path / "r")]) == 1
        assert "dataset.json" in capsys.readouterr().err


class TestRender:
    def test_note_count_and_velocity_range(self, pipeline, tmp_path):
        score = load_midi(pipeline["manifest"].parent / "score0.mid")
        out = load_midi(pipeline["midi"])
        assert len(out.notes) == len(score.notes)
        assert all(1 <= n.velocity <= 127 for n in out.notes)

    def test_pianists_differ(self, pipeline, tmp_path):
        args = [str(pipeline["manifest"].parent / "score1.mid"), "--checkpoint", str(pipeline["best"])]
        assert main(["render", *args, "--pianist", "Alfred Brendel", "--out", str(tmp_path / "a")]) == 0
        assert main(["render", *args, "--pianist", "Claudio Arrau", "--out", str(tmp_path / "b")]) == 0
        a = [n.velocity for n in load_midi(tmp_path / "a" / "score1_Alfred_Brendel.mid").notes]
        b = [n.velocity for n in load_midi(tmp_path / "b" / "score1_Claudio_Arrau.mid").notes]
        assert a != b

    def test_idempotent(self, pipeline, tmp_path):
        args = ["render", str(pipeline["manifest"].parent / "score0.mid"), "--pianist", "Alfred Brendel",
                "--checkpoint", str(pipeline["best"]), "--out", str(tmp_path)]
        assert main(args) == 0
        assert (tmp_path / "score0_Alfred_Brendel.mid").read_bytes() == pipeline["midi"].read_bytes()

    def test_unknown_pianist_lists_known(self, pipeline, tmp_path, capsys):
        rc = main(["render", str(pipeline["manifest"].parent / "score0.mid"), "--pianist", "Glenn Gould",
                   "--checkpoint", str(pipeline["best"]), "--out", str(tmp_path)])
        assert rc == 1
        err = capsys.readouterr().err
        assert "Glenn Gould" in err and "Alfred Brendel" in err and "Claudio Arrau" in err

    def test_onsets_continue_across_windows(self):
        cfg = ModelConfig(num_layers=1, num_heads=2, hidden_dim=8, ff_dim=16, window=16)
        score = random_score(50, 7)
        doc = render_document(init_params(cfg), cfg, score, 0)
        onsets = [n.onset for n in doc.notes]
        assert len(onsets) == 50 and onsets == sorted(onsets)
        assert onsets[0] == score.notes[0].onset


class TestEval:
    def test_report_and_kde_files(self, pipeline):
        text = pipeline["report"].read_text().splitlines()
        assert text[0].split()[:2] == ["Feature", "Loss"]
        assert [l[:22].strip() for l in text[1:]] == ["Velocity", "Duration Deviation", "Inter-Onset Interval"]
        ev = pipeline["eval"]
        names = {p.name for p in ev.iterdir()}
        assert {"kde_Alfred_Brendel_P.txt", "kde_Alfred_Brendel_G.txt", "overlap.json", "report.json"} <= names
        overlaps = json.loads((ev / "overlap.json").read_text())
        assert all(0 <= v <= 1 for v in overlaps.values())

    def test_empty_split(self, pipeline, tmp_path, capsys):
        ds = tmp_path / "ds"
        ds.mkdir()
        (ds / "dataset.json").write_text((pipeline["dataset"] / "dataset.json").read_text())
        assert main(["eval", str(pipeline["best"]), str(ds), "--out", str(tmp_path / "e")]) == 1
        assert "test" in capsys.readouterr().err


class TestTokenize:
    def test_round_trip(self, tmp_path, capsys):
        score = random_score(30, 2)
        save_midi(score, tmp_path / "s.mid")
        assert main(["tokenize", str(tmp_path / "s.mid"), "--out", str(tmp_path / "t")]) == 0
        assert "30 notes" in capsys.readouterr().out
        tokens = (tmp_path / "t" / "s.tokens").read_text()
        assert len(parse_tokens(tokens)) == 30 and len(tokens.splitlines()) == 30
        assert main(["tokenize", str(tmp_path / "t" / "s.tokens"), "--out", str(tmp_path / "m")]) == 0
        back = load_midi(tmp_path / "m" / "s.mid")
        assert [(n.pitch, n.onset, n.offset) for n in back.notes] == [(n.pitch, n.onset, n.offset) for n in score.notes]

    def test_unreadable(self, tmp_path, capsys):
        assert main(["tokenize", str(tmp_path / "missing.mid"), "--out", str(tmp_path)]) == 1
        assert "missing.mid" in capsys.readouterr().err

    def test_not_midi(self, tmp_path, capsys):
        (tmp_path / "x.mid").write_bytes(b"hello")
        assert main(["tokenize", str(tmp_path / "x.mid"), "--out", str(tmp_path)]) == 1
        assert "x.mid" in capsys.readouterr().err


class TestStats:
    def test_groups_and_overlap(self, tmp_path):
        score = random_score(60, 1)
        rows = []
        for p, name in ((0, "A"), (1, "B")):
            save_midi(perform(score, p), tmp_path / f"p{p}.mid")
            rows.append({"path": f"p{p}.mid", "pianist": name})
        rows.append({"path": "p0.mid", "pianist": "A", "group": "G-TS"})
        (tmp_path / "l.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
        out = tmp_path / "st"
        assert main(["stats", str(tmp_path / "l.jsonl"), "--out", str(out), "--curves"]) == 0
        assert {p.name for p in out.glob("kde_*")} == {"kde_A_P.txt", "kde_B_P.txt", "kde_A_G_TS.txt"}
        assert len(list(out.glob("curves_*"))) == 3
        ov = json.loads((out / "overlap.json").read_text())
        assert ov["pairs"]["A"]["P vs G-TS"] == pytest.approx(1.0, abs=1e-6)
        m = np.array(ov["matrix"])
        assert m.shape == (3, 3) and np.allclose(m, m.T) and np.allclose(np.diag(m), 1, atol=1e-6)

    def test_empty_listing(self, tmp_path, capsys):
        (tmp_path / "l.jsonl").write_text("")
        assert main(["stats", str(tmp_path / "l.jsonl"), "--out", str(tmp_path)]) == 1
        assert "l.jsonl" in capsys.readouterr().err


def test_end_to_end_determinism(tmp_path, pipeline):
    again = run_pipeline(tmp_path)
    for key in ("best", "last", "log", "midi", "report"):
        assert again[key].read_bytes() == pipeline[key].read_bytes(), key


def test_config_file_used(tmp_path, pipeline):
    (tmp_path / "c.cfg").write_text(TINY_CONFIG.replace("max_epochs = 3", "max_epochs = 2"))
    assert main(["train", str(pipeline["dataset"]), "--out", str(tmp_path / "r"), "--config",
                 str(tmp_path / "c.cfg"), "--set", "hidden_dim=8", "--set", "patience=1"]) == 0
    log = (tmp_path / "r" / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 2
