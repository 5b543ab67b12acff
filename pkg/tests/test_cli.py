"""Command line behaviour: exit codes, option precedence, end-to-end flows.

Most tests drive ``cli.main`` in-process for speed; two subprocess tests prove
the module entry point and the long-running server actually work from a shell.
"""

import json
import subprocess
import sys
import urllib.request

import pytest

from ravqa import cli
from ravqa import data as dat
from ravqa.annotate import AnnotationStore, MockGeneratorClient, ReviewVerdict
from ravqa.model import GatedFusionModel

GOLDEN_HELP = """\
usage: ravqa [-h] COMMAND ...

Rationale-augmented visual question answering workbench.

positional arguments:
  COMMAND
    synth         write a synthetic corpus manifest
    stats         print dataset statistics for manifests
    train         train a model on a manifest's train split
    eval          score a trained model on a manifest split
    generate      answer one manifest sample with a trained model
    annotate-clean
                  drop answer-inconsistent samples from a manifest
    serve         run the annotation review HTTP service
    export        write reviewed rationales from an event log

options:
  -h, --help      show this help message and exit
"""

FAST_MODEL = ["--d", "16", "--heads", "2", "--batch-size", "8"]


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture()
def corpus(tmp_path):
    path = tmp_path / "corpus.jsonl.gz"
    assert run_cli("synth", "--out", path, "--n", 60, "--seed", 0) == 0
    return path


class TestParsing:
    def test_golden_help(self):
        proc = subprocess.run(
            [sys.executable, "-m", "ravqa.cli", "--help"],
            capture_output=True, text=True, env={"COLUMNS": "80", "PATH": "/usr/bin:/bin"},
        )
        assert proc.returncode == 0
        assert proc.stdout == GOLDEN_HELP

    def test_no_command_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run_cli()
        assert exc.value.code == 2

    def test_unknown_flag_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("synth", "--nope")
        assert exc.value.code == 2

    def test_missing_required_flag_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("synth", "--n", 5)
        assert exc.value.code == 2


class TestExitCodes:
    def test_missing_manifest_maps_to_data_error(self, tmp_path, capsys):
        code = run_cli("stats", tmp_path / "absent.jsonl.gz")
        assert code == cli.EXIT_DATA
        assert "error:" in capsys.readouterr().err

    def test_unknown_sample_id_maps_to_data_error(self, tmp_path, corpus, capsys):
        model = tmp_path / "m.npz"
        assert run_cli("train", "--manifest", corpus, "--out", model,
                       "--epochs", 1, *FAST_MODEL) == 0
        assert run_cli("generate", "--manifest", corpus, "--model", model,
                       "--id", "no-such-id") == cli.EXIT_DATA

    def test_model_without_vocab_maps_to_checkpoint_error(self, tmp_path, corpus, capsys):
        from ravqa.model import ModelConfig

        bare = tmp_path / "bare.npz"
        GatedFusionModel(ModelConfig(vocab_size=16, d=16, heads=2)).save(bare)
        code = run_cli("eval", "--manifest", corpus, "--model", bare)
        assert code == cli.EXIT_CHECKPOINT
        assert "vocab" in capsys.readouterr().err

    def test_missing_event_log_maps_to_data_error(self, tmp_path):
        code = run_cli("export", "--log", tmp_path / "none.jsonl", "--out", tmp_path / "o.gz")
        assert code == cli.EXIT_DATA

    def test_bad_config_file_maps_to_data_error(self, tmp_path, corpus, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs = not-a-number\n")
        code = run_cli("train", "--manifest", corpus, "--out", tmp_path / "m.npz",
                       "--config", cfg)
        assert code == cli.EXIT_DATA
        assert "bad.cfg:1" in capsys.readouterr().err


class TestSynthStats:
    def test_synth_writes_a_loadable_manifest(self, tmp_path, capsys):
        path = tmp_path / "c.jsonl.gz"
        assert run_cli("synth", "--out", path, "--n", 25, "--seed", 3) == 0
        assert "wrote 25 samples" in capsys.readouterr().out
        assert len(dat.load_manifest(path)) == 25

    def test_stats_concatenates_manifests(self, tmp_path, corpus, capsys):
        other = tmp_path / "extra.jsonl.gz"
        run_cli("synth", "--out", other, "--n", 10, "--seed", 9)
        capsys.readouterr()
        assert run_cli("stats", corpus, other) == 0
        out = capsys.readouterr().out
        assert "70" in out and "synthetic" in out

    def test_stats_with_nothing_to_read_fails(self, capsys):
        assert run_cli("stats") == cli.EXIT_DATA


class TestTrainEvalGenerate:
    def test_full_flow(self, tmp_path, corpus, capsys):
        model = tmp_path / "m.npz"
        code = run_cli("train", "--manifest", corpus, "--out", model,
                       "--strategy", "explanation", "--epochs", 3,
                       "--lr", 5e-3, *FAST_MODEL)
        assert code == 0
        out = capsys.readouterr().out
        assert "config: strategy=explanation epochs=3" in out
        assert "saved:" in out and "params=" in out

        assert run_cli("eval", "--manifest", corpus, "--model", model, "--kv") == 0
        kv = dict(line.split("=", 1) for line in
                  capsys.readouterr().out.strip().splitlines())
        assert kv["strategy"] == "explanation"
        assert int(kv["samples"]) == len(
            [s for s in dat.load_manifest(corpus) if s.split == "test"])

        sample_id = dat.load_manifest(corpus)[0].id
        assert run_cli("generate", "--manifest", corpus, "--model", model,
                       "--id", sample_id) == 0
        lines = capsys.readouterr().out
        assert "question:" in lines and "answer:" in lines and "parse_ok:" in lines

    def test_strategy_round_trips_through_model_meta(self, tmp_path, corpus):
        model = tmp_path / "m.npz"
        run_cli("train", "--manifest", corpus, "--out", model,
                "--strategy", "reasoning", "--epochs", 1, *FAST_MODEL)
        _, meta = GatedFusionModel.load(model)
        assert meta["strategy"] == "reasoning"
        assert isinstance(meta["vocab"], list) and "Answer:" in meta["vocab"]

    def test_two_stage_writes_both_models(self, tmp_path, corpus, capsys):
        model = tmp_path / "pair.npz"
        code = run_cli("train", "--manifest", corpus, "--out", model,
                       "--strategy", "two-stage", "--epochs", 1,
                       "--stage2-epochs", 1, *FAST_MODEL)
        assert code == 0
        stage2 = tmp_path / "pair.stage2.npz"
        assert stage2.exists()
        out = capsys.readouterr().out
        assert "stage=1" in out and "stage=2" in out
        assert run_cli("eval", "--manifest", corpus, "--model", model, "--kv") == 0

    def test_two_stage_eval_without_second_model_fails(self, tmp_path, corpus, capsys):
        model = tmp_path / "pair.npz"
        run_cli("train", "--manifest", corpus, "--out", model,
                "--strategy", "two-stage", "--epochs", 1, "--stage2-epochs", 1,
                *FAST_MODEL)
        (tmp_path / "pair.stage2.npz").unlink()
        code = run_cli("eval", "--manifest", corpus, "--model", model)
        assert code == cli.EXIT_CHECKPOINT
        assert "answer-stage" in capsys.readouterr().err

    def test_eval_split_with_no_rows_fails(self, tmp_path, corpus):
        model = tmp_path / "m.npz"
        run_cli("train", "--manifest", corpus, "--out", model, "--epochs", 1, *FAST_MODEL)
        assert run_cli("eval", "--manifest", corpus, "--model", model,
                       "--split", "validation") == cli.EXIT_DATA


class TestOptionPrecedence:
    def test_config_file_beats_defaults(self, tmp_path, corpus, capsys):
        cfg = tmp_path / "t.cfg"
        cfg.write_text("epochs = 2\nlr = 1e-3\nstrategy = reasoning\nbatch-size = 8\n")
        run_cli("train", "--manifest", corpus, "--out", tmp_path / "m.npz",
                "--config", cfg, "--d", 16, "--heads", 2)
        head = capsys.readouterr().out.splitlines()[0]
        assert "strategy=reasoning" in head and "epochs=2" in head and "lr=0.001" in head

    def test_cli_flag_beats_config_file(self, tmp_path, corpus, capsys):
        cfg = tmp_path / "t.cfg"
        cfg.write_text("epochs = 9\nbatch-size = 8\n")
        run_cli("train", "--manifest", corpus, "--out", tmp_path / "m.npz",
                "--config", cfg, "--epochs", 1, "--d", 16, "--heads", 2)
        assert "epochs=1" in capsys.readouterr().out.splitlines()[0]

    def test_preset_sets_epochs_and_explicit_epochs_beats_it(self, tmp_path, corpus, capsys):
        run_cli("train", "--manifest", corpus, "--out", tmp_path / "a.npz",
                "--preset", "r-path", "--epochs", 1, *FAST_MODEL)
        assert "epochs=1" in capsys.readouterr().out.splitlines()[0]
        code = run_cli("train", "--manifest", corpus, "--out", tmp_path / "b.npz",
                       "--preset", "unknown-set")
        assert code == cli.EXIT_DATA


class TestResume:
    def test_cli_resume_matches_straight_run(self, tmp_path, corpus, capsys):
        ckpt = tmp_path / "c.npz"
        run_cli("train", "--manifest", corpus, "--out", tmp_path / "short.npz",
                "--strategy", "explanation", "--epochs", 2, "--checkpoint", ckpt,
                *FAST_MODEL)
        run_cli("train", "--manifest", corpus, "--out", tmp_path / "resumed.npz",
                "--resume", ckpt, "--epochs", 4)
        run_cli("train", "--manifest", corpus, "--out", tmp_path / "straight.npz",
                "--strategy", "explanation", "--epochs", 4, *FAST_MODEL)
        resumed, _ = GatedFusionModel.load(tmp_path / "resumed.npz")
        straight, _ = GatedFusionModel.load(tmp_path / "straight.npz")
        assert resumed.param_hash() == straight.param_hash()

    def test_resume_from_garbage_maps_to_checkpoint_error(self, tmp_path, corpus):
        model = tmp_path / "m.npz"
        run_cli("train", "--manifest", corpus, "--out", model, "--epochs", 1, *FAST_MODEL)
        code = run_cli("train", "--manifest", corpus, "--out", tmp_path / "r.npz",
                       "--resume", model)
        assert code == cli.EXIT_CHECKPOINT


class TestAnnotateClean:
    def test_conflicting_rows_are_dropped(self, tmp_path, capsys):
        base = dict(qtype="closed", split="train")
        rows = [
            dat.VqaSample(id="a", image_ref="img-1", question="Is the heart enlarged?",
                          answer="yes", **base),
            dat.VqaSample(id="b", image_ref="img-1", question="is the heart enlarged ?",
                          answer="no", **base),
            dat.VqaSample(id="c", image_ref="img-2", question="Is the heart enlarged?",
                          answer="yes", **base),
        ]
        manifest = tmp_path / "m.jsonl.gz"
        dat.save_manifest(manifest, rows)
        out = tmp_path / "clean.jsonl.gz"
        assert run_cli("annotate-clean", "--manifest", manifest, "--out", out) == 0
        text = capsys.readouterr().out
        assert "conflict [duplicate-question]" in text
        assert "kept 1 of 3" in text
        assert [s.id for s in dat.load_manifest(out)] == ["c"]

    def test_clean_corpus_passes_through(self, tmp_path, corpus, capsys):
        out = tmp_path / "clean.jsonl.gz"
        assert run_cli("annotate-clean", "--manifest", corpus, "--out", out) == 0
        assert "kept 60 of 60" in capsys.readouterr().out


class TestServeExport:
    def test_export_round_trips_an_event_log(self, tmp_path, capsys):
        log = tmp_path / "events.jsonl"
        store = AnnotationStore(log)
        store.add_samples(dat.synth_generate(2, seed=1))
        client = MockGeneratorClient(seed=0)
        rec = store.records()[0]
        rec = store.request_generation(rec.id, rec.version, client)
        store.record_review(rec.id, rec.version,
                            ReviewVerdict(accurate=True, relevant=True, complete=True))
        out = tmp_path / "annotated.jsonl.gz"
        assert run_cli("export", "--log", log, "--out", out, "--mode", "strict") == 0
        assert "exported 1 annotated samples" in capsys.readouterr().out
        exported = dat.load_manifest(out)
        assert len(exported) == 1 and exported[0].rationale

    def test_serve_subprocess_answers_health(self, tmp_path):
        proc = subprocess.Popen(
            [sys.executable, "-m", "ravqa.cli", "serve", "--port", "0", "--demo", "2"],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True,
        )
        try:
            line = proc.stdout.readline()
            assert line.startswith("listening on http://127.0.0.1:")
            port = int(line.split(":")[2].split()[0])
            with urllib.request.urlopen(
                    f"http://127.0.0.1:{port}/api/health", timeout=5) as resp:
                body = json.load(resp)
            assert body == {"status": "ok", "records": 2}
        finally:
            proc.terminate()
            proc.wait(timeout=10)
