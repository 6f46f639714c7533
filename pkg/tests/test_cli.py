"""Command-line surface: subcommand wiring, exit codes, reproducibility."""

import json

import pytest

from sparsesep.cli import main
from sparsesep.mixer import read_manifest

MODEL_CFG = {"kernel": 40, "n_filters": 8, "n_stacks": 1, "layers_per_stack": 2,
             "tcn_kernel": 3, "bottleneck": 8, "hidden": 8, "embed_dim": 4,
             "n_mels": 8, "fft_size": 512, "sample_rate": 16000,
             "vad_tap": 1, "vad_branch": True}
TRAIN_CFG = {"lr0": 0.001, "plateau_patience": 3, "lr_factor": 0.5,
             "max_epochs": 2, "batch_size": 3, "clip_seconds": 1.0, "lam": 5.0,
             "mode": "joint", "seed": 0, "grad_clip_norm": 5.0,
             "embedding_provider": "lookup"}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """synth -> mix -> train once; downstream tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    (root / "model_cfg.json").write_text(json.dumps(MODEL_CFG))
    (root / "train_cfg.json").write_text(json.dumps(TRAIN_CFG))
    assert main(["synth", "--speakers", "2", "--utts-per-speaker", "2",
                 "--duration", "2.0", "--seed", "5",
                 "--out", str(root / "src")]) == 0
    assert main(["mix", "--mode", "max", "--manifest-in",
                 str(root / "src" / "sources.jsonl"), "--out",
                 str(root / "mixes"), "--count", "6", "--seed", "5"]) == 0
    assert main(["mix", "--mode", "max", "--manifest-in",
                 str(root / "src" / "sources.jsonl"), "--out",
                 str(root / "val"), "--count", "3", "--seed", "6"]) == 0
    assert main(["train", "--config", str(root / "train_cfg.json"),
                 "--model-config", str(root / "model_cfg.json"),
                 "--data", str(root / "mixes" / "manifest.jsonl"),
                 "--val", str(root / "val" / "manifest.jsonl"),
                 "--out", str(root / "run")]) == 0
    return root


class TestSynth:
    def test_outputs(self, workspace):
        src = workspace / "src"
        assert (src / "sources.jsonl").exists()
        assert (src / "speakers.json").exists()
        assert (src / "spk00_enroll.wav").exists()
        records = read_manifest(src / "sources.jsonl")
        assert len(records) == 4  # 2 speakers x 2 utterances

    def test_reproducible(self, tmp_path):
        for tag in ("a", "b"):
            assert main(["synth", "--speakers", "2", "--utts-per-speaker", "1",
                         "--duration", "1.0", "--seed", "9",
                         "--out", str(tmp_path / tag)]) == 0
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert ((tmp_path / "a" / name).read_bytes()
                    == (tmp_path / "b" / name).read_bytes()), name


class TestMix:
    def test_manifest_fields(self, workspace):
        records = read_manifest(workspace / "mixes" / "manifest.jsonl")
        assert len(records) == 6
        for rec in records:
            assert {"mixture_path", "target_path", "vad_path", "speaker_id",
                    "overlap_ratio", "mode", "snr_db", "seed"} <= set(rec)
            assert rec["enroll_path"]

    def test_min_mode_full_overlap(self, workspace, tmp_path):
        assert main(["mix", "--mode", "min", "--manifest-in",
                     str(workspace / "src" / "sources.jsonl"),
                     "--out", str(tmp_path / "minmix"), "--count", "3",
                     "--seed", "2"]) == 0
        for rec in read_manifest(tmp_path / "minmix" / "manifest.jsonl"):
            assert rec["overlap_ratio"] == 1.0

    def test_overlap_targets_switch(self, workspace, tmp_path):
        assert main(["mix", "--manifest-in",
                     str(workspace / "src" / "sources.jsonl"),
                     "--out", str(tmp_path / "sparse"), "--count", "4",
                     "--seed", "3", "--noise-prob", "0",
                     "--overlap-targets", "0.0,0.5"]) == 0
        records = [r for r in read_manifest(tmp_path / "sparse" / "manifest.jsonl")
                   if not r.get("skipped")]
        assert records
        assert {r["bucket"] for r in records} <= {0.0, 0.5}


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace / "run"
        for name in ("model.ckpt", "config.json", "train_config.json",
                     "stats.csv", "stats.png"):
            assert (run / name).exists(), name

    def test_stats_rows(self, workspace):
        lines = (workspace / "run" / "stats.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr,seconds"
        assert len(lines) == 1 + TRAIN_CFG["max_epochs"]


class TestSeparate:
    def test_by_speaker_id(self, workspace, tmp_path, capsys):
        rec = read_manifest(workspace / "mixes" / "manifest.jsonl")[0]
        out = tmp_path / "sep.wav"
        assert main(["separate", "--model", str(workspace / "run"),
                     "--input", str(workspace / "mixes" / rec["mixture_path"]),
                     "--speaker-id", rec["speaker_id"], "--out", str(out)]) == 0
        assert out.exists()
        echo = capsys.readouterr().out.splitlines()[0]
        assert json.loads(echo.removeprefix("config: "))["gamma"] == 0.4

    def test_by_enrollment(self, workspace, tmp_path):
        rec = read_manifest(workspace / "mixes" / "manifest.jsonl")[0]
        assert main(["separate", "--model", str(workspace / "run"),
                     "--input", str(workspace / "mixes" / rec["mixture_path"]),
                     "--enroll", str(workspace / "src" / f"{rec['speaker_id']}_enroll.wav"),
                     "--out", str(tmp_path / "sep.wav")]) == 0

    def test_early_exit_flag(self, workspace, tmp_path):
        rec = read_manifest(workspace / "mixes" / "manifest.jsonl")[0]
        assert main(["separate", "--model", str(workspace / "run"),
                     "--input", str(workspace / "mixes" / rec["mixture_path"]),
                     "--speaker-id", rec["speaker_id"], "--early-exit-k", "1",
                     "--out", str(tmp_path / "sep.wav")]) == 0

    def test_reproducible(self, workspace, tmp_path):
        rec = read_manifest(workspace / "mixes" / "manifest.jsonl")[0]
        outs = []
        for tag in ("a.wav", "b.wav"):
            out = tmp_path / tag
            assert main(["separate", "--model", str(workspace / "run"),
                         "--input", str(workspace / "mixes" / rec["mixture_path"]),
                         "--speaker-id", rec["speaker_id"], "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestEval:
    def test_report_and_figure(self, workspace, tmp_path):
        report = tmp_path / "eval.csv"
        assert main(["eval", "--model", str(workspace / "run"),
                     "--manifest", str(workspace / "val" / "manifest.jsonl"),
                     "--report", str(report)]) == 0
        lines = report.read_text().splitlines()
        assert lines[0] == "bucket,n,SDRi_mean,SISNRi_mean,n_silent_flagged"
        assert lines[-1].startswith("average,")
        assert (tmp_path / "eval.png").exists()


class TestBenchRtf:
    def test_sweep(self, workspace, tmp_path):
        report = tmp_path / "rtf.csv"
        assert main(["bench-rtf", "--model", str(workspace / "run"),
                     "--manifest", str(workspace / "val" / "manifest.jsonl"),
                     "--k-sweep", "1", "--gate-from-labels",
                     "--report", str(report)]) == 0
        lines = report.read_text().splitlines()
        assert lines[0] == "k,SDRi_mean,SISNRi_mean,RTF"
        assert len(lines) == 2
        assert (tmp_path / "rtf.png").exists()


class TestErrors:
    def test_usage_error_exit_1(self, capsys):
        assert main(["separate", "--model"]) == 1
        assert "ERROR[usage]" in capsys.readouterr().err

    def test_unknown_command_exit_1(self):
        assert main(["frobnicate"]) == 1

    def test_missing_data_exit_2(self, tmp_path, capsys):
        assert main(["mix", "--manifest-in", str(tmp_path / "nope.jsonl"),
                     "--out", str(tmp_path / "o"), "--count", "1"]) == 2
        assert "ERROR[data]" in capsys.readouterr().err

    def test_missing_model_exit_2(self, workspace, tmp_path):
        assert main(["eval", "--model", str(tmp_path / "nothing"),
                     "--manifest", str(workspace / "val" / "manifest.jsonl"),
                     "--report", str(tmp_path / "r.csv")]) == 2
