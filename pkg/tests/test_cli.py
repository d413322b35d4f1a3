import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from oneshot_vc import dsp
from oneshot_vc.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from oneshot_vc.corpus import Manifest, build_speaker, read_wav, synth_utterance, STYLES, write_wav
from oneshot_vc.tensorio import read_tensor
from conftest import tiny_spec


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config, corpus and features for a tiny end-to-end CLI run."""
    root = tmp_path_factory.mktemp("cli")
    config = {
        "paths": {"corpus": str(root / "corpus"), "features": str(root / "features"),
                  "checkpoints": str(root / "ck"), "reports": str(root / "reports" / "report")},
        "seed": 0,
        "model": tiny_spec().to_dict(),
        "phases": {"1": {"epochs": 2, "finetune_epochs": 1, "batch_size": 4, "crop_frames": 32},
                   "2": {"epochs": 2, "batch_size": 4, "crop_frames": 32},
                   "3": {"steps": 3}},
        "corpus": {"n_speakers": 3, "utts_per_speaker": 4, "test_per_speaker": 1, "duration_range": [1.0, 1.3]},
    }
    cfg = root / "config.json"
    cfg.write_text(json.dumps(config))
    assert main(["--config", str(cfg), "corpus"]) == EXIT_OK
    assert main(["--config", str(cfg), "features"]) == EXIT_OK
    return root, cfg


def run(cfg, *args):
    return main(["--config", str(cfg), *args])


def record(path):
    return json.loads(path.read_text())


def test_corpus_record_is_stable(workspace, capsys):
    root, cfg = workspace
    first = record(root / "corpus" / "run_record.json")
    assert run(cfg, "corpus") == EXIT_OK
    assert "manifest:" in capsys.readouterr().out
    second = record(root / "corpus" / "run_record.json")
    assert first["manifest_hash"] == second["manifest_hash"]
    assert first["record_hash"] == second["record_hash"]
    assert first["started"] and second["finished"]


def test_corpus_unwritable_target_exits_2_naming_path(workspace, tmp_path, capsys):
    _, cfg = workspace
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert run(cfg, "corpus", "--out", str(blocker)) == EXIT_USAGE
    assert str(blocker) in capsys.readouterr().err


def test_features_counts_and_idempotence(workspace, capsys):
    root, cfg = workspace
    manifest = Manifest.load(root / "corpus")
    for kind in ("mel", "prosody", "content"):
        assert len(list((root / "features").glob(f"*.{kind}.bin"))) == len(manifest)
    assert run(cfg, "features") == EXIT_OK
    assert "files written: 0" in capsys.readouterr().out
    assert record(root / "features" / "run_record.json")["feature_summary"]["written"] == 0


def test_features_corrupt_wav_exits_3_and_completes_rest(workspace, tmp_path, capsys):
    root, cfg = workspace
    corpus = tmp_path / "corpus"
    shutil.copytree(root / "corpus", corpus)
    shutil.copytree(root / "features" / "toy_encoder", tmp_path / "features" / "toy_encoder")
    manifest = Manifest.load(corpus)
    bad = manifest.records[3]
    manifest.resolve(bad.path).write_bytes(b"garbage")
    code = run(cfg, "features", "--manifest", str(corpus), "--out", str(tmp_path / "features"))
    captured = capsys.readouterr()
    assert code == EXIT_DATA
    assert bad.id in captured.err
    assert f"rows completed: {len(manifest) - 1}" in captured.out


@pytest.fixture(scope="module")
def trained(workspace):
    root, cfg = workspace
    assert run(cfg, "train", "--phase", "1") == EXIT_OK
    assert run(cfg, "train", "--phase", "2") == EXIT_OK
    held = Manifest.load(root / "corpus").by_split("heldout")[0]
    speaker = build_speaker(0, int(held.speaker[3:]))
    utt = root / "target_3p5.wav"
    write_wav(utt, synth_utterance(speaker, "aeiouai", STYLES["neutral"], 3.5, seed=1).audio)
    assert run(cfg, "train", "--phase", "3", "--utterance", str(utt), "--speaker", held.speaker) == EXIT_OK
    return root, cfg, utt


def test_train_writes_checkpoints_and_logs(trained):
    root, _, _ = trained
    for phase in (1, 2, 3):
        meta = json.loads((root / "ck" / f"phase{phase}" / "meta.json").read_text())
        lines = (root / "ck" / f"phase{phase}.log.jsonl").read_text().splitlines()
        assert meta["phase"] == phase and len(lines) == meta["steps"]
    assert len((root / "ck" / "phase3.log.jsonl").read_text().splitlines()) == 3


def test_train_dependency_and_utterance_errors(trained, tmp_path, capsys):
    root, cfg, utt = trained
    assert run(cfg, "train", "--phase", "2", "--base", str(tmp_path / "none")) == EXIT_USAGE
    assert run(cfg, "train", "--phase", "3", "--utterance", str(utt), "--utterance", str(utt)) == EXIT_USAGE
    assert run(cfg, "train", "--phase", "3") == EXIT_USAGE
    assert "exactly one" in capsys.readouterr().err


def test_convert_artifacts_and_duration(trained, tmp_path):
    root, cfg, utt = trained
    src = Manifest.load(root / "corpus").by_split("test")[0]
    src_path = root / "corpus" / src.path
    out = tmp_path / "out" / "converted.wav"
    assert run(cfg, "convert", "--source", str(src_path), "--target-ref", str(utt),
               "--checkpoint", str(root / "ck" / "phase3"), "--out", str(out)) == EXIT_OK
    assert out.exists() and out.with_suffix(".png").exists()
    mel = read_tensor(out.with_suffix(".mel.bin")).values
    src_audio, conv = read_wav(src_path), read_wav(out)
    assert len(mel) == dsp.num_frames(len(src_audio.samples))
    assert abs(conv.duration - src_audio.duration) <= dsp.HOP_LENGTH / dsp.SAMPLE_RATE
    assert record(out.with_suffix(".run_record.json"))["warnings"] == []


def test_convert_warns_on_unadapted_checkpoint(trained, tmp_path):
    root, cfg, utt = trained
    src = root / "corpus" / Manifest.load(root / "corpus").by_split("test")[0].path
    out = tmp_path / "c.wav"
    with pytest.warns(UserWarning, match="not adapted"):
        code = run(cfg, "convert", "--source", str(src), "--target-ref", str(utt),
                   "--checkpoint", str(root / "ck" / "phase2"), "--out", str(out))
    assert code == EXIT_OK
    assert record(out.with_suffix(".run_record.json"))["warnings"]


def test_convert_missing_target_ref_exits_2(trained):
    root, cfg, utt = trained
    assert run(cfg, "convert", "--source", str(utt), "--checkpoint", str(root / "ck" / "phase3"),
               "--out", "x.wav") == EXIT_USAGE


def test_eval_mcd_identical_prints_zero(trained, capsys):
    _, cfg, utt = trained
    assert run(cfg, "eval", "mcd", str(utt), str(utt)) == EXIT_OK
    assert capsys.readouterr().out.strip() == "0.0"


def test_eval_prosody_corr_pairs_and_mismatch(trained, tmp_path, capsys):
    root, cfg, utt = trained
    recs = Manifest.load(root / "corpus").by_split("test")
    pairs = [{"source": str(root / "corpus" / r.path), "converted": str(root / "corpus" / r.path)} for r in recs]
    (tmp_path / "pairs.json").write_text(json.dumps(pairs))
    stem = tmp_path / "pc"
    assert run(cfg, "eval", "prosody-corr", "--pairs", str(tmp_path / "pairs.json"), "--out", str(stem)) == EXIT_OK
    data = json.loads(stem.with_suffix(".json").read_text())
    assert data["n_pairs"] == len(recs)
    assert data["systems"]["system"]["aggregate"]["lf0"] == pytest.approx(1.0)
    assert "Energy" in capsys.readouterr().out
    assert run(cfg, "eval", "prosody-corr", "--source", str(utt), "--source", str(utt),
               "--converted", str(utt)) == EXIT_USAGE


def test_eval_duration_sweep_explicit_lists(trained, tmp_path):
    root, cfg, utt = trained
    manifest = Manifest.load(root / "corpus")
    held = manifest.by_split("heldout")[0].speaker
    clips = [str(root / "corpus" / r.path) for r in manifest if r.speaker == held] + [str(utt)] * 3
    src = manifest.by_split("test")[0]
    truth = tmp_path / "truth.wav"
    from oneshot_vc.corpus import parallel_rendition
    write_wav(truth, parallel_rendition(manifest, src, held).audio)
    args = ["eval", "duration-sweep", "--checkpoint", str(root / "ck" / "phase2"), "--steps", "2",
            "--source", str(root / "corpus" / src.path), "--ground-truth", str(truth), "--out", str(tmp_path / "ds")]
    for c in clips:
        args += ["--target-audio", c]
    assert run(cfg, *args) == EXIT_OK
    rows = json.loads((tmp_path / "ds.json").read_text())["rows"]
    assert [r["duration"] for r in rows] == [1.0, 3.0, 6.0, 9.0, 15.0]
    assert all(-1 <= r["r_lf0"] <= 1 for r in rows)


def test_config_errors_exit_2(tmp_path, monkeypatch):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": 1}))
    assert main(["--config", str(bad), "corpus"]) == EXIT_USAGE
    monkeypatch.setenv("ONESHOT_VC_CONFIG", str(tmp_path / "missing.json"))
    assert main(["corpus"]) == EXIT_USAGE
    assert main(["train"]) == EXIT_USAGE


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "oneshot_vc.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("corpus", "features", "train", "convert", "eval"):
        assert cmd in out.stdout
