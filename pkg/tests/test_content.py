import numpy as np
import pytest
import torch

from oneshot_vc import dsp
from oneshot_vc.content import (ContentError, ContentProvider, ContentProviderConfig, ToyEncoder,
                                ToyEncoderConfig, infer_content, load_content_features, load_toy_encoder,
                                resample_nearest, save_toy_encoder, train_toy_encoder)
from oneshot_vc.corpus import STYLES, Manifest, build_speaker, synth_utterance
from oneshot_vc.tensorio import write_tensor

QUICK = ToyEncoderConfig(dim=16, hidden=16, epochs=2, batch_size=4, crop_frames=64)


def test_load_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((81, 256)).astype(np.float32)
    write_tensor(tmp_path / "a.content.bin", x, "content")
    np.testing.assert_array_equal(load_content_features(tmp_path / "a.content.bin", 256, 81), x)


def test_load_dim_mismatch(tmp_path):
    write_tensor(tmp_path / "a.bin", np.zeros((10, 300)), "content")
    with pytest.raises(ContentError):
        load_content_features(tmp_path / "a.bin", 256)


def test_load_rejects_non_finite(tmp_path):
    x = np.zeros((4, 3))
    x[1, 1] = np.inf
    write_tensor(tmp_path / "a.bin", x, "content")
    with pytest.raises(ContentError):
        load_content_features(tmp_path / "a.bin", 3)


def test_nearest_frame_resampling_80_to_81(tmp_path):
    x = np.arange(80, dtype=np.float32)[:, None].repeat(4, axis=1)
    write_tensor(tmp_path / "a.bin", x, "content")
    out = load_content_features(tmp_path / "a.bin", 4, 81)
    assert out.shape == (81, 4)
    assert out[-1, 0] == 79 and out[0, 0] == 0


def test_resample_10ms_source():
    x = np.arange(100)[:, None]
    out = resample_nearest(x, 81, 0.010)
    # destination frame t at 12.5 ms * t -> nearest 10 ms frame round(1.25 t)
    assert [int(v) for v in out[:5, 0]] == [0, 1, 2, 4, 5]


def test_provider_config_validation():
    with pytest.raises(ContentError):
        ContentProviderConfig(kind="asr")
    with pytest.raises(ContentError):
        ContentProviderConfig(dim=0)
    with pytest.raises(ContentError):
        ContentProvider(ContentProviderConfig(kind="toy_encoder"))


def test_file_provider(tmp_path):
    x = np.ones((20, 8), dtype=np.float32)
    write_tensor(tmp_path / "u1.content.bin", x, "content")
    prov = ContentProvider(ContentProviderConfig(kind="file", dim=8, features_dir=str(tmp_path)))
    assert prov.features(np.zeros((20, 80)), "u1").shape == (20, 8)


def test_infer_shape_and_determinism():
    torch.manual_seed(0)
    enc = ToyEncoder(dim=256, hidden=16).eval()
    mel = dsp.mel_spectrogram(dsp.AudioClip(np.random.default_rng(0).uniform(-0.1, 0.1, 16000)))
    a, b = infer_content(mel, enc), infer_content(mel, enc)
    assert a.shape == (81, 256)
    assert np.array_equal(a, b)
    with pytest.raises(ContentError):
        infer_content(mel, enc, dim=128)
    with pytest.raises(ContentError):
        infer_content(mel[:, :40], enc)


def test_training_is_deterministic_and_round_trips(small_corpus, tmp_path):
    a = train_toy_encoder(small_corpus, QUICK)
    b = train_toy_encoder(small_corpus, QUICK)
    assert a.final_loss == b.final_loss
    save_toy_encoder(a, tmp_path / "enc")
    loaded = load_toy_encoder(tmp_path / "enc")
    mel = dsp.mel_spectrogram(synth_utterance(build_speaker(0, 1), "ai", STYLES["calm"], 1.0, 0).audio)
    np.testing.assert_array_equal(infer_content(mel, loaded), infer_content(mel, a.model))


def test_training_rejects_bad_manifests(small_corpus, tmp_path):
    with pytest.raises(ContentError):
        train_toy_encoder(Manifest(tmp_path, []), QUICK)
    rec = small_corpus.records[0]
    unlabeled = Manifest(small_corpus.root, [type(rec)(**{**rec.__dict__, "segment_times": [], "segment_ends": []})])
    with pytest.raises(ContentError):
        train_toy_encoder(unlabeled, QUICK)


@pytest.mark.slow
def test_trained_encoder_accuracy(desk_run):
    _, result = desk_run
    assert result.encoder_accuracy > 0.80


@pytest.mark.slow
def test_same_script_features_more_similar_than_different_script(desk_run):
    _, result = desk_run
    prov = result.provider

    def feats(spk, script):
        utt = synth_utterance(build_speaker(0, spk), script, STYLES["neutral"], 2.0, seed=11)
        f = prov.features(dsp.mel_spectrogram(utt.audio))
        return f / np.linalg.norm(f, axis=1, keepdims=True)

    same = np.mean(np.sum(feats(1, "aeiouaei") * feats(4, "aeiouaei"), axis=1))
    diff = np.mean(np.sum(feats(1, "aeiouaei") * feats(4, "uoieauoi"), axis=1))
    assert same > diff
