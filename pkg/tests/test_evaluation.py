import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy.fft import idct

from oneshot_vc import dsp
from oneshot_vc.corpus import STYLES, build_speaker, synth_utterance
from oneshot_vc.evaluation import (MCD_CONST, DegenerateInputError, DurationSweepReport, EvaluationError,
                                   PairResult, ProsodyCorrReport, SweepRow, concat_to_duration,
                                   emit_spectrogram_image, mcd, mel_cepstrum, pearson, prosody_corr,
                                   prosody_corr_features, write_report)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_pearson_closed_form_and_limits():
    assert pearson([1, 2, 3, 4], [1, 2, 3, 5]) == pytest.approx(0.9827, abs=1e-4)
    x = np.random.default_rng(0).standard_normal(50)
    assert pearson(x, x) == 1.0
    assert pearson(x, -x) == -1.0


def test_pearson_degenerate_and_mismatched():
    with pytest.raises(DegenerateInputError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateInputError):
        pearson([1], [2])
    with pytest.raises(EvaluationError):
        pearson([1, 2], [1, 2, 3])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=40), st.floats(0.1, 10), finite)
def test_pearson_symmetric_bounded_affine_invariant(pairs, scale, shift):
    x, y = np.array(pairs).T
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    r = pearson(x, y)
    assert -1 <= r <= 1
    assert pearson(y, x) == pytest.approx(r, abs=1e-9)
    assert pearson(scale * x + shift, y) == pytest.approx(r, abs=1e-6)


def test_prosody_corr_self_and_affine_lf0():
    utt = synth_utterance(build_speaker(0, 2), "aeiou", STYLES["rising"], 2.0, seed=3)
    assert prosody_corr(utt.audio, utt.audio) == (1.0, 1.0)
    src = dsp.extract_prosody(utt.audio)
    stats = dsp.F0Stats.from_lf0(src.lf0, src.vuv)
    moved = dsp.transform_lf0(src.lf0, src.vuv, stats, dsp.F0Stats(stats.mean_lf0 + 0.4, 1.7 * stats.std_lf0))
    r_e, r_l = prosody_corr_features(src, dsp.ProsodyFeatures(moved, src.vuv, src.energy))
    assert r_e == 1.0
    assert r_l == pytest.approx(1.0, abs=1e-6)


def test_prosody_corr_needs_voiced_overlap():
    a = dsp.ProsodyFeatures(np.zeros(10), np.zeros(10), np.arange(10.0))
    with pytest.raises(DegenerateInputError):
        prosody_corr_features(a, a)


def test_mcd_known_offset_oracle():
    a = np.zeros((2, 80))
    coeffs = np.zeros(80)
    coeffs[3] = 0.5
    coeffs[30] = 9.0        # beyond order 24: ignored
    b = a + idct(coeffs, type=2, norm="ortho")
    assert mcd(a, b) == pytest.approx(MCD_CONST * 0.5, rel=1e-9)
    assert MCD_CONST == pytest.approx(10 / math.log(10) * math.sqrt(2))
    # a constant offset only moves c0, which is excluded
    assert mcd(a, a + 3.0) == pytest.approx(0.0, abs=1e-12)


def test_mcd_properties():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((20, 80)), rng.standard_normal((25, 80))
    assert mcd(a, a) == 0.0
    assert mcd(a, b) == pytest.approx(mcd(b, a))
    assert mcd(a, b) > 0
    assert mel_cepstrum(a).shape == (20, 24)
    with pytest.raises(EvaluationError):
        mcd(a[:0], b)
    with pytest.raises(EvaluationError):
        mcd(a, b[:, :40])


def test_spectrogram_image_layout_and_determinism(tmp_path):
    mel = dsp.mel_spectrogram(synth_utterance(build_speaker(0, 1), "ai", STYLES["calm"], 1.0, 0).audio)
    p1 = emit_spectrogram_image(mel, tmp_path / "a.png")
    p2 = emit_spectrogram_image(mel, tmp_path / "b.png")
    assert p1.read_bytes() == p2.read_bytes()
    img = Image.open(p1)
    assert img.size == (2 * 81, 2 * 80)
    assert "magma" in img.text["colorscale"] and "bottom" in img.text["layout"]
    long = emit_spectrogram_image(np.concatenate([mel, mel]), tmp_path / "c.png")
    assert Image.open(long).size[0] == 2 * Image.open(p1).size[0]


def test_spectrogram_image_floor_is_uniform_and_orientation(tmp_path):
    floor = np.full((81, 80), dsp.LOG_FLOOR)
    pix = np.asarray(Image.open(emit_spectrogram_image(floor, tmp_path / "f.png")))
    assert len(np.unique(pix.reshape(-1, 3), axis=0)) == 1
    low = floor.copy()
    low[:, 0] = 0.0
    pix = np.asarray(Image.open(emit_spectrogram_image(low, tmp_path / "l.png"))).astype(int)
    assert pix[-1].sum() > pix[0].sum()


def test_spectrogram_image_errors(tmp_path):
    with pytest.raises(EvaluationError):
        emit_spectrogram_image(np.zeros((5, 80)), tmp_path / "missing" / "x.png")
    with pytest.raises(EvaluationError):
        emit_spectrogram_image(np.zeros((5, 40)), tmp_path / "x.png")
    with pytest.raises(EvaluationError):
        emit_spectrogram_image(np.full((5, 80), np.nan), tmp_path / "x.png")


def test_prosody_report_layout(tmp_path):
    rep = ProsodyCorrReport()
    rep.add("full", [PairResult("s1", "t", 0.8, 0.7), PairResult("s2", "t", 0.6, 0.9)])
    rep.add("no-prosody", [PairResult("s1", "t", 0.7, 0.1), PairResult("s2", "t", 0.5, 0.2)])
    assert rep.aggregate("full") == pytest.approx({"energy": 0.7, "lf0": 0.8})
    text = rep.to_text()
    assert text.splitlines()[0].split() == ["System", "Energy", "Lf0"]
    assert "full" in text and "(2 pairs" in text
    js, txt = write_report(rep, tmp_path / "r")
    data = json.loads(js.read_text())
    assert data["n_pairs"] == 2 and data["systems"]["no-prosody"]["aggregate"]["lf0"] == pytest.approx(0.15)
    with pytest.raises(EvaluationError):
        rep.add("bad", [PairResult("s", "t", 1.5, 0.0)])


def test_sweep_report_validation_and_text():
    rows = [SweepRow(float(d), 0.5, 0.4, 7.0 - d / 10) for d in (1, 3, 6, 9, 15)]
    rep = DurationSweepReport(rows, "abc")
    assert rep.row(6.0).mcd == pytest.approx(6.4)
    assert len(rep.to_text().splitlines()) == 7
    with pytest.raises(EvaluationError):
        DurationSweepReport(rows + [rows[0]], "abc")
    with pytest.raises(EvaluationError):
        DurationSweepReport([SweepRow(1.0, float("nan"), 0.0, 1.0)], "abc")


def test_concat_to_duration():
    clips = [dsp.AudioClip(np.full(16000, 0.1)), dsp.AudioClip(np.full(24000, 0.2))]
    out = concat_to_duration(clips, 2.0)
    assert len(out.samples) == 32000 and out.samples[-1] == 0.2
    with pytest.raises(EvaluationError):
        concat_to_duration(clips, 3.0)
