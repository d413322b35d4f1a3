"""Signal-processing front end: framing, mel spectrogram, pitch, energy, and
waveform reconstruction from mel magnitudes.

All features share one framing: frames are centred at multiples of the hop
(200 samples at 16 kHz), so every feature of a clip with ``N`` samples has
``1 + N // 200`` frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 16000
FRAME_LENGTH = 800   # 50 ms
HOP_LENGTH = 200     # 12.5 ms
N_FFT = 1024
N_MELS = 80
F_MIN = 0.0
F_MAX = 8000.0
MAG_FLOOR = 1e-5
LOG_FLOOR = float(np.log(MAG_FLOOR))

F0_MIN = 50.0
F0_MAX = 500.0
VOICING_THRESHOLD = 0.3
# path costs for the pitch tracker: strength penalty per octave of lag,
# per octave of frame-to-frame jump, and per voiced/unvoiced switch
OCTAVE_COST = 0.03
OCTAVE_JUMP_COST = 1.0
VOICING_TRANSITION_COST = 0.3
MAX_CANDIDATES = 5
# relative std floor for energy z-normalisation
ENERGY_REL_FLOOR = 0.05


class AudioError(ValueError):
    """Raised for audio that violates the pipeline's input contract."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("audio contains NaN or Inf samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ProsodyFeatures:
    lf0: np.ndarray
    vuv: np.ndarray
    energy: np.ndarray

    def __len__(self):
        return len(self.lf0)

    def stack(self) -> np.ndarray:
        """Frames x 3 matrix in (lf0, vuv, energy) order."""
        return np.stack([self.lf0, self.vuv, self.energy], axis=1)

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "ProsodyFeatures":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())


@dataclass(frozen=True)
class F0Stats:
    mean_lf0: float
    std_lf0: float

    @classmethod
    def from_lf0(cls, lf0: np.ndarray, vuv: np.ndarray | None = None) -> "F0Stats":
        lf0 = np.asarray(lf0, dtype=np.float64)
        voiced = lf0[lf0 > 0] if vuv is None else lf0[np.asarray(vuv) > 0.5]
        if voiced.size == 0:
            raise AudioError("no voiced frames: F0 statistics are undefined")
        return cls(float(voiced.mean()), float(voiced.std()))

    @classmethod
    def from_audio(cls, audio: AudioClip) -> "F0Stats":
        lf0, vuv = extract_f0(audio)
        return cls.from_lf0(lf0, vuv)


def _check_rate(audio: AudioClip):
    if audio.sample_rate != SAMPLE_RATE:
        raise AudioError(f"expected {SAMPLE_RATE} Hz audio, got {audio.sample_rate} Hz")


def num_frames(num_samples: int) -> int:
    return 1 + num_samples // HOP_LENGTH


def frame_signal(x: np.ndarray, width: int) -> np.ndarray:
    """Frames of ``width`` samples centred on every hop position.

    Padding is a reflection of the signal where it is long enough, zeros
    otherwise.
    """
    pad = width // 2
    mode = "reflect" if len(x) > pad else "constant"
    padded = np.pad(x, (pad, pad), mode=mode)
    n = num_frames(len(x))
    idx = np.arange(width)[None, :] + HOP_LENGTH * np.arange(n)[:, None]
    return padded[idx]


@lru_cache(maxsize=None)
def _analysis_window() -> np.ndarray:
    win = get_window("hann", FRAME_LENGTH, fftbins=True)
    left = (N_FFT - FRAME_LENGTH) // 2
    return np.pad(win, (left, N_FFT - FRAME_LENGTH - left))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank() -> np.ndarray:
    """80 x (N_FFT/2+1) matrix of unit-peak triangular filters on the HTK mel scale."""
    edges = mel_to_hz(np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2))
    freqs = np.fft.rfftfreq(N_FFT, 1.0 / SAMPLE_RATE)
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (centre - lower)
    falling = (upper - freqs[None, :]) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def stft(x: np.ndarray) -> np.ndarray:
    """Complex STFT, frames x bins. A unit sinusoid has peak magnitude ~0.5."""
    win = _analysis_window()
    frames = frame_signal(x, N_FFT) * win
    return np.fft.rfft(frames, axis=1) / win.sum()


def istft(spec: np.ndarray, length: int) -> np.ndarray:
    win = _analysis_window()
    frames = np.fft.irfft(spec * win.sum(), n=N_FFT, axis=1) * win
    n = spec.shape[0]
    pad = N_FFT // 2
    total = N_FFT + HOP_LENGTH * (n - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n):
        s = i * HOP_LENGTH
        out[s:s + N_FFT] += frames[i]
        norm[s:s + N_FFT] += win ** 2
    out = out[pad:pad + length]
    norm = norm[pad:pad + length]
    return out / np.maximum(norm, 1e-8)


def mel_spectrogram(audio: AudioClip) -> np.ndarray:
    """Frames x 80 natural-log mel magnitudes, clamped at ``MAG_FLOOR``."""
    _check_rate(audio)
    if audio.samples.size == 0:
        raise AudioError("empty audio")
    mag = np.abs(stft(audio.samples))
    mel = mag @ mel_filterbank().T
    return np.log(np.maximum(mel, MAG_FLOOR))


def _nccf(frames: np.ndarray, max_lag: int) -> np.ndarray:
    """Normalised cross-correlation for lags 0..max_lag of each frame."""
    frames = frames - frames.mean(axis=1, keepdims=True)
    w = frames.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * w)))
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), n=nfft, axis=1)[:, :max_lag + 1]
    sq = np.cumsum(frames ** 2, axis=1)
    sq = np.concatenate([np.zeros((frames.shape[0], 1)), sq], axis=1)
    lags = np.arange(max_lag + 1)
    head = sq[:, w - lags]                 # sum of x[0 : w-lag]^2
    tail = sq[:, w:w + 1] - sq[:, lags]    # sum of x[lag : w]^2
    denom = np.sqrt(head * tail)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-12, acf / denom, 0.0)
    return r


def _pitch_candidates(r: np.ndarray, min_lag: int, max_lag: int):
    """Voiced candidates of one frame: (log-F0, strength) for NCCF peaks above threshold."""
    lags = np.arange(min_lag, max_lag + 1)
    peak = (r[lags] >= r[lags - 1]) & (r[lags] >= r[lags + 1]) & (r[lags] >= VOICING_THRESHOLD)
    lags = lags[peak]
    strength = r[lags] - OCTAVE_COST * np.log2(lags / min_lag)
    order = np.argsort(-strength, kind="stable")[:MAX_CANDIDATES]
    lf0, out = [], []
    for j in order:
        lag = lags[j]
        a, b, c = r[lag - 1], r[lag], r[lag + 1]
        denom = a - 2 * b + c
        shift = float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5)) if abs(denom) > 1e-12 else 0.0
        lf0.append(np.log(SAMPLE_RATE / (lag + shift)))
        out.append(strength[j])
    return lf0, out


def extract_f0(audio: AudioClip) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame ``(lf0, vuv)``; lf0 is ln(F0) on voiced frames and 0 elsewhere.

    Each frame contributes NCCF peaks (parabolically interpolated) above the
    voicing threshold as candidates, plus an unvoiced candidate scored at the
    threshold. A Viterbi pass picks the path that maximises summed strength
    minus octave-jump and voicing-transition costs, which suppresses the
    octave errors single-frame picking makes at segment edges.
    """
    _check_rate(audio)
    n = num_frames(len(audio.samples))
    if audio.samples.size == 0:
        return np.zeros(n), np.zeros(n)
    min_lag = int(np.floor(SAMPLE_RATE / F0_MAX))
    max_lag = int(np.ceil(SAMPLE_RATE / F0_MIN))
    r = _nccf(frame_signal(audio.samples, FRAME_LENGTH), max_lag + 1)

    cands = []
    for t in range(n):
        lf0, strength = _pitch_candidates(r[t], min_lag, max_lag)
        cands.append((np.array([0.0] + lf0), np.array([VOICING_THRESHOLD] + strength)))

    score = cands[0][1].copy()
    back = []
    for t in range(1, n):
        prev, (cur, strength) = cands[t - 1][0], cands[t]
        vp, vc = prev[:, None] > 0, cur[None, :] > 0
        trans = np.where(vp & vc, OCTAVE_JUMP_COST * np.abs(prev[:, None] - cur[None, :]) / np.log(2), 0.0)
        trans = np.where(vp ^ vc, VOICING_TRANSITION_COST, trans)
        total = score[:, None] - trans
        best = np.argmax(total, axis=0)
        back.append(best)
        score = total[best, np.arange(len(cur))] + strength
    idx = int(np.argmax(score))
    path = [idx]
    for best in reversed(back):
        idx = int(best[idx])
        path.append(idx)
    path.reverse()
    lf0 = np.array([cands[t][0][path[t]] for t in range(n)])
    vuv = (lf0 > 0).astype(np.float64)
    return lf0, vuv


def frame_energy(audio: AudioClip) -> np.ndarray:
    """Per-frame mean absolute amplitude, z-normalised over the utterance.

    The divisor is ``max(std, ENERGY_REL_FLOOR * mean)`` so near-constant
    envelopes map to ~0 rather than amplified ripple; scale invariance holds
    because both terms scale with gain.
    """
    _check_rate(audio)
    frames = frame_signal(audio.samples, FRAME_LENGTH)
    e = np.abs(frames).mean(axis=1)
    mu = e.mean()
    scale = max(e.std(), ENERGY_REL_FLOOR * mu)
    if scale <= 0:
        return np.zeros_like(e)
    return (e - mu) / scale


def extract_prosody(audio: AudioClip) -> ProsodyFeatures:
    lf0, vuv = extract_f0(audio)
    return ProsodyFeatures(lf0, vuv, frame_energy(audio))


def transform_lf0(lf0: np.ndarray, vuv: np.ndarray, src: F0Stats, tgt: F0Stats) -> np.ndarray:
    """Affine mapping of voiced log-F0 from source to target statistics."""
    if not src.std_lf0 > 0:
        raise AudioError("source F0 statistics have zero spread")
    lf0 = np.asarray(lf0, dtype=np.float64)
    voiced = np.asarray(vuv) > 0.5
    out = np.zeros_like(lf0)
    out[voiced] = (lf0[voiced] - src.mean_lf0) * (tgt.std_lf0 / src.std_lf0) + tgt.mean_lf0
    return out


@lru_cache(maxsize=None)
def _mel_pinv() -> np.ndarray:
    return np.linalg.pinv(mel_filterbank())


def mel_to_linear(mel: np.ndarray) -> np.ndarray:
    """Non-negative linear magnitudes whose mel projection approximates ``exp(mel)``."""
    mag = np.exp(np.asarray(mel, dtype=np.float64))
    lin = mag @ _mel_pinv().T
    return np.maximum(lin, 0.0)


def reconstruct_waveform(mel: np.ndarray, n_iter: int = 60, momentum: float = 0.99) -> AudioClip:
    """Griffin-Lim phase recovery (with momentum) from a log-mel spectrogram.

    Deterministic: phases start at zero. The output has ``(frames - 1) * hop``
    samples.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != N_MELS:
        raise AudioError(f"expected frames x {N_MELS} mel, got {mel.shape}")
    length = (mel.shape[0] - 1) * HOP_LENGTH
    if length == 0:
        return AudioClip(np.zeros(0))
    target = mel_to_linear(mel)
    spec = target.astype(np.complex128)
    prev = np.zeros_like(spec)
    for _ in range(n_iter):
        x = istft(spec, length)
        rebuilt = stft(x)
        accel = rebuilt - (momentum / (1 + momentum)) * prev
        prev = rebuilt
        spec = target * np.exp(1j * np.angle(accel))
    x = istft(spec, length)
    return AudioClip(np.clip(x, -1.0, 1.0))
