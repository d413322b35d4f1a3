"""Deterministic synthetic speech-like corpus.

Voiced segments are harmonic series shaped by a cascade of three formant
resonators per vowel; gaps between segments carry low-level noise. Speakers
differ in pitch register, formant scaling and spectral tilt; styles differ in
pitch/energy contours and per-segment pitch accents.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import SAMPLE_RATE, AudioClip, AudioError

VOWELS = "aeiou"
# (F1, F2, F3) in Hz for a reference vocal tract
FORMANTS = {
    "a": (730.0, 1090.0, 2440.0),
    "e": (530.0, 1840.0, 2480.0),
    "i": (270.0, 2290.0, 3010.0),
    "o": (570.0, 840.0, 2410.0),
    "u": (300.0, 870.0, 2240.0),
}
BANDWIDTHS = (90.0, 110.0, 170.0)

F0_RANGE = (90.0, 300.0)
F0_SPACING = 10.0
MAX_SPEAKERS = int((F0_RANGE[1] - F0_RANGE[0]) // F0_SPACING) + 1
MIN_DURATION, MAX_DURATION = 1.0, 15.0

VOICED_FRACTION = 0.75
EDGE_SILENCE = 0.08
NOISE_LEVEL = 0.002
RAMP = 0.01


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerProfile:
    id: str
    base_f0: float
    formant_scale: float
    tilt: float  # dB/octave


@dataclass(frozen=True)
class StyleTemplate:
    name: str
    # piecewise-linear multipliers sampled uniformly over normalised time [0, 1]
    f0_contour: tuple[float, ...]
    energy_contour: tuple[float, ...]
    segment_rate: float
    # std of the per-segment log-F0 accents drawn from the utterance seed
    accent_depth: float = 0.0

    def __post_init__(self):
        if min(self.f0_contour) <= 0 or min(self.energy_contour) <= 0:
            raise CorpusError("contour multipliers must be positive")
        if self.segment_rate <= 0:
            raise CorpusError("segment_rate must be positive")


FLAT = StyleTemplate("flat", (1.0, 1.0), (1.0, 1.0), 4.0, 0.0)

STYLES = {
    "neutral": StyleTemplate("neutral", (1.04, 1.0, 0.96), (1.0, 1.0, 0.8), 4.0, 0.1),
    "rising": StyleTemplate("rising", (0.9, 0.95, 1.05, 1.15), (0.9, 1.0, 1.0, 1.1), 4.5, 0.1),
    "falling": StyleTemplate("falling", (1.15, 1.05, 0.95, 0.88), (1.1, 1.0, 0.9, 0.8), 3.5, 0.1),
    "excited": StyleTemplate("excited", (1.0, 1.18, 0.95, 1.15, 0.92), (1.0, 1.2, 1.0, 1.2, 0.9), 5.0, 0.14),
    "calm": StyleTemplate("calm", (0.97, 1.0, 0.97), (0.8, 0.8, 0.7), 3.0, 0.08),
}


@dataclass
class Utterance:
    audio: AudioClip
    speaker: str
    script: str
    style: str
    segment_times: list[float]
    segment_ends: list[float]
    seed: int

    def frame_labels(self, n_frames: int, hop: float = 0.0125) -> np.ndarray:
        """Per-frame symbol index (0..4 for vowels, 5 for gaps)."""
        labels = np.full(n_frames, len(VOWELS), dtype=np.int64)
        centres = np.arange(n_frames) * hop
        for sym, start, end in zip(self.script, self.segment_times, self.segment_ends):
            labels[(centres >= start) & (centres < end)] = VOWELS.index(sym)
        return labels


def _f0_slot_order() -> list[int]:
    """Grid slots ordered by farthest-point sampling so early speakers span the range."""
    slots = list(range(MAX_SPEAKERS))
    order = [6]  # 150 Hz
    while len(order) < len(slots):
        rest = [s for s in slots if s not in order]
        order.append(max(rest, key=lambda s: (min(abs(s - o) for o in order), -s)))
    return order


_SLOT_ORDER = _f0_slot_order()


def build_speaker(seed: int, index: int) -> SpeakerProfile:
    """Speaker ``index`` of the population defined by ``seed``.

    Base F0 sits on a 10 Hz grid over 90-300 Hz, so at most ``MAX_SPEAKERS``
    distinct speakers exist. Formant scale follows F0 (higher voices, shorter
    tracts) with seeded jitter.
    """
    if index < 0:
        raise CorpusError("speaker index must be non-negative")
    if index >= MAX_SPEAKERS:
        raise CorpusError(f"at most {MAX_SPEAKERS} speakers fit a 10 Hz grid over {F0_RANGE} Hz")
    base_f0 = F0_RANGE[0] + F0_SPACING * _SLOT_ORDER[index]
    rng = np.random.default_rng([seed, index, 101])
    pos = (base_f0 - F0_RANGE[0]) / (F0_RANGE[1] - F0_RANGE[0])
    formant_scale = float(np.clip(0.86 + 0.3 * pos + rng.uniform(-0.04, 0.04), 0.8, 1.25))
    tilt = float(rng.uniform(-6.0, -1.0))
    return SpeakerProfile(f"spk{index:02d}", float(base_f0), round(formant_scale, 6), round(tilt, 6))


def _contour(points: tuple[float, ...], u: np.ndarray) -> np.ndarray:
    return np.interp(u, np.linspace(0.0, 1.0, len(points)), points)


def _resonance_gain(freqs: np.ndarray, formants: np.ndarray, bandwidths: np.ndarray) -> np.ndarray:
    """Magnitude of a cascade of 2nd-order resonators, unity at DC."""
    gain = np.ones_like(freqs)
    for f_c, bw in zip(formants, bandwidths):
        gain *= f_c ** 2 / np.sqrt((f_c ** 2 - freqs ** 2) ** 2 + (bw * freqs) ** 2)
    return gain


def synth_utterance(profile: SpeakerProfile, script: str, style: StyleTemplate,
                    duration: float, seed: int, sample_rate: int = SAMPLE_RATE) -> Utterance:
    if not script:
        raise CorpusError("script must be non-empty")
    if any(s not in VOWELS for s in script):
        raise CorpusError(f"script symbols must be drawn from {VOWELS!r}")
    if not MIN_DURATION <= duration <= MAX_DURATION:
        raise CorpusError(f"duration must lie in [{MIN_DURATION}, {MAX_DURATION}] s")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    u = t / duration

    # timing and accents depend only on (script, style, duration, seed) so that
    # renditions by different speakers stay parallel
    rng = np.random.default_rng([seed, 7])
    span = duration - 2 * EDGE_SILENCE
    seg_len = span / len(script)
    starts = EDGE_SILENCE + seg_len * np.arange(len(script))
    ends = starts + VOICED_FRACTION * seg_len
    accents = rng.normal(0.0, style.accent_depth, size=len(script)) if style.accent_depth else np.zeros(len(script))
    mids = 0.5 * (starts + ends)
    accent_curve = np.interp(t, mids, accents) if len(script) > 1 else np.full(n, accents[0])

    f0 = profile.base_f0 * _contour(style.f0_contour, u) * np.exp(accent_curve)
    energy = _contour(style.energy_contour, u)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    voiced = np.zeros(n)
    seg_idx = np.full(n, -1)
    ramp = int(RAMP * sample_rate)
    for k, (s, e) in enumerate(zip(starts, ends)):
        a, b = int(round(s * sample_rate)), int(round(e * sample_rate))
        seg_idx[a:b] = k
        env = np.ones(b - a)
        r = min(ramp, (b - a) // 2)
        env[:r] = np.linspace(0.0, 1.0, r, endpoint=False)
        env[b - a - r:] = np.linspace(1.0, 0.0, r, endpoint=False)[: r]
        voiced[a:b] = env

    # formant tracks per sample (constant within a segment)
    formants = np.zeros((n, 3))
    for k, sym in enumerate(script):
        formants[seg_idx == k] = np.asarray(FORMANTS[sym]) * profile.formant_scale
    formants[seg_idx < 0] = np.asarray(FORMANTS["a"]) * profile.formant_scale
    bws = np.asarray(BANDWIDTHS) * profile.formant_scale

    signal = np.zeros(n)
    n_harm = int((sample_rate / 2) // f0.min())
    tilt_exp = profile.tilt / (20 * np.log10(2))
    for h in range(1, n_harm + 1):
        fh = h * f0
        active = fh < 0.48 * sample_rate
        if not active.any():
            break
        gain = _resonance_gain(fh, formants.T, bws) * (fh / 100.0) ** tilt_exp
        signal += np.where(active, gain, 0.0) * np.sin(h * phase)

    peak = np.max(np.abs(signal * voiced)) or 1.0
    audio = 0.5 * signal * voiced * energy / peak
    audio += NOISE_LEVEL * rng.standard_normal(n) * energy
    audio = np.clip(audio, -1.0, 1.0)
    return Utterance(AudioClip(audio, sample_rate), profile.id, script, style.name,
                     [float(x) for x in starts], [float(x) for x in ends], int(seed))


# --- corpus building -------------------------------------------------------

@dataclass
class CorpusConfig:
    out_dir: str
    seed: int = 0
    n_speakers: int = 7
    utts_per_speaker: int = 10
    held_out: int = 1
    test_per_speaker: int = 2
    duration_range: tuple[float, float] = (2.5, 3.6)
    styles: tuple[str, ...] = tuple(STYLES)
    normalization_speaker: int = 0
    write_parallel: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        for key in ("duration_range", "styles"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ManifestRecord:
    id: str
    path: str
    speaker: str
    speaker_index: int
    style: str
    script: str
    duration: float
    split: str          # "train", "test" (unseen utterance of a training speaker) or "heldout"
    in_train: bool
    seed: int
    segment_times: list[float]
    segment_ends: list[float]
    parallel_path: str | None = None  # rendition by the normalization speaker

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Manifest:
    root: Path
    records: list[ManifestRecord]
    speakers: dict[str, SpeakerProfile] = field(default_factory=dict)
    normalization_speaker: str | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def by_split(self, *splits: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split in splits]

    def training_speakers(self) -> list[str]:
        return sorted({r.speaker for r in self.records if r.in_train})

    @property
    def path(self) -> Path:
        return self.root / "manifest.jsonl"

    def save(self) -> Path:
        lines = [r.to_json() for r in self.records]
        self.path.write_text("\n".join(lines) + "\n")
        meta = {
            "speakers": {k: asdict(v) for k, v in sorted(self.speakers.items())},
            "normalization_speaker": self.normalization_speaker,
        }
        (self.root / "speakers.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return self.path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.jsonl"
        records = [ManifestRecord(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
        speakers, norm = {}, None
        meta_path = path.parent / "speakers.json"
        if meta_path.exists():
            meta = json.loads(meta_path.read_text())
            speakers = {k: SpeakerProfile(**v) for k, v in meta["speakers"].items()}
            norm = meta.get("normalization_speaker")
        return cls(path.parent, records, speakers, norm)

    def checksum(self) -> str:
        h = hashlib.sha256(self.path.read_bytes())
        for r in self.records:
            h.update(self.resolve(r.path).read_bytes())
        return h.hexdigest()


def write_wav(path: str | os.PathLike, audio: AudioClip):
    pcm = np.round(np.clip(audio.samples, -1.0, 1.0) * 32767).astype("<i2")
    wavfile.write(str(path), audio.sample_rate, pcm)


def read_wav(path: str | os.PathLike) -> AudioClip:
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:  # scipy raises assorted types on malformed headers
        raise AudioError(f"{path}: unreadable WAV ({exc!r})") from exc
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        data = (data.astype(np.float64) - 128.0) / 128.0
    else:
        data = data.astype(np.float64)
    return AudioClip(data, int(rate))


def random_script(rng: np.random.Generator, length: int) -> str:
    return "".join(VOWELS[i] for i in rng.integers(0, len(VOWELS), size=length))


def utterance_plan(config: CorpusConfig, speaker_index: int, k: int) -> tuple[str, str, float, int]:
    """(script, style name, duration, seed) of utterance ``k`` of a speaker.

    Styles are assigned round-robin per speaker so every speaker covers all
    styles equally.
    """
    style_name = config.styles[(k + speaker_index) % len(config.styles)]
    style = STYLES[style_name]
    rng = np.random.default_rng([config.seed, speaker_index, k, 13])
    lo, hi = config.duration_range
    duration = round(float(rng.uniform(lo, hi)), 3)
    n_seg = max(1, int(round((duration - 2 * EDGE_SILENCE) * style.segment_rate)))
    script = random_script(rng, n_seg)
    seed = int(rng.integers(0, 2**31 - 1))
    return script, style_name, duration, seed


def build_corpus(config: CorpusConfig) -> Manifest:
    """Synthesise the corpus to ``config.out_dir`` and write its manifest.

    The last ``held_out`` speaker indices are held out of training. When
    ``write_parallel`` is set, every utterance also gets a parallel rendition
    by the normalization speaker (same script, style, timing and seed).
    """
    if config.n_speakers < 2:
        raise CorpusError("need at least 2 speakers")
    if config.utts_per_speaker < 2:
        raise CorpusError("need at least 2 utterances per speaker")
    if not 0 <= config.held_out < config.n_speakers:
        raise CorpusError("held_out must leave at least one training speaker")
    if config.normalization_speaker >= config.n_speakers - config.held_out:
        raise CorpusError("normalization speaker must be a training speaker")
    unknown = [s for s in config.styles if s not in STYLES]
    if unknown:
        raise CorpusError(f"unknown styles {unknown}")
    root = Path(config.out_dir)
    try:
        (root / "wav").mkdir(parents=True, exist_ok=True)
        if config.write_parallel:
            (root / "parallel").mkdir(parents=True, exist_ok=True)
        probe = root / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CorpusError(f"output directory {root} is not writable: {exc}") from exc

    profiles = [build_speaker(config.seed, i) for i in range(config.n_speakers)]
    norm = profiles[config.normalization_speaker]
    n_train = config.n_speakers - config.held_out
    records = []
    for i, prof in enumerate(profiles):
        in_train = i < n_train
        for k in range(config.utts_per_speaker):
            script, style_name, duration, seed = utterance_plan(config, i, k)
            utt = synth_utterance(prof, script, STYLES[style_name], duration, seed)
            uid = f"{prof.id}_{k:03d}"
            rel = f"wav/{uid}.wav"
            write_wav(root / rel, utt.audio)
            parallel = None
            if config.write_parallel:
                if i == config.normalization_speaker:
                    parallel = rel
                else:
                    par = synth_utterance(norm, script, STYLES[style_name], duration, seed)
                    parallel = f"parallel/{uid}__{norm.id}.wav"
                    write_wav(root / parallel, par.audio)
            if not in_train:
                split = "heldout"
            elif k >= config.utts_per_speaker - config.test_per_speaker:
                split = "test"
            else:
                split = "train"
            records.append(ManifestRecord(
                id=uid, path=rel, speaker=prof.id, speaker_index=i, style=style_name,
                script=script, duration=duration, split=split, in_train=in_train, seed=seed,
                segment_times=utt.segment_times, segment_ends=utt.segment_ends,
                parallel_path=parallel))
    manifest = Manifest(root, records, {p.id: p for p in profiles}, norm.id)
    manifest.save()
    return manifest


def parallel_rendition(manifest: Manifest, record: ManifestRecord, speaker: str) -> Utterance:
    """Re-render ``record`` by another speaker of the same corpus."""
    prof = manifest.speakers[speaker]
    return synth_utterance(prof, record.script, STYLES[record.style], record.duration, record.seed)


def record_utterance(manifest: Manifest, record: ManifestRecord) -> Utterance:
    return Utterance(read_wav(manifest.resolve(record.path)), record.speaker, record.script,
                     record.style, record.segment_times, record.segment_ends, record.seed)
