"""Objective metrics and reports: prosody correlation, MCD, spectrogram images,
and the adaptation-duration sweep."""

from __future__ import annotations

import json
import logging
import math
import os
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct

from . import dsp
from .content import ContentProvider
from .model import VCModel, model_checksum
from .pipeline import convert
from .training import Example, PhaseConfig, make_example, phase3_adapt

log = logging.getLogger(__name__)

# MCD: cepstra are the orthonormal DCT-II of the natural-log mel, c0 dropped
MCD_ORDER = 24
MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)

# fixed colour scale for spectrogram images (log-magnitude units)
IMAGE_VMIN = dsp.LOG_FLOOR
IMAGE_VMAX = 0.0
IMAGE_CMAP = "magma"
IMAGE_SCALE = 2          # pixels per frame and per mel band

DURATIONS = (1.0, 3.0, 6.0, 9.0, 15.0)


class DegenerateInputError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) != len(y):
        raise EvaluationError(f"pearson needs equal lengths, got {len(x)} and {len(y)}")
    if len(x) < 2:
        raise DegenerateInputError("pearson needs at least two samples")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError("pearson is undefined for a constant sequence")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def prosody_corr_features(src: dsp.ProsodyFeatures, conv: dsp.ProsodyFeatures) -> tuple[float, float]:
    n = min(len(src), len(conv))
    r_energy = pearson(src.energy[:n], conv.energy[:n])
    both = (src.vuv[:n] > 0.5) & (conv.vuv[:n] > 0.5)
    if both.sum() < 2:
        raise DegenerateInputError(f"only {int(both.sum())} mutually voiced frames")
    return r_energy, pearson(src.lf0[:n][both], conv.lf0[:n][both])


def prosody_corr(src: dsp.AudioClip, conv: dsp.AudioClip) -> tuple[float, float]:
    """(energy r over all frames, lf0 r over frames voiced in both clips)."""
    return prosody_corr_features(dsp.extract_prosody(src), dsp.extract_prosody(conv))


def mel_cepstrum(mel: np.ndarray, order: int = MCD_ORDER) -> np.ndarray:
    mel = np.asarray(mel, dtype=np.float64)
    return dct(mel, type=2, norm="ortho", axis=-1)[..., 1:order + 1]


def mcd(mel_a: np.ndarray, mel_b: np.ndarray) -> float:
    """Mean over frames of ``(10 / ln 10) * sqrt(2 * sum_k (a_k - b_k)^2)``, k = 1..24."""
    mel_a, mel_b = np.asarray(mel_a), np.asarray(mel_b)
    if mel_a.ndim != 2 or mel_b.ndim != 2 or mel_a.shape[1] != mel_b.shape[1]:
        raise EvaluationError(f"incompatible mel shapes {mel_a.shape} and {mel_b.shape}")
    n = min(len(mel_a), len(mel_b))
    if n == 0:
        raise EvaluationError("mcd of an empty overlap")
    diff = mel_cepstrum(mel_a[:n]) - mel_cepstrum(mel_b[:n])
    return float(np.mean(MCD_CONST * np.sqrt((diff ** 2).sum(axis=1))))


def emit_spectrogram_image(mel: np.ndarray, path: str | os.PathLike) -> Path:
    """PNG heat map: time on x, mel band on y (low bands at the bottom)."""
    from matplotlib import colormaps
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != dsp.N_MELS or len(mel) == 0:
        raise EvaluationError(f"expected non-empty frames x {dsp.N_MELS} mel, got {mel.shape}")
    if not np.all(np.isfinite(mel)):
        raise EvaluationError("mel contains non-finite values")
    path = Path(path)
    if not path.parent.is_dir() or not os.access(path.parent, os.W_OK):
        raise EvaluationError(f"cannot write image to {path}")
    level = np.clip((mel - IMAGE_VMIN) / (IMAGE_VMAX - IMAGE_VMIN), 0.0, 1.0)
    lut = (colormaps[IMAGE_CMAP](np.linspace(0.0, 1.0, 256))[:, :3] * 255).round().astype(np.uint8)
    rgb = lut[np.rint(level.T[::-1] * 255).astype(np.int64)]
    rgb = rgb.repeat(IMAGE_SCALE, axis=0).repeat(IMAGE_SCALE, axis=1)
    info = PngInfo()
    info.add_text("colorscale", f"{IMAGE_CMAP} vmin={IMAGE_VMIN:.6f} vmax={IMAGE_VMAX:.6f} units=ln-magnitude")
    info.add_text("layout", f"x=frame ({IMAGE_SCALE} px each), y=mel band ({IMAGE_SCALE} px each, band 0 at bottom)")
    Image.fromarray(np.ascontiguousarray(rgb), "RGB").save(path, pnginfo=info)
    return path


# --- reports ------------------------------------------------------------------

@dataclass
class PairResult:
    source: str
    target: str
    r_energy: float
    r_lf0: float
    median_f0: float = float("nan")
    mcd: float = float("nan")


@dataclass
class ProsodyCorrReport:
    systems: dict[str, list[PairResult]] = field(default_factory=dict)

    def add(self, system: str, rows: list[PairResult]):
        for r in rows:
            if not (-1.0 <= r.r_energy <= 1.0 and -1.0 <= r.r_lf0 <= 1.0):
                raise EvaluationError(f"correlation out of range in {r}")
        self.systems[system] = list(rows)

    @property
    def n_pairs(self) -> int:
        return max((len(v) for v in self.systems.values()), default=0)

    def aggregate(self, system: str) -> dict[str, float]:
        rows = self.systems[system]
        return {"energy": float(np.mean([r.r_energy for r in rows])),
                "lf0": float(np.mean([r.r_lf0 for r in rows]))}

    def to_dict(self) -> dict:
        return {"n_pairs": self.n_pairs,
                "systems": {name: {"pairs": [asdict(r) for r in rows], "aggregate": self.aggregate(name)}
                            for name, rows in self.systems.items()}}

    def to_text(self) -> str:
        lines = [f"{'System':<16}{'Energy':>10}{'Lf0':>10}", "-" * 36]
        for name in self.systems:
            agg = self.aggregate(name)
            lines.append(f"{name:<16}{agg['energy']:>10.3f}{agg['lf0']:>10.3f}")
        lines.append(f"({self.n_pairs} pairs, Pearson r)")
        return "\n".join(lines) + "\n"


@dataclass
class SweepRow:
    duration: float
    r_lf0: float
    r_energy: float
    mcd: float


@dataclass
class DurationSweepReport:
    rows: list[SweepRow]
    base_checksum: str

    def __post_init__(self):
        durs = [r.duration for r in self.rows]
        if len(set(durs)) != len(durs):
            raise EvaluationError("duplicate duration rows")
        for r in self.rows:
            if not all(math.isfinite(v) for v in (r.r_lf0, r.r_energy, r.mcd)):
                raise EvaluationError(f"non-finite metric in sweep row {r}")

    def row(self, duration: float) -> SweepRow:
        return next(r for r in self.rows if r.duration == duration)

    def to_dict(self) -> dict:
        return {"base_checksum": self.base_checksum, "rows": [asdict(r) for r in self.rows]}

    def to_text(self) -> str:
        lines = [f"{'Duration (s)':<14}{'Lf0 r':>10}{'Energy r':>10}{'MCD (dB)':>10}", "-" * 44]
        for r in self.rows:
            lines.append(f"{r.duration:<14g}{r.r_lf0:>10.3f}{r.r_energy:>10.3f}{r.mcd:>10.3f}")
        return "\n".join(lines) + "\n"


def write_report(report, stem: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.txt``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    js, txt = stem.with_suffix(".json"), stem.with_suffix(".txt")
    js.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    txt.write_text(report.to_text())
    return js, txt


# --- conversion over evaluation pairs -------------------------------------------

@dataclass
class EvalSource:
    """A source utterance to convert, with an optional ground-truth target rendition."""

    id: str
    audio: dsp.AudioClip
    bn: np.ndarray
    ground_truth: np.ndarray | None = None   # mel of the same script by the target speaker


def median_voiced_f0(pros: dsp.ProsodyFeatures) -> float:
    voiced = pros.lf0[pros.vuv > 0.5]
    return float(np.exp(np.median(voiced))) if voiced.size else float("nan")


def evaluate_sources(model: VCModel, sources: Sequence[EvalSource], target: Example,
                     target_stats: dsp.F0Stats, target_name: str) -> list[PairResult]:
    rows = []
    for src in sources:
        out = convert(src.audio, src.bn, target.mel, target_stats, model)
        src_p, conv_p = dsp.extract_prosody(src.audio), dsp.extract_prosody(out.audio)
        try:
            r_e, r_l = prosody_corr_features(src_p, conv_p)
        except DegenerateInputError as exc:
            log.warning("%s: %s; scoring as zero correlation", src.id, exc)
            r_e, r_l = 0.0, 0.0
        dist = mcd(out.mel_post, src.ground_truth) if src.ground_truth is not None else float("nan")
        rows.append(PairResult(src.id, target_name, r_e, r_l, median_voiced_f0(conv_p), dist))
    return rows


def concat_to_duration(clips: Sequence[dsp.AudioClip], seconds: float) -> dsp.AudioClip:
    need = int(round(seconds * dsp.SAMPLE_RATE))
    total = sum(len(c.samples) for c in clips)
    if total < need:
        raise EvaluationError(f"only {total / dsp.SAMPLE_RATE:.2f} s of target audio, {seconds} s requested")
    return dsp.AudioClip(np.concatenate([c.samples for c in clips])[:need])


def duration_sweep(base: VCModel, target_clips: Sequence[dsp.AudioClip], sources: Sequence[EvalSource],
                   provider: ContentProvider, adapt: PhaseConfig, durations=DURATIONS,
                   target_name: str = "target") -> DurationSweepReport:
    """Adapt ``base`` on 1, 3, 6, 9 and 15 s of target audio and score every source.

    Each adaptation starts from the same base weights (checksum-verified).
    """
    if not sources:
        raise EvaluationError("duration sweep needs at least one evaluation pair")
    longest = max(durations)
    concat_to_duration(target_clips, longest)
    checksum = model_checksum(base)
    rows = []
    for d in durations:
        if model_checksum(base) != checksum:
            raise EvaluationError("base checkpoint changed during the sweep")
        audio = concat_to_duration(target_clips, d)
        example = make_example(audio, provider, f"{target_name}_{d:g}s", target_name)
        adapted = phase3_adapt(base, example, adapt).model
        stats = dsp.F0Stats.from_audio(audio)
        pairs = evaluate_sources(adapted, sources, example, stats, target_name)
        rows.append(SweepRow(float(d), float(np.mean([p.r_lf0 for p in pairs])),
                             float(np.mean([p.r_energy for p in pairs])),
                             float(np.mean([p.mcd for p in pairs]))))
        log.info("sweep %.0f s: lf0 r %.3f, MCD %.2f", d, rows[-1].r_lf0, rows[-1].mcd)
    return DurationSweepReport(rows, checksum)
