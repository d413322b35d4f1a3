"""End-to-end desk experiments on the synthetic corpus.

``run_style_transfer`` trains the full system and an ablation without the
prosody module, adapts both to one held-out-speaker utterance and scores nine
conversion pairs. ``run_duration_sweep`` reuses the full system's phase-2 model
to adapt on 1 to 15 s of target audio.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dsp
from .content import (ContentProvider, ContentProviderConfig, ToyEncoderConfig, save_toy_encoder,
                      train_toy_encoder)
from .corpus import CorpusConfig, Manifest, ManifestRecord, build_corpus, parallel_rendition, read_wav
from .evaluation import (DurationSweepReport, EvalSource, PairResult, ProsodyCorrReport, duration_sweep,
                         evaluate_sources, write_report)
from .layers import LayerSpec
from .model import ModelConfig, VCModel, save_checkpoint
from .training import Example, PhaseConfig, phase1_train, phase2_train, phase3_adapt, prepare_examples

log = logging.getLogger(__name__)

FULL = "full"
ABLATION = "no-prosody"
ADAPT_RANGE = (3.0, 4.0)


@dataclass
class ExperimentConfig:
    work_dir: str
    seed: int = 0
    n_pairs: int = 9
    corpus: CorpusConfig | None = None
    encoder: ToyEncoderConfig = field(default_factory=lambda: ToyEncoderConfig(dim=64))
    spec: LayerSpec = field(default_factory=LayerSpec.desk)
    phase1: PhaseConfig = field(default_factory=lambda: PhaseConfig.phase1(
        epochs=100, finetune_epochs=20, batch_size=8, decay_interval=50))
    phase2: PhaseConfig = field(default_factory=lambda: PhaseConfig.phase2(
        epochs=250, batch_size=8, decay_interval=50))
    phase3: PhaseConfig = field(default_factory=lambda: PhaseConfig.phase3(steps=500))

    def __post_init__(self):
        if self.corpus is None:
            self.corpus = CorpusConfig(out_dir=str(Path(self.work_dir) / "corpus"))
        # one seed drives every stage
        self.corpus = replace(self.corpus, seed=self.seed)
        self.encoder = replace(self.encoder, seed=self.seed)
        self.phase1 = replace(self.phase1, seed=self.seed)
        self.phase2 = replace(self.phase2, seed=self.seed)
        self.phase3 = replace(self.phase3, seed=self.seed)
        if self.spec.bn_dim != self.encoder.dim:
            raise ValueError(f"LayerSpec.bn_dim {self.spec.bn_dim} != content dim {self.encoder.dim}")


@dataclass
class ExperimentResult:
    report: ProsodyCorrReport
    target_speaker: str
    target_f0: float
    adaptation_utterance: str
    source_f0: dict[str, float]
    manifest: Manifest
    provider: ContentProvider
    phase2_models: dict[str, VCModel]
    adapted_models: dict[str, VCModel]
    sources: list[EvalSource]
    timings: dict[str, float]
    phase1_model: VCModel | None = None
    encoder_accuracy: float = float("nan")

    def speaker_proxy(self, system: str = FULL) -> list[dict]:
        """Per pair: is median F0 within 15% of the target and closer to it than to the source?"""
        out = []
        for row in self.report.systems[system]:
            src_f0 = self.source_f0[row.source]
            med = row.median_f0
            within = abs(med - self.target_f0) <= 0.15 * self.target_f0
            closer = abs(med - self.target_f0) < abs(med - src_f0)
            out.append({"source": row.source, "median_f0": med, "source_f0": src_f0,
                        "target_f0": self.target_f0, "within_15pct": bool(within),
                        "closer_to_target": bool(closer), "ok": bool(within and closer)})
        return out

    def metrics(self) -> dict:
        """Every reported number, for reproducibility comparisons."""
        return {"report": self.report.to_dict(), "speaker_proxy": self.speaker_proxy()}


def pick_adaptation_utterance(manifest: Manifest, speaker: str) -> ManifestRecord:
    lo, hi = ADAPT_RANGE
    for rec in manifest.records:
        if rec.speaker == speaker and lo <= rec.duration <= hi:
            return rec
    raise ValueError(f"speaker {speaker} has no utterance between {lo} and {hi} s")


def pick_sources(manifest: Manifest, target_f0: float, n: int) -> list[ManifestRecord]:
    """Test-split utterances of training speakers, farthest in base F0 from the target first."""
    test = manifest.by_split("test")
    if len(test) < n:
        raise ValueError(f"need {n} test utterances, corpus has {len(test)}")
    ranked = sorted(test, key=lambda r: (-abs(manifest.speakers[r.speaker].base_f0 - target_f0), r.id))
    return sorted(ranked[:n], key=lambda r: r.id)


def eval_sources(manifest: Manifest, provider: ContentProvider, records, target_speaker: str) -> list[EvalSource]:
    out = []
    for rec in records:
        audio = read_wav(manifest.resolve(rec.path))
        mel = dsp.mel_spectrogram(audio)
        truth = dsp.mel_spectrogram(parallel_rendition(manifest, rec, target_speaker).audio)
        out.append(EvalSource(rec.id, audio, provider.features(mel, rec.id), truth))
    return out


def run_style_transfer(config: ExperimentConfig) -> ExperimentResult:
    work = Path(config.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()

    manifest = build_corpus(config.corpus)
    enc = train_toy_encoder(manifest, config.encoder)
    save_toy_encoder(enc, work / "toy_encoder")
    provider = ContentProvider(ContentProviderConfig(dim=config.encoder.dim), enc.model)
    timings["data"] = time.perf_counter() - t0

    speakers = tuple(manifest.training_speakers())
    train = prepare_examples(manifest, provider, manifest.by_split("train"), with_targets=True,
                             speakers=speakers)
    held = sorted({r.speaker for r in manifest.by_split("heldout")})
    target_speaker = held[0]
    target_f0 = manifest.speakers[target_speaker].base_f0
    adapt_rec = pick_adaptation_utterance(manifest, target_speaker)
    adapt_audio = read_wav(manifest.resolve(adapt_rec.path))
    adapt_ex = prepare_examples(manifest, provider, [adapt_rec], speakers=speakers)[0]
    adapt_stats = dsp.F0Stats.from_audio(adapt_audio)
    src_recs = pick_sources(manifest, target_f0, config.n_pairs)
    sources = eval_sources(manifest, provider, src_recs, target_speaker)

    t = time.perf_counter()
    p1 = phase1_train(train, config.phase1, ModelConfig(config.spec, speakers, True),
                      manifest.normalization_speaker, log_path=work / "phase1.log.jsonl")
    save_checkpoint(p1.model, work / "phase1", phase=1, seed=config.seed)
    timings["phase1"] = time.perf_counter() - t

    report = ProsodyCorrReport()
    phase2_models, adapted = {}, {}
    for name, use_prosody in ((FULL, True), (ABLATION, False)):
        t = time.perf_counter()
        p2 = phase2_train(p1.model, train, config.phase2, ModelConfig(config.spec, speakers, use_prosody),
                          log_path=work / f"phase2_{name}.log.jsonl")
        save_checkpoint(p2.model, work / f"phase2_{name}", phase=2, seed=config.seed)
        p3 = phase3_adapt(p2.model, adapt_ex, config.phase3, log_path=work / f"phase3_{name}.log.jsonl")
        save_checkpoint(p3.model, work / f"phase3_{name}", phase=3, seed=config.seed,
                        adapted_to=target_speaker, utterance=adapt_rec.id)
        report.add(name, evaluate_sources(p3.model, sources, adapt_ex, adapt_stats, target_speaker))
        phase2_models[name], adapted[name] = p2.model, p3.model
        timings[name] = time.perf_counter() - t
        log.info("%s: %s", name, report.aggregate(name))
    timings["total"] = time.perf_counter() - t0

    result = ExperimentResult(report, target_speaker, target_f0, adapt_rec.id,
                              {r.id: manifest.speakers[r.speaker].base_f0 for r in src_recs},
                              manifest, provider, phase2_models, adapted, sources, timings,
                              p1.model, enc.heldout_accuracy)
    write_report(report, work / "prosody_corr")
    (work / "speaker_proxy.json").write_text(json.dumps(result.speaker_proxy(), indent=2) + "\n")
    return result


def run_duration_sweep(result: ExperimentResult, config: ExperimentConfig,
                       durations=(1.0, 3.0, 6.0, 9.0, 15.0)) -> DurationSweepReport:
    """Adapt the full system's phase-2 model on growing amounts of held-out-speaker audio."""
    manifest = result.manifest
    clips = [read_wav(manifest.resolve(r.path)) for r in manifest.records
             if r.speaker == result.target_speaker]
    report = duration_sweep(result.phase2_models[FULL], clips, result.sources, result.provider,
                            config.phase3, durations, result.target_speaker)
    write_report(report, Path(config.work_dir) / "duration_sweep")
    return report
