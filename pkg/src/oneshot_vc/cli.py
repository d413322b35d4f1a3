"""Command-line interface: ``oneshot-vc <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error.
A JSON config file may be given with ``--config`` or the ``ONESHOT_VC_CONFIG``
environment variable; command-line flags override it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, dsp
from .content import (ContentError, ContentProvider, ContentProviderConfig, ToyEncoderConfig,
                      load_toy_encoder, save_toy_encoder, train_toy_encoder)
from .corpus import CorpusConfig, CorpusError, Manifest, build_corpus, parallel_rendition, read_wav, write_wav
from .evaluation import (DURATIONS, DegenerateInputError, EvalSource, EvaluationError, PairResult,
                         ProsodyCorrReport, duration_sweep, emit_spectrogram_image, mcd, prosody_corr,
                         write_report)
from .features import extract_features, file_sha256, load_examples
from .layers import LayerSpec, ShapeError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import convert
from .tensorio import TensorFormatError, read_tensor, write_tensor
from .training import PhaseConfig, TrainingError, make_example, phase1_train, phase2_train, phase3_adapt

log = logging.getLogger("oneshot_vc")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3
CONFIG_ENV = "ONESHOT_VC_CONFIG"


class UsageError(Exception):
    """Bad arguments or configuration (exit 2)."""


class DataError(Exception):
    """Unusable input data (exit 3)."""


# --- configuration ---------------------------------------------------------------

@dataclass
class RunConfig:
    paths: dict = field(default_factory=dict)
    seed: int = 0
    model: dict | str = "desk"
    phases: dict = field(default_factory=dict)
    content: dict = field(default_factory=dict)
    corpus: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        path = path or os.environ.get(CONFIG_ENV)
        if not path:
            return cls()
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        unknown = set(raw) - {"paths", "seed", "model", "phases", "content", "corpus"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def path(self, key: str, override: str | None = None, default: str | None = None) -> Path:
        value = override or self.paths.get(key) or default
        if not value:
            raise UsageError(f"no {key} path given (flag or config paths.{key})")
        return Path(value)

    def layer_spec(self) -> LayerSpec:
        if self.model == "desk":
            return LayerSpec.desk()
        if self.model == "full":
            return LayerSpec()
        if isinstance(self.model, dict):
            try:
                return LayerSpec.from_dict(self.model)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid model widths: {exc}") from exc
        raise UsageError(f"model must be 'desk', 'full' or a width mapping, got {self.model!r}")

    def phase(self, n: int, **overrides) -> PhaseConfig:
        base = {1: PhaseConfig.phase1, 2: PhaseConfig.phase2, 3: PhaseConfig.phase3}[n]
        opts = {"seed": self.seed, **self.phases.get(str(n), {}), **{k: v for k, v in overrides.items()
                                                                    if v is not None}}
        try:
            return base(**opts)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid phase {n} config: {exc}") from exc

    def content_config(self) -> ContentProviderConfig:
        try:
            return ContentProviderConfig(**{"dim": self.layer_spec().bn_dim, **self.content})
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid content config: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()


class RunRecord:
    """Provenance of one command run, written atomically at the end."""

    def __init__(self, command: str, config: RunConfig, argv: list[str]):
        self.data = {"command": command, "argv": argv, "config_hash": config.digest(), "inputs": {},
                     "outputs": [], "warnings": [], "version": __version__,
                     "started": time.strftime("%Y-%m-%dT%H:%M:%S%z")}

    def input(self, name: str, digest: str):
        self.data["inputs"][name] = digest

    def output(self, path):
        self.data["outputs"].append(str(path))

    def warn(self, message: str):
        self.data["warnings"].append(message)
        warnings.warn(message, stacklevel=2)

    @property
    def content_hash(self) -> str:
        stable = {k: v for k, v in self.data.items() if k not in ("started", "finished", "record_hash")}
        return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()

    def write(self, path: Path) -> Path:
        self.data["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.data["record_hash"] = self.content_hash
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path


def checkpoint_digest(path: Path) -> str:
    meta = path / "meta.json"
    if not meta.exists():
        raise UsageError(f"{path} is not a checkpoint directory")
    return json.loads(meta.read_text()).get("checksum", "")


def load_manifest(path: Path) -> Manifest:
    try:
        return Manifest.load(path)
    except FileNotFoundError as exc:
        raise UsageError(f"no manifest at {path}") from exc


def make_provider(cfg: RunConfig, features_dir: Path | None) -> ContentProvider:
    ccfg = cfg.content_config()
    if ccfg.kind == "file":
        if not ccfg.features_dir:
            raise UsageError("content.kind 'file' needs content.features_dir")
        return ContentProvider(ccfg)
    ckpt = ccfg.checkpoint or (str(features_dir / "toy_encoder") if features_dir else None)
    if not ckpt or not (Path(ckpt) / "config.json").exists():
        raise UsageError(f"no content encoder checkpoint at {ckpt}; run the features command first")
    ccfg.checkpoint = ckpt
    return ContentProvider(ccfg)


# --- commands -----------------------------------------------------------------------

def cmd_corpus(args, cfg: RunConfig, record: RunRecord) -> int:
    out = cfg.path("corpus", args.out)
    opts = {**cfg.corpus, "out_dir": str(out), "seed": cfg.seed if args.seed is None else args.seed}
    try:
        ccfg = CorpusConfig.from_dict(opts)
        manifest = build_corpus(ccfg)
    except (CorpusError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    record.input("corpus_config", hashlib.sha256(json.dumps(asdict(ccfg), sort_keys=True).encode()).hexdigest())
    record.data["manifest_hash"] = manifest.checksum()
    record.output(manifest.path)
    counts = {s: len(manifest.by_split(s)) for s in ("train", "test", "heldout")}
    print(f"manifest: {manifest.path}")
    print(f"utterances: {len(manifest)} ({', '.join(f'{k} {v}' for k, v in counts.items())}); "
          f"speakers: {len(manifest.speakers)}")
    record.write(out / "run_record.json")
    return EXIT_OK


def cmd_features(args, cfg: RunConfig, record: RunRecord) -> int:
    manifest = load_manifest(cfg.path("corpus", args.manifest))
    out = cfg.path("features", args.out)
    out.mkdir(parents=True, exist_ok=True)
    record.input("manifest", manifest.checksum())
    ccfg = cfg.content_config()
    if ccfg.kind == "toy_encoder" and not ccfg.checkpoint and not (out / "toy_encoder" / "config.json").exists():
        print("training content encoder ...")
        try:
            res = train_toy_encoder(manifest, ToyEncoderConfig(dim=ccfg.dim, seed=cfg.seed))
        except (ContentError, dsp.AudioError) as exc:
            raise DataError(str(exc)) from exc
        save_toy_encoder(res, out / "toy_encoder")
        print(f"content encoder: held-out frame accuracy {res.heldout_accuracy:.3f}")
    provider = make_provider(cfg, out)
    summary = extract_features(manifest, out, provider)
    record.data["feature_summary"] = {"written": len(summary.written), "skipped": len(summary.skipped),
                                      "completed": len(summary.completed), "failed": summary.failed}
    print(f"rows completed: {len(summary.completed)}; files written: {len(summary.written)}, "
          f"up to date: {len(summary.skipped)}")
    record.output(out)
    record.write(out / "run_record.json")
    if summary.failed:
        for uid, msg in summary.failed.items():
            print(f"failed: {uid}: {msg}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_train(args, cfg: RunConfig, record: RunRecord) -> int:
    ckroot = cfg.path("checkpoints", args.checkpoints, "checkpoints")
    pcfg = cfg.phase(args.phase, epochs=args.epochs, steps=args.steps, gamma=args.gamma)
    if args.phase == 3:
        return _train_phase3(args, cfg, pcfg, ckroot, record)
    if args.utterance:
        raise UsageError("--utterance is only valid for phase 3")
    manifest = load_manifest(cfg.path("corpus", args.manifest))
    feats = cfg.path("features", args.features)
    speakers = tuple(manifest.training_speakers())
    records = manifest.by_split("train")
    record.input("manifest", manifest.checksum())
    out = Path(args.out) if args.out else ckroot / f"phase{args.phase}"
    try:
        examples = load_examples(feats, manifest, records, speakers, with_target=args.phase == 1)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except (TensorFormatError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    log_path = out.with_name(out.name + ".log.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.phase == 1:
        mcfg = ModelConfig(cfg.layer_spec(), speakers, True)
        res = phase1_train(examples, pcfg, mcfg, manifest.normalization_speaker, log_path=log_path)
    else:
        base = Path(args.base) if args.base else ckroot / "phase1"
        if not (base / "model.json").exists():
            raise UsageError(f"phase 2 needs a phase-1 checkpoint; none at {base}")
        record.input("base_checkpoint", checkpoint_digest(base))
        p1, _ = load_checkpoint(base)
        mcfg = ModelConfig(p1.config.spec, speakers, not args.no_prosody)
        res = phase2_train(p1, examples, pcfg, mcfg, log_path=log_path)
    save_checkpoint(res.model, out, phase=args.phase, seed=pcfg.seed, config=pcfg.to_dict(),
                    config_hash=record.data["config_hash"], steps=len(res.log.records))
    record.output(out)
    record.output(log_path)
    print(f"phase {args.phase}: {len(res.log.records)} steps, final loss {res.final_loss:.4f} -> {out}")
    record.write(out / "run_record.json")
    return EXIT_OK


def _train_phase3(args, cfg, pcfg, ckroot, record) -> int:
    if not args.utterance or len(args.utterance) != 1:
        raise UsageError(f"phase 3 takes exactly one --utterance, got {len(args.utterance or [])}")
    base = Path(args.base) if args.base else ckroot / "phase2"
    if not (base / "model.json").exists():
        raise UsageError(f"phase 3 needs a phase-2 checkpoint; none at {base}")
    utt = Path(args.utterance[0])
    record.input("base_checkpoint", checkpoint_digest(base))
    record.input("utterance", file_sha256(utt))
    model, _ = load_checkpoint(base)
    provider = make_provider(cfg, cfg.path("features", args.features, "features"))
    audio = read_wav(utt)
    example = make_example(audio, provider, utt.stem, args.speaker or utt.stem)
    out = Path(args.out) if args.out else ckroot / "phase3"
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_name(out.name + ".log.jsonl")
    res = phase3_adapt(model, example, pcfg, log_path=log_path)
    stats = dsp.F0Stats.from_audio(audio)
    save_checkpoint(res.model, out, phase=3, seed=pcfg.seed, config=pcfg.to_dict(),
                    config_hash=record.data["config_hash"], steps=len(res.log.records),
                    adapted_to=args.speaker or utt.stem, utterance=str(utt),
                    target_f0=asdict(stats))
    record.output(out)
    record.output(log_path)
    print(f"phase 3: {len(res.log.records)} steps on {audio.duration:.2f} s, final loss {res.final_loss:.4f} -> {out}")
    record.write(out / "run_record.json")
    return EXIT_OK


def cmd_convert(args, cfg: RunConfig, record: RunRecord) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "model.json").exists():
        raise UsageError(f"no checkpoint at {ckpt}")
    model, meta = load_checkpoint(ckpt)
    record.input("checkpoint", meta.get("checksum", ""))
    record.input("source", file_sha256(args.source))
    record.input("target_ref", file_sha256(args.target_ref))
    if meta.get("phase") != 3:
        record.warn(f"checkpoint {ckpt} is not adapted (phase {meta.get('phase')}); "
                    "a target speaker unseen in phase 2 will convert poorly")
    provider = make_provider(cfg, cfg.path("features", args.features, "features"))
    src, ref = read_wav(args.source), read_wav(args.target_ref)
    src_mel, ref_mel = dsp.mel_spectrogram(src), dsp.mel_spectrogram(ref)
    out = convert(src, provider.features(src_mel, Path(args.source).stem), ref_mel,
                  dsp.F0Stats.from_audio(ref), model)
    wav = Path(args.out)
    wav.parent.mkdir(parents=True, exist_ok=True)
    write_wav(wav, out.audio)
    mel_path = write_tensor(wav.with_suffix(".mel.bin"), out.mel_post, "mel", source=str(args.source))
    png = emit_spectrogram_image(out.mel_post, wav.with_suffix(".png"))
    for p in (wav, mel_path, png):
        record.output(p)
    print(f"converted {src.duration:.3f} s -> {wav} ({out.audio.duration:.3f} s), {mel_path}, {png}")
    record.write(wav.with_suffix(".run_record.json"))
    return EXIT_OK


def _load_mel(path: str) -> np.ndarray:
    if str(path).endswith(".bin"):
        return read_tensor(path).values
    return dsp.mel_spectrogram(read_wav(path))


def cmd_eval(args, cfg: RunConfig, record: RunRecord) -> int:
    if args.metric == "mcd":
        value = mcd(_load_mel(args.a), _load_mel(args.b))
        print(float(round(value, 6)))
        return EXIT_OK
    out = cfg.path("reports", args.out, "reports")
    if args.metric == "prosody-corr":
        if args.pairs:
            pairs = json.loads(Path(args.pairs).read_text())
            sources = [p["source"] for p in pairs]
            converted = [p["converted"] for p in pairs]
        else:
            sources, converted = args.source or [], args.converted or []
        if not sources or len(sources) != len(converted):
            raise UsageError(f"{len(sources)} sources but {len(converted)} converted files")
        rows = []
        for s, c in zip(sources, converted):
            try:
                r_e, r_l = prosody_corr(read_wav(s), read_wav(c))
            except DegenerateInputError as exc:
                raise DataError(f"{s} vs {c}: {exc}") from exc
            rows.append(PairResult(Path(s).stem, Path(c).stem, r_e, r_l))
        report = ProsodyCorrReport()
        report.add(args.system, rows)
    else:
        report = _duration_sweep(args, cfg, record)
    js, txt = write_report(report, out)
    print(txt.read_text(), end="")
    record.output(js)
    record.output(txt)
    record.write(out.with_suffix(".run_record.json"))
    return EXIT_OK


def _duration_sweep(args, cfg: RunConfig, record: RunRecord):
    base = Path(args.checkpoint)
    if not (base / "model.json").exists():
        raise UsageError(f"no phase-2 checkpoint at {base}")
    record.input("checkpoint", checkpoint_digest(base))
    model, _ = load_checkpoint(base)
    provider = make_provider(cfg, cfg.path("features", args.features, "features"))
    if args.manifest:
        from .experiment import eval_sources, pick_sources
        manifest = load_manifest(Path(args.manifest))
        speaker = args.target_speaker or sorted({r.speaker for r in manifest.by_split("heldout")})[0]
        clips = [read_wav(manifest.resolve(r.path)) for r in manifest.records if r.speaker == speaker]
        recs = pick_sources(manifest, manifest.speakers[speaker].base_f0, args.n_pairs)
        sources = eval_sources(manifest, provider, recs, speaker)
    else:
        speaker = args.target_speaker or "target"
        if not args.target_audio or not args.source:
            raise UsageError("give --manifest, or --target-audio with --source and --ground-truth")
        if len(args.source) != len(args.ground_truth or []):
            raise UsageError(f"{len(args.source)} sources but {len(args.ground_truth or [])} ground truths")
        clips = [read_wav(p) for p in args.target_audio]
        sources = []
        for s, g in zip(args.source, args.ground_truth):
            audio = read_wav(s)
            mel = dsp.mel_spectrogram(audio)
            sources.append(EvalSource(Path(s).stem, audio, provider.features(mel, Path(s).stem), _load_mel(g)))
    return duration_sweep(model, clips, sources, provider, cfg.phase(3, steps=args.steps), DURATIONS, speaker)


def cmd_experiment(args, cfg: RunConfig, record: RunRecord) -> int:
    from .experiment import ExperimentConfig, run_duration_sweep, run_style_transfer

    work = Path(args.work)
    ecfg = ExperimentConfig(str(work), seed=cfg.seed if args.seed is None else args.seed)
    result = run_style_transfer(ecfg)
    print(result.report.to_text(), end="")
    ok = sum(p["ok"] for p in result.speaker_proxy())
    print(f"speaker proxy: {ok}/{len(result.speaker_proxy())} pairs near target F0 {result.target_f0:g} Hz")
    if args.sweep:
        print(run_duration_sweep(result, ecfg).to_text(), end="")
    record.output(work)
    record.write(work / "run_record.json")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oneshot-vc", description="One-shot voice conversion toolkit.")
    p.add_argument("--config", help=f"JSON run config (default: ${CONFIG_ENV})")
    p.add_argument("--log-level", default="WARNING")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="synthesise the toy corpus")
    c.add_argument("--out")
    c.add_argument("--seed", type=int)

    f = sub.add_parser("features", help="extract mel, prosody and content features")
    f.add_argument("--manifest", help="corpus directory")
    f.add_argument("--out")

    t = sub.add_parser("train", help="run one training phase")
    t.add_argument("--phase", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--manifest")
    t.add_argument("--features")
    t.add_argument("--checkpoints", help="checkpoint root directory")
    t.add_argument("--base", help="prior-phase checkpoint (phases 2 and 3)")
    t.add_argument("--out", help="output checkpoint directory")
    t.add_argument("--utterance", action="append", help="phase 3 adaptation WAV (exactly one)")
    t.add_argument("--speaker", help="label recorded for the adapted speaker")
    t.add_argument("--no-prosody", action="store_true", help="ablation: no prosody module (phase 2)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--gamma", type=float)

    v = sub.add_parser("convert", help="convert one source utterance")
    v.add_argument("--source", required=True)
    v.add_argument("--target-ref", required=True)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--features", help="features directory holding the content encoder")

    e = sub.add_parser("eval", help="objective evaluation")
    esub = e.add_subparsers(dest="metric", required=True)
    m = esub.add_parser("mcd")
    m.add_argument("a")
    m.add_argument("b")
    pc = esub.add_parser("prosody-corr")
    pc.add_argument("--pairs", help="JSON list of {source, converted}")
    pc.add_argument("--source", action="append")
    pc.add_argument("--converted", action="append")
    pc.add_argument("--system", default="system")
    pc.add_argument("--out", help="report path stem")
    ds = esub.add_parser("duration-sweep")
    ds.add_argument("--checkpoint", required=True, help="phase-2 checkpoint")
    ds.add_argument("--features")
    ds.add_argument("--manifest")
    ds.add_argument("--target-speaker")
    ds.add_argument("--n-pairs", type=int, default=9)
    ds.add_argument("--target-audio", action="append")
    ds.add_argument("--source", action="append")
    ds.add_argument("--ground-truth", action="append")
    ds.add_argument("--steps", type=int)
    ds.add_argument("--out", help="report path stem")

    x = sub.add_parser("experiment", help="full desk experiment (style transfer and ablation)")
    x.add_argument("--work", required=True)
    x.add_argument("--seed", type=int)
    x.add_argument("--sweep", action="store_true", help="also run the duration sweep")
    return p


COMMANDS = {"corpus": cmd_corpus, "features": cmd_features, "train": cmd_train, "convert": cmd_convert,
            "eval": cmd_eval, "experiment": cmd_experiment}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        record = RunRecord(args.command, cfg, argv)
        return COMMANDS[args.command](args, cfg, record)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, dsp.AudioError, TensorFormatError, ContentError, DegenerateInputError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, ShapeError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
