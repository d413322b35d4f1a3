"""On-disk per-utterance features: mel, prosody, content and phase-1 targets.

Files are ``<out>/<id>.<kind>.bin`` tensor containers. Each carries a key
derived from the source audio bytes and the content provider, so a rerun
skips every file that is already up to date.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .content import ContentProvider
from .corpus import Manifest, ManifestRecord, read_wav
from .tensorio import TensorFormatError, read_header, read_tensor, write_tensor
from .training import Example

log = logging.getLogger(__name__)

KINDS = ("mel", "prosody", "content", "target")


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def provider_key(provider: ContentProvider) -> str:
    """Hash of the content provider's weights (or of its feature directory)."""
    h = hashlib.sha256(f"{provider.config.kind}:{provider.dim}".encode())
    if provider.encoder is not None:
        for name, t in provider.encoder.state_dict().items():
            h.update(name.encode())
            h.update(t.numpy().tobytes())
    else:
        h.update(str(Path(provider.config.features_dir).resolve()).encode())
    return h.hexdigest()[:16]


def feature_path(out_dir: str | os.PathLike, utt_id: str, kind: str) -> Path:
    return Path(out_dir) / f"{utt_id}.{kind}.bin"


@dataclass
class FeatureSummary:
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    completed: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)


def _fresh(path: Path, key: str) -> bool:
    if not path.exists():
        return False
    try:
        return read_header(path).get("extra", {}).get("key") == key
    except (TensorFormatError, OSError):
        return False


def extract_features(manifest: Manifest, out_dir: str | os.PathLike, provider: ContentProvider,
                     records: list[ManifestRecord] | None = None) -> FeatureSummary:
    """Write mel, prosody, content (and parallel-target mel) files for every row.

    Rows whose audio cannot be read are reported in ``failed``; the rest
    still complete.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = FeatureSummary()
    pkey = provider_key(provider)
    for rec in manifest.records if records is None else records:
        try:
            wav = manifest.resolve(rec.path)
            akey = file_sha256(wav)
            keys = {"mel": akey, "prosody": akey, "content": f"{akey}:{pkey}"}
            if rec.parallel_path:
                keys["target"] = file_sha256(manifest.resolve(rec.parallel_path))
            todo = {k: v for k, v in keys.items() if not _fresh(feature_path(out_dir, rec.id, k), v)}
            summary.skipped += [str(feature_path(out_dir, rec.id, k)) for k in keys if k not in todo]
            if todo:
                audio = read_wav(wav)
                mel = dsp.mel_spectrogram(audio)
                values = {}
                if "mel" in todo:
                    values["mel"] = mel
                if "prosody" in todo:
                    values["prosody"] = dsp.extract_prosody(audio).stack()
                if "content" in todo:
                    values["content"] = provider.features(mel, rec.id)
                if "target" in todo:
                    values["target"] = dsp.mel_spectrogram(read_wav(manifest.resolve(rec.parallel_path)))
                for kind, arr in values.items():
                    path = write_tensor(feature_path(out_dir, rec.id, kind), arr, kind, key=todo[kind])
                    summary.written.append(str(path))
            summary.completed.append(rec.id)
        except (dsp.AudioError, OSError, ValueError) as exc:
            log.error("%s: %s", rec.id, exc)
            summary.failed[rec.id] = str(exc)
    return summary


def load_example(features_dir: str | os.PathLike, rec: ManifestRecord, label: int = -1,
                 with_target: bool = False) -> Example:
    def get(kind):
        path = feature_path(features_dir, rec.id, kind)
        if not path.exists():
            raise FileNotFoundError(f"missing feature file {path}; run the features command first")
        return read_tensor(path).values

    target = get("target") if with_target else None
    return Example(rec.id, rec.speaker, get("mel"), get("content"), get("prosody"), target, label)


def load_examples(features_dir, manifest: Manifest, records, speakers, with_target=False) -> list[Example]:
    labels = {s: i for i, s in enumerate(speakers)}
    return [load_example(features_dir, r, labels.get(r.speaker, -1), with_target) for r in records]
