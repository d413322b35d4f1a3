"""Per-frame content ("BN") features from a pluggable provider.

Two providers exist: precomputed feature files written by an external
recogniser, and a small built-in frame classifier trained on the synthetic
corpus whose penultimate activations stand in for recogniser bottleneck
features.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.fft import dct
from torch import nn
from torch.nn import functional as F

from . import dsp
from .corpus import VOWELS, Manifest, read_wav
from .tensorio import read_tensor

log = logging.getLogger(__name__)

N_CLASSES = len(VOWELS) + 1  # vowels + gap
N_CEPS = 20
CEP_SCALE = 10.0


class ContentError(ValueError):
    pass


@dataclass
class ContentProviderConfig:
    kind: str = "toy_encoder"   # "file" or "toy_encoder"
    dim: int = 256
    checkpoint: str | None = None
    features_dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("file", "toy_encoder"):
            raise ContentError(f"unknown content provider kind {self.kind!r}")
        if self.dim <= 0:
            raise ContentError("content dim must be positive")


def resample_nearest(values: np.ndarray, n_frames: int, src_shift: float,
                     dst_shift: float = dsp.HOP_LENGTH / dsp.SAMPLE_RATE) -> np.ndarray:
    """Pick, for each destination frame time, the nearest source frame."""
    if values.shape[0] == 0:
        raise ContentError("cannot resample an empty feature sequence")
    idx = np.rint(np.arange(n_frames) * dst_shift / src_shift).astype(np.int64)
    return values[np.clip(idx, 0, values.shape[0] - 1)]


def load_content_features(path: str | os.PathLike, dim: int, n_frames: int | None = None) -> np.ndarray:
    tf = read_tensor(path)
    if tf.values.ndim != 2:
        raise ContentError(f"{path}: content features must be 2-D, got shape {tf.values.shape}")
    if tf.values.shape[1] != dim:
        raise ContentError(f"{path}: feature dim {tf.values.shape[1]} does not match configured {dim}")
    values = tf.values
    if not np.all(np.isfinite(values)):
        raise ContentError(f"{path}: non-finite content features")
    if n_frames is not None and (values.shape[0] != n_frames or tf.frame_shift != dsp.HOP_LENGTH / dsp.SAMPLE_RATE):
        values = resample_nearest(values, n_frames, tf.frame_shift)
    return values


def envelope_cepstrum(mel: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Low-quefrency cepstrum of a log-mel spectrogram (drops harmonic detail)."""
    mel = np.asarray(mel, dtype=np.float32)
    ceps = dct(mel, type=2, norm="ortho", axis=-1)[..., :N_CEPS]
    return torch.from_numpy(ceps / CEP_SCALE)


class ToyEncoder(nn.Module):
    """Two convolutions, one bidirectional GRU, a ``dim``-wide bottleneck, softmax head."""

    def __init__(self, dim: int = 256, hidden: int = 64):
        super().__init__()
        self.dim = dim
        self.conv1 = nn.Conv1d(N_CEPS, hidden, 5, padding=2)
        self.conv2 = nn.Conv1d(hidden, hidden, 5, padding=2)
        self.rnn = nn.GRU(hidden, hidden // 2, batch_first=True, bidirectional=True)
        self.bottleneck = nn.Linear(hidden, dim)
        self.head = nn.Linear(dim, N_CLASSES)

    def features(self, ceps: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(ceps.transpose(1, 2)))
        x = F.relu(self.conv2(x)).transpose(1, 2)
        x, _ = self.rnn(x)
        return torch.tanh(self.bottleneck(x))

    def forward(self, ceps: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(ceps))


@dataclass
class ToyEncoderConfig:
    dim: int = 256
    hidden: int = 64
    epochs: int = 15
    batch_size: int = 16
    lr: float = 2e-3
    crop_frames: int = 160
    seed: int = 0


@dataclass
class ToyEncoderResult:
    model: ToyEncoder
    config: ToyEncoderConfig
    final_loss: float
    heldout_accuracy: float
    losses: list[float]


def _labelled_frames(manifest: Manifest, records):
    out = []
    for rec in records:
        if not rec.segment_times:
            raise ContentError(f"manifest row {rec.id} carries no segment labels")
        mel = dsp.mel_spectrogram(read_wav(manifest.resolve(rec.path)))
        labels = np.full(len(mel), len(VOWELS), dtype=np.int64)
        centres = np.arange(len(mel)) * dsp.HOP_LENGTH / dsp.SAMPLE_RATE
        for sym, s, e in zip(rec.script, rec.segment_times, rec.segment_ends):
            labels[(centres >= s) & (centres < e)] = VOWELS.index(sym)
        out.append((envelope_cepstrum(mel), torch.from_numpy(labels)))
    return out


def train_toy_encoder(manifest: Manifest, config: ToyEncoderConfig | None = None) -> ToyEncoderResult:
    """Train the frame classifier on training-split utterances.

    Held-out accuracy is measured on every utterance outside the training
    split (unseen utterances and held-out speakers).
    """
    config = config or ToyEncoderConfig()
    if len(manifest) == 0:
        raise ContentError("empty manifest")
    train_recs = manifest.by_split("train")
    eval_recs = [r for r in manifest.records if r.split != "train"]
    if not train_recs:
        raise ContentError("manifest has no training-split utterances")
    train = _labelled_frames(manifest, train_recs)
    evaluation = _labelled_frames(manifest, eval_recs)

    torch.manual_seed(config.seed)
    model = ToyEncoder(config.dim, config.hidden)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    losses = []
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(train))
        epoch_loss = []
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            crop = min(config.crop_frames, min(len(c) for c, _ in batch))
            xs, ys = [], []
            for ceps, labels in batch:
                off = int(rng.integers(0, len(ceps) - crop + 1))
                xs.append(ceps[off:off + crop])
                ys.append(labels[off:off + crop])
            logits = model(torch.stack(xs))
            loss = F.cross_entropy(logits.reshape(-1, N_CLASSES), torch.stack(ys).reshape(-1))
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss.append(loss.item())
        losses.append(float(np.mean(epoch_loss)))
    model.eval()
    correct = total = 0
    with torch.no_grad():
        for ceps, labels in evaluation:
            pred = model(ceps[None]).argmax(-1)[0]
            correct += int((pred == labels).sum())
            total += len(labels)
    acc = correct / total if total else float("nan")
    log.info("toy encoder: final loss %.4f, held-out frame accuracy %.3f", losses[-1], acc)
    return ToyEncoderResult(model, config, losses[-1], acc, losses)


def save_toy_encoder(result: ToyEncoderResult, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"config": asdict(result.config), "final_loss": result.final_loss,
            "heldout_accuracy": result.heldout_accuracy}
    (path / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    arrays = {k: v.numpy() for k, v in result.model.state_dict().items()}
    with open(path / "tensors.npz", "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_toy_encoder(path: str | os.PathLike) -> ToyEncoder:
    path = Path(path)
    meta = json.loads((path / "config.json").read_text())
    cfg = ToyEncoderConfig(**meta["config"])
    model = ToyEncoder(cfg.dim, cfg.hidden)
    with np.load(path / "tensors.npz") as data:
        model.load_state_dict({k: torch.from_numpy(data[k].copy()) for k in data.files})
    model.eval()
    return model


def infer_content(mel: np.ndarray, encoder: ToyEncoder, dim: int | None = None) -> np.ndarray:
    """Frames x D bottleneck activations for one log-mel spectrogram."""
    if dim is not None and dim != encoder.dim:
        raise ContentError(f"encoder produces {encoder.dim}-dim features, {dim} requested")
    mel = np.asarray(mel)
    if mel.ndim != 2 or mel.shape[1] != dsp.N_MELS:
        raise ContentError(f"expected frames x {dsp.N_MELS} mel, got {mel.shape}")
    with torch.no_grad():
        return encoder.features(envelope_cepstrum(mel)[None])[0].numpy().astype(np.float32)


class ContentProvider:
    """Hands out content features for an utterance given its mel and manifest id."""

    def __init__(self, config: ContentProviderConfig, encoder: ToyEncoder | None = None):
        self.config = config
        self.encoder = encoder
        if config.kind == "toy_encoder" and encoder is None:
            if not config.checkpoint:
                raise ContentError("toy_encoder provider needs a checkpoint")
            self.encoder = load_toy_encoder(config.checkpoint)
        if self.encoder is not None and self.encoder.dim != config.dim:
            raise ContentError(f"encoder dim {self.encoder.dim} does not match configured {config.dim}")
        if config.kind == "file" and not config.features_dir:
            raise ContentError("file provider needs features_dir")

    @property
    def dim(self) -> int:
        return self.config.dim

    def features(self, mel: np.ndarray, utt_id: str | None = None) -> np.ndarray:
        if self.config.kind == "toy_encoder":
            return infer_content(mel, self.encoder, self.config.dim)
        if utt_id is None:
            raise ContentError("file provider needs an utterance id")
        path = Path(self.config.features_dir) / f"{utt_id}.content.bin"
        return load_content_features(path, self.config.dim, len(mel))
