"""The voice-conversion network: content, speaker, prosody and conversion modules."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .layers import (CBHG, LayerSpec, Postnet, Prenet, ReferenceEncoder, ShapeError,
                     init_uniform_fan_in, length_mask, run_gru)

# fixed input/output scaling of log-mel values
MEL_OFFSET = -6.0
MEL_SCALE = 3.0
# lf0 is fed to the network centred and scaled, zero on unvoiced frames
LF0_CENTER = 5.0
LF0_SCALE = 0.5

ADAPTABLE_PREFIXES = ("conversion.cbhg.highway.", "conversion.cbhg.bigru.", "conversion.postnet.")


def normalize_mel(mel: Tensor) -> Tensor:
    return (mel - MEL_OFFSET) / MEL_SCALE


def denormalize_mel(x: Tensor) -> Tensor:
    return x * MEL_SCALE + MEL_OFFSET


def explicit_inputs(prosody: Tensor) -> Tensor:
    """Network view of stacked (lf0, vuv, energy) prosody features."""
    lf0, vuv, energy = prosody.unbind(-1)
    return torch.stack([vuv * (lf0 - LF0_CENTER) / LF0_SCALE, vuv, energy], dim=-1)


class ContentModule(nn.Module):
    """Any-to-one network: CBHG encoder over BN, autoregressive mel decoder.

    The encoder output is the content representation used downstream; the
    decoder exists to force the encoder towards one normalisation speaker.
    """

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.spec = spec
        self.enc_prenet = Prenet(spec.bn_dim, spec.prenet_sizes, spec.prenet_dropout)
        self.encoder = CBHG(self.enc_prenet.out_dim, spec)
        self.dec_prenet = Prenet(spec.n_mels, spec.prenet_sizes, 0.5)
        self.decoder_rnn = nn.GRU(self.dec_prenet.out_dim + self.encoder.out_dim, spec.decoder_rnn,
                                  batch_first=True)
        self.mel_proj = nn.Linear(spec.decoder_rnn, spec.n_mels)
        self.postnet = Postnet(spec)
        self.out_dim = self.encoder.out_dim

    def encode(self, bn: Tensor, lengths: Tensor | None = None) -> Tensor:
        return self.encoder(self.enc_prenet(bn), lengths)

    def forward(self, bn: Tensor, lengths: Tensor | None = None, target_mel: Tensor | None = None):
        """Returns (content repr, mel_pre, mel_post).

        With ``target_mel`` the decoder is teacher-forced; otherwise it runs
        free, feeding back its own frames.
        """
        enc = self.encode(bn, lengths)
        mask = length_mask(lengths, enc.shape[0], enc.shape[1], enc.device).to(enc.dtype)
        if target_mel is not None:
            prev = normalize_mel(target_mel)
            prev = torch.cat([torch.zeros_like(prev[:, :1]), prev[:, :-1]], dim=1)
            h, _ = run_gru(self.decoder_rnn, torch.cat([self.dec_prenet(prev), enc], -1), lengths)
            pre = self.mel_proj(h)
        else:
            frame = enc.new_zeros(enc.shape[0], 1, self.spec.n_mels)
            state = None
            outs = []
            for t in range(enc.shape[1]):
                step = torch.cat([self.dec_prenet(frame), enc[:, t:t + 1]], -1)
                h, state = self.decoder_rnn(step, state)
                frame = self.mel_proj(h)
                outs.append(frame)
            pre = torch.cat(outs, dim=1)
        pre = pre * mask
        post = pre + self.postnet(pre, lengths)
        return enc, denormalize_mel(pre), denormalize_mel(post)


class SpeakerModule(nn.Module):
    """Reference encoder over mel plus a 3-layer speaker classifier."""

    def __init__(self, spec: LayerSpec, n_speakers: int):
        super().__init__()
        self.encoder = ReferenceEncoder(spec.n_mels, spec)
        h = spec.classifier_hidden
        self.classifier = nn.Sequential(
            nn.Linear(self.encoder.out_dim, h), nn.ReLU(),
            nn.Linear(h, h), nn.ReLU(),
            nn.Linear(h, n_speakers))
        self.out_dim = self.encoder.out_dim

    def forward(self, mel: Tensor, lengths: Tensor | None = None) -> tuple[Tensor, Tensor]:
        emb = self.encoder(normalize_mel(mel), lengths)
        return emb, self.classifier(emb)


class ProsodyModule(nn.Module):
    """Implicit utterance-level embedding from BN; explicit features pass through."""

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.encoder = ReferenceEncoder(spec.bn_dim, spec)
        self.out_dim = self.encoder.out_dim

    def forward(self, bn: Tensor, explicit: Tensor, lengths: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if bn.shape[:2] != explicit.shape[:2]:
            raise ShapeError(f"BN has {bn.shape[1]} frames but explicit prosody has {explicit.shape[1]}")
        return explicit, self.encoder(bn, lengths)


class ConversionModule(nn.Module):
    """[content | explicit | speaker | implicit] -> prenet -> CBHG -> mel -> postnet."""

    def __init__(self, spec: LayerSpec, content_dim: int, speaker_dim: int, prosody_dim: int,
                 use_prosody: bool = True):
        super().__init__()
        self.use_prosody = use_prosody
        in_dim = content_dim + speaker_dim + (3 + prosody_dim if use_prosody else 0)
        self.in_dim = in_dim
        self.prenet = Prenet(in_dim, spec.prenet_sizes, spec.prenet_dropout)
        self.cbhg = CBHG(self.prenet.out_dim, spec)
        self.mel_proj = nn.Linear(self.cbhg.out_dim, spec.n_mels)
        self.postnet = Postnet(spec)

    def forward(self, content: Tensor, speaker: Tensor, explicit: Tensor | None = None,
                implicit: Tensor | None = None, lengths: Tensor | None = None) -> tuple[Tensor, Tensor]:
        b, t, _ = content.shape
        parts = [content]
        if self.use_prosody:
            if explicit is None or implicit is None:
                raise ShapeError("conversion module built with prosody needs explicit and implicit inputs")
            if explicit.shape[:2] != content.shape[:2]:
                raise ShapeError("explicit prosody and content frame counts differ")
            parts += [explicit_inputs(explicit)]
        parts.append(speaker[:, None, :].expand(b, t, speaker.shape[-1]))
        if self.use_prosody:
            parts.append(implicit[:, None, :].expand(b, t, implicit.shape[-1]))
        x = torch.cat(parts, dim=-1)
        mask = length_mask(lengths, b, t, x.device).to(x.dtype)
        pre = self.mel_proj(self.cbhg(self.prenet(x), lengths)) * mask
        post = pre + self.postnet(pre, lengths)
        return denormalize_mel(pre), denormalize_mel(post)


@dataclass
class ModelConfig:
    spec: LayerSpec = field(default_factory=LayerSpec)
    speakers: tuple[str, ...] = ()
    use_prosody: bool = True

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "speakers": list(self.speakers), "use_prosody": self.use_prosody}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(LayerSpec.from_dict(d["spec"]), tuple(d["speakers"]), bool(d["use_prosody"]))


class VCModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        if len(config.speakers) < 1:
            raise ValueError("model needs at least one training speaker label")
        self.config = config
        spec = config.spec
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.content = ContentModule(spec)
        self.speaker = SpeakerModule(spec, len(config.speakers))
        self.prosody = ProsodyModule(spec) if config.use_prosody else None
        self.conversion = ConversionModule(spec, self.content.out_dim, self.speaker.out_dim,
                                           self.prosody.out_dim if self.prosody else 0, config.use_prosody)
        init_uniform_fan_in(self)
        # highway gates start biased towards carrying the input through
        for name, p in self.named_parameters():
            if ".highway." in name and name.endswith("T.bias"):
                nn.init.constant_(p, -1.0)
        torch.random.set_rng_state(gen_state)

    @property
    def spec(self) -> LayerSpec:
        return self.config.spec

    def speaker_index(self, label: str) -> int:
        return self.config.speakers.index(label)

    def content_forward(self, bn: Tensor, lengths=None, target_mel=None):
        return self.content(bn, lengths, target_mel)

    def forward(self, bn: Tensor, prosody: Tensor | None, ref_mel: Tensor, lengths: Tensor | None = None,
                ref_lengths: Tensor | None = None, speaker_embedding: Tensor | None = None):
        """Full conversion pass. Returns (mel_pre, mel_post, speaker logits)."""
        content = self.content.encode(bn, lengths)
        if speaker_embedding is None:
            spk, logits = self.speaker(ref_mel, ref_lengths)
        else:
            spk, logits = speaker_embedding, self.speaker.classifier(speaker_embedding)
        explicit = implicit = None
        if self.prosody is not None:
            explicit, implicit = self.prosody(bn, prosody, lengths)
        pre, post = self.conversion(content, spk, explicit, implicit, lengths)
        return pre, post, logits


def adaptable_names(model: nn.Module, prefixes=ADAPTABLE_PREFIXES) -> list[str]:
    return [n for n, _ in model.named_parameters() if n.startswith(tuple(prefixes))]


def parameter_checksums(model: nn.Module) -> dict[str, str]:
    return {n: hashlib.sha256(p.detach().cpu().numpy().tobytes()).hexdigest()
            for n, p in model.named_parameters()}


def model_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for n, c in sorted(parameter_checksums(model).items()):
        h.update(n.encode())
        h.update(c.encode())
    return h.hexdigest()


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(model: VCModel, path: str | os.PathLike, **meta) -> Path:
    """Directory with ``model.json`` (config), ``tensors.npz`` (named tensors), ``meta.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "model.json").write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n")
    arrays = {n: p.detach().cpu().numpy() for n, p in model.state_dict().items()}
    with open(path / "tensors.npz", "wb") as fh:
        np.savez(fh, **arrays)
    meta = dict(meta)
    meta["checksum"] = model_checksum(model)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[VCModel, dict]:
    path = Path(path)
    if not (path / "model.json").exists():
        raise FileNotFoundError(f"{path} is not a checkpoint directory")
    config = ModelConfig.from_dict(json.loads((path / "model.json").read_text()))
    model = VCModel(config)
    with np.load(path / "tensors.npz") as data:
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
    model.load_state_dict(state)
    meta = json.loads((path / "meta.json").read_text()) if (path / "meta.json").exists() else {}
    return model, meta
