"""Losses, parameter snapshots, learning-rate schedules and the three training phases.

Phase 1 trains the content module as an any-to-one mapping from BN to the
normalisation speaker's mel. Phase 2 trains the speaker, prosody and
conversion modules on many speakers with ``L_recons + L_ce``. Phase 3 adapts
the conversion module's highway stack, bidirectional GRU and postnet to one
utterance with ``L_recons + gamma * ||theta - theta_f||^2``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field, replace
from types import MappingProxyType

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import dsp
from .content import ContentProvider
from .corpus import Manifest, ManifestRecord, read_wav
from .model import ADAPTABLE_PREFIXES, ModelConfig, VCModel

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


# --- losses -------------------------------------------------------------------

def loss_recons(mel_pre: Tensor, mel_post: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error of both decoder outputs against the target mel."""
    if mel_pre.shape != target.shape or mel_post.shape != target.shape:
        raise TrainingError(f"shape mismatch: pre {tuple(mel_pre.shape)}, post {tuple(mel_post.shape)}, "
                            f"target {tuple(target.shape)}")
    return (mel_pre - target).abs().mean() + (mel_post - target).abs().mean()


def loss_ce(logits: Tensor, labels: Tensor | int) -> Tensor:
    """Mean negative log-softmax probability of the true speaker labels."""
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    logits = logits.reshape(labels.shape[0], -1)
    n = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise TrainingError(f"speaker label out of range for {n} classes")
    return F.cross_entropy(logits, labels)


@dataclass(frozen=True)
class ParameterSnapshot:
    """Frozen copy of a named parameter subset, taken before adaptation."""

    tensors: MappingProxyType
    checksum: str

    def names(self) -> list[str]:
        return list(self.tensors)


def _checksum(tensors: Iterable[tuple[str, Tensor]]) -> str:
    h = hashlib.sha256()
    for name, t in tensors:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _name_matcher(name_filter) -> Callable[[str], bool]:
    if callable(name_filter):
        return name_filter
    prefixes = (name_filter,) if isinstance(name_filter, str) else tuple(name_filter)
    return lambda n: n.startswith(prefixes)


def snapshot_params(model: nn.Module, name_filter=ADAPTABLE_PREFIXES) -> ParameterSnapshot:
    match = _name_matcher(name_filter)
    picked = {n: p.detach().clone() for n, p in model.named_parameters() if match(n)}
    if not picked:
        raise TrainingError(f"parameter filter {name_filter!r} matched nothing")
    for t in picked.values():
        t.requires_grad_(False)
    return ParameterSnapshot(MappingProxyType(picked), _checksum(picked.items()))


def snapshot_checksum(snapshot: ParameterSnapshot) -> str:
    return _checksum(snapshot.tensors.items())


def loss_wreg(params: dict[str, Tensor] | nn.Module, snapshot: ParameterSnapshot) -> Tensor:
    """Sum over all adaptable tensors of squared differences to the snapshot (no averaging)."""
    if isinstance(params, nn.Module):
        params = {n: p for n, p in params.named_parameters() if n in snapshot.tensors}
    if set(params) != set(snapshot.tensors):
        missing = set(snapshot.tensors) ^ set(params)
        raise TrainingError(f"parameter names do not match the snapshot: {sorted(missing)[:5]}")
    total = None
    for name, ref in snapshot.tensors.items():
        term = (params[name] - ref.to(params[name].dtype)).pow(2).sum()
        total = term if total is None else total + term
    return total


def drift_norm(model: nn.Module, snapshot: ParameterSnapshot) -> float:
    """||theta - theta_f||_2 over the snapshot's parameters."""
    with torch.no_grad():
        return float(loss_wreg(model, snapshot).sqrt())


# --- schedules and configs ------------------------------------------------------

@dataclass
class PhaseConfig:
    phase: int
    epochs: int = 120          # phases 1 and 2
    steps: int = 2000          # phase 3
    batch_size: int = 16
    lr: float = 1e-3
    decay_interval: int = 20   # epochs (phases 1, 2) or steps (phase 3)
    decay_rate: float = 0.7
    gamma: float = 1.0
    crop_frames: int = 160
    finetune_epochs: int = 0   # phase 1: extra epochs on the normalisation speaker only
    freeze_content: bool = True
    speaker_ce_only: bool = True   # phase 2: the reference encoder learns from L_ce alone
    adaptable: tuple[str, ...] = ADAPTABLE_PREFIXES
    seed: int = 0

    def __post_init__(self):
        self.adaptable = tuple(self.adaptable)
        if self.phase not in (1, 2, 3):
            raise TrainingError(f"unknown phase {self.phase}")
        for name in ("epochs", "steps", "batch_size", "decay_interval", "crop_frames"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"PhaseConfig.{name} must be positive")
        if self.lr <= 0 or self.decay_rate <= 0:
            raise TrainingError("learning rate and decay rate must be positive")
        if self.gamma < 0:
            raise TrainingError("gamma must be non-negative")

    @classmethod
    def phase1(cls, **kw) -> "PhaseConfig":
        return cls(**{"phase": 1, "finetune_epochs": 20, **kw})

    @classmethod
    def phase2(cls, **kw) -> "PhaseConfig":
        return cls(**{"phase": 2, **kw})

    @classmethod
    def phase3(cls, **kw) -> "PhaseConfig":
        return cls(**{"phase": 3, "batch_size": 1, "decay_interval": 200, "decay_rate": 0.5, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adaptable"] = list(self.adaptable)
        return d


def lr_schedule(config: PhaseConfig, t: int) -> float:
    """Stepwise decay: ``lr * rate ** floor(t / interval)``."""
    if t < 0:
        raise TrainingError("schedule position must be non-negative")
    return config.lr * config.decay_rate ** (t // config.decay_interval)


def _set_lr(opt: torch.optim.Optimizer, lr: float):
    for group in opt.param_groups:
        group["lr"] = lr


def make_optimizer(params) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8)


# --- data ---------------------------------------------------------------------

@dataclass
class Example:
    """Aligned per-frame features of one utterance."""

    id: str
    speaker: str
    mel: np.ndarray          # frames x 80
    bn: np.ndarray           # frames x D
    prosody: np.ndarray      # frames x 3 (lf0, vuv, energy)
    target: np.ndarray | None = None   # phase-1 normalisation target mel
    label: int = -1

    def __post_init__(self):
        n = len(self.mel)
        if n == 0:
            raise TrainingError(f"utterance {self.id} has no frames")
        if len(self.bn) != n or len(self.prosody) != n or (self.target is not None and len(self.target) != n):
            raise TrainingError(f"utterance {self.id}: feature frame counts disagree")

    def __len__(self):
        return len(self.mel)


def make_example(audio: dsp.AudioClip, provider: ContentProvider, utt_id: str, speaker: str,
                 target_audio: dsp.AudioClip | None = None) -> Example:
    mel = dsp.mel_spectrogram(audio).astype(np.float32)
    bn = provider.features(mel, utt_id).astype(np.float32)
    pros = dsp.extract_prosody(audio).stack().astype(np.float32)
    target = None
    if target_audio is not None:
        target = dsp.mel_spectrogram(target_audio).astype(np.float32)
        if len(target) != len(mel):
            raise TrainingError(f"{utt_id}: parallel rendition has {len(target)} frames, source {len(mel)}")
    return Example(utt_id, speaker, mel, bn, pros, target)


def prepare_examples(manifest: Manifest, provider: ContentProvider,
                     records: Sequence[ManifestRecord] | None = None,
                     with_targets: bool = False, speakers: Sequence[str] | None = None) -> list[Example]:
    records = manifest.records if records is None else records
    labels = {s: i for i, s in enumerate(speakers or manifest.training_speakers())}
    out = []
    for rec in records:
        target = None
        if with_targets:
            if not rec.parallel_path:
                raise TrainingError(f"{rec.id}: no parallel rendition by the normalisation speaker")
            target = read_wav(manifest.resolve(rec.parallel_path))
        ex = make_example(read_wav(manifest.resolve(rec.path)), provider, rec.id, rec.speaker, target)
        ex.label = labels.get(rec.speaker, -1)
        out.append(ex)
    return out


def _crop(rng: np.random.Generator, lengths: Sequence[int], crop: int) -> tuple[int, list[int]]:
    size = min(crop, min(lengths))
    return size, [int(rng.integers(0, n - size + 1)) for n in lengths]


def _stack(arrays, offsets, size) -> Tensor:
    return torch.from_numpy(np.stack([a[o:o + size] for a, o in zip(arrays, offsets)]))


class StepLog:
    """Collects one JSON-serialisable record per optimisation step."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.records: list[dict] = []
        self.path = path
        if path is not None:
            open(path, "w").close()

    def write(self, **record):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def losses(self, key: str = "loss") -> list[float]:
        return [r[key] for r in self.records]


def trainable_checksum(params: Sequence[tuple[str, Tensor]]) -> str:
    return _checksum(params)[:16]


# --- phase 1 -------------------------------------------------------------------

@dataclass
class PhaseResult:
    model: VCModel
    log: StepLog
    pairs: list[tuple[str, str]] = field(default_factory=list)
    snapshot: ParameterSnapshot | None = None

    @property
    def final_loss(self) -> float:
        return self.log.records[-1]["loss"]


def _content_epochs(model: VCModel, examples: list[Example], config: PhaseConfig, epochs: int,
                    opt, rng, steplog: StepLog, stage: str, epoch0: int):
    params = list(model.content.named_parameters())
    for epoch in range(epochs):
        _set_lr(opt, lr_schedule(config, epoch0 + epoch))
        order = rng.permutation(len(examples))
        for start in range(0, len(order), config.batch_size):
            batch = [examples[i] for i in order[start:start + config.batch_size]]
            size, offs = _crop(rng, [len(e) for e in batch], config.crop_frames)
            bn = _stack([e.bn for e in batch], offs, size)
            target = _stack([e.target for e in batch], offs, size)
            _, pre, post = model.content(bn, None, target)
            loss = loss_recons(pre, post, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            steplog.write(phase=1, stage=stage, step=len(steplog.records), epoch=epoch0 + epoch,
                          loss=loss.item(), recons=loss.item(), lr=opt.param_groups[0]["lr"],
                          checksum=trainable_checksum(params))


def phase1_train(examples: Sequence[Example], config: PhaseConfig, model_config: ModelConfig,
                 normalization_speaker: str, log_path=None) -> PhaseResult:
    """Train the content module on (BN -> normalisation-speaker mel) pairs, then
    fine-tune on the normalisation speaker's own utterances."""
    if not examples:
        raise TrainingError("no training examples")
    if any(e.target is None for e in examples):
        raise TrainingError("phase 1 needs parallel normalisation targets for every example")
    own = [e for e in examples if e.speaker == normalization_speaker]
    if not own:
        raise TrainingError(f"normalisation speaker {normalization_speaker!r} has no utterances")
    model = VCModel(model_config, seed=config.seed)
    torch.manual_seed(config.seed + 1)
    rng = np.random.default_rng([config.seed, 1])
    opt = make_optimizer(model.content.parameters())
    steplog = StepLog(log_path)
    model.train()
    examples = list(examples)
    _content_epochs(model, examples, config, config.epochs, opt, rng, steplog, "multi", 0)
    if config.finetune_epochs:
        _content_epochs(model, own, config, config.finetune_epochs, opt, rng, steplog, "finetune",
                        config.epochs)
    model.eval()
    return PhaseResult(model, steplog)


# --- phase 2 -------------------------------------------------------------------

def encode_content(model: VCModel, bn: np.ndarray) -> np.ndarray:
    was_training = model.training
    model.content.eval()
    with torch.no_grad():
        out = model.content.encode(torch.from_numpy(np.asarray(bn, dtype=np.float32))[None])[0].numpy()
    model.content.train(was_training)
    return out


def phase2_train(base: VCModel, examples: Sequence[Example], config: PhaseConfig,
                 model_config: ModelConfig | None = None, log_path=None) -> PhaseResult:
    """Whole-model multi-speaker training with ``L_recons + L_ce``.

    ``base`` supplies the phase-1 content module; when ``model_config`` is
    given, a fresh model with that configuration receives the content module
    (used for ablations without the prosody module). The speaker reference
    of every example is a different utterance of the same speaker. With
    ``speaker_ce_only`` the reconstruction loss does not reach the reference
    encoder.
    """
    if not examples:
        raise TrainingError("no training examples")
    by_speaker: dict[str, list[int]] = {}
    for i, e in enumerate(examples):
        if e.label < 0:
            raise TrainingError(f"{e.id}: speaker {e.speaker!r} has no training label")
        by_speaker.setdefault(e.speaker, []).append(i)
    lonely = sorted(s for s, idx in by_speaker.items() if len(idx) < 2)
    if lonely:
        raise TrainingError(f"speakers with a single utterance cannot supply a distinct reference: {lonely}")

    if model_config is None:
        model = copy.deepcopy(base)
    else:
        model = VCModel(model_config, seed=config.seed)
        model.content.load_state_dict(base.content.state_dict())
    content_cache = None
    if config.freeze_content:
        for p in model.content.parameters():
            p.requires_grad_(False)
        content_cache = [encode_content(model, e.bn) for e in examples]
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    opt = make_optimizer([p for _, p in params])
    torch.manual_seed(config.seed + 2)
    rng = np.random.default_rng([config.seed, 2])
    steplog = StepLog(log_path)
    pairs = []
    model.train()
    if config.freeze_content:
        model.content.eval()
    for epoch in range(config.epochs):
        _set_lr(opt, lr_schedule(config, epoch))
        order = rng.permutation(len(examples))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [examples[i] for i in idx]
            refs = []
            for i in idx:
                choices = [j for j in by_speaker[examples[i].speaker] if j != i]
                refs.append(examples[choices[int(rng.integers(0, len(choices)))]])
            pairs.extend((b.id, r.id) for b, r in zip(batch, refs))
            size, offs = _crop(rng, [len(e) for e in batch], config.crop_frames)
            rsize, roffs = _crop(rng, [len(r) for r in refs], config.crop_frames)
            target = _stack([e.mel for e in batch], offs, size)
            bn = _stack([e.bn for e in batch], offs, size)
            pros = _stack([e.prosody for e in batch], offs, size)
            ref = _stack([r.mel for r in refs], roffs, rsize)
            labels = torch.tensor([e.label for e in batch])
            if content_cache is not None:
                content = _stack([content_cache[i] for i in idx], offs, size)
            else:
                content = model.content.encode(bn)
            spk, logits = model.speaker(ref)
            explicit = implicit = None
            if model.prosody is not None:
                explicit, implicit = model.prosody(bn, pros)
            if config.speaker_ce_only:
                spk = spk.detach()
            pre, post = model.conversion(content, spk, explicit, implicit)
            recons = loss_recons(pre, post, target)
            ce = loss_ce(logits, labels)
            loss = recons + ce
            opt.zero_grad()
            loss.backward()
            opt.step()
            steplog.write(phase=2, step=len(steplog.records), epoch=epoch, loss=loss.item(),
                          recons=recons.item(), ce=ce.item(), lr=opt.param_groups[0]["lr"],
                          checksum=trainable_checksum(params))
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return PhaseResult(model, steplog, pairs)


# --- phase 3 -------------------------------------------------------------------

def speaker_embedding(model: VCModel, mel: np.ndarray) -> Tensor:
    with torch.no_grad():
        emb, _ = model.speaker(torch.from_numpy(np.asarray(mel, dtype=np.float32))[None])
    return emb


def phase3_adapt(base: VCModel, utterances: Example | Sequence[Example], config: PhaseConfig,
                 log_path=None) -> PhaseResult:
    """Adapt a copy of ``base`` to one utterance of a new speaker.

    Only parameters matching ``config.adaptable`` are updated; all others
    stay bit-identical. The speaker reference is the adaptation utterance.
    """
    if isinstance(utterances, Example):
        utterances = [utterances]
    if len(utterances) != 1:
        raise TrainingError(f"adaptation takes exactly one utterance, got {len(utterances)}")
    utt = utterances[0]
    if len(utt) == 0:
        raise TrainingError("empty adaptation utterance")

    model = copy.deepcopy(base)
    match = _name_matcher(config.adaptable)
    for n, p in model.named_parameters():
        p.requires_grad_(match(n))
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if not params:
        raise TrainingError(f"adaptable filter {config.adaptable!r} matched nothing")
    snapshot = snapshot_params(model, config.adaptable)

    model.eval()
    content = torch.from_numpy(encode_content(model, utt.bn))[None]
    spk = speaker_embedding(model, utt.mel)
    bn = torch.from_numpy(utt.bn)[None]
    pros = torch.from_numpy(utt.prosody)[None]
    explicit = implicit = None
    if model.prosody is not None:
        with torch.no_grad():
            explicit, implicit = model.prosody(bn, pros)
    target = torch.from_numpy(utt.mel)[None]

    opt = make_optimizer([p for _, p in params])
    torch.manual_seed(config.seed + 3)
    steplog = StepLog(log_path)
    model.conversion.train()
    for step in range(config.steps):
        _set_lr(opt, lr_schedule(config, step))
        pre, post = model.conversion(content, spk, explicit, implicit)
        recons = loss_recons(pre, post, target)
        wreg = loss_wreg(dict(params), snapshot)
        loss = recons + config.gamma * wreg
        opt.zero_grad()
        loss.backward()
        opt.step()
        steplog.write(phase=3, step=step, loss=loss.item(), recons=recons.item(), wreg=wreg.item(),
                      lr=opt.param_groups[0]["lr"], checksum=trainable_checksum(params))
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return PhaseResult(model, steplog, snapshot=snapshot)
