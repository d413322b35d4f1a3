"""Source-to-target conversion: features in, mel and waveform out."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import dsp
from .layers import ShapeError
from .model import VCModel


@dataclass
class Conversion:
    mel_post: np.ndarray
    audio: dsp.AudioClip
    explicit: np.ndarray     # frames x 3 prosody actually fed to the model


def convert(src_audio: dsp.AudioClip, src_bn: np.ndarray, tgt_ref: np.ndarray, tgt_f0stats: dsp.F0Stats,
            model: VCModel, gl_iters: int = 60) -> Conversion:
    """Convert ``src_audio`` towards the speaker of ``tgt_ref``.

    Source lf0 is mapped onto the target statistics before the forward pass;
    energy and voicing pass through unchanged.
    """
    pros = dsp.extract_prosody(src_audio)
    src_bn = np.asarray(src_bn, dtype=np.float32)
    if len(src_bn) != len(pros):
        raise ShapeError(f"content features have {len(src_bn)} frames, source audio {len(pros)}")
    src_stats = dsp.F0Stats.from_lf0(pros.lf0, pros.vuv)
    lf0 = dsp.transform_lf0(pros.lf0, pros.vuv, src_stats, tgt_f0stats)
    explicit = np.stack([lf0, pros.vuv, pros.energy], axis=1).astype(np.float32)
    model.eval()
    with torch.no_grad():
        _, post, _ = model(torch.from_numpy(src_bn)[None], torch.from_numpy(explicit)[None],
                           torch.from_numpy(np.asarray(tgt_ref, dtype=np.float32))[None])
    mel = post[0].numpy().astype(np.float64)
    return Conversion(mel, dsp.reconstruct_waveform(mel, n_iter=gl_iters), explicit)
