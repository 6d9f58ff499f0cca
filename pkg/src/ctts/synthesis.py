"""Free-running inference: context + content in, mel out, waveform out.

Decoding runs step by step until the stop probability crosses the threshold
or the frame cap is hit; the postnet then refines the whole sequence once.
Waveforms come from the built-in Griffin-Lim backend or any external command
honoring the `CMD {mel_in} {wav_out}` contract over the mel binary format.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import MelSpectrogram, Waveform, griffin_lim, load_wav, save_wav, write_mel
from .errors import ConfigError, ValidationError, VocoderError
from .model import decode_step, encode
from .text import phonemize, tokenize_context
from .training import Checkpoint, load_checkpoint, restore_model

STOP_TOKEN = "stop_token"
MAX_FRAMES = "max_frames"


@dataclass
class SynthesisRequest:
    content: str
    checkpoint: Path
    context: str = ""
    stop_threshold: float = 0.5
    max_frames: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.content.strip():
            raise ValidationError("synthesis content is empty")
        if not 0.0 < self.stop_threshold < 1.0:
            raise ValidationError(f"stop_threshold must be in (0, 1), got {self.stop_threshold}")
        if self.max_frames < 1:
            raise ValidationError(f"max_frames must be >= 1, got {self.max_frames}")
        self.checkpoint = Path(self.checkpoint)


@dataclass
class VocoderBackend:
    kind: str = "griffin_lim"
    command: str | None = None
    griffin_lim_iters: int = 32

    def __post_init__(self):
        if self.kind not in ("griffin_lim", "external"):
            raise ConfigError(f"unknown vocoder kind {self.kind!r}")
        if self.kind == "external":
            if not self.command:
                raise ConfigError("external vocoder needs a command template")
            for placeholder in ("{mel_in}", "{wav_out}"):
                if placeholder not in self.command:
                    raise ConfigError(f"vocoder command template lacks {placeholder}")


class Synthesizer:
    """A loaded checkpoint ready to synthesize many requests."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        self.model, self.vocab, self.lexicon = restore_model(ckpt)
        self.model.eval()
        self.mel_config = ckpt.mel_config

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "Synthesizer":
        return cls(load_checkpoint(path))

    def synthesize_mel(
        self,
        context: str,
        content: str,
        stop_threshold: float = 0.5,
        max_frames: int = 1000,
        seed: int = 0,
    ) -> tuple[MelSpectrogram, str]:
        cfg = self.model.config
        phones = phonemize(content, self.lexicon, max_len=cfg.max_positions)
        ctx = tokenize_context(context, self.vocab, max_len=cfg.max_positions)
        enc = encode(ctx, phones, self.model)

        generator = torch.Generator().manual_seed(seed)
        frames = torch.zeros(0, cfg.n_mels)
        stop_reason = MAX_FRAMES
        for _ in range(max_frames):
            frame, stop_prob = decode_step(
                enc, frames, self.model, max_steps=max_frames + 1, prenet_generator=generator
            )
            frames = torch.cat([frames, frame[None]], dim=0)
            if stop_prob >= stop_threshold:
                stop_reason = STOP_TOKEN
                break

        with torch.no_grad():
            refined = frames + self.model.postnet(frames[None])[0]
            denorm = self.model.denormalize_mel(refined).numpy()
        floor = math.log(self.mel_config.log_floor)
        mel = MelSpectrogram(
            frames=np.maximum(denorm, floor).astype(np.float32), config=self.mel_config
        )
        return mel, stop_reason


def synthesize_mel(req: SynthesisRequest) -> tuple[MelSpectrogram, str]:
    """Load the request's checkpoint and run free-running decoding."""
    engine = Synthesizer.from_checkpoint(req.checkpoint)
    return engine.synthesize_mel(
        req.context, req.content, req.stop_threshold, req.max_frames, req.seed
    )


def vocode(mel: MelSpectrogram, backend: VocoderBackend) -> Waveform:
    """Turn a mel into audio via Griffin-Lim or the external command contract."""
    if backend.kind == "griffin_lim":
        wave = griffin_lim(mel, backend.griffin_lim_iters)
    else:
        with tempfile.TemporaryDirectory(prefix="ctts-vocoder-") as tmp:
            mel_in = Path(tmp) / "in.mel"
            wav_out = Path(tmp) / "out.wav"
            write_mel(mel, mel_in)
            argv = [
                token.replace("{mel_in}", str(mel_in)).replace("{wav_out}", str(wav_out))
                for token in shlex.split(backend.command)
            ]
            proc = subprocess.run(argv, capture_output=True, text=True)
            if proc.returncode != 0:
                raise VocoderError(
                    f"vocoder command exited {proc.returncode}: {proc.stderr.strip()[-500:]}"
                )
            if not wav_out.exists():
                raise VocoderError("vocoder command produced no output WAV")
            wave = load_wav(wav_out, target_rate=mel.config.sample_rate)
    expected = mel.n_frames * mel.config.hop_length
    if abs(len(wave.samples) - expected) > mel.config.win_length:
        raise VocoderError(
            f"vocoder output length {len(wave.samples)} deviates from expected "
            f"{expected} by more than one window"
        )
    return wave


def synthesize(
    req: SynthesisRequest, backend: VocoderBackend, out_path: str | Path
) -> Waveform:
    """Synthesize to a WAV file plus a one-object JSON sidecar."""
    mel, stop_reason = synthesize_mel(req)
    wave = vocode(mel, backend)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_wav(wave, out_path)
    sidecar = {
        "context": req.context,
        "content": req.content,
        "checkpoint": str(req.checkpoint),
        "stop_threshold": req.stop_threshold,
        "max_frames": req.max_frames,
        "seed": req.seed,
        "stop_reason": stop_reason,
        "n_frames": mel.n_frames,
    }
    out_path.with_suffix(".json").write_text(
        json.dumps(sidecar, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    return wave
