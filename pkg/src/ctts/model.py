"""Context-conditioned encoder-decoder over mel spectrograms.

The encoder embeds context tokens and content phonemes with separate tables,
adds sinusoidal positions over the concatenated sequence plus a two-way
stream embedding, and runs a transformer stack. The decoder generates mel
frames autoregressively from a prenet-fed causal transformer with
cross-attention into the encoder states, emitting a stop probability per
frame; a convolutional postnet refines the full frame sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .errors import ConfigError, DecodeLimitError, ValidationError
from .text import PhonemeSequence, TokenSequence


@dataclass(frozen=True)
class ModelConfig:
    text_vocab_size: int
    phone_vocab_size: int
    d_model: int = 768
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    n_heads: int = 12
    ffn_dim: int = 3072
    n_mels: int = 80
    prenet_dim: int = 256
    dropout: float = 0.1
    prenet_dropout: float = 0.5
    max_positions: int = 512
    postnet_channels: int = 512
    postnet_kernel: int = 5
    postnet_layers: int = 5

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.text_vocab_size < 1 or self.phone_vocab_size < 1:
            raise ConfigError("vocabulary sizes must be positive")
        if self.postnet_kernel % 2 != 1:
            raise ConfigError("postnet kernel must be odd")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be positive")


@dataclass
class EncoderOutput:
    """Encoder states for one (context, phonemes) pair: rows = |C| + |P|."""

    states: Tensor  # (L, d_model)
    padding_mask: Tensor  # (L,) bool, True marks padding

    @property
    def length(self) -> int:
        return self.states.shape[0]


@dataclass
class DecodeOutput:
    """Teacher-forced decoder outputs for one utterance of M frames."""

    pre_frames: Tensor  # (M, n_mels) before postnet refinement
    post_frames: Tensor  # (M, n_mels) after postnet refinement
    stop_logits: Tensor  # (M,)


@dataclass
class LossBreakdown:
    """Scalar loss terms as 0-dim tensors; total stays differentiable."""

    mel_mse: Tensor
    stop_bce: Tensor
    total: Tensor


def sinusoidal_positions(n_pos: int, d_model: int, device=None, dtype=None) -> Tensor:
    position = torch.arange(n_pos, device=device, dtype=torch.float64)[:, None]
    div = torch.exp(
        torch.arange(0, d_model, 2, device=device, dtype=torch.float64)
        * (-math.log(10000.0) / d_model)
    )
    table = torch.zeros(n_pos, d_model, device=device, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return table.to(dtype or torch.float32)


class Prenet(nn.Module):
    """Two-layer bottleneck whose dropout can be driven by an explicit RNG.

    Dropout is applied when training, or when a generator is passed in eval
    mode (reproducible inference-time prenet noise).
    """

    def __init__(self, n_in: int, width: int, p: float):
        super().__init__()
        self.fc1 = nn.Linear(n_in, width)
        self.fc2 = nn.Linear(width, width)
        self.p = p

    def _drop(self, x: Tensor, generator) -> Tensor:
        if self.p <= 0:
            return x
        keep = 1.0 - self.p
        mask = torch.rand(x.shape, device=x.device, generator=generator) < keep
        return x * mask.to(x.dtype) / keep

    def forward(self, x: Tensor, generator: torch.Generator | None = None) -> Tensor:
        active = self.training or generator is not None
        x = torch.relu(self.fc1(x))
        if active:
            x = self._drop(x, generator)
        x = torch.relu(self.fc2(x))
        if active:
            x = self._drop(x, generator)
        return x


class Postnet(nn.Module):
    """Convolutional residual refiner over the full frame sequence."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        channels = [cfg.n_mels] + [cfg.postnet_channels] * (cfg.postnet_layers - 1) + [cfg.n_mels]
        pad = cfg.postnet_kernel // 2
        self.convs = nn.ModuleList(
            nn.Conv1d(channels[i], channels[i + 1], cfg.postnet_kernel, padding=pad)
            for i in range(cfg.postnet_layers)
        )
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, frames: Tensor) -> Tensor:
        x = frames.transpose(1, 2)  # (B, n_mels, M)
        for conv in self.convs[:-1]:
            x = self.dropout(torch.tanh(conv(x)))
        x = self.convs[-1](x)
        return x.transpose(1, 2)


class CttsModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.text_emb = nn.Embedding(config.text_vocab_size, d)
        self.phone_emb = nn.Embedding(config.phone_vocab_size, d)
        self.segment_emb = nn.Embedding(2, d)
        self.input_dropout = nn.Dropout(config.dropout)

        enc_layer = nn.TransformerEncoderLayer(
            d, config.n_heads, config.ffn_dim, config.dropout, batch_first=True, norm_first=True
        )
        self.encoder = nn.TransformerEncoder(
            enc_layer, config.n_enc_layers, enable_nested_tensor=False
        )
        dec_layer = nn.TransformerDecoderLayer(
            d, config.n_heads, config.ffn_dim, config.dropout, batch_first=True, norm_first=True
        )
        self.decoder = nn.TransformerDecoder(dec_layer, config.n_dec_layers)

        self.prenet = Prenet(config.n_mels, config.prenet_dim, config.prenet_dropout)
        self.prenet_proj = nn.Linear(config.prenet_dim, d)
        self.mel_proj = nn.Linear(d, config.n_mels)
        self.stop_proj = nn.Linear(d, 1)
        self.postnet = Postnet(config)

        self.register_buffer("mel_mean", torch.zeros(config.n_mels))
        self.register_buffer("mel_std", torch.ones(config.n_mels))

        with torch.no_grad():
            scale = d ** -0.5
            for emb in (self.text_emb, self.phone_emb, self.segment_emb):
                emb.weight.normal_(0.0, scale)
            self.mel_proj.bias.zero_()
            self.stop_proj.bias.zero_()

    # -- mel normalization ------------------------------------------------

    def set_mel_stats(self, mean: Tensor, std: Tensor) -> None:
        self.mel_mean.copy_(torch.as_tensor(mean, dtype=self.mel_mean.dtype))
        self.mel_std.copy_(torch.as_tensor(std, dtype=self.mel_std.dtype).clamp_min(1e-5))

    def normalize_mel(self, frames: Tensor) -> Tensor:
        return (frames - self.mel_mean) / self.mel_std

    def denormalize_mel(self, frames: Tensor) -> Tensor:
        return frames * self.mel_std + self.mel_mean

    # -- batched forward passes -------------------------------------------

    def encode_batch(
        self,
        context_ids: Tensor,
        context_lens: Tensor,
        phone_ids: Tensor,
        phone_lens: Tensor,
    ) -> tuple[Tensor, Tensor]:
        """Concatenated [C, P] encoding -> (memory (B, L, d), pad_mask (B, L))."""
        batch, lc_max = context_ids.shape
        lp_max = phone_ids.shape[1]
        total = context_lens + phone_lens
        if int(total.max()) > self.config.max_positions:
            raise ValidationError(
                f"sequence length {int(total.max())} exceeds max_positions "
                f"{self.config.max_positions}"
            )
        device = context_ids.device
        steps_c = torch.arange(lc_max, device=device)[None, :]
        steps_p = torch.arange(lp_max, device=device)[None, :]
        ctx_pad = steps_c >= context_lens[:, None]
        pho_pad = steps_p >= phone_lens[:, None]
        pad_mask = torch.cat([ctx_pad, pho_pad], dim=1)

        # Positions index the per-sample concatenated sequence: context j at
        # j, phoneme j at |C_i| + j, regardless of batch padding layout.
        pos_idx = torch.cat([steps_c.expand(batch, -1), context_lens[:, None] + steps_p], dim=1)
        pos_idx = pos_idx.clamp_max(self.config.max_positions - 1) * (~pad_mask)

        dtype = self.text_emb.weight.dtype
        pos_table = sinusoidal_positions(self.config.max_positions, self.config.d_model, device, dtype)
        seg = torch.cat(
            [torch.zeros(batch, lc_max, dtype=torch.long, device=device),
             torch.ones(batch, lp_max, dtype=torch.long, device=device)],
            dim=1,
        )
        x = torch.cat([self.text_emb(context_ids), self.phone_emb(phone_ids)], dim=1)
        x = x + pos_table[pos_idx] + self.segment_emb(seg)
        x = self.input_dropout(x)
        memory = self.encoder(x, src_key_padding_mask=pad_mask)
        return memory, pad_mask

    def decode_batch(
        self,
        memory: Tensor,
        memory_pad: Tensor,
        dec_inputs: Tensor,
        dec_pad: Tensor | None = None,
        prenet_generator: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Causal decoder pass -> (pre_frames (B, M, n_mels), stop_logits (B, M))."""
        n_steps = dec_inputs.shape[1]
        device = dec_inputs.device
        dtype = self.mel_proj.weight.dtype
        x = self.prenet_proj(self.prenet(dec_inputs, generator=prenet_generator))
        x = x + sinusoidal_positions(n_steps, self.config.d_model, device, dtype)
        x = self.input_dropout(x)
        causal = torch.triu(
            torch.ones(n_steps, n_steps, dtype=torch.bool, device=device), diagonal=1
        )
        out = self.decoder(
            x,
            memory,
            tgt_mask=causal,
            tgt_key_padding_mask=dec_pad,
            memory_key_padding_mask=memory_pad,
        )
        return self.mel_proj(out), self.stop_proj(out).squeeze(-1)

    def teacher_forced_batch(
        self,
        memory: Tensor,
        memory_pad: Tensor,
        targets: Tensor,
        dec_pad: Tensor | None = None,
        prenet_generator: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Teacher forcing over normalized targets -> (pre, post, stop_logits).

        Step t consumes the gold frame t-1; step 0 consumes an all-zero go
        frame.
        """
        go = torch.zeros_like(targets[:, :1])
        dec_inputs = torch.cat([go, targets[:, :-1]], dim=1)
        pre, stop_logits = self.decode_batch(
            memory, memory_pad, dec_inputs, dec_pad, prenet_generator
        )
        post = pre + self.postnet(pre)
        return pre, post, stop_logits


# -- single-sequence operations --------------------------------------------


def _as_long_batch(ids: Sequence[int], device=None) -> Tensor:
    return torch.as_tensor(list(ids), dtype=torch.long, device=device).reshape(1, -1)


def encode(context: TokenSequence, phonemes: PhonemeSequence, model: CttsModel) -> EncoderOutput:
    """Encode one (context, phonemes) pair; output rows = |C| + |P|."""
    device = model.text_emb.weight.device
    memory, pad = model.encode_batch(
        _as_long_batch(context.ids, device),
        torch.tensor([len(context.ids)], device=device),
        _as_long_batch(phonemes.ids, device),
        torch.tensor([len(phonemes.ids)], device=device),
    )
    return EncoderOutput(states=memory[0], padding_mask=pad[0])


def decode_teacher_forced(
    enc: EncoderOutput,
    target_frames: Tensor,
    model: CttsModel,
    prenet_generator: torch.Generator | None = None,
) -> DecodeOutput:
    """Teacher-forced decode of one utterance.

    `target_frames` is (M, n_mels), already normalized by the model's stored
    stats.
    """
    target_frames = torch.as_tensor(target_frames, dtype=enc.states.dtype)
    if target_frames.ndim != 2 or target_frames.shape[1] != model.config.n_mels:
        raise ConfigError(
            f"target frames shape {tuple(target_frames.shape)} does not match "
            f"n_mels {model.config.n_mels}"
        )
    pre, post, stop_logits = model.teacher_forced_batch(
        enc.states[None],
        enc.padding_mask[None],
        target_frames[None],
        prenet_generator=prenet_generator,
    )
    return DecodeOutput(pre_frames=pre[0], post_frames=post[0], stop_logits=stop_logits[0])


def decode_step(
    enc: EncoderOutput,
    history: Tensor,
    model: CttsModel,
    max_steps: int = 1000,
    prenet_generator: torch.Generator | None = None,
) -> tuple[Tensor, float]:
    """One free-running step given the (normalized, pre-postnet) history.

    Recomputes the full prefix, so the result matches a teacher-forced pass
    whose gold prefix equals the history. Returns the next pre-postnet frame
    and the stop probability for that step.
    """
    history = torch.as_tensor(history, dtype=enc.states.dtype).reshape(-1, model.config.n_mels)
    if history.shape[0] >= max_steps:
        raise DecodeLimitError(f"decode history {history.shape[0]} reached limit {max_steps}")
    with torch.no_grad():
        go = torch.zeros(1, model.config.n_mels, dtype=enc.states.dtype)
        dec_inputs = torch.cat([go, history.detach()], dim=0)[None]
        pre, stop_logits = model.decode_batch(
            enc.states[None].detach(),
            enc.padding_mask[None],
            dec_inputs,
            prenet_generator=prenet_generator,
        )
    return pre[0, -1], float(torch.sigmoid(stop_logits[0, -1]))


def _stack_heads(pred_mels) -> list[Tensor]:
    if isinstance(pred_mels, (list, tuple)):
        return [torch.as_tensor(p) for p in pred_mels]
    return [torch.as_tensor(pred_mels)]


def compute_loss(
    pred_mels,
    target_mels: Tensor,
    stop_logits: Tensor,
    stop_targets: Tensor,
    stop_weight: float = 5.0,
    frame_mask: Tensor | None = None,
) -> LossBreakdown:
    """Masked MSE over the prediction heads plus weighted stop BCE.

    `pred_mels` is one tensor or a (pre, post) sequence; the MSE of each head
    is summed. `stop_targets` must be a trailing run of ones per sequence
    (exactly from the final valid frame onward). `frame_mask` is True on
    valid frames; padded frames are excluded from both terms.
    """
    heads = _stack_heads(pred_mels)
    target = torch.as_tensor(target_mels)
    stop_logits = torch.as_tensor(stop_logits)
    stop_targets = torch.as_tensor(stop_targets)
    batched = target.ndim == 3
    if not batched:
        heads = [h[None] for h in heads]
        target = target[None]
        stop_logits = stop_logits[None]
        stop_targets = stop_targets[None]
        frame_mask = frame_mask[None] if frame_mask is not None else None
    if frame_mask is None:
        frame_mask = torch.ones(target.shape[:2], dtype=torch.bool, device=target.device)

    for head in heads:
        if head.shape != target.shape:
            raise ConfigError(f"prediction shape {tuple(head.shape)} != target {tuple(target.shape)}")
    if stop_logits.shape != target.shape[:2] or stop_targets.shape != target.shape[:2]:
        raise ConfigError("stop logits/targets must be (batch, frames)")
    _check_stop_targets(stop_targets, frame_mask)

    cell_mask = frame_mask[:, :, None].to(target.dtype)
    n_cells = cell_mask.sum() * target.shape[2]
    mel_mse = sum(
        ((head - target) ** 2 * cell_mask).sum() / n_cells for head in heads
    )

    bce = nn.functional.binary_cross_entropy_with_logits(
        stop_logits, stop_targets.to(stop_logits.dtype), reduction="none"
    )
    step_mask = frame_mask.to(stop_logits.dtype)
    stop_bce = (bce * step_mask).sum() / step_mask.sum()

    total = mel_mse + stop_weight * stop_bce
    return LossBreakdown(mel_mse=mel_mse, stop_bce=stop_bce, total=total)


def _check_stop_targets(stop_targets: Tensor, frame_mask: Tensor) -> None:
    values = stop_targets.to(torch.float64)
    if not torch.all((values == 0) | (values == 1)):
        raise ValidationError("stop targets must be binary")
    for row, mask in zip(values, frame_mask):
        valid = row[mask]
        if valid.numel() == 0:
            continue
        if valid[-1] != 1:
            raise ValidationError("stop targets must end with 1 on the final valid frame")
        if torch.any(valid[1:] < valid[:-1]):
            raise ValidationError("stop targets must be a single trailing run of ones")


def init_params(config: ModelConfig, seed: int) -> CttsModel:
    """Deterministically initialized model for the given seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = CttsModel(config)
    return model
