"""Three-stage training: blank-context pretraining, pretrained text-embedding
import, and context-conditioned fine-tuning, plus the experiment variants.

Checkpoints are versioned single-file containers with a payload digest;
reloading one reproduces the next optimizer step bit-identically on the same
backend. Batch order is derived from (seed, epoch), never from consumed RNG
state, so a resumed run replays the exact schedule of an uninterrupted one.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import os
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .audio import MelConfig, Waveform, load_wav, mel_spectrogram
from .dataset import _iter_jsonl
from .errors import CheckpointError, ConfigError, CttsError, ValidationError
from .model import CttsModel, ModelConfig, compute_loss, init_params
from .text import Lexicon, Vocab, encode_labels, phonemize, tokenize_context

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

STAGE_NAMES = ("tts_pretrain", "embed_init", "ctts_finetune")
CONTEXT_MODES = ("blank", "context", "labels")
VARIANT_NAMES = ("M-CTTS", "M-TTS", "M-LTTS", "M-CTTS-NT")

PARAM_GROUPS = ("text_embedding", "phone_embedding", "segment_embedding", "encoder", "decoder")


@dataclass(frozen=True)
class StageSpec:
    """One gradient stage: dataset, conditioning mode, and hyperparameters."""

    name: str
    manifest: Path
    context_mode: str
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 800
    grad_clip_norm: float = 1.0
    warmup_steps: int = 4000
    max_steps: int | None = None
    checkpoint_interval: int | None = None
    trainable: tuple[str, ...] = ("all",)

    def __post_init__(self):
        if self.name not in STAGE_NAMES:
            raise ConfigError(f"unknown stage name {self.name!r}")
        if self.context_mode not in CONTEXT_MODES:
            raise ConfigError(f"unknown context mode {self.context_mode!r}")
        if self.name == "tts_pretrain" and self.context_mode != "blank":
            raise ConfigError("tts_pretrain stage must use blank context mode")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for group in self.trainable:
            if group != "all" and group not in PARAM_GROUPS:
                raise ConfigError(f"unknown trainable group {group!r}")


_VARIANT_CANON = {
    "M-CTTS": ("context", True),
    "M-CTTS-NT": ("context", False),
    "M-LTTS": ("labels", False),
    "M-TTS": ("blank", False),
}


@dataclass(frozen=True)
class VariantSpec:
    """One compared method; only the four canonical combinations exist."""

    name: str
    context_mode: str
    use_pretrained_text_embeddings: bool

    def __post_init__(self):
        canon = _VARIANT_CANON.get(self.name)
        if canon is None:
            raise ConfigError(f"unknown variant {self.name!r}; expected one of {VARIANT_NAMES}")
        if (self.context_mode, self.use_pretrained_text_embeddings) != canon:
            raise ConfigError(
                f"variant {self.name} requires context_mode={canon[0]!r} and "
                f"use_pretrained_text_embeddings={canon[1]}"
            )

    @classmethod
    def for_name(cls, name: str) -> "VariantSpec":
        canon = _VARIANT_CANON.get(name)
        if canon is None:
            raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANT_NAMES}")
        return cls(name=name, context_mode=canon[0], use_pretrained_text_embeddings=canon[1])


def _sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    """Self-contained training state; embeds the vocab/lexicon it was built with."""

    stage_name: str
    step: int
    model_config: ModelConfig
    mel_config: MelConfig
    model_state: dict
    vocab_text: str
    lexicon_text: str
    optimizer_state: dict | None = None
    torch_rng_state: torch.Tensor | None = None
    metadata: dict = field(default_factory=dict)
    vocab_digest: str = ""
    lexicon_digest: str = ""

    def __post_init__(self):
        if not self.vocab_digest:
            self.vocab_digest = _sha256_text(self.vocab_text)
        if not self.lexicon_digest:
            self.lexicon_digest = _sha256_text(self.lexicon_text)


def fresh_checkpoint(
    model_config: ModelConfig,
    mel_config: MelConfig,
    vocab: Vocab,
    lexicon: Lexicon,
    seed: int,
) -> Checkpoint:
    """Step-0 checkpoint with deterministically initialized parameters."""
    model = init_params(model_config, seed)
    return Checkpoint(
        stage_name="init",
        step=0,
        model_config=model_config,
        mel_config=mel_config,
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        vocab_text=vocab.canonical_text(),
        lexicon_text=lexicon.canonical_text(),
        metadata={"seed": seed},
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Atomic write of the versioned, digest-protected container."""
    payload = {
        "stage_name": ckpt.stage_name,
        "step": ckpt.step,
        "model_config": asdict(ckpt.model_config),
        "mel_config": asdict(ckpt.mel_config),
        "model_state": ckpt.model_state,
        "optimizer_state": ckpt.optimizer_state,
        "torch_rng_state": ckpt.torch_rng_state,
        "vocab_text": ckpt.vocab_text,
        "lexicon_text": ckpt.lexicon_text,
        "vocab_digest": ckpt.vocab_digest,
        "lexicon_digest": ckpt.lexicon_digest,
        "metadata": ckpt.metadata,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    outer = {
        "format_version": CHECKPOINT_VERSION,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "payload": blob,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(outer, tmp)
    os.replace(tmp, path)


def load_checkpoint(
    path: str | Path,
    vocab: Vocab | None = None,
    lexicon: Lexicon | None = None,
) -> Checkpoint:
    """Load and verify a checkpoint; optionally check asset digests against
    the vocab/lexicon the caller intends to use with it."""
    try:
        outer = torch.load(Path(path), weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(outer, dict) or "format_version" not in outer:
        raise CheckpointError(f"{path}: not a checkpoint container")
    if outer["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {outer['format_version']} != {CHECKPOINT_VERSION}"
        )
    blob = outer["payload"]
    if hashlib.sha256(blob).hexdigest() != outer["sha256"]:
        raise CheckpointError(f"{path}: payload digest mismatch (file corrupted?)")
    payload = torch.load(io.BytesIO(blob), weights_only=True)
    ckpt = Checkpoint(
        stage_name=payload["stage_name"],
        step=payload["step"],
        model_config=ModelConfig(**payload["model_config"]),
        mel_config=MelConfig(**payload["mel_config"]),
        model_state=payload["model_state"],
        vocab_text=payload["vocab_text"],
        lexicon_text=payload["lexicon_text"],
        optimizer_state=payload["optimizer_state"],
        torch_rng_state=payload["torch_rng_state"],
        metadata=payload["metadata"],
        vocab_digest=payload["vocab_digest"],
        lexicon_digest=payload["lexicon_digest"],
    )
    if vocab is not None and _sha256_text(vocab.canonical_text()) != ckpt.vocab_digest:
        raise CheckpointError(f"{path}: vocabulary digest mismatch with current vocab")
    if lexicon is not None and _sha256_text(lexicon.canonical_text()) != ckpt.lexicon_digest:
        raise CheckpointError(f"{path}: lexicon digest mismatch with current lexicon")
    return ckpt


def restore_model(ckpt: Checkpoint) -> tuple[CttsModel, Vocab, Lexicon]:
    """Rebuild the model and its text assets from a checkpoint."""
    model = CttsModel(ckpt.model_config)
    model.load_state_dict(ckpt.model_state)
    vocab = Vocab([line for line in ckpt.vocab_text.splitlines() if line])
    lexicon = Lexicon.from_text(ckpt.lexicon_text)
    return model, vocab, lexicon


@dataclass
class EmbeddingBundle:
    """Pretrained text embeddings keyed by surface token string."""

    tokens: tuple[str, ...]
    matrix: np.ndarray  # (rows, width) float32

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ValidationError("embedding matrix must be 2-D")
        if self.matrix.shape[0] != len(self.tokens):
            raise ValidationError(
                f"bundle has {len(self.tokens)} tokens but {self.matrix.shape[0]} matrix rows"
            )

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "vocab.txt").write_text("\n".join(self.tokens) + "\n", encoding="utf-8")
        (out_dir / "embeddings.f32").write_bytes(
            np.ascontiguousarray(self.matrix, dtype="<f4").tobytes()
        )
        (out_dir / "header.json").write_text(
            json.dumps({"rows": len(self.tokens), "width": self.width}) + "\n"
        )

    @classmethod
    def load(cls, bundle_dir: str | Path) -> "EmbeddingBundle":
        bundle_dir = Path(bundle_dir)
        header = json.loads((bundle_dir / "header.json").read_text())
        tokens = tuple(
            line for line in (bundle_dir / "vocab.txt").read_text(encoding="utf-8").splitlines() if line
        )
        raw = (bundle_dir / "embeddings.f32").read_bytes()
        rows, width = int(header["rows"]), int(header["width"])
        if rows != len(tokens):
            raise ValidationError(
                f"{bundle_dir}: header says {rows} rows, vocab has {len(tokens)} lines"
            )
        if len(raw) != rows * width * 4:
            raise ValidationError(f"{bundle_dir}: matrix file size does not match header")
        matrix = np.frombuffer(raw, dtype="<f4").reshape(rows, width).copy()
        return cls(tokens=tokens, matrix=matrix)


def import_text_embeddings(ckpt: Checkpoint, bundle: EmbeddingBundle) -> Checkpoint:
    """Copy bundle rows into the text-embedding table by surface token match.

    Only the text-embedding tensor changes; the achieved hit-rate lands in
    checkpoint metadata.
    """
    if bundle.width != ckpt.model_config.d_model:
        raise ConfigError(
            f"bundle width {bundle.width} != model d_model {ckpt.model_config.d_model}"
        )
    vocab_tokens = [line for line in ckpt.vocab_text.splitlines() if line]
    state = {k: v.clone() if isinstance(v, torch.Tensor) else copy.deepcopy(v) for k, v in ckpt.model_state.items()}
    table = state["text_emb.weight"]
    index = {tok: i for i, tok in enumerate(bundle.tokens)}
    hits = 0
    for row, token in enumerate(vocab_tokens):
        j = index.get(token)
        if j is not None:
            table[row] = torch.from_numpy(bundle.matrix[j]).to(table.dtype)
            hits += 1
    hit_rate = hits / len(vocab_tokens)
    metadata = {**ckpt.metadata, "embedding_import_hit_rate": hit_rate}
    return replace(
        ckpt,
        stage_name="embed_init",
        model_state=state,
        optimizer_state=None,
        metadata=metadata,
    )


# -- training data -----------------------------------------------------------


@dataclass
class TrainingExample:
    sample_id: str
    context_ids: tuple[int, ...]
    phone_ids: tuple[int, ...]
    mel: np.ndarray  # (M, n_mels) unnormalized log-mels


def load_training_examples(
    manifest: str | Path,
    context_mode: str,
    vocab: Vocab,
    lexicon: Lexicon,
    mel_config: MelConfig,
    max_positions: int,
    split: str | None = "train",
) -> list[TrainingExample]:
    """Read a manifest (CTTS or plain speech schema) into model-ready examples."""
    manifest = Path(manifest)
    examples = []
    for line_no, row in _iter_jsonl(manifest):
        if split and row.get("split") and row["split"] != split:
            continue
        sample_id = str(row.get("id", f"line{line_no}"))
        phones = phonemize(str(row["content"]), lexicon, max_len=max_positions)
        if context_mode == "blank":
            context_ids: tuple[int, ...] = ()
        elif context_mode == "context":
            context_ids = tokenize_context(str(row.get("context", "")), vocab, max_positions).ids
        else:
            context_ids = encode_labels(str(row["emotion"]), str(row["speaker"]), vocab).ids
        if len(context_ids) + len(phones.ids) > max_positions:
            raise ValidationError(
                f"sample {sample_id!r}: context+phonemes exceed max_positions {max_positions}"
            )
        audio_path = Path(str(row["audio_path"]))
        if not audio_path.is_absolute():
            audio_path = manifest.parent / audio_path
        try:
            wave = load_wav(audio_path, target_rate=mel_config.sample_rate)
        except OSError as exc:
            raise OSError(f"sample {sample_id!r}: unreadable audio ({exc})") from None
        mel = mel_spectrogram(wave, mel_config)
        examples.append(
            TrainingExample(
                sample_id=sample_id,
                context_ids=context_ids,
                phone_ids=phones.ids,
                mel=mel.frames,
            )
        )
    return examples


def mel_statistics(examples: list[TrainingExample]) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin mean/std over every frame of the corpus."""
    stacked = np.concatenate([e.mel for e in examples], axis=0).astype(np.float64)
    return stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-5)


def _collate(batch: list[TrainingExample], model: CttsModel):
    n_mels = model.config.n_mels
    lc = torch.tensor([len(e.context_ids) for e in batch])
    lp = torch.tensor([len(e.phone_ids) for e in batch])
    frames = torch.tensor([e.mel.shape[0] for e in batch])
    ctx = torch.zeros(len(batch), int(lc.max()), dtype=torch.long)
    pho = torch.zeros(len(batch), int(lp.max()), dtype=torch.long)
    target = torch.zeros(len(batch), int(frames.max()), n_mels)
    frame_mask = torch.zeros(len(batch), int(frames.max()), dtype=torch.bool)
    stop_targets = torch.ones(len(batch), int(frames.max()))
    for i, ex in enumerate(batch):
        ctx[i, : len(ex.context_ids)] = torch.as_tensor(ex.context_ids, dtype=torch.long)
        pho[i, : len(ex.phone_ids)] = torch.as_tensor(ex.phone_ids, dtype=torch.long)
        m = ex.mel.shape[0]
        target[i, :m] = torch.from_numpy(ex.mel)
        frame_mask[i, :m] = True
        stop_targets[i, : m - 1] = 0.0
    return ctx, lc, pho, lp, target, frame_mask, stop_targets


def _derived_seed(seed: int, *parts) -> int:
    key = ":".join([str(seed), *map(str, parts)])
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")


def trainable_parameters(model: CttsModel, groups: tuple[str, ...]):
    """Named parameters for the requested groups, in deterministic order."""
    if "all" in groups:
        return list(model.parameters())
    prefix_of = {
        "text_embedding": ("text_emb.",),
        "phone_embedding": ("phone_emb.",),
        "segment_embedding": ("segment_emb.",),
        "encoder": ("encoder.",),
        "decoder": ("prenet.", "prenet_proj.", "decoder.", "mel_proj.", "stop_proj.", "postnet."),
    }
    wanted = tuple(p for g in groups for p in prefix_of[g])
    return [p for name, p in model.named_parameters() if name.startswith(wanted)]


def _learning_rate(peak: float, warmup: int, step: int) -> float:
    if warmup <= 0:
        return peak
    s = step + 1
    return peak * min(s / warmup, math.sqrt(warmup / s))


def train_stage(
    spec: StageSpec,
    start: Checkpoint,
    seed: int,
    stop_weight: float = 5.0,
    out_dir: str | Path | None = None,
) -> Checkpoint:
    """Run one gradient stage from `start` and return the final checkpoint.

    Resumes mid-stage when `start` was produced by the same stage (optimizer
    state, step count, and RNG state are restored); otherwise begins the
    stage fresh from the given parameters.
    """
    if spec.name == "embed_init":
        raise ConfigError("embed_init is the embedding-import step, not a gradient stage")
    model, vocab, lexicon = restore_model(start)
    examples = load_training_examples(
        spec.manifest, spec.context_mode, vocab, lexicon, start.mel_config,
        model.config.max_positions,
    )
    if not examples:
        raise ValidationError(f"manifest {spec.manifest} yielded no training examples")

    metadata = copy.deepcopy(start.metadata)
    if not metadata.get("mel_stats_initialized"):
        mean, std = mel_statistics(examples)
        model.set_mel_stats(torch.tensor(mean), torch.tensor(std))
        metadata["mel_stats_initialized"] = True

    params = trainable_parameters(model, spec.trainable)
    if not params:
        raise ConfigError(f"trainable groups {spec.trainable} select no parameters")
    optimizer = torch.optim.Adam(params, lr=spec.learning_rate)

    resuming = start.stage_name == spec.name and start.optimizer_state is not None
    step = start.step if resuming else 0
    if resuming:
        optimizer.load_state_dict(start.optimizer_state)
        torch.set_rng_state(start.torch_rng_state)
    else:
        torch.manual_seed(_derived_seed(seed, "stage", spec.name))

    stage_stats = metadata.setdefault("stage_stats", {}).setdefault(
        spec.name,
        {"context_tokens_consumed": 0, "context_len_min": None, "context_len_max": None,
         "first_loss": None, "last_loss": None},
    )

    steps_per_epoch = math.ceil(len(examples) / spec.batch_size)
    total_steps = spec.epochs * steps_per_epoch
    if spec.max_steps is not None:
        total_steps = min(total_steps, spec.max_steps)

    def snapshot() -> Checkpoint:
        return Checkpoint(
            stage_name=spec.name,
            step=step,
            model_config=start.model_config,
            mel_config=start.mel_config,
            model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
            vocab_text=start.vocab_text,
            lexicon_text=start.lexicon_text,
            optimizer_state=copy.deepcopy(optimizer.state_dict()),
            torch_rng_state=torch.get_rng_state(),
            metadata=copy.deepcopy(metadata),
        )

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    model.train()
    indices = list(range(len(examples)))
    while step < total_steps:
        epoch = step // steps_per_epoch
        batch_idx = step % steps_per_epoch
        order = indices.copy()
        random.Random(_derived_seed(seed, "order", spec.name, epoch)).shuffle(order)
        chosen = order[batch_idx * spec.batch_size : (batch_idx + 1) * spec.batch_size]
        batch = [examples[i] for i in chosen]

        ctx, lc, pho, lp, target, frame_mask, stop_targets = _collate(batch, model)
        target_norm = model.normalize_mel(target)
        memory, mem_pad = model.encode_batch(ctx, lc, pho, lp)
        pre, post, stop_logits = model.teacher_forced_batch(
            memory, mem_pad, target_norm, dec_pad=~frame_mask
        )
        loss = compute_loss(
            (pre, post), target_norm, stop_logits, stop_targets, stop_weight, frame_mask
        )
        total = float(loss.total.detach())
        if not math.isfinite(total):
            raise CttsError(f"non-finite loss at step {step} of stage {spec.name}")

        model.zero_grad()
        loss.total.backward()
        if spec.grad_clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(params, spec.grad_clip_norm)
        lr = _learning_rate(spec.learning_rate, spec.warmup_steps, step)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()
        step += 1

        consumed = int(lc.sum())
        stage_stats["context_tokens_consumed"] += consumed
        for length in lc.tolist():
            if stage_stats["context_len_min"] is None or length < stage_stats["context_len_min"]:
                stage_stats["context_len_min"] = length
            if stage_stats["context_len_max"] is None or length > stage_stats["context_len_max"]:
                stage_stats["context_len_max"] = length
        if stage_stats["first_loss"] is None:
            stage_stats["first_loss"] = total
        stage_stats["last_loss"] = total

        log.debug(
            "stage=%s step=%d mel_mse=%.5f stop_bce=%.5f total=%.5f lr=%.2e",
            spec.name, step, float(loss.mel_mse.detach()), float(loss.stop_bce.detach()), total, lr,
        )
        if step % 50 == 0 or step == total_steps:
            log.info("stage=%s step=%d/%d total=%.5f", spec.name, step, total_steps, total)

        if (
            out_dir is not None
            and spec.checkpoint_interval
            and step % spec.checkpoint_interval == 0
            and step < total_steps
        ):
            save_checkpoint(snapshot(), out_dir / f"{spec.name}_step{step:06d}.ckpt")

    final = snapshot()
    if out_dir is not None:
        save_checkpoint(final, out_dir / f"{spec.name}_final.ckpt")
    return final


@dataclass
class PipelineConfig:
    """Everything run_pipeline needs besides the variant choice."""

    model: ModelConfig
    mel: MelConfig
    vocab: Vocab
    lexicon: Lexicon
    stage1: StageSpec
    stage3: StageSpec | None = None
    embedding_bundle: EmbeddingBundle | None = None
    out_dir: Path | None = None
    stop_weight: float = 5.0
    finetune_imported_embeddings: bool = True


def run_pipeline(variant: VariantSpec, config: PipelineConfig, seed: int) -> Checkpoint:
    """Execute the staged strategy for one variant and return its checkpoint."""
    start = fresh_checkpoint(config.model, config.mel, config.vocab, config.lexicon, seed)
    ckpt = train_stage(
        config.stage1, start, seed, stop_weight=config.stop_weight, out_dir=config.out_dir
    )
    if variant.name == "M-TTS":
        return ckpt

    if variant.use_pretrained_text_embeddings:
        if config.embedding_bundle is None:
            raise ConfigError(f"variant {variant.name} needs an embedding bundle")
        ckpt = import_text_embeddings(ckpt, config.embedding_bundle)

    if config.stage3 is None:
        raise ConfigError(f"variant {variant.name} needs a stage3 spec")
    stage3 = replace(config.stage3, context_mode=variant.context_mode)
    if variant.use_pretrained_text_embeddings and not config.finetune_imported_embeddings:
        groups = tuple(g for g in PARAM_GROUPS if g != "text_embedding")
        stage3 = replace(stage3, trainable=groups)
    return train_stage(
        stage3, ckpt, _derived_seed(seed, "stage3"), stop_weight=config.stop_weight,
        out_dir=config.out_dir,
    )
