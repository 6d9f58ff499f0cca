"""Single command-line entry point wiring all modules together.

Subcommands: build-data, train, synth, eval, inspect. Exit codes: 0 success,
1 validation/config errors (including usage), 2 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .config import ToolConfig, load_config
from .dataset import (
    SPLITS,
    EmotionMap,
    ingest_speech_manifest,
    ingest_text_corpus,
    join_by_emotion,
    read_manifest,
    split_dataset,
    write_manifest,
    _iter_jsonl,
)
from .errors import ConfigError, CttsError, ValidationError
from .evaluation import AsrClient, evaluate_corpus
from .audio import read_mel
from .model import ModelConfig
from .synthesis import SynthesisRequest, VocoderBackend, synthesize
from .text import PAD, UNK, Lexicon, Vocab, build_vocab, default_lexicon, label_markers
from .training import (
    EmbeddingBundle,
    PipelineConfig,
    StageSpec,
    VariantSpec,
    load_checkpoint,
    run_pipeline,
    save_checkpoint,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctts", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ctts {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="join speech and text corpora into CTTS manifests")
    p.add_argument("--config", required=True, help="tool config file (YAML)")
    p.add_argument("--speech", help="speech manifest JSONL (overrides config)")
    p.add_argument("--texts", help="emotional text corpus JSONL (overrides config)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="join/split seed (overrides config)")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", help="run the staged training pipeline for one variant")
    p.add_argument("--variant", required=True, choices=["M-CTTS", "M-TTS", "M-LTTS", "M-CTTS-NT"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize speech for a context/content pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--context", default="")
    p.add_argument("--vocoder", choices=["griffin_lim", "external"], default="griffin_lim")
    p.add_argument("--vocoder-command", help="external vocoder: CMD {mel_in} {wav_out}")
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stop-threshold", type=float)
    p.add_argument("--max-frames", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="WER evaluation over the test split")
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--variants",
        required=True,
        help="comma list NAME=CKPT; use '-' as CKPT for ground-truth audio (Ref*)",
    )
    p.add_argument("--asr", help="ASR command: CMD {wav} -> transcript on stdout")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--workdir", help="directory for synthesized WAVs (default: <out>.wavs)")
    p.add_argument("--config")
    p.add_argument("--vocoder", choices=["griffin_lim", "external"])
    p.add_argument("--vocoder-command")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print metadata of toolkit artifacts")
    p.add_argument("kind", choices=["mel", "manifest", "checkpoint"])
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    return parser


def cmd_build_data(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    speech_path = Path(args.speech) if args.speech else cfg.dataset.speech_manifest
    texts_path = Path(args.texts) if args.texts else cfg.dataset.text_corpus
    if speech_path is None or texts_path is None:
        raise ConfigError("speech manifest and text corpus must be given via flags or config")

    speech = ingest_speech_manifest(speech_path, set(cfg.dataset.speech_emotions))
    texts = ingest_text_corpus(texts_path, set(cfg.dataset.text_emotions))
    joined = join_by_emotion(
        speech, texts, EmotionMap(cfg.dataset.emotion_map), cfg.dataset.fanout,
        cfg.dataset.template, seed,
    )
    samples = split_dataset(joined, cfg.dataset.ratios, seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(samples, out / "ctts.jsonl")
    for split in SPLITS:
        write_manifest([s for s in samples if s.split == split], out / f"{split}.jsonl")
    counts = {split: sum(1 for s in samples if s.split == split) for split in SPLITS}
    print(f"wrote {len(samples)} samples to {out / 'ctts.jsonl'} (splits: {counts})")
    return 0


def _load_lexicon(cfg: ToolConfig) -> Lexicon:
    if cfg.assets.lexicon is not None:
        return Lexicon.from_cmu_file(cfg.assets.lexicon)
    return default_lexicon()


def load_or_build_vocab(cfg: ToolConfig) -> Vocab:
    """Load the configured vocabulary, or build one from the fine-tuning
    manifest (context tokens plus label markers for its emotions/speakers)."""
    if cfg.assets.vocab is not None:
        return Vocab.load(cfg.assets.vocab)
    reserved = [PAD, UNK]
    contexts: list[str] = []
    if cfg.stage3.manifest is not None and Path(cfg.stage3.manifest).exists():
        emotions, speakers = set(), set()
        for _, row in _iter_jsonl(Path(cfg.stage3.manifest)):
            contexts.append(str(row.get("context", "")))
            if "emotion" in row:
                emotions.add(str(row["emotion"]))
            if "speaker" in row:
                speakers.add(str(row["speaker"]))
        reserved += label_markers(sorted(emotions), sorted(speakers))
    return build_vocab(contexts or [""], reserved)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    variant = VariantSpec.for_name(args.variant)
    lexicon = _load_lexicon(cfg)
    vocab = load_or_build_vocab(cfg)

    model_cfg = ModelConfig(
        text_vocab_size=len(vocab),
        phone_vocab_size=lexicon.size,
        n_mels=cfg.mel.n_mels,
        **cfg.model,
    )
    if cfg.stage1.manifest is None:
        raise ConfigError("stage1.manifest is required for training")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def stage_spec(name: str, section, context_mode: str) -> StageSpec:
        return StageSpec(
            name=name,
            manifest=section.manifest,
            context_mode=context_mode,
            learning_rate=section.learning_rate,
            batch_size=section.batch_size,
            epochs=section.epochs,
            grad_clip_norm=section.grad_clip_norm,
            warmup_steps=section.warmup_steps,
            max_steps=section.max_steps,
            checkpoint_interval=section.checkpoint_interval,
        )

    stage3 = None
    if cfg.stage3.manifest is not None:
        stage3 = stage_spec("ctts_finetune", cfg.stage3, "context")
    bundle = None
    if cfg.pipeline.embedding_bundle is not None:
        bundle = EmbeddingBundle.load(cfg.pipeline.embedding_bundle)

    pipeline = PipelineConfig(
        model=model_cfg,
        mel=cfg.mel,
        vocab=vocab,
        lexicon=lexicon,
        stage1=stage_spec("tts_pretrain", cfg.stage1, "blank"),
        stage3=stage3,
        embedding_bundle=bundle,
        out_dir=out,
        stop_weight=cfg.pipeline.stop_weight,
        finetune_imported_embeddings=cfg.pipeline.finetune_imported_embeddings,
    )
    ckpt = run_pipeline(variant, pipeline, seed)
    final = out / f"{variant.name}.ckpt"
    save_checkpoint(ckpt, final)
    vocab.save(out / "vocab.txt")
    print(f"trained {variant.name}: {final} (stage={ckpt.stage_name}, step={ckpt.step})")
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args.config) if args.config else None
    threshold = args.stop_threshold
    if threshold is None:
        threshold = cfg.synthesis.stop_threshold if cfg else 0.5
    max_frames = args.max_frames
    if max_frames is None:
        max_frames = cfg.synthesis.max_frames if cfg else 1000

    command = args.vocoder_command or (cfg.vocoder.command if cfg else None)
    iters = cfg.vocoder.griffin_lim_iters if cfg else 32
    backend = VocoderBackend(kind=args.vocoder, command=command, griffin_lim_iters=iters)
    request = SynthesisRequest(
        content=args.content,
        context=args.context,
        checkpoint=Path(args.ckpt),
        stop_threshold=threshold,
        max_frames=max_frames,
        seed=args.seed,
    )
    synthesize(request, backend, args.out)
    sidecar = json.loads(Path(args.out).with_suffix(".json").read_text())
    print(
        f"wrote {args.out} ({sidecar['n_frames']} frames, stop_reason={sidecar['stop_reason']})"
    )
    return 0


def _parse_variants(spec: str) -> list[tuple[str, Path | None]]:
    variants = []
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise ConfigError(f"variant entry {chunk!r} is not NAME=CKPT")
        name, _, ckpt = chunk.partition("=")
        variants.append((name.strip(), None if ckpt.strip() in ("-", "") else Path(ckpt.strip())))
    if not variants:
        raise ConfigError("no variants given")
    return variants


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    if args.asr:
        client = AsrClient(kind="external_command", command=args.asr)
    elif cfg is not None and cfg.asr.command:
        client = AsrClient(kind=cfg.asr.kind, command=cfg.asr.command, transcript=cfg.asr.transcript)
    else:
        raise ConfigError("an ASR command is required (--asr or the asr config section)")

    kind = args.vocoder or (cfg.vocoder.kind if cfg else "griffin_lim")
    command = args.vocoder_command or (cfg.vocoder.command if cfg else None)
    iters = cfg.vocoder.griffin_lim_iters if cfg else 32
    backend = VocoderBackend(kind=kind, command=command, griffin_lim_iters=iters)

    out = Path(args.out)
    workdir = Path(args.workdir) if args.workdir else out.with_suffix(".wavs")
    report = evaluate_corpus(
        manifest=args.manifest,
        variants=_parse_variants(args.variants),
        backend=backend,
        client=client,
        out_dir=workdir,
        stop_threshold=cfg.synthesis.stop_threshold if cfg else 0.5,
        max_frames=cfg.synthesis.max_frames if cfg else 1000,
        seed=args.seed,
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    print(report.render_table())
    print(f"report: {out}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if args.kind == "mel":
        mel = read_mel(path)
        print(
            f"n_mels={mel.n_mels} n_frames={mel.n_frames} "
            f"hop={mel.config.hop_length} sample_rate={mel.config.sample_rate}"
        )
    elif args.kind == "manifest":
        samples = read_manifest(path)
        counts = {split: sum(1 for s in samples if s.split == split) for split in SPLITS}
        emotions = sorted({s.emotion for s in samples})
        print(f"samples={len(samples)} splits={counts} emotions={emotions}")
    else:
        ckpt = load_checkpoint(path)
        cfg = ckpt.model_config
        print(
            f"stage={ckpt.stage_name} step={ckpt.step} d_model={cfg.d_model} "
            f"enc_layers={cfg.n_enc_layers} dec_layers={cfg.n_dec_layers} "
            f"n_mels={cfg.n_mels} text_vocab={cfg.text_vocab_size} "
            f"phone_vocab={cfg.phone_vocab_size}"
        )
        hit_rate = ckpt.metadata.get("embedding_import_hit_rate")
        if hit_rate is not None:
            print(f"embedding_import_hit_rate={hit_rate:.4f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CttsError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
