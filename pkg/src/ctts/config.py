"""Declarative YAML configuration shared by every CLI subcommand.

Files are validated against the packaged JSON Schema (unknown keys are
rejected) and all paths resolve relative to the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .audio import MelConfig
from .errors import ConfigError

DEFAULT_TEMPLATE = "{context} {speaker} said:"


@dataclass
class DatasetSection:
    speech_manifest: Path | None = None
    text_corpus: Path | None = None
    speech_emotions: tuple[str, ...] = ("amused", "angry")
    text_emotions: tuple[str, ...] = ("positive", "negative")
    emotion_map: dict[str, str] = field(
        default_factory=lambda: {"amused": "positive", "angry": "negative"}
    )
    template: str = DEFAULT_TEMPLATE
    fanout: int = 3
    ratios: tuple[float, float, float] = (0.9, 0.05, 0.05)


@dataclass
class StageSection:
    manifest: Path | None = None
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 800
    grad_clip_norm: float = 1.0
    warmup_steps: int = 4000
    max_steps: int | None = None
    checkpoint_interval: int | None = None


@dataclass
class AssetsSection:
    lexicon: Path | None = None
    vocab: Path | None = None


@dataclass
class PipelineSection:
    embedding_bundle: Path | None = None
    finetune_imported_embeddings: bool = True
    stop_weight: float = 5.0


@dataclass
class SynthesisSection:
    stop_threshold: float = 0.5
    max_frames: int = 1000


@dataclass
class VocoderSection:
    kind: str = "griffin_lim"
    command: str | None = None
    griffin_lim_iters: int = 32


@dataclass
class AsrSection:
    kind: str = "external_command"
    command: str | None = None
    transcript: str | None = None


@dataclass
class ToolConfig:
    base_dir: Path
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    mel: MelConfig = field(default_factory=MelConfig)
    model: dict = field(default_factory=dict)
    assets: AssetsSection = field(default_factory=AssetsSection)
    stage1: StageSection = field(default_factory=StageSection)
    stage3: StageSection = field(default_factory=StageSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    synthesis: SynthesisSection = field(default_factory=SynthesisSection)
    vocoder: VocoderSection = field(default_factory=VocoderSection)
    asr: AsrSection = field(default_factory=AsrSection)


def _schema() -> dict:
    return json.loads(resources.files("ctts").joinpath("config.schema.json").read_text())


def _resolve(base: Path, value) -> Path | None:
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else base / path


def load_config(path: str | Path) -> ToolConfig:
    """Parse and schema-validate a config file; resolve relative paths."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    data = data or {}
    try:
        jsonschema.validate(data, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "top level"
        raise ConfigError(f"{path}: {exc.message} (at {where})") from None

    base = path.parent
    ds = data.get("dataset", {})
    dataset = DatasetSection(
        speech_manifest=_resolve(base, ds.get("speech_manifest")),
        text_corpus=_resolve(base, ds.get("text_corpus")),
        speech_emotions=tuple(ds.get("speech_emotions", ("amused", "angry"))),
        text_emotions=tuple(ds.get("text_emotions", ("positive", "negative"))),
        emotion_map=dict(
            ds.get("emotion_map", {"amused": "positive", "angry": "negative"})
        ),
        template=ds.get("template", DEFAULT_TEMPLATE),
        fanout=ds.get("fanout", 3),
        ratios=tuple(ds.get("ratios", (0.9, 0.05, 0.05))),
    )

    def stage(section: dict) -> StageSection:
        return StageSection(
            manifest=_resolve(base, section.get("manifest")),
            learning_rate=section.get("learning_rate", 1e-3),
            batch_size=section.get("batch_size", 8),
            epochs=section.get("epochs", 800),
            grad_clip_norm=section.get("grad_clip_norm", 1.0),
            warmup_steps=section.get("warmup_steps", 4000),
            max_steps=section.get("max_steps"),
            checkpoint_interval=section.get("checkpoint_interval"),
        )

    assets_raw = data.get("assets", {})
    pipeline_raw = data.get("pipeline", {})
    return ToolConfig(
        base_dir=base,
        seed=data.get("seed", 0),
        dataset=dataset,
        mel=MelConfig(**data.get("mel", {})),
        model=dict(data.get("model", {})),
        assets=AssetsSection(
            lexicon=_resolve(base, assets_raw.get("lexicon")),
            vocab=_resolve(base, assets_raw.get("vocab")),
        ),
        stage1=stage(data.get("stage1", {})),
        stage3=stage(data.get("stage3", {})),
        pipeline=PipelineSection(
            embedding_bundle=_resolve(base, pipeline_raw.get("embedding_bundle")),
            finetune_imported_embeddings=pipeline_raw.get("finetune_imported_embeddings", True),
            stop_weight=pipeline_raw.get("stop_weight", 5.0),
        ),
        synthesis=SynthesisSection(**data.get("synthesis", {})),
        vocoder=VocoderSection(**data.get("vocoder", {})),
        asr=AsrSection(**data.get("asr", {})),
    )
