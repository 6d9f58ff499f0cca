"""Builds context-conditioned speech datasets by emotion-keyed joining.

A speech manifest (content text + audio + speech-emotion label) is joined
with an emotional text corpus: each speech sample is paired with `fanout`
context texts whose emotion corresponds under a configured mapping, the
pair is rendered into a context string through a template, and the result
is split group-wise into train/valid/test so siblings of one recording
never leak across splits.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import string
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, ManifestParseError, ValidationError

SPLITS = ("train", "valid", "test")

SPEECH_MANIFEST_FIELDS = ("id", "audio_path", "content", "speaker", "emotion")
TEXT_CORPUS_FIELDS = ("text", "emotion")


@dataclass(frozen=True)
class SpeechSample:
    """One recording from the expressive-speech side of the join."""

    id: str
    audio_path: str
    content: str
    speaker: str
    emotion: str


@dataclass(frozen=True)
class ContextText:
    """One sentence from the emotional text corpus."""

    text: str
    emotion: str


@dataclass(frozen=True)
class EmotionMap:
    """Maps speech-emotion labels to text-emotion labels (the join key)."""

    pairs: dict[str, str]

    def text_emotion_for(self, speech_emotion: str) -> str:
        try:
            return self.pairs[speech_emotion]
        except KeyError:
            raise ValidationError(
                f"speech emotion {speech_emotion!r} has no entry in the emotion map"
            ) from None


DEFAULT_EMOTION_MAP = EmotionMap({"amused": "positive", "angry": "negative"})
DEFAULT_TEMPLATE = "{context} {speaker} said:"


@dataclass(frozen=True)
class CttsSample:
    """One joined training record; `text_emotion` is join provenance."""

    id: str
    context: str
    speaker: str
    emotion: str
    content: str
    audio_path: str
    split: str = ""
    text_emotion: str = ""


def base_speech_id(sample_id: str) -> str:
    """Speech-side id a joined sample descends from (strips the '#k' suffix)."""
    return sample_id.split("#", 1)[0]


def _iter_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(path, line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise ManifestParseError(path, line_no, "line is not a JSON object")
            yield line_no, record


def _require_fields(record: dict, fields: Sequence[str], path: Path, line_no: int) -> None:
    missing = [f for f in fields if f not in record]
    if missing:
        raise ManifestParseError(path, line_no, f"missing fields {missing}")


def ingest_speech_manifest(
    path: str | Path,
    emotion_set: set[str],
    check_audio: bool = True,
) -> list[SpeechSample]:
    """Read a speech manifest JSONL into validated samples, in file order.

    Relative audio paths are resolved against the manifest's directory.
    """
    path = Path(path)
    samples = []
    seen_ids: set[str] = set()
    for line_no, record in _iter_jsonl(path):
        _require_fields(record, SPEECH_MANIFEST_FIELDS, path, line_no)
        sample_id = str(record["id"])
        content = str(record["content"]).strip()
        emotion = str(record["emotion"])
        if sample_id in seen_ids:
            raise ValidationError(f"duplicate sample id {sample_id!r} in {path}")
        seen_ids.add(sample_id)
        if not content:
            raise ValidationError(f"sample {sample_id!r}: content is empty")
        if emotion not in emotion_set:
            raise ValidationError(
                f"sample {sample_id!r}: emotion {emotion!r} not in configured set {sorted(emotion_set)}"
            )
        audio_path = Path(str(record["audio_path"]))
        if not audio_path.is_absolute():
            audio_path = path.parent / audio_path
        if check_audio and not audio_path.is_file():
            raise ValidationError(f"sample {sample_id!r}: audio file not found: {audio_path}")
        samples.append(
            SpeechSample(
                id=sample_id,
                audio_path=audio_path.as_posix(),
                content=content,
                speaker=str(record["speaker"]),
                emotion=emotion,
            )
        )
    return samples


def ingest_text_corpus(path: str | Path, emotion_set: set[str]) -> list[ContextText]:
    """Read an emotional text corpus JSONL, trimming and validating rows."""
    path = Path(path)
    texts = []
    for line_no, record in _iter_jsonl(path):
        _require_fields(record, TEXT_CORPUS_FIELDS, path, line_no)
        text = str(record["text"]).strip()
        emotion = str(record["emotion"])
        if not text:
            raise ValidationError(f"{path}:{line_no}: text is empty after trimming")
        if emotion not in emotion_set:
            raise ValidationError(
                f"{path}:{line_no}: emotion {emotion!r} not in configured set {sorted(emotion_set)}"
            )
        texts.append(ContextText(text=text, emotion=emotion))
    return texts


_TEMPLATE_FIELDS = {"context", "speaker"}


def render_context(template: str, context_text: str, speaker: str) -> str:
    """Render a context string from a template with {context} and {speaker}."""
    fields = {name for _, name, _, _ in string.Formatter().parse(template) if name is not None}
    unknown = fields - _TEMPLATE_FIELDS
    if unknown:
        raise ConfigError(f"unknown placeholder(s) in context template: {sorted(unknown)}")
    rendered = template.format(context=context_text, speaker=speaker)
    # Collapse separator runs left by empty fields; normalize edges.
    return " ".join(rendered.split())


def _keyed_rng(seed: int, key: str) -> random.Random:
    digest = hashlib.blake2b(f"{seed}:{key}".encode("utf-8"), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "little"))


def join_by_emotion(
    speech: Sequence[SpeechSample],
    texts: Sequence[ContextText],
    emotion_map: EmotionMap,
    fanout: int,
    template: str,
    seed: int,
) -> list[CttsSample]:
    """Pair each speech sample with `fanout` emotion-matched context texts.

    Sampling is uniform without replacement per pool (with replacement when
    the pool is smaller than `fanout`) and keyed per speech id, so output is
    deterministic under (seed, input order) and independent of processing
    order across samples.
    """
    if fanout < 1:
        raise ConfigError(f"fanout must be >= 1, got {fanout}")
    pools: dict[str, list[ContextText]] = {}
    for text in texts:
        pools.setdefault(text.emotion, []).append(text)

    joined = []
    for sample in speech:
        text_emotion = emotion_map.text_emotion_for(sample.emotion)
        pool = pools.get(text_emotion, [])
        if not pool:
            raise ValidationError(
                f"no context texts with emotion {text_emotion!r} "
                f"to pair with speech emotion {sample.emotion!r}"
            )
        rng = _keyed_rng(seed, sample.id)
        if len(pool) >= fanout:
            picks = rng.sample(pool, fanout)
        else:
            picks = rng.choices(pool, k=fanout)
        for k, text in enumerate(picks):
            joined.append(
                CttsSample(
                    id=f"{sample.id}#{k}",
                    context=render_context(template, text.text, sample.speaker),
                    speaker=sample.speaker,
                    emotion=sample.emotion,
                    content=sample.content,
                    audio_path=sample.audio_path,
                    text_emotion=text.emotion,
                )
            )
    return joined


def split_dataset(
    samples: Sequence[CttsSample],
    ratios: tuple[float, float, float],
    seed: int,
) -> list[CttsSample]:
    """Assign train/valid/test splits group-wise on the base speech id.

    Split sizes target floor(r_train*n) and floor(r_valid*n) samples, the
    remainder going to test; whole fanout groups are kept together, so the
    realized counts round to group boundaries.
    """
    if len(ratios) != 3:
        raise ConfigError("ratios must be a (train, valid, test) triple")
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"split ratio {r} outside [0, 1]")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    if len(samples) < 3:
        raise ValidationError(f"need at least 3 samples to split, got {len(samples)}")

    groups: dict[str, list[CttsSample]] = {}
    for sample in samples:
        groups.setdefault(base_speech_id(sample.id), []).append(sample)
    order = list(groups)
    _keyed_rng(seed, "split").shuffle(order)

    n = len(samples)
    n_train = math.floor(ratios[0] * n)
    n_valid = math.floor(ratios[1] * n)

    out = []
    assigned = 0
    for key in order:
        if assigned < n_train:
            split = "train"
        elif assigned < n_train + n_valid:
            split = "valid"
        else:
            split = "test"
        for sample in groups[key]:
            out.append(replace(sample, split=split))
        assigned += len(groups[key])
    return out


def _sample_to_record(sample: CttsSample) -> dict:
    return {
        "id": sample.id,
        "context": sample.context,
        "speaker": sample.speaker,
        "emotion": sample.emotion,
        "content": sample.content,
        "audio_path": sample.audio_path,
        "split": sample.split,
        "provenance": {"text_emotion": sample.text_emotion},
    }


def write_manifest(samples: Sequence[CttsSample], path: str | Path) -> None:
    """Write a CTTS manifest as UTF-8 JSONL with a fixed key order."""
    path = Path(path)
    for sample in samples:
        if sample.split not in SPLITS:
            raise ValidationError(f"sample {sample.id!r} has no split assigned")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample in samples:
            fh.write(json.dumps(_sample_to_record(sample), ensure_ascii=False))
            fh.write("\n")


def read_manifest(path: str | Path) -> list[CttsSample]:
    """Read a CTTS manifest written by write_manifest."""
    path = Path(path)
    samples = []
    for line_no, record in _iter_jsonl(path):
        _require_fields(
            record,
            ("id", "context", "speaker", "emotion", "content", "audio_path", "split"),
            path,
            line_no,
        )
        split = str(record["split"])
        if split not in SPLITS:
            raise ManifestParseError(path, line_no, f"unknown split {split!r}")
        samples.append(
            CttsSample(
                id=str(record["id"]),
                context=str(record["context"]),
                speaker=str(record["speaker"]),
                emotion=str(record["emotion"]),
                content=str(record["content"]),
                audio_path=str(record["audio_path"]),
                split=split,
                text_emotion=str(record.get("provenance", {}).get("text_emotion", "")),
            )
        )
    return samples
