"""Deterministic synthetic voices and corpora for desk-scale runs.

Each phoneme symbol maps to a fixed harmonic tone template (boundaries and
punctuation to silence), so a few sentences make a real, learnable
text-to-audio mapping without any recorded speech.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .audio import Waveform, save_wav
from .dataset import SPEECH_MANIFEST_FIELDS
from .text import EOS, PAD, WORD_SEP, Lexicon, phonemize

PHONE_SECONDS = 0.07
GAP_SECONDS = 0.04

TOY_SENTENCES = (
    "go away.",
    "it was a large canoe.",
    "the men stared into each other's face.",
    "it is a nice day.",
    "the red bird is warm.",
    "she said no.",
    "the old man stared into the cold rain.",
    "good food is good.",
)

TOY_POSITIVE_TEXTS = (
    "it is good solid food.",
    "a nice warm day.",
    "the green tree is home.",
    "good food and a warm sun.",
    "she said yes.",
)

TOY_NEGATIVE_TEXTS = (
    "it is too cold.",
    "the old boat is no good.",
    "no sun and cold rain.",
    "they said no.",
    "the night is dark and cold.",
)


def speaker_pitch_shift(speaker: str) -> float:
    """Stable per-speaker pitch offset in semitones."""
    digest = hashlib.blake2b(speaker.encode(), digest_size=2).digest()
    return (int.from_bytes(digest, "little") % 13) - 6.0


def _phone_tone(symbol_id: int, seconds: float, sample_rate: int, pitch_shift: float) -> np.ndarray:
    n = int(seconds * sample_rate)
    t = np.arange(n) / sample_rate
    f0 = (130.0 + 11.0 * (symbol_id % 44)) * 2 ** (pitch_shift / 12.0)
    envelope = np.hanning(n)
    wave = 0.5 * np.sin(2 * np.pi * f0 * t) + 0.25 * np.sin(2 * np.pi * 2 * f0 * t)
    return (0.6 * envelope * wave).astype(np.float64)


def render_content(
    content: str,
    lexicon: Lexicon,
    sample_rate: int = 22050,
    pitch_shift: float = 0.0,
) -> Waveform:
    """Render content text into the template voice."""
    seq = phonemize(content, lexicon)
    chunks = []
    for symbol, symbol_id in zip(seq.symbols, seq.ids):
        if symbol in (WORD_SEP, EOS, PAD) or symbol in ".,!?;:":
            chunks.append(np.zeros(int(GAP_SECONDS * sample_rate)))
        else:
            chunks.append(_phone_tone(symbol_id, PHONE_SECONDS, sample_rate, pitch_shift))
    return Waveform(samples=np.concatenate(chunks), sample_rate=sample_rate)


def make_toy_speech_manifest(
    out_dir: str | Path,
    lexicon: Lexicon,
    rows: list[dict] | None = None,
    sample_rate: int = 22050,
) -> Path:
    """Write toy WAVs plus a speech manifest; returns the manifest path.

    Row dicts need the speech-manifest fields minus audio_path.
    """
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    if rows is None:
        speakers = ("Bee", "Sam")
        emotions = ("amused", "angry")
        rows = [
            {
                "id": f"toy{i}",
                "content": sentence,
                "speaker": speakers[i % 2],
                "emotion": emotions[i % 2],
            }
            for i, sentence in enumerate(TOY_SENTENCES)
        ]
    manifest = out_dir / "speech.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for row in rows:
            wav_path = wav_dir / f"{row['id']}.wav"
            wave = render_content(
                row["content"], lexicon, sample_rate, speaker_pitch_shift(row["speaker"])
            )
            save_wav(wave, wav_path)
            record = dict(row)
            record["audio_path"] = wav_path.relative_to(out_dir).as_posix()
            fh.write(json.dumps({k: record[k] for k in SPEECH_MANIFEST_FIELDS}) + "\n")
    return manifest


def make_toy_text_corpus(path: str | Path) -> Path:
    """Write a small positive/negative text corpus."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for text in TOY_POSITIVE_TEXTS:
            fh.write(json.dumps({"text": text, "emotion": "positive"}) + "\n")
        for text in TOY_NEGATIVE_TEXTS:
            fh.write(json.dumps({"text": text, "emotion": "negative"}) + "\n")
    return path
