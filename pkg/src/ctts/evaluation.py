"""Content-fidelity evaluation: WER between input content and ASR output.

The harness synthesizes every test-split sample per variant (or points at
the original audio for the ground-truth column), transcribes through a
pluggable ASR client, and pools word error rates corpus-level (total edit
errors over total reference words).
"""

from __future__ import annotations

import hashlib
import json
import logging
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

from .dataset import read_manifest
from .errors import ConfigError, CttsError, TranscriptionError, ValidationError
from .synthesis import Synthesizer, VocoderBackend, vocode
from .audio import save_wav
from .text import canonical_label_string
from .training import VARIANT_NAMES, VariantSpec

log = logging.getLogger(__name__)

REFERENCE_COLUMN = "Ref*"
COLUMN_ORDER = (REFERENCE_COLUMN, "M-CTTS", "M-LTTS", "M-CTTS-NT", "M-TTS")

# Published comparison values; printed for orientation only and explicitly
# labeled "paper, not reproduced" because desk-scale runs cannot reach them.
PUBLISHED_WER = {
    REFERENCE_COLUMN: 0.1401,
    "M-CTTS": 0.1342,
    "M-LTTS": 0.1122,
    "M-CTTS-NT": 0.2186,
    "M-TTS": 0.0734,
}
PUBLISHED_WER_LABEL = "paper, not reproduced"


@dataclass
class AsrClient:
    """External command contract (`CMD {wav}` -> transcript on stdout) or an
    echo test double returning canned transcripts."""

    kind: str
    command: str | None = None
    transcript: str | dict[str, str] | None = None

    def __post_init__(self):
        if self.kind not in ("external_command", "echo_stub"):
            raise ConfigError(f"unknown ASR client kind {self.kind!r}")
        if self.kind == "external_command":
            if not self.command or "{wav}" not in self.command:
                raise ConfigError("external ASR command must contain the {wav} placeholder")


class WerResult(NamedTuple):
    rate: float
    substitutions: int
    insertions: int
    deletions: int


@dataclass
class SampleRow:
    id: str
    reference: str
    hypothesis: str
    substitutions: int
    insertions: int
    deletions: int
    rate: float
    ref_len: int


@dataclass
class EvalReport:
    variant_wer: dict[str, float]
    rows: dict[str, list[SampleRow]]
    warnings: dict[str, int]
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "variant_wer": self.variant_wer,
            "published_wer": {"values": PUBLISHED_WER, "label": PUBLISHED_WER_LABEL},
            "warnings": self.warnings,
            "metadata": self.metadata,
            "rows": {
                name: [vars(row) for row in rows] for name, rows in self.rows.items()
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), ensure_ascii=False, indent=2) + "\n",
            encoding="utf-8",
        )

    def render_table(self) -> str:
        """Five-column comparison table with the published reference line."""
        names = list(COLUMN_ORDER) + [n for n in self.variant_wer if n not in COLUMN_ORDER]
        width = max(12, *(len(n) + 2 for n in names))
        header = "".join(n.rjust(width) for n in names)
        measured = "".join(
            (f"{self.variant_wer[n]:.4f}" if n in self.variant_wer else "-").rjust(width)
            for n in names
        )
        published = "".join(
            (f"{PUBLISHED_WER[n]:.4f}" if n in PUBLISHED_WER else "-").rjust(width)
            for n in names
        )
        lines = [
            f"WER comparison ({self.metadata.get('pooling', 'corpus-pooled')})",
            " " * 12 + header,
            "measured".ljust(12) + measured,
            "reference*".ljust(12) + published,
            f"* reference: {PUBLISHED_WER_LABEL}",
        ]
        return "\n".join(lines)


def normalize_transcript(text: str) -> list[str]:
    """Lowercase, strip punctuation except intra-word apostrophes, split."""
    kept = [ch if ch.isalnum() or ch == "'" else " " for ch in text.lower()]
    words = "".join(kept).split()
    return [w for w in (word.strip("'") for word in words) if w]


def wer(reference: Sequence[str], hypothesis: Sequence[str]) -> WerResult:
    """Word-level Levenshtein rate with counts from one minimal alignment.

    Ties during backtrace prefer substitution over insertion over deletion.
    """
    if not reference:
        raise ValidationError("WER reference is empty")
    n, m = len(reference), len(hypothesis)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1][j - 1] + (reference[i - 1] != hypothesis[j - 1])
            dist[i][j] = min(sub, dist[i][j - 1] + 1, dist[i - 1][j] + 1)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if (
            i > 0
            and j > 0
            and dist[i][j] == dist[i - 1][j - 1] + (reference[i - 1] != hypothesis[j - 1])
        ):
            if reference[i - 1] != hypothesis[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif j > 0 and dist[i][j] == dist[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    errors = subs + ins + dels
    return WerResult(rate=errors / n, substitutions=subs, insertions=ins, deletions=dels)


def transcribe(wav_path: str | Path, client: AsrClient) -> str:
    """Run one ASR invocation (or return the stub transcript) for a WAV."""
    wav_path = Path(wav_path)
    if client.kind == "echo_stub":
        if isinstance(client.transcript, dict):
            try:
                return client.transcript[wav_path.stem]
            except KeyError:
                raise TranscriptionError(
                    f"echo stub has no transcript for {wav_path.stem!r}"
                ) from None
        return client.transcript or ""
    argv = [tok.replace("{wav}", str(wav_path)) for tok in shlex.split(client.command)]
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise TranscriptionError(
            f"ASR command exited {proc.returncode}: {proc.stderr.strip()[-500:]}"
        )
    return proc.stdout.strip()


def wav_stem(sample_id: str) -> str:
    return sample_id.replace("#", "_")


def _context_for(sample, mode: str) -> str:
    if mode == "blank":
        return ""
    if mode == "labels":
        return canonical_label_string(sample.emotion, sample.speaker)
    return sample.context


def _request_seed(seed: int, sample_id: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{sample_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def evaluate_corpus(
    manifest: str | Path,
    variants: Sequence[tuple[str, str | Path | None]],
    backend: VocoderBackend,
    client: AsrClient,
    out_dir: str | Path,
    stop_threshold: float = 0.5,
    max_frames: int = 1000,
    seed: int = 0,
) -> EvalReport:
    """Synthesize, transcribe, and score the test split for each variant.

    A variant whose checkpoint is None scores the original recordings
    (the ground-truth Ref* column). Per-sample failures are counted as
    warnings and excluded, never silently dropped.
    """
    manifest = Path(manifest)
    test = [s for s in read_manifest(manifest) if s.split == "test"]
    if not test:
        raise ValidationError(f"{manifest}: test split is empty")
    out_dir = Path(out_dir)

    variant_wer: dict[str, float] = {}
    rows: dict[str, list[SampleRow]] = {}
    warnings: dict[str, int] = {}
    for name, ckpt_path in variants:
        if ckpt_path is None:
            engine, mode = None, None
        else:
            engine = Synthesizer.from_checkpoint(ckpt_path)
            mode = (
                VariantSpec.for_name(name).context_mode if name in VARIANT_NAMES else "context"
            )
        variant_dir = out_dir / wav_stem(name.replace("*", ""))
        variant_dir.mkdir(parents=True, exist_ok=True)

        variant_rows: list[SampleRow] = []
        warn_count = 0
        total_errors = 0
        total_ref_words = 0
        for sample in test:
            try:
                if engine is None:
                    wav_path = Path(sample.audio_path)
                    if not wav_path.is_absolute():
                        wav_path = manifest.parent / wav_path
                else:
                    context = _context_for(sample, mode)
                    mel, stop_reason = engine.synthesize_mel(
                        context,
                        sample.content,
                        stop_threshold,
                        max_frames,
                        seed=_request_seed(seed, sample.id),
                    )
                    wave = vocode(mel, backend)
                    wav_path = variant_dir / f"{wav_stem(sample.id)}.wav"
                    save_wav(wave, wav_path)
                    wav_path.with_suffix(".json").write_text(
                        json.dumps(
                            {
                                "context": context,
                                "content": sample.content,
                                "stop_reason": stop_reason,
                                "n_frames": mel.n_frames,
                            },
                            ensure_ascii=False,
                        )
                        + "\n",
                        encoding="utf-8",
                    )
                hypothesis = transcribe(wav_path, client)
                reference_words = normalize_transcript(sample.content)
                hypothesis_words = normalize_transcript(hypothesis)
                if not reference_words:
                    raise ValidationError("reference empty after normalization")
                result = wer(reference_words, hypothesis_words)
            except (CttsError, OSError) as exc:
                warn_count += 1
                log.warning("variant %s sample %s excluded: %s", name, sample.id, exc)
                continue
            variant_rows.append(
                SampleRow(
                    id=sample.id,
                    reference=" ".join(reference_words),
                    hypothesis=" ".join(hypothesis_words),
                    substitutions=result.substitutions,
                    insertions=result.insertions,
                    deletions=result.deletions,
                    rate=result.rate,
                    ref_len=len(reference_words),
                )
            )
            total_errors += result.substitutions + result.insertions + result.deletions
            total_ref_words += len(reference_words)

        if total_ref_words == 0:
            raise ValidationError(f"variant {name}: every sample failed")
        variant_wer[name] = total_errors / total_ref_words
        rows[name] = variant_rows
        warnings[name] = warn_count

    return EvalReport(
        variant_wer=variant_wer,
        rows=rows,
        warnings=warnings,
        metadata={
            "manifest": str(manifest),
            "n_test_samples": len(test),
            "pooling": "corpus-pooled: total edit errors / total reference words",
        },
    )
