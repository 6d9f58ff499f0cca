"""Text frontends: content-to-phoneme conversion and context tokenization.

Content text is phonemized against a CMU-format pronouncing lexicon over an
ARPAbet inventory (stress digits on vowels); out-of-vocabulary words fall
back to per-letter symbols. Context strings go through a self-contained
lowercasing word/punctuation tokenizer over a frequency-ordered vocabulary.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, ValidationError

PAD = "<pad>"
UNK = "<unk>"
EOS = "<eos>"
WORD_SEP = "<ws>"

PUNCTUATION = (".", ",", "!", "?", ";", ":")
_WORD_EXTRA = "'-"

ARPABET_CONSONANTS = (
    "B", "CH", "D", "DH", "F", "G", "HH", "JH", "K", "L", "M", "N",
    "NG", "P", "R", "S", "SH", "T", "TH", "V", "W", "Y", "Z", "ZH",
)
ARPABET_VOWELS = (
    "AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY",
    "OW", "OY", "UH", "UW",
)
STRESS_DIGITS = ("0", "1", "2")

_INVENTORY_MARKER = ";;; inventory:"


def letter_fallback(letter: str) -> str:
    return f"@{letter.upper()}"


def default_phone_inventory() -> tuple[str, ...]:
    """PAD/EOS/boundary/punctuation/letter-fallback symbols plus ARPAbet."""
    symbols = [PAD, EOS, WORD_SEP]
    symbols.extend(PUNCTUATION)
    symbols.extend(letter_fallback(chr(c)) for c in range(ord("A"), ord("Z") + 1))
    symbols.extend(ARPABET_CONSONANTS)
    for vowel in ARPABET_VOWELS:
        symbols.extend(f"{vowel}{stress}" for stress in STRESS_DIGITS)
    return tuple(symbols)


@dataclass(frozen=True)
class PhonemeSequence:
    """Integer-encoded phonemes with their parallel symbol strings."""

    ids: tuple[int, ...]
    symbols: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class TokenSequence:
    """Integer-encoded context tokens; empty means blank context."""

    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Lexicon:
    """Pronouncing dictionary over a fixed phone inventory."""

    entries: dict[str, tuple[str, ...]]
    phone_inventory: tuple[str, ...] = field(default_factory=default_phone_inventory)
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.phone_inventory)) != len(self.phone_inventory):
            raise ConfigError("phone inventory contains duplicate symbols")
        if not self.phone_inventory or self.phone_inventory[0] != PAD:
            raise ConfigError(f"phone inventory must start with {PAD!r} at id 0")
        self._index = {sym: i for i, sym in enumerate(self.phone_inventory)}
        for word, symbols in self.entries.items():
            unknown = [s for s in symbols if s not in self._index]
            if unknown:
                raise ValidationError(f"lexicon entry {word!r} uses unknown symbols {unknown}")

    @property
    def size(self) -> int:
        return len(self.phone_inventory)

    def id_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise ValidationError(f"symbol {symbol!r} not in phone inventory") from None

    def encode(self, symbols: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id_of(s) for s in symbols)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.phone_inventory[i] for i in ids)

    def lookup(self, word: str) -> tuple[str, ...] | None:
        return self.entries.get(word.upper())

    @classmethod
    def from_cmu_file(cls, path: str | Path, phone_inventory: tuple[str, ...] | None = None) -> "Lexicon":
        """Parse a CMU-dictionary text file ("WORD  PH1 PH2 ..." lines).

        Comment lines (";;;") are skipped and alternate pronunciations
        ("WORD(2)") are ignored in favor of the base entry.
        """
        return cls.from_text(Path(path).read_text(encoding="latin-1"), phone_inventory)

    @classmethod
    def from_text(cls, text: str, phone_inventory: tuple[str, ...] | None = None) -> "Lexicon":
        entries: dict[str, tuple[str, ...]] = {}
        for line in text.splitlines():
            line = line.strip()
            if line.startswith(_INVENTORY_MARKER) and phone_inventory is None:
                phone_inventory = tuple(line[len(_INVENTORY_MARKER) :].split())
                continue
            if not line or line.startswith(";;;"):
                continue
            parts = line.split()
            word, symbols = parts[0].upper(), tuple(parts[1:])
            if word.endswith(")") and "(" in word:
                continue
            if not symbols:
                raise ValidationError(f"lexicon entry {word!r} has no phonemes")
            entries.setdefault(word, symbols)
        return cls(entries=entries, phone_inventory=phone_inventory or default_phone_inventory())

    def canonical_text(self) -> str:
        """Stable text serialization used for digests and checkpoint embedding.

        The inventory travels in a CMU-style comment line, so the output stays
        parseable as an ordinary dictionary file.
        """
        lines = [f"{_INVENTORY_MARKER} {' '.join(self.phone_inventory)}"]
        lines += [f"{w}  {' '.join(ps)}" for w, ps in sorted(self.entries.items())]
        return "\n".join(lines) + "\n"


def _lex_units(content: str) -> list[tuple[str, str]]:
    """Split content into ("word"|"punct"|"gap", text) units."""
    units: list[tuple[str, str]] = []
    buf: list[str] = []

    def flush():
        if buf:
            units.append(("word", "".join(buf)))
            buf.clear()

    for ch in content:
        if ch.isalpha() and ch.isascii() or ch in _WORD_EXTRA:
            buf.append(ch)
        elif ch in PUNCTUATION:
            flush()
            units.append(("punct", ch))
        elif ch.isspace():
            flush()
            if units and units[-1][0] != "gap":
                units.append(("gap", ch))
        else:
            raise ValidationError(f"character {ch!r} outside the letter/punctuation alphabet")
    flush()
    return units


def phonemize(content: str, lexicon: Lexicon, max_len: int = 512) -> PhonemeSequence:
    """Convert content text to phoneme symbols and ids, EOS-terminated.

    Words are looked up case-insensitively; a word-boundary symbol marks
    whitespace between emitted units; OOV words expand to per-letter
    fallback symbols; punctuation maps to its own symbol.
    """
    if not content.strip():
        raise ValidationError("content is empty after trimming")
    symbols: list[str] = []
    pending_gap = False
    for kind, text in _lex_units(content):
        if kind == "gap":
            pending_gap = bool(symbols)
            continue
        if kind == "word":
            pron = lexicon.lookup(text)
            if pron is None:
                pron = tuple(letter_fallback(c) for c in text if c.isalpha())
            if not pron:
                continue
        else:
            pron = (text,)
        if pending_gap:
            symbols.append(WORD_SEP)
            pending_gap = False
        symbols.extend(pron)
    symbols.append(EOS)
    if len(symbols) > max_len:
        raise ValidationError(f"phoneme sequence length {len(symbols)} exceeds maximum {max_len}")
    return PhonemeSequence(ids=lexicon.encode(symbols), symbols=tuple(symbols))


class Vocab:
    """Token list with stable ids; serializes one token per line."""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        for token in tokens:
            if not token or "\n" in token or token != token.strip():
                raise ConfigError(f"token {token!r} cannot be serialized one-per-line")
        self.tokens = tokens
        self._index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ValidationError(f"token {token!r} not in vocabulary") from None

    @property
    def unk_id(self) -> int:
        if UNK not in self._index:
            raise ConfigError(f"vocabulary has no {UNK!r} token")
        return self._index[UNK]

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)

    def canonical_text(self) -> str:
        return "\n".join(self.tokens) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.canonical_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


def _context_tokens(text: str) -> list[str]:
    """Lowercased word/punctuation split shared by tokenizer and vocab builder."""
    out: list[str] = []
    buf: list[str] = []
    for ch in text.lower():
        if ch.isalnum() or ch == "'":
            buf.append(ch)
        else:
            if buf:
                out.append("".join(buf))
                buf.clear()
            if not ch.isspace():
                out.append(ch)
    if buf:
        out.append("".join(buf))
    return out


def build_vocab(corpus: Sequence[str], reserved: Sequence[str]) -> Vocab:
    """Reserved symbols first, then corpus tokens by descending frequency."""
    if not corpus:
        raise ValidationError("corpus is empty")
    if len(set(reserved)) != len(reserved):
        raise ConfigError("reserved symbol list contains duplicates")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(_context_tokens(text))
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    tokens = list(reserved) + [tok for tok, _ in ordered if tok not in set(reserved)]
    return Vocab(tokens)


def tokenize_context(context: str, vocab: Vocab, max_len: int = 512) -> TokenSequence:
    """Tokenize a context string; blank context yields the empty sequence.

    Whitespace chunks that exactly match a vocabulary entry (reserved label
    markers) map to that entry; everything else goes through the lowercasing
    word/punctuation split with unknowns mapped to UNK.
    """
    ids: list[int] = []
    for chunk in context.split():
        if chunk in vocab:
            ids.append(vocab.id_of(chunk))
            continue
        for token in _context_tokens(chunk):
            ids.append(vocab.id_of(token) if token in vocab else vocab.unk_id)
    if len(ids) > max_len:
        raise ValidationError(f"context length {len(ids)} exceeds maximum {max_len}")
    return TokenSequence(ids=tuple(ids))


def emotion_marker(emotion: str) -> str:
    return f"<emo:{emotion}>"


def speaker_marker(speaker: str) -> str:
    return f"<spk:{speaker}>"


def label_markers(emotions: Iterable[str], speakers: Iterable[str]) -> list[str]:
    """Reserved vocabulary items for label-conditioned training."""
    return [emotion_marker(e) for e in emotions] + [speaker_marker(s) for s in speakers]


def encode_labels(emotion: str, speaker: str, vocab: Vocab) -> TokenSequence:
    """Encode "<emo:...> <spk:...>" as two reserved single tokens."""
    ids = []
    for marker, kind, name in (
        (emotion_marker(emotion), "emotion", emotion),
        (speaker_marker(speaker), "speaker", speaker),
    ):
        if marker not in vocab:
            raise ValidationError(f"unregistered {kind} label {name!r}")
        ids.append(vocab.id_of(marker))
    return TokenSequence(ids=tuple(ids))


def canonical_label_string(emotion: str, speaker: str) -> str:
    return f"{emotion_marker(emotion)} {speaker_marker(speaker)}"


# Small built-in lexicon (standard ARPAbet pronunciations) so toy corpora and
# demos run without an external dictionary file. Real runs should load the
# full CMU dictionary via Lexicon.from_cmu_file.
_BUILTIN_ENTRIES = {
    "A": "AH0",
    "ALL": "AO1 L",
    "AND": "AH0 N D",
    "AWAY": "AH0 W EY1",
    "BE": "B IY1",
    "BIG": "B IH1 G",
    "BIRD": "B ER1 D",
    "BLUE": "B L UW1",
    "BOAT": "B OW1 T",
    "CANOE": "K AH0 N UW1",
    "CAT": "K AE1 T",
    "COLD": "K OW1 L D",
    "DAY": "D EY1",
    "DOG": "D AO1 G",
    "EACH": "IY1 CH",
    "FACE": "F EY1 S",
    "FOOD": "F UW1 D",
    "GO": "G OW1",
    "GOOD": "G UH1 D",
    "GREEN": "G R IY1 N",
    "HE": "HH IY1",
    "HOME": "HH OW1 M",
    "INTO": "IH0 N T UW1",
    "IS": "IH1 Z",
    "IT": "IH1 T",
    "LAKE": "L EY1 K",
    "LARGE": "L AA1 R JH",
    "MAN": "M AE1 N",
    "MEN": "M EH1 N",
    "MOON": "M UW1 N",
    "NICE": "N AY1 S",
    "NIGHT": "N AY1 T",
    "NO": "N OW1",
    "OLD": "OW1 L D",
    "OTHER'S": "AH1 DH ER0 Z",
    "RAIN": "R EY1 N",
    "RED": "R EH1 D",
    "RUN": "R AH1 N",
    "SAID": "S EH1 D",
    "SEA": "S IY1",
    "SHE": "SH IY1",
    "STARED": "S T EH1 R D",
    "SUN": "S AH1 N",
    "THE": "DH AH0",
    "THEY": "DH EY1",
    "TREE": "T R IY1",
    "WARM": "W AO1 R M",
    "WAS": "W AA1 Z",
    "WATER": "W AO1 T ER0",
    "WIND": "W IH1 N D",
    "YES": "Y EH1 S",
}


def default_lexicon() -> Lexicon:
    """Built-in lexicon covering the toy-corpus sentences."""
    entries = {w: tuple(p.split()) for w, p in _BUILTIN_ENTRIES.items()}
    return Lexicon(entries=entries)
