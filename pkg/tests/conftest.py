from types import SimpleNamespace

import pytest


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of a run."""
    entries = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid:
                continue
            if status == "passed" and getattr(rep, "when", "call") != "call":
                continue
            name = nodeid.split("::")[-1]
            if label == "FAIL" or name not in entries:
                entries[name] = label
    if entries:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name in sorted(entries):
            terminalreporter.write_line(f"{entries[name]}: {name}")

from ctts.audio import MelConfig
from ctts.dataset import (
    DEFAULT_EMOTION_MAP,
    DEFAULT_TEMPLATE,
    ingest_speech_manifest,
    ingest_text_corpus,
    join_by_emotion,
    split_dataset,
    write_manifest,
)
from ctts.model import ModelConfig
from ctts.text import PAD, UNK, build_vocab, default_lexicon, label_markers
from ctts.toyvoice import make_toy_speech_manifest, make_toy_text_corpus


@pytest.fixture(scope="session")
def toy_env(tmp_path_factory):
    """Toy corpus + tiny model configuration shared across training tests."""
    root = tmp_path_factory.mktemp("toy")
    lexicon = default_lexicon()
    speech_manifest = make_toy_speech_manifest(root, lexicon)
    texts_path = make_toy_text_corpus(root / "texts.jsonl")

    speech = ingest_speech_manifest(speech_manifest, {"amused", "angry"})
    texts = ingest_text_corpus(texts_path, {"positive", "negative"})
    joined = join_by_emotion(speech, texts, DEFAULT_EMOTION_MAP, 3, DEFAULT_TEMPLATE, seed=7)
    samples = split_dataset(joined, (0.5, 0.25, 0.25), seed=7)
    ctts_manifest = root / "ctts.jsonl"
    write_manifest(samples, ctts_manifest)

    reserved = [PAD, UNK] + label_markers(["amused", "angry"], ["Bee", "Sam"])
    vocab = build_vocab([s.context for s in samples], reserved)
    mel = MelConfig(n_mels=16)
    model = ModelConfig(
        text_vocab_size=len(vocab),
        phone_vocab_size=lexicon.size,
        d_model=32,
        n_enc_layers=1,
        n_dec_layers=1,
        n_heads=4,
        ffn_dim=64,
        n_mels=16,
        prenet_dim=16,
        max_positions=256,
    )
    return SimpleNamespace(
        root=root,
        lexicon=lexicon,
        vocab=vocab,
        speech_manifest=speech_manifest,
        texts_path=texts_path,
        ctts_manifest=ctts_manifest,
        samples=samples,
        mel=mel,
        model=model,
    )
