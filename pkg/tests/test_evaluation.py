import sys
from dataclasses import replace
from itertools import product

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctts.errors import ConfigError, TranscriptionError, ValidationError
from ctts.evaluation import (
    AsrClient,
    COLUMN_ORDER,
    PUBLISHED_WER,
    evaluate_corpus,
    normalize_transcript,
    transcribe,
    wav_stem,
    wer,
)
from ctts.synthesis import VocoderBackend
from ctts.training import fresh_checkpoint, save_checkpoint
from oracles import brute_edit_distance


class TestNormalize:
    def test_punctuation_stripped(self):
        assert normalize_transcript("Go away!") == ["go", "away"]

    def test_intra_word_apostrophe_kept(self):
        assert normalize_transcript("other's") == ["other's"]

    def test_empty(self):
        assert normalize_transcript("") == []

    def test_whitespace_collapse(self):
        assert normalize_transcript("  Go \t  AWAY.  ") == ["go", "away"]

    def test_edge_apostrophes_stripped(self):
        assert normalize_transcript("'tis said: 'go'") == ["tis", "said", "go"]

    @settings(max_examples=50, deadline=None)
    @given(st.text(max_size=60))
    def test_idempotent(self, text):
        once = normalize_transcript(text)
        assert normalize_transcript(" ".join(once)) == once


class TestWer:
    def test_identical(self):
        words = ["go", "away"]
        assert wer(words, words) == (0.0, 0, 0, 0)

    def test_table_sentence_substitution(self):
        ref = normalize_transcript("The men stared into each other's face.")
        assert ref == ["the", "men", "stared", "into", "each", "other's", "face"]
        hyp = ["the", "man", "stared", "into", "each", "other's", "face"]
        result = wer(ref, hyp)
        assert result.substitutions == 1
        assert (result.insertions, result.deletions) == (0, 0)
        assert abs(result.rate - 1 / 7) < 1e-9
        assert round(result.rate, 4) == 0.1429

    def test_all_deletions(self):
        assert wer(["go", "away"], []) == (1.0, 0, 0, 2)

    def test_all_insertions(self):
        result = wer(["a"], ["a", "b", "c"])
        assert result == (2.0, 0, 2, 0)

    def test_empty_reference_rejected(self):
        with pytest.raises(ValidationError):
            wer([], ["a"])

    def test_counts_equal_distance_exhaustive_small(self):
        # oracle: independent memoized recursion, all pairs up to length 3
        alphabet = ("a", "b", "c")
        seqs = [seq for n in range(4) for seq in product(alphabet, repeat=n)]
        for ref in seqs:
            if not ref:
                continue
            for hyp in seqs:
                result = wer(list(ref), list(hyp))
                total = result.substitutions + result.insertions + result.deletions
                assert total == brute_edit_distance(ref, hyp), (ref, hyp)

    @settings(max_examples=150, deadline=None)
    @given(
        ref=st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
        hyp=st.lists(st.sampled_from("abcde"), max_size=8),
    )
    def test_counts_equal_distance_property(self, ref, hyp):
        result = wer(ref, hyp)
        total = result.substitutions + result.insertions + result.deletions
        assert total == brute_edit_distance(tuple(ref), tuple(hyp))
        assert result.rate == total / len(ref)


class TestTranscribe:
    def test_echo_stub_identity(self, tmp_path):
        wav = tmp_path / "x.wav"
        wav.write_bytes(b"RIFF")
        client = AsrClient(kind="echo_stub", transcript="go away")
        assert transcribe(wav, client) == "go away"

    def test_echo_stub_map(self, tmp_path):
        client = AsrClient(kind="echo_stub", transcript={"s1": "hello"})
        assert transcribe(tmp_path / "s1.wav", client) == "hello"
        with pytest.raises(TranscriptionError):
            transcribe(tmp_path / "s2.wav", client)

    def test_external_failure(self, tmp_path):
        wav = tmp_path / "x.wav"
        wav.write_bytes(b"RIFF")
        client = AsrClient(kind="external_command", command="false {wav}")
        with pytest.raises(TranscriptionError):
            transcribe(wav, client)

    def test_external_stdout_captured(self, tmp_path):
        wav = tmp_path / "x.wav"
        wav.write_bytes(b"RIFF")
        client = AsrClient(
            kind="external_command",
            command=f'{sys.executable} -c "print(\'spoken words\')" {{wav}}',
        )
        assert transcribe(wav, client) == "spoken words"

    def test_client_validation(self):
        with pytest.raises(ConfigError):
            AsrClient(kind="external_command", command="no placeholder")
        with pytest.raises(ConfigError):
            AsrClient(kind="magic")


@pytest.fixture(scope="module")
def eval_ckpt(toy_env, tmp_path_factory):
    ckpt = fresh_checkpoint(toy_env.model, toy_env.mel, toy_env.vocab, toy_env.lexicon, seed=33)
    ckpt.model_state["stop_proj.bias"] = torch.full_like(ckpt.model_state["stop_proj.bias"], -8.0)
    ckpt = replace(ckpt, stage_name="ctts_finetune")
    path = tmp_path_factory.mktemp("evalckpt") / "model.ckpt"
    save_checkpoint(ckpt, path)
    return path


def echo_reference_client(samples):
    return AsrClient(
        kind="echo_stub",
        transcript={wav_stem(s.id): s.content for s in samples},
    )


class TestEvaluateCorpus:
    def test_closed_loop_echo_stub_zero_wer(self, toy_env, eval_ckpt, tmp_path):
        test_samples = [s for s in toy_env.samples if s.split == "test"]
        stub = AsrClient(
            kind="echo_stub",
            transcript={
                **{wav_stem(s.id): s.content for s in test_samples},
                **{wav_stem(s.id).split("_")[0].replace("toy", "toy"): s.content for s in test_samples},
            },
        )
        report = evaluate_corpus(
            toy_env.ctts_manifest,
            [("M-CTTS", eval_ckpt), ("M-TTS", eval_ckpt)],
            VocoderBackend(kind="griffin_lim", griffin_lim_iters=1),
            stub,
            tmp_path,
            max_frames=6,
        )
        assert report.variant_wer == {"M-CTTS": 0.0, "M-TTS": 0.0}
        assert report.warnings == {"M-CTTS": 0, "M-TTS": 0}
        assert all(len(rows) == len(test_samples) for rows in report.rows.values())

    def test_reference_audio_column(self, toy_env, tmp_path):
        test_samples = [s for s in toy_env.samples if s.split == "test"]
        stub = AsrClient(
            kind="echo_stub",
            transcript={wav_stem(s.id): s.content for s in test_samples}
            | {s.id.split("#")[0]: s.content for s in test_samples},
        )
        report = evaluate_corpus(
            toy_env.ctts_manifest,
            [("Ref*", None)],
            VocoderBackend(kind="griffin_lim"),
            stub,
            tmp_path,
        )
        assert report.variant_wer["Ref*"] == 0.0

    def test_empty_test_split_rejected(self, toy_env, eval_ckpt, tmp_path):
        from ctts.dataset import write_manifest

        train_only = [s for s in toy_env.samples if s.split == "train"]
        manifest = tmp_path / "train_only.jsonl"
        write_manifest(train_only, manifest)
        with pytest.raises(ValidationError, match="test split"):
            evaluate_corpus(
                manifest,
                [("M-CTTS", eval_ckpt)],
                VocoderBackend(kind="griffin_lim"),
                AsrClient(kind="echo_stub", transcript="x"),
                tmp_path,
            )

    def test_failures_warned_not_dropped_silently(self, toy_env, eval_ckpt, tmp_path):
        test_samples = [s for s in toy_env.samples if s.split == "test"]
        partial = {wav_stem(s.id): s.content for s in test_samples[1:]}
        stub = AsrClient(kind="echo_stub", transcript=partial)
        report = evaluate_corpus(
            toy_env.ctts_manifest,
            [("M-CTTS", eval_ckpt)],
            VocoderBackend(kind="griffin_lim", griffin_lim_iters=1),
            stub,
            tmp_path,
            max_frames=4,
        )
        assert report.warnings["M-CTTS"] == 1
        assert len(report.rows["M-CTTS"]) == len(test_samples) - 1

    def test_pooling_is_length_weighted(self, toy_env, eval_ckpt, tmp_path):
        test_samples = [s for s in toy_env.samples if s.split == "test"]
        transcripts = {wav_stem(s.id): s.content for s in test_samples}
        # corrupt one transcript by dropping its last word
        first = wav_stem(test_samples[0].id)
        transcripts[first] = " ".join(normalize_transcript(transcripts[first])[:-1])
        report = evaluate_corpus(
            toy_env.ctts_manifest,
            [("M-CTTS", eval_ckpt)],
            VocoderBackend(kind="griffin_lim", griffin_lim_iters=1),
            AsrClient(kind="echo_stub", transcript=transcripts),
            tmp_path,
            max_frames=4,
        )
        rows = report.rows["M-CTTS"]
        pooled = sum(r.rate * r.ref_len for r in rows) / sum(r.ref_len for r in rows)
        assert abs(report.variant_wer["M-CTTS"] - pooled) < 1e-12
        assert report.variant_wer["M-CTTS"] > 0

    def test_table_rendering(self, toy_env, eval_ckpt, tmp_path):
        test_samples = [s for s in toy_env.samples if s.split == "test"]
        stub = echo_reference_client(test_samples)
        report = evaluate_corpus(
            toy_env.ctts_manifest,
            [("M-CTTS", eval_ckpt)],
            VocoderBackend(kind="griffin_lim", griffin_lim_iters=1),
            stub,
            tmp_path,
            max_frames=4,
        )
        table = report.render_table()
        header_line = table.splitlines()[1]
        assert list(COLUMN_ORDER) == [c for c in header_line.split() if c]
        assert "paper, not reproduced" in table
        for value in PUBLISHED_WER.values():
            assert f"{value:.4f}" in table

    def test_report_json_round_trip(self, toy_env, eval_ckpt, tmp_path):
        import json

        test_samples = [s for s in toy_env.samples if s.split == "test"]
        report = evaluate_corpus(
            toy_env.ctts_manifest,
            [("M-CTTS", eval_ckpt)],
            VocoderBackend(kind="griffin_lim", griffin_lim_iters=1),
            echo_reference_client(test_samples),
            tmp_path,
            max_frames=4,
        )
        out = tmp_path / "report.json"
        report.save(out)
        data = json.loads(out.read_text())
        assert data["variant_wer"]["M-CTTS"] == 0.0
        assert data["published_wer"]["label"] == "paper, not reproduced"
        assert data["metadata"]["pooling"].startswith("corpus-pooled")
