from dataclasses import replace

import numpy as np
import pytest
import torch

from ctts.errors import CheckpointError, ConfigError, ValidationError
from ctts.training import (
    Checkpoint,
    EmbeddingBundle,
    PipelineConfig,
    StageSpec,
    VariantSpec,
    fresh_checkpoint,
    import_text_embeddings,
    load_checkpoint,
    load_training_examples,
    restore_model,
    run_pipeline,
    save_checkpoint,
    train_stage,
)


def stage1_spec(env, **overrides):
    base = dict(
        name="tts_pretrain",
        manifest=env.speech_manifest,
        context_mode="blank",
        learning_rate=1e-3,
        batch_size=4,
        epochs=1000,
        warmup_steps=10,
        max_steps=2,
    )
    base.update(overrides)
    return StageSpec(**base)


def stage3_spec(env, **overrides):
    base = dict(
        name="ctts_finetune",
        manifest=env.ctts_manifest,
        context_mode="context",
        learning_rate=1e-3,
        batch_size=4,
        epochs=1000,
        warmup_steps=10,
        max_steps=2,
    )
    base.update(overrides)
    return StageSpec(**base)


def fresh(env, seed=0):
    return fresh_checkpoint(env.model, env.mel, env.vocab, env.lexicon, seed)


def toy_bundle(env, width=None, tokens=None):
    tokens = env.vocab.tokens if tokens is None else tuple(tokens)
    width = width or env.model.d_model
    rng = np.random.default_rng(5)
    return EmbeddingBundle(tokens=tokens, matrix=rng.standard_normal((len(tokens), width)))


class TestStageSpec:
    def test_defaults_mirror_reference_hyperparameters(self, toy_env):
        spec = StageSpec(name="ctts_finetune", manifest=toy_env.ctts_manifest, context_mode="context")
        assert (spec.learning_rate, spec.batch_size, spec.epochs) == (1e-3, 8, 800)

    def test_zero_epochs_rejected(self, toy_env):
        with pytest.raises(ValidationError):
            stage1_spec(toy_env, epochs=0)

    def test_pretrain_forces_blank(self, toy_env):
        with pytest.raises(ConfigError):
            stage1_spec(toy_env, context_mode="context")

    def test_unknown_stage_and_mode(self, toy_env):
        with pytest.raises(ConfigError):
            stage1_spec(toy_env, name="stage9")
        with pytest.raises(ConfigError):
            stage3_spec(toy_env, context_mode="vibes")


class TestVariantSpec:
    def test_canonical_matrix(self):
        assert VariantSpec.for_name("M-CTTS") == VariantSpec("M-CTTS", "context", True)
        assert VariantSpec.for_name("M-CTTS-NT") == VariantSpec("M-CTTS-NT", "context", False)
        assert VariantSpec.for_name("M-LTTS") == VariantSpec("M-LTTS", "labels", False)
        assert VariantSpec.for_name("M-TTS") == VariantSpec("M-TTS", "blank", False)

    @pytest.mark.parametrize(
        "name,mode,pretrained",
        [
            ("M-CTTS", "context", False),
            ("M-CTTS-NT", "context", True),
            ("M-TTS", "context", False),
            ("M-LTTS", "blank", False),
            ("M-OTHER", "context", True),
        ],
    )
    def test_invalid_combinations_rejected(self, name, mode, pretrained):
        with pytest.raises(ConfigError):
            VariantSpec(name, mode, pretrained)


class TestCheckpointIO:
    def test_round_trip_bit_identical(self, toy_env, tmp_path):
        ckpt = fresh(toy_env, seed=3)
        path = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.stage_name == "init"
        assert loaded.model_config == toy_env.model
        assert loaded.mel_config == toy_env.mel
        assert set(loaded.model_state) == set(ckpt.model_state)
        for name, tensor in ckpt.model_state.items():
            assert torch.equal(tensor, loaded.model_state[name]), name

    def test_tampered_payload_fails_digest(self, toy_env, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(fresh(toy_env), path)
        outer = torch.load(path, weights_only=True)
        blob = bytearray(outer["payload"])
        blob[len(blob) // 2] ^= 0xFF
        outer["payload"] = bytes(blob)
        torch.save(outer, path)
        with pytest.raises(CheckpointError, match="digest"):
            load_checkpoint(path)

    def test_version_mismatch(self, toy_env, tmp_path):
        path = tmp_path / "a.ckpt"
        save_checkpoint(fresh(toy_env), path)
        outer = torch.load(path, weights_only=True)
        outer["format_version"] = 99
        torch.save(outer, path)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_vocab_digest_checked(self, toy_env, tmp_path):
        from ctts.text import Vocab

        path = tmp_path / "a.ckpt"
        save_checkpoint(fresh(toy_env), path)
        other = Vocab(["<pad>", "<unk>", "different"])
        with pytest.raises(CheckpointError, match="vocab"):
            load_checkpoint(path, vocab=other)
        assert load_checkpoint(path, vocab=None) is not None

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"garbage bytes")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_restore_model_round_trips_assets(self, toy_env):
        ckpt = fresh(toy_env)
        model, vocab, lexicon = restore_model(ckpt)
        assert vocab == toy_env.vocab
        assert lexicon.entries == toy_env.lexicon.entries
        assert lexicon.phone_inventory == toy_env.lexicon.phone_inventory
        assert model.config == toy_env.model


class TestEmbeddingBundle:
    def test_save_load_round_trip(self, toy_env, tmp_path):
        bundle = toy_bundle(toy_env)
        bundle.save(tmp_path / "bundle")
        loaded = EmbeddingBundle.load(tmp_path / "bundle")
        assert loaded.tokens == bundle.tokens
        assert np.array_equal(loaded.matrix, bundle.matrix)

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            EmbeddingBundle(tokens=("a", "b"), matrix=np.zeros((3, 4), dtype=np.float32))

    def test_corrupt_matrix_file(self, toy_env, tmp_path):
        bundle = toy_bundle(toy_env)
        bundle.save(tmp_path / "bundle")
        (tmp_path / "bundle" / "embeddings.f32").write_bytes(b"\x00" * 7)
        with pytest.raises(ValidationError, match="size"):
            EmbeddingBundle.load(tmp_path / "bundle")


class TestImportEmbeddings:
    def test_full_coverage_hit_rate_one(self, toy_env):
        ckpt = fresh(toy_env)
        bundle = toy_bundle(toy_env)
        out = import_text_embeddings(ckpt, bundle)
        assert out.metadata["embedding_import_hit_rate"] == 1.0
        table = out.model_state["text_emb.weight"]
        assert torch.allclose(table, torch.from_numpy(bundle.matrix))

    def test_only_text_embedding_changes(self, toy_env):
        ckpt = fresh(toy_env)
        out = import_text_embeddings(ckpt, toy_bundle(toy_env))
        for name, tensor in ckpt.model_state.items():
            if name == "text_emb.weight":
                assert not torch.equal(tensor, out.model_state[name])
            else:
                assert torch.equal(tensor, out.model_state[name]), name

    def test_empty_bundle_noop(self, toy_env):
        ckpt = fresh(toy_env)
        empty = EmbeddingBundle(
            tokens=(), matrix=np.zeros((0, toy_env.model.d_model), dtype=np.float32)
        )
        out = import_text_embeddings(ckpt, empty)
        assert out.metadata["embedding_import_hit_rate"] == 0.0
        assert torch.equal(
            ckpt.model_state["text_emb.weight"], out.model_state["text_emb.weight"]
        )

    def test_width_mismatch(self, toy_env):
        with pytest.raises(ConfigError):
            import_text_embeddings(fresh(toy_env), toy_bundle(toy_env, width=8))

    def test_partial_coverage(self, toy_env):
        ckpt = fresh(toy_env)
        some = toy_env.vocab.tokens[: len(toy_env.vocab) // 2]
        out = import_text_embeddings(ckpt, toy_bundle(toy_env, tokens=some))
        expected = len(some) / len(toy_env.vocab)
        assert abs(out.metadata["embedding_import_hit_rate"] - expected) < 1e-9


class TestLoadExamples:
    def test_split_filtering(self, toy_env):
        train = load_training_examples(
            toy_env.ctts_manifest, "context", toy_env.vocab, toy_env.lexicon, toy_env.mel, 256
        )
        everything = load_training_examples(
            toy_env.ctts_manifest, "context", toy_env.vocab, toy_env.lexicon, toy_env.mel, 256,
            split=None,
        )
        assert len(everything) == 24
        assert len(train) == 12

    def test_blank_mode_has_no_context(self, toy_env):
        examples = load_training_examples(
            toy_env.speech_manifest, "blank", toy_env.vocab, toy_env.lexicon, toy_env.mel, 256
        )
        assert len(examples) == 8
        assert all(e.context_ids == () for e in examples)

    def test_labels_mode_is_two_tokens(self, toy_env):
        examples = load_training_examples(
            toy_env.ctts_manifest, "labels", toy_env.vocab, toy_env.lexicon, toy_env.mel, 256
        )
        assert all(len(e.context_ids) == 2 for e in examples)

    def test_unreadable_audio_names_sample(self, toy_env, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text(
            '{"id": "ghost", "audio_path": "missing.wav", "content": "go away.", '
            '"speaker": "Bee", "emotion": "amused"}\n'
        )
        with pytest.raises(OSError, match="ghost"):
            load_training_examples(bad, "blank", toy_env.vocab, toy_env.lexicon, toy_env.mel, 256)


class TestTrainStage:
    def test_descent_sanity_100_steps(self, toy_env):
        one = train_stage(stage1_spec(toy_env, max_steps=1), fresh(toy_env), seed=1)
        hundred = train_stage(stage1_spec(toy_env, max_steps=100), fresh(toy_env), seed=1)
        stats_one = one.metadata["stage_stats"]["tts_pretrain"]
        stats_hundred = hundred.metadata["stage_stats"]["tts_pretrain"]
        assert stats_hundred["last_loss"] < stats_one["last_loss"]
        assert stats_hundred["first_loss"] == stats_one["first_loss"]

    def test_blank_stage_consumes_no_context_tokens(self, toy_env):
        ckpt = train_stage(stage1_spec(toy_env, max_steps=4), fresh(toy_env), seed=2)
        stats = ckpt.metadata["stage_stats"]["tts_pretrain"]
        assert stats["context_tokens_consumed"] == 0
        assert ckpt.stage_name == "tts_pretrain"

    def test_deterministic_given_seed(self, toy_env):
        a = train_stage(stage1_spec(toy_env, max_steps=3), fresh(toy_env), seed=9)
        b = train_stage(stage1_spec(toy_env, max_steps=3), fresh(toy_env), seed=9)
        for name, tensor in a.model_state.items():
            assert torch.equal(tensor, b.model_state[name]), name

    def test_resume_equivalence_bit_identical(self, toy_env, tmp_path):
        # oracle: the uninterrupted run
        k = 3
        interrupted = train_stage(stage1_spec(toy_env, max_steps=k), fresh(toy_env, seed=4), seed=4)
        path = tmp_path / "k.ckpt"
        save_checkpoint(interrupted, path)
        resumed = train_stage(stage1_spec(toy_env, max_steps=k + 1), load_checkpoint(path), seed=4)
        straight = train_stage(stage1_spec(toy_env, max_steps=k + 1), fresh(toy_env, seed=4), seed=4)
        assert resumed.step == straight.step == k + 1
        for name, tensor in straight.model_state.items():
            assert torch.equal(tensor, resumed.model_state[name]), name

    def test_interval_checkpoints_written(self, toy_env, tmp_path):
        train_stage(
            stage1_spec(toy_env, max_steps=4, checkpoint_interval=2),
            fresh(toy_env),
            seed=1,
            out_dir=tmp_path,
        )
        assert (tmp_path / "tts_pretrain_step000002.ckpt").exists()
        assert (tmp_path / "tts_pretrain_final.ckpt").exists()

    def test_embed_init_is_not_a_gradient_stage(self, toy_env):
        spec = StageSpec(name="embed_init", manifest=toy_env.ctts_manifest, context_mode="blank")
        with pytest.raises(ConfigError):
            train_stage(spec, fresh(toy_env), seed=0)

    def test_mel_stats_survive_into_stage3(self, toy_env):
        ckpt1 = train_stage(stage1_spec(toy_env, max_steps=2), fresh(toy_env), seed=3)
        ckpt3 = train_stage(stage3_spec(toy_env, max_steps=2), ckpt1, seed=3)
        assert torch.equal(ckpt1.model_state["mel_mean"], ckpt3.model_state["mel_mean"])
        assert torch.equal(ckpt1.model_state["mel_std"], ckpt3.model_state["mel_std"])


class TestRunPipeline:
    def pipeline_config(self, env, bundle=True):
        return PipelineConfig(
            model=env.model,
            mel=env.mel,
            vocab=env.vocab,
            lexicon=env.lexicon,
            stage1=stage1_spec(env, max_steps=2),
            stage3=stage3_spec(env, max_steps=2),
            embedding_bundle=toy_bundle(env) if bundle else None,
        )

    def test_m_tts_stops_after_pretrain(self, toy_env):
        ckpt = run_pipeline(VariantSpec.for_name("M-TTS"), self.pipeline_config(toy_env), seed=1)
        assert ckpt.stage_name == "tts_pretrain"
        assert "embedding_import_hit_rate" not in ckpt.metadata

    def test_m_ctts_records_hit_rate(self, toy_env):
        ckpt = run_pipeline(VariantSpec.for_name("M-CTTS"), self.pipeline_config(toy_env), seed=1)
        assert ckpt.stage_name == "ctts_finetune"
        assert ckpt.metadata["embedding_import_hit_rate"] == 1.0

    def test_m_ctts_nt_skips_import(self, toy_env):
        ckpt = run_pipeline(VariantSpec.for_name("M-CTTS-NT"), self.pipeline_config(toy_env), seed=1)
        assert ckpt.stage_name == "ctts_finetune"
        assert "embedding_import_hit_rate" not in ckpt.metadata

    def test_m_ltts_contexts_are_two_tokens(self, toy_env):
        ckpt = run_pipeline(VariantSpec.for_name("M-LTTS"), self.pipeline_config(toy_env), seed=1)
        stats = ckpt.metadata["stage_stats"]["ctts_finetune"]
        assert stats["context_len_min"] == 2
        assert stats["context_len_max"] == 2

    def test_m_ctts_requires_bundle(self, toy_env):
        with pytest.raises(ConfigError, match="bundle"):
            run_pipeline(
                VariantSpec.for_name("M-CTTS"), self.pipeline_config(toy_env, bundle=False), seed=1
            )

    def test_frozen_import_keeps_table_fixed(self, toy_env):
        config = self.pipeline_config(toy_env)
        config = replace(config, finetune_imported_embeddings=False)
        ckpt = run_pipeline(VariantSpec.for_name("M-CTTS"), config, seed=1)
        bundle = toy_bundle(toy_env)
        assert torch.allclose(
            ckpt.model_state["text_emb.weight"], torch.from_numpy(bundle.matrix)
        )
