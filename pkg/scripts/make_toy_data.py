#!/usr/bin/env python3
"""Generate a self-contained toy workspace: synthetic speech corpus,
emotional text corpus, and a ready-to-use config.yaml wired to them."""

import argparse
from pathlib import Path

import yaml

from ctts.text import default_lexicon
from ctts.toyvoice import make_toy_speech_manifest, make_toy_text_corpus


def desk_scale_config(workdir: Path, steps: int, seed: int) -> dict:
    return {
        "seed": seed,
        "dataset": {
            "speech_manifest": "speech.jsonl",
            "text_corpus": "texts.jsonl",
            "speech_emotions": ["amused", "angry"],
            "text_emotions": ["positive", "negative"],
            "emotion_map": {"amused": "positive", "angry": "negative"},
            "template": "{context} {speaker} said:",
            "fanout": 3,
            "ratios": [0.5, 0.25, 0.25],
        },
        "mel": {"n_mels": 32},
        "model": {
            "d_model": 64,
            "n_enc_layers": 2,
            "n_dec_layers": 2,
            "n_heads": 4,
            "ffn_dim": 128,
            "prenet_dim": 32,
            "dropout": 0.1,
            "prenet_dropout": 0.1,
            "max_positions": 256,
        },
        "stage1": {
            "manifest": "speech.jsonl",
            "batch_size": 4,
            "epochs": 10000,
            "warmup_steps": 20,
            "max_steps": steps,
        },
        "stage3": {
            "manifest": "data/ctts.jsonl",
            "batch_size": 4,
            "epochs": 10000,
            "warmup_steps": 20,
            "max_steps": steps,
        },
        "synthesis": {"stop_threshold": 0.5, "max_frames": 400},
        "vocoder": {"kind": "griffin_lim", "griffin_lim_iters": 32},
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="workspace directory to create")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--steps", type=int, default=60, help="max optimizer steps per stage")
    args = parser.parse_args()

    workdir = Path(args.out)
    workdir.mkdir(parents=True, exist_ok=True)
    lexicon = default_lexicon()
    manifest = make_toy_speech_manifest(workdir, lexicon)
    texts = make_toy_text_corpus(workdir / "texts.jsonl")
    config_path = workdir / "config.yaml"
    config_path.write_text(yaml.safe_dump(desk_scale_config(workdir, args.steps, args.seed)))

    print(f"toy workspace ready at {workdir}")
    print(f"  speech manifest: {manifest}")
    print(f"  text corpus:     {texts}")
    print(f"  config:          {config_path}")
    print("next:")
    print(f"  ctts build-data --config {config_path} --out {workdir / 'data'} --seed {args.seed}")
    print(f"  ctts train --variant M-TTS --config {config_path} --out {workdir / 'runs'} --seed {args.seed}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
