#!/usr/bin/env python3
"""End-to-end desk-scale demo: build the joined dataset, train all four
variants briefly, synthesize the canonical demo request, and run the WER
harness with a sidecar-echo ASR stub."""

import argparse
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from ctts.cli import load_or_build_vocab, main as ctts
from ctts.config import load_config
from ctts.training import EmbeddingBundle

ECHO_ASR_STUB = """\
import json, sys
wav = sys.argv[1]
print(json.load(open(wav[: -len('.wav')] + '.json'))['content'])
"""


def run(argv: list[str]) -> None:
    print(f"\n$ ctts {' '.join(argv)}")
    code = ctts(argv)
    if code != 0:
        raise SystemExit(f"step failed with exit code {code}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", required=True)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--steps", type=int, default=40, help="max optimizer steps per stage")
    parser.add_argument(
        "--variants", default="M-CTTS,M-TTS,M-LTTS,M-CTTS-NT", help="comma list to train"
    )
    args = parser.parse_args()

    workdir = Path(args.workdir)
    subprocess.run(
        [
            sys.executable,
            str(Path(__file__).with_name("make_toy_data.py")),
            "--out",
            str(workdir),
            "--seed",
            str(args.seed),
            "--steps",
            str(args.steps),
        ],
        check=True,
    )
    config = workdir / "config.yaml"

    run(["build-data", "--config", str(config), "--out", str(workdir / "data"), "--seed", str(args.seed)])

    # Stand-in for an exported language-model embedding table: random rows
    # keyed by the exact vocabulary the train command will build.
    vocab = load_or_build_vocab(load_config(config))
    width = yaml.safe_load(config.read_text())["model"]["d_model"]
    rng = np.random.default_rng(args.seed)
    EmbeddingBundle(
        tokens=vocab.tokens,
        matrix=rng.standard_normal((len(vocab), width)).astype(np.float32),
    ).save(workdir / "bundle")
    raw = yaml.safe_load(config.read_text())
    raw["pipeline"] = {"embedding_bundle": "bundle"}
    config.write_text(yaml.safe_dump(raw))

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for variant in variants:
        run(
            [
                "train",
                "--variant",
                variant,
                "--config",
                str(config),
                "--out",
                str(workdir / "runs" / variant),
                "--seed",
                str(args.seed),
            ]
        )

    demo_ckpt = workdir / "runs" / variants[0] / f"{variants[0]}.ckpt"
    run(
        [
            "synth",
            "--ckpt",
            str(demo_ckpt),
            "--context",
            "John hit Alice, and Alice said:",
            "--content",
            "Go away!",
            "--vocoder",
            "griffin_lim",
            "--config",
            str(config),
            "--out",
            str(workdir / "demo.wav"),
        ]
    )

    asr_stub = workdir / "echo_asr.py"
    asr_stub.write_text(ECHO_ASR_STUB)
    variant_spec = ",".join(
        f"{v}={workdir / 'runs' / v / (v + '.ckpt')}" for v in variants
    )
    run(
        [
            "eval",
            "--manifest",
            str(workdir / "data" / "ctts.jsonl"),
            "--variants",
            variant_spec,
            "--asr",
            f"{sys.executable} {asr_stub} {{wav}}",
            "--config",
            str(config),
            "--out",
            str(workdir / "report.json"),
        ]
    )
    print(f"\ndone; see {workdir / 'report.json'} and {workdir / 'demo.wav'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
