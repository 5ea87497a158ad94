#!/usr/bin/env python3
"""Input-mode comparison matrix at desk scale.

Reproduces the qualitative orderings of the input ablation: plain
embeddings converge fastest, one-hots lag, pure noise tends not to
converge, and the reinitialized noisy layer restores diversity without
giving up convergence speed. Expects a pretrained teacher checkpoint
(scripts/desk_pipeline.py produces one).
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from nayer.cli import main as nayer  # noqa: E402


def run() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--teacher", required=True)
    parser.add_argument("--out", default="runs/input-mode-matrix")
    parser.add_argument("--seeds", default="3", help="seed count or comma list")
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()

    return nayer([
        "ablate", "--axis", "input_mode",
        "--values", "LTE,OH,Z,NL_KTO1,NL_1TO1",
        "--seeds", args.seeds,
        "--preset", "digits-desk",
        "--teacher", args.teacher,
        "--epochs", str(args.epochs),
        "--warmup-epochs", "2",
        "--student-iterations", "15",
        "--jobs", str(args.jobs),
        "--out", args.out,
    ])


if __name__ == "__main__":
    sys.exit(run())
