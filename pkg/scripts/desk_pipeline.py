#!/usr/bin/env python3
"""End-to-end desk-scale pipeline: pretrain a teacher, distill, report.

Runs on the bundled `digits` dataset by default so it works fully offline;
pass --dataset mnist when the MNIST files are available under
$NAYER_DATA_DIR. Roughly 5 minutes on a laptop CPU for digits.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from nayer.cli import main as nayer  # noqa: E402


def run() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dataset", default="digits", choices=("digits", "mnist"))
    parser.add_argument("--out", default="runs/desk-pipeline")
    parser.add_argument("--teacher-epochs", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    teacher = os.path.join(args.out, "teacher.pt")
    run_dir = os.path.join(args.out, "distill")

    code = nayer(["pretrain", "--dataset", args.dataset, "--arch", "cnn-small",
                  "--epochs", str(args.teacher_epochs), "--seed", str(args.seed),
                  "--out", teacher])
    if code != 0:
        return code
    code = nayer(["distill", "--preset", f"{args.dataset}-desk", "--teacher", teacher,
                  "--seed", str(args.seed), "--out", run_dir])
    if code != 0:
        return code
    nayer(["export-images", "--checkpoint", os.path.join(run_dir, "checkpoints", "best.pt"),
           "--classes", "0,1,2,3,4,5,6,7,8,9", "--per-class", "4",
           "--out", os.path.join(args.out, "samples")])
    return nayer(["report", run_dir])


if __name__ == "__main__":
    sys.exit(run())
