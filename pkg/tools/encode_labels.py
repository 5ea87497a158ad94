#!/usr/bin/env python3
"""Produce an embedding CSV for a list of class names.

This is the only place an external text encoder is ever invoked; the
training process itself just reads the CSV. With --encoder sbert this uses
sentence-transformers (needs the model available locally); --encoder
fallback writes the same seeded Gaussian pool the framework would build on
its own, which is useful for committing a reproducible pool file.

Examples:
    python tools/encode_labels.py --classes dog,cat,car --template P1 \
        --encoder sbert --out lte_pool.csv
    python tools/encode_labels.py --classes 0,1,2,3,4,5,6,7,8,9 \
        --encoder fallback --dim 64 --seed 0 --out digits_pool.csv
"""

import argparse
import sys

sys.path.insert(0, "src")

from nayer.embeddings import (  # noqa: E402
    LTEPool,
    PROMPT_TEMPLATES,
    build_prompts,
    fallback_embeddings,
    save_embedding_file,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--classes", required=True, help="comma-separated class names")
    parser.add_argument("--template", default="P1",
                        help="P1|P2|P3 or a custom pattern with {class_name}/{class_index}")
    parser.add_argument("--encoder", choices=("sbert", "fallback"), default="fallback")
    parser.add_argument("--model", default="all-MiniLM-L6-v2", help="sentence-transformers model id")
    parser.add_argument("--dim", type=int, default=64, help="fallback embedding width")
    parser.add_argument("--seed", type=int, default=0, help="fallback seed")
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    class_names = [c.strip() for c in args.classes.split(",")]
    pattern = PROMPT_TEMPLATES.get(args.template, args.template)
    prompts = build_prompts(pattern, class_names)
    print(f"prompts: {prompts[:3]}{' ...' if len(prompts) > 3 else ''}")

    if args.encoder == "sbert":
        try:
            import torch
            from sentence_transformers import SentenceTransformer

            model = SentenceTransformer(args.model)
            matrix = torch.tensor(model.encode(prompts), dtype=torch.float32)
        except Exception as exc:
            print(f"error: could not run the sbert encoder ({exc}); "
                  f"use --encoder fallback for an offline pool", file=sys.stderr)
            return 1
        pool = LTEPool(matrix, class_names, provenance=f"sbert:{args.model}")
    else:
        pool = fallback_embeddings(len(class_names), args.dim, args.seed)
        pool.class_names = class_names

    save_embedding_file(pool, args.out)
    print(f"wrote {pool.num_classes} x {pool.dim_e} embeddings to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
