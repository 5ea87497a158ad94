"""Command-line interface: pretrain, distill, ablate, export-images, report.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure. All
commands are non-interactive and write their artifacts under the given
output paths (default run root: $NAYER_RUNS_DIR or ./runs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, NayerError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); map usage errors to 1
        raise _UsageError(message)


def _add_distill_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset")
    p.add_argument("--data-dir")
    p.add_argument("--teacher")
    p.add_argument("--student-arch")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--gen-iterations", type=int)
    p.add_argument("--gen-steps", type=int)
    p.add_argument("--student-iterations", type=int)
    p.add_argument("--gen-batch", type=int)
    p.add_argument("--student-batch", type=int)
    p.add_argument("--input-mode")
    p.add_argument("--sum-beta", type=float)
    p.add_argument("--nl-arch")
    p.add_argument("--memory-capacity", help="image count, or 'unbounded'")
    p.add_argument("--embedding-file", help="embedding CSV path (switches source to kind=file)")
    p.add_argument("--embedding-seed", type=int)
    p.add_argument("--embedding-dim", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--gen-width", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--dump-images", action="store_true", default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="nayer", description="Data-free distillation from label-text embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[], help="train a teacher classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch", default="cnn-small")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-dir")
    p.add_argument("--out", required=True, help="teacher checkpoint path")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("distill", help="run the distillation loop")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--preset", help="named preset as the base config")
    p.add_argument("--out", help="run directory")
    p.add_argument("--resume", help="existing run directory to continue")
    _add_distill_overrides(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("ablate", help="sweep one axis over values x seeds")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--seeds", default="1", help="seed count, or comma-separated seed list")
    p.add_argument("--config", help="base run config JSON")
    p.add_argument("--preset", help="named preset as the base config")
    p.add_argument("--out", required=True, help="matrix output directory")
    p.add_argument("--jobs", type=int, default=1)
    _add_distill_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-images", help="render synthetic images from a run checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classes", required=True, help="comma-separated class ids")
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_images)

    p = sub.add_parser("report", help="summarize one or more run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.add_argument("--out", help="write the summary to a file instead of stdout")
    p.set_defaults(func=cmd_report)

    return parser


def cmd_pretrain(args) -> int:
    from .distill import save_classifier
    from .models import pretrain_teacher

    if args.epochs < 1:
        raise ConfigError("--epochs must be >= 1")
    log_fn = None
    if not args.quiet:
        def log_fn(epoch, loss, acc):
            print(f"epoch {epoch}: train_loss={loss:.4f} test_acc={100 * acc:.2f}%")
    model, acc, bundle = pretrain_teacher(
        args.dataset, args.arch, args.epochs, batch_size=args.batch_size, lr=args.lr,
        weight_decay=args.weight_decay, seed=args.seed, data_dir=args.data_dir, log_fn=log_fn,
    )
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_classifier(args.out, model, {
        "arch": args.arch,
        "num_classes": bundle.num_classes,
        "in_shape": list(bundle.image_shape),
        "dataset": bundle.name,
        "test_accuracy": acc,
        "normalize_mean": list(bundle.normalize_mean),
        "normalize_std": list(bundle.normalize_std),
        "epochs": args.epochs,
        "seed": args.seed,
    })
    print(f"teacher[{args.arch}] on {bundle.name}: test accuracy {100 * acc:.2f}% -> {args.out}")
    return EXIT_OK


def _resolve_config(args):
    from .config import parse_config_file, preset_config

    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = parse_config_file(args.config)
    elif args.preset:
        cfg = preset_config(args.preset)
    else:
        raise ConfigError("one of --config or --preset is required")
    if args.dataset:
        cfg.dataset = args.dataset
    if args.data_dir:
        cfg.data_dir = args.data_dir
    if args.teacher:
        cfg.teacher_path = args.teacher
    if args.student_arch:
        cfg.student_arch = args.student_arch
    if args.seed is not None:
        cfg.seed = args.seed
    for flag, attr in (("epochs", "epochs"), ("warmup_epochs", "warmup_epochs"),
                       ("gen_iterations", "gen_iterations"), ("gen_steps", "gen_steps"),
                       ("student_iterations", "student_iterations"), ("gen_batch", "gen_batch"),
                       ("student_batch", "student_batch")):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg.schedule, attr, value)
    if args.input_mode:
        cfg.input_mode = args.input_mode
        if cfg.input_mode != "SUM":
            cfg.sum_beta = None
    if args.sum_beta is not None:
        cfg.sum_beta = args.sum_beta
    if args.nl_arch:
        cfg.nl_arch = args.nl_arch
    if args.memory_capacity is not None:
        cfg.memory_capacity = None if args.memory_capacity == "unbounded" else int(args.memory_capacity)
    if args.embedding_file:
        cfg.embedding.kind = "file"
        cfg.embedding.path = args.embedding_file
    if args.embedding_seed is not None:
        cfg.embedding.seed = args.embedding_seed
    if args.embedding_dim is not None:
        cfg.embedding.dim = args.embedding_dim
    if args.latent_dim is not None:
        cfg.generator.latent_dim = args.latent_dim
    if args.gen_width is not None:
        cfg.generator.width = args.gen_width
    if args.eval_every is not None:
        cfg.eval_every = args.eval_every
    if args.dump_images is not None:
        cfg.dump_images = args.dump_images
    return cfg


def cmd_distill(args) -> int:
    from .config import parse_config_file
    from .distill import distill

    if args.resume:
        snapshot = os.path.join(args.resume, "config.json")
        cfg = parse_config_file(snapshot)
        cfg.output_dir = args.resume
        result = distill(cfg, resume=True)
    else:
        cfg = _resolve_config(args)
        if not cfg.teacher_path:
            raise ConfigError("a teacher checkpoint is required (--teacher or config.teacher_path)")
        if args.out:
            cfg.output_dir = args.out
        cfg.validate()
        result = distill(cfg)
    metrics = result.report["metrics"]
    acc = metrics["accuracy"]["final"]
    acc_text = "n/a" if acc is None else f"{100 * acc:.2f}%"
    print(f"run complete: {result.run_dir} student accuracy {acc_text}")
    return EXIT_OK


def _parse_values(axis: str, raw: str) -> list:
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values must list at least one value")
    if axis in ("sum_beta",):
        return [float(v) for v in values]
    if axis in ("gen_steps",):
        return [int(v) for v in values]
    if axis == "memory_capacity":
        return [v if v in ("unbounded", "full") else int(v) for v in values]
    return values


def cmd_ablate(args) -> int:
    from .ablation import AblationSpec, aggregate, expand, run_matrix

    cfg = _resolve_config(args)
    if not cfg.teacher_path:
        raise ConfigError("a teacher checkpoint is required (--teacher or config.teacher_path)")
    if "," in args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    else:
        seeds = list(range(int(args.seeds)))
    values = _parse_values(args.axis, args.values)
    cells = expand(AblationSpec(axis=args.axis, values=values, base=cfg, seeds=seeds))
    rows = run_matrix(cells, args.out, jobs=args.jobs)
    for entry in aggregate(rows):
        acc = entry["accuracy_mean"]
        acc_text = "n/a" if acc is None else f"{100 * acc:.2f}+/-{100 * (entry['accuracy_std'] or 0):.2f}"
        print(f"{args.axis}={entry['axis_value']}: runs={entry['runs']} failed={entry['failed']} acc={acc_text}")
    print(f"matrix written to {os.path.join(args.out, 'runs.csv')}")
    return EXIT_OK


def cmd_export_images(args) -> int:
    import numpy as np
    import torch
    from PIL import Image

    from .archive import load_archive
    from .config import EmbeddingSource
    from .distill import build_pool
    from .errors import ArchiveError
    from .synthesis import NoisyLayer, make_generator

    if args.per_class < 1:
        raise ConfigError("--per-class must be >= 1")
    classes = [int(c) for c in args.classes.split(",") if c.strip() != ""]
    if not classes:
        raise ConfigError("--classes must list at least one class id")

    arrays, meta = load_archive(args.checkpoint)
    if meta.get("kind") != "distill-checkpoint":
        raise ArchiveError(f"{args.checkpoint} is not a distillation checkpoint")
    gs = meta["generator_settings"]
    generator = make_generator(gs["latent_dim"], tuple(meta["image_shape"]), gs["arch"], gs["width"])
    generator.load_state_dict({k[len("generator/"):]: v for k, v in arrays.items()
                               if k.startswith("generator/")})
    generator.eval()

    src = EmbeddingSource(**meta["embedding"])
    pool = build_pool(src, meta["num_classes"])
    bad = [c for c in classes if c < 0 or c >= pool.num_classes]
    if bad:
        raise ConfigError(f"class ids {bad} outside 0..{pool.num_classes - 1}")

    labels = torch.tensor([c for c in classes for _ in range(args.per_class)], dtype=torch.long)
    nl = NoisyLayer(pool.dim_e, gs["latent_dim"], meta.get("nl_arch", "A3"), seed=args.seed)
    from .embeddings import lookup
    from .synthesis import noisy_layer_forward

    with torch.no_grad():
        latents = noisy_layer_forward(nl, lookup(pool, labels), training=labels.numel() >= 2)
        images = generator(latents).clamp(0, 1)

    os.makedirs(args.out, exist_ok=True)
    epoch = meta.get("epochs_completed", 0)
    count = 0
    for class_id in classes:
        rows = (labels == class_id).nonzero(as_tuple=True)[0]
        for n, i in enumerate(rows.tolist()):
            arr = (images[i].numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
            arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
            Image.fromarray(arr).save(os.path.join(args.out, f"e{epoch}_i0_c{class_id}_{n}.png"))
            count += 1
    print(f"wrote {count} images to {args.out}")
    return EXIT_OK


def _report_row(run_dir: str) -> dict:
    from .metrics import runtime_report

    row = {"axis_value": os.path.basename(os.path.normpath(run_dir)), "seed": None,
           "accuracy": None, "diversity": None, "convergence_rounds": None,
           "wall_seconds": None, "status": "ok"}
    try:
        report_path = os.path.join(run_dir, "report.json")
        with open(report_path, encoding="utf-8") as fh:
            report = json.load(fh)
        m = report["metrics"]
        row["seed"] = report.get("seed")
        row["accuracy"] = m["accuracy"]["final"]
        row["diversity"] = m["diversity"]
        row["convergence_rounds"] = m["convergence_rounds"]
        row["wall_seconds"] = m["runtime"]["total_seconds"]
    except Exception as exc:
        try:
            runtime = runtime_report(run_dir)
            row["wall_seconds"] = runtime["total_seconds"]
            row["status"] = "incomplete"
        except Exception:
            row["status"] = f"failed: {type(exc).__name__}"
    return row


def cmd_report(args) -> int:
    from .ablation import RUN_CSV_FIELDS, write_matrix_csv

    rows = [_report_row(d) for d in args.run_dirs]
    if args.format == "csv":
        if args.out:
            write_matrix_csv(rows, args.out)
            print(f"wrote {args.out}")
        else:
            import csv as _csv
            writer = _csv.DictWriter(sys.stdout, fieldnames=RUN_CSV_FIELDS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in RUN_CSV_FIELDS})
    else:
        header = f"{'run':30} {'acc%':>7} {'diversity':>10} {'conv':>7} {'wall_s':>9} status"
        lines = [header, "-" * len(header)]
        for row in rows:
            acc = "" if row["accuracy"] is None else f"{100 * row['accuracy']:.2f}"
            div = "" if row["diversity"] is None else f"{row['diversity']:.4f}"
            conv = "" if row["convergence_rounds"] is None else f"{row['convergence_rounds']:g}"
            wall = "" if row["wall_seconds"] is None else f"{row['wall_seconds']:.1f}"
            lines.append(f"{row['axis_value']:30} {acc:>7} {div:>10} {conv:>7} {wall:>9} {row['status']}")
        text = "\n".join(lines)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        else:
            print(text)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except (ConfigError, _UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NayerError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def console_entry() -> None:
    sys.exit(main())
