"""The distillation loop: generation rounds, replay memory, student updates.

Each epoch runs I generation rounds (fresh noisy layer, fresh pseudo-labels,
g optimizer steps on the generator objective, final batch into memory),
followed after warm-up by S student iterations on batches sampled from
memory. The teacher is frozen throughout; embeddings are built once before
entry and only looked up inside.
"""

from __future__ import annotations

import json
import math
import os
import time
from collections import deque
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import embeddings as emb
from .archive import load_archive, save_archive
from .config import CONFIG_VERSION, RunConfig, write_config_file
from .data import DatasetBundle, Normalizer, load_dataset
from .errors import ArchiveError, ConfigError, EmptyMemoryError, NonFiniteLossError, ShapeError
from .losses import LossWeights, loss_generator, loss_student
from .metrics import bounded_diversity_score, convergence_time
from .models import evaluate, instrumented_forward, make_model
from .synthesis import (
    ImageGenerator,
    InputMode,
    LatentMapper,
    SyntheticBatch,
    make_generator,
)
from .utils import generator_from, params_fingerprint, stable_seed

RUNS_DIR_ENV = "NAYER_RUNS_DIR"


class MemoryBuffer:
    """FIFO store of synthetic batches, bounded by a total image count.

    Stored batches are immutable; eviction removes whole batches, oldest
    first, once the total image count exceeds the capacity. An optional
    feature matrix can ride along with each batch for diversity tracking
    and is evicted together with it.
    """

    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise ConfigError("memory capacity must be >= 1 or None for unbounded")
        self.capacity = capacity
        self._batches: deque[tuple[SyntheticBatch, torch.Tensor | None]] = deque()
        self._num_images = 0
        self._flat: tuple[torch.Tensor, torch.Tensor] | None = None

    def __len__(self) -> int:
        return self._num_images

    @property
    def num_batches(self) -> int:
        return len(self._batches)

    def store(self, batch: SyntheticBatch, features: torch.Tensor | None = None) -> None:
        self._batches.append((batch, features))
        self._num_images += len(batch)
        if self.capacity is not None:
            while self._num_images > self.capacity and len(self._batches) > 1:
                evicted, _ = self._batches.popleft()
                self._num_images -= len(evicted)
        self._flat = None

    def feature_rows(self) -> torch.Tensor | None:
        feats = [f for _, f in self._batches if f is not None]
        return torch.cat(feats) if feats else None

    def _flattened(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self._flat is None:
            self._flat = (
                torch.cat([b.images for b, _ in self._batches]),
                torch.cat([b.pseudo_labels for b, _ in self._batches]),
            )
        return self._flat

    def sample(self, n: int, seed: int) -> SyntheticBatch:
        """n images drawn uniformly with replacement across all stored images."""
        if self._num_images == 0:
            raise EmptyMemoryError("cannot sample from an empty memory buffer")
        images, labels = self._flattened()
        idx = torch.randint(0, self._num_images, (n,), generator=generator_from("memory-sample", seed))
        return SyntheticBatch(images[idx], labels[idx], origin_epoch=-1, origin_iteration=-1)

    def batches(self) -> list[SyntheticBatch]:
        return [b for b, _ in self._batches]


def memory_store(buf: MemoryBuffer, batch: SyntheticBatch) -> MemoryBuffer:
    buf.store(batch)
    return buf


def memory_sample(buf: MemoryBuffer, n: int, seed: int) -> SyntheticBatch:
    return buf.sample(n, seed)


def save_classifier(path: str, model: nn.Module, meta: dict) -> None:
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    save_archive(path, arrays, {"kind": "classifier", **meta})


def load_classifier(path: str) -> tuple[nn.Module, dict]:
    arrays, meta = load_archive(path)
    if meta.get("kind") != "classifier":
        raise ArchiveError(f"{path} does not hold a classifier")
    model = make_model(meta["arch"], tuple(meta["in_shape"]), meta["num_classes"])
    state = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(state)
    model.eval()
    return model, meta


def _balanced_labels(num_classes: int, batch: int, g: torch.Generator) -> torch.Tensor:
    """Round-robin class coverage; leftover slots follow a seeded shuffle."""
    per = batch // num_classes
    labels = torch.arange(num_classes).repeat(per)
    remainder = batch - per * num_classes
    if remainder:
        extra = torch.randperm(num_classes, generator=g)[:remainder]
        labels = torch.cat([labels, extra])
    return labels[torch.randperm(batch, generator=g)]


def _flatten_optimizer(opt: torch.optim.Optimizer, prefix: str, arrays: dict, meta: dict) -> None:
    sd = opt.state_dict()
    scalars: dict[str, dict] = {}
    for pid, state in sd["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                arrays[f"{prefix}/state/{pid}/{key}"] = value
            else:
                scalars.setdefault(str(pid), {})[key] = value
    meta[prefix] = {"param_groups": sd["param_groups"], "scalars": scalars}


def _restore_optimizer(opt: torch.optim.Optimizer, prefix: str, arrays: dict, meta: dict) -> None:
    if prefix not in meta:
        return
    info = meta[prefix]
    state: dict[int, dict] = {}
    marker = f"{prefix}/state/"
    for name, tensor in arrays.items():
        if not name.startswith(marker):
            continue
        pid_str, key = name[len(marker):].split("/", 1)
        state.setdefault(int(pid_str), {})[key] = tensor
    for pid_str, extra in info["scalars"].items():
        state.setdefault(int(pid_str), {}).update(extra)
    opt.load_state_dict({"state": state, "param_groups": info["param_groups"]})


class _RunLogger:
    """Append-only JSONL metric log; one self-describing record per line."""

    def __init__(self, path: str, start_epoch: int = 0):
        self.path = path
        if start_epoch > 0 and os.path.exists(path):
            kept = []
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if json.loads(line).get("epoch", -1) < start_epoch:
                        kept.append(line)
            with open(path, "w", encoding="utf-8") as fh:
                fh.writelines(kept)
        elif start_epoch == 0:
            open(path, "w", encoding="utf-8").close()
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, epoch: int, phase: str, step: int | None, metrics: dict,
              iteration: int | None = None, timing: dict | None = None) -> None:
        record = {"epoch": epoch, "phase": phase, "step": step, "metrics": metrics}
        if iteration is not None:
            record["iteration"] = iteration
        if timing is not None:
            record["timing"] = timing
        self._fh.write(json.dumps(record) + "\n")

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class DistillState:
    """Everything one run mutates; phases operate on this."""

    cfg: RunConfig
    run_dir: str
    bundle: DatasetBundle
    normalizer: Normalizer
    teacher: nn.Module
    teacher_meta: dict
    student: nn.Module
    generator: ImageGenerator
    mapper: LatentMapper
    pool: emb.LTEPool
    memory: MemoryBuffer
    weights: LossWeights
    gen_opt: torch.optim.Optimizer
    student_opt: torch.optim.Optimizer
    log: _RunLogger
    convergence: list[tuple[int, float]] = field(default_factory=list)
    diversity_values: list[float] = field(default_factory=list)
    rounds_done: int = 0
    best_acc: float = -1.0
    best_epoch: int = -1
    last_acc: float | None = None


@dataclass
class DistillResult:
    student: nn.Module
    report: dict
    run_dir: str


def _dump_round_images(state: DistillState, batch: SyntheticBatch, epoch: int, iteration: int) -> None:
    from PIL import Image
    import numpy as np

    out = os.path.join(state.run_dir, "images")
    os.makedirs(out, exist_ok=True)
    seen: dict[int, int] = {}
    for i in range(len(batch)):
        c = int(batch.pseudo_labels[i])
        if seen.get(c, 0) >= 1:  # one image per class per round keeps dumps small
            continue
        seen[c] = seen.get(c, 0) + 1
        arr = (batch.images[i].numpy() * 255.0).round().astype(np.uint8)
        arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
        Image.fromarray(arr).save(os.path.join(out, f"e{epoch}_i{iteration}_c{c}_{seen[c] - 1}.png"))


def _abort_dump(state: DistillState, epoch: int, iteration: int, step: int,
                breakdown: dict, latents: torch.Tensor) -> None:
    with torch.no_grad():
        param_norm = float(sum(p.norm() ** 2 for p in state.generator.parameters()) ** 0.5)
    diag = {
        "epoch": epoch,
        "iteration": iteration,
        "step": step,
        "losses": breakdown,
        "latent_norm": float(latents.detach().norm()),
        "generator_param_norm": param_norm,
    }
    with open(os.path.join(state.run_dir, "abort_dump.json"), "w", encoding="utf-8") as fh:
        json.dump(diag, fh, indent=2)


@torch.no_grad()
def _teacher_features(state: DistillState, images: torch.Tensor) -> torch.Tensor:
    feats, _ = state.teacher.features_and_logits(state.normalizer(images))
    return feats.detach()


def generation_phase(state: DistillState, epoch: int) -> dict:
    """I rounds of reinitialize-then-optimize; final batch of each round stored."""
    cfg, sch = state.cfg, state.cfg.schedule
    state.teacher.eval()
    state.student.eval()
    state.student.requires_grad_(False)
    last_breakdown: dict = {}
    for iteration in range(sch.gen_iterations):
        round_seed = stable_seed(cfg.seed, "round", epoch, iteration)
        labels = _balanced_labels(state.pool.num_classes, sch.gen_batch,
                                  generator_from(cfg.seed, "labels", epoch, iteration))
        reinitialized = state.mapper.reinit_for_round(round_seed, sch.gen_batch)
        if reinitialized:
            nl_opt = torch.optim.Adam(state.mapper.trainable_parameters(), lr=sch.optim.gen_lr)
        else:
            nl_opt = None  # persistent mapper params live in gen_opt

        last_images = None
        for step in range(sch.gen_steps):
            noise_seed = stable_seed(cfg.seed, "noise", epoch, iteration, step)
            latents = state.mapper.make(labels, noise_seed, training=True)
            state.generator.train()
            images = state.generator(latents)
            x = state.normalizer(images)
            t_logits, records = instrumented_forward(state.teacher, x)
            s_logits = state.student(x)
            total, breakdown = loss_generator(t_logits, s_logits, labels, records, state.weights)
            if not math.isfinite(breakdown["total"]):
                _abort_dump(state, epoch, iteration, step, breakdown, latents)
                raise NonFiniteLossError(
                    f"non-finite generator loss at epoch {epoch} iteration {iteration} step {step}; "
                    f"diagnostics in {state.run_dir}/abort_dump.json"
                )
            state.gen_opt.zero_grad()
            if nl_opt is not None:
                nl_opt.zero_grad()
            total.backward()
            state.gen_opt.step()
            if nl_opt is not None:
                nl_opt.step()
            state.log.write(epoch, "generation", step, breakdown, iteration=iteration)
            last_images = images.detach()
            last_breakdown = breakdown

        batch = SyntheticBatch(last_images.clamp(0.0, 1.0), labels, epoch, iteration)
        new_feats = _teacher_features(state, batch.images)
        old_feats = state.memory.feature_rows()
        if old_feats is not None:
            state.diversity_values.append(
                bounded_diversity_score(new_feats, old_feats, seed=stable_seed(cfg.seed, "div", epoch, iteration))
            )
        state.memory.store(batch, new_feats)
        state.rounds_done += 1
        state.convergence.append((state.rounds_done, last_breakdown["ce"]))
        round_metrics = {"ce_final": last_breakdown["ce"], "memory_images": len(state.memory)}
        if old_feats is not None:
            round_metrics["diversity"] = state.diversity_values[-1]
        state.log.write(epoch, "generation_round", None, round_metrics, iteration=iteration)
        if cfg.dump_images:
            _dump_round_images(state, batch, epoch, iteration)
    return last_breakdown


def _student_lr(sch, epoch: int) -> float:
    return 0.5 * sch.optim.student_lr * (1 + math.cos(math.pi * epoch / sch.epochs))


def student_phase(state: DistillState, epoch: int) -> dict:
    """S iterations of SGD on teacher-student KL over memory samples."""
    cfg, sch = state.cfg, state.cfg.schedule
    if len(state.memory) == 0:
        raise EmptyMemoryError("student phase requires a non-empty memory buffer")
    state.teacher.eval()
    state.student.train()
    state.student.requires_grad_(True)
    lr = _student_lr(sch, epoch)
    for group in state.student_opt.param_groups:
        group["lr"] = lr
    total = 0.0
    for step in range(sch.student_iterations):
        batch = state.memory.sample(sch.student_batch, stable_seed(cfg.seed, "sample", epoch, step))
        x = state.normalizer(batch.images)
        with torch.no_grad():
            t_logits = state.teacher(x)
        s_logits = state.student(x)
        loss = loss_student(t_logits, s_logits, state.weights.kl_temperature)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite student loss at epoch {epoch} step {step}")
        state.student_opt.zero_grad()
        loss.backward()
        state.student_opt.step()
        value = float(loss.detach())
        total += value
        state.log.write(epoch, "student", step, {"kl": value, "lr": lr})
    return {"student_loss_mean": total / sch.student_iterations, "lr": lr}


def build_pool(src, num_classes: int) -> emb.LTEPool:
    """Materialize the embedding pool from an EmbeddingSource."""
    if src.kind == "file":
        pool = emb.load_embedding_file(src.path)
        if pool.num_classes != num_classes:
            raise ConfigError(f"embedding pool has {pool.num_classes} classes, teacher expects {num_classes}")
        return pool
    return emb.fallback_embeddings(num_classes, src.dim, src.seed)


def _checkpoint_arrays(state: DistillState) -> tuple[dict, dict]:
    arrays: dict[str, torch.Tensor] = {}
    meta: dict = {}
    for prefix, module in (("student", state.student), ("generator", state.generator)):
        for k, v in module.state_dict().items():
            arrays[f"{prefix}/{k}"] = v
    if state.mapper.persistent and state.mapper.module is not None:
        for k, v in state.mapper.module.state_dict().items():
            arrays[f"mapper/{k}"] = v
    _flatten_optimizer(state.gen_opt, "opt_gen", arrays, meta)
    _flatten_optimizer(state.student_opt, "opt_student", arrays, meta)
    origins = []
    for i, (batch, feats) in enumerate(state.memory._batches):
        arrays[f"memory/images/{i}"] = batch.images
        arrays[f"memory/labels/{i}"] = batch.pseudo_labels
        if feats is not None:
            arrays[f"memory/features/{i}"] = feats
        origins.append([batch.origin_epoch, batch.origin_iteration])
    meta["memory_origins"] = origins
    meta["convergence"] = [[i, c] for i, c in state.convergence]
    meta["diversity_values"] = state.diversity_values
    meta["rounds_done"] = state.rounds_done
    meta["best_acc"] = state.best_acc
    meta["best_epoch"] = state.best_epoch
    meta["last_acc"] = state.last_acc
    return arrays, meta


def _save_checkpoint(state: DistillState, epochs_completed: int, path: str) -> None:
    import dataclasses

    arrays, meta = _checkpoint_arrays(state)
    meta.update({
        "kind": "distill-checkpoint",
        "epochs_completed": epochs_completed,
        "input_mode": state.cfg.input_mode,
        "nl_arch": state.cfg.nl_arch,
        "seed": state.cfg.seed,
        "num_classes": state.pool.num_classes,
        "image_shape": list(state.bundle.image_shape),
        "generator_settings": dataclasses.asdict(state.cfg.generator),
        "embedding": dataclasses.asdict(state.cfg.embedding),
    })
    save_archive(path, arrays, meta)


def _load_checkpoint(state: DistillState, path: str) -> int:
    arrays, meta = load_archive(path)
    if meta.get("kind") != "distill-checkpoint":
        raise ArchiveError(f"{path} is not a distillation checkpoint")
    state.student.load_state_dict({k[len("student/"):]: v for k, v in arrays.items() if k.startswith("student/")})
    state.generator.load_state_dict({k[len("generator/"):]: v for k, v in arrays.items()
                                     if k.startswith("generator/")})
    mapper_state = {k[len("mapper/"):]: v for k, v in arrays.items() if k.startswith("mapper/")}
    if mapper_state and state.mapper.module is not None:
        state.mapper.module.load_state_dict(mapper_state)
    _restore_optimizer(state.gen_opt, "opt_gen", arrays, meta)
    _restore_optimizer(state.student_opt, "opt_student", arrays, meta)
    for i, (oe, oi) in enumerate(meta["memory_origins"]):
        batch = SyntheticBatch(arrays[f"memory/images/{i}"], arrays[f"memory/labels/{i}"], oe, oi)
        state.memory.store(batch, arrays.get(f"memory/features/{i}"))
    state.convergence = [(int(i), float(c)) for i, c in meta["convergence"]]
    state.diversity_values = [float(v) for v in meta["diversity_values"]]
    state.rounds_done = int(meta["rounds_done"])
    state.best_acc = float(meta["best_acc"])
    state.best_epoch = int(meta["best_epoch"])
    state.last_acc = None if meta.get("last_acc") is None else float(meta["last_acc"])
    return int(meta["epochs_completed"])


def _final_report(state: DistillState, runtime: dict) -> dict:
    conv = convergence_time(state.convergence) if state.convergence else None
    diversity = (sum(state.diversity_values) / len(state.diversity_values)
                 if state.diversity_values else None)
    return {
        "config_version": CONFIG_VERSION,
        "run_dir": state.run_dir,
        "dataset": state.cfg.dataset,
        "input_mode": state.cfg.input_mode,
        "seed": state.cfg.seed,
        "epochs_completed": state.cfg.schedule.epochs,
        "teacher": {
            "path": state.cfg.teacher_path,
            "arch": state.teacher_meta.get("arch"),
            "test_accuracy": state.teacher_meta.get("test_accuracy"),
        },
        "feature_extractor": "teacher-penultimate",
        "metrics": {
            "accuracy": {"final": state.last_acc, "best": state.best_acc, "best_epoch": state.best_epoch},
            "diversity": diversity,
            "convergence_rounds": conv,
            "runtime": runtime,
        },
    }


def default_run_dir() -> str:
    root = os.environ.get(RUNS_DIR_ENV, "runs")
    return os.path.join(root, time.strftime("run-%Y%m%d-%H%M%S"))


def _prepare_state(cfg: RunConfig) -> DistillState:
    """Materialize everything a run needs (no log handle, no checkpoint I/O)."""
    run_dir = cfg.output_dir or default_run_dir()
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)

    teacher, teacher_meta = load_classifier(cfg.teacher_path)
    teacher.requires_grad_(False)
    bundle = load_dataset(cfg.dataset, cfg.data_dir)
    if bundle.num_classes != teacher_meta["num_classes"]:
        raise ConfigError(
            f"dataset {cfg.dataset} has {bundle.num_classes} classes, teacher was trained for "
            f"{teacher_meta['num_classes']}"
        )
    mean = cfg.normalize_mean or teacher_meta.get("normalize_mean", bundle.normalize_mean)
    std = cfg.normalize_std or teacher_meta.get("normalize_std", bundle.normalize_std)
    normalizer = Normalizer(tuple(mean), tuple(std))

    pool = build_pool(cfg.embedding, bundle.num_classes)

    student = make_model(cfg.student_arch or teacher_meta["arch"], bundle.image_shape,
                         bundle.num_classes, seed=stable_seed("student", cfg.seed))
    generator = make_generator(cfg.generator.latent_dim, bundle.image_shape,
                               cfg.generator.arch, cfg.generator.width, seed=cfg.seed)
    mapper = LatentMapper(cfg.input_mode, pool, cfg.generator.latent_dim, cfg.seed,
                          beta=cfg.sum_beta, nl_arch=cfg.nl_arch)
    memory = MemoryBuffer(cfg.memory_capacity)
    sch = cfg.schedule
    weights = LossWeights(sch.alpha_cls, sch.alpha_adv, sch.alpha_bn, sch.kl_temperature)

    gen_params = list(generator.parameters())
    if mapper.persistent:
        gen_params += mapper.trainable_parameters()
    gen_opt = torch.optim.Adam(gen_params, lr=sch.optim.gen_lr)
    student_opt = torch.optim.SGD(student.parameters(), lr=sch.optim.student_lr,
                                  momentum=sch.optim.student_momentum,
                                  weight_decay=sch.optim.student_weight_decay)

    return DistillState(cfg=cfg, run_dir=run_dir, bundle=bundle, normalizer=normalizer,
                        teacher=teacher, teacher_meta=teacher_meta, student=student,
                        generator=generator, mapper=mapper, pool=pool, memory=memory,
                        weights=weights, gen_opt=gen_opt, student_opt=student_opt,
                        log=None)


def distill(cfg: RunConfig, resume: bool = False) -> DistillResult:
    """Run the full loop described by the config; returns student + report.

    Warm-up epochs run generation only. Every completed epoch writes a
    resumable checkpoint; ``resume=True`` continues from the run directory's
    latest checkpoint with a contiguous metric log.
    """
    cfg.validate()
    state = _prepare_state(cfg)
    run_dir = state.run_dir
    bundle, normalizer, teacher = state.bundle, state.normalizer, state.teacher
    sch = cfg.schedule

    # The pool was built exactly once above; the loop may only look it up.
    constructions_before = emb.construction_count()
    teacher_print = params_fingerprint(teacher)

    latest = os.path.join(run_dir, "checkpoints", "latest.pt")
    best_path = os.path.join(run_dir, "checkpoints", "best.pt")

    start_epoch = 0
    if resume:
        if not os.path.exists(latest):
            raise ArchiveError(f"--resume requested but no checkpoint under {run_dir}")
        start_epoch = _load_checkpoint(state, latest)
    state.log = _RunLogger(os.path.join(run_dir, "metrics.jsonl"), start_epoch)
    write_config_file(cfg, os.path.join(run_dir, "config.json"))
    if start_epoch == 0:
        _save_checkpoint(state, 0, latest)  # aborts before epoch 1 stay resumable

    runtime = {"generation_seconds": 0.0, "student_seconds": 0.0, "eval_seconds": 0.0}
    try:
        for epoch in range(start_epoch, sch.epochs):
            timing = {}
            t0 = time.perf_counter()
            gen_summary = generation_phase(state, epoch)
            timing["generation_seconds"] = time.perf_counter() - t0

            student_summary: dict = {}
            t0 = time.perf_counter()
            if epoch >= sch.warmup_epochs:
                student_summary = student_phase(state, epoch)
            timing["student_seconds"] = time.perf_counter() - t0

            t0 = time.perf_counter()
            acc = None
            if epoch >= sch.warmup_epochs and ((epoch + 1) % cfg.eval_every == 0 or epoch == sch.epochs - 1):
                acc = evaluate(state.student, bundle.test_x, bundle.test_y, normalizer)
                state.last_acc = acc
                if acc > state.best_acc:
                    state.best_acc = acc
                    state.best_epoch = epoch
            timing["eval_seconds"] = time.perf_counter() - t0
            for key in runtime:
                runtime[key] += timing[key]

            summary = {
                "student_accuracy": acc,
                "memory_images": len(state.memory),
                "gen_ce_final": gen_summary.get("ce"),
                "gen_total_final": gen_summary.get("total"),
                **student_summary,
            }
            state.log.write(epoch, "epoch", None, summary, timing=timing)
            state.log.flush()

            _save_checkpoint(state, epoch + 1, latest)
            if acc is not None and acc >= state.best_acc:
                _save_checkpoint(state, epoch + 1, best_path)
    finally:
        state.log.close()

    if emb.construction_count() != constructions_before:
        raise ConfigError("embedding construction happened inside distill()")
    state.pool.assert_unchanged()
    if params_fingerprint(teacher) != teacher_print:
        raise ConfigError("teacher parameters changed during distillation")

    runtime["total_seconds"] = sum(runtime.values())
    report = _final_report(state, runtime)
    with open(os.path.join(run_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    return DistillResult(student=state.student, report=report, run_dir=run_dir)
