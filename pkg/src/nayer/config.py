"""Run configuration: dataclasses, strict JSON (de)serialization, presets."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass
class EmbeddingSource:
    """Where the per-class embeddings come from: a CSV file or the seeded fallback."""

    kind: str = "fallback"  # "file" | "fallback"
    path: str | None = None
    seed: int = 0
    dim: int = 64

    def validate(self) -> None:
        if self.kind not in ("file", "fallback"):
            raise ConfigError(f"embedding source kind must be file|fallback, got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("embedding source kind=file requires a path")
        if self.kind == "fallback" and self.dim < 1:
            raise ConfigError("fallback embedding dim must be >= 1")


@dataclass
class OptimizerSettings:
    student_lr: float = 0.1  # cosine-annealed to 0 across the run
    student_momentum: float = 0.9
    student_weight_decay: float = 0.0
    gen_lr: float = 4e-3  # Adam, shared by generator and noisy layer


@dataclass
class GeneratorSettings:
    latent_dim: int = 1000
    width: int = 128
    arch: str = "small"  # "small" (H/4 stem) | "large" (H/16 stem)


@dataclass
class DistillSchedule:
    """Loop constants of one distillation run."""

    epochs: int = 100
    warmup_epochs: int = 20
    gen_iterations: int = 2
    gen_steps: int = 30
    student_iterations: int = 400
    gen_batch: int = 400
    student_batch: int = 512
    alpha_cls: float = 0.5
    alpha_adv: float = 1.33
    alpha_bn: float = 10.0
    kl_temperature: float = 1.0
    optim: OptimizerSettings = field(default_factory=OptimizerSettings)

    def validate(self) -> None:
        for name in ("epochs", "gen_iterations", "gen_steps", "student_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must satisfy 0 <= warmup < epochs")
        if self.gen_batch < 2 or self.student_batch < 2:
            raise ConfigError("batch sizes must be >= 2 (batch-norm constraint)")
        if min(self.alpha_cls, self.alpha_adv, self.alpha_bn) < 0 or self.kl_temperature <= 0:
            raise ConfigError("loss weights must be >= 0 and kl_temperature > 0")


@dataclass
class RunConfig:
    config_version: int = CONFIG_VERSION
    dataset: str = "digits"
    data_dir: str | None = None
    teacher_path: str = ""
    student_arch: str | None = None  # None: same family as the teacher checkpoint
    embedding: EmbeddingSource = field(default_factory=EmbeddingSource)
    input_mode: str = "NL_KTO1"
    sum_beta: float | None = None
    nl_arch: str = "A3"
    memory_capacity: int | None = None  # images; None = unbounded
    # None: inherit the constants stored in the teacher checkpoint.
    normalize_mean: list[float] | None = None
    normalize_std: list[float] | None = None
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    schedule: DistillSchedule = field(default_factory=DistillSchedule)
    output_dir: str | None = None
    seed: int = 0
    eval_every: int = 1
    dump_images: bool = False

    def validate(self) -> None:
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(f"config_version {self.config_version} unsupported (expected {CONFIG_VERSION})")
        self.embedding.validate()
        self.schedule.validate()
        from .synthesis import ARCH_VARIANTS, InputMode, InputSpec

        try:
            mode = InputMode(self.input_mode)
        except ValueError:
            raise ConfigError(f"unknown input_mode {self.input_mode!r}") from None
        try:
            InputSpec(mode, self.sum_beta)  # beta present iff SUM
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        if self.nl_arch not in ARCH_VARIANTS:
            raise ConfigError(f"unknown nl_arch {self.nl_arch!r}")
        if self.memory_capacity is not None and self.memory_capacity < 1:
            raise ConfigError("memory_capacity must be >= 1 or null for unbounded")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


# Field annotations are strings under `from __future__ import annotations`.
_NESTED_TYPES = {
    "EmbeddingSource": EmbeddingSource,
    "OptimizerSettings": OptimizerSettings,
    "GeneratorSettings": GeneratorSettings,
    "DistillSchedule": DistillSchedule,
}


def _from_dict(cls, payload: dict, path: str = ""):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        nested = _NESTED_TYPES.get(str(fields[name].type))
        if nested is not None:
            kwargs[name] = _from_dict(nested, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(payload: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, payload)
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def to_canonical_json(cfg: RunConfig) -> str:
    """Canonical serialization: sorted keys, two-space indent, trailing newline."""
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def parse_config_file(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(payload)


def write_config_file(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_canonical_json(cfg))


def _paper_schedule(epochs: int, gen_steps: int) -> DistillSchedule:
    return DistillSchedule(
        epochs=epochs,
        warmup_epochs=20,
        gen_iterations=2,
        gen_steps=gen_steps,
        student_iterations=400,
        gen_batch=400,
        student_batch=512,
    )


def _desk_schedule(epochs: int) -> DistillSchedule:
    # Pilot-tuned for small gray images and a CPU budget of a few minutes:
    # the paper-scale weights assume a far larger BN-penalty denominator, so
    # alpha_bn is rescaled and an extra generation round feeds the memory.
    return DistillSchedule(
        epochs=epochs,
        warmup_epochs=4,
        gen_iterations=3,
        gen_steps=20,
        student_iterations=30,
        gen_batch=200,
        student_batch=256,
        alpha_cls=1.0,
        alpha_adv=0.5,
        alpha_bn=0.01,
    )


def preset_config(name: str) -> RunConfig:
    """Named starting configurations; CLI flags override individual fields."""
    # Paper-faithful runs should point --embedding-file at a real encoder CSV;
    # the default source is the seeded fallback so presets stand alone.
    presets: dict[str, RunConfig] = {}
    for epochs in (100, 200, 300):
        presets[f"cifar10-w402-e{epochs}"] = RunConfig(
            dataset="cifar10",
            embedding=EmbeddingSource(kind="fallback", seed=0, dim=512),
            schedule=_paper_schedule(epochs, gen_steps=30),
        )
        presets[f"cifar100-w402-e{epochs}"] = RunConfig(
            dataset="cifar100",
            embedding=EmbeddingSource(kind="fallback", seed=0, dim=512),
            schedule=_paper_schedule(epochs, gen_steps=40),
        )
    presets["cifar10-w402"] = presets["cifar10-w402-e300"]
    presets["cifar100-w402"] = presets["cifar100-w402-e300"]
    presets["mnist-desk"] = RunConfig(
        dataset="mnist",
        embedding=EmbeddingSource(kind="fallback", seed=0, dim=64),
        generator=GeneratorSettings(latent_dim=256, width=64),
        schedule=_desk_schedule(30),
    )
    presets["digits-desk"] = RunConfig(
        dataset="digits",
        embedding=EmbeddingSource(kind="fallback", seed=0, dim=64),
        generator=GeneratorSettings(latent_dim=256, width=64),
        schedule=_desk_schedule(30),
    )
    presets["cifar10-desk"] = RunConfig(
        dataset="cifar10",
        embedding=EmbeddingSource(kind="fallback", seed=0, dim=64),
        generator=GeneratorSettings(latent_dim=256, width=64),
        schedule=_desk_schedule(30),
    )
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(presets))}")
    return dataclasses.replace(presets[name])


PRESET_NAMES = (
    "cifar10-w402", "cifar10-w402-e100", "cifar10-w402-e200", "cifar10-w402-e300",
    "cifar100-w402", "cifar100-w402-e100", "cifar100-w402-e200", "cifar100-w402-e300",
    "mnist-desk", "digits-desk", "cifar10-desk",
)
