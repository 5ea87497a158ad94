import os

import pytest
import torch

from nayer.config import DistillSchedule, EmbeddingSource, GeneratorSettings, RunConfig
from nayer.data import load_dataset
from nayer.distill import save_classifier
from nayer.models import pretrain_teacher

torch.set_num_threads(max(1, os.cpu_count() or 1))


@pytest.fixture(scope="session")
def digits_bundle():
    return load_dataset("digits")


@pytest.fixture(scope="session")
def teacher_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("teachers")


def _save(path, model, arch, acc, bundle):
    save_classifier(str(path), model, {
        "arch": arch,
        "num_classes": bundle.num_classes,
        "in_shape": list(bundle.image_shape),
        "dataset": bundle.name,
        "test_accuracy": acc,
        "normalize_mean": list(bundle.normalize_mean),
        "normalize_std": list(bundle.normalize_std),
    })
    return str(path)


@pytest.fixture(scope="session")
def quick_teacher(teacher_dir, digits_bundle):
    """3-epoch cnn-mini teacher: fast, good enough for loop-mechanics tests."""
    model, acc, bundle = pretrain_teacher(digits_bundle, "cnn-mini", epochs=3, seed=0)
    path = _save(teacher_dir / "quick.pt", model, "cnn-mini", acc, bundle)
    return {"path": path, "model": model, "accuracy": acc, "bundle": bundle}


@pytest.fixture(scope="session")
def desk_teacher(teacher_dir, digits_bundle):
    """Full desk teacher (>= 98% on the digits test split)."""
    model, acc, bundle = pretrain_teacher(digits_bundle, "cnn-small", epochs=10, seed=0)
    path = _save(teacher_dir / "desk.pt", model, "cnn-small", acc, bundle)
    return {"path": path, "model": model, "accuracy": acc, "bundle": bundle}


def tiny_config(teacher_path: str, out_dir: str, **overrides) -> RunConfig:
    """Smallest config that exercises every phase of the loop."""
    schedule = DistillSchedule(
        epochs=overrides.pop("epochs", 2),
        warmup_epochs=overrides.pop("warmup_epochs", 1),
        gen_iterations=overrides.pop("gen_iterations", 2),
        gen_steps=overrides.pop("gen_steps", 3),
        student_iterations=overrides.pop("student_iterations", 3),
        gen_batch=overrides.pop("gen_batch", 40),
        student_batch=overrides.pop("student_batch", 32),
        alpha_cls=overrides.pop("alpha_cls", 1.0),
        alpha_adv=overrides.pop("alpha_adv", 1.0),
        alpha_bn=overrides.pop("alpha_bn", 0.002),
    )
    cfg = RunConfig(
        dataset="digits",
        teacher_path=teacher_path,
        student_arch="cnn-tiny",
        embedding=EmbeddingSource(kind="fallback", seed=0, dim=16),
        generator=GeneratorSettings(latent_dim=64, width=16),
        schedule=schedule,
        output_dir=out_dir,
        seed=overrides.pop("seed", 0),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg
