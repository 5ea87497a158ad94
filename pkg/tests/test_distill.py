import json
import math
import os

import pytest
import torch

from nayer import embeddings as emb
from nayer.config import parse_config_file
from nayer.distill import (
    MemoryBuffer,
    _balanced_labels,
    _prepare_state,
    distill,
    load_classifier,
    memory_sample,
    memory_store,
    student_phase,
)
from nayer.errors import EmptyMemoryError, NonFiniteLossError
from nayer.synthesis import LatentMapper, SyntheticBatch
from nayer.utils import generator_from, params_fingerprint

from conftest import tiny_config


def make_batch(n, value=0.5, label=0, origin=(0, 0)):
    return SyntheticBatch(torch.full((n, 1, 4, 4), value), torch.full((n,), label, dtype=torch.long),
                          origin[0], origin[1])


class TestMemoryBuffer:
    def test_store_counts(self):
        buf = MemoryBuffer()
        memory_store(buf, make_batch(400))
        assert len(buf) == 400

    def test_fifo_eviction_whole_batches(self):
        buf = MemoryBuffer(capacity=5000)
        for i in range(11):
            buf.store(make_batch(500, label=i % 10, origin=(i, 0)))
        assert len(buf) == 5000
        assert buf.num_batches == 10
        # first stored batch evicted
        assert buf.batches()[0].origin_epoch == 1

    def test_unbounded_growth_arithmetic(self):
        buf = MemoryBuffer()
        for _ in range(100):
            for _ in range(2):
                buf.store(make_batch(40))
        assert len(buf) == 100 * 2 * 40

    def test_sample_single_image_repeats(self):
        buf = MemoryBuffer()
        buf.store(make_batch(1, value=0.25, label=7))
        out = memory_sample(buf, 3, seed=0)
        assert len(out) == 3
        assert torch.equal(out.images[0], out.images[1])
        assert out.pseudo_labels.tolist() == [7, 7, 7]

    def test_sample_deterministic(self):
        buf = MemoryBuffer()
        buf.store(make_batch(10, value=0.1, label=0))
        buf.store(make_batch(10, value=0.9, label=1))
        a = buf.sample(16, seed=42)
        b = buf.sample(16, seed=42)
        assert torch.equal(a.images, b.images)
        assert not torch.equal(a.images, buf.sample(16, seed=43).images)

    def test_sample_uniform_over_two_images(self):
        buf = MemoryBuffer()
        buf.store(make_batch(1, value=0.0, label=0))
        buf.store(make_batch(1, value=1.0, label=1))
        draws = buf.sample(10_000, seed=7)
        freq = float((draws.pseudo_labels == 0).float().mean())
        sigma = (0.25 / 10_000) ** 0.5
        assert abs(freq - 0.5) <= 3 * sigma

    def test_empty_sample_rejected(self):
        with pytest.raises(EmptyMemoryError):
            MemoryBuffer().sample(1, seed=0)

    def test_feature_rows_evicted_with_batches(self):
        buf = MemoryBuffer(capacity=20)
        buf.store(make_batch(10), features=torch.zeros(10, 3))
        buf.store(make_batch(10), features=torch.ones(10, 3))
        buf.store(make_batch(10), features=2 * torch.ones(10, 3))
        rows = buf.feature_rows()
        assert rows.shape == (20, 3)
        assert float(rows.min()) == 1.0  # zeros batch evicted


class TestBalancedLabels:
    def test_exact_coverage(self):
        labels = _balanced_labels(100, 400, generator_from("t", 0))
        counts = torch.bincount(labels, minlength=100)
        assert counts.tolist() == [4] * 100

    def test_remainder_distribution(self):
        labels = _balanced_labels(10, 64, generator_from("t", 1))
        counts = torch.bincount(labels, minlength=10)
        assert int(counts.sum()) == 64
        assert int(counts.min()) == 6 and int(counts.max()) == 7

    def test_deterministic(self):
        a = _balanced_labels(10, 32, generator_from("x", 5))
        b = _balanced_labels(10, 32, generator_from("x", 5))
        assert torch.equal(a, b)


@pytest.fixture()
def smoke_result(quick_teacher, tmp_path):
    cfg = tiny_config(quick_teacher["path"], str(tmp_path / "run"))
    return cfg, distill(cfg)


class TestDistillLoop:
    def test_smoke_run_artifacts(self, smoke_result):
        cfg, result = smoke_result
        assert os.path.exists(os.path.join(result.run_dir, "config.json"))
        assert os.path.exists(os.path.join(result.run_dir, "metrics.jsonl"))
        assert os.path.exists(os.path.join(result.run_dir, "report.json"))
        assert os.path.exists(os.path.join(result.run_dir, "checkpoints", "latest.pt"))
        metrics = result.report["metrics"]
        assert set(metrics) == {"accuracy", "diversity", "convergence_rounds", "runtime"}
        assert metrics["runtime"]["total_seconds"] > 0

    def test_minimal_single_epoch_config(self, quick_teacher, tmp_path):
        cfg = tiny_config(quick_teacher["path"], str(tmp_path / "one"), epochs=1, warmup_epochs=0,
                          gen_iterations=1, gen_steps=1, student_iterations=1)
        result = distill(cfg)
        assert os.path.exists(os.path.join(result.run_dir, "report.json"))

    def test_memory_monotone_and_exact(self, smoke_result):
        cfg, result = smoke_result
        sizes = []
        with open(os.path.join(result.run_dir, "metrics.jsonl")) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["phase"] == "epoch":
                    sizes.append(rec["metrics"]["memory_images"])
        sch = cfg.schedule
        assert sizes == [(e + 1) * sch.gen_iterations * sch.gen_batch for e in range(sch.epochs)]

    def test_teacher_unchanged(self, quick_teacher, tmp_path):
        before = params_fingerprint(quick_teacher["model"])
        cfg = tiny_config(quick_teacher["path"], str(tmp_path / "run"))
        distill(cfg)
        teacher, _ = load_classifier(quick_teacher["path"])
        assert params_fingerprint(teacher) == before

    def test_encoder_free_training(self, quick_teacher, tmp_path):
        cfg = tiny_config(quick_teacher["path"], str(tmp_path / "run"))
        state = _prepare_state(cfg)  # pool built here, before the loop
        before = emb.construction_count()
        cfg2 = tiny_config(quick_teacher["path"], str(tmp_path / "run2"))
        distill(cfg2)
        # distill() builds exactly one pool at entry and none inside the loop
        assert emb.construction_count() == before + 1
        state.pool.assert_unchanged()

    def test_warmup_has_no_student_metrics(self, smoke_result):
        cfg, result = smoke_result
        with open(os.path.join(result.run_dir, "metrics.jsonl")) as fh:
            records = [json.loads(line) for line in fh]
        warmup_epochs = {r["epoch"] for r in records if r["phase"] == "student"}
        assert all(e >= cfg.schedule.warmup_epochs for e in warmup_epochs)
        epoch0 = [r for r in records if r["phase"] == "epoch" and r["epoch"] == 0][0]
        assert epoch0["metrics"]["student_accuracy"] is None


def _epoch_metrics(run_dir):
    out = []
    with open(os.path.join(run_dir, "metrics.jsonl")) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["phase"] == "epoch":
                out.append((rec["epoch"], rec["metrics"]))
    return out


class TestDeterminismAndResume:
    def test_identical_seeds_identical_logs(self, quick_teacher, tmp_path):
        cfg_a = tiny_config(quick_teacher["path"], str(tmp_path / "a"), seed=9)
        cfg_b = tiny_config(quick_teacher["path"], str(tmp_path / "b"), seed=9)
        distill(cfg_a)
        distill(cfg_b)
        assert _epoch_metrics(str(tmp_path / "a")) == _epoch_metrics(str(tmp_path / "b"))

    def test_different_seed_changes_log(self, quick_teacher, tmp_path):
        cfg_a = tiny_config(quick_teacher["path"], str(tmp_path / "a"), seed=1)
        cfg_b = tiny_config(quick_teacher["path"], str(tmp_path / "b"), seed=2)
        distill(cfg_a)
        distill(cfg_b)
        assert _epoch_metrics(str(tmp_path / "a")) != _epoch_metrics(str(tmp_path / "b"))

    def test_resume_matches_uninterrupted_run(self, quick_teacher, tmp_path, monkeypatch):
        import importlib

        dmod = importlib.import_module("nayer.distill")

        cfg_ref = tiny_config(quick_teacher["path"], str(tmp_path / "ref"), epochs=3, seed=4)
        distill(cfg_ref)

        cfg_int = tiny_config(quick_teacher["path"], str(tmp_path / "int"), epochs=3, seed=4)
        original = dmod.generation_phase

        def explode_at_epoch_2(state, epoch):
            if epoch == 2:
                raise RuntimeError("injected interruption")
            return original(state, epoch)

        monkeypatch.setattr(dmod, "generation_phase", explode_at_epoch_2)
        with pytest.raises(RuntimeError, match="injected"):
            distill(cfg_int)
        monkeypatch.setattr(dmod, "generation_phase", original)

        resumed_cfg = parse_config_file(os.path.join(str(tmp_path / "int"), "config.json"))
        resumed_cfg.output_dir = str(tmp_path / "int")
        distill(resumed_cfg, resume=True)

        assert _epoch_metrics(str(tmp_path / "int")) == _epoch_metrics(str(tmp_path / "ref"))

    def test_resume_without_checkpoint_fails(self, quick_teacher, tmp_path):
        cfg = tiny_config(quick_teacher["path"], str(tmp_path / "none"))
        from nayer.errors import ArchiveError

        with pytest.raises(ArchiveError):
            distill(cfg, resume=True)


class TestReinitSemantics:
    def _reinit_transitions(self, quick_teacher, tmp_path, mode, monkeypatch, tag):
        """(hash before, hash after) around every round's reinit call."""
        pairs = []
        original = LatentMapper.reinit_for_round

        def spy(self, seed, batch_size):
            before = self.fingerprint()
            result = original(self, seed, batch_size)
            pairs.append((before, self.fingerprint()))
            return result

        monkeypatch.setattr(LatentMapper, "reinit_for_round", spy)
        cfg = tiny_config(quick_teacher["path"], str(tmp_path / tag), input_mode=mode)
        distill(cfg)
        monkeypatch.setattr(LatentMapper, "reinit_for_round", original)
        return pairs

    def test_default_mode_redraws_every_round(self, quick_teacher, tmp_path, monkeypatch):
        pairs = self._reinit_transitions(quick_teacher, tmp_path, "NL_KTO1", monkeypatch, "kto1")
        assert len(pairs) >= 4
        # every round starts from a freshly drawn layer (first call draws over init)
        for before, after in pairs[1:]:
            assert before != after
        after_hashes = [after for _, after in pairs]
        assert len(set(after_hashes)) == len(after_hashes)

    def test_wo_reinit_never_redraws(self, quick_teacher, tmp_path, monkeypatch):
        pairs = self._reinit_transitions(quick_teacher, tmp_path, "NL_WO_REINIT", monkeypatch, "wori")
        assert len(pairs) >= 4
        for before, after in pairs:
            assert before == after


class TestAborts:
    def test_nonfinite_loss_aborts_with_dump(self, quick_teacher, tmp_path):
        cfg = tiny_config(quick_teacher["path"], str(tmp_path / "nan"), alpha_cls=float("inf"))
        with pytest.raises(NonFiniteLossError):
            distill(cfg)
        assert os.path.exists(os.path.join(str(tmp_path / "nan"), "abort_dump.json"))
        # the initial checkpoint keeps the run resumable
        assert os.path.exists(os.path.join(str(tmp_path / "nan"), "checkpoints", "latest.pt"))

    def test_student_phase_requires_memory(self, quick_teacher, tmp_path):
        cfg = tiny_config(quick_teacher["path"], str(tmp_path / "s"))
        state = _prepare_state(cfg)
        with pytest.raises(EmptyMemoryError):
            student_phase(state, epoch=0)
