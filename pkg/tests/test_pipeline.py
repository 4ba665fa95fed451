import json
import logging

import numpy as np
import pytest

from prefdistill import pipeline
from prefdistill.config import config_from_dict, load_config
from prefdistill.embeddings import save_embeddings
from prefdistill.errors import ConfigError, KOutOfRange, ResumableAbort, UnknownId
from prefdistill.metrics import MetricReport

from conftest import tiny_world

CKPT_FILES = ("embeddings.pde", "embeddings.manifest.json", "optimizer.pds", "train_state.json")


def checkpoint_bytes(cfg, which="last"):
    d = pipeline.checkpoint_dir(cfg, which)
    return {name: (d / name).read_bytes() for name in CKPT_FILES}


def run_log(cfg):
    rows = [json.loads(l) for l in (cfg.output_dir / "run_log.jsonl").read_text().splitlines()]
    for r in rows:
        r.pop("wall_time")
    return rows


@pytest.fixture
def world(tmp_path):
    w, path = tiny_world(tmp_path)
    cfg = load_config(path)
    pipeline.label(cfg)
    return w, cfg


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            config_from_dict({"sampler": {"bogus": 1}})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            config_from_dict({"optimizer": {"decay": 2.0}})
        with pytest.raises(ConfigError):
            config_from_dict({"sampler": {"plan": [1, 1, 1]}})

    def test_bad_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.json")
        (tmp_path / "c.json").write_text("{oops")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")

    def test_paths_relative_to_config(self, tmp_path):
        (tmp_path / "c.json").write_text("{}")
        cfg = load_config(tmp_path / "c.json")
        assert cfg.path("catalog") == tmp_path / "catalog.pde"
        assert cfg.cache_path() == tmp_path / "run" / "teacher_cache.jsonl"

    def test_defaults(self):
        cfg = config_from_dict({})
        assert cfg.optimizer.lr0 == 1e-6 and cfg.sampler.groups_per_step == 1000
        assert cfg.optimizer.micro_batch * cfg.optimizer.accumulation_steps == 500
        assert cfg.micro_batch_mismatch()


class TestLabel:
    def test_winners_are_argmax_and_rerun_is_free(self, tmp_path):
        w, path = tiny_world(tmp_path, n_images=8, n_val=4, n_test=4)
        cfg = load_config(path)
        out = pipeline.label(cfg)
        teacher = w.teacher()
        for split in ("val", "test"):
            for lab in out[split]:
                util = [teacher.utility(lab.persona_id, i) for i in w.image_ids]
                assert lab.winner_id == w.image_ids[int(np.argmax(util))]
                assert lab.comparisons == 7
        cache = cfg.cache_path().read_text().splitlines()
        again = pipeline.label(cfg)
        assert cfg.cache_path().read_text().splitlines() == cache
        assert [l.to_json() for l in again["val"]] == [l.to_json() for l in out["val"]]

    def test_rerun_makes_no_teacher_calls(self, tmp_path, monkeypatch):
        _, path = tiny_world(tmp_path, n_images=8, n_val=3, n_test=3)
        cfg = load_config(path)
        pipeline.label(cfg)
        calls = []
        real = pipeline.build_teacher

        def counting(c):
            t = real(c)
            orig = t.rank
            t.rank = lambda req: calls.append(req) or orig(req)
            return t

        monkeypatch.setattr(pipeline, "build_teacher", counting)
        pipeline.label(cfg)
        assert calls == []

    def test_bye_accounting_logged(self, tmp_path, caplog):
        _, path = tiny_world(tmp_path, n_images=12, n_val=2, n_test=2)
        with caplog.at_level(logging.INFO, logger="prefdistill.pipeline"):
            pipeline.label(load_config(path))
        assert "4 byes" in caplog.text and "11 comparisons" in caplog.text

    def test_catalog_subset(self, tmp_path):
        _, path = tiny_world(tmp_path, label={"catalog_size": 16, "splits": ["val"]})
        out = pipeline.label(load_config(path))
        assert all(l.n == 16 and l.comparisons == 15 for l in out["val"])


class TestTrain:
    def test_dry_run_has_no_side_effects(self, world):
        _, cfg = world
        cache_before = cfg.cache_path().read_bytes()
        out = pipeline.train(cfg, dry_run=True)
        assert out["teacher_calls_per_step"] == 20 and out["max_teacher_calls"] == 80
        assert cfg.cache_path().read_bytes() == cache_before
        assert not (cfg.output_dir / "checkpoints").exists()

    def test_budget_and_log(self, world):
        _, cfg = world
        res = pipeline.train(cfg)
        rows = run_log(cfg)
        assert [r["step"] for r in rows] == [1, 2, 3, 4]
        assert [r["teacher_calls"] for r in rows] == [20, 40, 60, 80]
        assert res.teacher_calls == 80
        assert set(rows[0]) == {"step", "loss", "lr", "teacher_calls", "cache_hits", "val_mean_percentile"}
        assert rows[1]["lr"] == pytest.approx(0.3 * 0.95)

    def test_deterministic(self, world):
        _, cfg = world
        pipeline.train(cfg)
        first, log1 = checkpoint_bytes(cfg), run_log(cfg)
        best1 = checkpoint_bytes(cfg, "best")
        cfg.cache_path().unlink()
        pipeline.train(cfg)
        assert checkpoint_bytes(cfg) == first
        assert checkpoint_bytes(cfg, "best") == best1
        assert run_log(cfg) == log1

    @pytest.mark.parametrize("kill_at", [0, 1, 3])
    def test_resume_is_bit_identical(self, world, kill_at):
        _, cfg = world
        pipeline.train(cfg)
        reference = checkpoint_bytes(cfg)
        ref_log = run_log(cfg)
        with pytest.raises(ResumableAbort):
            pipeline.train(cfg, fail_at_step=kill_at)
        assert (cfg.output_dir / "RESUMABLE").exists()
        res = pipeline.train(cfg, resume=True)
        assert checkpoint_bytes(cfg) == reference
        # cache hits legitimately differ: the resumed run finds earlier rankings in the cache
        strip = lambda rows: [{k: v for k, v in r.items() if k != "cache_hits"} for r in rows]
        assert strip(run_log(cfg)) == strip(ref_log)
        assert res.teacher_calls == 80
        assert not (cfg.output_dir / "RESUMABLE").exists()

    def test_resume_without_checkpoint_starts_fresh(self, world):
        _, cfg = world
        res = pipeline.train(cfg, resume=True)
        assert res.steps == 4

    def test_early_stop_patience(self, tmp_path):
        _, path = tiny_world(tmp_path, optimizer={"lr0": 0.0}, max_steps=50, patience=3)
        cfg = load_config(path)
        pipeline.label(cfg)
        res = pipeline.train(cfg)
        # constant metric: baseline plus three non-improving evaluations
        assert res.stopped_early and res.steps == 3

    def test_requires_labels(self, tmp_path):
        _, path = tiny_world(tmp_path)
        with pytest.raises(ConfigError):
            pipeline.train(load_config(path))

    def test_figure_written(self, tmp_path):
        _, path = tiny_world(tmp_path, figures=True)
        cfg = load_config(path)
        pipeline.label(cfg)
        pipeline.train(cfg)
        assert (cfg.output_dir / "training_curves.png").stat().st_size > 0


class TestEvalRetrieve:
    def ideal_checkpoint(self, w, cfg):
        d = cfg.output_dir / "ideal"
        d.mkdir(parents=True)
        save_embeddings(w.ideal_store(), d / "embeddings.pde")
        return d

    def test_ideal_student_scores_100(self, world):
        w, cfg = world
        d = self.ideal_checkpoint(w, cfg)
        rep = pipeline.evaluate(cfg, checkpoint=str(d))
        assert rep.mean == 100.0 and rep.n_personas == 6
        saved = MetricReport.from_json((cfg.output_dir / "report_test.json").read_text())
        assert saved == rep

    def test_eval_never_calls_teacher(self, world):
        w, cfg = world
        pipeline.train(cfg)
        for name in ("hidden_personas.pde", "hidden_images.pde"):
            (cfg.resolve(name)).unlink()
        rep = pipeline.evaluate(cfg)
        assert 0 <= rep.mean <= 100
        assert pipeline.retrieve(cfg, "test-0000", 3).ids

    def test_retrieve_ideal_top1_is_teacher_argmax(self, world):
        w, cfg = world
        d = self.ideal_checkpoint(w, cfg)
        teacher = w.teacher()
        for p in w.personas["test"]:
            res = pipeline.retrieve(cfg, p.id, 1, checkpoint=str(d))
            assert res.ids == [teacher.argmax(p.id, w.image_ids)]

    def test_retrieve_errors(self, world):
        w, cfg = world
        pipeline.train(cfg)
        with pytest.raises(UnknownId):
            pipeline.retrieve(cfg, "nobody", 3)
        with pytest.raises(KOutOfRange):
            pipeline.retrieve(cfg, "test-0000", 65)

    def test_histogram_written(self, tmp_path):
        w, path = tiny_world(tmp_path, figures=True)
        cfg = load_config(path)
        pipeline.label(cfg)
        pipeline.train(cfg)
        pipeline.evaluate(cfg)
        assert (cfg.output_dir / "percentiles_test.png").stat().st_size > 0
