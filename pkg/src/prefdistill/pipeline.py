"""Training, labelling, evaluation and retrieval runs driven by a RunConfig."""

from __future__ import annotations

import json
import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plots
from .btloss import RankedGroup, batch_loss_grad
from .config import RunConfig
from .embeddings import (
    CatalogStore,
    load_embeddings,
    load_personas,
    random_unit,
    read_matrix,
    save_embeddings,
)
from .errors import ConfigError, DimensionMismatch, ResumableAbort, TeacherError, UnknownId
from .metrics import MetricReport, RetrievalResult, mean_percentile, top_k
from .optim import (
    AdamWState,
    EarlyStopper,
    accumulate_sparse,
    apply_step,
    load_state,
    lr_at,
    save_state,
)
from .embeddings import score_all
from .rng import substream
from .sampler import sample_step
from .teacher import CachedTeacher, EndpointConfig, HTTPTeacher, SyntheticTeacher, TeacherRequest
from .tournament import label_set, read_labels

log = logging.getLogger(__name__)

RESUME_MARKER = "RESUMABLE"
RUN_LOG = "run_log.jsonl"


# ---------------------------------------------------------------------------
# loading helpers
# ---------------------------------------------------------------------------


def _require(path: Path, what: str) -> Path:
    if path is None or not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def load_split(cfg: RunConfig, split: str, dim: int):
    path = _require(cfg.path(f"personas_{split}"), f"{split} persona file")
    return load_personas(path, dim=dim, seed=cfg.seed)


def init_student(cfg: RunConfig) -> CatalogStore:
    path = _require(cfg.path("catalog"), "catalog embeddings")
    if cfg.student.init == "import":
        store = load_embeddings(path)
        if store.dim != cfg.student.dim:
            raise ConfigError(f"catalog dim {store.dim} != student.dim {cfg.student.dim}")
        return store
    ids, _, _ = read_matrix(path)
    raw = random_unit(substream(cfg.seed, "init"), len(ids), cfg.student.dim).astype(np.float32)
    return CatalogStore(ids, raw)


def catalog_ids(cfg: RunConfig) -> list:
    ids, _, _ = read_matrix(_require(cfg.path("catalog"), "catalog embeddings"))
    return ids


def build_teacher(cfg: RunConfig):
    tc = cfg.teacher
    inner = None
    if tc.kind == "synthetic":
        s = tc.synthetic
        inner = SyntheticTeacher.from_files(
            _require(cfg.resolve(s.persona_hidden), "hidden persona vectors"),
            _require(cfg.resolve(s.image_hidden), "hidden image vectors"),
            tau=s.tau,
            seed=s.seed,
        )
    elif tc.kind == "http":
        if not tc.http.url:
            raise ConfigError("teacher.http.url is required for an HTTP teacher")
        inner = HTTPTeacher(EndpointConfig(**vars(tc.http)))
    cache = cfg.cache_path()
    if tc.kind == "replay":
        _require(cache, "replay cache")
    if cache is None:
        return inner
    cache.parent.mkdir(parents=True, exist_ok=True)
    return CachedTeacher(inner, cache)


def image_refs(cfg: RunConfig):
    p = cfg.path("image_refs")
    return json.loads(_require(p, "image reference map").read_text()) if p else None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(directory: Path, store: CatalogStore, state: AdamWState, train_state: dict):
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    save_embeddings(store, tmp / "embeddings.pde")
    save_state(state, tmp / "optimizer.pds")
    (tmp / "train_state.json").write_text(json.dumps(train_state, indent=2, sort_keys=True) + "\n")
    old = directory.with_name(directory.name + ".old")
    if directory.exists():
        directory.rename(old)
    tmp.rename(directory)
    if old.exists():
        shutil.rmtree(old)


def load_checkpoint(directory: Path):
    directory = Path(directory)
    store = load_embeddings(directory / "embeddings.pde")
    state = load_state(directory / "optimizer.pds")
    train_state = json.loads((directory / "train_state.json").read_text())
    return store, state, train_state


def checkpoint_dir(cfg: RunConfig, which: str) -> Path:
    if which in ("best", "last"):
        return cfg.output_dir / "checkpoints" / which
    return cfg.resolve(which)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    records: list
    stopper: EarlyStopper
    initial_metric: float
    steps: int
    stopped_early: bool
    teacher_calls: int
    cache_hits: int = 0
    output_dir: Path = field(default=None)


def budget(cfg: RunConfig) -> dict:
    G = cfg.sampler.groups_per_step
    pairs = cfg.sampler.group_size * (cfg.sampler.group_size - 1) // 2
    sizes = [len(c) for c in np.array_split(np.arange(G), cfg.optimizer.accumulation_steps)]
    return {
        "groups_per_step": G,
        "teacher_calls_per_step": G,
        "pairs_per_step": G * pairs,
        "micro_batch_sizes": sorted(set(sizes)),
        "accumulation_steps": cfg.optimizer.accumulation_steps,
        "max_steps": cfg.max_steps,
        "max_teacher_calls": G * cfg.max_steps,
        "policy": cfg.sampler.policy,
        "lr0": cfg.optimizer.lr0,
    }


def _rank_all(teacher, requests):
    workers = max(1, int(getattr(teacher, "max_parallel", 1)))
    if workers > 1 and len(requests) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(teacher.rank, requests))
    return [teacher.rank(r) for r in requests]


def train(cfg: RunConfig, resume: bool = False, dry_run: bool = False, fail_at_step=None) -> TrainResult | dict:
    """Run the distillation loop; returns a TrainResult (or the budget dict for a dry run).

    ``fail_at_step`` injects an abort inside that step (after teacher calls,
    before the update) to exercise resumability.
    """
    if cfg.micro_batch_mismatch():
        log.warning(
            "optimizer.micro_batch * accumulation_steps = %d != groups_per_step = %d;"
            " each step's groups are split into %d micro-batches",
            cfg.optimizer.micro_batch * cfg.optimizer.accumulation_steps,
            cfg.sampler.groups_per_step,
            cfg.optimizer.accumulation_steps,
        )
    store = init_student(cfg)
    train_personas = load_split(cfg, "train", store.dim)
    val_personas = {p.id: p for p in load_split(cfg, "val", store.dim)}
    val_labels = read_labels(_require(cfg.path("labels_val"), "validation labels"))
    if not val_labels:
        raise ConfigError("validation label file is empty; run `prefdistill label` first")
    if dry_run:
        return budget(cfg)

    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    teacher = build_teacher(cfg)
    refs = image_refs(cfg)
    last_dir, best_dir = checkpoint_dir(cfg, "last"), checkpoint_dir(cfg, "best")
    log_path = out / RUN_LOG

    def validate():
        return mean_percentile(val_labels, store, val_personas).mean

    if resume and (last_dir / "train_state.json").exists():
        store, state, ts = load_checkpoint(last_dir)
        if ts.get("seed") != cfg.seed:
            raise ConfigError(f"checkpoint seed {ts.get('seed')} != config seed {cfg.seed}")
        stopper = EarlyStopper.from_dict(ts["early_stop"])
        initial = ts["initial_metric"]
        teacher_calls = ts["teacher_calls"]
        records = []
        if log_path.exists():
            records = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
            records = [r for r in records if r["step"] <= state.t]
        log_path.write_text("".join(json.dumps(r) + "\n" for r in records))
        log.info("resumed at step %d", state.t)
    else:
        for stale in (last_dir, best_dir, log_path, out / RESUME_MARKER):
            if stale.is_dir():
                shutil.rmtree(stale)
            elif stale.exists():
                stale.unlink()
        state = AdamWState.zeros(store.size, store.dim)
        stopper = EarlyStopper(patience=cfg.patience)
        initial = validate()
        stopper.update(initial, tag=0)
        teacher_calls = 0
        records = []
        log_path.write_text("")
        ts = _train_state(cfg, state, stopper, initial, teacher_calls)
        save_checkpoint(best_dir, store, state, ts)
        save_checkpoint(last_dir, store, state, ts)

    cache_hits = 0
    t0 = time.perf_counter()
    try:
        while state.t < cfg.max_steps and not stopper.should_stop:
            step = state.t
            sample = sample_step(train_personas, store, cfg.sampler, substream(cfg.seed, "sampling", step))
            requests = [
                TeacherRequest(p.id, p.text, ids,
                               image_refs=tuple(refs[i] for i in ids) if refs else None, step=step)
                for p, ids in sample.groups
            ]
            hits_before = getattr(teacher, "hits", 0)
            rankings = _rank_all(teacher, requests)
            step_hits = getattr(teacher, "hits", 0) - hits_before
            cache_hits += step_hits
            teacher_calls += len(requests)
            groups = [
                RankedGroup(r.persona_id, r.candidates, res.ranking, res.teacher_id, step)
                for r, res in zip(requests, rankings)
            ]
            if fail_at_step is not None and step == fail_at_step:
                raise ResumableAbort(f"injected abort in step {step + 1}")

            personas = {p.id: p for p, _ in sample.groups}
            loss = 0.0
            for chunk in np.array_split(np.arange(len(groups)), cfg.optimizer.accumulation_steps):
                batch = batch_loss_grad([groups[i] for i in chunk], personas, store)
                loss += batch.loss
                accumulate_sparse(state, store, batch.grads)
            lr = lr_at(state.t, cfg.optimizer)
            apply_step(store, state, cfg.optimizer)

            metric = None
            if state.t % cfg.eval_cadence == 0 or state.t == cfg.max_steps:
                metric = validate()
                stopper.update(metric, tag=state.t)
            record = {
                "step": state.t,
                "loss": loss,
                "lr": lr,
                "teacher_calls": teacher_calls,
                "cache_hits": step_hits,
                "val_mean_percentile": metric,
                "wall_time": round(time.perf_counter() - t0, 4),
            }
            records.append(record)
            with open(log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
            ts = _train_state(cfg, state, stopper, initial, teacher_calls)
            if metric is not None and stopper.improved:
                save_checkpoint(best_dir, store, state, ts)
            save_checkpoint(last_dir, store, state, ts)
            log.info("step %d loss %.4f lr %.3g val %s", state.t, loss, lr,
                     "-" if metric is None else f"{metric:.2f}")
    except (TeacherError, ResumableAbort, UnknownId, DimensionMismatch) as exc:
        (out / RESUME_MARKER).write_text(json.dumps({"step": state.t, "error": str(exc)}) + "\n")
        raise

    if (out / RESUME_MARKER).exists():
        (out / RESUME_MARKER).unlink()
    if cfg.figures and records:
        plots.training_curves(records, out / "training_curves.png", initial_metric=initial)
    return TrainResult(records, stopper, initial, state.t, stopper.should_stop, teacher_calls,
                       cache_hits, out)


def _train_state(cfg, state, stopper, initial, teacher_calls) -> dict:
    return {
        "step": state.t,
        "seed": cfg.seed,
        "rng": {"scheme": "sha256(seed:name:step)", "sampling_position": state.t},
        "early_stop": stopper.to_dict(),
        "initial_metric": initial,
        "teacher_calls": teacher_calls,
    }


# ---------------------------------------------------------------------------
# label / eval / retrieve
# ---------------------------------------------------------------------------


def label(cfg: RunConfig) -> dict:
    """Tournament labels for each configured split; returns per-split label lists."""
    ids = catalog_ids(cfg)
    if cfg.label.catalog_size is not None:
        n = cfg.label.catalog_size
        if not 2 <= n <= len(ids):
            raise ConfigError(f"label.catalog_size={n} outside [2, {len(ids)}]")
        pick = np.sort(substream(cfg.seed, "label-entrants").choice(len(ids), size=n, replace=False))
        ids = [ids[i] for i in pick]
    n = len(ids)
    slots = 1 << (n - 1).bit_length()
    if slots != n:
        log.info("%d entrants: %d byes in round 0, %d comparisons per tournament", n, slots - n, n - 1)
    teacher = build_teacher(cfg)
    parallel = min(cfg.label.parallelism, max(1, int(getattr(teacher, "max_parallel", 1))))
    out = {}
    for split in cfg.label.splits:
        personas = load_split(cfg, split, None)
        path = cfg.path(f"labels_{split}") if split != "train" else cfg.output_dir / "labels_train.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        out[split] = label_set(
            personas,
            ids,
            teacher,
            path=path,
            parallelism=parallel,
            shuffle_seed=cfg.seed if cfg.label.shuffle else None,
        )
    return out


def evaluate(cfg: RunConfig, checkpoint=None) -> MetricReport:
    ckpt = checkpoint_dir(cfg, checkpoint or cfg.eval.checkpoint)
    store = load_embeddings(_require(ckpt / "embeddings.pde", "checkpoint embeddings"))
    split = cfg.eval.split
    personas = {p.id: p for p in load_split(cfg, split, store.dim)}
    labels = read_labels(_require(cfg.path(f"labels_{split}"), f"{split} labels"))
    report = mean_percentile(labels, store, personas)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report_{split}.json").write_text(report.to_json() + "\n")
    if cfg.eval.figures and cfg.figures and report.n_personas:
        plots.percentile_histogram(report, out / f"percentiles_{split}.png",
                                   title=f"{split}: mean percentile {report.mean:.2f}")
    return report


def retrieve(cfg: RunConfig, persona_id: str, k: int, checkpoint=None) -> RetrievalResult:
    ckpt = checkpoint_dir(cfg, checkpoint or cfg.eval.checkpoint)
    store = load_embeddings(_require(ckpt / "embeddings.pde", "checkpoint embeddings"))
    for split in ("test", "val", "train"):
        path = cfg.path(f"personas_{split}")
        if path is None or not path.exists():
            continue
        for p in load_personas(path, dim=store.dim, seed=cfg.seed):
            if p.id == persona_id:
                return top_k(score_all(p, store), store.ids, k)
    raise UnknownId(f"unknown persona id {persona_id!r}")
