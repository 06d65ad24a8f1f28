"""Training loop, evaluation, the circular-vs-graph ablation and timing benchmarks."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import synthdata as sd
from .geometry import chamfer_distance, polygon_iou
from .pipeline import (
    N_VERTICES,
    build_targets,
    deform_batch,
    propose_batch,
    segment_batch,
    training_loss_batch,
)
from .snakenet import SnakeNet, SnakeNetConfig

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "deepsnake-checkpoint"


class CheckpointError(ValueError):
    """Checkpoint missing, unreadable or incompatible with the requested config."""


@dataclass
class TrainConfig:
    data_seed: int = 0
    train_count: int = 2000
    eval_count: int = 200
    kind_mix: dict = field(default_factory=lambda: {k: 1.0 for k in sd.KINDS})
    max_rel: float = 0.1
    epochs: int = 8
    batch_size: int = 8
    lr: float = 1e-4
    lr_decay_epochs: tuple = (4, 6)
    lr_decay: float = 0.5
    iterations: int = 3
    rng_seed: int = 0
    teacher_forcing: bool = True
    net: SnakeNetConfig = field(default_factory=SnakeNetConfig)
    out_dir: str = "run"
    cache_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)

    def lr_at(self, epoch):
        """Learning rate for 0-based ``epoch``: halved at each decay epoch reached."""
        return self.lr * self.lr_decay ** sum(epoch >= e for e in self.lr_decay_epochs)

    def to_dict(self):
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["net"] = SnakeNetConfig(**d["net"])
        d["lr_decay_epochs"] = tuple(d["lr_decay_epochs"])
        return cls(**d)


@dataclass
class Models:
    proposal: SnakeNet
    deform: SnakeNet

    def params(self):
        out = {f"proposal.{k}": v for k, v in self.proposal.params.items()}
        out.update({f"deform.{k}": v for k, v in self.deform.params.items()})
        return out

    def state_dict(self):
        return {**self.proposal.state_dict("proposal."), **self.deform.state_dict("deform.")}

    def astype(self, dtype):
        return Models(self.proposal.astype(dtype), self.deform.astype(dtype))


def init_models(net_config: SnakeNetConfig, seed) -> Models:
    return Models(SnakeNet(net_config, seed=seed * 2 + 1), SnakeNet(net_config, seed=seed * 2 + 2))


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, models: Models, config: TrainConfig, opt: ad.Adam | None = None,
                    epoch=0, step=0, extra=None):
    tensors = models.state_dict()
    meta = {"kind": CHECKPOINT_KIND, "config": config.to_dict(), "epoch": epoch, "step": step,
            "extra": extra or {}}
    if opt is not None:
        meta["adam_t"] = opt.state["t"]
        for k in opt.params:
            tensors[f"adam.m.{k}"] = opt.state["m"][k]
            tensors[f"adam.v.{k}"] = opt.state["v"][k]
    ad.save_tensors(path, tensors, meta)


def load_checkpoint(path, expect_net: SnakeNetConfig | None = None):
    """Return ``(models, config, tensors, meta)``; raises :class:`CheckpointError`."""
    try:
        tensors, meta = ad.load_tensors(path)
    except OSError:
        raise
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not a deepsnake checkpoint")
    try:
        config = TrainConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad config in checkpoint: {e}") from e
    if expect_net is not None and expect_net != config.net:
        raise CheckpointError(f"checkpoint network {config.net} does not match {expect_net}")
    models = init_models(config.net, 0)
    try:
        models.proposal.load_state_dict(tensors, "proposal.")
        models.deform.load_state_dict(tensors, "deform.")
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e)) from e
    return models, config, tensors, meta


# ------------------------------------------------------------------- eval


@dataclass
class EvalReport:
    iterations: int
    rows: list  # one dict per iteration 1..T
    initial: dict  # same metrics for the octagon (iteration 0)
    per_sample: list  # dicts: seed, iteration, iou, chamfer, extreme_err_px
    timing_ms: dict

    def mean_iou(self, iteration):
        return self.initial["mean_iou"] if iteration == 0 else self.rows[iteration - 1]["mean_iou"]

    def csv(self):
        return _csv_text(["iteration", "mean_iou", "median_iou", "chamfer", "extreme_err_px"], self.rows)

    def per_sample_csv(self):
        return _csv_text(["seed", "iteration", "iou", "chamfer", "extreme_err_px"], self.per_sample)


def _csv_text(fields, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in fields})
    return buf.getvalue()


def write_text(path, text):
    ad.atomic_write_bytes(path, text.encode())


def evaluate(models: Models, samples, iterations, use_jitter=True, batch_size=32) -> EvalReport:
    """Segment every sample and aggregate IoU / Chamfer / extreme-point error per iteration."""
    per_iter = {t: {"iou": [], "chamfer": []} for t in range(iterations + 1)}
    ex_err, per_sample = [], []
    t_prop = t_def = 0.0
    for i in range(0, len(samples), batch_size):
        batch = samples[i:i + batch_size]
        boxes = [s.jittered_box if use_jitter else s.gt_box for s in batch]
        Fs = [s.features for s in batch]
        t0 = time.perf_counter()
        props = propose_batch(boxes, Fs, models.proposal)
        t1 = time.perf_counter()
        traces = deform_batch(np.stack([p.octagon128 for p in props]), Fs, models.deform, iterations)
        t2 = time.perf_counter()
        t_prop += t1 - t0
        t_def += t2 - t1
        for s, p, tr in zip(batch, props, traces):
            tg = build_targets(s.gt_polygon)
            err = float(np.linalg.norm(p.predicted_extremes.as_array() - tg.gt_extremes.as_array(), axis=1).mean())
            ex_err.append(err)
            for t, c in enumerate(tr.contours):
                iou = polygon_iou(c, s.gt_polygon)
                ch = chamfer_distance(c, tg.gt_contour128)
                per_iter[t]["iou"].append(iou)
                per_iter[t]["chamfer"].append(ch)
                if t > 0:
                    per_sample.append({"seed": s.seed, "iteration": t, "iou": iou, "chamfer": ch,
                                       "extreme_err_px": err})
    mean_ex = float(np.mean(ex_err)) if ex_err else float("nan")

    def agg(t):
        ious = np.asarray(per_iter[t]["iou"])
        return {"iteration": t, "mean_iou": float(ious.mean()), "median_iou": float(np.median(ious)),
                "chamfer": float(np.mean(per_iter[t]["chamfer"])), "extreme_err_px": mean_ex}

    n = max(len(samples), 1)
    timing = {"proposal_ms_per_sample": 1e3 * t_prop / n,
              "deform_ms_per_sample_iteration": 1e3 * t_def / n / max(iterations, 1)}
    return EvalReport(iterations, [agg(t) for t in range(1, iterations + 1)], agg(0), per_sample, timing)


# ------------------------------------------------------------------ train


@dataclass
class TrainResult:
    models: Models
    final_checkpoint: str
    best_checkpoint: str
    log_path: str
    history: list  # per-epoch dicts
    best_iou: float


LOG_FIELDS_BASE = ["step", "epoch", "lr", "loss_ex"]


def _log_fields(iterations):
    return LOG_FIELDS_BASE + [f"loss_iter{t}" for t in range(1, iterations + 1)] + ["eval_iou"]


def load_datasets(config: TrainConfig):
    train_seeds = sd.sample_seeds(config.data_seed, config.train_count, "train")
    eval_seeds = sd.sample_seeds(config.data_seed, config.eval_count, "eval")
    train = sd.load_or_make(config.cache_dir, train_seeds, config.kind_mix, config.max_rel)
    evals = sd.load_or_make(config.cache_dir, eval_seeds, config.kind_mix, config.max_rel)
    return train, evals


def train(config: TrainConfig, data=None, resume: str | None = None, eval_fn=None) -> TrainResult:
    """Adam over the summed training loss; deterministic for a fixed config.

    Writes ``train_log.csv``, ``final.ckpt`` and ``best.ckpt`` (by eval IoU at
    the trained iteration count) into ``config.out_dir``.  ``resume`` continues
    from an end-of-epoch checkpoint.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    train_set, eval_set = data if data is not None else load_datasets(config)
    models = init_models(config.net, config.rng_seed)
    opt = ad.Adam(models.params(), lr=config.lr)
    start_epoch, step, rows, history, best_iou = 0, 0, [], [], -1.0
    if resume is not None:
        loaded, _, tensors, meta = load_checkpoint(resume, expect_net=config.net)
        models.proposal.load_state_dict(tensors, "proposal.")
        models.deform.load_state_dict(tensors, "deform.")
        opt.state["t"] = meta["adam_t"]
        for k in opt.params:
            opt.state["m"][k] = tensors[f"adam.m.{k}"].copy()
            opt.state["v"][k] = tensors[f"adam.v.{k}"].copy()
        start_epoch, step = meta["epoch"], meta["step"]
        best_iou = meta["extra"].get("best_iou", -1.0)
        rows = meta["extra"].get("log_rows", [])
        history = meta["extra"].get("history", [])
    log_path = os.path.join(config.out_dir, "train_log.csv")
    final_path = os.path.join(config.out_dir, "final.ckpt")
    best_path = os.path.join(config.out_dir, "best.ckpt")
    fields = _log_fields(config.iterations)
    n = len(train_set)
    for epoch in range(start_epoch, config.epochs):
        opt.lr = config.lr_at(epoch)
        order = np.random.default_rng([config.rng_seed, epoch]).permutation(n)
        t0 = time.perf_counter()
        for b in range(0, n, config.batch_size):
            idx = order[b:b + config.batch_size]
            batch = [train_set[i] for i in idx]
            try:
                with ad.Tape() as tape:
                    loss, parts = training_loss_batch(batch, models.proposal, models.deform,
                                                      config.iterations, config.teacher_forcing)
                    tape.backward(loss)
            except FloatingPointError as e:
                dump = os.path.join(config.out_dir, "nonfinite_batch.txt")
                write_text(dump, " ".join(str(train_set[i].seed) for i in idx) + "\n")
                raise FloatingPointError(f"non-finite loss at step {step}; batch seeds in {dump}") from e
            opt.step()
            opt.zero_grad()
            step += 1
            row = {"step": step, "epoch": epoch, "lr": opt.lr, "loss_ex": parts["loss_ex"], "eval_iou": ""}
            for t, v in enumerate(parts["loss_iter"], 1):
                row[f"loss_iter{t}"] = v
            rows.append(row)
        report = (eval_fn or evaluate)(models, eval_set, config.iterations)
        iou = report.mean_iou(config.iterations)
        rows[-1]["eval_iou"] = iou
        history.append({"epoch": epoch, "lr": opt.lr, "eval_iou": iou,
                        "eval_iou_per_iter": [report.mean_iou(t) for t in range(config.iterations + 1)]})
        log.info("epoch %d lr %.2e eval IoU %.4f (%.1fs)", epoch, opt.lr, iou, time.perf_counter() - t0)
        write_text(log_path, _csv_text(fields, rows))
        improved = iou > best_iou
        best_iou = max(best_iou, iou)
        extra = {"best_iou": best_iou, "history": history, "log_rows": rows}
        save_checkpoint(final_path, models, config, opt, epoch + 1, step, extra)
        if improved:
            save_checkpoint(best_path, models, config, None, epoch + 1, step, {"best_iou": best_iou})
    return TrainResult(models, final_path, best_path, log_path, history, best_iou)


# ---------------------------------------------------------------- ablation


def ablate(config: TrainConfig, seeds=(0, 1, 2), max_iterations=5, data=None):
    """Paired circular/graph training; mean IoU table of shape (2, max_iterations).

    Both variants of a pair share the data, the init seed and the shuffle order.
    Returns ``(table, per_seed)`` where ``table[kind]`` lists mean IoU at
    inference iterations ``1..max_iterations`` averaged over seeds.
    """
    data = data if data is not None else load_datasets(config)
    per_seed = {"circular": [], "graph": []}
    for s in seeds:
        for kind in ("circular", "graph"):
            cfg = replace(config, rng_seed=s, net=replace(config.net, conv_kind=kind),
                          out_dir=os.path.join(config.out_dir, f"{kind}_seed{s}"))
            res = train(cfg, data=data, eval_fn=_quick_eval)
            rep = evaluate(res.models, data[1], max_iterations)
            per_seed[kind].append([rep.mean_iou(t) for t in range(1, max_iterations + 1)])
    table = {k: np.mean(np.asarray(v), axis=0).tolist() for k, v in per_seed.items()}
    return table, per_seed


def _quick_eval(models, samples, iterations):
    return evaluate(models, samples[: min(len(samples), 32)], iterations)


def ablation_csv(table):
    n = len(next(iter(table.values())))
    rows = [{"conv_kind": k, **{f"iter{t}": v[t - 1] for t in range(1, n + 1)}} for k, v in table.items()]
    return _csv_text(["conv_kind"] + [f"iter{t}" for t in range(1, n + 1)], rows)


# ------------------------------------------------------------------- bench


BENCH_STAGES = ("proposal", "deform_iteration", "segment_total")


def bench(models: Models, samples, n_repeats=50, warmup=5, iterations=3, dtype=np.float32):
    """Median / p95 wall-clock per pipeline stage for one object at a time.

    Each row also carries the raw per-repeat times (``times_ms``), which the
    CSV leaves out.
    """
    m = models.astype(dtype)
    s = samples[0]
    F = [s.features]
    box = [s.jittered_box]
    init = propose_batch(box, F, m.proposal)[0].octagon128[None]

    def run_prop():
        propose_batch(box, F, m.proposal)

    def run_iter():
        deform_batch(init, F, m.deform, 1)

    def run_all():
        segment_batch(box, F, m.proposal, m.deform, iterations)

    rows = []
    for stage, fn, nv in (("proposal", run_prop, 40), ("deform_iteration", run_iter, N_VERTICES),
                          ("segment_total", run_all, N_VERTICES)):
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(n_repeats):
            t0 = time.perf_counter()
            fn()
            times.append(1e3 * (time.perf_counter() - t0))
        rows.append({"stage": stage, "n_vertices": nv, "median_ms": float(np.median(times)),
                     "p95_ms": float(np.percentile(times, 95)), "times_ms": times})
    return rows


def bench_csv(rows):
    return _csv_text(["stage", "n_vertices", "median_ms", "p95_ms"], rows)

