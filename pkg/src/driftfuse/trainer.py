"""Domain-incremental orchestration: per-task training with warm-up-gated
swapping, task-boundary fusion, domain-id-free evaluation, and the
Avg/Last/forgetting metrics.

Reproducibility model: every random stream is derived from
(config seed, task index, purpose tag), so a run is a pure function of
(stream, config) and can resume from a task-boundary checkpoint without
serializing generator state. A fresh optimizer is created per task; the
task boundary already rewires the intrinsic encoder, so momentum carried
across it would be stale anyway.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .data import DomainFeatureReservoir, DomainStream, FeatureBatch, reservoir_update
from .disentangle import (
    TwoStreamModel,
    build_model,
    disentangle_loss,
    encode,
    infer_logits,
    plain_ce_loss,
    swap_features,
    swap_loss,
    total_loss,
)
from .fusion import FusionConfig, FusionSnapshot, capture_structure, fuse_encoder
from .nn import clip_global_norm, make_optimizer

__all__ = [
    "TrainConfig",
    "AccuracyMatrix",
    "RunReport",
    "TaskStats",
    "NumericalError",
    "init_model",
    "train_task",
    "evaluate",
    "run_sequence",
    "ablate",
    "sweep",
    "ABLATION_ROWS",
    "save_checkpoint",
    "load_checkpoint",
    "resolve_workers",
]

CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    # objective
    q: float = 0.7
    lam: float = 5.0
    warmup_steps: int = 1000
    warmup_per_task: bool = False
    # fusion
    beta: float = 0.1
    mask_mode: str = "elementwise"
    fuse_biases: bool = False
    fusion_init_mode: str = "kaiming"
    # optimization
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs_per_task: int = 30
    batch_size: int = 64
    grad_clip: float = 5.0
    # architecture
    latent_dim: int = 32
    hidden_dim: int = 96
    num_layers: int = 3
    dropout: float = 0.1
    # bookkeeping
    reservoir_capacity: int = 512
    seed: int = 0
    eval_mode: str = "pooled"  # "pooled" | "mean"
    # ablation flags
    disentangle_on: bool = True
    fusion_on: bool = True
    swap_on: bool = True

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError("q must lie in (0, 1]")
        if self.lam < 0.0:
            raise ValueError("lam must be non-negative")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.eval_mode not in ("pooled", "mean"):
            raise ValueError(f"unknown eval_mode {self.eval_mode!r}")
        if self.batch_size < 1 or self.epochs_per_task < 1:
            raise ValueError("batch_size and epochs_per_task must be >= 1")

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            beta=self.beta,
            mask_mode=self.mask_mode,
            fuse_biases=self.fuse_biases,
            init_mode=self.fusion_init_mode,
        )


@dataclass
class AccuracyMatrix:
    """Stage-by-domain accuracy grid over all train and unseen domains."""

    acc: np.ndarray          # (T, T+U)
    stage_acc: np.ndarray    # (T,) pooled over seen-domain test sets
    stage_acc_mean: np.ndarray  # (T,) unweighted mean over seen domains

    @property
    def num_tasks(self) -> int:
        return self.acc.shape[0]

    @property
    def num_domains(self) -> int:
        return self.acc.shape[1]


@dataclass
class RunReport:
    avg: float
    last: float
    forgetting: list[float]
    unseen_acc: float | None
    wall_clock_sec: float
    config: dict
    seed: int

    def to_dict(self) -> dict:
        return {
            "avg": self.avg,
            "last": self.last,
            "forgetting": self.forgetting,
            "unseen_acc": self.unseen_acc,
            "wall_clock_sec": self.wall_clock_sec,
            "config": self.config,
            "seed": self.seed,
        }


@dataclass
class TaskStats:
    losses: np.ndarray
    steps: int
    swap_steps: int


# rng purpose tags; streams are independent so toggling one mechanism
# (e.g. swapping) cannot perturb another's draws
_TAG_SHUFFLE, _TAG_DROPOUT, _TAG_SWAP, _TAG_RESERVOIR, _TAG_FUSION = range(5)


def _stream(seed: int, task: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, task, tag])


def init_model(cfg: TrainConfig, feature_dim: int, num_classes: int) -> TwoStreamModel:
    rng = np.random.default_rng([cfg.seed, 3])
    return build_model(
        feature_dim,
        cfg.latent_dim,
        cfg.hidden_dim,
        num_classes,
        rng,
        num_layers=cfg.num_layers,
        dropout_rate=cfg.dropout,
    )


def train_task(
    model: TwoStreamModel,
    reservoir: DomainFeatureReservoir | None,
    snapshot: FusionSnapshot | None,
    train_split: FeatureBatch,
    cfg: TrainConfig,
    task_index: int,
    global_step: int,
) -> tuple[TwoStreamModel, DomainFeatureReservoir, FusionSnapshot, int, TaskStats]:
    """Train one task; returns the model, the rebuilt donor reservoir, the
    fresh QR snapshot of the intrinsic encoder, the advanced global step
    counter and per-step loss statistics."""
    n = len(train_split)
    if n == 0:
        raise ValueError("task training split is empty")
    fcfg = cfg.fusion_config()
    if cfg.fusion_on and task_index >= 1:
        if snapshot is None:
            raise ValueError("fusion enabled but no snapshot from the previous task")
        model = fuse_encoder(model, snapshot, _stream(cfg.seed, task_index, _TAG_FUSION), fcfg)

    rng_shuffle = _stream(cfg.seed, task_index, _TAG_SHUFFLE)
    rng_drop = _stream(cfg.seed, task_index, _TAG_DROPOUT)
    rng_swap = _stream(cfg.seed, task_index, _TAG_SWAP)
    rng_res = _stream(cfg.seed, task_index, _TAG_RESERVOIR)

    new_res = DomainFeatureReservoir(cfg.reservoir_capacity, task_index)
    optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    params = model.parameter_arrays()
    h_all = train_split.features.astype(np.float64)
    y_all = train_split.labels

    losses: list[float] = []
    swap_steps = 0
    step_in_task = 0
    donor_pool = reservoir if (reservoir is not None and len(reservoir) > 0) else None

    for _ in range(cfg.epochs_per_task):
        order = rng_shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            enc, cache = encode(model, h_all[idx], mode="train", rng=rng_drop, labels=y_all[idx])

            if cfg.disentangle_on:
                l_dis, grads, s = disentangle_loss(model, enc, cache, cfg.q)
                warm_ref = step_in_task if cfg.warmup_per_task else global_step
                l_sp = 0.0
                swap_active = False
                if cfg.swap_on and cfg.lam > 0.0 and warm_ref >= cfg.warmup_steps:
                    pairing = swap_features(enc, donor_pool, rng_swap)
                    if pairing is not None:
                        l_sp, g_sp = swap_loss(model, enc, cache, pairing, cfg.q, s)
                        grads.add_scaled(g_sp, cfg.lam)
                        swap_active = True
                        swap_steps += 1
                l_step = total_loss(l_dis, l_sp, cfg.lam, swap_active)
            else:
                l_step, grads = plain_ce_loss(model, enc, cache)

            if not np.isfinite(l_step):
                raise NumericalError(
                    f"non-finite loss in task {task_index} at global step {global_step} "
                    f"(batch seed ({cfg.seed}, {task_index}, {global_step}))"
                )
            reservoir_update(new_res, enc, rng_res)
            grad_arrays = grads.arrays()
            clip_global_norm(grad_arrays, cfg.grad_clip)
            optimizer.step(params, grad_arrays)
            losses.append(l_step)
            global_step += 1
            step_in_task += 1

    new_snapshot = capture_structure(model.encoder_i, task_index, fcfg.fuse_biases)
    return model, new_res, new_snapshot, global_step, TaskStats(np.array(losses), len(losses), swap_steps)


def _eval_counts(model: TwoStreamModel, split: FeatureBatch, batch: int = 1024) -> tuple[int, int]:
    correct = 0
    feats = split.features
    labels = split.labels
    for start in range(0, len(split), batch):
        h = np.asarray(feats[start : start + batch], dtype=np.float64)
        pred = infer_logits(model, h).argmax(axis=1)
        correct += int((pred == labels[start : start + batch]).sum())
    return correct, len(split)


def evaluate(model: TwoStreamModel, test_split: FeatureBatch) -> float:
    """Accuracy of the intrinsic head; the split's domain ids are never read."""
    if len(test_split) == 0:
        raise ValueError("empty test split")
    correct, n = _eval_counts(model, test_split)
    return correct / n


def run_sequence(
    stream: DomainStream,
    cfg: TrainConfig,
    checkpoint_path: str | None = None,
    resume: bool = False,
    stop_after_task: int | None = None,
) -> tuple[AccuracyMatrix, RunReport]:
    """Train the full domain sequence and measure the accuracy grid.

    With ``checkpoint_path`` a checkpoint is written after every task;
    ``resume=True`` continues from it bit-for-bit. ``stop_after_task``
    ends the run early (rows beyond it stay zero), which together with
    resume exercises interruption."""
    t_start = time.perf_counter()
    num_tasks = stream.num_tasks
    num_domains = num_tasks + len(stream.unseen)
    test_splits = stream.all_test_splits()

    model = init_model(cfg, stream.feature_dim, stream.num_classes)
    reservoir: DomainFeatureReservoir | None = None
    snapshot: FusionSnapshot | None = None
    first_task = 0
    global_step = 0
    acc = np.zeros((num_tasks, num_domains))
    stage_acc = np.zeros(num_tasks)
    stage_acc_mean = np.zeros(num_tasks)

    if resume:
        if not checkpoint_path or not os.path.exists(checkpoint_path):
            raise ValueError("resume requested but checkpoint_path does not exist")
        state = load_checkpoint(checkpoint_path)
        if state["config"] != asdict(cfg):
            raise ValueError("checkpoint was produced by a different config")
        model = state["model"]
        reservoir = state["reservoir"]
        snapshot = state["snapshot"]
        first_task = state["completed_tasks"]
        global_step = state["global_step"]
        acc[: first_task] = state["acc"][: first_task]
        stage_acc[: first_task] = state["stage_acc"][: first_task]
        stage_acc_mean[: first_task] = state["stage_acc_mean"][: first_task]

    for t in range(first_task, num_tasks):
        train_split, _ = stream.tasks[t]
        model, reservoir, snapshot, global_step, _ = train_task(
            model, reservoir, snapshot, train_split, cfg, t, global_step
        )
        counts = [_eval_counts(model, split) for split in test_splits]
        for d, (correct, total) in enumerate(counts):
            acc[t, d] = correct / total
        seen = counts[: t + 1]
        stage_acc[t] = sum(c for c, _ in seen) / sum(n for _, n in seen)
        stage_acc_mean[t] = float(np.mean(acc[t, : t + 1]))
        if checkpoint_path:
            save_checkpoint(
                checkpoint_path, cfg, t + 1, global_step, model, snapshot, reservoir,
                acc, stage_acc, stage_acc_mean,
            )
        if stop_after_task is not None and t >= stop_after_task:
            break

    matrix = AccuracyMatrix(acc, stage_acc, stage_acc_mean)
    stage = stage_acc if cfg.eval_mode == "pooled" else stage_acc_mean
    report = RunReport(
        avg=float(np.mean(stage)),
        last=float(stage[num_tasks - 1]),
        forgetting=[float(acc[d, d] - acc[num_tasks - 1, d]) for d in range(num_tasks)],
        unseen_acc=float(np.mean(acc[num_tasks - 1, num_tasks:])) if stream.unseen else None,
        wall_clock_sec=time.perf_counter() - t_start,
        config=asdict(cfg),
        seed=cfg.seed,
    )
    return matrix, report


ABLATION_ROWS = [
    ("none", {"disentangle_on": False, "fusion_on": False, "swap_on": False}),
    ("disen", {"disentangle_on": True, "fusion_on": False, "swap_on": False}),
    ("disen+antifor", {"disentangle_on": True, "fusion_on": True, "swap_on": False}),
    ("all", {"disentangle_on": True, "fusion_on": True, "swap_on": True}),
]


def ablate(stream: DomainStream, cfg: TrainConfig, seeds: list[int] | None = None) -> list[dict]:
    """Run the four component rows with shared seeds; one dict per run."""
    seeds = list(seeds) if seeds else [cfg.seed]
    rows = []
    for label, flags in ABLATION_ROWS:
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, **flags)
            _, report = run_sequence(stream, run_cfg)
            rows.append(
                {
                    "row": label,
                    **flags,
                    "seed": seed,
                    "avg": report.avg,
                    "last": report.last,
                }
            )
    return rows


def _sweep_point(args) -> dict:
    stream, cfg, q, lam = args
    run_cfg = replace(cfg, q=q, lam=lam)
    _, report = run_sequence(stream, run_cfg)
    return {"q": q, "lam": lam, "avg": report.avg, "last": report.last, "seed": cfg.seed}


def resolve_workers(requested: int) -> int:
    """Cap the worker count by the DRIFTFUSE_THREADS environment variable."""
    cap = os.environ.get("DRIFTFUSE_THREADS")
    workers = max(1, requested)
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"DRIFTFUSE_THREADS must be an integer, got {cap!r}")
    return workers


def sweep(
    stream: DomainStream,
    cfg: TrainConfig,
    q_values: tuple[float, ...] = (0.1, 0.3, 0.5, 0.9),
    lam_values: tuple[float, ...] = (1.0, 3.0, 5.0, 7.0, 9.0),
    fixed_q: float = 0.7,
    fixed_lam: float = 5.0,
    workers: int = 1,
) -> list[dict]:
    """Sensitivity grid: vary q at fixed lam, then lam at fixed q."""
    grid = [(q, fixed_lam) for q in q_values] + [(fixed_q, lam) for lam in lam_values]
    if not grid:
        raise ValueError("sweep grid is empty")
    jobs = [(stream, cfg, q, lam) for q, lam in grid]
    workers = resolve_workers(workers)
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_point, jobs))
    return [_sweep_point(job) for job in jobs]


# ---------------------------------------------------------------------------
# Checkpointing (task-boundary granularity)
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str,
    cfg: TrainConfig,
    completed_tasks: int,
    global_step: int,
    model: TwoStreamModel,
    snapshot: FusionSnapshot | None,
    reservoir: DomainFeatureReservoir | None,
    acc: np.ndarray,
    stage_acc: np.ndarray,
    stage_acc_mean: np.ndarray,
) -> None:
    """Versioned binary dump of the trainer state at a task boundary."""
    arrays: dict[str, np.ndarray] = {"acc": acc, "stage_acc": stage_acc,
                                     "stage_acc_mean": stage_acc_mean}
    for i, (w, b) in enumerate(zip(model.encoder_i.weights, model.encoder_i.biases)):
        arrays[f"enc_i_w{i}"] = w
        arrays[f"enc_i_b{i}"] = b
    for i, (w, b) in enumerate(zip(model.encoder_d.weights, model.encoder_d.biases)):
        arrays[f"enc_d_w{i}"] = w
        arrays[f"enc_d_b{i}"] = b
    arrays["cls_i_w"] = model.classifier_i_w
    arrays["cls_i_b"] = model.classifier_i_b
    arrays["cls_d_w"] = model.classifier_d_w
    arrays["cls_d_b"] = model.classifier_d_b
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "completed_tasks": completed_tasks,
        "global_step": global_step,
        "num_layers": model.encoder_i.num_layers,
        "latent_dim": model.latent_dim,
        "dropout": model.encoder_i.dropout_rate,
        "snapshot_task": None,
        "snapshot_layers": 0,
        "snapshot_biases": False,
        "reservoir": None,
    }
    if snapshot is not None:
        meta["snapshot_task"] = snapshot.captured_task
        meta["snapshot_layers"] = len(snapshot.qs)
        meta["snapshot_biases"] = snapshot.bias_qs is not None
        for i, (q, r) in enumerate(zip(snapshot.qs, snapshot.rs)):
            arrays[f"snap_q{i}"] = q
            arrays[f"snap_r{i}"] = r
        if snapshot.bias_qs is not None:
            for i, (q, r) in enumerate(zip(snapshot.bias_qs, snapshot.bias_rs)):
                arrays[f"snap_bq{i}"] = q
                arrays[f"snap_br{i}"] = r
    if reservoir is not None:
        meta["reservoir"] = {
            "capacity": reservoir.capacity,
            "source_task": reservoir.source_task,
            "seen": reservoir.seen,
            "size": len(reservoir),
        }
        arrays["res_features"] = np.asarray(reservoir.features)
        arrays["res_labels"] = np.asarray(reservoir.labels)

    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8), **arrays)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> dict:
    """Inverse of :func:`save_checkpoint`; returns a state dict."""
    from .nn import MlpParams

    with np.load(path) as zf:
        meta = json.loads(bytes(zf["meta"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        n_layers = meta["num_layers"]
        enc_i = MlpParams(
            [zf[f"enc_i_w{i}"] for i in range(n_layers)],
            [zf[f"enc_i_b{i}"] for i in range(n_layers)],
            meta["dropout"],
        )
        enc_d = MlpParams(
            [zf[f"enc_d_w{i}"] for i in range(n_layers)],
            [zf[f"enc_d_b{i}"] for i in range(n_layers)],
            meta["dropout"],
        )
        model = TwoStreamModel(
            enc_i, enc_d,
            zf["cls_i_w"], zf["cls_i_b"], zf["cls_d_w"], zf["cls_d_b"],
            meta["latent_dim"],
        )
        snapshot = None
        if meta["snapshot_task"] is not None:
            k = meta["snapshot_layers"]
            snapshot = FusionSnapshot(
                [zf[f"snap_q{i}"] for i in range(k)],
                [zf[f"snap_r{i}"] for i in range(k)],
                meta["snapshot_task"],
                [zf[f"snap_bq{i}"] for i in range(k)] if meta["snapshot_biases"] else None,
                [zf[f"snap_br{i}"] for i in range(k)] if meta["snapshot_biases"] else None,
            )
        reservoir = None
        if meta["reservoir"] is not None:
            info = meta["reservoir"]
            reservoir = DomainFeatureReservoir(info["capacity"], info["source_task"])
            feats = zf["res_features"]
            labels = zf["res_labels"]
            if info["size"]:
                reservoir._features = np.empty((info["capacity"], feats.shape[1]))
                reservoir._features[: info["size"]] = feats
                reservoir._labels[: info["size"]] = labels
                reservoir._size = info["size"]
            reservoir.seen = info["seen"]
        return {
            "config": meta["config"],
            "completed_tasks": meta["completed_tasks"],
            "global_step": meta["global_step"],
            "model": model,
            "snapshot": snapshot,
            "reservoir": reservoir,
            "acc": zf["acc"],
            "stage_acc": zf["stage_acc"],
            "stage_acc_mean": zf["stage_acc_mean"],
        }
