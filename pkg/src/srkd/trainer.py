"""Distillation training loop, evaluation, and the experiment harnesses
(ablation, noise robustness, subsampling, batch-size and dimension sweeps).

Batch composition is fixed at the start of a run (a seeded shuffle of the
training scenes), which lets every frozen-teacher quantity -- per-scene
features and logits, per-batch supervoxel candidates and similarity
log-partitions -- be computed once and reused across epochs.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .autodiff import Tensor, concat_rows
from .cloud import FixedSample, PointCloud, derive_seed, resample_fixed
from .errors import ConfigError, DataError
from .losses import LossWeights, loss_total, weighted_total
from .metrics import Metrics, compute_metrics, confusion_matrix, metrics_from_confusion
from .models import SegModel, knn_indices, make_student_from_teacher, make_teacher
from .optim import AdamW, OneCycleSchedule
from .voxelize import (CylGrid, SamplerConfig, batch_label_histogram,
                       build_supervoxels, sample_supervoxels)

EVAL_SEED = 90001


@dataclass(frozen=True)
class Dataset:
    train: tuple[PointCloud, ...]
    val: tuple[PointCloud, ...]

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "val", tuple(self.val))
        if not self.train or not self.val:
            raise DataError("dataset needs nonempty train and val splits")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 0.006
    weight_decay: float = 0.05
    warmup_frac: float = 0.3
    start_factor: float = 0.04
    final_factor: float = 1e-4
    seed: int = 0
    n_fixed: int = 1024
    knn_k: int = 8
    teacher_epochs: int = 150
    teacher_d_out: int = 128
    eval_every: int = 10
    train_fraction: float = 0.8
    weights: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.n_fixed < 1:
            raise ConfigError("epochs, batch_size and n_fixed must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")


@dataclass(frozen=True)
class NoiseConfig:
    taus: tuple[float, ...] = (0.01, 0.05, 0.1, 0.5, 0.7, 1.0)
    trials: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        if any(t < 0 for t in self.taus) or not self.taus:
            raise ConfigError("noise variances must be nonnegative and nonempty")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")


def _child_seed(*parts: int) -> int:
    return int(derive_seed(*parts).integers(0, 2**63 - 1))


def grid_for_clouds(clouds, h_margin: float = 0.25) -> CylGrid:
    """Default cylindrical grid sized to cover the given clouds."""
    r_max, z_min, z_max = 0.0, np.inf, -np.inf
    for c in clouds:
        r_max = max(r_max, float(np.hypot(c.positions[:, 0], c.positions[:, 1]).max()))
        z_min = min(z_min, float(c.positions[:, 2].min()))
        z_max = max(z_max, float(c.positions[:, 2].max()))
    return CylGrid.for_extents(r_max * 1.001 + 1e-9,
                               (z_max - z_min) + 2 * h_margin,
                               h_min=z_min - h_margin)


@dataclass
class _Prepared:
    sample: FixedSample
    x: np.ndarray
    nbr: np.ndarray
    all_valid: bool


def _prepare(cloud: PointCloud, cfg: TrainConfig, seed: int) -> _Prepared:
    sample = resample_fixed(cloud, cfg.n_fixed, seed)
    x = SegModel.encoder_input(sample)
    nbr = knn_indices(sample.cloud.positions, sample.mask, cfg.knn_k)
    return _Prepared(sample, x, nbr, bool(sample.mask.all()))


@dataclass
class _BatchContext:
    members: list[_Prepared]
    histogram: np.ndarray
    candidates: list[list] | None          # supervoxel candidates per sample
    teacher_feats: list[np.ndarray] | None
    teacher_logits: np.ndarray | None      # concatenated over the batch
    teacher_log_z: np.ndarray | None
    labels: np.ndarray                     # concatenated
    mask: np.ndarray                       # concatenated


def _teacher_outputs(teacher: SegModel, prep: _Prepared):
    _, f_norm, logits = teacher.forward(prep.sample, prep.nbr)
    return f_norm.data.copy(), logits.data.copy()


def _train_loop(model: SegModel, teacher: SegModel | None, cfg: TrainConfig,
                weights: LossWeights, train_clouds, val_clouds,
                grid: CylGrid) -> list[dict]:
    w = weights
    need_kd = teacher is not None and w.lambda_kd > 0
    need_amra = teacher is not None and (w.lambda_p > 0 or w.lambda_v > 0
                                         or w.lambda_c > 0)
    need_gd = teacher is not None and w.lambda_batch_gd > 0
    need_teacher = need_kd or need_amra or need_gd
    n_classes = train_clouds[0].n_classes

    prepared = [_prepare(c, cfg, _child_seed(cfg.seed, 11, i))
                for i, c in enumerate(train_clouds)]
    order = derive_seed(cfg.seed, 13).permutation(len(prepared))
    batches = [order[i:i + cfg.batch_size]
               for i in range(0, len(order), cfg.batch_size)]

    contexts: list[_BatchContext] = []
    teacher_cache: dict[int, tuple] = {}
    for batch in batches:
        members = [prepared[i] for i in batch]
        samples = [p.sample for p in members]
        hist = batch_label_histogram(samples, n_classes)
        cands = None
        if need_amra:
            cands = [build_supervoxels(p.sample, grid, cfg.sampler, hist,
                                       seed=_child_seed(cfg.seed, 17, int(i)))
                     for i, p in zip(batch, members)]
        t_feats = t_logits = t_log_z = None
        if need_teacher:
            outs = []
            for i, p in zip(batch, members):
                if int(i) not in teacher_cache:
                    teacher_cache[int(i)] = _teacher_outputs(teacher, p)
                outs.append(teacher_cache[int(i)])
            t_feats = [o[0] for o in outs]
            t_logits = np.concatenate([o[1] for o in outs], axis=0)
        labels = np.concatenate([p.sample.cloud.labels for p in members])
        mask = np.concatenate([p.sample.mask for p in members])
        if need_gd:
            gd_masks = None if all(p.all_valid for p in members) \
                else [p.sample.mask for p in members]
            t_log_z = losses.gd_teacher_log_z(t_feats, w.t_gd, gd_masks)
        contexts.append(_BatchContext(members, hist, cands, t_feats,
                                      t_logits, t_log_z, labels, mask))

    total_steps = cfg.epochs * len(batches)
    sched = OneCycleSchedule(cfg.lr, total_steps, cfg.warmup_frac,
                             cfg.start_factor, cfg.final_factor)
    opt = AdamW(model.named_params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    log: list[dict] = []
    gstep = 0
    for epoch in range(cfg.epochs):
        for bi, ctx in enumerate(contexts):
            lr = sched.lr(gstep)
            outs = [model.forward(p.sample, p.nbr) for p in ctx.members]
            feats = [o[1] for o in outs]
            logits = concat_rows([o[2] for o in outs])

            comps: dict[str, object] = {name: 0.0 for name in losses.LOSS_NAMES}
            comps["l_task"] = losses.loss_task(logits, ctx.labels, ctx.mask)
            if need_kd:
                comps["l_kd"] = losses.loss_kd(logits, ctx.teacher_logits,
                                               w.t_logit, ctx.mask)
            if need_amra:
                views_s, views_t, views_sp, views_tc = [], [], [], []
                for si, (p, cand, f_s, f_t) in enumerate(
                        zip(ctx.members, ctx.candidates, feats, ctx.teacher_feats)):
                    chosen = sample_supervoxels(
                        cand, cfg.sampler.k,
                        seed=_child_seed(cfg.seed, 19, epoch, bi, si))
                    f_t_t = Tensor(f_t)
                    proj = model.projection.forward(f_s) \
                        if model.projection is not None else f_s
                    for sv in chosen:
                        views_s.append(losses.supervoxel_features(f_s, sv))
                        views_t.append(losses.supervoxel_features(f_t_t, sv))
                        views_sp.append(losses.supervoxel_features(proj, sv))
                        views_tc.append(views_t[-1])
                if views_s:
                    if w.lambda_p > 0:
                        comps["l_amra_p"] = losses.loss_amra_point(views_s, views_t)
                    if w.lambda_v > 0:
                        comps["l_amra_v"] = losses.loss_amra_voxel(views_s, views_t)
                    if w.lambda_c > 0:
                        comps["l_amra_c"] = losses.loss_amra_channel(views_sp, views_tc)
            if need_gd:
                gd_masks = None if all(p.all_valid for p in ctx.members) \
                    else [p.sample.mask for p in ctx.members]
                comps["l_batch_gd"] = losses.loss_batch_gd(
                    feats, ctx.teacher_feats, w.t_gd, gd_masks,
                    teacher_log_z=ctx.teacher_log_z)

            floats = {k: (v.item() if isinstance(v, Tensor) else float(v))
                      for k, v in comps.items()}
            report = loss_total(floats, w)  # raises naming any non-finite term
            total = weighted_total(comps, w)
            model.zero_grads()
            total.backward()
            opt.step(lr)
            record = {"epoch": epoch, "step": gstep}
            record.update(report.to_dict())
            record["lr"] = lr
            log.append(record)
            gstep += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            m = evaluate(model, val_clouds, cfg.n_fixed)
            log.append({"epoch": epoch, "val_miou": m.miou,
                        "val_macc": m.macc, "val_allacc": m.allacc})
    return log


def train_teacher(cfg: TrainConfig, data: Dataset) -> tuple[SegModel, list[dict]]:
    """Train the full-width teacher with the task loss alone, then freeze it."""
    d_in = data.train[0].d_in
    teacher = make_teacher(d_in, data.train[0].n_classes, cfg.teacher_d_out,
                           cfg.knn_k, seed=_child_seed(cfg.seed, 2))
    t_cfg = replace(cfg, epochs=cfg.teacher_epochs)
    grid = grid_for_clouds(data.train)
    log = _train_loop(teacher, None, t_cfg, LossWeights.zeros(),
                      data.train, data.val, grid)
    teacher.freeze()
    return teacher, log


def train_distill(cfg: TrainConfig, teacher: SegModel,
                  data: Dataset) -> tuple[SegModel, list[dict]]:
    """Distill a half-width student from a frozen teacher (the full loop).

    All feature-level distillation terms consume the L2-normalized feature
    map — the same representation the segmentation head reads — so channel
    distributions stay near-uniform and the heavily weighted channel term
    remains commensurate with the task loss.
    """
    if teacher.trainable:
        raise ConfigError("teacher must be frozen before distillation")
    student = make_student_from_teacher(teacher, seed=_child_seed(cfg.seed, 3))
    grid = grid_for_clouds(data.train)
    log = _train_loop(student, teacher, cfg, cfg.weights,
                      data.train, data.val, grid)
    return student, log


def evaluate(model: SegModel, clouds, n_fixed: int = 1024,
             noise_tau: float = 0.0, noise_seed: int = 0) -> Metrics:
    """Confusion-matrix metrics over all valid points of a cloud list.

    With noise_tau > 0, seeded Gaussian noise of variance tau is added to
    the L2-normalized feature map before the segmentation head.
    """
    if not clouds:
        raise DataError("evaluate needs at least one cloud")
    n_classes = clouds[0].n_classes
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    rng = derive_seed(noise_seed, 29) if noise_tau > 0 else None
    for i, cloud in enumerate(clouds):
        sample = resample_fixed(cloud, n_fixed, _child_seed(EVAL_SEED, i))
        noise = None
        if noise_tau > 0:
            noise = rng.normal(0.0, np.sqrt(noise_tau),
                               (n_fixed, model.encoder.d_out))
        _, _, logits = model.forward(sample, feature_noise=noise)
        preds = logits.data.argmax(axis=1)
        conf += confusion_matrix(sample.cloud.labels, preds, n_classes, sample.mask)
    return metrics_from_confusion(conf)


def noise_sweep(model: SegModel, clouds, cfg: NoiseConfig,
                n_fixed: int = 1024) -> list[dict]:
    """Mean mIoU per noise variance, averaged over seeded trials."""
    rows = []
    for ti, tau in enumerate(cfg.taus):
        mious = []
        for trial in range(cfg.trials if tau > 0 else 1):
            m = evaluate(model, clouds, n_fixed, noise_tau=tau,
                         noise_seed=_child_seed(cfg.seed, 31, ti, trial))
            mious.append(m.miou)
        rows.append({"tau": tau, "miou": float(np.mean(mious)),
                     "trials": len(mious)})
    return rows


# ---------------------------------------------------------------------------
# Experiment harnesses
# ---------------------------------------------------------------------------

ABLATION_VARIANTS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("baseline", ()),
    ("+kd", ("lambda_kd",)),
    ("+kd+csmbgd", ("lambda_kd", "lambda_batch_gd")),
    ("full", ("lambda_kd", "lambda_batch_gd", "lambda_p", "lambda_v", "lambda_c")),
)


def variant_weights(full: LossWeights, enabled: tuple[str, ...]) -> LossWeights:
    kw = {name: getattr(full, name) if name in enabled else 0.0
          for name in ("lambda_kd", "lambda_p", "lambda_v", "lambda_c",
                       "lambda_batch_gd")}
    return LossWeights(**kw, t_logit=full.t_logit, t_gd=full.t_gd)


def _distill_eval(cfg: TrainConfig, teacher_state: dict, data: Dataset,
                  tag: dict) -> dict:
    teacher = SegModel.from_state(teacher_state, trainable=False)
    teacher.freeze()
    student, _ = train_distill(cfg, teacher, data)
    m = evaluate(student, data.val, cfg.n_fixed)
    row = dict(tag)
    row.update(m.as_row())
    return row


def _run_tasks(tasks: list[tuple], jobs: int) -> list[dict]:
    if jobs <= 1 or os.environ.get("SRKD_DETERMINISTIC") == "1":
        return [_distill_eval(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_distill_eval, *zip(*tasks)))


def ablate(cfg: TrainConfig, teacher: SegModel, data: Dataset,
           seeds: tuple[int, ...] = (0, 1, 2, 3, 4), jobs: int = 1) -> list[dict]:
    """Four variants (CE only, +logit KD, +batch GD, full) over paired seeds."""
    state = teacher.state_dict()
    tasks = []
    for variant, enabled in ABLATION_VARIANTS:
        vw = variant_weights(cfg.weights, enabled)
        for seed in seeds:
            vcfg = replace(cfg, seed=seed, weights=vw)
            tasks.append((vcfg, state, data, {"variant": variant, "seed": seed}))
    return _run_tasks(tasks, jobs)


def subsample_sweep(cfg: TrainConfig, teacher: SegModel, data: Dataset,
                    fractions: tuple[float, ...] = (0.05, 0.10, 0.125, 0.25, 0.5, 1.0),
                    seeds: tuple[int, ...] = (0, 1, 2), jobs: int = 1) -> list[dict]:
    """Retrain on seeded training subsets; evaluate on the full val split."""
    state = teacher.state_dict()
    tasks = []
    for frac in fractions:
        if not 0.0 < frac <= 1.0:
            raise ConfigError("fractions must lie in (0, 1]")
        n = int(round(frac * len(data.train)))
        if n == 0:
            raise ConfigError(f"fraction {frac} yields zero training scenes")
        for seed in seeds:
            keep = derive_seed(seed, 37).choice(len(data.train), size=n,
                                                replace=False)
            sub = Dataset(tuple(data.train[int(i)] for i in np.sort(keep)), data.val)
            tasks.append((replace(cfg, seed=seed), state, sub,
                          {"fraction": frac, "seed": seed}))
    return _run_tasks(tasks, jobs)


def batch_sensitivity(cfg: TrainConfig, teacher: SegModel, data: Dataset,
                      batch_sizes: tuple[int, ...] = (2, 4, 8),
                      jobs: int = 1) -> list[dict]:
    state = teacher.state_dict()
    tasks = [(replace(cfg, batch_size=int(b)), state, data, {"batch_size": int(b)})
             for b in batch_sizes]
    return _run_tasks(tasks, jobs)


def dim_sensitivity(cfg: TrainConfig, data: Dataset,
                    dims: tuple[int, ...] = (32, 64, 128, 256)) -> list[dict]:
    """Retrain teacher and student per feature dimension."""
    rows = []
    for dim in dims:
        if dim < 2:
            raise ConfigError("feature dimensions must be >= 2")
        dcfg = replace(cfg, teacher_d_out=int(dim))
        teacher, _ = train_teacher(dcfg, data)
        student, _ = train_distill(dcfg, teacher, data)
        m = evaluate(student, data.val, dcfg.n_fixed)
        row = {"dim": int(dim), "student_dim": student.encoder.d_out}
        row.update(m.as_row())
        rows.append(row)
    return rows
