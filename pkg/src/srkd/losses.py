"""The six distillation loss terms and their weighted total.

Student-side inputs are autodiff Tensors so gradients flow back to the
student encoder, head and channel projection; teacher-side inputs are
plain arrays (the teacher is frozen). The cross-sample batch geometry
loss is implemented as a single fused tape op over the stacked mini-batch
feature maps, since at full scale it dominates the training step.

Formula conventions (documented because the source material is loose):
  * Logit and similarity KL use softmax(Z / T), with the student
    distribution as the first KL argument.
  * The channel-wise loss is the channel-softmax KL between matched
    student/teacher rows, averaged separately over valid point rows and
    valid voxel rows, then summed; no temperature.
  * The batch geometry loss sums over ordered sample pairs including
    self-pairs, normalized by 1/B^2.
  * Padded rows/columns are excluded everywhere; normalizers count only
    valid elements, except the affinity losses which keep the fixed
    1/N_point^2 (1/N_voxel^2) normalization of their defining formulas
    (masked entries are zero in both operands and cancel).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, concat_rows
from .errors import (ConfigError, NumericError, PairingError, ShapeError,
                     UndefinedLossError)
from .cloud import IGNORE_LABEL
from .numerics import l2_normalize_rows
from .voxelize import Supervoxel

LOSS_NAMES = ("l_task", "l_kd", "l_amra_p", "l_amra_v", "l_amra_c", "l_batch_gd")


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights and temperatures of the total objective."""

    lambda_kd: float = 0.3
    lambda_p: float = 0.001
    lambda_v: float = 0.001
    lambda_c: float = 1000.0
    lambda_batch_gd: float = 0.1
    t_logit: float = 2.0
    t_gd: float = 2.0

    def __post_init__(self):
        lambdas = (self.lambda_kd, self.lambda_p, self.lambda_v,
                   self.lambda_c, self.lambda_batch_gd)
        if any(not np.isfinite(v) or v < 0 for v in lambdas):
            raise ConfigError("loss weights must be finite and nonnegative")
        if self.t_logit <= 0 or self.t_gd <= 0:
            raise ConfigError("temperatures must be positive")

    @classmethod
    def zeros(cls) -> "LossWeights":
        return cls(lambda_kd=0.0, lambda_p=0.0, lambda_v=0.0, lambda_c=0.0,
                   lambda_batch_gd=0.0)


@dataclass(frozen=True)
class LossReport:
    """All six loss terms plus the weighted total."""

    l_task: float
    l_kd: float
    l_amra_p: float
    l_amra_v: float
    l_amra_c: float
    l_batch_gd: float
    l_total: float

    def to_dict(self) -> dict:
        return asdict(self)


def weighted_total(components: dict, weights: LossWeights):
    """Recombination l_task + sum(lambda_i * l_i); works on floats or Tensors."""
    return (components["l_task"]
            + weights.lambda_kd * components["l_kd"]
            + weights.lambda_p * components["l_amra_p"]
            + weights.lambda_v * components["l_amra_v"]
            + weights.lambda_c * components["l_amra_c"]
            + weights.lambda_batch_gd * components["l_batch_gd"])


def loss_total(components: dict, weights: LossWeights) -> LossReport:
    """Assemble a LossReport from scalar components."""
    comps = {name: float(components[name]) for name in LOSS_NAMES}
    if any(not np.isfinite(v) for v in comps.values()):
        bad = [n for n, v in comps.items() if not np.isfinite(v)]
        raise NumericError(f"non-finite loss component(s): {', '.join(bad)}")
    return LossReport(**comps, l_total=float(weighted_total(comps, weights)))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _valid_row_mean(rows: Tensor, mask: np.ndarray) -> Tensor:
    n = int(mask.sum())
    if n == 0:
        raise UndefinedLossError("no valid rows in reduction")
    return (rows * mask.astype(np.float64)).sum() * (1.0 / n)


# ---------------------------------------------------------------------------
# Task and logit-KD losses
# ---------------------------------------------------------------------------

def loss_task(logits, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy over unmasked labeled points."""
    logits = _as_tensor(logits)
    n, c = logits.shape
    labels = np.asarray(labels)
    valid = labels != IGNORE_LABEL
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool)
    if not valid.any():
        raise UndefinedLossError("loss_task: zero labeled points")
    onehot = np.zeros((n, c))
    onehot[valid, labels[valid]] = 1.0
    log_p = logits.log_softmax_rows()
    picked = (log_p * onehot).sum(axis=1)
    return -_valid_row_mean(picked, valid)


def loss_kd(student_logits, teacher_logits, temperature: float,
            mask: np.ndarray | None = None) -> Tensor:
    """Mean per-point KL(softmax(Z_s/T) || softmax(Z_t/T)); student first."""
    zs = _as_tensor(student_logits)
    zt = np.asarray(teacher_logits, dtype=np.float64)
    if zs.shape != zt.shape:
        raise ShapeError(f"loss_kd shape mismatch: {zs.shape} vs {zt.shape}")
    if mask is None:
        mask = np.ones(zs.shape[0], dtype=bool)
    ls_s = zs.log_softmax_rows(temperature)
    ls_t = Tensor(_np_log_softmax(zt, temperature))
    rows = (ls_s.exp() * (ls_s - ls_t)).sum(axis=1)
    return _valid_row_mean(rows, np.asarray(mask, dtype=bool))


def _np_log_softmax(m: np.ndarray, temperature: float) -> np.ndarray:
    s = m / temperature
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Affinity (AMRA) losses
# ---------------------------------------------------------------------------

def affinity(features, mask: np.ndarray | None, weight: float) -> Tensor:
    """Weighted squared-L2 pairwise distance matrix w * ||F_i - F_j||^2.

    Masked rows contribute zero entries; the diagonal is exactly zero.
    """
    f = _as_tensor(features)
    n = f.shape[0]
    if n < 2:
        raise ShapeError("affinity needs at least two rows")
    sq = f.square().sum(axis=1, keepdims=True)       # (n, 1)
    d = sq + sq.T - 2.0 * (f @ f.T)
    keep = 1.0 - np.eye(n)
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        keep = keep * np.outer(m, m)
    return d * (keep * weight)


@dataclass(frozen=True)
class SupervoxelFeatures:
    """Fixed-size feature blocks of one supervoxel under one encoder."""

    point_features: Tensor     # (N_point, D), masked rows zero
    voxel_features: Tensor     # (N_voxel, D), masked rows zero
    point_mask: np.ndarray
    voxel_mask: np.ndarray
    weight: float


def supervoxel_features(feature_map, sv: Supervoxel) -> SupervoxelFeatures:
    """Gather a supervoxel's point and mean-pooled voxel rows from a map."""
    fm = _as_tensor(feature_map)
    pf = fm.gather_rows(sv.point_indices) * sv.point_mask[:, None].astype(np.float64)
    vf = Tensor(sv.voxel_matrix) @ fm
    return SupervoxelFeatures(pf, vf, sv.point_mask, sv.voxel_mask, sv.weight)


def _check_paired(views_s, views_t):
    if len(views_s) != len(views_t) or not views_s:
        raise PairingError("student and teacher supervoxel lists must match")
    for a, b in zip(views_s, views_t):
        if (not np.array_equal(a.point_mask, b.point_mask)
                or not np.array_equal(a.voxel_mask, b.voxel_mask)
                or a.weight != b.weight):
            raise PairingError("student/teacher supervoxels disagree on masks or weights")


def _affinity_gap(views_s, views_t, kind: str) -> Tensor:
    _check_paired(views_s, views_t)
    total = None
    for vs, vt in zip(views_s, views_t):
        if kind == "point":
            fs, ft, mask = vs.point_features, vt.point_features, vs.point_mask
        else:
            fs, ft, mask = vs.voxel_features, vt.voxel_features, vs.voxel_mask
        n = mask.size
        ds = affinity(fs, mask, vs.weight)
        dt = affinity(ft.detach(), mask, vt.weight)
        gap = (ds - dt).square().sum() * (1.0 / (n * n))
        total = gap if total is None else total + gap
    return total * (1.0 / len(views_s))


def loss_amra_point(views_s: list[SupervoxelFeatures],
                    views_t: list[SupervoxelFeatures]) -> Tensor:
    """Mean over supervoxels of the squared point-affinity gap / N_point^2."""
    return _affinity_gap(views_s, views_t, "point")


def loss_amra_voxel(views_s: list[SupervoxelFeatures],
                    views_t: list[SupervoxelFeatures]) -> Tensor:
    """Mean over supervoxels of the squared voxel-affinity gap / N_voxel^2."""
    return _affinity_gap(views_s, views_t, "voxel")


def loss_amra_channel(views_s: list[SupervoxelFeatures],
                      views_t: list[SupervoxelFeatures]) -> Tensor:
    """Channel-softmax KL between matched rows, points plus voxels.

    The student views must already be projected to the teacher channel
    count. Each part is averaged over its valid rows, both parts are
    summed, and the result is averaged over the sampled supervoxels.
    """
    _check_paired(views_s, views_t)
    total = None
    for vs, vt in zip(views_s, views_t):
        if vs.point_features.shape[1] != vt.point_features.shape[1]:
            raise ShapeError("channel loss requires matching channel counts; "
                             "project the student features first")
        term = (_masked_channel_kl(vs.point_features, vt.point_features, vs.point_mask)
                + _masked_channel_kl(vs.voxel_features, vt.voxel_features, vs.voxel_mask))
        total = term if total is None else total + term
    return total * (1.0 / len(views_s))


def _masked_channel_kl(rows_s: Tensor, rows_t: Tensor, mask: np.ndarray) -> Tensor:
    ls_s = rows_s.log_softmax_rows()
    ls_t = Tensor(_np_log_softmax(rows_t.data, 1.0))
    kl = (ls_s.exp() * (ls_s - ls_t)).sum(axis=1)
    return _valid_row_mean(kl, mask)


# ---------------------------------------------------------------------------
# Cross-sample mini-batch geometry distillation
# ---------------------------------------------------------------------------

def cross_similarity(f_i: np.ndarray, f_j: np.ndarray) -> np.ndarray:
    """Similarity matrix F_i F_j^T of two row-normalized feature maps."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape[1] != f_j.shape[1]:
        raise ShapeError("cross_similarity requires matching feature widths")
    return f_i @ f_j.T


def loss_gd_pair(m_s: np.ndarray, m_t: np.ndarray, temperature: float,
                 row_mask: np.ndarray | None = None,
                 col_mask: np.ndarray | None = None) -> float:
    """Row-softmax KL between one pair of similarity matrices (plain arrays)."""
    m_s = np.asarray(m_s, dtype=np.float64)
    m_t = np.asarray(m_t, dtype=np.float64)
    if m_s.shape != m_t.shape:
        raise ShapeError(f"loss_gd_pair shape mismatch: {m_s.shape} vs {m_t.shape}")
    rows = np.ones(m_s.shape[0], dtype=bool) if row_mask is None \
        else np.asarray(row_mask, dtype=bool)
    cols = np.ones(m_s.shape[1], dtype=bool) if col_mask is None \
        else np.asarray(col_mask, dtype=bool)
    if not rows.any():
        raise UndefinedLossError("loss_gd_pair: no valid rows")
    if not cols.any():
        raise UndefinedLossError("loss_gd_pair: no valid columns")
    sub_s = m_s[np.ix_(rows, cols)]
    sub_t = m_t[np.ix_(rows, cols)]
    ls = _np_log_softmax(sub_s, temperature)
    lt = _np_log_softmax(sub_t, temperature)
    return float((np.exp(ls) * (ls - lt)).sum(axis=1).mean())


class _Workspace:
    """Reusable large buffers for the fused batch-GD kernel.

    The generation counter tracks buffer ownership: every forward (and every
    consuming backward) bumps it, so a backward whose forward state has been
    overwritten by a newer call knows to recompute instead of reading stale
    buffers.
    """

    def __init__(self):
        self._bufs: dict[str, np.ndarray] = {}
        self.generation = 0

    def get(self, name: str, shape) -> np.ndarray:
        buf = self._bufs.get(name)
        if buf is None or buf.shape != shape:
            buf = np.empty(shape)
            self._bufs[name] = buf
        return buf

    def bump(self) -> int:
        self.generation += 1
        return self.generation


_GD_WS = _Workspace()


def gd_teacher_log_z(teacher_maps: list[np.ndarray], temperature: float,
                     masks: list[np.ndarray] | None = None) -> np.ndarray:
    """Per-(row, target-sample) log partition of the teacher similarities.

    Cacheable per mini-batch: the teacher is frozen, so these values are
    constant for a fixed batch composition.
    """
    fn_t = np.concatenate([l2_normalize_rows(m) for m in teacher_maps], axis=0)
    b = len(teacher_maps)
    n = teacher_maps[0].shape[0]
    g = fn_t @ fn_t.T
    g /= temperature
    np.exp(g, out=g)
    if masks is not None:
        g *= np.concatenate(masks).astype(np.float64)[None, :]
    return np.log(g.reshape(b * n, b, n).sum(axis=2))


def loss_batch_gd(student_maps: list[Tensor], teacher_maps: list[np.ndarray],
                  temperature: float, masks: list[np.ndarray] | None = None,
                  teacher_log_z: np.ndarray | None = None) -> Tensor:
    """Batch geometry distillation over all ordered sample pairs.

    Feature maps are L2 row-normalized internally. For each ordered pair
    (i, j) the row-softmax KL of the cross-sample similarity matrices is
    averaged over the valid rows of sample i (softmax restricted to valid
    columns of sample j); pair losses are summed with a 1/B^2 normalizer.
    """
    if not student_maps or len(student_maps) != len(teacher_maps):
        raise ShapeError("student and teacher map lists must match")
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    b = len(student_maps)
    n = student_maps[0].shape[0]
    for m in list(student_maps) + list(teacher_maps):
        if m.shape[0] != n:
            raise ShapeError("inconsistent point count across the batch")
    fn_s = concat_rows([_as_tensor(m).l2_normalize_rows() for m in student_maps])
    fn_t = np.concatenate([l2_normalize_rows(np.asarray(m, dtype=np.float64))
                           for m in teacher_maps], axis=0)
    if masks is None:
        col_valid = None
        row_weight = np.full(b * n, 1.0 / (b * b * n))
    else:
        col_valid = np.concatenate([np.asarray(m, bool) for m in masks])
        counts = np.array([int(np.asarray(m).sum()) for m in masks])
        if np.any(counts == 0):
            raise UndefinedLossError("loss_batch_gd: a sample has no valid rows")
        row_weight = np.where(col_valid,
                              np.repeat(1.0 / (b * b * counts), n), 0.0)
    if teacher_log_z is None:
        teacher_log_z = gd_teacher_log_z(teacher_maps, temperature,
                                         masks if masks is not None else None)
    return _fused_batch_gd(fn_s, fn_t, b, n, temperature, col_valid,
                           row_weight, teacher_log_z)


def _fused_batch_gd(fn_s: Tensor, fn_t: np.ndarray, b: int, n: int,
                    temperature: float, col_valid: np.ndarray | None,
                    row_weight: np.ndarray, log_zt: np.ndarray) -> Tensor:
    """Fused forward/backward of the pairwise row-softmax KL objective.

    Works on the stacked (B*N, D) normalized maps; the (B*N, B*N) gram is
    viewed as BxB blocks of N x N similarity matrices. Large intermediates
    live in a reusable workspace to keep the peak footprint bounded.
    """
    bn = b * n
    inv_t = 1.0 / temperature

    # Temperature folded into the (small) feature matrices so the (BN, BN)
    # grams come out pre-scaled, saving two full passes over them.
    c = np.sqrt(inv_t)
    fs_c = fn_s.data * c
    ft_c = fn_t * c
    colf = None if col_valid is None else col_valid.astype(np.float64)
    s = _GD_WS.get("s", (bn, bn))
    t = _GD_WS.get("t", (bn, bn))
    e = _GD_WS.get("e", (bn, bn))
    scratch = _GD_WS.get("scratch", (bn, bn))

    def fill():
        # s = student gram, e = exp(s) masked, returns d = s - t (in t)
        np.matmul(fs_c, fs_c.T, out=s)
        np.matmul(ft_c, ft_c.T, out=t)
        np.exp(s, out=e)
        if colf is not None:
            np.multiply(e, colf[None, :], out=e)
        return np.subtract(s, t, out=t)

    d = fill()
    z = e.reshape(bn, b, n).sum(axis=2)                      # (BN, B)
    np.multiply(e, d, out=scratch)
    gap = scratch.reshape(bn, b, n).sum(axis=2)              # sum_b p*(s-t) * Z
    row_kl = gap / z - np.log(z) + log_zt                    # (BN, B)
    loss = float((row_kl.sum(axis=1) * row_weight).sum())
    if not np.isfinite(loss):
        raise NumericError("batch geometry loss is non-finite")
    state = {"gen": _GD_WS.bump()}

    def vjp(g):
        # dL/dS[a, col in block j] = w_a * p * (d - rowterm_j) ; chain 1/T
        if _GD_WS.generation != state["gen"]:
            # Another forward (or an earlier backward) recycled the buffers
            # since this node was built; restore them from the saved inputs.
            fill()
        d = t
        d3 = d.reshape(bn, b, n)
        d3 -= (gap / z)[:, :, None]
        np.multiply(d, e, out=d)
        d3 /= z[:, :, None]
        np.multiply(d, (float(g) * inv_t) * row_weight[:, None], out=d)
        np.add(d, d.T, out=scratch)
        # the mutations above consumed the buffers; force a refill next time
        state["gen"] = -1
        _GD_WS.bump()
        return scratch @ fn_s.data

    return Tensor.from_op(np.float64(loss), [(fn_s, vjp)])
