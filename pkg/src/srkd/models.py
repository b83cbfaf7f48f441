"""Tiny geometry-aware point encoders, segmentation heads, and the
student-to-teacher channel projection.

The encoder is a per-point MLP over (position, input features) interleaved
with two rounds of k-nearest-neighbor mean aggregation among valid points;
it is a deliberately small stand-in for a transformer backbone that still
makes relation-based distillation non-degenerate. The segmentation head
consumes the L2-normalized feature map, which is also where evaluation-time
feature noise is injected.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .cloud import FixedSample, derive_seed
from .errors import DataError, ParseError, ShapeError

_CKPT_MAGIC = b"SRKDCKPT1"

DEFAULT_HIDDEN = 128
DEFAULT_K = 8
AGG_ROUNDS = 2


def knn_indices(positions: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    """(N, k') nearest valid neighbors per point, self included.

    Padded rows point at themselves so they never mix with real points;
    k' = min(k, number of valid points).
    """
    n = positions.shape[0]
    valid = np.flatnonzero(mask)
    kk = min(k, valid.size)
    idx = np.tile(np.arange(n, dtype=np.intp)[:, None], (1, kk))
    if valid.size:
        pv = positions[valid]
        d2 = ((pv[:, None, :] - pv[None, :, :]) ** 2).sum(axis=2)
        near = np.argpartition(d2, kk - 1, axis=1)[:, :kk] if kk < valid.size \
            else np.argsort(d2, axis=1)
        idx[valid] = valid[near]
    return idx


def _init_linear(rng, fan_in: int, fan_out: int, requires_grad: bool):
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad)
    b = Tensor(rng.uniform(-bound, bound, fan_out), requires_grad)
    return w, b


class PointEncoder:
    """Per-point MLP + k-NN mean aggregation; widths[0] is the input width."""

    def __init__(self, widths: tuple[int, ...], k: int = DEFAULT_K,
                 seed: int = 0, trainable: bool = True):
        if len(widths) < 2:
            raise DataError("encoder needs at least one linear layer")
        self.widths = tuple(int(w) for w in widths)
        self.k = int(k)
        self.trainable = trainable
        rng = derive_seed(seed)
        self.params: dict[str, Tensor] = {}
        for i, (fi, fo) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            w, b = _init_linear(rng, fi, fo, trainable)
            self.params[f"w{i}"] = w
            self.params[f"b{i}"] = b

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    def forward(self, x, nbr_idx: np.ndarray, mask: np.ndarray) -> Tensor:
        """Feature map (N, d_out); padded rows are exactly zero."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.shape[1] != self.widths[0]:
            raise ShapeError(f"encoder expects width {self.widths[0]}, got {h.shape[1]}")
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            h = (h @ self.params[f"w{i}"] + self.params[f"b{i}"]).tanh()
            if i < AGG_ROUNDS:
                h = h.neighbor_mean(nbr_idx)
        return h * np.asarray(mask, dtype=np.float64)[:, None]


class Linear:
    """Row-wise affine map (segmentation head or channel projection)."""

    def __init__(self, d_in: int, d_out: int, seed: int = 0,
                 trainable: bool = True, orthogonal: bool = False):
        self.d_in, self.d_out = int(d_in), int(d_out)
        rng = derive_seed(seed)
        if orthogonal:
            # near-orthogonal rows: QR of a random (d_out, d_in) Gaussian
            q, _ = np.linalg.qr(rng.standard_normal((max(d_in, d_out), min(d_in, d_out))))
            w = q[:d_in, :d_out] if d_in >= d_out else q[:d_out, :d_in].T
            self.w = Tensor(np.ascontiguousarray(w), trainable)
            self.b = Tensor(np.zeros(d_out), trainable)
        else:
            self.w, self.b = _init_linear(rng, d_in, d_out, trainable)
        self.params = {"w": self.w, "b": self.b}

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1] != self.d_in:
            raise ShapeError(f"linear expects width {self.d_in}, got {x.shape[1]}")
        return x @ self.w + self.b


def head_forward(head: Linear, features) -> Tensor:
    return head.forward(features)


def project_channels(proj: Linear, student_features) -> Tensor:
    return proj.forward(student_features)


class SegModel:
    """Encoder plus head; students also carry the channel projection."""

    def __init__(self, widths: tuple[int, ...], n_classes: int,
                 k: int = DEFAULT_K, seed: int = 0, trainable: bool = True,
                 project_to: int | None = None):
        self.widths = tuple(int(w) for w in widths)
        self.n_classes = int(n_classes)
        self.k = int(k)
        self.trainable = trainable
        self.project_to = project_to
        rng = derive_seed(seed)
        self.encoder = PointEncoder(widths, k=k, seed=int(rng.integers(2**62)),
                                    trainable=trainable)
        self.head = Linear(self.encoder.d_out, n_classes,
                           seed=int(rng.integers(2**62)), trainable=trainable)
        self.projection = None
        if project_to is not None:
            self.projection = Linear(self.encoder.d_out, int(project_to),
                                     seed=int(rng.integers(2**62)),
                                     trainable=trainable, orthogonal=True)

    # -- forward ------------------------------------------------------------

    @staticmethod
    def encoder_input(sample: FixedSample) -> np.ndarray:
        return np.hstack([sample.cloud.positions, sample.cloud.features])

    def forward(self, sample: FixedSample, nbr_idx: np.ndarray | None = None,
                feature_noise: np.ndarray | None = None):
        """Returns (raw feature map, normalized feature map, logits)."""
        if nbr_idx is None:
            nbr_idx = knn_indices(sample.cloud.positions, sample.mask, self.k)
        f_raw = self.encoder.forward(self.encoder_input(sample), nbr_idx, sample.mask)
        f_norm = f_raw.l2_normalize_rows()
        if feature_noise is not None:
            f_norm = f_norm + feature_noise
        logits = self.head.forward(f_norm)
        return f_raw, f_norm, logits

    # -- parameters ----------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        if self.projection is not None:
            out.update({f"proj.{k}": v for k, v in self.projection.params.items()})
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named_params().values())

    def zero_grads(self) -> None:
        for t in self.named_params().values():
            t.zero_grad()

    def freeze(self) -> None:
        self.trainable = False
        self.encoder.trainable = False
        for t in self.named_params().values():
            t.requires_grad = False

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.named_params().items()}
        state["meta.widths"] = np.array(self.widths, dtype=np.float64)
        state["meta.n_classes"] = np.array([self.n_classes], dtype=np.float64)
        state["meta.k"] = np.array([self.k], dtype=np.float64)
        state["meta.project_to"] = np.array(
            [-1.0 if self.project_to is None else self.project_to])
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_params().items():
            if name not in state:
                raise DataError(f"checkpoint is missing buffer {name!r}")
            if state[name].shape != t.data.shape:
                raise DataError(f"checkpoint buffer {name!r} has shape "
                                f"{state[name].shape}, expected {t.data.shape}")
            t.data[...] = state[name]

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray], trainable: bool = True) -> "SegModel":
        widths = tuple(int(w) for w in state["meta.widths"])
        project_to = int(state["meta.project_to"][0])
        model = cls(widths, int(state["meta.n_classes"][0]),
                    k=int(state["meta.k"][0]), trainable=trainable,
                    project_to=None if project_to < 0 else project_to)
        model.load_state(state)
        return model


def make_teacher(d_in: int, n_classes: int, d_out: int = DEFAULT_HIDDEN,
                 k: int = DEFAULT_K, seed: int = 0) -> SegModel:
    """Frozen-to-be teacher: widths (3 + d_in, d_out, d_out)."""
    return SegModel((3 + d_in, d_out, d_out), n_classes, k=k, seed=seed)


def make_student_from_teacher(teacher: SegModel, seed: int) -> SegModel:
    """Half-width student plus a learned projection back to teacher channels.

    All widths except the input are halved (rounded up), giving roughly a
    quarter of the dense parameters per hidden layer; the projection is
    initialized near-orthogonal. The student head starts as the teacher head
    composed with the projection, so improving the feature-mimicry terms and
    improving classification move the head input the same way from step one.
    """
    widths = (teacher.widths[0],) + tuple(-(-w // 2) for w in teacher.widths[1:])
    student = SegModel(widths, teacher.n_classes, k=teacher.k, seed=seed,
                       project_to=teacher.encoder.d_out)
    student.head.w.data[...] = student.projection.w.data @ teacher.head.w.data
    student.head.b.data[...] = teacher.head.b.data
    dense_teacher = sum(t.data.size for n, t in teacher.named_params().items())
    dense_student = sum(t.data.size for n, t in student.named_params().items()
                        if not n.startswith("proj."))
    # The 3x compression ratio only holds once weight matrices dominate the
    # bias vectors, so skip the check for very narrow debug models.
    if teacher.encoder.d_out >= 64 and dense_student * 3 >= dense_teacher:
        raise DataError("student is not small enough: "
                        f"{dense_student} vs teacher {dense_teacher}")
    return student


# ---------------------------------------------------------------------------
# Checkpoint format: magic "SRKDCKPT1", little-endian u32 buffer count, then
# per buffer: u32 name length, name bytes (utf-8), u32 ndim, u32 dims,
# float64 payload. Buffers are written in sorted name order.
# ---------------------------------------------------------------------------

def save_checkpoint(state: dict[str, np.ndarray], path) -> None:
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype=np.float64)
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic")
    off = len(_CKPT_MAGIC)
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        state[name] = arr.copy()
    if off != len(raw):
        raise ParseError(f"{path}: trailing bytes after last buffer")
    return state
