"""Student training under teacher supervision.

The student encoder sees history only; its embeddings are pulled toward
the teacher's future-aware representations by a kernel dependence measure
(biased HSIC estimator, tr(KHLH)/(m-1)^2) or by plain MSE for the
ablation.  By default each stock's embedding coordinates act as the HSIC
samples, matching the D x D kernel matrices of the distillation loss; a
batch-samples mode treating rows as samples is available.  Maximizing
dependence means the HSIC term enters the loss negated; the literal sign
is available behind the config.

The prediction head is copied from the converged teacher and frozen: it
participates in the forward pass as constants, so no gradient ever reaches
it.  With lam == 0 the teacher is never consulted and training reduces
exactly to the plain backbone under the shared head.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import ndgrad as nd
from .marketdata import WindowSample
from .stgnn import STConfig, STModel, bind_params, st_forward_bound
from .teacher import (
    EpochLog,
    TeacherModel,
    TrainConfig,
    _accuracy_mcc,
    _stack_batch,
    chronological_split,
    cross_entropy,
    predict_logits,
    teacher_forward,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HsicConfig:
    """Kernel dependence settings for the distillation loss."""

    kernel: str = "rbf"  # "rbf" | "linear"
    bandwidth: float | None = None  # None -> median heuristic
    mode: str = "dims"  # "dims": coordinates are samples; "batch": rows are
    sign: str = "maximize"  # "maximize" -> loss is -HSIC; "literal" -> +HSIC
    objective: str = "hsic"  # "hsic" | "mse" (ablation)

    def __post_init__(self):
        if self.kernel not in ("rbf", "linear"):
            raise ValueError(f"unknown kernel '{self.kernel}'")
        if self.mode not in ("dims", "batch"):
            raise ValueError(f"unknown sample mode '{self.mode}'")
        if self.sign not in ("maximize", "literal"):
            raise ValueError(f"unknown sign '{self.sign}'")
        if self.objective not in ("hsic", "mse"):
            raise ValueError(f"unknown objective '{self.objective}'")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("fixed bandwidth must be positive")


# ---------------------------------------------------------------------------
# HSIC on plain arrays

def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    if x.ndim == 1:
        diff = x[:, None] - x[None, :]
        return diff * diff
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.maximum(d2, 0.0)


def median_bandwidth(x: np.ndarray) -> float:
    """Median pairwise distance; falls back to 1 when all points coincide."""
    d2 = _pairwise_sq_dists(np.asarray(x, np.float64))
    upper = d2[np.triu_indices(d2.shape[0], k=1)]
    med = float(np.median(np.sqrt(upper))) if upper.size else 0.0
    return med if med > 0 else 1.0


def _kernel_matrix(x: np.ndarray, cfg: HsicConfig) -> np.ndarray:
    if cfg.kernel == "linear":
        v = x[:, None] if x.ndim == 1 else x
        return v @ v.T
    sigma = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(x)
    return np.exp(-_pairwise_sq_dists(x) / (2.0 * sigma * sigma))


def hsic(x, y, cfg: HsicConfig = HsicConfig()) -> float:
    """Biased HSIC estimate between two samples of equal size.

    1-D inputs are scalar samples; 2-D inputs are rows of vector samples.
    Nonnegative up to roundoff for positive semidefinite kernels.
    """
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    m = x.shape[0]
    if m < 2:
        raise ValueError("HSIC needs at least 2 samples")
    k = _kernel_matrix(x, cfg)
    l = _kernel_matrix(y, cfg)
    h = np.eye(m) - np.ones((m, m)) / m
    return float(np.trace(k @ h @ l @ h) / (m - 1) ** 2)


# ---------------------------------------------------------------------------
# vectorized row-wise kernels (each row's coordinates are the samples)

def _rowwise_sq_dists(values: np.ndarray) -> np.ndarray:
    return (values[:, :, None] - values[:, None, :]) ** 2


def _rowwise_gammas(values: np.ndarray, cfg: HsicConfig) -> np.ndarray:
    """Per-row RBF exponents 1/(2 sigma^2); medians fall back to 1."""
    rows, d = values.shape
    if cfg.bandwidth is not None:
        return np.full(rows, 1.0 / (2.0 * cfg.bandwidth ** 2))
    iu = np.triu_indices(d, k=1)
    dists = np.sqrt(_rowwise_sq_dists(values)[:, iu[0], iu[1]])
    med = np.median(dists, axis=1)
    med = np.where(med > 0, med, 1.0)
    return 1.0 / (2.0 * med * med)


def _rowwise_kernels(values: np.ndarray, cfg: HsicConfig) -> np.ndarray:
    if cfg.kernel == "linear":
        return values[:, :, None] * values[:, None, :]
    gammas = _rowwise_gammas(values, cfg)
    return np.exp(-_rowwise_sq_dists(values) * gammas[:, None, None])


# ---------------------------------------------------------------------------
# differentiable distillation loss

def _per_stock_hsic(student: nd.Tensor, teacher_vals: np.ndarray,
                    cfg: HsicConfig) -> nd.Tensor:
    """Mean over rows of HSIC between the coordinate samples of each pair.

    Bandwidths come from the current values and are detached: the median
    heuristic is not differentiable.  The teacher side is a constant, so
    its centered kernel is precomputed; tr(KHLH) = sum(K * (HLH)) for
    symmetric kernels.
    """
    rows, d = student.shape
    if d < 2:
        raise ValueError("coordinate-mode HSIC needs embedding width >= 2")
    if cfg.kernel == "rbf":
        gammas = _rowwise_gammas(student.data, cfg)
        col = nd.reshape(student, (rows, d, 1))
        grid = nd.batched_matmul(col, nd.constant(np.ones((1, d))))
        diff = nd.sub(grid, nd.transpose(grid, (0, 2, 1)))
        scaled = nd.mul(nd.mul(diff, diff),
                        nd.constant(np.broadcast_to(-gammas[:, None, None],
                                                    (rows, d, d)).copy()))
        k = nd.exp(scaled)
    else:
        col = nd.reshape(student, (rows, d, 1))
        k = nd.batched_matmul(col, nd.transpose(col, (0, 2, 1)))
    h = np.eye(d) - np.ones((d, d)) / d
    l_centered = h @ _rowwise_kernels(teacher_vals, cfg) @ h
    traces = nd.reduce_sum(nd.mul(k, nd.constant(l_centered)), axis=(1, 2))
    return nd.scale(nd.reduce_mean(traces), 1.0 / (d - 1) ** 2)


def _batch_hsic(student: nd.Tensor, teacher_vals: np.ndarray, cfg: HsicConfig) -> nd.Tensor:
    """HSIC across batch rows as samples (kernel matrices are [R, R])."""
    rows, _ = student.shape
    if rows < 2:
        raise ValueError("batch-mode HSIC needs at least 2 rows")
    if cfg.kernel == "rbf":
        sigma = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(student.data)
        gamma = 1.0 / (2.0 * sigma * sigma)
        sq = nd.reduce_sum(nd.mul(student, student), axis=1)
        row = nd.matmul(nd.reshape(sq, (rows, 1)), nd.constant(np.ones((1, rows))))
        cross = nd.matmul(student, nd.transpose(student))
        d2 = nd.sub(nd.add(row, nd.transpose(row)), nd.scale(cross, 2.0))
        k = nd.exp(nd.scale(nd.relu(d2), -gamma))
    else:
        k = nd.matmul(student, nd.transpose(student))
    h = np.eye(rows) - np.ones((rows, rows)) / rows
    l_centered = h @ _kernel_matrix(teacher_vals, cfg) @ h
    trace = nd.reduce_sum(nd.mul(k, nd.constant(l_centered)))
    return nd.scale(trace, 1.0 / (rows - 1) ** 2)


def distill_loss(student_emb, teacher_emb, cfg: HsicConfig = HsicConfig()) -> nd.Tensor:
    """Representation-matching loss between student and teacher embeddings.

    HSIC objective: mean per-stock dependence between embedding coordinates,
    negated under the maximize-dependence sign.  MSE objective: mean squared
    difference.  The teacher side is always detached.
    """
    s = student_emb if isinstance(student_emb, nd.Tensor) else nd.constant(student_emb)
    t_vals = teacher_emb.data if isinstance(teacher_emb, nd.Tensor) else np.asarray(teacher_emb)
    if s.shape != t_vals.shape:
        raise nd.ShapeError(f"embedding shapes differ: {s.shape} vs {t_vals.shape}")
    if cfg.objective == "mse":
        diff = nd.sub(s, nd.constant(t_vals))
        return nd.reduce_mean(nd.mul(diff, diff))
    value = _per_stock_hsic(s, t_vals, cfg) if cfg.mode == "dims" else _batch_hsic(s, t_vals, cfg)
    return nd.scale(value, -1.0) if cfg.sign == "maximize" else value


def combined_loss(pred_loss, distill, lam: float):
    """Weighted sum of the prediction and distillation terms."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if isinstance(pred_loss, nd.Tensor) or isinstance(distill, nd.Tensor):
        p = pred_loss if isinstance(pred_loss, nd.Tensor) else nd.constant(pred_loss)
        d = distill if isinstance(distill, nd.Tensor) else nd.constant(distill)
        return nd.add(p, nd.scale(d, lam))
    return pred_loss + lam * distill


# ---------------------------------------------------------------------------
# student model and training

class StudentModel:
    """History-only encoder plus the shared (normally frozen) head."""

    def __init__(self, st: STModel, head: dict[str, np.ndarray]):
        self.st = st
        self.head = head

    @property
    def params(self) -> dict[str, np.ndarray]:
        merged = {f"st.{k}": v for k, v in self.st.params.items()}
        merged.update(self.head)
        return merged

    @classmethod
    def from_params(cls, config: STConfig, input_dim: int,
                    params: Mapping[str, np.ndarray]) -> "StudentModel":
        st = {k[3:]: np.array(v) for k, v in params.items() if k.startswith("st.")}
        head = {k: np.array(v) for k, v in params.items() if k.startswith("head.")}
        return cls(STModel(config, input_dim, st), head)


def fresh_head(dim: int, seed: int) -> dict[str, np.ndarray]:
    """Randomly initialized prediction head for teacher-less training."""
    rng = np.random.default_rng([seed, 3])
    bound = 1.0 / np.sqrt(dim)
    return {
        "head.0.w": rng.uniform(-bound, bound, (dim, dim)),
        "head.0.b": np.zeros(dim),
        "head.1.w": rng.uniform(-bound, bound, (dim, 2)),
        "head.1.b": np.zeros(2),
    }


def student_embed(student: StudentModel, history: np.ndarray, adjacency) -> np.ndarray:
    from .stgnn import st_forward

    return st_forward(student.st, history, adjacency)


def student_infer(student: StudentModel, history: np.ndarray, adjacency) -> np.ndarray:
    """Class probabilities from history alone; the signature admits no
    future-trend input, which is the leak guard."""
    emb = student_embed(student, history, adjacency)
    flat = emb.reshape(-1, emb.shape[-1])
    probs = nd.softmax(predict_logits(bind_params(student.head, None), nd.constant(flat)),
                       axis=-1).data
    return probs.reshape(*emb.shape[:-1], 2)


def evaluate_student(student: StudentModel, samples: Sequence[WindowSample],
                     adjacency, chunk: int = 128):
    """Per-decision outputs over windows: (pred bits, truth bits, [W x N]
    up-probabilities aligned to window order)."""
    preds, truths, prob_up = [], [], []
    for start in range(0, len(samples), chunk):
        batch = samples[start:start + chunk]
        history = np.stack([w.history for w in batch])
        probs = student_infer(student, history, adjacency)
        preds.append(np.argmax(probs, axis=-1).reshape(-1))
        prob_up.append(probs[..., 1])
        truths.append(np.concatenate([w.label for w in batch]).astype(int))
    return (np.concatenate(preds), np.concatenate(truths),
            np.concatenate(prob_up, axis=0))


def train_student(teacher: TeacherModel | None, samples: Sequence[WindowSample],
                  adjacency, config: TrainConfig, hsic_cfg: HsicConfig = HsicConfig(),
                  st_config: STConfig | None = None,
                  head: Mapping[str, np.ndarray] | None = None,
                  ) -> tuple[StudentModel, list[EpochLog]]:
    """Distillation phase: cross-entropy through the shared head plus the
    weighted representation loss over the encoder parameters."""
    train, val, _ = chronological_split(samples)
    input_dim = train[0].history.shape[-1]

    use_teacher = config.lam > 0
    if use_teacher and teacher is None:
        raise ValueError("lam > 0 requires a converged teacher")
    if teacher is not None:
        d = teacher.config.fusion_dim
        if st_config is None:
            st_config = STConfig(hidden_dim=teacher.config.st.hidden_dim,
                                 spatial_kind=teacher.config.st.spatial_kind,
                                 spatial_layers=teacher.config.st.spatial_layers,
                                 output_dim=d)
        if st_config.output_dim != d:
            raise ValueError(f"student output dim {st_config.output_dim} must equal "
                             f"teacher fusion dim {d} for representation matching")
        head = teacher.head_params()
    else:
        if st_config is None:
            raise ValueError("need st_config when training without a teacher")
        head = ({k: np.array(v) for k, v in head.items()} if head is not None
                else fresh_head(st_config.output_dim, config.seed))

    rng_init = np.random.default_rng([config.seed, 4])
    rng_batch = np.random.default_rng([config.seed, 5])
    st = STModel.init(st_config, input_dim, rng_init)
    student = StudentModel(st, head)

    opt = nd.Adam(st.params, config.learning_rate)
    head_opt = nd.Adam(head, config.learning_rate) if config.unfreeze_head else None

    best = (-1.0, None, None)
    log: list[EpochLog] = []
    stall = 0
    for epoch in range(config.max_epochs):
        order = rng_batch.permutation(len(train))
        pred_losses, distill_losses = [], []
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            history, future, labels = _stack_batch(batch)
            targets = None
            if use_teacher:
                targets = teacher_forward(teacher.config, teacher.bind(None),
                                          history, future, adjacency)[0].data
            tape = nd.Tape()
            st_bound = bind_params(st.params, tape)
            head_bound = bind_params(head, tape if config.unfreeze_head else None)
            emb = st_forward_bound(st_config, st_bound, history, adjacency)
            flat = nd.reshape(emb, (emb.shape[0] * emb.shape[1], emb.shape[2]))
            logits = predict_logits(head_bound, flat)
            pred_loss = cross_entropy(logits, labels)
            if use_teacher:
                d_loss = distill_loss(flat, targets, hsic_cfg)
                loss = combined_loss(pred_loss, d_loss, config.lam)
                distill_losses.append(d_loss.item())
            else:
                loss = pred_loss
            grads = nd.backward(loss)
            opt.step({name: grads[t.tape_id].data for name, t in st_bound.items()
                      if t.tape_id in grads})
            if head_opt is not None:
                head_opt.step({name: grads[t.tape_id].data for name, t in head_bound.items()
                               if t.tape_id in grads})
            pred_losses.append(pred_loss.item())
        val_pred, val_truth, _ = evaluate_student(student, val, adjacency)
        val_acc, val_mcc = _accuracy_mcc(val_pred, val_truth)
        log.append(EpochLog(epoch, float(np.mean(pred_losses)), val_acc, val_mcc,
                            float(np.mean(distill_losses)) if distill_losses else 0.0))
        logger.debug("student epoch %d pred %.4f distill %.4f val_acc %.4f",
                     epoch, log[-1].train_loss, log[-1].distill_loss, val_acc)
        if val_acc > best[0]:
            best = (val_acc, {k: v.copy() for k, v in st.params.items()},
                    {k: v.copy() for k, v in head.items()})
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    if best[1] is not None:
        st.params.update(best[1])
        head.update(best[2])
    return student, log
