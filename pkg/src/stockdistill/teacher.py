"""Future-aware teacher: fuse historical embeddings with encoded future
trends through multi-channel attention, predict the horizon trend, and
optimize with cross-entropy.

Fusion builds one scalar per channel d as the bilinear form p' F_d q over
the historical embedding p and future embedding q, scores the channels with
a scaled elementwise query-key product, softmaxes the scores, and gates the
channels.  The gate is rescaled by the channel count so that uniform
attention passes the bilinear channels through unchanged.  A concatenation
variant of the fusion stage is available for ablations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import ndgrad as nd
from .marketdata import WindowSample
from .stgnn import STConfig, STModel, bind_params, st_forward_bound

logger = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.85, 0.075, 0.075)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by both training phases."""

    learning_rate: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    delta: float = 0.04
    horizon: int = 20  # T
    lookback: int = 20  # L
    lam: float = 0.5  # distillation weight, student phase only
    tau: float = 0.5  # attention temperature
    unfreeze_head: bool = False  # let the student fine-tune the shared head

    def __post_init__(self):
        problems = []
        if self.learning_rate <= 0:
            problems.append("learning_rate must be > 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.lam < 0:
            problems.append("lam must be >= 0")
        if self.tau <= 0:
            problems.append("tau must be > 0")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))


@dataclass(frozen=True)
class TeacherConfig:
    """Architecture of the teacher: encoder dims and fusion variant."""

    st: STConfig = field(default_factory=lambda: STConfig(output_dim=32))
    horizon: int = 20
    future_dim: int = 16  # width of the future-trend embedding
    fusion_dim: int = 32  # number of fusion channels, also the output width
    tau: float = 0.5
    k_d: float | None = None  # score scaling factor; defaults to fusion_dim
    fusion_kind: str = "attention"  # "attention" | "concat"

    def __post_init__(self):
        if self.fusion_kind not in ("attention", "concat"):
            raise ValueError(f"unknown fusion kind '{self.fusion_kind}'")
        if min(self.horizon, self.future_dim, self.fusion_dim) < 1:
            raise ValueError("dims must be >= 1")
        if self.tau <= 0 or (self.k_d is not None and self.k_d <= 0):
            raise ValueError("tau and k_d must be positive")

    @property
    def scaling(self) -> float:
        return float(self.fusion_dim if self.k_d is None else self.k_d)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class TeacherModel:
    """Parameter collection for the future-aware teacher."""

    def __init__(self, config: TeacherConfig, input_dim: int, params: dict[str, np.ndarray]):
        self.config = config
        self.input_dim = input_dim
        self.params = params

    @classmethod
    def init(cls, config: TeacherConfig, input_dim: int,
             rng: np.random.Generator) -> "TeacherModel":
        st = STModel.init(config.st, input_dim, rng)
        params = {f"st.{k}": v for k, v in st.params.items()}
        t, d_f, d_p, d = config.horizon, config.future_dim, config.st.output_dim, config.fusion_dim
        params["future.0.w"] = _uniform(rng, t, (t, d_f))
        params["future.0.b"] = np.zeros(d_f)
        params["future.1.w"] = _uniform(rng, d_f, (d_f, d_f))
        params["future.1.b"] = np.zeros(d_f)
        if config.fusion_kind == "attention":
            params["fusion.f"] = _uniform(rng, d_p * d_f, (d, d_p, d_f))
            params["fusion.wq"] = _uniform(rng, d_f, (d_f, d))
            params["fusion.wk"] = _uniform(rng, d_p, (d_p, d))
        else:
            params["fusion.cat.w"] = _uniform(rng, d_p + d_f, (d_p + d_f, d))
            params["fusion.cat.b"] = np.zeros(d)
        params["head.0.w"] = _uniform(rng, d, (d, d))
        params["head.0.b"] = np.zeros(d)
        params["head.1.w"] = _uniform(rng, d, (d, 2))
        params["head.1.b"] = np.zeros(2)
        return cls(config, input_dim, params)

    def head_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items() if k.startswith("head.")}

    def bind(self, tape: nd.Tape | None) -> dict[str, nd.Tensor]:
        return bind_params(self.params, tape)


# ---------------------------------------------------------------------------
# forward pieces

def encode_future(params: Mapping[str, nd.Tensor], trend) -> nd.Tensor:
    """[R, T] future-trend bits -> nonnegative [R, D_f] embedding."""
    x = trend if isinstance(trend, nd.Tensor) else nd.constant(np.asarray(trend, np.float64))
    hidden = nd.relu(nd.add(nd.matmul(x, params["future.0.w"]), params["future.0.b"]))
    return nd.relu(nd.add(nd.matmul(hidden, params["future.1.w"]), params["future.1.b"]))


def vmv_channels(p: nd.Tensor, q: nd.Tensor, f3: nd.Tensor) -> nd.Tensor:
    """Bilinear channels V[r, d] = p[r]' F[d] q[r] for stacked rows."""
    d, d_p, d_f = f3.shape
    rows = p.shape[0]
    if p.shape != (rows, d_p) or q.shape != (rows, d_f):
        raise nd.ShapeError(f"vmv_channels: p {p.shape}, q {q.shape} incompatible with "
                            f"channel stack {f3.shape}")
    flat = nd.reshape(nd.transpose(f3, (1, 0, 2)), (d_p, d * d_f))
    pf = nd.reshape(nd.matmul(p, flat), (rows, d, d_f))
    q_col = nd.reshape(q, (rows, d_f, 1))
    return nd.reshape(nd.batched_matmul(pf, q_col), (rows, d))


def fuse_attention(params: Mapping[str, nd.Tensor], p: nd.Tensor, q: nd.Tensor,
                   config: TeacherConfig) -> nd.Tensor:
    """Channel-gated fusion: softmaxed query-key scores weight the bilinear
    channels; uniform scores reproduce the channels exactly."""
    v = vmv_channels(p, q, params["fusion.f"])
    query = nd.matmul(q, params["fusion.wq"])
    key = nd.matmul(p, params["fusion.wk"])
    scores = nd.scale(nd.mul(query, key), config.tau / np.sqrt(config.scaling))
    gate = nd.softmax(scores, axis=-1)
    return nd.scale(nd.mul(gate, v), float(config.fusion_dim))


def attention_gate(params: Mapping[str, nd.Tensor], p: nd.Tensor, q: nd.Tensor,
                   config: TeacherConfig) -> np.ndarray:
    """The channel attention weights (rows sum to 1); evaluation helper."""
    query = nd.matmul(q, params["fusion.wq"])
    key = nd.matmul(p, params["fusion.wk"])
    scores = nd.scale(nd.mul(query, key), config.tau / np.sqrt(config.scaling))
    return nd.softmax(scores, axis=-1).data


def fuse_concat(params: Mapping[str, nd.Tensor], p: nd.Tensor, q: nd.Tensor,
                config: TeacherConfig) -> nd.Tensor:
    """Ablation fusion: linear map of [p || q] with ReLU."""
    joined = nd.concat([p, q], axis=-1)
    return nd.relu(nd.add(nd.matmul(joined, params["fusion.cat.w"]), params["fusion.cat.b"]))


def predict_logits(params: Mapping[str, nd.Tensor], h: nd.Tensor) -> nd.Tensor:
    hidden = nd.relu(nd.add(nd.matmul(h, params["head.0.w"]), params["head.0.b"]))
    return nd.add(nd.matmul(hidden, params["head.1.w"]), params["head.1.b"])


def predict(params: Mapping[str, nd.Tensor], h: nd.Tensor) -> nd.Tensor:
    """Row-stochastic class probabilities; column 1 ranks upward moves."""
    return nd.softmax(predict_logits(params, h), axis=-1)


def cross_entropy(logits: nd.Tensor, labels: np.ndarray) -> nd.Tensor:
    """Mean negative log-likelihood of binary labels under the logits."""
    labels = np.asarray(labels).reshape(-1)
    onehot = np.zeros((labels.size, 2))
    onehot[np.arange(labels.size), labels.astype(int)] = 1.0
    ls = nd.log_softmax(logits, axis=-1)
    return nd.scale(nd.reduce_mean(nd.reduce_sum(nd.mul(ls, nd.constant(onehot)), axis=-1)), -1.0)


def teacher_forward(config: TeacherConfig, params: Mapping[str, nd.Tensor],
                    history: np.ndarray, future_trend: np.ndarray,
                    adjacency) -> tuple[nd.Tensor, nd.Tensor]:
    """Returns (fused representations [R, D], logits [R, 2]) where R is the
    number of window-stock rows."""
    st_params = {k[3:]: v for k, v in params.items() if k.startswith("st.")}
    emb = st_forward_bound(config.st, st_params, history, adjacency)
    if len(emb.shape) == 3:
        emb = nd.reshape(emb, (emb.shape[0] * emb.shape[1], emb.shape[2]))
    trend = np.asarray(future_trend, np.float64).reshape(-1, config.horizon)
    q = encode_future(params, trend)
    if config.fusion_kind == "attention":
        fused = fuse_attention(params, emb, q, config)
    else:
        fused = fuse_concat(params, emb, q, config)
    return fused, predict_logits(params, fused)


def teacher_representations(model: TeacherModel, history: np.ndarray,
                            future_trend: np.ndarray, adjacency) -> np.ndarray:
    """Evaluation-mode fused representations used as distillation targets."""
    fused, _ = teacher_forward(model.config, model.bind(None), history, future_trend, adjacency)
    return fused.data


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_acc: float
    val_mcc: float
    distill_loss: float | None = None


def chronological_split(samples: Sequence[WindowSample],
                        fractions: tuple[float, float, float] = SPLIT_FRACTIONS):
    """Train/validation/test split preserving window order."""
    n = len(samples)
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    train = list(samples[:n_train])
    val = list(samples[n_train:n_train + n_val])
    test = list(samples[n_train + n_val:])
    if not train or not val or not test:
        raise ValueError(f"split of {n} windows leaves an empty part "
                         f"(train={len(train)}, val={len(val)}, test={len(test)})")
    return train, val, test


def _stack_batch(batch: Sequence[WindowSample]):
    history = np.stack([w.history for w in batch])
    future = np.stack([w.future_trend for w in batch]).astype(np.float64)
    labels = np.concatenate([w.label for w in batch]).astype(int)
    return history, future, labels


def _accuracy_mcc(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    # local lightweight metrics; the reporting versions live in evalkit
    pred = pred.astype(bool)
    truth = truth.astype(bool)
    acc = float(np.mean(pred == truth)) if pred.size else 0.0
    tp = float(np.sum(pred & truth))
    tn = float(np.sum(~pred & ~truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / np.sqrt(denom) if denom > 0 else 0.0
    return acc, float(mcc)


def evaluate_teacher(model: TeacherModel, samples: Sequence[WindowSample],
                     adjacency, chunk: int = 128) -> tuple[float, float]:
    """Validation ACC/MCC of the teacher itself (it sees future trends)."""
    preds, truths = [], []
    for start in range(0, len(samples), chunk):
        batch = samples[start:start + chunk]
        history, future, labels = _stack_batch(batch)
        _, logits = teacher_forward(model.config, model.bind(None), history, future, adjacency)
        preds.append(np.argmax(logits.data, axis=-1))
        truths.append(labels)
    return _accuracy_mcc(np.concatenate(preds), np.concatenate(truths))


def train_teacher(samples: Sequence[WindowSample], adjacency, config: TrainConfig,
                  model_config: TeacherConfig | None = None,
                  ) -> tuple[TeacherModel, list[EpochLog]]:
    """Cross-entropy training with adaptive gradients and early stopping on
    validation accuracy; returns the best-validation snapshot."""
    train, val, _ = chronological_split(samples)
    input_dim = train[0].history.shape[-1]
    horizon = train[0].future_trend.shape[-1]
    if model_config is None:
        model_config = TeacherConfig(horizon=horizon, tau=config.tau)
    if model_config.horizon != horizon:
        raise ValueError(f"model horizon {model_config.horizon} != window horizon {horizon}")

    rng_init = np.random.default_rng([config.seed, 1])
    rng_batch = np.random.default_rng([config.seed, 2])
    model = TeacherModel.init(model_config, input_dim, rng_init)
    opt = nd.Adam(model.params, config.learning_rate)

    best = (-1.0, None)
    log: list[EpochLog] = []
    stall = 0
    for epoch in range(config.max_epochs):
        order = rng_batch.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            history, future, labels = _stack_batch(batch)
            tape = nd.Tape()
            bound = model.bind(tape)
            _, logits = teacher_forward(model_config, bound, history, future, adjacency)
            loss = cross_entropy(logits, labels)
            grads = nd.backward(loss)
            opt.step({name: grads[t.tape_id].data for name, t in bound.items()
                      if t.tape_id in grads})
            losses.append(loss.item())
        val_acc, val_mcc = evaluate_teacher(model, val, adjacency)
        log.append(EpochLog(epoch, float(np.mean(losses)), val_acc, val_mcc))
        logger.debug("teacher epoch %d loss %.4f val_acc %.4f", epoch, log[-1].train_loss, val_acc)
        if val_acc > best[0]:
            best = (val_acc, {k: v.copy() for k, v in model.params.items()})
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    if best[1] is not None:
        model.params.update(best[1])
    return model, log


def write_log_csv(path, log: Sequence[EpochLog], with_distill: bool = False) -> None:
    lines = ["epoch,pred_loss,distill_loss,val_acc,val_mcc" if with_distill
             else "epoch,train_loss,val_acc,val_mcc"]
    for row in log:
        if with_distill:
            lines.append(f"{row.epoch},{row.train_loss:.10g},{row.distill_loss:.10g},"
                         f"{row.val_acc:.10g},{row.val_mcc:.10g}")
        else:
            lines.append(f"{row.epoch},{row.train_loss:.10g},{row.val_acc:.10g},{row.val_mcc:.10g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
