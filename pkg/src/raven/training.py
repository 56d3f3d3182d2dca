"""Losses, Adam optimizer, evaluation metrics, and the train loop.

Training is a single sequential optimizer stream: gradient accumulation
over a fixed-order shuffled batch, one Adam step per batch, checkpoint
selection on validation loss. Everything is determined by the config
seed, so identical configs reproduce logs and checkpoints byte for byte.

The regression loss is L1, matching the headline mean-absolute-error
metric. Binary accuracy excludes exact-zero labels (their polarity is
undefined) and counts a zero prediction as positive; both choices are
configurable on ``compute_metrics``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import AlignedUtterance
from .errors import ValidationError
from .model import RavenModel, UtteranceEncoding
from .nn import ParamStore
from .tensor import Tape, Tensor, absolute, accumulate_grad, backward, make_node, scale, sub, tensor, tsum

__all__ = [
    "TrainConfig",
    "MetricsReport",
    "loss",
    "Adam",
    "compute_metrics",
    "train",
    "evaluate",
    "TrainResult",
]

log = logging.getLogger("raven.training")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 0.005
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16      # gradient-accumulation count
    patience: int = 10        # early stop on validation loss
    seed: int = 0
    clip_norm: float = 5.0    # global gradient-norm clip; <= 0 disables

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValidationError(f"train.epochs must be >= 0, got {self.epochs!r}")
        if not (self.learning_rate > 0):
            raise ValidationError(f"train.learning_rate must be > 0, got {self.learning_rate!r}")
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValidationError("train.adam_beta1/adam_beta2 must lie in (0, 1)")
        if not (self.adam_eps > 0):
            raise ValidationError("train.adam_eps must be > 0")
        if self.batch_size < 1:
            raise ValidationError(f"train.batch_size must be >= 1, got {self.batch_size!r}")
        if self.patience < 1:
            raise ValidationError(f"train.patience must be >= 1, got {self.patience!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "batch_size": self.batch_size,
            "patience": self.patience,
            "seed": self.seed,
            "clip_norm": self.clip_norm,
        }

    @classmethod
    def from_dict(cls, data: dict, where: str = "train") -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown {where} config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over classes, numerically stable."""
    z = logits.data
    y = targets
    with np.errstate(over="ignore"):
        per_class = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        sig = 1.0 / (1.0 + np.exp(-z))
    k = z.size

    def bwd(g):
        accumulate_grad(logits, (sig - y) * (float(g) / k))

    return make_node(np.float64(per_class.mean()), "bce_with_logits", (logits,), bwd)


def loss(prediction: Tensor, label, task: str) -> Tensor:
    """Scalar training loss: L1 for regression, mean BCE for multilabel."""
    if task == "regression":
        if prediction.data.size != 1:
            raise ValidationError(f"regression prediction must be scalar, got shape {prediction.shape}")
        return tsum(absolute(sub(prediction, tensor(np.full(prediction.shape, float(label))))))
    if task == "multilabel":
        target = np.asarray(label, dtype=np.float64)
        if prediction.data.shape != target.shape:
            raise ValidationError(
                f"multilabel prediction shape {prediction.shape} does not match label {target.shape}"
            )
        return _bce_with_logits(prediction, target)
    raise ValidationError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction and optional global-norm clipping.

    ``step`` consumes the gradients accumulated on the store's tensors
    and zeroes them afterwards. A non-finite gradient anywhere skips the
    step entirely (and still zeroes), bumping ``anomaly_count``.
    """

    def __init__(self, store: ParamStore, config: TrainConfig):
        self.store = store
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in store.items()}
        self.anomaly_count = 0

    def step(self) -> bool:
        c = self.config
        grads = {}
        sq_norm = 0.0
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                self.anomaly_count += 1
                log.warning("non-finite gradient in %s; skipping optimizer step", name)
                self.store.zero_grads()
                return False
            grads[name] = g
            sq_norm += float(np.sum(g * g))
        if c.clip_norm > 0:
            total = math.sqrt(sq_norm)
            if total > c.clip_norm:
                factor = c.clip_norm / total
                grads = {name: g * factor for name, g in grads.items()}
        self.t += 1
        bc1 = 1.0 - c.adam_beta1 ** self.t
        bc2 = 1.0 - c.adam_beta2 ** self.t
        for name, p in self.store.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= c.adam_beta1
            m += (1.0 - c.adam_beta1) * g
            v *= c.adam_beta2
            v += (1.0 - c.adam_beta2) * (g * g)
            p.data -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
        self.store.zero_grads()
        return True


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Evaluation summary; regression fields or per-class lists apply
    depending on the task."""

    task: str
    sample_count: int
    mae: float | None = None
    correlation: float | None = None
    acc2: float | None = None
    acc7: float | None = None
    f1: float | None = None
    class_acc2: list[float] | None = None
    class_f1: list[float] | None = None

    def to_dict(self) -> dict:
        out = {"task": self.task, "sample_count": self.sample_count}
        for key in ("mae", "correlation", "acc2", "acc7", "f1"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        if self.class_acc2 is not None:
            out["class_acc2"] = self.class_acc2
            out["class_f1"] = self.class_f1
        return out


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _binary_f1(pred_pos: np.ndarray, true_pos: np.ndarray) -> float:
    tp = float(np.sum(pred_pos & true_pos))
    fp = float(np.sum(pred_pos & ~true_pos))
    fn = float(np.sum(~pred_pos & true_pos))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_metrics(
    preds,
    labels,
    task: str = "regression",
    exclude_zero_labels: bool = True,
    zero_prediction_positive: bool = True,
) -> MetricsReport:
    """Score predictions against labels.

    Regression: MAE, Pearson correlation on raw values, binary accuracy
    and F1 on the sign (boundary at 0), and seven-class accuracy where
    both sides are binned to the nearest integer clamped to [-3, 3].
    Multilabel: per-class accuracy and F1 at a 0.5 sigmoid threshold.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValidationError(f"preds shape {preds.shape} does not match labels {labels.shape}")
    if task == "regression":
        if preds.ndim != 1:
            raise ValidationError(f"regression metrics need 1-D inputs, got shape {preds.shape}")
        n = preds.shape[0]
        if n < 2:
            raise ValidationError("need at least two samples to compute the correlation")
        mae = float(np.mean(np.abs(preds - labels)))
        pc = preds - preds.mean()
        lc = labels - labels.mean()
        denom = math.sqrt(float(np.sum(pc * pc)) * float(np.sum(lc * lc)))
        correlation = float(np.sum(pc * lc) / denom) if denom > 0 else 0.0
        mask = labels != 0.0 if exclude_zero_labels else np.ones(n, dtype=bool)
        if zero_prediction_positive:
            pred_pos = preds >= 0.0
        else:
            pred_pos = preds > 0.0
        true_pos = labels > 0.0
        acc2 = float(np.mean(pred_pos[mask] == true_pos[mask])) if mask.any() else 0.0
        f1 = _binary_f1(pred_pos[mask], true_pos[mask]) if mask.any() else 0.0
        bins_p = np.clip(_round_half_away(preds), -3, 3)
        bins_l = np.clip(_round_half_away(labels), -3, 3)
        acc7 = float(np.mean(bins_p == bins_l))
        return MetricsReport(
            task=task, sample_count=n, mae=mae, correlation=correlation, acc2=acc2, acc7=acc7, f1=f1
        )
    if task == "multilabel":
        if preds.ndim != 2:
            raise ValidationError(f"multilabel metrics need [n, k] inputs, got shape {preds.shape}")
        n, k = preds.shape
        if n < 2:
            raise ValidationError("need at least two samples to compute metrics")
        with np.errstate(over="ignore"):
            probs = 1.0 / (1.0 + np.exp(-preds))
        pred_pos = probs >= 0.5
        true_pos = labels > 0.5
        class_acc2 = [float(np.mean(pred_pos[:, j] == true_pos[:, j])) for j in range(k)]
        class_f1 = [_binary_f1(pred_pos[:, j], true_pos[:, j]) for j in range(k)]
        return MetricsReport(
            task=task, sample_count=n, class_acc2=class_acc2, class_f1=class_f1
        )
    raise ValidationError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# Train / evaluate loops
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_valid_loss: float
    log_entries: list[dict] = field(default_factory=list)


def _forward_loss(model: RavenModel, utt: AlignedUtterance) -> Tensor:
    enc, _ = model.forward(utt, collect_shifts=False)
    return loss(enc.prediction, utt.label, model.config.task)


def batch_gradients(
    model: RavenModel, batch: list[AlignedUtterance], scale_factor: float = 1.0
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Accumulate gradients over a batch, one utterance at a time.

    Each utterance's full gradient is reduced first and then added to
    the batch buffer, so the result is bitwise equal to the sum of
    per-utterance gradients in batch order.
    """
    sums: dict[str, np.ndarray] = {name: np.zeros_like(t.data) for name, t in model.store.items()}
    losses: list[float] = []
    for utt in batch:
        model.store.zero_grads()
        with Tape():
            utt_loss = _forward_loss(model, utt)
            backward(scale(utt_loss, scale_factor))
        losses.append(utt_loss.item())
        for name, t in model.store.items():
            if t.grad is not None:
                sums[name] += t.grad
    model.store.zero_grads()
    return sums, losses


def _split_losses(model: RavenModel, utterances: list[AlignedUtterance]) -> float:
    values = [_forward_loss(model, u).item() for u in utterances]
    return float(np.mean(values)) if values else 0.0


def predict_split(model: RavenModel, utterances: list[AlignedUtterance], parallel: int | None = None):
    """Forward-only predictions over a split, in split order.

    ``parallel`` fans evaluation out over worker threads (read-only
    parameters, per-thread tapes are irrelevant since no tape is active);
    results merge back in index order, so output is order-deterministic.
    """
    def one(utt):
        enc, _ = model.forward(utt, collect_shifts=False)
        return enc.prediction.data.copy()

    if parallel and parallel > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=parallel) as pool:
            preds = list(pool.map(one, utterances))
    else:
        preds = [one(u) for u in utterances]
    return preds


def evaluate(model: RavenModel, utterances: list[AlignedUtterance], parallel: int | None = None) -> MetricsReport:
    """Forward-only metrics on a split; never mutates parameters."""
    preds = predict_split(model, utterances, parallel=parallel)
    if model.config.task == "regression":
        p = np.array([float(v[0]) for v in preds])
        y = np.array([float(u.label) for u in utterances])
    else:
        p = np.stack(preds)
        y = np.stack([np.asarray(u.label, dtype=np.float64) for u in utterances])
    return compute_metrics(p, y, task=model.config.task)


def train(
    model: RavenModel,
    train_split: list[AlignedUtterance],
    valid_split: list[AlignedUtterance],
    config: TrainConfig,
) -> TrainResult:
    """Deterministic training loop with best-validation checkpointing.

    Each epoch shuffles the train split with the config-seeded generator,
    accumulates gradients over ``batch_size`` utterances (loss scaled by
    the actual batch length), and takes one Adam step per batch. Stops
    early after ``patience`` epochs without validation improvement.
    """
    config.validate()
    if not train_split or not valid_split:
        raise ValidationError("train and valid splits must be nonempty")
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.store, config)
    result = TrainResult(
        best_state=model.store.state_arrays(), best_epoch=0, best_valid_loss=float("inf")
    )
    if config.epochs == 0:
        return result
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_split))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_split[i] for i in order[start : start + config.batch_size]]
            grads, batch_losses = batch_gradients(model, batch, scale_factor=1.0 / len(batch))
            for name, t in model.store.items():
                t.grad = grads[name]
            optimizer.step()
            epoch_losses.extend(batch_losses)
        train_loss = float(np.mean(epoch_losses))
        valid_loss = _split_losses(model, valid_split)
        valid_entry = {"epoch": epoch, "split": "valid", "loss": valid_loss}
        if len(valid_split) >= 2:
            valid_entry["metrics"] = evaluate(model, valid_split).to_dict()
        result.log_entries.append({"epoch": epoch, "split": "train", "loss": train_loss})
        result.log_entries.append(valid_entry)
        log.info("epoch %d: train loss %.4f, valid loss %.4f", epoch, train_loss, valid_loss)
        if valid_loss < result.best_valid_loss:
            result.best_valid_loss = valid_loss
            result.best_epoch = epoch
            result.best_state = model.store.state_arrays()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                log.info("early stop at epoch %d (no improvement for %d epochs)", epoch, config.patience)
                break
    model.store.load_state(result.best_state)
    return result
