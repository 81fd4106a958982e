"""Fine-tuning loop: cross-entropy, AdamW with decoupled weight decay and a
step learning-rate schedule, with best-validation-loss checkpoint selection."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Function, Tensor
from .checkpoint import Checkpoint
from .common import ConfigError, ReporterCallback, TrainingDivergedError
from .data import AugmentationPolicy, DatasetBundle, Split, augment_batch, batches
from .model import VisionTransformer

logger = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}
LOG_FIELDS = ("epoch", "train_loss", "val_loss", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 80
    lr_period: int = 25
    lr_factor: float = 0.5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    seed: int = 0
    precision: str = "float32"
    clip_norm: Optional[float] = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_period < 1:
            raise ConfigError(f"lr_period must be >= 1, got {self.lr_period}")
        if not 0 < self.lr_factor <= 1:
            raise ConfigError(f"lr_factor must be in (0, 1], got {self.lr_factor}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in PRECISIONS:
            raise ConfigError(
                f"precision must be one of {sorted(PRECISIONS)}, got '{self.precision}'"
            )
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(PRECISIONS[self.precision])

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown train key(s): {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """``lr * lr_factor ** (epoch // lr_period)``, constant within a period."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * cfg.lr_factor ** (epoch // cfg.lr_period)


class CrossEntropy(Function):
    def forward(self, logits, labels):
        if logits.ndim != 2:
            raise ValueError(f"cross_entropy expects B x K logits, got {logits.shape}")
        B, K = logits.shape
        labels = np.asarray(labels)
        if labels.shape != (B,):
            raise ValueError(f"Expected {B} labels, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= K):
            bad = labels[(labels < 0) | (labels >= K)][0]
            raise ValueError(f"Label {bad} outside [0, {K})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        self.probs = np.exp(log_probs)
        self.labels = labels
        return np.asarray(-log_probs[np.arange(B), labels].mean(), dtype=logits.dtype)

    def backward(self, grad):
        B = len(self.labels)
        delta = self.probs.copy()
        delta[np.arange(B), self.labels] -= 1.0
        return (grad * delta / B,)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    return CrossEntropy.apply(logits, labels=labels)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, Optional[np.ndarray]],
    state: OptimizerState,
    cfg: TrainConfig,
    lr: Optional[float] = None,
) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """One AdamW update; weight decay is applied to the parameters, never
    folded into the gradient. Missing gradients count as zero."""
    lr = cfg.lr if lr is None else lr
    if not state.m:
        state = OptimizerState.zeros_like(params)
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t

    updated = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / correction1
        v_hat = v / correction2
        step = m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta
        updated[name] = (theta - lr * step).astype(theta.dtype, copy=False)
    state.t = t
    return updated, state


class AdamW:
    """Applies ``adamw_step`` to the parameters of a model in place."""

    def __init__(self, params: Mapping[str, Tensor], cfg: TrainConfig) -> None:
        self.params = params
        self.cfg = cfg
        self.state = OptimizerState.zeros_like({k: t.data for k, t in params.items()})

    def step(self, lr: float) -> None:
        values = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items()}
        updated, self.state = adamw_step(values, grads, self.state, self.cfg, lr=lr)
        for name, tensor in self.params.items():
            tensor.data = updated[name]


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``.
    Returns the norm before clipping."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad = p.grad * scale
    return total


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: List[EpochLog]
    best_epoch: int
    best_val_loss: float


def evaluate_loss(model: VisionTransformer, split: Split, batch_size: int) -> float:
    """Mean cross-entropy over a split in eval mode."""
    total = 0.0
    with ad.no_grad():
        for batch in batches(split, batch_size, shuffle=False):
            logits = model.forward(batch.images).logits
            total += cross_entropy(logits, batch.labels).item() * len(batch)
    return total / len(split)


def fit(
    model: VisionTransformer,
    bundle: DatasetBundle,
    cfg: TrainConfig,
    policy: Optional[AugmentationPolicy] = None,
    reporter: Optional[ReporterCallback] = None,
) -> FitResult:
    """Train on the shuffled, augmented train split and keep the weights of
    the epoch with the strictly lowest validation loss."""
    policy = policy or AugmentationPolicy()
    train, val = bundle["train"], bundle["val"]
    optimizer = AdamW(model.params, cfg)
    dropout_rng = np.random.default_rng([cfg.seed, 1])

    log: List[EpochLog] = []
    best: Optional[Checkpoint] = None
    best_epoch, best_val = -1, float("inf")

    with ad.precision(model.dtype):
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(epoch, cfg)
            running, seen = 0.0, 0
            for b, batch in enumerate(batches(train, cfg.batch_size, cfg.seed, epoch)):
                images = augment_batch(
                    batch.images, batch.indices, policy, cfg.seed, epoch
                )
                ad.Tape.current().reset()
                model.zero_grad()
                logits = model.forward(images, training=True, rng=dropout_rng).logits
                loss = cross_entropy(logits, batch.labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"Loss became {value} at epoch {epoch}, batch {b}"
                    )
                loss.backward()
                if cfg.clip_norm is not None:
                    clip_grad_norm(model.parameters(), cfg.clip_norm)
                optimizer.step(lr)
                running += value * len(batch)
                seen += len(batch)

            val_loss = evaluate_loss(model, val, cfg.batch_size)
            if not np.isfinite(val_loss):
                raise TrainingDivergedError(
                    f"Validation loss became {val_loss} at epoch {epoch}"
                )
            log.append(EpochLog(epoch, running / seen, val_loss, lr))
            logger.info(
                "epoch %d: train %.4f val %.4f lr %.3g", epoch, running / seen, val_loss, lr
            )
            if val_loss < best_val:
                best, best_epoch, best_val = model.to_checkpoint(), epoch, val_loss
            if reporter:
                reporter(
                    "progress",
                    name="epochs",
                    current=epoch + 1,
                    total=cfg.epochs,
                    unit="epoch",
                    postfix={"train": running / seen, "val": val_loss},
                )

    return FitResult(checkpoint=best, log=log, best_epoch=best_epoch, best_val_loss=best_val)


def write_training_log(rows: Iterable[EpochLog], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in rows:
            writer.writerow(
                [row.epoch, f"{row.train_loss:.6f}", f"{row.val_loss:.6f}", f"{row.lr:.6g}"]
            )
    return path
