"""The simultaneous structure/weight training iteration and its drivers.

Each step runs four phases in order: compute per-layer pruning ratios
from the current attentions, rebuild every mask and compressed-weight
copy, run the taped forward pass on the compressed weights to get
cross-entropy plus the L2 term, then backpropagate and update. Gradients
reach the dense weights through the mask, so masked positions never
receive a fresh gradient; attention gradients combine the tape's
contribution with the closed-form structure-regularizer gradient. Masks
stay frozen until the next step's prune phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import Dataset, batches
from .errors import DivergenceError, DomainError
from .layers import Model, attention_vector, clamp_attentions
from .pruning import global_pruned_ratio, prune_model, sparsity_regularizer
from .tensor import Tape, Tensor, backward


@dataclass
class TrainConfig:
    """Hyperparameters for one training run."""

    alpha: float = 1.0            # pruning factor
    gamma: float = 0.5            # sparsity regularizer coefficient
    l2: float = 5e-4              # L2 coefficient over compressed weights
    optimizer: str = "adam"
    momentum: float = 0.9         # sgd only
    lr: float = 0.001
    lr_decay: float = 0.98        # multiplicative, per epoch
    epochs: int = 5
    batch_size: int = 128
    seed: int = 0
    eval_every: int = 0           # extra validation every N iterations; 0 = per-epoch only
    freeze_attentions_at: float | None = None   # pin every gate to this value and skip its updates

    def __post_init__(self):
        if self.alpha <= 0:
            raise DomainError(f"pruning factor must be positive, have {self.alpha}")
        if self.gamma < 0 or self.l2 < 0:
            raise DomainError("regularizer coefficients must be non-negative")
        if self.batch_size < 1:
            raise DomainError(f"batch size must be >= 1, have {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class IterationMetrics:
    iteration: int
    total_loss: float
    ce_loss: float
    sparsity_term: float          # gamma * Psi(A)
    l2_term: float                # l2 * sum(w_hat^2)
    global_pruned_ratio: float
    layer_ratios: list[float]
    attentions: list[float]
    batch_accuracy: float


@dataclass
class EpochSummary:
    epoch: int
    iteration: int
    train_acc: float
    val_acc: float
    ce_loss: float
    sparsity_reg: float
    l2_term: float
    global_pruned_ratio: float


@dataclass
class TrainHistory:
    epochs: list[EpochSummary] = field(default_factory=list)
    iterations: list[IterationMetrics] = field(default_factory=list)
    extra_evals: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class MomentumSlot:
    velocity: np.ndarray


def adam_step(param: Tensor, slot: AdamSlot, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    g = param.grad
    slot.t += 1
    slot.m *= beta1
    slot.m += (1 - beta1) * g
    slot.v *= beta2
    slot.v += (1 - beta2) * (g * g)
    m_hat = slot.m / (1 - beta1 ** slot.t)
    v_hat = slot.v / (1 - beta2 ** slot.t)
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def sgd_step(param: Tensor, slot: MomentumSlot, lr: float, momentum: float = 0.0) -> None:
    if momentum:
        slot.velocity *= momentum
        slot.velocity += param.grad
        param.data -= lr * slot.velocity
    else:
        param.data -= lr * param.grad


class Adam:
    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.slots: list[AdamSlot] = []

    def step(self, params: list[Tensor]) -> None:
        if not self.slots:
            self.slots = [AdamSlot(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params]
        for p, slot in zip(params, self.slots, strict=True):
            adam_step(p, slot, self.lr, self.beta1, self.beta2, self.eps)


class SGD:
    def __init__(self, lr: float = 0.1, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.slots: list[MomentumSlot] = []

    def step(self, params: list[Tensor]) -> None:
        if not self.slots:
            self.slots = [MomentumSlot(np.zeros_like(p.data)) for p in params]
        for p, slot in zip(params, self.slots, strict=True):
            sgd_step(p, slot, self.lr, self.momentum)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(lr=cfg.lr)
    return SGD(lr=cfg.lr, momentum=cfg.momentum)


def trainable_parameters(model: Model, cfg: TrainConfig) -> list[Tensor]:
    """Parameters the optimizer updates, in a stable layer order."""
    params: list[Tensor] = []
    for layer in model.layers:
        params.append(layer.w)
        params.append(layer.bias)
        if cfg.freeze_attentions_at is None:
            params.append(layer.attention)
    return params


def loss_forward(model: Model, images: np.ndarray, labels: np.ndarray,
                 cfg: TrainConfig) -> tuple[Tensor, Tensor, float, float, float]:
    """Forward pass on the compressed weights with the masks held fixed.

    Returns (taped loss, logits, ce value, l2 value, sparsity value). The
    taped loss covers cross-entropy plus the L2 term; the structure
    regularizer value is reported but its gradient is closed-form and gets
    added to the attention gradients separately.
    """
    logits = model.forward(Tensor(images))
    ce = ops.softmax_cross_entropy(logits, labels)
    loss = ce
    l2_value = 0.0
    if cfg.l2 > 0:
        compressed = [ops.apply_mask(layer.w, layer.mask) for layer in model.layers]
        l2 = ops.scale(ops.sum_of_squares(compressed), cfg.l2)
        loss = ops.add(ce, l2)
        l2_value = l2.item()
    psi_value = 0.0
    if cfg.gamma > 0:
        psi_value, _ = sparsity_regularizer(attention_vector(model),
                                            model.weight_counts(), cfg.alpha)
    return loss, logits, ce.item(), l2_value, psi_value


def train_step(model: Model, batch: tuple[np.ndarray, np.ndarray], cfg: TrainConfig,
               optimizer, iteration: int) -> IterationMetrics:
    """One simultaneous structure/weight update. See the module docstring."""
    images, labels = batch
    if len(labels) == 0:
        raise ValueError("empty batch")

    ratios = prune_model(model, cfg.alpha)

    with Tape() as tape:
        loss, logits, ce_value, l2_value, psi_value = loss_forward(model, images, labels, cfg)

    total = loss.item() + cfg.gamma * psi_value
    if not math.isfinite(total):
        raise DivergenceError(f"non-finite loss at iteration {iteration}")

    backward(tape, loss)
    if cfg.gamma > 0 and cfg.freeze_attentions_at is None:
        _, psi_grad = sparsity_regularizer(attention_vector(model),
                                           model.weight_counts(), cfg.alpha)
        for layer, g in zip(model.layers, psi_grad):
            layer.attention.accumulate_grad(
                np.asarray(cfg.gamma * g, dtype=layer.attention.dtype))

    optimizer.step(trainable_parameters(model, cfg))
    clamp_attentions(model)

    batch_acc = float(np.mean(np.argmax(logits.data, axis=1) == labels))
    return IterationMetrics(
        iteration=iteration,
        total_loss=total,
        ce_loss=ce_value,
        sparsity_term=cfg.gamma * psi_value,
        l2_term=l2_value,
        global_pruned_ratio=global_pruned_ratio(model),
        layer_ratios=ratios,
        attentions=attention_vector(model),
        batch_accuracy=batch_acc,
    )


def train(model: Model, train_ds: Dataset, cfg: TrainConfig,
          val_ds: Dataset | None = None, optimizer=None) -> TrainHistory:
    """Run the full schedule: epochs of train_step plus per-epoch validation.

    Pass an optimizer to keep a handle on its state (e.g. for checkpoints);
    one is created from the config otherwise.
    """
    if cfg.freeze_attentions_at is not None:
        model.set_attentions(cfg.freeze_attentions_at)
    if optimizer is None:
        optimizer = make_optimizer(cfg)
    history = TrainHistory()
    iteration = 0

    for epoch in range(cfg.epochs):
        optimizer.lr = cfg.lr * cfg.lr_decay ** epoch
        acc_sum = 0.0
        ce_sum = 0.0
        psi_sum = 0.0
        l2_sum = 0.0
        n_batches = 0
        for batch in batches(train_ds, cfg.batch_size, seed=[cfg.seed, epoch], shuffle=True):
            metrics = train_step(model, batch, cfg, optimizer, iteration)
            history.iterations.append(metrics)
            iteration += 1
            n_batches += 1
            acc_sum += metrics.batch_accuracy
            ce_sum += metrics.ce_loss
            psi_sum += metrics.sparsity_term
            l2_sum += metrics.l2_term
            if cfg.eval_every and val_ds is not None and iteration % cfg.eval_every == 0:
                history.extra_evals.append((iteration, evaluate(model, val_ds)))
        val_acc = evaluate(model, val_ds) if val_ds is not None else float("nan")
        history.epochs.append(EpochSummary(
            epoch=epoch,
            iteration=iteration,
            train_acc=acc_sum / max(n_batches, 1),
            val_acc=val_acc,
            ce_loss=ce_sum / max(n_batches, 1),
            sparsity_reg=psi_sum / max(n_batches, 1),
            l2_term=l2_sum / max(n_batches, 1),
            global_pruned_ratio=global_pruned_ratio(model),
        ))
    return history


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    """Accuracy of argmax predictions on the compressed weights; no gradients."""
    correct = 0
    n = len(dataset.labels)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        logits = model.forward(Tensor(dataset.images[start:stop]))
        preds = np.argmax(logits.data, axis=1)
        correct += int(np.sum(preds == dataset.labels[start:stop]))
    return correct / n
