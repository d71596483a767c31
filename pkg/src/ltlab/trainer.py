"""Deterministic end-to-end training of the two-branch network.

One training step: draw two noise views of the batch, run the main branch
on the first and the momentum branch on the second, snapshot the momentum
keys plus the queue into a KeyBank, evaluate the configured loss, backprop
through the main branch only, take an SGD-with-momentum step, EMA-update
the shadow parameters, and push the momentum keys into the queue. The
momentum branch and the queue exist only at training time; evaluation uses
the main branch and the classifier on clean features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bank import KeyBank, KeyQueue, MomentumParams, ema_update
from .config import TrainConfig
from .data import (
    Dataset,
    batch_iterator,
    exponential_profile,
    gaussian_mixture,
    load_csv,
    make_view_batch,
    pareto_profile,
    split_csv_dataset,
)
from .losses import BatchInputs, ClassProfile, LossWeights, compute_loss
from .model import ModelParams, backward, forward, init_params
from .numerics import NumericalDivergence


@dataclass
class OptimizerState:
    """SGD velocity buffers, one per parameter tensor."""

    velocities: list[np.ndarray]
    momentum: float
    weight_decay: float

    @classmethod
    def for_params(
        cls, params: ModelParams, momentum: float, weight_decay: float
    ) -> "OptimizerState":
        return cls(
            velocities=[np.zeros_like(a) for a in params.arrays()],
            momentum=momentum,
            weight_decay=weight_decay,
        )


def sgd_step(
    params: ModelParams,
    grads: list[np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v. In place."""
    tensors = params.arrays()
    if len(grads) != len(tensors) or len(state.velocities) != len(tensors):
        raise ValueError("gradient/velocity structure mismatch")
    for p, g, v in zip(tensors, grads, state.velocities):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalDivergence("non-finite gradient")
        v *= state.momentum
        v += g
        if state.weight_decay != 0.0:
            v += state.weight_decay * p
        p -= lr * v


@dataclass
class Schedule:
    """Linear warmup followed by step decay or cosine decay to zero."""

    base_lr: float
    total_epochs: int
    warmup_epochs: int = 0
    kind: str = "cosine"  # "cosine" or "step"
    milestones: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in ("cosine", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("warmup_epochs out of range")
        epochs = [int(e) for e, _ in self.milestones]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("milestones must be strictly increasing")
        if epochs and epochs[-1] >= self.total_epochs:
            raise ValueError("milestones must precede total_epochs")


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Learning rate for a given epoch index."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if epoch < schedule.warmup_epochs:
        return schedule.base_lr * (epoch + 1) / schedule.warmup_epochs
    if schedule.kind == "step":
        lr = schedule.base_lr
        for milestone, factor in schedule.milestones:
            if epoch >= milestone:
                lr *= factor
        return lr
    span = max(schedule.total_epochs - schedule.warmup_epochs, 1)
    progress = (epoch - schedule.warmup_epochs) / span
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    ce_component: float
    scl_component: float
    train_per_class: np.ndarray
    test_per_class: np.ndarray


@dataclass
class TrainingLog:
    profile: ClassProfile
    records: list[EpochRecord] = field(default_factory=list)
    keys_pushed: int = 0  # total momentum keys enqueued over the run

    @property
    def final(self) -> EpochRecord:
        if not self.records:
            raise ValueError("empty training log")
        return self.records[-1]


def evaluate(
    params: ModelParams,
    dataset: Dataset,
    head_kind: str = "linear",
    gamma_t: float = 0.05,
) -> np.ndarray:
    """Per-class accuracy of argmax classification; ties go to the lowest index."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cache = forward(params, dataset.features, head_kind, gamma_t)
    preds = np.argmax(cache.head_scores, axis=1)
    c = dataset.profile.num_classes
    acc = np.zeros(c)
    for k in range(c):
        mask = dataset.labels == k
        if mask.any():
            acc[k] = float(np.mean(preds[mask] == k))
    return acc


def build_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    """Materialize train/test splits from the [data] section."""
    d = cfg.data
    if d.profile == "exponential":
        profile = exponential_profile(d.classes, d.n_max, d.imbalance)
    elif d.profile == "pareto":
        profile = pareto_profile(d.classes, d.n_max, d.n_min)
    else:
        raise ValueError(f"unknown profile kind {d.profile!r}")
    if d.csv_path is not None:
        full = load_csv(d.csv_path)
        return split_csv_dataset(full, profile, d.test_per_class, cfg.run.seed)
    return gaussian_mixture(
        profile, d.dim, d.separation, cfg.run.seed, d.test_per_class
    )


def train(cfg: TrainConfig) -> TrainingLog:
    """Run the full training loop described in the module docstring.

    Fully deterministic given the config: parameter init, batch order and
    view noise all derive from run.seed through fixed-purpose streams.
    """
    train_set, test_set = build_datasets(cfg)
    profile = train_set.profile
    seed = cfg.run.seed

    init_rng = np.random.default_rng([seed, 11])
    params = init_params(
        init_rng,
        input_dim=train_set.features.shape[1],
        encoder_widths=list(cfg.model.encoder_widths),
        embedding_dim=cfg.model.embedding_dim,
        num_classes=profile.num_classes,
    )
    shadow = MomentumParams.from_main(params, cfg.bank.momentum_m)
    queue = KeyQueue(cfg.bank.queue_capacity, cfg.model.embedding_dim)
    state = OptimizerState.for_params(
        params, cfg.optim.momentum, cfg.optim.weight_decay
    )
    schedule = Schedule(
        base_lr=cfg.optim.base_lr,
        total_epochs=cfg.optim.epochs,
        warmup_epochs=cfg.optim.warmup_epochs,
        kind=cfg.optim.schedule,
        milestones=[(int(e), float(f)) for e, f in cfg.optim.milestones],
    )
    weights = LossWeights(
        lambda_ce=cfg.loss.lambda_ce,
        lambda_scl=cfg.loss.lambda_scl,
        alpha=cfg.loss.alpha,
        beta=cfg.loss.beta,
        tau=cfg.loss.tau,
        gamma_t=cfg.model.gamma_t,
    )
    head_kind = "cosine" if cfg.loss.kind == "ncibl" else cfg.model.head_kind
    gamma_t = cfg.model.gamma_t

    log = TrainingLog(profile=profile)
    for epoch in range(cfg.optim.epochs):
        lr = lr_at(schedule, epoch)
        view_rng = np.random.default_rng([seed, 202, epoch])
        loss_sum = ce_sum = scl_sum = 0.0
        seen = 0
        for step, idx in enumerate(
            batch_iterator(train_set, cfg.optim.batch_size, seed, epoch)
        ):
            feats = train_set.features[idx]
            labels = train_set.labels[idx]
            view_main, view_mom = make_view_batch(
                feats, cfg.data.noise_sigma, view_rng
            )
            try:
                cache = forward(params, view_main, head_kind, gamma_t)
                mom_cache = forward(shadow.params, view_mom, head_kind, gamma_t)
                bank = KeyBank.assemble(mom_cache.embeddings, labels, queue)
                batch = BatchInputs(cache.features, labels, cache.embeddings)
                result = compute_loss(
                    cfg.loss.kind, batch, params.classifier, bank, profile,
                    weights, head_kind=head_kind,
                )
                if not np.isfinite(result.total):
                    raise NumericalDivergence("non-finite loss")
                grads = backward(
                    params, cache, result.grad_features, result.grad_embeddings,
                    result.grad_theta,
                )
                sgd_step(params, grads, state, lr)
            except NumericalDivergence as exc:
                raise NumericalDivergence(
                    f"{exc} (epoch {epoch}, batch {step})"
                ) from exc
            ema_update(params, shadow)
            queue.push(mom_cache.embeddings, labels)
            b = len(idx)
            loss_sum += result.total * b
            ce_sum += result.ce_component * b
            scl_sum += result.scl_component * b
            seen += b
        log.records.append(
            EpochRecord(
                epoch=epoch,
                lr=lr,
                mean_loss=loss_sum / seen,
                ce_component=ce_sum / seen,
                scl_component=scl_sum / seen,
                train_per_class=evaluate(params, train_set, head_kind, gamma_t),
                test_per_class=evaluate(params, test_set, head_kind, gamma_t),
            )
        )
    log.keys_pushed = queue.total_pushed
    return log
