"""Long-tailed loss laboratory.

Losses for class-imbalanced classification (balanced cross-entropy,
supervised contrastive learning over a momentum key queue, and their
combinations) with analytic gradients, a synthetic long-tailed data
generator, a deterministic trainer, and many/medium/few reporting.
"""

from .bank import KeyBank, KeyQueue, MomentumParams, ema_update, positive_and_all_sets
from .config import TrainConfig, load_config
from .data import (
    Dataset,
    ViewPair,
    batch_iterator,
    exponential_profile,
    gaussian_mixture,
    load_csv,
    make_views,
    pareto_profile,
    save_csv,
    subsample,
)
from .losses import (
    BatchInputs,
    ClassProfile,
    LossResult,
    LossWeights,
    balanced_ce,
    cibl_loss,
    compute_loss,
    nce_loss,
    nce_margin_form,
    paco_loss,
    summed_loss,
    supcon,
)
from .metrics import GroupReport, OverfitFit, emit_report, group_accuracy, overfit_fit
from .model import ModelParams, backward, forward, init_params
from .numerics import finite_diff_grad, l2_normalize, logsumexp, softmax
from .trainer import Schedule, TrainingLog, evaluate, lr_at, sgd_step, train

__version__ = "0.1.0"
