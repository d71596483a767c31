"""Long-tailed classification losses with exact analytic gradients.

Seven losses on a shared batch layout:

* frequency-adjusted ("balanced") cross-entropy on linear logits,
* supervised contrastive loss over a labeled key bank,
* their scalar-weighted sum,
* the coupled single-softmax combination that folds the class logits into
  the contrastive denominator,
* the class-instance-balanced combination whose mixing weight grows with
  the number of positives each instance sees in the bank (linear or cosine
  classifier head),
* cosine-classifier cross-entropy with the same frequency adjustment, and
* its margin rewriting (same value, the count adjustment moved inside the
  exponent), kept as an independent evaluation route.

Every function returns per-instance losses plus gradients of the batch-mean
loss with respect to each differentiable input. Keys in the bank are
gradient constants: the momentum branch that produced them receives no
gradient. All mixed denominators are evaluated in the log domain since the
count-weighted exponentials overflow for realistic logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bank import KeyBank
from .numerics import NumericalDivergence, logsumexp_rows

LOSS_KINDS = ("ce", "summed", "paco", "cibl", "ncibl")


@dataclass(frozen=True)
class ClassProfile:
    """Per-class training-set instance counts."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 2:
            raise ValueError("need counts for at least two classes")
        if np.any(counts < 1):
            raise ValueError("every class count must be >= 1")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return int(self.counts.size)

    @property
    def log_counts(self) -> np.ndarray:
        return np.log(self.counts.astype(np.float64))


@dataclass
class BatchInputs:
    """One training batch: raw features, labels, contrastive embeddings."""

    features: np.ndarray  # (B, D)
    labels: np.ndarray  # (B,)
    embeddings: np.ndarray  # (B, E), unit rows in normal operation

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        b = self.features.shape[0]
        if self.labels.shape != (b,) or self.embeddings.shape[0] != b:
            raise ValueError("features, labels and embeddings disagree on batch size")

    def check_unit_embeddings(self, tol: float = 1e-9) -> None:
        """Assert the unit-norm contract; not applied on construction so that
        finite-difference probes may pass through slightly perturbed rows."""
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ValueError("embedding rows are not unit norm")


@dataclass(frozen=True)
class LossWeights:
    """Scalar knobs shared by the combined losses."""

    lambda_ce: float = 1.0
    lambda_scl: float = 0.0
    alpha: float = 1.0  # contrastive-term weight in the coupled loss
    beta: float = 1.0  # cross-entropy-term weight in the coupled loss
    tau: float = 0.05  # contrastive temperature
    gamma_t: float = 0.05  # cosine-classifier temperature

    def __post_init__(self) -> None:
        if self.lambda_ce < 0 or self.lambda_scl < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_ce + self.lambda_scl <= 0:
            raise ValueError("at least one of lambda_ce, lambda_scl must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.tau <= 0 or self.gamma_t <= 0:
            raise ValueError("temperatures must be positive")


@dataclass
class LossResult:
    """Per-instance losses and gradients of the batch-mean loss.

    Gradient fields are None when the corresponding tensor is not an input
    of the called operation; compute_loss always fills all three with real
    shapes (zeros where untouched) so the trainer sees a uniform surface.
    """

    per_instance: np.ndarray
    total: float
    grad_features: Optional[np.ndarray]
    grad_theta: Optional[np.ndarray]
    grad_embeddings: Optional[np.ndarray]
    ce_component: float = 0.0
    scl_component: float = 0.0


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError("labels must be a vector")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError("label out of range")
    return labels


# ---------------------------------------------------------------------------
# cores: per-instance values plus unweighted per-row gradient factors.
# Callers apply their own per-instance weights (1/B for plain means,
# instance-dependent mixing weights for the balanced combination).
# ---------------------------------------------------------------------------


def _linear_ce_core(features, theta, labels, profile):
    """Count-adjusted softmax CE on linear logits.

    Returns (per_instance, d_adj) where d_adj[i] is the gradient of
    per_instance[i] w.r.t. the adjusted logit row i.
    """
    logits = features @ theta
    if not np.all(np.isfinite(logits)):
        raise NumericalDivergence("non-finite logits")
    adj = logits + profile.log_counts[None, :]
    lse = logsumexp_rows(adj)
    rows = np.arange(features.shape[0])
    per = lse - adj[rows, labels]
    d_adj = np.exp(adj - lse[:, None])
    d_adj[rows, labels] -= 1.0
    return per, d_adj


def _linear_ce_grads(features, theta, d_adj, row_weights):
    g = d_adj * row_weights[:, None]
    return g @ theta.T, features.T @ g


def _cosine_parts(features, theta, eps=1e-12):
    x_norms = np.maximum(np.linalg.norm(features, axis=1), eps)
    t_norms = np.maximum(np.linalg.norm(theta, axis=0), eps)
    u = features / x_norms[:, None]
    v = theta / t_norms[None, :]
    sims = u @ v
    return sims, u, v, x_norms, t_norms


def _cosine_grads(g_sim, sims, u, v, x_norms, t_norms):
    """Quotient rule through both normalizations; g_sim is dL/dsims."""
    grad_features = (
        g_sim @ v.T - np.sum(g_sim * sims, axis=1, keepdims=True) * u
    ) / x_norms[:, None]
    grad_theta = (u.T @ g_sim - v * np.sum(g_sim * sims, axis=0)[None, :]) / t_norms[
        None, :
    ]
    return grad_features, grad_theta


def _cosine_ce_margin_core(sims, labels, profile, gamma_t):
    """Margin-form evaluation: count adjustment inside the exponent."""
    adj = sims / gamma_t + profile.log_counts[None, :]
    lse = logsumexp_rows(adj)
    rows = np.arange(sims.shape[0])
    per = lse - adj[rows, labels]
    d_sim = np.exp(adj - lse[:, None])
    d_sim[rows, labels] -= 1.0
    d_sim /= gamma_t
    return per, d_sim


def _supcon_core(embeddings, bank, labels, tau):
    """Returns per-instance loss, positive-set log-ratio sums and sizes, and
    the unweighted gradient of the per-instance loss w.r.t. the scaled
    similarity matrix (rows with no positives zeroed)."""
    if len(bank) == 0:
        raise ValueError("bank is empty")
    if tau <= 0:
        raise ValueError("tau must be positive")
    t = (embeddings @ bank.keys.T) / tau
    lse = logsumexp_rows(t)
    pos_mask = (labels[:, None] == bank.labels[None, :]).astype(np.float64)
    npos = pos_mask.sum(axis=1)
    sum_log_ratio = ((t - lse[:, None]) * pos_mask).sum(axis=1)
    safe = np.maximum(npos, 1.0)
    per = np.where(npos > 0, -sum_log_ratio / safe, 0.0)
    d_t = np.exp(t - lse[:, None]) - pos_mask / safe[:, None]
    d_t[npos == 0] = 0.0
    return per, sum_log_ratio, npos, pos_mask, t, lse, d_t


# ---------------------------------------------------------------------------
# public losses
# ---------------------------------------------------------------------------


def balanced_ce(
    features: np.ndarray,
    theta: np.ndarray,
    labels: np.ndarray,
    profile: ClassProfile,
) -> LossResult:
    """Cross-entropy on logits additively adjusted by log class counts."""
    features = np.asarray(features, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    labels = _check_labels(labels, profile.num_classes)
    per, d_adj = _linear_ce_core(features, theta, labels, profile)
    b = features.shape[0]
    grad_f, grad_t = _linear_ce_grads(features, theta, d_adj, np.full(b, 1.0 / b))
    total = float(np.mean(per))
    return LossResult(per, total, grad_f, grad_t, None, ce_component=total)


def supcon(
    embeddings: np.ndarray,
    bank: KeyBank,
    labels: np.ndarray,
    tau: float,
) -> LossResult:
    """Supervised contrastive loss against a labeled key bank.

    Positives are all bank elements sharing the query label (the query's own
    momentum key included); the denominator runs over the whole bank. Keys
    are constants, so gradients flow only to the query embeddings. Instances
    with no positives contribute zero loss and zero gradient.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    per, _, _, _, _, _, d_t = _supcon_core(embeddings, bank, labels, tau)
    b = embeddings.shape[0]
    grad_e = (d_t / b) @ bank.keys / tau
    total = float(np.mean(per))
    return LossResult(per, total, None, None, grad_e, scl_component=total)


def summed_loss(
    batch: BatchInputs,
    theta: np.ndarray,
    bank: KeyBank,
    profile: ClassProfile,
    weights: LossWeights,
) -> LossResult:
    """Fixed scalar-weighted sum of the balanced CE and contrastive losses."""
    ce = balanced_ce(batch.features, theta, batch.labels, profile)
    scl = supcon(batch.embeddings, bank, batch.labels, weights.tau)
    lce, lscl = weights.lambda_ce, weights.lambda_scl
    per = lce * ce.per_instance + lscl * scl.per_instance
    return LossResult(
        per_instance=per,
        total=float(np.mean(per)),
        grad_features=lce * ce.grad_features,
        grad_theta=lce * ce.grad_theta,
        grad_embeddings=lscl * scl.grad_embeddings,
        ce_component=lce * ce.total,
        scl_component=lscl * scl.total,
    )


def paco_loss(
    batch: BatchInputs,
    theta: np.ndarray,
    bank: KeyBank,
    profile: ClassProfile,
    weights: LossWeights,
) -> LossResult:
    """Coupled combination: one softmax over bank similarities and the
    count-adjusted class logits together.

    Contrastive numerators carry weight alpha, the true-class logit carries
    weight beta, and each instance is normalized by alpha * n_pos + beta.
    The shared denominator is evaluated as a single logsumexp over the
    concatenated exponent list.
    """
    if weights.beta <= 0:
        raise ValueError("beta must be positive")
    if len(bank) == 0:
        raise ValueError("bank is empty")
    features = batch.features
    labels = _check_labels(batch.labels, profile.num_classes)
    b = features.shape[0]
    rows = np.arange(b)

    t = (batch.embeddings @ bank.keys.T) / weights.tau
    logits = features @ theta
    if not np.all(np.isfinite(logits)):
        raise NumericalDivergence("non-finite logits")
    adj = logits + profile.log_counts[None, :]

    pos_mask = (labels[:, None] == bank.labels[None, :]).astype(np.float64)
    npos = pos_mask.sum(axis=1)
    m = len(bank)

    concat = np.concatenate([t, adj], axis=1)
    lse = logsumexp_rows(concat)
    q = np.exp(concat - lse[:, None])

    alpha, beta = weights.alpha, weights.beta
    w = alpha * npos + beta
    pos_t_sum = (pos_mask * t).sum(axis=1)
    per = lse - (alpha * pos_t_sum + beta * adj[rows, labels]) / w

    d_t = q[:, :m] - alpha * pos_mask / w[:, None]
    d_adj = q[:, m:].copy()
    d_adj[rows, labels] -= beta / w
    d_t /= b
    d_adj /= b

    grad_e = d_t @ bank.keys / weights.tau
    grad_f = d_adj @ theta.T
    grad_t = features.T @ d_adj

    ce_part = float(np.mean(beta * (lse - adj[rows, labels]) / w))
    scl_part = float(np.mean(alpha * (npos * lse - pos_t_sum) / w))
    return LossResult(
        per_instance=per,
        total=float(np.mean(per)),
        grad_features=grad_f,
        grad_theta=grad_t,
        grad_embeddings=grad_e,
        ce_component=ce_part,
        scl_component=scl_part,
    )


def cibl_loss(
    batch: BatchInputs,
    theta: np.ndarray,
    bank: KeyBank,
    profile: ClassProfile,
    weights: LossWeights,
    head_kind: str = "linear",
) -> LossResult:
    """Class-instance-balanced combination of CE and contrastive losses.

    Per instance the two losses are averaged with weights lambda_ce and
    lambda_scl * n_pos, so instances whose class is common in the bank lean
    on the contrastive term while rare ones stay dominated by cross-entropy.
    With the cosine head the CE term uses the temperature-scaled cosine
    classifier instead of linear logits. An instance with no positives
    reduces to pure cross-entropy, keeping the loss continuous in n_pos.
    """
    if head_kind not in ("linear", "cosine"):
        raise ValueError(f"unknown head_kind {head_kind!r}")
    features = batch.features
    labels = _check_labels(batch.labels, profile.num_classes)
    b = features.shape[0]
    lce, lscl = weights.lambda_ce, weights.lambda_scl

    _, sum_log_ratio, npos, _, _, _, d_t_unit = _supcon_core(
        batch.embeddings, bank, labels, weights.tau
    )
    denom = lce + lscl * npos
    if np.any(denom <= 0):
        raise ValueError(
            "zero combination weight: an instance has no positives and lambda_ce is 0"
        )

    if head_kind == "linear":
        ce_per, d_adj = _linear_ce_core(features, theta, labels, profile)
        grad_f, grad_t = _linear_ce_grads(
            features, theta, d_adj, lce / denom / b
        )
    else:
        sims, u, v, x_norms, t_norms = _cosine_parts(features, theta)
        ce_per, d_sim = _cosine_ce_margin_core(sims, labels, profile, weights.gamma_t)
        g_sim = d_sim * (lce / denom / b)[:, None]
        grad_f, grad_t = _cosine_grads(g_sim, sims, u, v, x_norms, t_norms)

    per = (lce * ce_per - lscl * sum_log_ratio) / denom
    d_t = d_t_unit * (lscl * npos / denom / b)[:, None]
    grad_e = d_t @ bank.keys / weights.tau

    return LossResult(
        per_instance=per,
        total=float(np.mean(per)),
        grad_features=grad_f,
        grad_theta=grad_t,
        grad_embeddings=grad_e,
        ce_component=float(np.mean(lce * ce_per / denom)),
        scl_component=float(np.mean(-lscl * sum_log_ratio / denom)),
    )


def nce_loss(
    features: np.ndarray,
    theta: np.ndarray,
    labels: np.ndarray,
    profile: ClassProfile,
    gamma_t: float,
) -> LossResult:
    """Count-adjusted CE on the temperature-scaled cosine classifier.

    Evaluated with the counts as multiplicative weights on the plain
    softmax, the route that keeps them outside the exponent.
    """
    if gamma_t <= 0:
        raise ValueError("gamma_t must be positive")
    features = np.asarray(features, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    labels = _check_labels(labels, profile.num_classes)
    b = features.shape[0]
    rows = np.arange(b)

    sims, u, v, x_norms, t_norms = _cosine_parts(features, theta)
    s = sims / gamma_t
    lse0 = logsumexp_rows(s)
    q = np.exp(s - lse0[:, None])
    weighted = profile.counts.astype(np.float64)[None, :] * q
    z = weighted.sum(axis=1)
    per = -profile.log_counts[labels] - s[rows, labels] + lse0 + np.log(z)

    p = weighted / z[:, None]
    g_sim = p.copy()
    g_sim[rows, labels] -= 1.0
    g_sim /= gamma_t * b
    grad_f, grad_t = _cosine_grads(g_sim, sims, u, v, x_norms, t_norms)
    total = float(np.mean(per))
    return LossResult(per, total, grad_f, grad_t, None, ce_component=total)


def nce_margin_form(
    features: np.ndarray,
    theta: np.ndarray,
    labels: np.ndarray,
    profile: ClassProfile,
    gamma_t: float,
) -> LossResult:
    """Margin rewriting of nce_loss: log counts added inside the exponent.

    Algebraically identical to nce_loss; kept as a separate evaluation route
    so the identity can be verified rather than assumed.
    """
    if gamma_t <= 0:
        raise ValueError("gamma_t must be positive")
    features = np.asarray(features, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    labels = _check_labels(labels, profile.num_classes)
    b = features.shape[0]

    sims, u, v, x_norms, t_norms = _cosine_parts(features, theta)
    per, d_sim = _cosine_ce_margin_core(sims, labels, profile, gamma_t)
    grad_f, grad_t = _cosine_grads(d_sim / b, sims, u, v, x_norms, t_norms)
    total = float(np.mean(per))
    return LossResult(per, total, grad_f, grad_t, None, ce_component=total)


def compute_loss(
    kind: str,
    batch: BatchInputs,
    theta: np.ndarray,
    bank: KeyBank,
    profile: ClassProfile,
    weights: LossWeights,
    head_kind: str = "linear",
) -> LossResult:
    """Uniform dispatch used by the trainer.

    Always returns gradients for features, theta and embeddings with the
    shapes of those inputs, zero-filled where the loss does not touch them.
    """
    if kind == "ce":
        result = balanced_ce(batch.features, theta, batch.labels, profile)
    elif kind == "summed":
        result = summed_loss(batch, theta, bank, profile, weights)
    elif kind == "paco":
        result = paco_loss(batch, theta, bank, profile, weights)
    elif kind == "cibl":
        result = cibl_loss(batch, theta, bank, profile, weights, head_kind=head_kind)
    elif kind == "ncibl":
        result = cibl_loss(batch, theta, bank, profile, weights, head_kind="cosine")
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    if result.grad_features is None:
        result.grad_features = np.zeros_like(batch.features)
    if result.grad_theta is None:
        result.grad_theta = np.zeros_like(np.asarray(theta, dtype=np.float64))
    if result.grad_embeddings is None:
        result.grad_embeddings = np.zeros_like(batch.embeddings)
    return result
