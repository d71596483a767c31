"""Finite-difference verification of every analytic gradient in the package.

Each check builds a random small instance, evaluates one loss, and compares
its analytic gradients against central finite differences of the scalar
batch-mean loss. The chain check does the same through the whole network:
encoder, projection, normalization, and classifier at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bank import KeyBank
from .losses import (
    BatchInputs,
    ClassProfile,
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
from .model import (
    backward,
    forward,
    get_flat_params,
    init_params,
    set_flat_params,
)
from .numerics import finite_diff_grad, l2_normalize_rows, max_relative_error

GradTrial = list[tuple[str, np.ndarray, np.ndarray]]  # (input, analytic, oracle)

FD_STEP = 1e-5


def _instance(rng: np.random.Generator) -> dict:
    """Random small problem: B<=4, C<=5, D,E<=6, at most 8 bank keys."""
    b = int(rng.integers(1, 5))
    c = int(rng.integers(2, 6))
    d = int(rng.integers(2, 7))
    e = int(rng.integers(2, 7))
    n_keys = int(rng.integers(1, 9))
    counts = rng.integers(1, 101, size=c)
    profile = ClassProfile(counts)
    features = rng.standard_normal((b, d))
    theta = rng.standard_normal((d, c))
    labels = rng.integers(0, c, size=b)
    embeddings = l2_normalize_rows(rng.standard_normal((b, e)))
    keys = l2_normalize_rows(rng.standard_normal((n_keys, e)))
    key_labels = rng.integers(0, c, size=n_keys)
    bank = KeyBank(keys=keys, labels=key_labels, batch_size=0)
    weights = LossWeights(
        lambda_ce=float(rng.uniform(0.2, 1.5)),
        lambda_scl=float(rng.uniform(0.01, 0.5)),
        alpha=float(rng.uniform(0.2, 2.0)),
        beta=float(rng.uniform(0.2, 2.0)),
        tau=float(rng.uniform(0.2, 1.0)),
        gamma_t=float(rng.uniform(0.2, 1.0)),
    )
    return dict(
        features=features,
        theta=theta,
        labels=labels,
        embeddings=embeddings,
        bank=bank,
        profile=profile,
        weights=weights,
    )


def _check_balanced_ce(rng: np.random.Generator) -> GradTrial:
    inst = _instance(rng)
    f, t, y, p = inst["features"], inst["theta"], inst["labels"], inst["profile"]
    res = balanced_ce(f, t, y, p)
    return [
        ("features", res.grad_features,
         finite_diff_grad(lambda v: balanced_ce(v, t, y, p).total, f, FD_STEP)),
        ("theta", res.grad_theta,
         finite_diff_grad(lambda v: balanced_ce(f, v, y, p).total, t, FD_STEP)),
    ]


def _check_supcon(rng: np.random.Generator) -> GradTrial:
    inst = _instance(rng)
    z, bank, y = inst["embeddings"], inst["bank"], inst["labels"]
    tau = inst["weights"].tau
    res = supcon(z, bank, y, tau)
    return [
        ("embeddings", res.grad_embeddings,
         finite_diff_grad(lambda v: supcon(v, bank, y, tau).total, z, FD_STEP)),
    ]


def _combined_checker(loss_fn) -> Callable[[np.random.Generator], GradTrial]:
    def check(rng: np.random.Generator) -> GradTrial:
        inst = _instance(rng)
        f, t, y = inst["features"], inst["theta"], inst["labels"]
        z, bank = inst["embeddings"], inst["bank"]
        profile, weights = inst["profile"], inst["weights"]

        def total(features, theta, embeddings):
            batch = BatchInputs(features, y, embeddings)
            return loss_fn(batch, theta, bank, profile, weights).total

        res = loss_fn(BatchInputs(f, y, z), t, bank, profile, weights)
        return [
            ("features", res.grad_features,
             finite_diff_grad(lambda v: total(v, t, z), f, FD_STEP)),
            ("theta", res.grad_theta,
             finite_diff_grad(lambda v: total(f, v, z), t, FD_STEP)),
            ("embeddings", res.grad_embeddings,
             finite_diff_grad(lambda v: total(f, t, v), z, FD_STEP)),
        ]

    return check


def _cosine_ce_checker(loss_fn) -> Callable[[np.random.Generator], GradTrial]:
    def check(rng: np.random.Generator) -> GradTrial:
        inst = _instance(rng)
        f, t, y, p = inst["features"], inst["theta"], inst["labels"], inst["profile"]
        gamma = inst["weights"].gamma_t
        res = loss_fn(f, t, y, p, gamma)
        return [
            ("features", res.grad_features,
             finite_diff_grad(lambda v: loss_fn(v, t, y, p, gamma).total, f, FD_STEP)),
            ("theta", res.grad_theta,
             finite_diff_grad(lambda v: loss_fn(f, v, y, p, gamma).total, t, FD_STEP)),
        ]

    return check


CHECKS: dict[str, Callable[[np.random.Generator], GradTrial]] = {
    "balanced_ce": _check_balanced_ce,
    "supcon": _check_supcon,
    "summed": _combined_checker(summed_loss),
    "paco": _combined_checker(paco_loss),
    "cibl": _combined_checker(
        lambda batch, t, bank, p, w: cibl_loss(batch, t, bank, p, w, "linear")
    ),
    "ncibl": _combined_checker(
        lambda batch, t, bank, p, w: cibl_loss(batch, t, bank, p, w, "cosine")
    ),
    "nce": _cosine_ce_checker(nce_loss),
    "nce_margin": _cosine_ce_checker(nce_margin_form),
}

DEFAULT_KINDS = (
    "balanced_ce",
    "supcon",
    "summed",
    "paco",
    "cibl",
    "nce",
    "nce_margin",
)


@dataclass
class KindReport:
    kind: str
    trials: int
    max_rel_err: float
    worst_trial: int
    worst_input: str
    passed: bool


@dataclass
class GradcheckReport:
    tolerance: float
    kinds: list[KindReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(k.passed for k in self.kinds)

    @property
    def vacuous(self) -> bool:
        return all(k.trials == 0 for k in self.kinds)


def run_gradcheck(
    kinds=DEFAULT_KINDS,
    trials: int = 20,
    tol: float = 1e-4,
    seed: int = 0,
    checks: dict | None = None,
) -> GradcheckReport:
    """Run `trials` random-instance checks per loss kind.

    The checks table is injectable so the negative-control test can verify
    that a corrupted gradient actually fails.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    table = CHECKS if checks is None else checks
    report = GradcheckReport(tolerance=tol)
    for kind_index, kind in enumerate(kinds):
        if kind not in table:
            raise ValueError(f"unknown loss kind {kind!r}")
        worst, worst_trial, worst_input = 0.0, -1, ""
        for trial in range(trials):
            rng = np.random.default_rng([seed, kind_index, trial])
            for input_name, analytic, oracle in table[kind](rng):
                err = max_relative_error(analytic, oracle)
                if err > worst:
                    worst, worst_trial, worst_input = err, trial, input_name
        report.kinds.append(
            KindReport(
                kind=kind,
                trials=trials,
                max_rel_err=worst,
                worst_trial=worst_trial,
                worst_input=worst_input,
                passed=(trials == 0) or worst < tol,
            )
        )
    return report


def _well_conditioned(params, inputs, margin: float = 1e-3) -> bool:
    """Reject probe points where the finite-difference oracle is invalid:
    relu pre-activations near their kink, or a fully dead projection row
    that parks the embedding on the normalization guard."""
    cache = forward(params, inputs)
    for pre in cache.encoder_pre + [cache.proj_pre]:
        if np.min(np.abs(pre)) < margin:
            return False
    return bool(np.min(cache.proj_norms) > 1e-2)


def chain_gradcheck(
    kind: str,
    rng: np.random.Generator,
    head_kind: str = "linear",
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic vs finite-difference gradient of one loss through the whole
    network, as flat parameter vectors."""
    input_dim = int(rng.integers(3, 6))
    widths = [int(rng.integers(3, 6))]
    e_dim = int(rng.integers(2, 5))
    c = int(rng.integers(2, 5))
    b = int(rng.integers(2, 5))
    n_keys = int(rng.integers(1, 7))

    for _ in range(100):
        params = init_params(rng, input_dim, widths, e_dim, c)
        inputs = rng.standard_normal((b, input_dim))
        if _well_conditioned(params, inputs):
            break
    else:
        raise RuntimeError("could not draw a well-conditioned probe point")
    labels = rng.integers(0, c, size=b)
    profile = ClassProfile(rng.integers(1, 101, size=c))
    keys = l2_normalize_rows(rng.standard_normal((n_keys, e_dim)))
    bank = KeyBank(keys=keys, labels=rng.integers(0, c, size=n_keys), batch_size=0)
    weights = LossWeights(
        lambda_ce=1.0,
        lambda_scl=float(rng.uniform(0.05, 0.5)),
        alpha=1.0,
        beta=1.0,
        tau=float(rng.uniform(0.3, 1.0)),
        gamma_t=float(rng.uniform(0.3, 1.0)),
    )

    def total_loss(p) -> float:
        cache = forward(p, inputs, head_kind, weights.gamma_t)
        batch = BatchInputs(cache.features, labels, cache.embeddings)
        return compute_loss(
            kind, batch, p.classifier, bank, profile, weights, head_kind
        ).total

    cache = forward(params, inputs, head_kind, weights.gamma_t)
    batch = BatchInputs(cache.features, labels, cache.embeddings)
    result = compute_loss(
        kind, batch, params.classifier, bank, profile, weights, head_kind
    )
    grads = backward(
        params, cache, result.grad_features, result.grad_embeddings, result.grad_theta
    )
    analytic = np.concatenate([g.ravel() for g in grads])

    probe = params.copy()

    def f(flat: np.ndarray) -> float:
        set_flat_params(probe, flat)
        return total_loss(probe)

    oracle = finite_diff_grad(f, get_flat_params(params), FD_STEP)
    return analytic, oracle
