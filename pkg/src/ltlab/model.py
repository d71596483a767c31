"""Dense encoder + projection head + classifier, with exact analytic backward.

The network is intentionally small: a stack of fully connected layers with
rectified-linear activations, a two-layer projection head whose output is
unit-normalized to produce contrastive embeddings, and a linear classifier
matrix that can also be read as one weight vector per class for the cosine
head. No autodiff anywhere; the backward pass is written out by hand and
checked against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NORM_EPS

HEAD_KINDS = ("linear", "cosine")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "relu"  # "relu" or "identity"

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError("layer shapes do not chain")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ModelParams:
    """All trainable tensors of the two-branch network's main branch.

    encoder maps raw inputs to features x, the projection head maps x to the
    pre-normalization embedding, and classifier holds one column per class.
    """

    encoder: list[DenseLayer]
    proj_hidden: DenseLayer
    proj_out: DenseLayer
    classifier: np.ndarray  # (feature_dim, num_classes)

    def arrays(self) -> list[np.ndarray]:
        """All parameter tensors in a fixed order (shared with gradients)."""
        out: list[np.ndarray] = []
        for layer in self.encoder:
            out.append(layer.weight)
            out.append(layer.bias)
        out.extend([self.proj_hidden.weight, self.proj_hidden.bias])
        out.extend([self.proj_out.weight, self.proj_out.bias])
        out.append(self.classifier)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            encoder=[
                DenseLayer(l.weight.copy(), l.bias.copy(), l.activation)
                for l in self.encoder
            ],
            proj_hidden=DenseLayer(
                self.proj_hidden.weight.copy(),
                self.proj_hidden.bias.copy(),
                self.proj_hidden.activation,
            ),
            proj_out=DenseLayer(
                self.proj_out.weight.copy(),
                self.proj_out.bias.copy(),
                self.proj_out.activation,
            ),
            classifier=self.classifier.copy(),
        )

    @property
    def feature_dim(self) -> int:
        return self.classifier.shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.proj_out.weight.shape[1]


def init_params(
    rng: np.random.Generator,
    input_dim: int,
    encoder_widths: list[int],
    embedding_dim: int,
    num_classes: int,
) -> ModelParams:
    """He-style gaussian init. Empty encoder_widths gives an identity encoder."""
    encoder = []
    fan_in = input_dim
    for width in encoder_widths:
        w = rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
        encoder.append(DenseLayer(w, np.zeros(width), "relu"))
        fan_in = width
    feature_dim = fan_in
    proj_hidden = DenseLayer(
        rng.standard_normal((feature_dim, feature_dim)) * np.sqrt(2.0 / feature_dim),
        np.zeros(feature_dim),
        "relu",
    )
    proj_out = DenseLayer(
        rng.standard_normal((feature_dim, embedding_dim)) * np.sqrt(1.0 / feature_dim),
        np.zeros(embedding_dim),
        "identity",
    )
    classifier = rng.standard_normal((feature_dim, num_classes)) * np.sqrt(
        1.0 / feature_dim
    )
    return ModelParams(encoder, proj_hidden, proj_out, classifier)


@dataclass
class ForwardCache:
    """Activations saved by forward() and consumed by backward()."""

    inputs: np.ndarray
    encoder_pre: list[np.ndarray]  # pre-activation per encoder layer
    features: np.ndarray  # x, encoder output (B, D)
    proj_pre: np.ndarray  # pre-activation of the projection hidden layer
    proj_hidden_out: np.ndarray
    proj_raw: np.ndarray  # embedding before normalization (B, E)
    proj_norms: np.ndarray  # row norms of proj_raw
    embeddings: np.ndarray  # z, unit rows (B, E)
    head_scores: np.ndarray  # (B, C): logits (linear) or sim/gamma (cosine)


def _apply(layer: DenseLayer, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pre = a @ layer.weight + layer.bias
    if layer.activation == "relu":
        return pre, np.maximum(pre, 0.0)
    return pre, pre


def forward(
    params: ModelParams,
    inputs: np.ndarray,
    head_kind: str = "linear",
    gamma_t: float = 0.05,
) -> ForwardCache:
    """Run the main branch on a batch: features, embeddings and head scores.

    head_kind "linear" scores with x @ classifier; "cosine" scores with the
    temperature-scaled cosine similarity between x and each classifier column.
    """
    if head_kind not in HEAD_KINDS:
        raise ValueError(f"unknown head_kind {head_kind!r}")
    a = np.asarray(inputs, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("inputs must be (batch, dim)")
    encoder_pre = []
    for layer in params.encoder:
        pre, a = _apply(layer, a)
        encoder_pre.append(pre)
    features = a
    proj_pre, hidden = _apply(params.proj_hidden, features)
    _, proj_raw = _apply(params.proj_out, hidden)
    norms = np.maximum(np.linalg.norm(proj_raw, axis=1), NORM_EPS)
    embeddings = proj_raw / norms[:, None]
    if head_kind == "linear":
        scores = features @ params.classifier
    else:
        f_norms = np.maximum(np.linalg.norm(features, axis=1), NORM_EPS)
        c_norms = np.maximum(np.linalg.norm(params.classifier, axis=0), NORM_EPS)
        scores = (features @ params.classifier) / (
            f_norms[:, None] * c_norms[None, :] * gamma_t
        )
    return ForwardCache(
        inputs=np.asarray(inputs, dtype=np.float64),
        encoder_pre=encoder_pre,
        features=features,
        proj_pre=proj_pre,
        proj_hidden_out=hidden,
        proj_raw=proj_raw,
        proj_norms=norms,
        embeddings=embeddings,
        head_scores=scores,
    )


def backward(
    params: ModelParams,
    cache: ForwardCache,
    grad_features: np.ndarray,
    grad_embeddings: np.ndarray,
    grad_classifier: np.ndarray,
) -> list[np.ndarray]:
    """Chain rule from loss-level gradients down to every parameter tensor.

    grad_features and grad_embeddings are the loss gradients with respect to
    x and z; grad_classifier passes through unchanged. Returns gradients in
    ModelParams.arrays() order.
    """
    grad_features = np.asarray(grad_features, dtype=np.float64)
    grad_embeddings = np.asarray(grad_embeddings, dtype=np.float64)
    if grad_features.shape != cache.features.shape:
        raise ValueError("stale cache: feature gradient shape mismatch")
    if grad_embeddings.shape != cache.embeddings.shape:
        raise ValueError("stale cache: embedding gradient shape mismatch")

    # unit-normalization backward: z = p / r with r = max(||p||, eps)
    z = cache.embeddings
    r = cache.proj_norms[:, None]
    gz = grad_embeddings
    d_raw = np.where(
        cache.proj_norms[:, None] > NORM_EPS,
        (gz - np.sum(gz * z, axis=1, keepdims=True) * z) / r,
        gz / NORM_EPS,
    )

    d_proj_out_w = cache.proj_hidden_out.T @ d_raw
    d_proj_out_b = d_raw.sum(axis=0)
    d_hidden = d_raw @ params.proj_out.weight.T
    d_hidden = d_hidden * (cache.proj_pre > 0.0)
    d_proj_hidden_w = cache.features.T @ d_hidden
    d_proj_hidden_b = d_hidden.sum(axis=0)

    d_x = grad_features + d_hidden @ params.proj_hidden.weight.T

    encoder_grads: list[np.ndarray] = []
    for i in range(len(params.encoder) - 1, -1, -1):
        layer = params.encoder[i]
        if layer.activation == "relu":
            d_x = d_x * (cache.encoder_pre[i] > 0.0)
        layer_in = cache.inputs if i == 0 else np.maximum(cache.encoder_pre[i - 1], 0.0)
        encoder_grads.append(d_x.sum(axis=0))  # bias
        encoder_grads.append(layer_in.T @ d_x)  # weight
        d_x = d_x @ layer.weight.T

    encoder_grads.reverse()
    grads = encoder_grads
    grads.extend([d_proj_hidden_w, d_proj_hidden_b, d_proj_out_w, d_proj_out_b])
    grads.append(np.asarray(grad_classifier, dtype=np.float64))
    return grads


def get_flat_params(params: ModelParams) -> np.ndarray:
    """All parameters concatenated into one vector (for gradient checks)."""
    return np.concatenate([a.ravel() for a in params.arrays()])


def set_flat_params(params: ModelParams, flat: np.ndarray) -> None:
    """Write a flat vector back into the parameter tensors, in place."""
    offset = 0
    for a in params.arrays():
        a[...] = flat[offset : offset + a.size].reshape(a.shape)
        offset += a.size
    if offset != flat.size:
        raise ValueError("flat vector length does not match parameter count")
