"""Prediction-layer backbones, the field-scoring controller, and BCE.

Every backbone consumes a (B, F, d) tensor of field embeddings sized for its
configured field count F (the selection pipeline feeds k fields, baselines
feed all N) and returns a (B,) vector of click probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    BatchNorm1d,
    DimensionError,
    Linear,
    Tensor,
    clip,
    concat,
    log,
    relu,
    sigmoid,
    softmax,
    xavier_init,
)

VARIANTS = ("mlp", "deepfm", "dcn")


@dataclass(frozen=True)
class PredictorConfig:
    variant: str
    input_fields: int
    emb_dim: int
    hidden_dims: tuple[int, ...] = (16, 16)
    n_cross_layers: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown backbone {self.variant!r}, expected one of {VARIANTS}")
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if self.variant == "dcn" and self.n_cross_layers < 1:
            raise ValueError("dcn needs at least one cross layer")


class _Tower:
    """Affine + ReLU stack ending in a configurable output width."""

    def __init__(self, n_in: int, hidden_dims, n_out: int, rng: np.random.Generator,
                 final_linear: bool = True):
        self.layers = []
        width = n_in
        for h in hidden_dims:
            self.layers.append(Linear(width, h, rng))
            width = h
        self.final = Linear(width, n_out, rng) if final_linear else None
        self.out_width = n_out if final_linear else width

    def __call__(self, x: Tensor) -> Tensor:
        for lin in self.layers:
            x = relu(lin(x))
        return self.final(x) if self.final is not None else x

    def named_params(self, prefix: str = ""):
        out = []
        for i, lin in enumerate(self.layers):
            out += lin.named_params(f"{prefix}h{i}.")
        if self.final is not None:
            out += self.final.named_params(f"{prefix}out.")
        return out


def _check_field_input(e: Tensor, config: PredictorConfig):
    if e.ndim != 3 or e.shape[1] != config.input_fields or e.shape[2] != config.emb_dim:
        raise DimensionError(
            f"embeddings {e.shape}, expected (*, {config.input_fields}, {config.emb_dim})")


class MLPPredictor:
    def __init__(self, config: PredictorConfig, rng: np.random.Generator):
        self.config = config
        self.tower = _Tower(config.input_fields * config.emb_dim,
                            config.hidden_dims, 1, rng)

    def __call__(self, e: Tensor) -> Tensor:
        _check_field_input(e, self.config)
        b = e.shape[0]
        flat = e.reshape(b, self.config.input_fields * self.config.emb_dim)
        return sigmoid(self.tower(flat)).reshape(b)

    def named_params(self, prefix: str = ""):
        return self.tower.named_params(prefix + "mlp.")


def fm_pairwise_interaction(e: Tensor) -> Tensor:
    """Second-order FM term per instance: sum over field pairs of their dot
    product, via (square-of-sum - sum-of-squares) / 2."""
    sum_f = e.sum(axis=1)                 # (B, d)
    square_of_sum = sum_f * sum_f
    sum_of_squares = (e * e).sum(axis=1)  # (B, d)
    return ((square_of_sum - sum_of_squares) * 0.5).sum(axis=1)  # (B,)


class DeepFMPredictor:
    """Linear term + FM pairwise term + deep tower, squashed by a sigmoid."""

    def __init__(self, config: PredictorConfig, rng: np.random.Generator):
        self.config = config
        n_in = config.input_fields * config.emb_dim
        self.linear = Linear(n_in, 1, rng)
        self.deep = _Tower(n_in, config.hidden_dims, 1, rng)

    def __call__(self, e: Tensor) -> Tensor:
        _check_field_input(e, self.config)
        b = e.shape[0]
        flat = e.reshape(b, self.config.input_fields * self.config.emb_dim)
        logit = (self.linear(flat) + self.deep(flat)).reshape(b) + fm_pairwise_interaction(e)
        return sigmoid(logit)

    def named_params(self, prefix: str = ""):
        return (self.linear.named_params(prefix + "fm.linear.")
                + self.deep.named_params(prefix + "fm.deep."))


class CrossLayer:
    """x_{l+1} = x0 * (x_l w) + b + x_l with a scalar projection per instance."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.weight = Tensor(xavier_init(width, 1, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x0: Tensor, xl: Tensor) -> Tensor:
        proj = xl @ self.weight            # (B, 1)
        return x0 * proj + self.bias + xl

    def named_params(self, prefix: str = ""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class DCNPredictor:
    def __init__(self, config: PredictorConfig, rng: np.random.Generator):
        self.config = config
        width = config.input_fields * config.emb_dim
        self.cross = [CrossLayer(width, rng) for _ in range(config.n_cross_layers)]
        self.deep = _Tower(width, config.hidden_dims, 0, rng, final_linear=False)
        self.head = Linear(width + self.deep.out_width, 1, rng)

    def __call__(self, e: Tensor) -> Tensor:
        _check_field_input(e, self.config)
        b = e.shape[0]
        x0 = e.reshape(b, self.config.input_fields * self.config.emb_dim)
        xl = x0
        for layer in self.cross:
            xl = layer(x0, xl)
        deep_out = self.deep(x0)
        return sigmoid(self.head(concat([xl, deep_out], axis=1))).reshape(b)

    def named_params(self, prefix: str = ""):
        out = []
        for i, layer in enumerate(self.cross):
            out += layer.named_params(f"{prefix}dcn.cross{i}.")
        out += self.deep.named_params(prefix + "dcn.deep.")
        out += self.head.named_params(prefix + "dcn.head.")
        return out


def build_predictor(config: PredictorConfig, rng: np.random.Generator):
    cls = {"mlp": MLPPredictor, "deepfm": DeepFMPredictor, "dcn": DCNPredictor}[config.variant]
    return cls(config, rng)


class Controller:
    """Importance scorer: batch norm over the flattened field embeddings,
    one affine map down to N logits, softmax. Scores are positive and sum
    to 1 per instance."""

    def __init__(self, n_fields: int, emb_dim: int, rng: np.random.Generator):
        self.n_fields = n_fields
        self.emb_dim = emb_dim
        self.bn = BatchNorm1d(n_fields * emb_dim)
        self.fc = Linear(n_fields * emb_dim, n_fields, rng)

    def __call__(self, e: Tensor, training: bool) -> Tensor:
        if e.ndim != 3 or e.shape[1] != self.n_fields or e.shape[2] != self.emb_dim:
            raise DimensionError(
                f"controller input {e.shape}, expected (*, {self.n_fields}, {self.emb_dim})")
        b = e.shape[0]
        flat = e.reshape(b, self.n_fields * self.emb_dim)
        return softmax(self.fc(self.bn(flat, training=training)), axis=1)

    def named_params(self, prefix: str = ""):
        return (self.bn.named_params(prefix + "controller.bn.")
                + self.fc.named_params(prefix + "controller.fc."))

    def named_buffers(self, prefix: str = ""):
        return self.bn.named_buffers(prefix + "controller.bn.")


def bce(y_hat: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise DimensionError(f"predictions {y_hat.shape} vs labels {y.shape}")
    p = clip(y_hat, 1e-7, 1.0 - 1e-7)
    losses = -(y * log(p) + (1.0 - y) * log(1.0 - p))
    return losses.mean()
