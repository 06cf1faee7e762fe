"""Feed-forward modality encoders with exact analytic backpropagation.

Each encoder is a small MLP (ReLU hidden layers, linear final layer) whose
output is l2-normalized onto the unit sphere. ``backward`` propagates an
arbitrary embedding-space gradient through the normalization Jacobian
(I - u u^T)/||z|| and the layers, so loss functions elsewhere never need to
know the encoder internals. Updates use SGD with momentum and weight decay.

All functions are pure: they never mutate their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolationError,
    DegenerateVectorError,
    InvalidConfigError,
    NumericFaultError,
    ShapeError,
)

Array = np.ndarray

# Norms below this are treated as degenerate rather than divided by.
_NORM_FLOOR = 1e-12


@dataclass
class EncoderParams:
    """Weights and biases of one modality's encoder.

    ``weights[l]`` has shape (out, in); ``biases[l]`` has shape (out,).
    Hidden layers use ReLU, the final layer is linear, and the final output
    is l2-normalized by :func:`forward`.
    """

    weights: list[Array]
    biases: list[Array]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class ParamGrads:
    """Gradient container mirroring :class:`EncoderParams` shapes."""

    weights: list[Array]
    biases: list[Array]


@dataclass
class ForwardCache:
    """Intermediate values from one forward pass, consumed by ``backward``.

    ``activations[0]`` is the input; ``activations[l]`` for hidden layers is
    the post-ReLU output; ``prenorm`` is the final linear output before
    normalization.
    """

    activations: list[Array]
    pre_activations: list[Array]
    prenorm: Array
    norm: float
    embedding: Array


@dataclass
class OptimizerState:
    """Per-parameter momentum buffers for SGD with weight decay."""

    momentum: float
    weight_decay: float
    buffers: ParamGrads

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            buffers=ParamGrads(
                weights=[w.copy() for w in self.buffers.weights],
                biases=[b.copy() for b in self.buffers.biases],
            ),
        )


def init_params(layer_dims: list[int], seed: int) -> EncoderParams:
    """Create encoder parameters: fan-in-scaled Gaussian weights, zero biases.

    Weight entries are drawn from N(0, 1/fan_in); the draw is deterministic
    in ``seed``.
    """
    if len(layer_dims) < 2:
        raise InvalidConfigError(f"need at least 2 layer dims, got {layer_dims!r}")
    if any((not isinstance(d, (int, np.integer))) or d <= 0 for d in layer_dims):
        raise InvalidConfigError(f"layer dims must be positive integers, got {layer_dims!r}")
    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights=weights, biases=biases)


def zeros_like_params(params: EncoderParams) -> ParamGrads:
    return ParamGrads(
        weights=[np.zeros_like(w) for w in params.weights],
        biases=[np.zeros_like(b) for b in params.biases],
    )


def init_optimizer(
    params: EncoderParams, momentum: float = 0.9, weight_decay: float = 1e-4
) -> OptimizerState:
    if not 0.0 <= momentum < 1.0:
        raise InvalidConfigError(f"momentum must be in [0, 1), got {momentum}")
    if weight_decay < 0.0:
        raise InvalidConfigError(f"weight_decay must be >= 0, got {weight_decay}")
    return OptimizerState(momentum=momentum, weight_decay=weight_decay, buffers=zeros_like_params(params))


def l2_normalize(v: Array) -> Array:
    """Return v scaled to unit Euclidean norm.

    Raises :class:`DegenerateVectorError` instead of dividing by a
    (near-)zero norm, so embedding collapse can never pass silently.
    """
    v = np.asarray(v, dtype=float)
    norm = float(np.linalg.norm(v))
    if norm < _NORM_FLOOR:
        raise DegenerateVectorError(f"cannot normalize vector with norm {norm:.3e}")
    return v / norm


def forward(params: EncoderParams, x: Array) -> tuple[Array, ForwardCache]:
    """Run the encoder on one input vector.

    Returns the unit-norm embedding and a cache sufficient for ``backward``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != params.input_dim:
        raise ShapeError(f"input has shape {x.shape}, encoder expects ({params.input_dim},)")
    activations = [x]
    pre_activations = []
    a = x
    last = params.n_layers - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = w @ a + b
        pre_activations.append(z)
        a = z if layer == last else np.maximum(z, 0.0)
        activations.append(a)
    prenorm = a
    if not np.all(np.isfinite(prenorm)):
        raise NumericFaultError("non-finite encoder output (diverged parameters?)")
    norm = float(np.linalg.norm(prenorm))
    if not np.isfinite(norm):
        raise NumericFaultError("encoder output norm overflowed")
    if norm < _NORM_FLOOR:
        raise DegenerateVectorError(f"encoder output collapsed to norm {norm:.3e}")
    embedding = prenorm / norm
    cache = ForwardCache(
        activations=activations,
        pre_activations=pre_activations,
        prenorm=prenorm,
        norm=norm,
        embedding=embedding,
    )
    return embedding, cache


def backward(
    params: EncoderParams, cache: ForwardCache, grad_embedding: Array
) -> tuple[ParamGrads, Array]:
    """Exact gradients of (grad_embedding . embedding) w.r.t. params and input.

    Includes the normalization Jacobian (I - u u^T)/||z||, so any component of
    ``grad_embedding`` parallel to the embedding contributes nothing.
    """
    grad_embedding = np.asarray(grad_embedding, dtype=float)
    _check_cache(params, cache)
    if grad_embedding.shape != cache.embedding.shape:
        raise ShapeError(
            f"grad_embedding has shape {grad_embedding.shape}, expected {cache.embedding.shape}"
        )
    u = cache.embedding
    d_prenorm = (grad_embedding - np.dot(u, grad_embedding) * u) / cache.norm

    grads = zeros_like_params(params)
    d_act = d_prenorm
    last = params.n_layers - 1
    for layer in range(last, -1, -1):
        if layer == last:
            dz = d_act
        else:
            dz = d_act * (cache.pre_activations[layer] > 0.0)
        grads.weights[layer] = np.outer(dz, cache.activations[layer])
        grads.biases[layer] = dz
        d_act = params.weights[layer].T @ dz
    return grads, d_act


def _check_cache(params: EncoderParams, cache: ForwardCache) -> None:
    if len(cache.pre_activations) != params.n_layers or len(cache.activations) != params.n_layers + 1:
        raise ContractViolationError("cache layer count does not match parameters")
    if cache.activations[0].shape[0] != params.input_dim:
        raise ContractViolationError("cache input dim does not match parameters")
    if cache.prenorm.shape[0] != params.embed_dim:
        raise ContractViolationError("cache output dim does not match parameters")


@dataclass
class BatchCache:
    """Batched analog of :class:`ForwardCache`; rows index batch items."""

    activations: list[Array]
    pre_activations: list[Array]
    prenorm: Array
    norms: Array
    embeddings: Array


def forward_batch(params: EncoderParams, x: Array) -> tuple[Array, BatchCache]:
    """Vectorized forward over a (B, input_dim) batch."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"batch has shape {x.shape}, encoder expects (B, {params.input_dim})")
    activations = [x]
    pre_activations = []
    a = x
    last = params.n_layers - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        pre_activations.append(z)
        a = z if layer == last else np.maximum(z, 0.0)
        activations.append(a)
    if not np.all(np.isfinite(a)):
        raise NumericFaultError("non-finite encoder output (diverged parameters?)")
    norms = np.linalg.norm(a, axis=1)
    if not np.all(np.isfinite(norms)):
        raise NumericFaultError("encoder output norm overflowed")
    if np.any(norms < _NORM_FLOOR):
        raise DegenerateVectorError("encoder output collapsed to near-zero norm in batch")
    embeddings = a / norms[:, None]
    cache = BatchCache(
        activations=activations,
        pre_activations=pre_activations,
        prenorm=a,
        norms=norms,
        embeddings=embeddings,
    )
    return embeddings, cache


def backward_batch(
    params: EncoderParams, cache: BatchCache, grad_embeddings: Array
) -> tuple[ParamGrads, Array]:
    """Gradients of sum_b (grad_embeddings[b] . embeddings[b]) over a batch."""
    grad_embeddings = np.asarray(grad_embeddings, dtype=float)
    if grad_embeddings.shape != cache.embeddings.shape:
        raise ShapeError(
            f"grad batch has shape {grad_embeddings.shape}, expected {cache.embeddings.shape}"
        )
    u = cache.embeddings
    radial = np.sum(u * grad_embeddings, axis=1, keepdims=True)
    d_act = (grad_embeddings - radial * u) / cache.norms[:, None]

    grads = zeros_like_params(params)
    last = params.n_layers - 1
    for layer in range(last, -1, -1):
        if layer == last:
            dz = d_act
        else:
            dz = d_act * (cache.pre_activations[layer] > 0.0)
        grads.weights[layer] = dz.T @ cache.activations[layer]
        grads.biases[layer] = dz.sum(axis=0)
        d_act = dz @ params.weights[layer]
    return grads, d_act


def sgd_step(
    params: EncoderParams, grads: ParamGrads, state: OptimizerState, lr: float
) -> tuple[EncoderParams, OptimizerState]:
    """One SGD step: buffer <- mu*buffer + grad + wd*param; param <- param - lr*buffer.

    Returns fresh params and state; raises :class:`NumericFaultError` on any
    non-finite gradient entry, leaving the inputs untouched.
    """
    if lr <= 0.0:
        raise InvalidConfigError(f"learning rate must be > 0, got {lr}")
    _check_grad_shapes(params, grads)
    for g in grads.weights + grads.biases:
        if not np.all(np.isfinite(g)):
            raise NumericFaultError("non-finite gradient; parameters left untouched")
    new_weights, new_biases = [], []
    new_buf_w, new_buf_b = [], []
    for p, g, buf in zip(params.weights, grads.weights, state.buffers.weights):
        nb = state.momentum * buf + g + state.weight_decay * p
        new_buf_w.append(nb)
        new_weights.append(p - lr * nb)
    for p, g, buf in zip(params.biases, grads.biases, state.buffers.biases):
        nb = state.momentum * buf + g + state.weight_decay * p
        new_buf_b.append(nb)
        new_biases.append(p - lr * nb)
    new_params = EncoderParams(weights=new_weights, biases=new_biases)
    new_state = OptimizerState(
        momentum=state.momentum,
        weight_decay=state.weight_decay,
        buffers=ParamGrads(weights=new_buf_w, biases=new_buf_b),
    )
    return new_params, new_state


def _check_grad_shapes(params: EncoderParams, grads: ParamGrads) -> None:
    if len(grads.weights) != len(params.weights) or len(grads.biases) != len(params.biases):
        raise ShapeError("gradient layer count does not match parameters")
    for p, g in zip(params.weights + params.biases, grads.weights + grads.biases):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")


def add_grads(total: ParamGrads, extra: ParamGrads, scale: float = 1.0) -> None:
    """Accumulate ``scale * extra`` into ``total`` in place."""
    for t, e in zip(total.weights, extra.weights):
        t += scale * e
    for t, e in zip(total.biases, extra.biases):
        t += scale * e
