"""Flat parameter vectors, small MLPs with hand-written backprop, local optimizers."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class NumericError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class MLPSpec:
    layer_sizes: Tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @cached_property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @cached_property
    def _slices(self) -> List[Tuple[slice, slice, int, int]]:
        return self._compute_slices()

    def layer_slices(self) -> List[Tuple[slice, slice, int, int]]:
        return list(self._slices)

    def _compute_slices(self) -> List[Tuple[slice, slice, int, int]]:
        """(weight slice, bias slice, fan_in, fan_out) per layer.

        Weights are stored row-major with shape (fan_in, fan_out) so that a
        batch of row vectors maps as ``x @ W + b``.
        """
        out = []
        pos = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(pos, pos + fan_in * fan_out)
            pos += fan_in * fan_out
            b = slice(pos, pos + fan_out)
            pos += fan_out
            out.append((w, b, fan_in, fan_out))
        return out


def unpack(spec: MLPSpec, params: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) into ``params``; writing to them writes to ``params``."""
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    return [
        (params[w].reshape(fan_in, fan_out), params[b])
        for w, b, fan_in, fan_out in spec._slices
    ]


def init_params(spec: MLPSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(spec.n_params)
    for w, _, fan_in, fan_out in spec.layer_slices():
        bound = 1.0 / np.sqrt(fan_in)
        params[w] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return params


def _act(kind: str, pre: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "tanh":
        return np.tanh(pre)
    return pre


def _act_grad(kind: str, pre: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return grad * (pre > 0)
    if kind == "tanh":
        t = np.tanh(pre)
        return grad * (1.0 - t * t)
    return grad


@dataclass
class MLPCache:
    spec: MLPSpec
    params: np.ndarray  # snapshot, used to detect stale caches
    inputs: List[np.ndarray]  # input to each layer
    preacts: List[np.ndarray]  # pre-activation of each layer
    squeeze: bool


def mlp_forward(spec: MLPSpec, params: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, MLPCache]:
    """Forward pass for a single vector or a (batch, n_in) matrix."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.n_in:
        raise ValueError(f"input of shape {x.shape} does not match input size {spec.n_in}")
    layers = unpack(spec, params)
    inputs, preacts = [], []
    h = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        inputs.append(h)
        pre = h @ W + b
        preacts.append(pre)
        h = pre if i == last else _act(spec.activation, pre)
    cache = MLPCache(spec, params.copy(), inputs, preacts, squeeze)
    return (h[0] if squeeze else h), cache


def mlp_backward(
    spec: MLPSpec, params: np.ndarray, cache: MLPCache, grad_output: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients; batch gradients are summed over rows."""
    if cache.spec != spec or not np.array_equal(cache.params, params):
        raise ValueError("cache does not belong to this (spec, params) pair")
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    if g.shape != cache.preacts[-1].shape:
        raise ValueError(f"grad_output shape {g.shape} != output shape {cache.preacts[-1].shape}")
    layers = unpack(spec, params)
    grad = np.zeros(spec.n_params)
    slices = spec._slices
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i != len(layers) - 1:
            g = _act_grad(spec.activation, cache.preacts[i], g)
        w_sl, b_sl, _, _ = slices[i]
        grad[w_sl] = (cache.inputs[i].T @ g).ravel()
        grad[b_sl] = g.sum(axis=0)
        g = g @ W.T
    return grad, (g[0] if cache.squeeze else g)


def finite_diff_grad(
    loss_fn: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    for i in range(p.size):
        old = p[i]
        p[i] = old + eps
        hi = float(loss_fn(p))
        p[i] = old - eps
        lo = float(loss_fn(p))
        p[i] = old
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite loss while perturbing coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.kind == "sgd_momentum" and not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def reset(self) -> None:
        self.m = None
        self.v = None
        self.step = 0


def optimizer_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Apply one update and return new params. Mutates only ``state``."""
    if params.shape != grad.shape:
        raise ValueError(f"params {params.shape} and grad {grad.shape} differ")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    if state.m is None:
        state.m = np.zeros_like(params)
    if state.kind == "sgd_momentum":
        state.m = state.momentum * state.m + grad
        state.step += 1
        return params - state.learning_rate * state.m
    if state.v is None:
        state.v = np.zeros_like(params)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


def concat_params(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(p, dtype=np.float64).ravel() for p in parts])
