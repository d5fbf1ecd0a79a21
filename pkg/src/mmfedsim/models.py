"""Multimodal model: per-modality MLP encoders, L2-normalised projections, fusion head.

The parameter vector is laid out as ``[encoder_0 | encoder_1 | ... | head]``.
Representations are unit-normalised before they reach the head or any
contrastive term, so cosine similarity and dot product coincide.

``alignment_loss`` is a pairwise symmetric in-batch contrastive objective. It
stands in for the trilinear Symile objective used for the real
CXR/ECG/labs data, which is not reproduced here.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensor_ops import MLPCache, MLPSpec, init_params, mlp_backward, mlp_forward

TASKS = ("multiclass", "multilabel", "retrieval")
DEFAULT_TEMPERATURE = 0.07
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class MultimodalModelSpec:
    encoder_specs: Tuple[MLPSpec, ...]
    projection_dim: int
    head_spec: Optional[MLPSpec]
    task: str

    def __post_init__(self):
        object.__setattr__(self, "encoder_specs", tuple(self.encoder_specs))
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not 1 <= len(self.encoder_specs) <= 4:
            raise ValueError("between 1 and 4 modalities are supported")
        for enc in self.encoder_specs:
            if enc.n_out != self.projection_dim:
                raise ValueError("every encoder must output projection_dim")
        if self.task == "retrieval":
            if self.head_spec is not None:
                raise ValueError("the retrieval task has no head")
        else:
            if self.head_spec is None:
                raise ValueError(f"task {self.task} needs a head")
            if self.head_spec.n_in != self.n_modalities * self.projection_dim:
                raise ValueError("head input must equal n_modalities * projection_dim")

    @property
    def n_modalities(self) -> int:
        return len(self.encoder_specs)

    @property
    def modality_dims(self) -> Tuple[int, ...]:
        return tuple(e.n_in for e in self.encoder_specs)

    @property
    def n_outputs(self) -> int:
        return 0 if self.head_spec is None else self.head_spec.n_out

    def param_slices(self) -> Tuple[List[slice], Optional[slice]]:
        return self._param_slices

    @cached_property
    def _param_slices(self) -> Tuple[List[slice], Optional[slice]]:
        pos = 0
        enc = []
        for e in self.encoder_specs:
            enc.append(slice(pos, pos + e.n_params))
            pos += e.n_params
        head = None
        if self.head_spec is not None:
            head = slice(pos, pos + self.head_spec.n_params)
        return enc, head

    @cached_property
    def n_params(self) -> int:
        total = sum(e.n_params for e in self.encoder_specs)
        return total + (0 if self.head_spec is None else self.head_spec.n_params)


def build_model_spec(
    modality_dims: Sequence[int],
    task: str,
    n_outputs: int = 0,
    hidden: int = 32,
    projection_dim: int = 16,
    head_hidden: Optional[int] = 32,
    activation: str = "relu",
) -> MultimodalModelSpec:
    encoders = tuple(MLPSpec((d, hidden, projection_dim), activation) for d in modality_dims)
    head = None
    if task != "retrieval":
        sizes = [len(modality_dims) * projection_dim]
        if head_hidden:
            sizes.append(head_hidden)
        sizes.append(n_outputs)
        head = MLPSpec(tuple(sizes), activation)
    return MultimodalModelSpec(encoders, projection_dim, head, task)


def init_model(spec: MultimodalModelSpec, seed: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed)
    parts = [init_params(e, s) for e, s in zip(spec.encoder_specs, ss.generate_state(spec.n_modalities))]
    if spec.head_spec is not None:
        parts.append(init_params(spec.head_spec, int(ss.generate_state(spec.n_modalities + 1)[-1])))
    return np.concatenate(parts)


@dataclass
class Batch:
    inputs: List[np.ndarray]  # one (batch, dim_m) array per modality
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.inputs[0].shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch([x[idx] for x in self.inputs], None if self.labels is None else self.labels[idx])


@dataclass
class ForwardResult:
    z: List[np.ndarray]
    norms: List[np.ndarray]
    enc_caches: List[MLPCache]
    logits: Optional[np.ndarray] = None
    head_cache: Optional[MLPCache] = None


def _check_inputs(spec: MultimodalModelSpec, inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    if len(inputs) != spec.n_modalities:
        raise ValueError(f"expected {spec.n_modalities} modalities, got {len(inputs)}")
    out = []
    for x, d in zip(inputs, spec.modality_dims):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != d:
            raise ValueError(f"modality input of width {x.shape[1]} does not match {d}")
        out.append(x)
    return out


def l2_normalize(raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-normalise; rows with zero norm pass through unchanged."""
    norms = np.sqrt(np.einsum("ij,ij->i", raw, raw))[:, None]
    zero = norms < _NORM_FLOOR
    if zero.any():
        warnings.warn("zero representation left unnormalised", RuntimeWarning, stacklevel=3)
        norms = np.where(zero, 0.0, norms)
    return raw / np.where(zero, 1.0, norms), norms


def l2_normalize_backward(z: np.ndarray, norms: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    zero = norms < _NORM_FLOOR
    proj = grad_z - z * np.einsum("ij,ij->i", z, grad_z)[:, None]
    return np.where(zero, grad_z, proj / np.where(zero, 1.0, norms))


def forward(
    spec: MultimodalModelSpec, params: np.ndarray, inputs: Sequence[np.ndarray], with_head: bool = True
) -> ForwardResult:
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
    inputs = _check_inputs(spec, inputs)
    enc_slices, head_slice = spec.param_slices()
    zs, norms, caches = [], [], []
    for enc, sl, x in zip(spec.encoder_specs, enc_slices, inputs):
        raw, cache = mlp_forward(enc, params[sl], x)
        z, n = l2_normalize(raw)
        zs.append(z)
        norms.append(n)
        caches.append(cache)
    res = ForwardResult(zs, norms, caches)
    if with_head and spec.head_spec is not None:
        res.logits, res.head_cache = mlp_forward(spec.head_spec, params[head_slice], np.concatenate(zs, axis=1))
    return res


def backward(
    spec: MultimodalModelSpec,
    params: np.ndarray,
    fwd: ForwardResult,
    grad_logits: Optional[np.ndarray] = None,
    grad_z: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> np.ndarray:
    """Gradient of a scalar whose partials wrt logits and normalised z are given."""
    enc_slices, head_slice = spec.param_slices()
    grad = np.zeros(spec.n_params)
    M, P = spec.n_modalities, spec.projection_dim
    gz = [np.zeros_like(z) for z in fwd.z]
    if grad_z is not None:
        for m, g in enumerate(grad_z):
            if g is not None:
                gz[m] = gz[m] + g
    if grad_logits is not None:
        if fwd.head_cache is None:
            raise ValueError("forward pass was run without the head")
        g_head, g_in = mlp_backward(spec.head_spec, params[head_slice], fwd.head_cache, grad_logits)
        grad[head_slice] = g_head
        for m in range(M):
            gz[m] += g_in[:, m * P:(m + 1) * P]
    for m in range(M):
        g_raw = l2_normalize_backward(fwd.z[m], fwd.norms[m], gz[m])
        grad[enc_slices[m]], _ = mlp_backward(spec.encoder_specs[m], params[enc_slices[m]], fwd.enc_caches[m], g_raw)
    return grad


def encode(spec: MultimodalModelSpec, params: np.ndarray, inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    squeeze = np.asarray(inputs[0]).ndim == 1
    zs = forward(spec, params, inputs, with_head=False).z
    return [z[0] for z in zs] if squeeze else zs


def predict(spec: MultimodalModelSpec, params: np.ndarray, inputs: Sequence[np.ndarray]) -> np.ndarray:
    if spec.task == "retrieval":
        raise ValueError("retrieval models have no prediction head")
    squeeze = np.asarray(inputs[0]).ndim == 1
    logits = forward(spec, params, inputs).logits
    return logits[0] if squeeze else logits


# -- losses on logits / representations ------------------------------------

def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient wrt logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    labels = np.asarray(labels, dtype=np.int64)
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def sigmoid_bce(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Per-label binary cross-entropy, summed over labels, averaged over the batch."""
    n = logits.shape[0]
    t = np.asarray(targets, dtype=np.float64)
    # log(1 + exp(x)) - t x, written stably
    loss = np.logaddexp(0.0, logits) - t * logits
    grad = 1.0 / (1.0 + np.exp(-logits)) - t
    return float(loss.sum() / n), grad / n


def alignment_terms(zs: Sequence[np.ndarray], temperature: float) -> Tuple[float, List[np.ndarray]]:
    """Symmetric in-batch contrastive loss over all ordered modality pairs.

    For pair (a, b), sample i's modality-a representation must pick out its own
    modality-b representation among all modality-b representations in the batch.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = zs[0].shape[0]
    if n < 2:
        raise ValueError("alignment loss needs a batch of at least 2")
    M = len(zs)
    pairs = [(a, b) for a in range(M) for b in range(M) if a != b]
    grads = [np.zeros_like(z) for z in zs]
    total = 0.0
    eye = np.eye(n)
    for a, b in pairs:
        s = zs[a] @ zs[b].T / temperature
        s_max = s.max(axis=1, keepdims=True)
        e = np.exp(s - s_max)
        denom = e.sum(axis=1, keepdims=True)
        total += float(np.mean(np.log(denom[:, 0]) + s_max[:, 0] - np.diag(s)))
        g = (e / denom - eye) / n
        grads[a] += g @ zs[b] / temperature
        grads[b] += g.T @ zs[a] / temperature
    k = len(pairs)
    return total / k, [g / k for g in grads]


def task_terms(
    spec: MultimodalModelSpec, fwd: ForwardResult, labels: Optional[np.ndarray], temperature: float = DEFAULT_TEMPERATURE
) -> Tuple[float, Optional[np.ndarray], Optional[List[np.ndarray]]]:
    """Task loss with gradients wrt logits and z, for whichever task ``spec`` is."""
    if spec.task == "retrieval":
        loss, gz = alignment_terms(fwd.z, temperature)
        return loss, None, gz
    if labels is None:
        raise ValueError("classification batches need labels")
    if spec.task == "multiclass":
        loss, gl = softmax_xent(fwd.logits, labels)
    else:
        loss, gl = sigmoid_bce(fwd.logits, labels)
    return loss, gl, None


def task_loss(spec: MultimodalModelSpec, params: np.ndarray, batch: Batch) -> Tuple[float, np.ndarray]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if spec.task == "retrieval":
        raise ValueError("use alignment_loss for the retrieval task")
    fwd = forward(spec, params, batch.inputs)
    loss, gl, _ = task_terms(spec, fwd, batch.labels)
    return loss, backward(spec, params, fwd, grad_logits=gl)


def alignment_loss(
    spec: MultimodalModelSpec, params: np.ndarray, batch: Batch, temperature: float = DEFAULT_TEMPERATURE
) -> Tuple[float, np.ndarray]:
    if spec.task != "retrieval":
        raise ValueError("alignment_loss is defined for retrieval models")
    if len(batch) < 2:
        raise ValueError("alignment loss needs a batch of at least 2")
    fwd = forward(spec, params, batch.inputs, with_head=False)
    loss, gz = alignment_terms(fwd.z, temperature)
    return loss, backward(spec, params, fwd, grad_z=gz)
