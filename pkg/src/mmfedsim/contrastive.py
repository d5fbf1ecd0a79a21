"""Model-contrastive regularisers on per-modality representations.

All functions take a list with one array per modality. An array is either a
single vector ``(dim,)`` or a batch ``(batch, dim)``; batch losses are the mean
over samples of the per-sample loss (summed over modalities), and the returned
gradients are wrt the local representations only. Global and previous-round
representations are treated as constants.
"""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

INTER_DENOMINATORS = ("as_printed", "include_positive")


def _as_batches(*groups: Sequence[np.ndarray]) -> Tuple[List[List[np.ndarray]], bool]:
    m = len(groups[0])
    if m == 0 or any(len(g) != m for g in groups):
        raise ValueError("modality count differs between representation groups")
    squeeze = np.asarray(groups[0][0]).ndim == 1
    out = []
    for g in groups:
        arrs = [np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in g]
        out.append(arrs)
    shape = out[0][0].shape
    for g in out:
        for z in g:
            if z.shape != shape:
                raise ValueError(f"representation shape {z.shape} != {shape}")
    return out, squeeze


def _cosine(z: np.ndarray, other: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine similarity and its gradient wrt ``z``.

    Rows where either vector is zero get similarity 0 and zero gradient.
    """
    nz = np.sqrt(np.einsum("ij,ij->i", z, z))[:, None]
    no = np.sqrt(np.einsum("ij,ij->i", other, other))[:, None]
    if nz.all() and no.all():
        u = z / nz
        v = other / no
        sim = np.einsum("ij,ij->i", u, v)[:, None]
        return sim[:, 0], (v - sim * u) / nz
    ok = (nz > 0) & (no > 0)
    u = z / np.where(nz > 0, nz, 1.0)
    v = other / np.where(no > 0, no, 1.0)
    sim = np.einsum("ij,ij->i", u, v)[:, None] * ok
    return sim[:, 0], np.where(ok, (v - sim * u) / np.where(nz > 0, nz, 1.0), 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def mmoon_loss(
    z_loc: Sequence[np.ndarray], z_glob: Sequence[np.ndarray], z_prev: Sequence[np.ndarray], tau: float
) -> Tuple[float, List[np.ndarray]]:
    """Sum over modalities of -log softmax of the (global, previous) cosine pair.

    Per modality this is ``softplus((sim_prev - sim_glob) / tau)``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    (loc, glob, prev), squeeze = _as_batches(z_loc, z_glob, z_prev)
    n = loc[0].shape[0]
    total = 0.0
    grads = []
    for zl, zg, zp in zip(loc, glob, prev):
        s_pos, d_pos = _cosine(zl, zg)
        s_neg, d_neg = _cosine(zl, zp)
        x = (s_neg - s_pos) / tau
        total += float(np.sum(np.logaddexp(0.0, x)))
        w = _sigmoid(x)[:, None] / tau
        grads.append(w * (d_neg - d_pos) / n)
    if squeeze:
        grads = [g[0] for g in grads]
    return total / n, grads


def cream_intra_loss(
    z: Sequence[np.ndarray], z_glob: Sequence[np.ndarray], z_prev: Sequence[np.ndarray]
) -> Tuple[float, List[np.ndarray]]:
    """Intra-modal term with f(a, b) = exp(a . b): global rep positive, previous local rep negative."""
    (loc, glob, prev), squeeze = _as_batches(z, z_glob, z_prev)
    n = loc[0].shape[0]
    total = 0.0
    grads = []
    for zl, zg, zp in zip(loc, glob, prev):
        x = np.sum(zl * zp, axis=1) - np.sum(zl * zg, axis=1)
        total += float(np.sum(np.logaddexp(0.0, x)))
        grads.append(_sigmoid(x)[:, None] * (zp - zg) / n)
    if squeeze:
        grads = [g[0] for g in grads]
    return total / n, grads


def cream_inter_loss(
    z: Sequence[np.ndarray],
    rows: Sequence[int],
    global_bank: Sequence[np.ndarray],
    denominator: str = "as_printed",
) -> Tuple[float, List[np.ndarray]]:
    """Inter-modal term against the global representations of the whole public set.

    ``z[m][i]`` is the local modality-m representation of public sample
    ``rows[i]``; ``global_bank[m]`` holds the global modality-m representation of
    every public sample. For each ordered pair (m1, m2), m1 != m2, the
    numerator is the score against the same sample's global m2 representation.
    With ``denominator="as_printed"`` the sum runs over every *other* public
    sample (the positive is excluded, so the loss may be negative);
    ``"include_positive"`` gives the usual InfoNCE form.
    """
    if denominator not in INTER_DENOMINATORS:
        raise ValueError(f"denominator must be one of {INTER_DENOMINATORS}")
    (loc,), squeeze = _as_batches(z)
    bank = [np.asarray(g, dtype=np.float64) for g in global_bank]
    if len(bank) != len(loc):
        raise ValueError("bank modality count differs from local representations")
    n_public = bank[0].shape[0]
    if n_public < 2:
        raise ValueError("the inter-modal loss needs at least two public samples")
    if any(g.shape != (n_public, loc[0].shape[1]) for g in bank):
        raise ValueError("global bank shape does not match the representations")
    rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
    n = loc[0].shape[0]
    if rows.shape != (n,):
        raise ValueError("one public row index per local representation is required")
    M = len(loc)
    total = 0.0
    grads = [np.zeros_like(zl) for zl in loc]
    for m1 in range(M):
        for m2 in range(M):
            if m1 == m2:
                continue
            s = loc[m1] @ bank[m2].T  # (n, |P|)
            pos = s[np.arange(n), rows]
            if denominator == "as_printed":
                s = s.copy()
                s[np.arange(n), rows] = -np.inf
            s_max = s.max(axis=1, keepdims=True)
            e = np.exp(s - s_max)
            denom = e.sum(axis=1, keepdims=True)
            total += float(np.sum(np.log(denom[:, 0]) + s_max[:, 0] - pos))
            p = e / denom
            grads[m1] += (p @ bank[m2] - bank[m2][rows]) / n
    if squeeze:
        grads = [g[0] for g in grads]
    return total / n, grads
