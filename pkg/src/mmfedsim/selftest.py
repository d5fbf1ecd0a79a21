"""Quick oracle checks runnable without pytest (``mmfedsim selftest``)."""
from __future__ import annotations

from typing import Callable, List, Tuple

import numpy as np

from . import contrastive, fl_core
from .models import Batch, alignment_loss, build_model_spec, init_model, task_loss
from .tensor_ops import finite_diff_grad, relative_error

GRAD_TOL = 1e-5
REDUCTION_TOL = 1e-10


def _random_batch(rng, dims, n, task, n_out):
    inputs = [rng.standard_normal((n, d)) for d in dims]
    if task == "multiclass":
        labels = rng.integers(0, n_out, size=n)
    elif task == "multilabel":
        labels = rng.integers(0, 2, size=(n, n_out))
    else:
        labels = None
    return Batch(inputs, labels)


def _model_grad_errors(seed: int) -> List[Tuple[str, float]]:
    rng = np.random.default_rng(seed)
    dims = (5, 4, 3)
    out = []
    for task in ("multiclass", "multilabel", "retrieval"):
        spec = build_model_spec(dims, task, 3, hidden=6, projection_dim=4, head_hidden=5, activation="tanh")
        params = init_model(spec, seed) + 0.1 * rng.standard_normal(spec.n_params)
        batch = _random_batch(rng, dims, 6, task, 3)
        fn = (lambda p: alignment_loss(spec, p, batch)[0]) if task == "retrieval" else (lambda p: task_loss(spec, p, batch)[0])
        analytic = (alignment_loss if task == "retrieval" else task_loss)(spec, params, batch)[1]
        out.append((f"{task} loss", relative_error(analytic, finite_diff_grad(fn, params))))
    return out


def _rep_grad_errors(seed: int) -> List[Tuple[str, float]]:
    rng = np.random.default_rng(seed)
    M, B, P = 3, 4, 5
    unit = lambda a: a / np.linalg.norm(a, axis=-1, keepdims=True)
    zl = [rng.standard_normal((B, P)) for _ in range(M)]
    zg = [unit(rng.standard_normal((B, P))) for _ in range(M)]
    zp = [unit(rng.standard_normal((B, P))) for _ in range(M)]
    bank = [unit(rng.standard_normal((7, P))) for _ in range(M)]
    rows = rng.choice(7, size=B, replace=False)

    def flat_check(name, fn):
        flat = np.concatenate([z.ravel() for z in zl])
        unflat = lambda v: [v[m * B * P:(m + 1) * B * P].reshape(B, P) for m in range(M)]
        _, grads = fn(zl)
        analytic = np.concatenate([g.ravel() for g in grads])
        return name, relative_error(analytic, finite_diff_grad(lambda v: fn(unflat(v))[0], flat))

    return [
        flat_check("m-MOON", lambda z: contrastive.mmoon_loss(z, zg, zp, 0.5)),
        flat_check("intra-modal", lambda z: contrastive.cream_intra_loss(z, zg, zp)),
        flat_check("inter-modal", lambda z: contrastive.cream_inter_loss(z, rows, bank)),
    ]


def _reduction_gaps(seed: int) -> List[Tuple[str, float]]:
    rng = np.random.default_rng(seed)
    dims = (4, 3)
    spec = build_model_spec(dims, "multiclass", 3, hidden=5, projection_dim=3, head_hidden=4, activation="tanh")
    data = [_random_batch(rng, dims, n, "multiclass", 3) for n in (13, 9)]

    def final(algo, **over):
        cfg = fl_core.FLConfig(local_epochs=1, batch_size=4, **over)
        fed = fl_core.create_federation(algo, spec, cfg, data, seed)
        ups, _ = fl_core.run_local_round(fed)
        return [u.params for u in ups]

    base = final("fedavg")
    gaps = []
    for name, algo, over in (
        ("FedProx(mu=0) vs FedAvg", "fedprox", {"mu_fedprox": 0.0}),
        ("m-MOON(mu=0) vs FedAvg", "mmoon", {"mu_moon": 0.0}),
        ("SCAFFOLD round 1 vs FedAvg", "scaffold", {}),
    ):
        gaps.append((name, max(float(np.max(np.abs(a - b))) for a, b in zip(final(algo, **over), base))))
    return gaps


def run_all(emit: Callable[[str], None] = print) -> bool:
    ok = True
    for seed in range(3):
        for name, err in _model_grad_errors(seed) + _rep_grad_errors(seed):
            passed = err < GRAD_TOL
            ok &= passed
            emit(f"{'PASS' if passed else 'FAIL'} gradient {name} seed={seed} rel_err={err:.2e}")
    for name, gap in _reduction_gaps(0):
        passed = gap <= REDUCTION_TOL
        ok &= passed
        emit(f"{'PASS' if passed else 'FAIL'} reduction {name} max_gap={gap:.2e}")
    return ok
