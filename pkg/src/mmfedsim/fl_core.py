"""Federated training: local objectives, client updates and server aggregation.

Every client trains from the broadcast global model with its own RNG stream,
derived from (master seed, client id, round), so execution order never changes
the result. Aggregation sums client contributions in ascending client id.

Adam state lives with the client and persists across rounds, so a single
client running FedAvg walks exactly the trajectory of centralised training.
FedNova is the exception: its SGD momentum buffer restarts every round, which
is what its step-coefficient normalisation assumes.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import contrastive
from .models import Batch, MultimodalModelSpec, backward, forward, init_model, task_terms
from .tensor_ops import NumericError, OptimizerState, optimizer_step


ALGORITHMS = ("fedavg", "fedprox", "scaffold", "fednova", "mmoon", "creammfl")

ROLE_INIT, ROLE_CLIENT, ROLE_SERVER, ROLE_PUBLIC = 101, 102, 103, 104


@dataclass
class FLConfig:
    local_epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 1e-3
    sgd_learning_rate: float = 0.05
    sgd_momentum: float = 0.9
    mu_fedprox: float = 0.1
    mu_moon: float = 0.1
    tau_moon: float = 0.5
    gamma_creamfl: float = 0.002
    alpha_creamfl: float = 0.03
    grad_scale: float = 1.0
    distill_epochs: int = 3
    distill_lr: Optional[float] = None
    ensemble_temperature: float = 1.0
    inter_denominator: str = "as_printed"
    alignment_temperature: float = 0.07

    def __post_init__(self):
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")
        if self.mu_fedprox < 0 or self.mu_moon < 0 or self.gamma_creamfl < 0:
            raise ValueError("regularisation weights must be non-negative")
        if self.tau_moon <= 0 or self.alignment_temperature <= 0 or self.ensemble_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.alpha_creamfl <= 1.0:
            raise ValueError("alpha_creamfl must lie in [0, 1]")
        if not 0.0 <= self.sgd_momentum < 1.0:
            raise ValueError("sgd_momentum must lie in [0, 1)")
        if self.inter_denominator not in contrastive.INTER_DENOMINATORS:
            raise ValueError(f"inter_denominator must be one of {contrastive.INTER_DENOMINATORS}")


@dataclass
class ClientState:
    client_id: int
    data: Batch
    optimizer: OptimizerState
    control: Optional[np.ndarray] = None  # SCAFFOLD c_i
    prev_params: Optional[np.ndarray] = None  # previous-round local model (m-MOON, CreamMFL)

    @property
    def n_samples(self) -> int:
        return len(self.data)


@dataclass
class ClientUpdate:
    client_id: int
    params: np.ndarray
    n_samples: int
    n_steps: int
    mean_loss: float
    control_delta: Optional[np.ndarray] = None
    public_reps: Optional[List[np.ndarray]] = None
    a_norm: Optional[float] = None


@dataclass
class ServerState:
    params: np.ndarray
    round: int = 0
    control: Optional[np.ndarray] = None  # SCAFFOLD c
    public_global_reps: Optional[List[np.ndarray]] = None
    optimizer: Optional[OptimizerState] = None  # CreamMFL distillation


@dataclass
class Federation:
    algorithm: str
    spec: MultimodalModelSpec
    config: FLConfig
    server: ServerState
    clients: List[ClientState]
    seed: int
    public: Optional[Batch] = None
    virtual: Optional[ClientState] = None


# -- helpers ------------------------------------------------------------------

def stream(seed: int, role: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), role, *map(int, keys)])


def init_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), ROLE_INIT]).generate_state(1)[0])


def batch_indices(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1) -> Iterator[np.ndarray]:
    """Shuffled mini-batches; the last partial batch is kept, merged into the
    previous one only if it would be smaller than ``min_size``."""
    perm = rng.permutation(n)
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and chunks[-1].size < min_size:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    yield from chunks


def steps_per_epoch(n: int, batch_size: int, min_size: int = 1) -> int:
    k = -(-n // batch_size)
    if k > 1 and n - (k - 1) * batch_size < min_size:
        k -= 1
    return k


def make_optimizer(algorithm: str, config: FLConfig) -> OptimizerState:
    if algorithm == "fednova":
        return OptimizerState("sgd_momentum", config.sgd_learning_rate, momentum=config.sgd_momentum)
    return OptimizerState("adam", config.learning_rate)


def fednova_a_norm(n_steps: int, rho: float) -> float:
    """L1 norm of the momentum-SGD step coefficients over ``n_steps`` steps."""
    if not 0.0 <= rho < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if rho == 0.0:
        return float(n_steps)
    return (n_steps - rho * (1.0 - rho ** n_steps) / (1.0 - rho)) / (1.0 - rho)


def _min_batch(spec: MultimodalModelSpec) -> int:
    return 2 if spec.task == "retrieval" else 1


def _task_objective(spec: MultimodalModelSpec, config: FLConfig, params: np.ndarray, batch: Batch):
    fwd = forward(spec, params, batch.inputs, with_head=spec.task != "retrieval")
    loss, gl, gz = task_terms(spec, fwd, batch.labels, config.alignment_temperature)
    return fwd, loss, gl, gz


# Hook signature: (params, batch_idx, fwd, loss, grad_logits, grad_z) -> (extra_loss, extra_grad_z, extra_grad)
Hook = Callable[..., Tuple[float, Optional[List[np.ndarray]], Optional[np.ndarray]]]


def _train_loop(
    spec: MultimodalModelSpec,
    config: FLConfig,
    params: np.ndarray,
    data: Batch,
    optimizer: OptimizerState,
    epochs: int,
    rng: np.random.Generator,
    hook: Optional[Hook] = None,
    on_step: Optional[Callable[[np.ndarray], None]] = None,
) -> Tuple[np.ndarray, int, List[float]]:
    n = len(data)
    if n == 0:
        raise ValueError("client has no data")
    losses = []
    steps = 0
    for _ in range(epochs):
        for idx in batch_indices(n, config.batch_size, rng, _min_batch(spec)):
            batch = data.take(idx)
            fwd, loss, gl, gz = _task_objective(spec, config, params, batch)
            extra_grad = None
            if hook is not None:
                extra_loss, extra_gz, extra_grad = hook(params, idx, fwd)
                loss += extra_loss
                if extra_gz is not None:
                    gz = extra_gz if gz is None else [a + b for a, b in zip(gz, extra_gz)]
            if not np.isfinite(loss):
                raise NumericError(f"non-finite local loss at step {steps}")
            grad = backward(spec, params, fwd, grad_logits=gl, grad_z=gz)
            if extra_grad is not None:
                grad = grad + extra_grad
            params = optimizer_step(optimizer, params, grad)
            steps += 1
            losses.append(loss)
            if on_step is not None:
                on_step(params)
    return params, steps, losses


# -- local training per algorithm --------------------------------------------

def local_train_fedavg(
    spec, config, client: ClientState, w_t: np.ndarray, rng, on_step=None
) -> ClientUpdate:
    w, steps, losses = _train_loop(spec, config, w_t.copy(), client.data, client.optimizer, config.local_epochs, rng, on_step=on_step)
    return ClientUpdate(client.client_id, w, client.n_samples, steps, float(np.mean(losses)))


def proximal_term(params: np.ndarray, anchor: np.ndarray, mu: float) -> Tuple[float, np.ndarray]:
    diff = params - anchor
    return 0.5 * mu * float(diff @ diff), mu * diff


def local_train_fedprox(spec, config, client: ClientState, w_t: np.ndarray, rng, on_step=None) -> ClientUpdate:
    mu = config.mu_fedprox

    def hook(params, idx, fwd):
        loss, grad = proximal_term(params, w_t, mu)
        return loss, None, grad

    w, steps, losses = _train_loop(spec, config, w_t.copy(), client.data, client.optimizer, config.local_epochs, rng, hook, on_step)
    return ClientUpdate(client.client_id, w, client.n_samples, steps, float(np.mean(losses)))


def local_train_scaffold(
    spec, config, client: ClientState, w_t: np.ndarray, c: np.ndarray, rng, on_step=None
) -> ClientUpdate:
    """Local steps use g + grad_scale * (c - c_i); c_i is refreshed with option II."""
    if client.control is None:
        client.control = np.zeros_like(w_t)
    correction = config.grad_scale * (c - client.control)

    def hook(params, idx, fwd):
        return 0.0, None, correction

    w, steps, losses = _train_loop(spec, config, w_t.copy(), client.data, client.optimizer, config.local_epochs, rng, hook, on_step)
    lr = client.optimizer.learning_rate
    if steps == 0 or lr == 0:
        raise ValueError("SCAFFOLD needs at least one local step and a non-zero learning rate")
    new_control = client.control - c + (w_t - w) / (steps * lr)
    delta = new_control - client.control
    client.control = new_control
    return ClientUpdate(client.client_id, w, client.n_samples, steps, float(np.mean(losses)), control_delta=delta)


def local_train_fednova(spec, config, client: ClientState, w_t: np.ndarray, rng, on_step=None) -> ClientUpdate:
    client.optimizer.reset()
    w, steps, losses = _train_loop(spec, config, w_t.copy(), client.data, client.optimizer, config.local_epochs, rng, on_step=on_step)
    a = fednova_a_norm(steps, client.optimizer.momentum)
    return ClientUpdate(client.client_id, w, client.n_samples, steps, float(np.mean(losses)), a_norm=a)


def local_train_mmoon(
    spec, config, client: ClientState, w_t: np.ndarray, w_prev_local: np.ndarray, rng, on_step=None
) -> ClientUpdate:
    """Task loss plus mu times the batch-mean modality-wise model-contrastive loss."""
    mu, tau = config.mu_moon, config.tau_moon
    z_glob = forward(spec, w_t, client.data.inputs, with_head=False).z
    z_prev = forward(spec, w_prev_local, client.data.inputs, with_head=False).z

    def hook(params, idx, fwd):
        loss, gz = contrastive.mmoon_loss(fwd.z, [z[idx] for z in z_glob], [z[idx] for z in z_prev], tau)
        return mu * loss, [mu * g for g in gz], None

    w, steps, losses = _train_loop(spec, config, w_t.copy(), client.data, client.optimizer, config.local_epochs, rng, hook, on_step)
    client.prev_params = w.copy()
    return ClientUpdate(client.client_id, w, client.n_samples, steps, float(np.mean(losses)))


def cream_regularizer(
    spec: MultimodalModelSpec,
    params: np.ndarray,
    public: Batch,
    rows: np.ndarray,
    global_bank: Sequence[np.ndarray],
    prev_bank: Sequence[np.ndarray],
    gamma: float,
    denominator: str = "as_printed",
) -> Tuple[float, np.ndarray]:
    """gamma * (intra + inter) on public rows ``rows``, with its parameter gradient."""
    fwd = forward(spec, params, public.take(rows).inputs, with_head=False)
    intra, g_intra = contrastive.cream_intra_loss(fwd.z, [g[rows] for g in global_bank], [p[rows] for p in prev_bank])
    inter, g_inter = contrastive.cream_inter_loss(fwd.z, rows, global_bank, denominator)
    gz = [gamma * (a + b) for a, b in zip(g_intra, g_inter)]
    return gamma * (intra + inter), backward(spec, params, fwd, grad_z=gz)


def local_train_cream(
    spec, config, client: ClientState, w_t: np.ndarray, public: Batch, global_bank, seed: int, round_idx: int, rng, on_step=None
) -> ClientUpdate:
    gamma = config.gamma_creamfl
    prev = client.prev_params if client.prev_params is not None else w_t
    prev_bank = forward(spec, prev, public.inputs, with_head=False).z
    pub_rng = stream(seed, ROLE_PUBLIC, client.client_id, round_idx)
    n_pub = len(public)
    size = min(config.batch_size, n_pub)

    def hook(params, idx, fwd):
        rows = np.sort(pub_rng.choice(n_pub, size=size, replace=False))
        loss, grad = cream_regularizer(spec, params, public, rows, global_bank, prev_bank, gamma, config.inter_denominator)
        return loss, None, grad

    w, steps, losses = _train_loop(spec, config, w_t.copy(), client.data, client.optimizer, config.local_epochs, rng, hook if gamma > 0 else None, on_step)
    client.prev_params = w.copy()
    reps = forward(spec, w, public.inputs, with_head=False).z
    return ClientUpdate(client.client_id, w, client.n_samples, steps, float(np.mean(losses)), public_reps=reps)


# -- aggregation ----------------------------------------------------------------

def _sorted(updates: Sequence[ClientUpdate]) -> List[ClientUpdate]:
    if not updates:
        raise ValueError("no client updates to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    length = ups[0].params.shape
    if any(u.params.shape != length for u in ups):
        raise ValueError("client parameter vectors differ in length")
    return ups


def fedavg_aggregate(updates: Sequence[ClientUpdate], w_t: Optional[np.ndarray] = None) -> np.ndarray:
    """Sample-weighted mean of client parameters, summed in client-id order."""
    ups = _sorted(updates)
    if w_t is not None and w_t.shape != ups[0].params.shape:
        raise ValueError("global and client parameter lengths differ")
    total = float(sum(u.n_samples for u in ups))
    out = np.zeros_like(ups[0].params)
    for u in ups:
        out += (u.n_samples / total) * u.params
    return out


def fednova_aggregate(updates: Sequence[ClientUpdate], w_t: np.ndarray, learning_rate: float) -> np.ndarray:
    """Normalise each client's change by its step-coefficient norm, average, rescale by tau_eff."""
    ups = _sorted(updates)
    if any(u.a_norm is None for u in ups):
        raise ValueError("FedNova updates must carry a_norm")
    total = float(sum(u.n_samples for u in ups))
    tau_eff = 0.0
    direction = np.zeros_like(w_t)
    for u in ups:
        p = u.n_samples / total
        tau_eff += p * u.a_norm
        direction += p * (w_t - u.params) / (learning_rate * u.a_norm)
    return w_t - learning_rate * tau_eff * direction


def scaffold_server_control(c: np.ndarray, updates: Sequence[ClientUpdate], n_clients: int) -> np.ndarray:
    out = c.copy()
    for u in _sorted(updates):
        out += u.control_delta / n_clients
    return out


def ensemble_targets(
    client_reps: Sequence[Sequence[np.ndarray]], global_reps: Sequence[np.ndarray], alpha: float, temperature: float = 1.0
) -> List[np.ndarray]:
    """alpha * previous global rep + (1 - alpha) * similarity-weighted client ensemble.

    For each public sample and modality, client weights are a softmax over the
    cosine similarity between the client's and the previous global representation.
    """
    targets = []
    for m, g in enumerate(global_reps):
        stack = np.stack([reps[m] for reps in client_reps])  # (clients, n, dim)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        sn = stack / np.maximum(np.linalg.norm(stack, axis=2, keepdims=True), 1e-12)
        logits = np.einsum("knd,nd->kn", sn, gn) / temperature
        logits -= logits.max(axis=0, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=0, keepdims=True)
        ensemble = np.einsum("kn,knd->nd", w, stack)
        targets.append(alpha * g + (1.0 - alpha) * ensemble)
    return targets


def distill_loss(spec: MultimodalModelSpec, params: np.ndarray, public: Batch, targets: Sequence[np.ndarray], rows=None):
    """Mean over samples and modalities of the squared distance to the target representation."""
    rows = np.arange(len(public)) if rows is None else rows
    fwd = forward(spec, params, public.take(rows).inputs, with_head=False)
    n, M = rows.size, spec.n_modalities
    loss = 0.0
    gz = []
    for z, t in zip(fwd.z, targets):
        d = z - t[rows]
        loss += float(np.sum(d * d))
        gz.append(2.0 * d / (n * M))
    return loss / (n * M), backward(spec, params, fwd, grad_z=gz)


def distill(
    spec: MultimodalModelSpec,
    params: np.ndarray,
    public: Batch,
    targets: Sequence[np.ndarray],
    optimizer: OptimizerState,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, List[float]]:
    """Regress the model's public-set representations onto ``targets``; returns per-epoch full-set loss."""
    history = [distill_loss(spec, params, public, targets)[0]]
    for _ in range(epochs):
        for rows in batch_indices(len(public), batch_size, rng):
            _, grad = distill_loss(spec, params, public, targets, np.sort(rows))
            params = optimizer_step(optimizer, params, grad)
        history.append(distill_loss(spec, params, public, targets)[0])
    return params, history


# -- federation setup and rounds ----------------------------------------------

def create_federation(
    algorithm: str,
    spec: MultimodalModelSpec,
    config: FLConfig,
    client_data: Sequence[Batch],
    seed: int,
    public: Optional[Batch] = None,
    init_params: Optional[np.ndarray] = None,
) -> Federation:
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if not client_data:
        raise ValueError("need at least one client")
    w0 = init_model(spec, init_seed(seed)) if init_params is None else np.array(init_params, dtype=np.float64)
    clients = []
    for cid, data in enumerate(client_data):
        if len(data) == 0:
            raise ValueError(f"client {cid} has no data")
        st = ClientState(cid, data, make_optimizer(algorithm, config))
        if algorithm == "scaffold":
            st.control = np.zeros_like(w0)
        if algorithm in ("mmoon", "creammfl"):
            st.prev_params = w0.copy()
        clients.append(st)
    server = ServerState(w0.copy())
    if algorithm == "scaffold":
        server.control = np.zeros_like(w0)
    virtual = None
    if algorithm == "creammfl":
        if public is None or len(public) == 0:
            raise ValueError("CreamMFL needs a non-empty public set")
        if spec.task != "retrieval" and public.labels is None:
            raise ValueError("the virtual client needs a labelled public set")
        virtual = ClientState(len(clients), public, make_optimizer(algorithm, config))
        server.optimizer = OptimizerState("adam", config.distill_lr or config.learning_rate)
    return Federation(algorithm, spec, config, server, clients, seed, public, virtual)


def _train_client(fed: Federation, client: ClientState, global_bank=None) -> ClientUpdate:
    w_t = fed.server.params
    rng = stream(fed.seed, ROLE_CLIENT, client.client_id, fed.server.round)
    spec, cfg = fed.spec, fed.config
    algo = fed.algorithm
    if algo == "fedavg":
        return local_train_fedavg(spec, cfg, client, w_t, rng)
    if algo == "fedprox":
        return local_train_fedprox(spec, cfg, client, w_t, rng)
    if algo == "scaffold":
        return local_train_scaffold(spec, cfg, client, w_t, fed.server.control, rng)
    if algo == "fednova":
        return local_train_fednova(spec, cfg, client, w_t, rng)
    if algo == "mmoon":
        return local_train_mmoon(spec, cfg, client, w_t, client.prev_params, rng)
    return local_train_cream(spec, cfg, client, w_t, fed.public, global_bank, fed.seed, fed.server.round, rng)


@dataclass
class ClientLog:
    round: int
    client_id: int
    n_samples: int
    n_steps: int
    mean_loss: float


def run_local_round(
    fed: Federation, threads: int = 1, order: Optional[Sequence[int]] = None
) -> Tuple[List[ClientUpdate], List[ClientLog]]:
    """Every client (plus the CreamMFL virtual client) trains once from the global model.

    ``order`` only changes execution order; updates come back sorted by client id.
    """
    global_bank = None
    if fed.algorithm == "creammfl":
        global_bank = forward(fed.spec, fed.server.params, fed.public.inputs, with_head=False).z
        fed.server.public_global_reps = global_bank
    members = list(fed.clients)
    if fed.virtual is not None:
        members.append(fed.virtual)
    if order is not None:
        by_id = {c.client_id: c for c in members}
        members = [by_id[i] for i in order]

    def work(client):
        try:
            if client is fed.virtual:
                return _train_virtual(fed, client)
            return _train_client(fed, client, global_bank)
        except NumericError as exc:
            raise NumericError(f"round {fed.server.round}, client {client.client_id}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            updates = list(pool.map(work, members))
    else:
        updates = [work(c) for c in members]
    updates.sort(key=lambda u: u.client_id)
    logs = [ClientLog(fed.server.round, u.client_id, u.n_samples, u.n_steps, u.mean_loss) for u in updates]
    return updates, logs


def _train_virtual(fed: Federation, client: ClientState) -> ClientUpdate:
    """The server-side model trained on the public set with the plain task loss."""
    rng = stream(fed.seed, ROLE_CLIENT, client.client_id, fed.server.round)
    w_t = fed.server.params
    w, steps, losses = _train_loop(fed.spec, fed.config, w_t.copy(), client.data, client.optimizer, fed.config.local_epochs, rng)
    reps = forward(fed.spec, w, fed.public.inputs, with_head=False).z
    return ClientUpdate(client.client_id, w, client.n_samples, steps, float(np.mean(losses)), public_reps=reps)


def aggregate(fed: Federation, updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Fold one round of updates into the server state and advance the round."""
    srv = fed.server
    for u in updates:
        if not np.all(np.isfinite(u.params)):
            raise NumericError(f"round {srv.round}: client {u.client_id} sent non-finite parameters")
    if fed.algorithm == "fednova":
        new = fednova_aggregate(updates, srv.params, fed.config.sgd_learning_rate)
    elif fed.algorithm == "creammfl":
        new = _cream_server_step(fed, updates)
    else:
        new = fedavg_aggregate(updates, srv.params)
    if fed.algorithm == "scaffold":
        srv.control = scaffold_server_control(srv.control, updates, len(fed.clients))
    if not np.all(np.isfinite(new)):
        raise NumericError(f"round {srv.round}: aggregated parameters are not finite")
    srv.params = new
    srv.round += 1
    return new


def _cream_server_step(fed: Federation, updates: Sequence[ClientUpdate]) -> np.ndarray:
    cfg = fed.config
    start = fedavg_aggregate(updates, fed.server.params)
    targets = ensemble_targets([u.public_reps for u in _sorted(updates)], fed.server.public_global_reps, cfg.alpha_creamfl, cfg.ensemble_temperature)
    rng = stream(fed.seed, ROLE_SERVER, fed.server.round)
    new, _ = distill(fed.spec, start, fed.public, targets, fed.server.optimizer, cfg.distill_epochs, cfg.batch_size, rng)
    return new


def run_round(fed: Federation, threads: int = 1) -> Tuple[List[ClientUpdate], List[ClientLog]]:
    updates, logs = run_local_round(fed, threads)
    aggregate(fed, updates)
    return updates, logs


# -- centralised reference -----------------------------------------------------

def centralized_train(
    spec: MultimodalModelSpec,
    config: FLConfig,
    data: Batch,
    seed: int,
    blocks: int,
    init_params: Optional[np.ndarray] = None,
    on_block: Optional[Callable[[int, np.ndarray], None]] = None,
    on_step: Optional[Callable[[np.ndarray], None]] = None,
) -> np.ndarray:
    """Plain mini-batch Adam on pooled data, ``blocks`` x ``local_epochs`` epochs.

    Block b draws its shuffles from the stream a lone client 0 would use in round b.
    """
    params = init_model(spec, init_seed(seed)) if init_params is None else np.array(init_params, dtype=np.float64)
    opt = OptimizerState("adam", config.learning_rate)
    n = len(data)
    for b in range(blocks):
        rng = stream(seed, ROLE_CLIENT, 0, b)
        for _ in range(config.local_epochs):
            for idx in batch_indices(n, config.batch_size, rng, _min_batch(spec)):
                batch = data.take(idx)
                fwd = forward(spec, params, batch.inputs, with_head=spec.task != "retrieval")
                loss, gl, gz = task_terms(spec, fwd, batch.labels, config.alignment_temperature)
                if not np.isfinite(loss):
                    raise NumericError(f"non-finite loss in centralized block {b}")
                params = optimizer_step(opt, params, backward(spec, params, fwd, grad_logits=gl, grad_z=gz))
                if on_step is not None:
                    on_step(params)
        if on_block is not None:
            on_block(b, params)
    return params
