"""Client and server steps of the federated meta-learning protocol, plus baselines."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradMode, Node
from .data import ClientDataset, LabeledWindow, sample_episode, stack
from .evaluation import accuracy
from .model import ArchitectureSpec, ParamSet, apply, build

log = logging.getLogger(__name__)

LossFn = Callable[[Mapping[str, Node]], Node]

METHODS = ("REFML", "REFML-no-AI", "FedAvg", "FedAvg-FT", "FedProx", "FedProx-FT", "Local")
TRAINING, TESTING = "training", "testing"


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.05
    beta: float = 0.05
    gamma: float = 0.05
    delta: float = 0.01
    eta: float = 0.05
    mu: float = 0.01
    encoder_steps: int = 5
    finetune_steps: int = 10
    rounds: int = 50
    grad_mode: GradMode = GradMode.SECOND
    resample_episodes: bool = True

    def __post_init__(self):
        object.__setattr__(self, "grad_mode", GradMode(self.grad_mode))
        for name in ("alpha", "beta", "gamma", "delta", "eta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mu < 0:
            raise ValueError(f"mu must be non-negative, got {self.mu}")
        if self.encoder_steps < 1 or self.finetune_steps < 1:
            raise ValueError("encoder_steps and finetune_steps must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")

    def zero_rates(self) -> HyperParams:
        return replace(self, alpha=0.0, beta=0.0, gamma=0.0, delta=0.0, eta=0.0)


# ---------------------------------------------------------------- losses


def model_loss(arch: ArchitectureSpec, windows: Sequence[LabeledWindow]) -> LossFn:
    """Mean cross-entropy of the classifier over ``windows`` (z-scored)."""
    x, y = stack(windows)
    xn = ad.constant(x)

    def loss(p: Mapping[str, Node]) -> Node:
        logits, _ = apply(arch, p, xn)
        return ad.softmax_cross_entropy(logits, y)

    return loss


def _finite(loss: Node, where: str) -> Node:
    if not np.isfinite(loss.value):
        raise ad.NonFiniteError(f"{where}: loss is not finite")
    return loss


def gradient_steps(params: ParamSet, loss_fn: LossFn, lr: float, steps: int,
                   names: Sequence[str] | None = None, where: str = "gradient step") -> ParamSet:
    """``steps`` full-batch descent steps on the entries in ``names`` (all by default)."""
    names = list(params) if names is None else list(names)
    for _ in range(steps):
        leaves = {k: ad.variable(params[k]) for k in names}
        nodes = {k: leaves.get(k) or ad.constant(v) for k, v in params.items()}
        loss = _finite(loss_fn(nodes), where)
        grads = ad.grad(loss, [leaves[k] for k in names])
        params = params.replace({k: params[k] - lr * g for k, g in zip(names, grads)})
    return params


# ---------------------------------------------------------------- client steps


def interpolate(weights: Mapping[str, np.ndarray], global_params: ParamSet,
                local_params: ParamSet) -> ParamSet:
    """Per-element blend ``a * global + (1 - a) * local``."""
    global_params.check_compatible(local_params)
    global_params.check_compatible(weights)
    return global_params.replace(
        {k: weights[k] * global_params[k] + (1.0 - weights[k]) * local_params[k] for k in global_params}
    )


def ones_like(params: ParamSet) -> ParamSet:
    return params.map(np.ones_like)


def adaptive_interpolate(local_params: ParamSet, interp: ParamSet, global_params: ParamSet,
                         loss_fn: LossFn, delta: float) -> tuple[ParamSet, ParamSet]:
    """One gradient step on the blend weights, then blend with the updated weights.

    The trial blend uses the previous weights; the returned weights are
    clamped to [0, 1] element-wise.
    """
    global_params.check_compatible(local_params)
    global_params.check_compatible(interp)
    leaves = {k: ad.variable(interp[k]) for k in interp}
    trial = {}
    for k in global_params:
        g, loc = ad.constant(global_params[k]), ad.constant(local_params[k])
        trial[k] = ad.add(ad.mul(leaves[k], ad.sub(g, loc)), loc)
    loss = _finite(loss_fn(trial), "adaptive_interpolate")
    grads = ad.grad(loss, list(leaves.values()))
    new_a = interp.replace(
        {k: np.clip(interp[k] - delta * g, 0.0, 1.0) for k, g in zip(leaves, grads)}
    )
    return interpolate(new_a, global_params, local_params), new_a


def update_encoder(params: ParamSet, loss_fn: LossFn, eta: float, steps: int) -> ParamSet:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return gradient_steps(params, loss_fn, eta, steps, params.encoder_names, "update_encoder")


def meta_update_predictor(params: ParamSet, support_loss: LossFn, query_loss: LossFn,
                          alpha: float, beta: float,
                          mode: GradMode | str = GradMode.SECOND) -> ParamSet:
    """One MAML step on the predictor entries with the encoder held fixed.

    The fast weights come from a single support-set step of size ``alpha``;
    the query loss at the fast weights is differentiated back to the
    predictor, through the inner step when ``mode`` is second order.
    """
    mode = GradMode(mode)
    names = params.predictor_names
    if not names:
        raise ValueError("meta_update_predictor: empty predictor partition")
    leaves = {k: ad.variable(params[k]) for k in names}
    frozen = {k: ad.constant(params[k]) for k in params.encoder_names}
    s_loss = _finite(support_loss({**frozen, **leaves}), "meta_update_predictor (support)")
    inner = ad.backward(s_loss, [leaves[k] for k in names], mode)
    fast = {k: ad.sub(leaves[k], ad.scale(g, alpha)) for k, g in zip(names, inner)}
    q_loss = _finite(query_loss({**frozen, **fast}), "meta_update_predictor (query)")
    outer = ad.grad(q_loss, [leaves[k] for k in names])
    return params.replace({k: params[k] - beta * g for k, g in zip(names, outer)})


def fine_tune(params: ParamSet, loss_fn: LossFn, gamma: float, steps: int) -> ParamSet:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return gradient_steps(params, loss_fn, gamma, steps, where="fine_tune")


def fedavg_local(params: ParamSet, loss_fn: LossFn, lr: float, steps: int) -> ParamSet:
    return gradient_steps(params, loss_fn, lr, steps, where="fedavg_local")


def fedprox_local(params: ParamSet, global_params: ParamSet, loss_fn: LossFn, lr: float,
                  mu: float, steps: int) -> ParamSet:
    """Descent on ``loss + mu/2 * ||W - W_global||^2``."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    params.check_compatible(global_params)
    anchor = {k: ad.constant(v) for k, v in global_params.items()}

    def prox_loss(p):
        loss = loss_fn(p)
        if mu == 0:
            return loss
        sq = [ad.reduce_sum(ad.mul(d, d)) for d in (ad.sub(p[k], anchor[k]) for k in p)]
        total = sq[0]
        for s in sq[1:]:
            total = ad.add(total, s)
        return ad.add(loss, ad.scale(total, mu / 2.0))

    return gradient_steps(params, prox_loss, lr, steps, where="fedprox_local")


# ---------------------------------------------------------------- server


def aggregate(models: Sequence[tuple[ParamSet, int]]) -> ParamSet:
    """Sample-count weighted average of client models, reduced in list order.

    Computed as ``ref + sum_u w_u (W_u - ref)`` with ``ref`` the first
    model, so identical uploads reproduce their common value bit-exactly,
    and clipped to the element-wise client range.
    """
    if not models:
        raise ValueError("aggregate: no client models")
    ref = models[0][0]
    for p, count in models:
        ref.check_compatible(p)
        if count <= 0:
            raise ValueError(f"aggregate: sample counts must be positive, got {count}")
    n = float(sum(c for _, c in models))
    out = {}
    for k in ref:
        acc = np.zeros_like(ref[k])
        for p, c in models:
            acc += (c / n) * (p[k] - ref[k])
        stacked = [p[k] for p, _ in models]
        out[k] = np.clip(ref[k] + acc, np.minimum.reduce(stacked), np.maximum.reduce(stacked))
    return ref.replace(out)


# ---------------------------------------------------------------- orchestration


@dataclass(frozen=True)
class ClientState:
    id: int
    role: str
    data: ClientDataset  # D_u for training clients, support + query for testing
    support: tuple[LabeledWindow, ...]
    query: tuple[LabeledWindow, ...]
    local_params: ParamSet
    interp: ParamSet

    @property
    def num_samples(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class GlobalState:
    round: int
    global_params: ParamSet
    clients: tuple[ClientState, ...]
    n_way: int
    k_shot: int
    q_query: int
    master_seed: int = 0

    @property
    def training(self) -> list[ClientState]:
        return [c for c in self.clients if c.role == TRAINING]

    @property
    def testing(self) -> list[ClientState]:
        return [c for c in self.clients if c.role == TESTING]

    @property
    def total_samples(self) -> int:
        return sum(c.num_samples for c in self.training)


def client_rng(master_seed: int, client_id: int, round_: int) -> np.random.Generator:
    return np.random.default_rng([master_seed, client_id, round_])


def _train_client(gs: GlobalState, c: ClientState, hp: HyperParams, method: str) -> ClientState:
    arch = gs.global_params.arch
    w_t = gs.global_params
    full = model_loss(arch, c.data.windows)
    if method in ("REFML", "REFML-no-AI"):
        interp = c.interp
        if method == "REFML":
            w, interp = adaptive_interpolate(c.local_params, c.interp, w_t, full, hp.delta)
        else:
            w = w_t
        w = update_encoder(w, full, hp.eta, hp.encoder_steps)
        ep_round = gs.round if hp.resample_episodes else 0
        ep = sample_episode(c.data, gs.n_way, gs.k_shot, gs.q_query,
                            client_rng(gs.master_seed, c.id, ep_round))
        w = meta_update_predictor(
            w, model_loss(arch, ep.support), model_loss(arch, ep.query),
            hp.alpha, hp.beta, hp.grad_mode,
        )
        return replace(c, local_params=w, interp=interp)
    if method in ("FedAvg", "FedAvg-FT"):
        return replace(c, local_params=fedavg_local(w_t, full, hp.eta, hp.encoder_steps))
    if method in ("FedProx", "FedProx-FT"):
        return replace(c, local_params=fedprox_local(w_t, w_t, full, hp.eta, hp.mu, hp.encoder_steps))
    return c


def _test_client(gs: GlobalState, c: ClientState, hp: HyperParams, method: str) -> ClientState:
    arch = gs.global_params.arch
    support = model_loss(arch, c.support)
    if method == "REFML":
        w, interp = adaptive_interpolate(c.local_params, c.interp, gs.global_params, support, hp.delta)
        return replace(c, local_params=fine_tune(w, support, hp.gamma, hp.finetune_steps), interp=interp)
    if method == "REFML-no-AI":
        return replace(c, local_params=fine_tune(gs.global_params, support, hp.gamma, hp.finetune_steps))
    if method == "Local":
        return replace(c, local_params=fine_tune(c.local_params, support, hp.gamma, hp.finetune_steps))
    return c


def run_round(gs: GlobalState, hp: HyperParams, method: str, jobs: int = 1) -> GlobalState:
    """One communication round; returns the state with W_{t+1} and updated clients.

    Clients work on the same immutable snapshot, so running them on
    ``jobs`` threads gives the same result as running them in order.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")

    def work(c: ClientState) -> ClientState:
        if c.role == TRAINING:
            return _train_client(gs, c, hp, method)
        return _test_client(gs, c, hp, method)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            clients = tuple(pool.map(work, gs.clients))
    else:
        clients = tuple(work(c) for c in gs.clients)

    new_global = gs.global_params
    if method != "Local":
        uploads = [(c.local_params, c.num_samples) for c in clients if c.role == TRAINING]
        if uploads:
            new_global = aggregate(uploads)
    return replace(gs, round=gs.round + 1, global_params=new_global, clients=clients)


@dataclass
class ExperimentResult:
    method: str
    accuracies: list[float]
    test_params: list[ParamSet]
    global_params: ParamSet
    test_clients: list[ClientState] = field(repr=False)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.accuracies))


def setup_clients(train_sets: Sequence[ClientDataset], test_sets: Sequence[ClientDataset],
                  init: ParamSet, n_way: int, k_shot: int, q_query: int,
                  seed: int) -> tuple[ClientState, ...]:
    """Draw each client's few-shot local data from its condition pool.

    Training client u keeps N*(K+Q) windows as D_u; testing client v keeps
    a fixed support set (K per class) and query set (Q per class).
    """
    clients = []
    ones = ones_like(init)
    for cid, pool in enumerate(list(train_sets) + list(test_sets)):
        ep = sample_episode(pool, n_way, k_shot, q_query, np.random.default_rng([seed, cid, 7919]))
        role = TRAINING if cid < len(train_sets) else TESTING
        data = ClientDataset(ep.support + ep.query, pool.condition_id)
        clients.append(ClientState(cid, role, data, ep.support, ep.query, init, ones))
    return tuple(clients)


def final_test_params(gs: GlobalState, hp: HyperParams, method: str) -> list[ParamSet]:
    """The model each testing client is scored with after the last round."""
    out = []
    for c in gs.testing:
        if method in ("REFML", "REFML-no-AI", "Local"):
            out.append(c.local_params)
        elif method.endswith("-FT") and gs.round > 0:
            out.append(fine_tune(gs.global_params, model_loss(gs.global_params.arch, c.support),
                                 hp.gamma, hp.finetune_steps))
        else:
            out.append(gs.global_params)
    return out


def trajectory(method: str) -> str:
    """Methods that differ only in their final fine-tune share a training run."""
    return method[:-3] if method.endswith("-FT") else method


def run_methods(train_sets: Sequence[ClientDataset], test_sets: Sequence[ClientDataset],
                methods: Sequence[str], hp: HyperParams, arch: ArchitectureSpec, n_way: int,
                k_shot: int, q_query: int, seed: int, jobs: int = 1) -> dict[str, ExperimentResult]:
    """Run ``hp.rounds`` rounds from a fresh seeded model and score testing clients.

    A baseline and its fine-tuned variant are scored off the same run.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
        if not train_sets and m != "Local":
            raise ValueError("at least one training client is required")
    if not test_sets:
        raise ValueError("at least one testing client is required")
    out = {}
    for base in dict.fromkeys(trajectory(m) for m in methods):
        init = build(arch, seed)
        clients = setup_clients(train_sets, test_sets, init, n_way, k_shot, q_query, seed)
        gs = GlobalState(0, init, clients, n_way, k_shot, q_query, seed)
        for t in range(hp.rounds):
            gs = run_round(gs, hp, base, jobs)
            log.debug("%s round %d done", base, t + 1)
        for m in methods:
            if trajectory(m) != base:
                continue
            params = final_test_params(gs, hp, m)
            accs = [accuracy(p, c.query) for p, c in zip(params, gs.testing)]
            out[m] = ExperimentResult(m, accs, params, gs.global_params, gs.testing)
    return {m: out[m] for m in methods}


def run_experiment(train_sets: Sequence[ClientDataset], test_sets: Sequence[ClientDataset],
                   method: str, hp: HyperParams, arch: ArchitectureSpec, n_way: int,
                   k_shot: int, q_query: int, seed: int, jobs: int = 1) -> ExperimentResult:
    """Single-method form of ``run_methods``."""
    return run_methods(train_sets, test_sets, [method], hp, arch, n_way, k_shot, q_query,
                       seed, jobs)[method]
