"""Server-side aggregation strategies and their client-side objective terms.

Five strategies (FedAvg, FedBN, FedProx, FedOpt, FedDistill) each run at one
of two scopes: FULL aggregates every model tensor, ROOT aggregates only the
feature-extraction segment and leaves the top strictly local.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ReplayError
from .model import STAT_TAG, ParamSet, Segment
from .numcore import BATCHNORM_TAG

UPDATE_MAGIC = b"FSUP"
DIGEST_SIZE = 32


class Strategy(str, Enum):
    AVG = "AVG"
    BN = "BN"
    PROX = "PROX"
    OPT = "OPT"
    DISTILL = "DISTILL"


class Scope(str, Enum):
    FULL = "FULL"
    ROOT = "ROOT"


STRATEGY_LABELS = {Strategy.AVG: "Avg", Strategy.BN: "BN", Strategy.PROX: "Prox",
                   Strategy.OPT: "Opt", Strategy.DISTILL: "Distill"}


def method_name(strategy, scope) -> str:
    """Table-style name, e.g. ``FedProx`` or ``FedRootProx``."""
    strategy, scope = Strategy(strategy), Scope(scope)
    return ("FedRoot" if scope is Scope.ROOT else "Fed") + STRATEGY_LABELS[strategy]


@dataclass
class ProxConfig:
    mu: float = 0.01

    def __post_init__(self):
        if self.mu < 0:
            raise ConfigError(f"mu must be non-negative, got {self.mu}")


@dataclass
class DistillConfig:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ParamSet
    n_samples: int
    round: int
    is_delta: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def select_names(params: ParamSet, strategy, scope) -> list[str]:
    strategy, scope = Strategy(strategy), Scope(scope)
    out = []
    for e in params.entries():
        if e.segment is Segment.GENERATOR:
            continue
        if scope is Scope.ROOT and e.segment is not Segment.ROOT:
            continue
        if strategy is Strategy.BN and BATCHNORM_TAG in e.tags:
            continue
        out.append(e.name)
    return out


def select_aggregatable(params: ParamSet, strategy, scope) -> ParamSet:
    """The tensors a client transmits (and receives back) under ``strategy``/``scope``."""
    return params.subset(select_names(params, strategy, scope))


# ---------------------------------------------------------------------------
# Averaging
# ---------------------------------------------------------------------------

def _check_updates(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ConfigError("cannot aggregate an empty update list")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate client ids in updates: {ids}")
    ref = ordered[0].params
    for u in ordered[1:]:
        if not u.params.compatible(ref):
            raise ConfigError(f"update from client {u.client_id} is not shape-compatible")
    return ordered


def weighted_average(updates: Sequence[ClientUpdate]) -> ParamSet:
    """Sample-weighted mean of every tensor, summed in client-id order in float64."""
    ordered = _check_updates(updates)
    total = sum(u.n_samples for u in ordered)
    weights = [u.n_samples / total for u in ordered]
    ref = ordered[0].params
    out = ParamSet()
    for e in ref.entries():
        acc = np.zeros(e.value.shape, dtype=np.float64)
        for w, u in zip(weights, ordered):
            acc += w * u.params[e.name].astype(np.float64)
        out.add(e.name, e.segment, acc.astype(e.value.dtype), e.tags)
    return out


# ---------------------------------------------------------------------------
# Client-side objective terms
# ---------------------------------------------------------------------------

def prox_penalty(local: ParamSet, global_params: ParamSet, mu: float, names: Iterable[str] | None = None):
    """``(mu/2)*||theta - theta_g||^2`` over ``names`` and its gradient ``mu*(theta - theta_g)``."""
    names = list(global_params) if names is None else list(names)
    penalty = 0.0
    grads = {}
    for n in names:
        if STAT_TAG in local.entry(n).tags:
            continue
        diff = local[n] - global_params[n]
        penalty += 0.5 * mu * float(np.sum(diff.astype(np.float64) ** 2))
        grads[n] = (mu * diff).astype(local[n].dtype)
    return penalty, grads


def prox_grad_hook(global_params: ParamSet, mu: float, names: Iterable[str] | None = None):
    """Training hook pulling the selected tensors toward the last broadcast values."""
    anchor = global_params.copy()
    names = list(anchor) if names is None else list(names)

    def hook(local: ParamSet):
        return prox_penalty(local, anchor, mu, names)

    return hook


def distill_loss_hook(student_pred: np.ndarray, teacher_pred: np.ndarray, task_target: np.ndarray,
                      alpha: float):
    """``(1-alpha)*MSE(student, target) + alpha*MSE(student, teacher)`` and d/d(student)."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    l_task, g_task = nc.mse_loss(student_pred, task_target)
    l_teach, g_teach = nc.mse_loss(student_pred, teacher_pred)
    loss = (1.0 - alpha) * l_task + alpha * l_teach
    grad = ((1.0 - alpha) * g_task + alpha * g_teach).astype(student_pred.dtype)
    return loss, grad


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

@dataclass
class ServerState:
    global_params: ParamSet
    strategy: Strategy
    scope: Scope
    round: int = 0
    server_lr: float = 1e-2
    server_optimizer: str = "adam"  # "adam" or "sgd"
    server_opt: nc.AdamState | None = None

    def __post_init__(self):
        self.strategy, self.scope = Strategy(self.strategy), Scope(self.scope)
        if self.server_optimizer not in ("adam", "sgd"):
            raise ConfigError(f"server_optimizer must be 'adam' or 'sgd', got {self.server_optimizer!r}")
        if self.strategy is Strategy.OPT and self.server_opt is None:
            self.server_opt = nc.AdamState(lr=self.server_lr)
        if self.scope is Scope.ROOT and any(e.segment is not Segment.ROOT for e in self.global_params.entries()):
            raise ConfigError("ROOT-scope server state may only hold ROOT tensors")

    @classmethod
    def from_params(cls, params: ParamSet, strategy, scope, **kw) -> "ServerState":
        return cls(select_aggregatable(params, strategy, scope).copy(), strategy, scope, **kw)


def make_update(state: ServerState, client_id: int, params: ParamSet, n_samples: int) -> ClientUpdate:
    """What a client submits: selected tensors, or deltas from the global model under FedOpt."""
    sel = select_aggregatable(params, state.strategy, state.scope)
    if state.strategy is Strategy.OPT:
        delta = ParamSet()
        for e in sel.entries():
            delta.add(e.name, e.segment, e.value - state.global_params[e.name], e.tags)
        return ClientUpdate(client_id, delta, n_samples, state.round + 1, is_delta=True)
    return ClientUpdate(client_id, sel.copy(), n_samples, state.round + 1)


def fedopt_server_step(state: ServerState, updates: Sequence[ClientUpdate]) -> ParamSet:
    """Server optimizer on the pseudo-gradient ``-weighted_average(deltas)``.

    Running statistics have no gradient; they move by the plain averaged delta.
    """
    mean_delta = weighted_average(updates)
    if not mean_delta.compatible(state.global_params):
        raise ConfigError("deltas are not shape-compatible with the global model")
    g = state.global_params
    grads = {}
    for e in mean_delta.entries():
        if STAT_TAG in e.tags:
            g[e.name] = (g[e.name].astype(np.float64) + e.value.astype(np.float64)).astype(g[e.name].dtype)
        else:
            grads[e.name] = -e.value
    if state.server_optimizer == "adam":
        state.server_opt.lr = state.server_lr
        nc.adam_step(g.arrays(), grads, state.server_opt)
    else:
        for n, gr in grads.items():
            g[n] = (g[n].astype(np.float64) - state.server_lr * gr.astype(np.float64)).astype(g[n].dtype)
    return g


def aggregate(state: ServerState, updates: Sequence[ClientUpdate]) -> ParamSet:
    """One aggregation barrier: update ``state.global_params`` and advance the round."""
    if state.strategy is Strategy.OPT:
        fedopt_server_step(state, updates)
    else:
        new = weighted_average(updates)
        if not new.compatible(state.global_params):
            raise ConfigError("updates are not shape-compatible with the global model")
        state.global_params.load_from(new)
    state.round += 1
    return state.global_params


def broadcast(state: ServerState, clients: Iterable[ParamSet]) -> None:
    """Overwrite each client's selected tensors with the global values; nothing else changes."""
    for params in clients:
        params.load_from(state.global_params)


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

def serialize_update(update: ClientUpdate) -> bytes:
    head = json.dumps({"client_id": update.client_id, "n_samples": update.n_samples,
                       "round": update.round, "delta": update.is_delta},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = UPDATE_MAGIC + struct.pack("<I", len(head)) + head + update.params.to_bytes()
    return body + hashlib.sha256(body).digest()


def parse_update(data: bytes) -> ClientUpdate:
    if len(data) < 8 + DIGEST_SIZE or data[:4] != UPDATE_MAGIC:
        raise ReplayError("not an update file")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ReplayError("update checksum mismatch")
    (n,) = struct.unpack("<I", body[4:8])
    head = json.loads(body[8:8 + n].decode("utf-8"))
    params, _ = ParamSet.from_bytes(body[8 + n:])
    return ClientUpdate(head["client_id"], params, head["n_samples"], head["round"], head["delta"])


def payload_bytes(update: ClientUpdate) -> int:
    """Exact size of the serialized update, headers and checksum included."""
    return len(serialize_update(update))


def empty_update_bytes(client_id: int = 0, n_samples: int = 1, round: int = 1) -> int:
    return payload_bytes(ClientUpdate(client_id, ParamSet(), n_samples, round))
