"""Continual-learning objectives kept on each client.

Quadratic-penalty regularizers (EWC, online EWC, SI, MAS), naive rehearsal
with a reservoir buffer, and latent generative replay: a small VAE over root
features whose samples, labelled by the previous task's top, are rehearsed
alongside current data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, NumericError
from .model import (ParamSet, RootTopModel, Segment, apply_split_update, forward_layers,
                    backward_layers, init_layer_params)
from .numcore import LayerKind, LayerSpec, Mode


class CLMethod(str, Enum):
    NONE = "NONE"
    EWC = "EWC"
    EWCONLINE = "EWCONLINE"
    SI = "SI"
    MAS = "MAS"
    NR = "NR"
    LGR = "LGR"


REGULARIZERS = (CLMethod.EWC, CLMethod.EWCONLINE, CLMethod.SI, CLMethod.MAS)


# ---------------------------------------------------------------------------
# Quadratic-penalty regularizers
# ---------------------------------------------------------------------------

@dataclass
class RegState:
    method: CLMethod
    names: list
    lam: float = 1.0
    gamma: float = 0.9
    xi: float = 0.1
    anchors: list = field(default_factory=list)  # [(theta_star: dict, omega: dict)]
    si_omega_accum: dict = field(default_factory=dict)
    si_prev_params: dict = field(default_factory=dict)
    si_importance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.method = CLMethod(self.method)
        if self.method not in REGULARIZERS:
            raise ConfigError(f"{self.method.value} is not a regularization method")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must be in (0, 1]")
        if self.xi <= 0:
            raise ConfigError("xi must be positive")


def new_reg_state(method, params: ParamSet, names: Sequence[str], **kw) -> RegState:
    reg = RegState(method, list(names), **kw)
    if reg.method is CLMethod.SI:
        reg.si_prev_params = {n: params[n].copy() for n in reg.names}
        reg.si_omega_accum = {n: np.zeros_like(params[n]) for n in reg.names}
    return reg


def reg_penalty(params: ParamSet, reg: RegState):
    """``lam/2 * sum_anchors sum_k omega_k (theta_k - theta*_k)^2`` and its gradient."""
    penalty = 0.0
    grads: dict[str, np.ndarray] = {}
    for theta_star, omega in reg.anchors:
        for n, om in omega.items():
            p = params[n]
            if om.shape != p.shape:
                raise ConfigError(f"importance shape {om.shape} does not match {n}{p.shape}")
            diff = p - theta_star[n]
            penalty += 0.5 * reg.lam * float(np.sum(om.astype(np.float64) * diff.astype(np.float64) ** 2))
            g = (reg.lam * om * diff).astype(p.dtype)
            grads[n] = grads[n] + g if n in grads else g
    return penalty, grads


def reg_hook(reg: RegState):
    def hook(params: ParamSet):
        return reg_penalty(params, reg)
    return hook


def _batches(task_data, batch_size: int):
    X, Y = task_data
    for i in range(0, len(X), batch_size):
        yield X[i:i + batch_size], Y[i:i + batch_size]


def fisher_diagonal(model: RootTopModel, task_data, names: Sequence[str], batch_size: int = 16) -> dict:
    """Mean over batches of the squared task-loss gradient (EVAL-mode forward)."""
    if len(task_data[0]) == 0:
        raise ConfigError("cannot estimate importance from empty task data")
    acc = {n: np.zeros(model.params[n].shape, np.float64) for n in names}
    count = 0
    for xb, yb in _batches(task_data, batch_size):
        _, grads = model.loss_and_grads(xb, yb, Mode.EVAL)
        for n in names:
            acc[n] += grads[n].astype(np.float64) ** 2
        count += 1
    return {n: (a / count).astype(model.params[n].dtype) for n, a in acc.items()}


def ewc_consolidate(model: RootTopModel, task_data, reg: RegState, batch_size: int = 16) -> RegState:
    """Task-boundary consolidation for EWC (new anchor) or online EWC (single decayed anchor)."""
    F = fisher_diagonal(model, task_data, reg.names, batch_size)
    theta = {n: model.params[n].copy() for n in reg.names}
    if reg.method is CLMethod.EWC:
        reg.anchors.append((theta, F))
    elif reg.method is CLMethod.EWCONLINE:
        if reg.anchors:
            _, old = reg.anchors[0]
            F = {n: (reg.gamma * old[n] + F[n]).astype(F[n].dtype) for n in F}
        reg.anchors = [(theta, F)]
    else:
        raise ConfigError(f"ewc_consolidate does not apply to {reg.method.value}")
    return reg


def si_accumulate(reg: RegState, grads: dict, deltas: dict) -> RegState:
    """Path-integral contribution ``omega += -grad * delta`` for one optimizer step."""
    for n in reg.names:
        reg.si_omega_accum[n] -= (grads[n] * deltas[n]).astype(reg.si_omega_accum[n].dtype)
    return reg


def si_consolidate(reg: RegState, params: ParamSet) -> RegState:
    """Fold the task's path integral into the importance and re-anchor at the current parameters.

    Negative path-integral contributions are clamped to zero.
    """
    for n in reg.names:
        disp = params[n].astype(np.float64) - reg.si_prev_params[n].astype(np.float64)
        contrib = np.maximum(reg.si_omega_accum[n].astype(np.float64), 0.0) / (disp ** 2 + reg.xi)
        prev = reg.si_importance.get(n)
        total = contrib if prev is None else prev.astype(np.float64) + contrib
        reg.si_importance[n] = total.astype(params[n].dtype)
        reg.si_prev_params[n] = params[n].copy()
        reg.si_omega_accum[n] = np.zeros_like(params[n])
    reg.anchors = [({n: params[n].copy() for n in reg.names}, dict(reg.si_importance))]
    return reg


def mas_importance(model: RootTopModel, task_data, reg: RegState) -> RegState:
    """Mean per-sample ``|d ||f(x)||^2 / d theta|``; accumulates into a single anchor."""
    X = task_data[0]
    if len(X) == 0:
        raise ConfigError("cannot estimate importance from empty task data")
    acc = {n: np.zeros(model.params[n].shape, np.float64) for n in reg.names}
    for i in range(len(X)):
        out, cache = model.forward(X[i:i + 1], Mode.EVAL)
        dout = 2.0 * out
        dR, grads = model.backward_top(dout, cache.top)
        grads.update(model.backward_root(dR, cache.root))
        for n in reg.names:
            acc[n] += np.abs(grads[n].astype(np.float64))
    omega = {n: (a / len(X)).astype(model.params[n].dtype) for n, a in acc.items()}
    if reg.anchors:
        _, old = reg.anchors[0]
        omega = {n: (old[n] + omega[n]).astype(omega[n].dtype) for n in omega}
    reg.anchors = [({n: model.params[n].copy() for n in reg.names}, omega)]
    return reg


# ---------------------------------------------------------------------------
# Naive rehearsal
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Reservoir-sampled store of ``(x, y, task_id)``; every offered sample is kept with equal probability."""

    def __init__(self, capacity: int = 200, rng: np.random.Generator | None = None):
        if capacity < 0:
            raise ConfigError("capacity must be non-negative")
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.items: list[tuple] = []
        self.seen = 0

    def __len__(self) -> int:
        return len(self.items)

    def offer(self, x: np.ndarray, y: np.ndarray, task_id: int) -> None:
        if self.capacity == 0:
            return
        for xi, yi in zip(x, y):
            self.seen += 1
            if len(self.items) < self.capacity:
                self.items.append((xi.copy(), yi.copy(), task_id))
            else:
                j = int(self.rng.integers(0, self.seen))
                if j < self.capacity:
                    self.items[j] = (xi.copy(), yi.copy(), task_id)

    def draw(self, k: int, exclude_task: int | None = None):
        """Up to ``k`` stored samples without replacement, optionally skipping one task."""
        pool = [it for it in self.items if it[2] != exclude_task]
        if not pool or k <= 0:
            return None
        idx = self.rng.choice(len(pool), size=min(k, len(pool)), replace=False)
        xs = np.stack([pool[i][0] for i in idx])
        ys = np.stack([pool[i][1] for i in idx])
        return xs, ys


def nr_step(model: RootTopModel, x: np.ndarray, y: np.ndarray, buffer: ReplayBuffer, opt: nc.AdamState,
            task_id: int, step_fn: Callable | None = None, hooks=()):
    """Rehearse an equal-size draw of earlier-task samples with the batch, then offer the batch."""
    from .model import train_step

    step_fn = step_fn or (lambda xb, yb: train_step(model, xb, yb, opt, hooks))
    drawn = buffer.draw(len(x), exclude_task=task_id)
    if drawn is not None:
        xb, yb = np.concatenate([x, drawn[0]]), np.concatenate([y, drawn[1]])
    else:
        xb, yb = x, y
    loss = step_fn(xb, yb)
    buffer.offer(x, y, task_id)
    return loss


# ---------------------------------------------------------------------------
# Latent VAE
# ---------------------------------------------------------------------------

class LatentVAE:
    """Dense VAE over root features: D -> 32 -> (mu, logvar in R^z) -> 32 -> D."""

    def __init__(self, feature_dim: int, latent_dim: int = 8, hidden: int = 32, beta_kl: float = 1.0,
                 seed: int = 0, dtype=nc.DTYPE, params: ParamSet | None = None):
        self.feature_dim, self.latent_dim, self.hidden, self.beta_kl = feature_dim, latent_dim, hidden, beta_kl
        self.enc = [LayerSpec(LayerKind.DENSE, (feature_dim, hidden), name="gen.enc1"),
                    LayerSpec(LayerKind.RELU, name="gen.enc_relu")]
        self.mu_head = [LayerSpec(LayerKind.DENSE, (hidden, latent_dim), name="gen.mu")]
        self.logvar_head = [LayerSpec(LayerKind.DENSE, (hidden, latent_dim), name="gen.logvar")]
        self.dec = [LayerSpec(LayerKind.DENSE, (latent_dim, hidden), name="gen.dec1"),
                    LayerSpec(LayerKind.RELU, name="gen.dec_relu"),
                    LayerSpec(LayerKind.DENSE, (hidden, feature_dim), name="gen.dec2")]
        if params is None:
            params = ParamSet()
            rng = np.random.default_rng(seed)
            for layers in (self.enc, self.mu_head, self.logvar_head, self.dec):
                init_layer_params(params, layers, Segment.GENERATOR, rng, dtype)
            params["gen.logvar.weight"] = (params["gen.logvar.weight"] * 0.1).astype(dtype)
        self.params = params
        self.trained = False

    def copy(self) -> "LatentVAE":
        other = LatentVAE(self.feature_dim, self.latent_dim, self.hidden, self.beta_kl, params=self.params.copy())
        other.trained = self.trained
        return other

    def astype(self, dtype) -> "LatentVAE":
        other = LatentVAE(self.feature_dim, self.latent_dim, self.hidden, self.beta_kl,
                          params=self.params.astype(dtype))
        other.trained = self.trained
        return other

    def decode(self, z: np.ndarray) -> np.ndarray:
        return forward_layers(self.dec, self.params, z, Mode.EVAL)[0]


def gaussian_kl(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-row ``KL(N(mu, sigma^2) || N(0, I))`` summed over latent dims."""
    return 0.5 * np.sum(mu.astype(np.float64) ** 2 + np.exp(logvar.astype(np.float64))
                        - logvar.astype(np.float64) - 1.0, axis=1)


def vae_loss(gen: LatentVAE, R: np.ndarray, eps: np.ndarray):
    """Negative ELBO: ``MSE(decode(mu + sigma*eps), R) + beta_kl * mean_rows KL``.

    Returns ``(loss, grads, parts)`` where ``parts`` holds the reconstruction and KL terms.
    """
    if len(R) < 1:
        raise ConfigError("vae_loss needs at least one feature vector")
    if R.shape[1] != gen.feature_dim:
        raise ConfigError(f"expected features of width {gen.feature_dim}, got {R.shape[1]}")
    p = gen.params
    h, enc_cache = forward_layers(gen.enc, p, R, Mode.TRAIN)
    mu, mu_cache = forward_layers(gen.mu_head, p, h, Mode.TRAIN)
    logvar, lv_cache = forward_layers(gen.logvar_head, p, h, Mode.TRAIN)
    if not np.all(np.isfinite(logvar)):
        raise NumericError("non-finite log-variance in VAE encoder")
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    recon, dec_cache = forward_layers(gen.dec, p, z, Mode.TRAIN)
    rec_loss, drecon = nc.mse_loss(recon, R)
    kl = gaussian_kl(mu, logvar)
    M = len(R)
    kl_loss = float(np.mean(kl))
    loss = rec_loss + gen.beta_kl * kl_loss

    dz, grads = backward_layers(gen.dec, p, dec_cache, drecon)
    dmu = dz + gen.beta_kl * mu / M
    dlogvar = dz * eps * 0.5 * std + gen.beta_kl * 0.5 * (np.exp(logvar) - 1.0) / M
    dh1, g_mu = backward_layers(gen.mu_head, p, mu_cache, dmu.astype(R.dtype))
    dh2, g_lv = backward_layers(gen.logvar_head, p, lv_cache, dlogvar.astype(R.dtype))
    grads.update(g_mu)
    grads.update(g_lv)
    _, g_enc = backward_layers(gen.enc, p, enc_cache, dh1 + dh2)
    grads.update(g_enc)
    return loss, grads, {"recon": rec_loss, "kl": kl_loss}


def vae_train_step(gen: LatentVAE, R: np.ndarray, opt: nc.AdamState, rng: np.random.Generator) -> float:
    eps = rng.standard_normal((len(R), gen.latent_dim)).astype(R.dtype)
    loss, grads, _ = vae_loss(gen, R, eps)
    if nc.is_checked() and not np.isfinite(loss):
        raise NumericError(f"non-finite VAE loss {loss}")
    nc.adam_step(gen.params, grads, opt)
    gen.trained = True
    return loss


def vae_generate(gen: LatentVAE, M: int, rng: np.random.Generator) -> np.ndarray:
    """Decode ``M`` draws from the standard normal prior."""
    z = rng.standard_normal((M, gen.latent_dim)).astype(gen.params["gen.dec1.weight"].dtype)
    return gen.decode(z)


# ---------------------------------------------------------------------------
# FedLGR client round
# ---------------------------------------------------------------------------

@dataclass
class LGRState:
    """Client-private generative-replay state.

    ``prev_gen``/``prev_top`` are frozen copies taken at the last task boundary;
    they produce and label the pseudo-samples for all earlier tasks.
    """

    gen: LatentVAE
    gen_opt: nc.AdamState
    rng: np.random.Generator
    pseudo_per_batch: int | None = None
    prev_gen: LatentVAE | None = None
    prev_top: RootTopModel | None = None
    tasks_seen: int = 0

    def end_task(self, model: RootTopModel) -> None:
        self.prev_gen = self.gen.copy()
        self.prev_top = model.copy()
        self.tasks_seen += 1


@dataclass
class LGRBatchStats:
    top_loss: float
    root_loss: float
    gen_loss: float
    n_pseudo: int


def pseudo_batch(lgr: LGRState, M: int):
    """Generated features ``R'`` and their labels ``T'`` from the frozen previous top (EVAL)."""
    R_p = vae_generate(lgr.prev_gen, M, lgr.rng)
    T_p = lgr.prev_top.predict_top(R_p, Mode.EVAL)[0]
    return R_p, T_p


def lgr_batch_step(model: RootTopModel, lgr: LGRState, x: np.ndarray, y: np.ndarray,
                   opt_root: nc.AdamState, opt_top: nc.AdamState, eta_root: float, eta_top: float,
                   trace: list | None = None, hooks=()) -> LGRBatchStats:
    """One batch of the client loop: extract, generate, generator, top, root."""
    emit = trace.append if trace is not None else (lambda _e: None)
    M = len(x) if lgr.pseudo_per_batch is None else lgr.pseudo_per_batch
    replay = lgr.prev_gen is not None and M > 0
    # while replaying, the root normalises with its frozen running statistics so
    # the latent space the generator models does not drift with task-pure batches
    R, root_cache = model.extract_root(x, Mode.EVAL if replay else Mode.TRAIN)
    emit("extract")
    R_p = T_p = None
    if replay:
        R_p, T_p = pseudo_batch(lgr, M)
        emit("generate")
    gen_in = R if R_p is None else np.concatenate([R, R_p])
    gen_loss = vae_train_step(lgr.gen, gen_in, lgr.gen_opt, lgr.rng)
    emit("generator-update")

    if R_p is None:
        out, top_cache = model.predict_top(R, Mode.TRAIN)
        top_loss, dout = nc.mse_loss(out, y)
        dR, grads = model.backward_top(dout, top_cache)
        root_loss = top_loss
    else:
        out, top_cache = model.predict_top(np.concatenate([R, R_p]), Mode.TRAIN)
        top_loss, dout = nc.mse_loss(out, np.concatenate([y, T_p]))
        _, grads = model.backward_top(dout, top_cache)
        out_r, cache_r = model.predict_top(R, Mode.TRAIN, update_stats=False)
        root_loss, dout_r = nc.mse_loss(out_r, y)
        dR, _ = model.backward_top(dout_r, cache_r)
    grads.update(model.backward_root(dR, root_cache))
    for hook in hooks:
        _, extra = hook(model.params)
        for n, g in extra.items():
            grads[n] = grads[n] + g
    apply_split_update(model, grads, opt_root, opt_top, eta_root, eta_top, order=(Segment.TOP,))
    emit("top-update")
    apply_split_update(model, grads, opt_root, opt_top, eta_root, eta_top, order=(Segment.ROOT,))
    emit("root-update")
    return LGRBatchStats(top_loss, root_loss, gen_loss, 0 if R_p is None else len(R_p))


def check_lgr_rates(eta_root: float, eta_top: float, test_mode: bool = False) -> None:
    if eta_root < 0 or eta_top < 0:
        raise ConfigError("learning rates must be non-negative")
    if eta_root > eta_top or (eta_root == eta_top and not test_mode):
        raise ConfigError(f"root rate {eta_root} must be below top rate {eta_top}")


def lgr_client_round(model: RootTopModel, lgr: LGRState, batches: Iterable, opt_root: nc.AdamState,
                     opt_top: nc.AdamState, eta_root: float, eta_top: float, test_mode: bool = False,
                     trace: list | None = None) -> list[LGRBatchStats]:
    """Run the FedLGR local loop over ``batches`` of ``(x, y)``."""
    check_lgr_rates(eta_root, eta_top, test_mode)
    return [lgr_batch_step(model, lgr, x, y, opt_root, opt_top, eta_root, eta_top, trace)
            for x, y in batches]
