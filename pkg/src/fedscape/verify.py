"""Oracle suite: independent reference computations checked against the library.

Each check compares a library operation with an oracle that does not share
its code path (exact rational arithmetic, central finite differences,
Monte-Carlo frequencies, repeated runs). ``INVENTORY`` is the documented list;
``run_checks`` executes all of them and reports observed vs expected values.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import flstrat
from . import numcore as nc
from .clobj import CLMethod, LatentVAE, ReplayBuffer, new_reg_state, reg_penalty, vae_loss
from .flstrat import ClientUpdate, Scope, ServerState, Strategy, distill_loss_hook, prox_penalty
from .metrics import pcc, rmse
from .model import ModelConfig, ParamSet, RootTopModel, Segment
from .numcore import Mode

GRAD_TOL = 1e-4
SMALL_MODEL = ModelConfig(image_size=8, channels=(2, 3, 4), hidden=5)


@dataclass
class CheckResult:
    name: str
    module: str
    operation: str
    passed: bool
    observed: str
    expected: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} {self.module}.{self.operation}: observed {self.observed}, expected {self.expected}"


# ---------------------------------------------------------------------------
# Exact / extended-precision oracles
# ---------------------------------------------------------------------------

def oracle_weighted_mean(updates) -> dict:
    """Sample-weighted mean of every tensor in exact rational arithmetic."""
    total = sum(u.n_samples for u in updates)
    out = {}
    for name in updates[0].params:
        flat = [u.params[name].ravel() for u in updates]
        vals = [sum(Fraction(u.n_samples) * Fraction(float(f[i])) for u, f in zip(updates, flat)) / total
                for i in range(flat[0].size)]
        out[name] = np.array([float(v) for v in vals]).reshape(updates[0].params[name].shape)
    return out


def oracle_rmse(pred, target) -> float:
    d = [Fraction(float(a)) - Fraction(float(b)) for a, b in zip(np.ravel(pred), np.ravel(target))]
    return math.sqrt(float(sum(x * x for x in d) / len(d)))


def oracle_pcc(a, b) -> float:
    fa = [Fraction(float(x)) for x in np.ravel(a)]
    fb = [Fraction(float(x)) for x in np.ravel(b)]
    n = len(fa)
    ma, mb = sum(fa) / n, sum(fb) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(fa, fb))
    va = sum((x - ma) ** 2 for x in fa)
    vb = sum((y - mb) ** 2 for y in fb)
    return float(cov) / math.sqrt(float(va) * float(vb))


def random_updates(rng: np.random.Generator, n_clients: int, shapes=((3, 4), (5,))) -> list[ClientUpdate]:
    ups = []
    for cid in range(n_clients):
        ps = ParamSet()
        for k, shp in enumerate(shapes):
            seg = Segment.ROOT if k % 2 == 0 else Segment.TOP
            ps.add(f"t{k}", seg, rng.standard_normal(shp).astype(np.float32))
        ups.append(ClientUpdate(cid, ps, int(rng.integers(1, 500)), 1))
    return ups


def weighted_mean_error(updates) -> float:
    got = flstrat.weighted_average(updates)
    want = oracle_weighted_mean(updates)
    return max(float(np.max(np.abs(got[n].astype(np.float64) - want[n]) / np.maximum(1.0, np.abs(want[n]))))
               for n in want)


# ---------------------------------------------------------------------------
# Finite-difference instances: each returns (f, params, names, region)
# ---------------------------------------------------------------------------

def _small_model(seed: int) -> RootTopModel:
    return RootTopModel(SMALL_MODEL, seed=seed, dtype=np.float64)


def _batch(rng, model: RootTopModel, B: int = 6):
    H = model.config.image_size
    return rng.standard_normal((B, 3, H, H)), 1 + 4 * rng.random((B, 8))


def fd_end_to_end(rng):
    model = _small_model(int(rng.integers(1 << 30)))
    x, y = _batch(rng, model)

    def f(_):
        return model.loss_and_grads(x, y, update_stats=False)
    return f, model.params, model.names(Segment.ROOT) + model.names(Segment.TOP), lambda _: model.activation_pattern(x)


def fd_prox(rng):
    model = _small_model(int(rng.integers(1 << 30)))
    glob = model.params.copy()
    for n in glob:
        glob[n] = glob[n] + rng.standard_normal(glob[n].shape)
    mu = float(rng.uniform(0.01, 1.0))
    names = model.names(Segment.ROOT) + model.names(Segment.TOP)

    def f(p):
        return prox_penalty(model.params, glob, mu, names)
    return f, model.params, names, None


def fd_distill(rng):
    model = _small_model(int(rng.integers(1 << 30)))
    x, y = _batch(rng, model)
    teacher = 1 + 4 * rng.random(y.shape)
    alpha = float(rng.uniform(0, 1))

    def f(_):
        out, cache = model.forward(x, Mode.TRAIN, update_stats=False)
        loss, dout = distill_loss_hook(out, teacher, y, alpha)
        dR, grads = model.backward_top(dout, cache.top)
        grads.update(model.backward_root(dR, cache.root))
        return loss, grads
    return f, model.params, model.names(Segment.ROOT) + model.names(Segment.TOP), \
        lambda _: model.activation_pattern(x)


def fd_penalty(method: CLMethod):
    def build(rng):
        model = _small_model(int(rng.integers(1 << 30)))
        names = model.names(Segment.ROOT) + model.names(Segment.TOP)
        reg = new_reg_state(method, model.params, names, lam=float(rng.uniform(0.1, 2.0)))
        for _ in range(2 if method is CLMethod.EWC else 1):
            star = {n: model.params[n] + rng.standard_normal(model.params[n].shape) for n in names}
            omega = {n: np.abs(rng.standard_normal(model.params[n].shape)) for n in names}
            reg.anchors.append((star, omega))

        def f(_):
            return reg_penalty(model.params, reg)
        return f, model.params, names, None
    return build


def _vae_region(gen: LatentVAE, R, eps):
    from .model import forward_layers
    p = gen.params
    h_pre = R @ p["gen.enc1.weight"].T + p["gen.enc1.bias"]
    h = np.maximum(h_pre, 0)
    mu, _ = forward_layers(gen.mu_head, p, h, Mode.EVAL)
    lv, _ = forward_layers(gen.logvar_head, p, h, Mode.EVAL)
    z = mu + np.exp(0.5 * lv) * eps
    d_pre = z @ p["gen.dec1.weight"].T + p["gen.dec1.bias"]
    return np.packbits(np.concatenate([(h_pre > 0).ravel(), (d_pre > 0).ravel()])).tobytes()


def fd_vae(rng):
    D = 6
    gen = LatentVAE(D, latent_dim=3, hidden=5, beta_kl=float(rng.uniform(0.1, 1.5)),
                    seed=int(rng.integers(1 << 30)), dtype=np.float64)
    R = rng.standard_normal((5, D))
    eps = rng.standard_normal((5, 3))

    def f(_):
        loss, grads, _parts = vae_loss(gen, R, eps)
        return loss, grads
    return f, gen.params, list(gen.params), lambda _: _vae_region(gen, R, eps)


FD_INSTANCES: dict[str, Callable] = {
    "end_to_end": fd_end_to_end,
    "prox": fd_prox,
    "distill": fd_distill,
    "ewc": fd_penalty(CLMethod.EWC),
    "ewc_online": fd_penalty(CLMethod.EWCONLINE),
    "si": fd_penalty(CLMethod.SI),
    "mas": fd_penalty(CLMethod.MAS),
    "vae_elbo": fd_vae,
}


def max_fd_error(kind: str, n_instances: int = 10, n_coords: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        f, params, names, region = FD_INSTANCES[kind](rng)
        err = nc.grad_check(f, params, h=1e-3, n_samples=n_coords, rng=rng, names=names, region=region)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Locality, reservoir, determinism
# ---------------------------------------------------------------------------

def locality_round(strategy, n_clients: int = 3, seed: int = 0) -> tuple[bool, bool]:
    """One ROOT-scope round. Returns (unselected tensors bitwise unchanged, selected tensors equal)."""
    rng = np.random.default_rng(seed)
    models = [_small_model(seed + k).astype(np.float32) for k in range(n_clients)]
    for m in models:
        for n in m.params:
            m.params[n] = m.params[n] + rng.standard_normal(m.params[n].shape).astype(np.float32) * 0.1
    server = ServerState.from_params(models[0].params, strategy, Scope.ROOT)
    sel = set(flstrat.select_names(models[0].params, strategy, Scope.ROOT))
    before = [m.params.copy() for m in models]
    updates = [flstrat.make_update(server, k, m.params, 10 + k) for k, m in enumerate(models)]
    flstrat.aggregate(server, updates)
    flstrat.broadcast(server, [m.params for m in models])
    local_ok = all(np.array_equal(m.params[n], b[n]) for m, b in zip(models, before) for n in m.params if n not in sel)
    shared_ok = all(np.array_equal(m.params[n], models[0].params[n]) for m in models for n in sel)
    return local_ok, shared_ok


def reservoir_block_frequencies(n_offer: int = 10_000, capacity: int = 100, trials: int = 50,
                                block: int = 1000, seed: int = 0) -> np.ndarray:
    """Mean per-sample retention frequency of each block of consecutive offers."""
    counts = np.zeros(n_offer)
    rng = np.random.default_rng(seed)
    ids = np.arange(n_offer, dtype=np.float32).reshape(-1, 1)
    for _ in range(trials):
        buf = ReplayBuffer(capacity, rng)
        buf.offer(ids, ids, 1)
        for x, _, _ in buf.items:
            counts[int(x[0])] += 1
    return (counts / trials).reshape(-1, block).mean(axis=1)


def comm_cpu_per_round(scopes=("FULL", "ROOT"), n_clients: int = 2, rounds: int = 200, seed: int = 0) -> dict:
    """Mean thread-CPU seconds per round spent on serialize, parse, aggregate and broadcast.

    Uses the default model. Scopes are measured round-robin so drift in machine
    load hits all of them alike.
    """
    from .harness import ResourceMeter

    init = RootTopModel(ModelConfig(), seed=seed)
    clients = {s: [init.copy().params for _ in range(n_clients)] for s in scopes}
    servers = {s: ServerState.from_params(init.params, Strategy.AVG, s) for s in scopes}
    meter = ResourceMeter()
    for r in range(rounds):
        for s in scopes:
            with meter.account(s, r, "comm"):
                blobs = [flstrat.serialize_update(flstrat.make_update(servers[s], k, p, 100))
                         for k, p in enumerate(clients[s])]
                flstrat.aggregate(servers[s], [flstrat.parse_update(b) for b in blobs])
                flstrat.broadcast(servers[s], clients[s])
    return {s: sum(v for (c, _, _), v in meter.cpu.items() if c == s) / rounds for s in scopes}


def tiny_config(**kw):
    from .config import ExperimentConfig, apply_overrides
    base = ["data.n_scenes=48", "data.image_size=8", "rounds=2", "rounds_per_task=1",
            "model.channels=[2,3,4]", "model.hidden=6"]
    return apply_overrides(ExperimentConfig(), base + [f"{k}={v}" for k, v in kw.items()])


def run_json(cfg) -> str:
    from .harness import run_experiment
    from .metrics import report_json
    return report_json(run_experiment(cfg), deterministic=True)


# ---------------------------------------------------------------------------
# Inventory
# ---------------------------------------------------------------------------

def _check_weighted_mean():
    rng = np.random.default_rng(11)
    err = max(weighted_mean_error(random_updates(rng, int(rng.integers(2, 11)))) for _ in range(20))
    return err < 1e-6, f"max rel err {err:.3g}", "< 1e-6"


def _check_permutation():
    rng = np.random.default_rng(12)
    ok = True
    for _ in range(10):
        ups = random_updates(rng, int(rng.integers(2, 11)))
        a = flstrat.weighted_average(ups)
        b = flstrat.weighted_average([ups[i] for i in rng.permutation(len(ups))])
        ok &= a.bitwise_equal(b)
    return ok, "bitwise equal" if ok else "differs", "bitwise equal"


def _fd_check(kind):
    def run():
        err = max_fd_error(kind, n_instances=3, n_coords=20, seed=13)
        return err < GRAD_TOL, f"max rel err {err:.3g}", f"< {GRAD_TOL}"
    return run


def _check_locality():
    bad = []
    for s in Strategy:
        local_ok, shared_ok = locality_round(s)
        if not (local_ok and shared_ok):
            bad.append(s.value)
    return not bad, f"violations {bad}" if bad else "tops local, roots shared", "tops local, roots shared"


def _check_reservoir():
    freq = reservoir_block_frequencies(trials=30)
    dev = float(np.max(np.abs(freq - 0.01)))
    return dev <= 0.002, f"max |freq-0.01| {dev:.4f}", "<= 0.002"


def _check_metrics():
    rng = np.random.default_rng(14)
    worst_p = worst_r = 0.0
    for _ in range(10):
        a, b = rng.standard_normal(20), rng.standard_normal(20)
        worst_p = max(worst_p, abs(pcc(a, b) - oracle_pcc(a, b)))
        P, T = rng.standard_normal((6, 8)), rng.standard_normal((6, 8))
        worst_r = max(worst_r, abs(rmse(P, T) - oracle_rmse(P, T)))
    ok = worst_p < 1e-9 and worst_r < 1e-6
    return ok, f"pcc err {worst_p:.2g}, rmse err {worst_r:.2g}", "pcc < 1e-9, rmse < 1e-6"


def _check_determinism():
    cfg = tiny_config()
    a, b = run_json(cfg), run_json(cfg)
    return a == b, "identical" if a == b else "differs", "byte-identical reports"


INVENTORY = [
    ("weighted_mean", "flstrat", "weighted_average", _check_weighted_mean),
    ("aggregation_permutation", "flstrat", "weighted_average", _check_permutation),
    ("grad_end_to_end", "model", "loss_and_grads", _fd_check("end_to_end")),
    ("grad_prox", "flstrat", "prox_penalty", _fd_check("prox")),
    ("grad_distill", "flstrat", "distill_loss_hook", _fd_check("distill")),
    ("grad_ewc", "clobj", "reg_penalty", _fd_check("ewc")),
    ("grad_ewc_online", "clobj", "reg_penalty", _fd_check("ewc_online")),
    ("grad_si", "clobj", "reg_penalty", _fd_check("si")),
    ("grad_mas", "clobj", "reg_penalty", _fd_check("mas")),
    ("grad_vae_elbo", "clobj", "vae_loss", _fd_check("vae_elbo")),
    ("fedroot_locality", "flstrat", "aggregate+broadcast", _check_locality),
    ("reservoir_frequency", "clobj", "ReplayBuffer.offer", _check_reservoir),
    ("metric_oracles", "metrics", "pcc/rmse", _check_metrics),
    ("determinism", "harness", "run_experiment", _check_determinism),
]
FAULTS = ("unweighted-mean",)


def _unweighted_average(updates):
    ordered = sorted(updates, key=lambda u: u.client_id)
    out = ParamSet()
    for e in ordered[0].params.entries():
        acc = np.mean([u.params[e.name].astype(np.float64) for u in ordered], axis=0)
        out.add(e.name, e.segment, acc.astype(e.value.dtype), e.tags)
    return out


@contextmanager
def injected(fault: str | None):
    if fault is None:
        yield
        return
    if fault != "unweighted-mean":
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    saved = flstrat.weighted_average
    flstrat.weighted_average = _unweighted_average
    try:
        yield
    finally:
        flstrat.weighted_average = saved


def run_checks(fault: str | None = None, only=None) -> list[CheckResult]:
    results = []
    with injected(fault):
        for name, module, op, fn in INVENTORY:
            if only and name not in only:
                continue
            try:
                passed, observed, expected = fn()
            except Exception as exc:  # a crashing check is a failing check
                passed, observed, expected = False, f"{type(exc).__name__}: {exc}", "no error"
            results.append(CheckResult(name, module, op, bool(passed), observed, expected))
    return results
