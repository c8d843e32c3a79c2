"""Experiment engine for federated (FL) and federated-continual (FCL) runs.

A round is: every client trains locally on its own shard, serializes its
update, the server aggregates behind a barrier and broadcasts, then every
client is evaluated on the shared test set. Client work may run on a thread
pool; each client owns its RNG streams, so the schedule cannot change results.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .clobj import (REGULARIZERS, CLMethod, LatentVAE, LGRState, ReplayBuffer, ewc_consolidate, lgr_batch_step,
                    mas_importance, new_reg_state, nr_step, reg_hook, si_accumulate, si_consolidate)
from .config import ExperimentConfig
from .dataset import FederatedSplit, LabelModel, augment_batch, generate_dataset, partition, stack
from .errors import ConfigError, ReplayError
from .flstrat import (ServerState, Strategy, Scope, aggregate, broadcast, distill_loss_hook, make_update,
                      method_name, parse_update, prox_grad_hook, select_names, serialize_update)
from .metrics import SCHEMA_VERSION, MetricsReport, evaluate_predictions, forgetting_delta
from .model import ModelConfig, ParamSet, RootTopModel, Segment
from .numcore import Mode

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

# per-client RNG stream indices
SHUFFLE, AUGMENT, BUFFER, GENERATOR = range(4)


def client_rng(run_seed: int, client_id: int, stream: int) -> np.random.Generator:
    """Independent stream keyed by (client, stream) under the run seed."""
    return np.random.default_rng(np.random.SeedSequence(run_seed, spawn_key=(client_id, stream)))


@dataclass
class Client:
    cid: int
    model: RootTopModel
    opt: nc.AdamState
    opt_root: nc.AdamState
    opt_top: nc.AdamState
    rngs: list
    data: dict                     # task -> (X, Y, sample_ids)
    owned: frozenset
    teacher: RootTopModel | None = None
    teacher_opt: nc.AdamState | None = None
    reg: object | None = None
    buffer: ReplayBuffer | None = None
    lgr: LGRState | None = None
    hooks: list = field(default_factory=list)
    trace: list | None = None


class ResourceMeter:
    """Thread-CPU seconds per (client, round, phase) and payload bytes per round."""

    def __init__(self):
        self.cpu = defaultdict(float)
        self.payload = defaultdict(dict)
        self.wall = 0.0

    @contextmanager
    def account(self, client_id, round_no: int, phase: str):
        t0 = time.thread_time()
        try:
            yield
        finally:
            self.cpu[(client_id, round_no, phase)] += time.thread_time() - t0

    def add_cpu(self, client_id, round_no, phase, seconds):
        self.cpu[(client_id, round_no, phase)] += seconds

    def to_dict(self) -> dict:
        cpu = defaultdict(dict)
        for (cid, r, phase), s in sorted(self.cpu.items(), key=lambda kv: (str(kv[0][0]), kv[0][1], kv[0][2])):
            cpu[str(cid)][f"{r}:{phase}"] = s
        return {"cpu_seconds": dict(cpu), "wall_seconds": self.wall}

    def client_round_cpu(self, phases=("train", "serialize")) -> float:
        """Mean CPU seconds per client per round over the given phases."""
        per = defaultdict(float)
        for (cid, r, phase), s in self.cpu.items():
            if cid != "server" and phase in phases:
                per[(cid, r)] += s
        return float(np.mean(list(per.values()))) if per else 0.0

    def comm_cpu_per_round(self) -> float:
        """Mean per-round CPU spent serializing, parsing, aggregating and broadcasting."""
        per = defaultdict(float)
        for (cid, r, phase), s in self.cpu.items():
            if phase in ("serialize", "aggregate"):
                per[r] += s
        return float(np.mean(list(per.values()))) if per else 0.0


@dataclass
class RunResult:
    config: dict
    report: MetricsReport
    payload_bytes: list           # [round] -> [bytes per client]
    table: list
    end_of_task: dict
    resources: dict | None = None

    @property
    def summary(self):
        return self.report.summary

    def to_dict(self, deterministic: bool = True) -> dict:
        doc = {"config": self.config, "summary": self.report.summary, "records": self.report.records,
               "table": [dict(r, cpu_s="NA") if deterministic else r for r in self.table],
               "end_of_task": self.end_of_task, "payload_bytes": self.payload_bytes}
        if not deterministic:
            doc["resources"] = self.resources
        return doc


# ---------------------------------------------------------------------------
# Round-log files: payload + sha256 trailer
# ---------------------------------------------------------------------------

def write_blob(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data + hashlib.sha256(data).digest())


def read_blob(path: Path) -> bytes:
    if not path.is_file():
        raise ReplayError(f"missing round file {path}")
    raw = path.read_bytes()
    body, digest = raw[:-32], raw[-32:]
    if len(raw) < 32 or hashlib.sha256(body).digest() != digest:
        raise ReplayError(f"checksum mismatch in {path}")
    return body


def server_opt_params(state: ServerState) -> tuple[ParamSet, dict]:
    ps = ParamSet()
    opt = state.server_opt
    for n in sorted(opt.m):
        e = state.global_params.entry(n)
        ps.add(f"m/{n}", e.segment, opt.m[n], e.tags)
        ps.add(f"v/{n}", e.segment, opt.v[n], e.tags)
    return ps, {"t": opt.t, "lr": opt.lr}


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------

class Experiment:
    def __init__(self, config: ExperimentConfig, log_dir=None, trace: bool = False):
        self.cfg = config.validate()
        self.log_dir = Path(log_dir) if log_dir else None
        self.trace = trace
        self.strategy = Strategy(config.strategy.name)
        self.scope = Scope(config.strategy.scope)
        self.method = CLMethod(config.cl.method)
        self.meter = ResourceMeter()
        self.report = MetricsReport()
        self.payload: list = []
        self.round_no = 0

    # -- setup -------------------------------------------------------------

    def _setup(self) -> None:
        cfg = self.cfg
        lm = LabelModel(task_shift=cfg.data.task_shift)
        data = generate_dataset(cfg.data.n_scenes, cfg.data.image_size, cfg.seeds.data, lm)
        self.split: FederatedSplit = partition(data, cfg.n_clients, cfg.seeds.data, iid=cfg.data.iid)
        self.test = {t: stack(self.split.test[t]) for t in (1, 2)}
        mcfg = ModelConfig(image_size=cfg.data.image_size, channels=tuple(cfg.model.channels),
                           hidden=cfg.model.hidden, top_activation=cfg.model.top_activation)
        init = RootTopModel(mcfg, seed=cfg.seeds.model)
        self.server = ServerState.from_params(init.params, self.strategy, self.scope,
                                              server_lr=cfg.strategy.server_lr,
                                              server_optimizer=cfg.strategy.server_optimizer)
        self.clients = [self._make_client(cid, init) for cid in range(cfg.n_clients)]
        self._refresh_hooks()

    def _client_data(self, cid: int) -> dict:
        shard = self.split.train[cid]
        out = {}
        for t in (1, 2):
            samples = shard[1] if (t == 2 and self.cfg.data.identical_tasks) else shard[t]
            X, Y = stack(samples)
            out[t] = (X, Y, np.array([s.sample_id for s in samples]))
        return out

    def _make_client(self, cid: int, init: RootTopModel) -> Client:
        cfg = self.cfg
        data = self._client_data(cid)
        owned = frozenset(int(i) for t in data for i in data[t][2])
        rngs = [client_rng(cfg.seeds.run, cid, k) for k in range(4)]
        c = Client(cid, init.copy(), nc.AdamState(lr=cfg.lr), nc.AdamState(lr=cfg.cl.eta_root),
                   nc.AdamState(lr=cfg.cl.eta_top), rngs, data, owned)
        if self.strategy is Strategy.DISTILL:
            c.teacher = init.copy()
            c.teacher_opt = nc.AdamState(lr=cfg.lr)
        if self.method in REGULARIZERS:
            segs = (Segment.ROOT, Segment.TOP) if cfg.cl.penalty_scope == "ALL" else (Segment.TOP,)
            names = [n for s in segs for n in c.model.names(s)]
            c.reg = new_reg_state(self.method, c.model.params, names, lam=cfg.cl.lam, gamma=cfg.cl.gamma,
                                  xi=cfg.cl.xi)
        if self.method is CLMethod.NR:
            c.buffer = ReplayBuffer(cfg.cl.buffer_capacity, rngs[BUFFER])
        if self.method is CLMethod.LGR:
            gen = LatentVAE(c.model.feature_dim, cfg.cl.latent_dim, cfg.cl.gen_hidden, cfg.cl.beta_kl,
                            seed=cfg.seeds.model + 1000 + cid)
            c.lgr = LGRState(gen, nc.AdamState(lr=cfg.cl.gen_lr), rngs[GENERATOR], cfg.cl.pseudo_per_batch)
        if self.trace:
            c.trace = []
        return c

    def _refresh_hooks(self) -> None:
        sel = [n for n in select_names(self.server.global_params, self.strategy, self.scope)]
        for c in self.clients:
            c.hooks = []
            if self.strategy is Strategy.PROX:
                c.hooks.append(prox_grad_hook(self.server.global_params, self.cfg.strategy.mu, sel))
            if c.reg is not None:
                c.hooks.append(reg_hook(c.reg))

    # -- local training ----------------------------------------------------

    def _plain_step(self, c: Client, xb: np.ndarray, yb: np.ndarray) -> float:
        params = c.model.params
        if self.strategy is Strategy.DISTILL:
            from .model import train_step
            train_step(c.teacher, xb, yb, c.teacher_opt)
            t_pred = c.teacher.forward(xb, Mode.EVAL)[0]
            out, cache = c.model.forward(xb, Mode.TRAIN)
            loss, dout = distill_loss_hook(out, t_pred, yb, self.cfg.strategy.alpha)
            dR, grads = c.model.backward_top(dout, cache.top)
            grads.update(c.model.backward_root(dR, cache.root))
        else:
            loss, grads = c.model.loss_and_grads(xb, yb)
        si = c.reg is not None and c.reg.method is CLMethod.SI
        if si:
            task_grads = {n: grads[n].copy() for n in c.reg.names}
            before = {n: params[n].copy() for n in c.reg.names}
        for hook in c.hooks:
            penalty, extra = hook(params)
            loss += penalty
            for n, g in extra.items():
                grads[n] = grads[n] + g
        if nc.is_checked() and not np.isfinite(loss):
            from .errors import NumericError
            raise NumericError(f"client {c.cid}: non-finite loss")
        nc.adam_step(params, grads, c.opt)
        if si:
            si_accumulate(c.reg, task_grads, {n: params[n] - before[n] for n in c.reg.names})
        return loss

    def _step(self, c: Client, xb, yb, task: int) -> None:
        if c.lgr is not None:
            events = [] if c.trace is not None else None
            lgr_batch_step(c.model, c.lgr, xb, yb, c.opt_root, c.opt_top, self.cfg.cl.eta_root,
                           self.cfg.cl.eta_top, events)
            if events is not None:
                c.trace.append((self.round_no, task, tuple(events)))
        elif c.buffer is not None:
            nr_step(c.model, xb, yb, c.buffer, c.opt, task, step_fn=lambda a, b: self._plain_step(c, a, b))
        else:
            self._plain_step(c, xb, yb)

    def _train_data(self, c: Client, tasks) -> tuple:
        parts = [c.data[t] for t in tasks]
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))

    def _local_round(self, c: Client, tasks, task_label: int):
        cfg = self.cfg
        bs = cfg.resolved_batch_size()
        t0 = time.thread_time()
        X, Y, ids = self._train_data(c, tasks)
        for _ in range(cfg.local_epochs):
            perm = c.rngs[SHUFFLE].permutation(len(X))
            for start in range(0, len(X), bs):
                idx = perm[start:start + bs]
                if len(idx) < 2:
                    continue
                if not c.owned.issuperset(int(i) for i in ids[idx]):
                    raise RuntimeError(f"client {c.cid} received a sample it does not own")
                xb, yb = X[idx], Y[idx]
                if cfg.augment:
                    xb = augment_batch(xb, c.rngs[AUGMENT])
                self._step(c, xb, yb, task_label)
        t1 = time.thread_time()
        blob = serialize_update(make_update(self.server, c.cid, c.model.params, len(X)))
        t2 = time.thread_time()
        return blob, t1 - t0, t2 - t1

    # -- round -------------------------------------------------------------

    def _run_round(self, tasks, task_label: int, pool) -> None:
        self.round_no += 1
        r = self.round_no
        if pool is not None:
            results = list(pool.map(lambda c: self._local_round(c, tasks, task_label), self.clients))
        else:
            results = [self._local_round(c, tasks, task_label) for c in self.clients]
        blobs = []
        for c, (blob, t_train, t_ser) in zip(self.clients, results):
            self.meter.add_cpu(c.cid, r, "train", t_train)
            self.meter.add_cpu(c.cid, r, "serialize", t_ser)
            blobs.append(blob)
        self.payload.append([len(b) for b in blobs])
        with self.meter.account("server", r, "aggregate"):
            updates = [parse_update(b) for b in blobs]
            aggregate(self.server, updates)
            broadcast(self.server, [c.model.params for c in self.clients])
        self._refresh_hooks()
        if self.log_dir is not None:
            self._log_round(r, blobs)

    def _log_round(self, r: int, blobs) -> None:
        d = self.log_dir / f"round_{r:04d}"
        for c, b in zip(self.clients, blobs):
            write_blob(d / f"client_{c.cid:02d}.upd", b)
        write_blob(d / "global.ckpt", self.server.global_params.to_bytes())
        if self.server.server_opt is not None:
            ps, meta = server_opt_params(self.server)
            write_blob(d / "server_opt.ckpt", ps.to_bytes(meta))

    def _start_log(self, total_rounds: int) -> None:
        self.log_dir.mkdir(parents=True, exist_ok=True)
        manifest = {"schema_version": SCHEMA_VERSION, "strategy": self.strategy.value, "scope": self.scope.value,
                    "server_lr": self.cfg.strategy.server_lr,
                    "server_optimizer": self.cfg.strategy.server_optimizer,
                    "n_clients": self.cfg.n_clients, "rounds": total_rounds}
        (self.log_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        write_blob(self.log_dir / "global_0000.ckpt", self.server.global_params.to_bytes())

    # -- evaluation --------------------------------------------------------

    def _evaluate(self, point: str, tasks) -> dict:
        X = np.concatenate([self.test[t][0] for t in tasks])
        Y = np.concatenate([self.test[t][1] for t in tasks])
        rows = []
        for c in self.clients:
            before = c.model.params.checksum() if self.cfg.checked else None
            pred = c.model.predict(X)
            if before is not None and c.model.params.checksum() != before:
                raise RuntimeError("evaluation mutated client parameters")
            rows.append({"client": c.cid, **evaluate_predictions(pred, Y, self.cfg.pcc_on_clamped)})
        return self.report.add(point, self.round_no, rows)

    # -- task boundary -----------------------------------------------------

    def _consolidate(self, task: int) -> None:
        for c in self.clients:
            X, Y, _ = c.data[task]
            if c.reg is not None:
                if c.reg.method in (CLMethod.EWC, CLMethod.EWCONLINE):
                    ewc_consolidate(c.model, (X, Y), c.reg, self.cfg.resolved_batch_size())
                elif c.reg.method is CLMethod.MAS:
                    mas_importance(c.model, (X, Y), c.reg)
                elif c.reg.method is CLMethod.SI:
                    si_consolidate(c.reg, c.model.params)
            if c.lgr is not None:
                c.lgr.end_task(c.model)
        self._refresh_hooks()

    # -- drivers -----------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        prev_checked = nc.is_checked()
        nc.set_checked(cfg.checked or prev_checked)
        limiter = threadpool_limits(1) if threadpool_limits is not None else nullcontext()
        wall0 = time.perf_counter()
        try:
            with limiter:
                self._setup()
                n_workers = int(os.environ.get("FEDSCAPE_THREADS", "0") or 0) or cfg.n_clients
                pool = ThreadPoolExecutor(max_workers=min(n_workers, cfg.n_clients)) if cfg.concurrent else None
                try:
                    end = self._run_fl(pool) if cfg.mode == "FL" else self._run_fcl(pool)
                finally:
                    if pool is not None:
                        pool.shutdown()
        finally:
            nc.set_checked(prev_checked)
        self.meter.wall = time.perf_counter() - wall0
        return self._result(end)

    def _run_fl(self, pool) -> dict:
        tasks = tuple(self.cfg.data.fl_tasks)
        if self.log_dir:
            self._start_log(self.cfg.rounds)
        self._evaluate("test", tasks)
        for _ in range(self.cfg.rounds):
            self._run_round(tasks, tasks[-1], pool)
            last = self._evaluate("test", tasks)
        return {"final": last}

    def _run_fcl(self, pool) -> dict:
        r = self.cfg.rounds_per_task
        if self.log_dir:
            self._start_log(2 * r)
        self._evaluate("task1", (1,))
        for _ in range(r):
            self._run_round((1,), 1, pool)
            after_t1 = self._evaluate("task1", (1,))
        self._consolidate(1)
        for _ in range(r):
            self._run_round((2,), 2, pool)
            after_t2 = self._evaluate("union", (1, 2))
            after_t2_t1 = self._evaluate("task1", (1,))
        return {"after_task1": after_t1, "after_task2": after_t2, "after_task2_task1": after_t2_t1}

    def method_label(self) -> str:
        if self.cfg.mode == "FL":
            return method_name(self.strategy, self.scope)
        if self.method is CLMethod.LGR:
            return "FedLGR"
        base = "FedRoot" if self.scope is Scope.ROOT else "FedAvg"
        if self.strategy is not Strategy.AVG:
            base = method_name(self.strategy, self.scope)
        return f"{base}-{self.method.value}"

    def _result(self, end: dict) -> RunResult:
        cfg = self.cfg
        mean_payload = float(np.mean([b for rnd in self.payload for b in rnd])) if self.payload else 0.0
        cpu = self.meter.client_round_cpu()
        table = []
        for point, row in end.items():
            table.append({"method": self.method_label(), "scope": self.scope.value, "clients": cfg.n_clients,
                          "augment": cfg.augment, "eval_point": point, "loss": row["loss"], "rmse": row["rmse"],
                          "pcc": row["pcc"], "payload_bytes": mean_payload, "cpu_s": cpu})
        end_of_task = {k: {m: v[m] for m in ("loss", "rmse", "pcc")} for k, v in end.items()}
        if cfg.mode == "FCL":
            end_of_task["forgetting_delta"] = forgetting_delta(end["after_task1"]["rmse"],
                                                               end["after_task2_task1"]["rmse"])
        resources = self.meter.to_dict()
        resources["client_cpu_per_round"] = cpu
        resources["comm_cpu_per_round"] = self.meter.comm_cpu_per_round()
        return RunResult(cfg.to_dict(), self.report, self.payload, table, end_of_task, resources)


def run_fl(config: ExperimentConfig, log_dir=None) -> RunResult:
    if config.mode != "FL":
        raise ConfigError("run_fl needs mode=FL")
    return Experiment(config, log_dir).run()


def run_fcl(config: ExperimentConfig, log_dir=None, trace: bool = False) -> RunResult:
    if config.mode != "FCL":
        raise ConfigError("run_fcl needs mode=FCL")
    return Experiment(config, log_dir, trace).run()


def run_experiment(config: ExperimentConfig, log_dir=None) -> RunResult:
    return (run_fl if config.mode == "FL" else run_fcl)(config, log_dir)


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

@dataclass
class ReplayResult:
    rounds: int
    global_checksums: list
    matches: list
    server_opt_matches: list
    final_global: ParamSet
    server_state: ServerState

    @property
    def ok(self) -> bool:
        return all(self.matches) and all(self.server_opt_matches)


def deterministic_replay(round_log_dir) -> ReplayResult:
    """Re-run aggregation from logged client updates and compare with the logged globals."""
    d = Path(round_log_dir)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise ReplayError(f"missing manifest in {d}")
    manifest = json.loads(mpath.read_text())
    g0, _ = ParamSet.from_bytes(read_blob(d / "global_0000.ckpt"))
    state = ServerState(g0, manifest["strategy"], manifest["scope"], server_lr=manifest["server_lr"],
                        server_optimizer=manifest["server_optimizer"])
    checks, matches, opt_matches = [], [], []
    for r in range(1, manifest["rounds"] + 1):
        rd = d / f"round_{r:04d}"
        files = [rd / f"client_{cid:02d}.upd" for cid in range(manifest["n_clients"])]
        updates = [parse_update(read_blob(f)) for f in files]
        aggregate(state, updates)
        logged, _ = ParamSet.from_bytes(read_blob(rd / "global.ckpt"))
        matches.append(logged.bitwise_equal(state.global_params))
        checks.append(state.global_params.checksum())
        if state.server_opt is not None:
            ps, meta = server_opt_params(state)
            logged_opt, logged_meta = ParamSet.from_bytes(read_blob(rd / "server_opt.ckpt"))
            opt_matches.append(logged_opt.bitwise_equal(ps) and logged_meta == json.loads(json.dumps(meta)))
    return ReplayResult(manifest["rounds"], checks, matches, opt_matches, state.global_params, state)
