"""Root/top split regression model and the named parameter container.

The root is a small conv stack (conv -> batch norm -> ReLU blocks, then a
global average pool) mapping images to a latent feature vector. The top maps
those features to 8 appropriateness scores. Every parameter lives in a
``ParamSet`` entry tagged with its segment so aggregation strategies can pick
exactly what leaves a client.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, NumericError
from .numcore import BATCHNORM_TAG, BN_MOMENTUM, LayerKind, LayerSpec, Mode

STAT_TAG = "STAT"  # running statistics: transmitted and averaged, never trained
CHECKPOINT_MAGIC = b"FSPS"
N_ACTIONS = 8
SCORE_MIN, SCORE_MAX = 1.0, 5.0
SCORE_MID = 3.0


class Segment(str, Enum):
    ROOT = "ROOT"
    TOP = "TOP"
    GENERATOR = "GENERATOR"


@dataclass
class ParamEntry:
    name: str
    segment: Segment
    tags: frozenset
    value: np.ndarray

    @property
    def trainable(self) -> bool:
        return STAT_TAG not in self.tags


class ParamSet:
    """Ordered, named parameter tensors with segment and tag metadata.

    Order is definition order and is what serialization follows, so two
    sets built the same way serialize to identical bytes.
    """

    def __init__(self, entries: Iterable[ParamEntry] = ()):
        self._entries: dict[str, ParamEntry] = {}
        for e in entries:
            self.add(e.name, e.segment, e.value, e.tags)

    def add(self, name: str, segment, value: np.ndarray, tags=()) -> None:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self._entries[name] = ParamEntry(name, Segment(segment), frozenset(tags), np.ascontiguousarray(value))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        entry = self._entries[name]
        if value.shape != entry.value.shape:
            raise ConfigError(f"shape mismatch for {name}: {value.shape} vs {entry.value.shape}")
        entry.value = np.ascontiguousarray(value, dtype=entry.value.dtype)

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def entries(self) -> list[ParamEntry]:
        return list(self._entries.values())

    def names(self, segment=None, trainable_only: bool = False) -> list[str]:
        out = []
        for e in self._entries.values():
            if segment is not None and e.segment != Segment(segment):
                continue
            if trainable_only and not e.trainable:
                continue
            out.append(e.name)
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: e.value for n, e in self._entries.items()}

    def copy(self) -> "ParamSet":
        return ParamSet(ParamEntry(e.name, e.segment, e.tags, e.value.copy()) for e in self._entries.values())

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(ParamEntry(e.name, e.segment, e.tags, e.value.astype(dtype))
                        for e in self._entries.values())

    def subset(self, names: Iterable[str]) -> "ParamSet":
        """New set sharing arrays with this one, restricted to ``names`` (kept in canonical order)."""
        wanted = set(names)
        missing = wanted - set(self._entries)
        if missing:
            raise ConfigError(f"unknown parameters: {sorted(missing)}")
        return ParamSet(e for n, e in self._entries.items() if n in wanted)

    def signature(self) -> list[tuple]:
        return [(e.name, e.segment.value, tuple(sorted(e.tags)), e.value.shape) for e in self._entries.values()]

    def compatible(self, other: "ParamSet") -> bool:
        return self.signature() == other.signature()

    def num_elements(self) -> int:
        return int(sum(e.value.size for e in self._entries.values()))

    def load_from(self, other: "ParamSet") -> None:
        """Copy values of every tensor in ``other`` into the matching tensors here."""
        for e in other.entries():
            mine = self._entries.get(e.name)
            if mine is None or mine.value.shape != e.value.shape or mine.segment != e.segment:
                raise ConfigError(f"cannot load {e.name}: not shape-compatible")
            mine.value[...] = e.value

    # -- serialization -----------------------------------------------------

    def header(self) -> dict:
        return {"entries": [{"name": e.name, "segment": e.segment.value, "tags": sorted(e.tags),
                             "shape": list(e.value.shape)} for e in self._entries.values()]}

    def to_bytes(self, extra: dict | None = None) -> bytes:
        head = self.header()
        if extra:
            head["meta"] = extra
        blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        for e in self._entries.values():
            nc.write_tensor(buf, e.value)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> tuple["ParamSet", dict]:
        """Returns ``(params, meta)``."""
        fh = io.BytesIO(data)
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ConfigError("not a parameter checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        head = json.loads(fh.read(n).decode("utf-8"))
        ps = cls()
        for spec in head["entries"]:
            arr = nc.read_tensor(fh)
            if list(arr.shape) != spec["shape"]:
                raise ConfigError(f"payload shape mismatch for {spec['name']}")
            ps.add(spec["name"], spec["segment"], arr, spec["tags"])
        if fh.read(1):
            raise ConfigError("trailing bytes after checkpoint payload")
        return ps, head.get("meta", {})

    def save(self, path, extra: dict | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(extra))

    @classmethod
    def load(cls, path) -> tuple["ParamSet", dict]:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def bitwise_equal(self, other: "ParamSet") -> bool:
        return self.compatible(other) and all(
            np.array_equal(self[n], other[n]) and self[n].tobytes() == other[n].tobytes() for n in self)


# ---------------------------------------------------------------------------
# Layer sequence runner
# ---------------------------------------------------------------------------

def layer_param_names(spec: LayerSpec) -> dict[str, str]:
    p = spec.name
    if spec.kind in (LayerKind.DENSE, LayerKind.CONV2D):
        return {"weight": f"{p}.weight", "bias": f"{p}.bias"}
    if spec.kind in (LayerKind.BATCHNORM1D, LayerKind.BATCHNORM2D):
        return {"gamma": f"{p}.gamma", "beta": f"{p}.beta",
                "running_mean": f"{p}.running_mean", "running_var": f"{p}.running_var"}
    return {}


def forward_layers(layers: Sequence[LayerSpec], params: ParamSet, x: np.ndarray, mode: Mode,
                   update_stats: bool = True, momentum: float = BN_MOMENTUM):
    """Run a fixed layer sequence. Returns ``(output, caches)``.

    In TRAIN mode batch-norm running statistics are written back into
    ``params`` (with ``momentum``) unless ``update_stats`` is false.
    """
    mode = Mode(mode)
    caches = []
    for spec in layers:
        names = layer_param_names(spec)
        if spec.kind is LayerKind.DENSE:
            W, b = params[names["weight"]], params[names["bias"]]
            caches.append(x)
            x = nc.dense_forward(x, W, b)
        elif spec.kind is LayerKind.CONV2D:
            K, b = params[names["weight"]], params[names["bias"]]
            y, cols = nc.conv2d_forward(x, K, b, spec.dims[3])
            caches.append((cols, x.shape))
            x = y
        elif spec.kind in (LayerKind.BATCHNORM1D, LayerKind.BATCHNORM2D):
            rm, rv = params[names["running_mean"]], params[names["running_var"]]
            y, cache, (nm, nv) = nc.batchnorm_forward(x, params[names["gamma"]], params[names["beta"]],
                                                      rm, rv, mode, momentum=momentum)
            if mode is Mode.TRAIN and update_stats:
                rm[...] = nm
                rv[...] = nv
            caches.append(cache)
            x = y
        elif spec.kind is LayerKind.RELU:
            caches.append(x)
            x = nc.relu_forward(x)
        elif spec.kind is LayerKind.GLOBALAVGPOOL:
            caches.append(x.shape)
            x = nc.global_avg_pool_forward(x)
        elif spec.kind is LayerKind.FLATTEN:
            caches.append(x.shape)
            x = nc.flatten_forward(x)
    return x, caches


def backward_layers(layers: Sequence[LayerSpec], params: ParamSet, caches, dy: np.ndarray):
    """Backprop through a layer sequence. Returns ``(dx, grads)`` for trainable tensors."""
    grads: dict[str, np.ndarray] = {}
    for spec, cache in zip(reversed(layers), reversed(caches)):
        names = layer_param_names(spec)
        if spec.kind is LayerKind.DENSE:
            dy, grads[names["weight"]], grads[names["bias"]] = nc.dense_backward(dy, cache, params[names["weight"]])
        elif spec.kind is LayerKind.CONV2D:
            cols, x_shape = cache
            dy, grads[names["weight"]], grads[names["bias"]] = nc.conv2d_backward(
                dy, cols, params[names["weight"]], x_shape, spec.dims[3])
        elif spec.kind in (LayerKind.BATCHNORM1D, LayerKind.BATCHNORM2D):
            dy, grads[names["gamma"]], grads[names["beta"]] = nc.batchnorm_backward(dy, cache, params[names["gamma"]])
        elif spec.kind is LayerKind.RELU:
            dy = nc.relu_backward(dy, cache)
        elif spec.kind is LayerKind.GLOBALAVGPOOL:
            dy = nc.global_avg_pool_backward(dy, cache)
        elif spec.kind is LayerKind.FLATTEN:
            dy = nc.flatten_backward(dy, cache)
    return dy, grads


def init_layer_params(params: ParamSet, layers: Sequence[LayerSpec], segment: Segment,
                      rng: np.random.Generator, dtype=nc.DTYPE) -> None:
    """He-normal weights, zero biases, unit/zero batch-norm affine and stats."""
    for spec in layers:
        names = layer_param_names(spec)
        tags = spec.tags
        if spec.kind is LayerKind.DENSE:
            fan_in, fan_out = spec.dims
            W = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
            params.add(names["weight"], segment, W.astype(dtype), tags)
            params.add(names["bias"], segment, np.zeros(fan_out, dtype), tags)
        elif spec.kind is LayerKind.CONV2D:
            cin, cout = spec.dims[:2]
            K = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            params.add(names["weight"], segment, K.astype(dtype), tags)
            params.add(names["bias"], segment, np.zeros(cout, dtype), tags)
        elif spec.kind in (LayerKind.BATCHNORM1D, LayerKind.BATCHNORM2D):
            n = spec.dims[0]
            params.add(names["gamma"], segment, np.ones(n, dtype), tags)
            params.add(names["beta"], segment, np.zeros(n, dtype), tags)
            params.add(names["running_mean"], segment, np.zeros(n, dtype), tags | {STAT_TAG})
            params.add(names["running_var"], segment, np.ones(n, dtype), tags | {STAT_TAG})


# ---------------------------------------------------------------------------
# Root/top model
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    in_channels: int = 3
    image_size: int = 32
    channels: tuple = (16, 32, 64)
    hidden: int = 32
    n_out: int = N_ACTIONS
    top_activation: str = "none"  # "none" or "relu" between the two FC layers
    output_bias: float = SCORE_MID

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        s = self.image_size
        if s < 8 or s & (s - 1):
            raise ConfigError(f"image_size must be a power of two >= 8, got {s}")
        if self.top_activation not in ("none", "relu"):
            raise ConfigError(f"top_activation must be 'none' or 'relu', got {self.top_activation!r}")
        if self.n_out != N_ACTIONS:
            raise ConfigError(f"the model predicts exactly {N_ACTIONS} scores")


def build_root_layers(cfg: ModelConfig) -> list[LayerSpec]:
    layers = []
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.channels, start=1):
        layers.append(LayerSpec(LayerKind.CONV2D, (cin, cout, 3, 2, 1), name=f"root.conv{i}"))
        layers.append(LayerSpec(LayerKind.BATCHNORM2D, (cout,), {BATCHNORM_TAG}, name=f"root.bn{i}"))
        layers.append(LayerSpec(LayerKind.RELU, name=f"root.relu{i}"))
        cin = cout
    layers.append(LayerSpec(LayerKind.GLOBALAVGPOOL, name="root.pool"))
    layers.append(LayerSpec(LayerKind.FLATTEN, name="root.flatten"))
    return layers


def build_top_layers(cfg: ModelConfig) -> list[LayerSpec]:
    D = cfg.channels[-1]
    layers = [
        LayerSpec(LayerKind.DENSE, (D, cfg.hidden), name="top.fc1"),
        LayerSpec(LayerKind.BATCHNORM1D, (cfg.hidden,), {BATCHNORM_TAG}, name="top.bn1"),
    ]
    if cfg.top_activation == "relu":
        layers.append(LayerSpec(LayerKind.RELU, name="top.relu1"))
    layers += [
        LayerSpec(LayerKind.DENSE, (cfg.hidden, cfg.n_out), name="top.fc2"),
        LayerSpec(LayerKind.BATCHNORM1D, (cfg.n_out,), {BATCHNORM_TAG}, name="top.bn2"),
    ]
    return layers


@dataclass
class ForwardCache:
    root: list = field(default_factory=list)
    top: list = field(default_factory=list)


class RootTopModel:
    """Conv root producing ``feature_dim`` features and an FC top producing 8 scores."""

    def __init__(self, config: ModelConfig | None = None, params: ParamSet | None = None,
                 seed: int = 0, dtype=nc.DTYPE):
        self.config = config or ModelConfig()
        self.root_layers = build_root_layers(self.config)
        self.top_layers = build_top_layers(self.config)
        if params is None:
            rng = np.random.default_rng(seed)
            params = ParamSet()
            init_layer_params(params, self.root_layers, Segment.ROOT, rng, dtype)
            init_layer_params(params, self.top_layers, Segment.TOP, rng, dtype)
            params["top.bn2.beta"] = np.full(self.config.n_out, self.config.output_bias, dtype)
        self.params = params

    @property
    def feature_dim(self) -> int:
        return self.config.channels[-1]

    def copy(self) -> "RootTopModel":
        return RootTopModel(self.config, self.params.copy())

    def astype(self, dtype) -> "RootTopModel":
        return RootTopModel(self.config, self.params.astype(dtype))

    def names(self, segment: Segment, trainable_only: bool = True) -> list[str]:
        return self.params.names(segment, trainable_only)

    def forward(self, x: np.ndarray, mode=Mode.EVAL, update_stats: bool = True):
        R, rc = self.extract_root(x, mode, update_stats)
        out, tc = self.predict_top(R, mode, update_stats)
        return out, ForwardCache(rc, tc)

    def extract_root(self, x: np.ndarray, mode=Mode.EVAL, update_stats: bool = True, momentum: float = BN_MOMENTUM):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ConfigError(f"expected input [B,{self.config.in_channels},H,W], got {x.shape}")
        return forward_layers(self.root_layers, self.params, x, mode, update_stats, momentum)

    def predict_top(self, R: np.ndarray, mode=Mode.EVAL, update_stats: bool = True):
        if R.ndim != 2 or R.shape[1] != self.feature_dim:
            raise ConfigError(f"expected features of width {self.feature_dim}, got {R.shape}")
        return forward_layers(self.top_layers, self.params, R, mode, update_stats)

    def backward_top(self, dout: np.ndarray, top_cache):
        return backward_layers(self.top_layers, self.params, top_cache, dout)

    def backward_root(self, dR: np.ndarray, root_cache) -> dict:
        _, grads = backward_layers(self.root_layers, self.params, root_cache, dR)
        return grads

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray, mode=Mode.TRAIN, update_stats: bool = True):
        """Task MSE and its gradients w.r.t. every trainable tensor."""
        out, cache = self.forward(x, mode, update_stats)
        loss, dout = nc.mse_loss(out, y)
        dR, grads = self.backward_top(dout, cache.top)
        grads.update(self.backward_root(dR, cache.root))
        return loss, grads

    def activation_pattern(self, x: np.ndarray, mode=Mode.TRAIN) -> bytes:
        """Packed ReLU on/off mask; identifies the smooth piece the loss is on."""
        _, cache = self.forward(x, mode, update_stats=False)
        bits = [c > 0 for spec, c in zip(self.root_layers, cache.root) if spec.kind is LayerKind.RELU]
        bits += [c > 0 for spec, c in zip(self.top_layers, cache.top) if spec.kind is LayerKind.RELU]
        return np.packbits(np.concatenate([b.ravel() for b in bits])).tobytes() if bits else b""

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """EVAL-mode predictions; never touches parameters."""
        outs = [self.forward(x[i:i + batch_size], Mode.EVAL)[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)


GradHook = Callable[[ParamSet], tuple]


def extract_root(model: RootTopModel, x: np.ndarray, mode=Mode.EVAL) -> np.ndarray:
    return model.extract_root(x, mode)[0]


def predict_top(model: RootTopModel, R: np.ndarray, mode=Mode.EVAL) -> np.ndarray:
    return model.predict_top(R, mode)[0]


def _apply_hooks(model: RootTopModel, loss: float, grads: dict, hooks: Iterable[GradHook]) -> float:
    for hook in hooks:
        penalty, extra = hook(model.params)
        loss += penalty
        for name, g in extra.items():
            grads[name] = grads[name] + g
    return loss


def _check_loss(loss: float) -> None:
    if nc.is_checked() and not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")


def train_step(model: RootTopModel, x: np.ndarray, y: np.ndarray, opt: nc.AdamState,
               hooks: Iterable[GradHook] = ()) -> float:
    """One forward/backward/Adam update over ROOT and TOP.

    Hooks return ``(penalty, grads)`` which are added before the step. The
    returned loss includes the penalties.
    """
    if len(x) < 2:
        raise ConfigError("train_step needs a batch of at least 2 (batch norm)")
    loss, grads = model.loss_and_grads(x, y)
    loss = _apply_hooks(model, loss, grads, hooks)
    _check_loss(loss)
    nc.adam_step(model.params, grads, opt)
    return loss


def split_rates_step(model: RootTopModel, x: np.ndarray, y: np.ndarray, opt_root: nc.AdamState,
                     opt_top: nc.AdamState, eta_root: float, eta_top: float,
                     hooks: Iterable[GradHook] = ()) -> float:
    """Single backward pass; ROOT stepped at ``eta_root``, TOP at ``eta_top``."""
    if eta_root < 0 or eta_top < 0:
        raise ConfigError("learning rates must be non-negative")
    if eta_root > eta_top:
        raise ConfigError(f"root rate {eta_root} exceeds top rate {eta_top}")
    loss, grads = model.loss_and_grads(x, y)
    loss = _apply_hooks(model, loss, grads, hooks)
    _check_loss(loss)
    apply_split_update(model, grads, opt_root, opt_top, eta_root, eta_top)
    return loss


def apply_split_update(model: RootTopModel, grads: dict, opt_root: nc.AdamState, opt_top: nc.AdamState,
                       eta_root: float, eta_top: float, order: Sequence[Segment] = (Segment.TOP, Segment.ROOT)):
    for seg in order:
        names = set(model.names(seg))
        opt, lr = (opt_root, eta_root) if seg is Segment.ROOT else (opt_top, eta_top)
        opt.lr = lr
        nc.adam_step(model.params, {n: g for n, g in grads.items() if n in names}, opt)


def clamp_scores(pred: np.ndarray) -> np.ndarray:
    """Clamp to the 1..5 rating scale; used only for reported metrics."""
    return np.clip(pred, SCORE_MIN, SCORE_MAX)
