"""Differentiable building blocks with explicit forward/backward passes.

Tensors are plain ``numpy.ndarray`` values. Models run in float32; every
function here preserves the dtype of its inputs so that gradient checks can
run the exact same code in float64. Reductions (batch statistics, weighted
sums) accumulate in float64 and cast back.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import BinaryIO, Callable, Mapping

import numpy as np

from .errors import ConfigError, NumericError

DTYPE = np.float32
TENSOR_MAGIC = b"FSTN"

_checked = os.environ.get("FEDSCAPE_CHECKED", "0") not in ("", "0", "false")


def set_checked(enabled: bool) -> None:
    """Toggle NaN/Inf guards globally (on in tests, off for benchmark runs)."""
    global _checked
    _checked = bool(enabled)


def is_checked() -> bool:
    return _checked


def check_finite(arr: np.ndarray, what: str) -> None:
    if _checked and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def as_tensor(data, shape=None, dtype=DTYPE) -> np.ndarray:
    """Build a dense tensor, validating shape and (always) finiteness."""
    arr = np.array(data, dtype=dtype)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ConfigError(f"tensor dims must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ConfigError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# Binary tensor format: "FSTN", u8 rank, u32 dims (LE), f32 payload row-major
# ---------------------------------------------------------------------------

def tensor_nbytes(shape) -> int:
    return len(TENSOR_MAGIC) + 1 + 4 * len(shape) + 4 * int(np.prod(shape, dtype=np.int64))


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> int:
    arr = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    if arr.ndim > 255:
        raise ConfigError("tensor rank exceeds 255")
    head = TENSOR_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    fh.write(head)
    fh.write(arr.tobytes(order="C"))
    return len(head) + arr.nbytes


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ConfigError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(shape)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ConfigError(f"truncated tensor: wanted {n} bytes, got {len(buf)}")
    return buf


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


# ---------------------------------------------------------------------------
# Layer descriptions
# ---------------------------------------------------------------------------

class LayerKind(str, Enum):
    DENSE = "DENSE"
    CONV2D = "CONV2D"
    BATCHNORM1D = "BATCHNORM1D"
    BATCHNORM2D = "BATCHNORM2D"
    RELU = "RELU"
    GLOBALAVGPOOL = "GLOBALAVGPOOL"
    FLATTEN = "FLATTEN"


class Mode(str, Enum):
    TRAIN = "TRAIN"
    EVAL = "EVAL"


BATCHNORM_TAG = "BATCHNORM"
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a fixed sequence.

    ``dims`` holds ``(in, out)`` for DENSE, ``(in_ch, out_ch, kernel, stride,
    padding)`` for CONV2D and ``(features,)`` for batch norm layers.
    """

    kind: LayerKind
    dims: tuple = ()
    tags: frozenset = field(default_factory=frozenset)
    name: str = ""

    def __post_init__(self):
        kind = LayerKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "tags", frozenset(self.tags))
        if kind is LayerKind.DENSE:
            if len(self.dims) != 2 or min(self.dims) < 1:
                raise ConfigError(f"DENSE needs (in, out) >= 1, got {self.dims}")
        elif kind is LayerKind.CONV2D:
            if len(self.dims) == 4:
                object.__setattr__(self, "dims", tuple(self.dims) + (1,))
            if len(self.dims) != 5:
                raise ConfigError("CONV2D needs (in_ch, out_ch, kernel, stride, padding)")
            _, _, kernel, stride, padding = self.dims
            if kernel != 3 or padding != 1 or stride not in (1, 2):
                raise ConfigError(f"CONV2D supports kernel=3, padding=1, stride 1|2; got {self.dims}")
        elif kind in (LayerKind.BATCHNORM1D, LayerKind.BATCHNORM2D):
            if len(self.dims) != 1 or self.dims[0] < 1:
                raise ConfigError(f"{kind.value} needs (features,)")
            if BATCHNORM_TAG not in self.tags:
                object.__setattr__(self, "tags", self.tags | {BATCHNORM_TAG})


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ConfigError(f"dense shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W.T + b


def dense_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns ``(dx, dW, db)``."""
    dW = dy.T @ x
    db = dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    dx = dy @ W
    return dx, dW, db


# ---------------------------------------------------------------------------
# Conv2d (3x3, padding 1, stride 1 or 2), implemented with im2col
# ---------------------------------------------------------------------------

def _out_size(n: int, stride: int) -> int:
    return -(-n // stride)


def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
    """(B, C, H, W) -> (B, Ho, Wo, C*9)."""
    B, C, H, W = x.shape
    Ho, Wo = _out_size(H, stride), _out_size(W, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # B, C, Ho, Wo, 3, 3
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho, Wo, C * 9)


def conv2d_forward(x: np.ndarray, K: np.ndarray, b: np.ndarray, stride: int = 1):
    """Cross-correlation with zero padding 1. Returns ``(y, cols)``."""
    if x.ndim != 4 or K.ndim != 4 or K.shape[2:] != (3, 3):
        raise ConfigError(f"conv2d expects x[B,C,H,W], K[O,C,3,3]; got {x.shape}, {K.shape}")
    if x.shape[1] != K.shape[1]:
        raise ConfigError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {K.shape[1]}")
    if stride not in (1, 2):
        raise ConfigError(f"unsupported stride {stride}")
    cols = _im2col(x, stride)
    y = cols @ K.reshape(K.shape[0], -1).T + b  # B, Ho, Wo, O
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cols


def conv2d_backward(dy: np.ndarray, cols: np.ndarray, K: np.ndarray, x_shape, stride: int):
    """Returns ``(dx, dK, db)``."""
    B, C, H, W = x_shape
    O = K.shape[0]
    dy_t = dy.transpose(0, 2, 3, 1)  # B, Ho, Wo, O
    Ho, Wo = dy_t.shape[1:3]
    flat_dy = dy_t.reshape(-1, O)
    dK = (flat_dy.T @ cols.reshape(-1, C * 9)).reshape(K.shape)
    db = flat_dy.sum(axis=0, dtype=np.float64).astype(dy.dtype)
    dcols = (flat_dy @ K.reshape(O, -1)).reshape(B, Ho, Wo, C, 3, 3)
    dxp = np.zeros((B, C, H + 2, W + 2), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:H + 1, 1:W + 1], dK, db


# ---------------------------------------------------------------------------
# Batch norm
# ---------------------------------------------------------------------------

@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    mode: Mode
    axes: tuple


def _bn_axes(x: np.ndarray) -> tuple:
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise ConfigError(f"batch norm expects 2-D or 4-D input, got {x.shape}")


def _bn_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v if ndim == 2 else v.reshape(1, -1, 1, 1)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode=Mode.TRAIN,
                      eps: float = 1e-5, momentum: float = BN_MOMENTUM):
    """Returns ``(y, cache, (new_running_mean, new_running_var))``.

    Running statistics are returned, not mutated; in EVAL mode they come back
    unchanged. The running variance uses the unbiased batch variance.
    """
    mode = Mode(mode)
    axes = _bn_axes(x)
    if x.shape[1] != gamma.shape[0]:
        raise ConfigError(f"batch norm expects {gamma.shape[0]} features, got {x.shape[1]}")
    n = int(np.prod([x.shape[a] for a in axes]))
    if mode is Mode.TRAIN:
        if x.shape[0] < 2:
            raise NumericError("batch norm in TRAIN mode needs batch size >= 2")
        x64 = x.astype(np.float64)
        mean = x64.mean(axis=axes)
        var = ((x64 - _bn_view(mean, x.ndim)) ** 2).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = ((x64 - _bn_view(mean, x.ndim)) * _bn_view(inv_std, x.ndim)).astype(x.dtype)
        unbiased = var * n / (n - 1)
        new_mean = ((1 - momentum) * running_mean + momentum * mean).astype(running_mean.dtype)
        new_var = ((1 - momentum) * running_var + momentum * unbiased).astype(running_var.dtype)
        inv_std = inv_std.astype(x.dtype)
    else:
        inv_std = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(x.dtype)
        xhat = (x - _bn_view(running_mean, x.ndim)) * _bn_view(inv_std, x.ndim)
        new_mean, new_var = running_mean, running_var
    y = _bn_view(gamma, x.ndim) * xhat + _bn_view(beta, x.ndim)
    return y, BatchNormCache(xhat, inv_std, mode, axes), (new_mean, new_var)


def batchnorm_backward(dy: np.ndarray, cache: BatchNormCache, gamma: np.ndarray):
    """Returns ``(dx, dgamma, dbeta)``."""
    axes, nd = cache.axes, dy.ndim
    dgamma = (dy * cache.xhat).sum(axis=axes, dtype=np.float64).astype(dy.dtype)
    dbeta = dy.sum(axis=axes, dtype=np.float64).astype(dy.dtype)
    dxhat = dy * _bn_view(gamma, nd)
    if cache.mode is Mode.EVAL:
        return dxhat * _bn_view(cache.inv_std, nd), dgamma, dbeta
    n = int(np.prod([dy.shape[a] for a in axes]))
    d64 = dxhat.astype(np.float64)
    xh64 = cache.xhat.astype(np.float64)
    s1 = _bn_view(d64.sum(axis=axes), nd)
    s2 = _bn_view((d64 * xh64).sum(axis=axes), nd)
    dx = _bn_view(cache.inv_std.astype(np.float64), nd) / n * (n * d64 - s1 - xh64 * s2)
    return dx.astype(dy.dtype), dgamma, dbeta


# ---------------------------------------------------------------------------
# Parameter-free layers
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype).reshape(x.shape[0], x.shape[1], 1, 1)


def global_avg_pool_backward(dy: np.ndarray, x_shape) -> np.ndarray:
    H, W = x_shape[2], x_shape[3]
    return np.broadcast_to(dy / (H * W), x_shape).astype(dy.dtype)


def flatten_forward(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def flatten_backward(dy: np.ndarray, x_shape) -> np.ndarray:
    return dy.reshape(x_shape)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements. Returns ``(loss, dloss/dpred)``."""
    if pred.shape != target.shape:
        raise ConfigError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 * diff / diff.size).astype(pred.dtype)
    return loss, grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> AdamState:
    """Bias-corrected Adam; updates ``params`` arrays and ``state`` in place.

    Only names present in ``grads`` are stepped. ``t`` advances by one per call.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    step = state.lr / bc1
    sqrt_bc2 = np.sqrt(bc2)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match {name}{p.shape}")
        check_finite(g, f"gradient of {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        denom = np.sqrt(v) / sqrt_bc2 + state.eps
        p -= (step * (m / denom)).astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Mapping[str, np.ndarray]], tuple], params: Mapping[str, np.ndarray],
               h: float = 1e-3, n_samples: int = 20, rng=None, names=None,
               region: Callable[[Mapping[str, np.ndarray]], bytes] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(value, grads)`` with ``grads`` keyed like
    ``params`` (missing names mean zero gradient). Coordinates are sampled
    uniformly over the flattened parameters; the error for each coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``. ``params`` is perturbed in
    place and restored.

    ``region(params)`` optionally identifies the smooth piece the function is
    on (e.g. a ReLU activation pattern). Coordinates whose stencil leaves that
    piece are skipped and replaced by fresh draws.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(params) if names is None else list(names)
    _, grads = f(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    if total == 0:
        return 0.0
    want = min(n_samples, total)
    order = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    home = region(params) if region is not None else None
    worst, done = 0.0, 0
    for flat in order:
        if done == want:
            break
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[i], int(flat - offsets[i])
        arr = params[name].reshape(-1)
        old = arr[idx]
        arr[idx] = old + h
        fp, _ = f(params)
        same = home is None or region(params) == home
        arr[idx] = old - h
        fm, _ = f(params)
        same = same and (home is None or region(params) == home)
        arr[idx] = old
        if not same:
            continue
        numeric = (fp - fm) / (2 * h)
        g = grads.get(name)
        analytic = 0.0 if g is None else float(g.reshape(-1)[idx])
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
        done += 1
    if done < want:
        raise NumericError(f"only {done} of {want} coordinates lie in a smooth region")
    return worst
