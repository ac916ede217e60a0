"""Dense float32 tensor kernel with reverse-mode autodiff over a declared parameter set.

Values are immutable once created; gradient recording builds an implicit tape
(creation-ordered op records) that `backward` replays in exact reverse
execution order. Gradients are produced only for parameters explicitly marked
trainable. Reductions accumulate in float64, storage stays float32.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

from .counters import COUNTERS

__all__ = [
    "BatchNormState",
    "NonFiniteError",
    "Tensor",
    "add",
    "affine_modulate",
    "avg_pool",
    "backward",
    "batch_norm",
    "channel_moments",
    "conv2d",
    "cross_entropy_loss",
    "entropy_loss",
    "finite_diff_grad",
    "flatten",
    "grad_enabled",
    "linear",
    "no_grad",
    "relu",
    "softmax_probs",
]

PROB_FLOOR = 1e-12  # clamp inside entropy/cross-entropy to avoid log(0)


class NonFiniteError(ArithmeticError):
    """A kernel op produced or was handed NaN/Inf, violating the finite contract."""


_seq = itertools.count()
_grad_stack = [True]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable gradient recording inside the block (pure inference)."""
    _grad_stack.append(False)
    try:
        yield
    finally:
        _grad_stack.pop()


def grad_enabled() -> bool:
    return _grad_stack[-1]


def _as_f32(data) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d scalars to shape (1,)
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


def _check_finite(data: np.ndarray, op: str) -> None:
    # One-pass check: any NaN/Inf poisons the f64 sum. f64 cannot overflow on
    # a finite f32 array of desk-scale size.
    if not math.isfinite(float(np.sum(data, dtype=np.float64))):
        raise NonFiniteError(f"non-finite values in output of {op}")


class Tensor:
    """Immutable float32 n-d array value, optionally a trainable leaf."""

    __slots__ = ("data", "requires_grad", "_parents", "_grad_fn", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_f32(data)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    """Wrap an op output, recording the backward rule when recording is on."""
    data = _as_f32(data)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out._seq = next(_seq)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for the named trainable set.

    The returned map has exactly the keys of `params`. Raises if the loss was
    not produced by a recorded forward pass, if a parameter is not marked
    trainable, or if a parameter is detached from the loss graph.
    """
    if loss.shape != ():
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    for name, p in params.items():
        if not p.requires_grad:
            raise ValueError(f"parameter {name!r} is not marked trainable")
    if loss._grad_fn is None and all(loss is not p for p in params.values()):
        raise ValueError("loss was not produced by a recorded forward pass")

    # Collect the subgraph that can carry gradient, then sweep it in exact
    # reverse execution order (creation sequence).
    nodes: list[Tensor] = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        node = stack.pop()
        nodes.append(node)
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append(parent)
    nodes.sort(key=lambda n: n._seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float32)}
    for node in nodes:
        g = grads.get(id(node))
        if g is None or node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg

    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(id(p))
        if g is None:
            raise ValueError(f"parameter {name!r} is detached from the loss graph")
        out[name] = np.array(g, dtype=np.float32)
    COUNTERS.backward_calls += 1
    return out


# ---------------------------------------------------------------------------
# Structural ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernels plus per-channel bias."""
    if x.ndim != 4 or weight.ndim != 4 or bias.ndim != 1:
        raise ValueError("conv2d expects NCHW input, OIHW weight, 1-d bias")
    n, ci, h, w = x.shape
    co, ci_w, kh, kw = weight.shape
    if ci != ci_w:
        raise ValueError(f"conv2d channel mismatch: input {ci}, weight {ci_w}")
    if bias.shape[0] != co:
        raise ValueError(f"conv2d bias length {bias.shape[0]} != {co} output channels")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1 and pad >= 0")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output extent < 1 for input {h}x{w}, kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ci, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    cols = patches.reshape(n, ci * kh * kw, ho * wo)  # copy
    wmat = weight.data.reshape(co, ci * kh * kw)
    out = np.matmul(wmat, cols) + bias.data[:, None]
    out = out.reshape(n, co, ho, wo)

    hp, wp = xp.shape[2], xp.shape[3]

    def grad_fn(g: np.ndarray):
        g3 = g.reshape(n, co, ho * wo)
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        if weight.requires_grad:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(weight.shape).astype(np.float32, copy=False)
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape(n, ci, kh, kw, ho, wo)
            dxp = np.zeros((n, ci, hp, wp), dtype=np.float32)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, i, j
                    ]
            gx = dxp[:, :, pad : hp - pad, pad : wp - pad] if pad else dxp
        return gx, gw, gb

    return _result(out, "conv2d", (x, weight, bias), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias for x of shape (N, F) and weight of shape (O, F)."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ValueError("linear expects 2-d input, 2-d weight, 1-d bias")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear feature mismatch: input {x.shape[1]}, weight {weight.shape[1]}")
    if bias.shape[0] != weight.shape[0]:
        raise ValueError("linear bias length must match output features")
    out = x.data @ weight.data.T + bias.data

    def grad_fn(g: np.ndarray):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0, dtype=np.float64).astype(np.float32) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, "linear", (x, weight, bias), grad_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def grad_fn(g: np.ndarray):
        return (g * mask,)

    return _result(out, "relu", (x,), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of same-shape tensors (residual merge)."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def grad_fn(g: np.ndarray):
        return g, g

    return _result(out, "add", (a, b), grad_fn)


def avg_pool(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling; spatial extents must divide by k."""
    if x.ndim != 4:
        raise ValueError("avg_pool expects NCHW input")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ValueError(f"avg_pool window {k} must divide spatial extents {h}x{w}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def grad_fn(g: np.ndarray):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx.astype(np.float32, copy=False),)

    return _result(out, "avg_pool", (x,), grad_fn)


def flatten(x: Tensor) -> Tensor:
    if x.ndim < 1:
        raise ValueError("flatten expects a batched input")
    n = x.shape[0]
    features = int(np.prod(x.shape[1:], dtype=np.int64)) if x.ndim > 1 else 1
    out = x.data.reshape(n, features)
    shape = x.shape

    def grad_fn(g: np.ndarray):
        return (g.reshape(shape),)

    return _result(out, "flatten", (x,), grad_fn)


# ---------------------------------------------------------------------------
# Normalization and modulation
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Stored normalization statistics plus the learned affine of one layer.

    `mean`/`var` are plain arrays (never differentiated); `gamma`/`beta`
    belong to the model parameters. Stored statistics are only ever replaced
    as a pair.
    """

    mean: np.ndarray
    var: np.ndarray
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.var = np.asarray(self.var, dtype=np.float32)
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.var < 0):
            raise ValueError("variance entries must be non-negative")

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def replace_stats(self, mean: np.ndarray, var: np.ndarray) -> None:
        mean = np.asarray(mean, dtype=np.float32)
        var = np.asarray(var, dtype=np.float32)
        if mean.shape != self.mean.shape or var.shape != self.var.shape:
            raise ValueError("replacement statistics must match channel count")
        if np.any(var < 0):
            raise ValueError("variance entries must be non-negative")
        self.mean, self.var = mean, var


def channel_moments(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over N, H, W (f64 accumulation)."""
    mean = data.mean(axis=(0, 2, 3), dtype=np.float64)
    var = (data.astype(np.float64) ** 2).mean(axis=(0, 2, 3)) - mean**2
    return mean.astype(np.float32), np.maximum(var, 0.0).astype(np.float32)


def batch_norm(
    x: Tensor,
    state: BatchNormState,
    mode: str,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Normalize NCHW input per channel, then apply the layer's learned affine.

    mode "batch" normalizes by the batch's own moments (differentiable
    through them); mode "stored" uses the state's stored statistics, or the
    explicit `stats` pair when given (statistics replacement without mutating
    the state).
    """
    if x.ndim != 4:
        raise ValueError("batch_norm expects NCHW input")
    c = x.shape[1]
    if c != state.channels:
        raise ValueError(f"batch_norm channel mismatch: input {c}, state {state.channels}")
    gamma, beta = state.gamma, state.beta
    eps = state.eps

    if mode == "batch":
        n, _, h, w = x.shape
        m = n * h * w
        if m == 0:
            raise ValueError("batch_norm with batch statistics needs a non-empty batch")
        mean, var = channel_moments(x.data)
        centered = x.data - mean[None, :, None, None]
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def grad_fn(g: np.ndarray):
            gg = gb = gx = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            if beta.requires_grad:
                gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            if x.requires_grad:
                dxhat = g * gamma.data[None, :, None, None]
                dvar = (dxhat * centered).sum(axis=(0, 2, 3), dtype=np.float64) * (
                    -0.5
                ) * (var + eps) ** -1.5
                dmean = dxhat.sum(axis=(0, 2, 3), dtype=np.float64) * (-inv) + dvar * (
                    -2.0 / m
                ) * centered.sum(axis=(0, 2, 3), dtype=np.float64)
                gx = (
                    dxhat * inv[None, :, None, None]
                    + (2.0 / m) * dvar.astype(np.float32)[None, :, None, None] * centered
                    + (dmean.astype(np.float32) / m)[None, :, None, None]
                ).astype(np.float32, copy=False)
            return gx, gg, gb

        return _result(out, "batch_norm", (x, gamma, beta), grad_fn)

    if mode == "stored":
        mean, var = stats if stats is not None else (state.mean, state.var)
        mean = np.asarray(mean, dtype=np.float32)
        var = np.asarray(var, dtype=np.float32)
        if mean.shape[0] != c or var.shape[0] != c:
            raise ValueError("statistics channel mismatch")
        inv = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(np.float32)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def grad_fn(g: np.ndarray):
            gg = gb = gx = None
            if gamma.requires_grad:
                gg = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            if beta.requires_grad:
                gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            if x.requires_grad:
                gx = g * (gamma.data * inv)[None, :, None, None]
            return gx, gg, gb

        return _result(out, "batch_norm", (x, gamma, beta), grad_fn)

    raise ValueError(f"unknown batch_norm mode {mode!r}")


def affine_modulate(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale-then-shift of NCHW features: gamma[c] * x + beta[c]."""
    if x.ndim != 4:
        raise ValueError("affine_modulate expects NCHW input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"modulation length mismatch: {gamma.shape[0] if gamma.ndim else 0} scales, "
            f"{beta.shape[0] if beta.ndim else 0} shifts, {c} channels"
        )
    out = gamma.data[None, :, None, None] * x.data + beta.data[None, :, None, None]

    def grad_fn(g: np.ndarray):
        gx = g * gamma.data[None, :, None, None] if x.requires_grad else None
        gg = (
            (g * x.data).sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            if gamma.requires_grad
            else None
        )
        gb = (
            g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            if beta.requires_grad
            else None
        )
        return gx, gg, gb

    return _result(out, "affine_modulate", (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# Prediction heads and losses
# ---------------------------------------------------------------------------


def _softmax(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True, dtype=np.float64)).astype(np.float32)


def _check_logits(logits: Tensor, op: str) -> None:
    if logits.ndim != 2:
        raise ValueError(f"{op} expects logits of shape (N, C)")
    if logits.shape[1] < 2:
        raise ValueError(f"{op} needs at least 2 classes, got {logits.shape[1]}")


def softmax_probs(logits: Tensor) -> Tensor:
    """Row-wise softmax computed with max-shift for stability."""
    _check_logits(logits, "softmax_probs")
    p = _softmax(logits.data)

    def grad_fn(g: np.ndarray):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _result(p, "softmax_probs", (logits,), grad_fn)


def entropy_loss(logits: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the softmax predictions over the batch."""
    _check_logits(logits, "entropy_loss")
    n = logits.shape[0]
    if n == 0:
        raise ValueError("entropy_loss needs a non-empty batch")
    p = _softmax(logits.data)
    logp = np.log(np.maximum(p, PROB_FLOOR))
    h_rows = -(p.astype(np.float64) * logp).sum(axis=1)
    loss = np.float32(h_rows.mean())

    def grad_fn(g: np.ndarray):
        scale = float(g) / n
        gz = -p * (logp + h_rows[:, None].astype(np.float32)) * scale
        return (gz.astype(np.float32, copy=False),)

    return _result(loss, "entropy_loss", (logits,), grad_fn)


def cross_entropy_loss(
    logits: Tensor, labels: np.ndarray, sample_mask: np.ndarray | None = None
) -> Tensor:
    """Mean negative log-probability of the labelled class.

    With `sample_mask` (0/1 per example) the mean runs over the selected
    examples only; an all-zero mask is an error (callers skip such batches).
    """
    _check_logits(logits, "cross_entropy_loss")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    if n == 0:
        raise ValueError("cross_entropy_loss needs a non-empty batch")
    if sample_mask is None:
        mask = np.ones(n, dtype=np.float32)
    else:
        mask = np.asarray(sample_mask, dtype=np.float32)
        if mask.shape != (n,):
            raise ValueError("sample_mask must have one entry per example")
    count = float(mask.sum(dtype=np.float64))
    if count == 0:
        raise ValueError("sample_mask selects no examples")

    p = _softmax(logits.data)
    rows = np.arange(n)
    nll = -np.log(np.maximum(p[rows, labels], PROB_FLOOR))
    loss = np.float32(float((nll.astype(np.float64) * mask).sum() / count))

    def grad_fn(g: np.ndarray):
        gz = p.copy()
        gz[rows, labels] -= 1.0
        gz *= (mask * (float(g) / count))[:, None]
        return (gz.astype(np.float32, copy=False),)

    return _result(loss, "cross_entropy_loss", (logits,), grad_fn)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    step: float = 1e-3,
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate of `f` at `params`, per coordinate.

    `f` receives plain float32 arrays and returns a scalar. The divisor uses
    the actually-representable perturbed values, which removes the input
    rounding error of float32 storage.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {name: np.array(v, dtype=np.float32) for name, v in params.items()}
    grads: dict[str, np.ndarray] = {}
    for name, value in base.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = np.float32(orig + step)
            hi_x = float(flat[i])
            hi = float(f(base))
            flat[i] = np.float32(orig - step)
            lo_x = float(flat[i])
            lo = float(f(base))
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NonFiniteError(f"non-finite evaluation while probing {name!r}[{i}]")
            gflat[i] = (hi - lo) / (hi_x - lo_x)
        grads[name] = g
    return grads
