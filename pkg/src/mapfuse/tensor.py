"""Dense float32 tensors with tape-based reverse-mode differentiation.

Only the handful of operations needed by the segmentation networks are
provided.  Every op takes and returns :class:`Tensor` objects laid out as
NCHW; gradients flow back through closures recorded on the output tensor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CorruptionError, DimensionError, LabelError, NumericError

FLOAT = np.float32


class Tensor:
    """N-dimensional float32 array that can take part in backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=FLOAT, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default 1 for scalars) to every upstream leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without grad needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=FLOAT)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in order:
            if node._backward is None and node.grad is not None:
                _check_finite(node.grad, "gradient")


class Parameter(Tensor):
    """Trainable tensor with a name and a learning-rate multiplier."""

    __slots__ = ("lr_scale",)

    def __init__(self, data, name: str, lr_scale: float = 1.0):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.lr_scale = lr_scale


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIkk kernel.

    The padded input is flattened to one (rows, C) buffer; each kernel tap
    is then a contiguous row offset into it, so the convolution becomes k*k
    GEMMs without materialising an im2col matrix.  Outputs computed at
    positions that straddle the padding are discarded.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIkk weight")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if i != c:
        raise DimensionError(f"input has {c} channels, weight expects {i}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError("kernel must be square and odd-sized")
    if bias is not None and bias.shape != (o,):
        raise DimensionError("bias must have one entry per output channel")
    k, p, s = kh, padding, stride
    hp, wp = h + 2 * p, w + 2 * p
    if hp < k or wp < k:
        raise DimensionError("kernel larger than padded input")
    full_h, full_w = hp - k + 1, wp - k + 1
    rows = n * hp * wp
    tail = (k - 1) * wp + (k - 1)

    flat = np.zeros((rows + tail, c), dtype=FLOAT)
    flat[:rows].reshape(n, hp, wp, c)[:, p:p + h, p:p + w, :] = x.data.transpose(0, 2, 3, 1)
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(k * k, c, o)
    offsets = [dy * wp + dx for dy in range(k) for dx in range(k)]

    acc = flat[0:rows] @ taps[0]
    for j in range(1, k * k):
        off = offsets[j]
        acc += flat[off:off + rows] @ taps[j]
    out = acc.reshape(n, hp, wp, o)[:, :full_h:s, :full_w:s, :].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]
    _check_finite(out, "conv2d output")

    def backward(g):
        gfull = np.zeros((n, hp, wp, o), dtype=FLOAT)
        gfull[:, :full_h:s, :full_w:s, :] = g.transpose(0, 2, 3, 1)
        gflat = gfull.reshape(rows, o)
        result = []
        if x.requires_grad:
            dflat = np.zeros((rows + tail, c), dtype=FLOAT)
            for j, off in enumerate(offsets):
                dflat[off:off + rows] += gflat @ taps[j].T
            dx = dflat[:rows].reshape(n, hp, wp, c)[:, p:p + h, p:p + w, :]
            result.append((x, np.ascontiguousarray(dx.transpose(0, 3, 1, 2))))
        if weight.requires_grad:
            dtaps = np.empty((k * k, c, o), dtype=FLOAT)
            for j, off in enumerate(offsets):
                dtaps[j] = flat[off:off + rows].T @ gflat
            dw = dtaps.reshape(k, k, c, o).transpose(3, 2, 0, 1)
            result.append((weight, np.ascontiguousarray(dw)))
        if bias is not None and bias.requires_grad:
            result.append((bias, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(FLOAT)))
        return result

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _make(out, parents, backward)


# ------------------------------------------------------------ elementwise ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, FLOAT(0))

    def backward(g):
        return [(x, g * mask)]

    return _make(out, [x], backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")

    def backward(g):
        return [(a, g), (b, g)]

    return _make(a.data + b.data, [a, b], backward)


def scale(x: Tensor, factor: float) -> Tensor:
    f = FLOAT(factor)

    def backward(g):
        return [(x, g * f)]

    return _make(x.data * f, [x], backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        parts = np.split(g, bounds[1:-1], axis=axis)
        return [(t, np.ascontiguousarray(part)) for t, part in zip(tensors, parts)]

    return _make(out, list(tensors), backward)


# ------------------------------------------------------------------- pooling


@dataclass(frozen=True)
class IndexMap:
    """Argmax positions of a 2x2 max pool.

    ``positions`` has the pooled shape (N, C, h, w) and stores the flat
    index ``row * W + col`` into the un-pooled H x W plane.
    """

    positions: np.ndarray
    in_hw: tuple[int, int]

    def __post_init__(self):
        h, w = self.in_hw
        pos = self.positions
        if pos.ndim != 4:
            raise CorruptionError("index map must be 4-D")
        if pos.size and (pos.min() < 0 or pos.max() >= h * w):
            raise CorruptionError("pool index outside the target grid")


def maxpool2x2_with_indices(x: Tensor) -> tuple[Tensor, IndexMap]:
    """2x2/stride-2 max pool; ties resolve to the lowest flat index."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    local = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho)[:, None] + local // 2
    cols = 2 * np.arange(wo)[None, :] + local % 2
    indices = IndexMap((rows * w + cols).astype(np.int64), (h, w))

    def backward(g):
        gw = np.zeros((n, c, ho, wo, 4), dtype=FLOAT)
        np.put_along_axis(gw, local[..., None], g[..., None], axis=-1)
        return [(x, np.ascontiguousarray(gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)))]

    return _make(np.ascontiguousarray(out), [x], backward), indices


def unpool_with_indices(x: Tensor, indices: IndexMap, out_hw: tuple[int, int] | None = None) -> Tensor:
    """Scatter pooled values back to their recorded positions, zeros elsewhere."""
    out_hw = tuple(out_hw) if out_hw is not None else indices.in_hw
    if out_hw != tuple(indices.in_hw):
        raise CorruptionError(f"indices were recorded for {indices.in_hw}, not {out_hw}")
    if indices.positions.shape != x.shape:
        raise CorruptionError("index map shape does not match pooled input")
    n, c = x.shape[:2]
    h, w = out_hw
    pos = indices.positions.reshape(n, c, -1)
    out = np.zeros((n, c, h * w), dtype=FLOAT)
    np.put_along_axis(out, pos, x.data.reshape(n, c, -1), axis=2)

    def backward(g):
        gathered = np.take_along_axis(g.reshape(n, c, h * w), pos, axis=2)
        return [(x, gathered.reshape(x.shape))]

    return _make(out.reshape(n, c, h, w), [x], backward)


# ---------------------------------------------------------------- batch norm


class RunningStats:
    """Per-channel running mean/variance for batch normalisation."""

    def __init__(self, channels: int, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=FLOAT)
        self.var = np.ones(channels, dtype=FLOAT)
        self.momentum = momentum


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
                training: bool = True, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,) or stats.mean.shape != (c,):
        raise DimensionError(f"batchnorm parameters do not match {c} channels")
    count = n * h * w
    if training:
        mean64 = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        centred = x.data.astype(np.float64) - mean64[None, :, None, None]
        var64 = np.mean(centred * centred, axis=(0, 2, 3))
        m = stats.momentum
        unbiased = var64 * count / max(count - 1, 1)
        stats.mean[:] = (1 - m) * stats.mean + m * mean64
        stats.var[:] = (1 - m) * stats.var + m * unbiased
        inv_std = (1.0 / np.sqrt(var64 + eps)).astype(FLOAT)
        xhat = (centred * (1.0 / np.sqrt(var64 + eps))[None, :, None, None]).astype(FLOAT)
    else:
        inv_std = (1.0 / np.sqrt(stats.var.astype(np.float64) + eps)).astype(FLOAT)
        xhat = (x.data - stats.mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        result = []
        if gamma.requires_grad:
            result.append((gamma, (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(FLOAT)))
        if beta.requires_grad:
            result.append((beta, g.sum(axis=(0, 2, 3), dtype=np.float64).astype(FLOAT)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), dtype=np.float64)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
                dx = (dxhat - (s1 / count).astype(FLOAT)[None, :, None, None]
                      - xhat * (s2 / count).astype(FLOAT)[None, :, None, None])
                dx *= inv_std[None, :, None, None]
            else:
                dx = dxhat * inv_std[None, :, None, None]
            result.append((x, dx))
        return result

    return _make(out, [x, gamma, beta], backward)


# ---------------------------------------------------------------------- loss


def softmax(scores: np.ndarray, axis: int = 1) -> np.ndarray:
    """Numerically stable softmax, computed in float64."""
    z = scores.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def masked_softmax_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_value: int = 255) -> Tensor:
    """Mean pixel-wise cross-entropy, skipping pixels equal to ``ignore_value``."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    labels = labels.astype(np.int64)
    valid = labels != ignore_value
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise LabelError(f"label {int(labels[bad][0])} outside 0..{k - 1}")
    count = int(valid.sum())
    if count == 0:
        def backward(g):
            return [(logits, np.zeros_like(logits.data))]

        return _make(np.zeros((), dtype=FLOAT), [logits], backward)

    z = logits.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    nll = (logsum - picked)[valid]
    loss = nll.sum() / count
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")

    def backward(g):
        prob = np.exp(z - logsum[:, None])
        onehot = np.zeros_like(prob)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (prob - onehot) * valid[:, None] * (float(np.asarray(g).reshape(-1)[0]) / count)
        return [(logits, grad.astype(FLOAT))]

    return _make(np.asarray(loss, dtype=FLOAT), [logits], backward)


# ------------------------------------------------------------------ resizing


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D linear interpolation matrix, half-pixel centres."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    scale_ = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale_ - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of an NCHW tensor (align_corners=False convention)."""
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise DimensionError("output size must be positive")
    h, w = x.shape[-2:]
    if (oh, ow) == (h, w):
        def backward(g):
            return [(x, g)]

        return _make(x.data.copy(), [x], backward)
    ry = _interp_matrix(h, oh).astype(FLOAT)
    rx = _interp_matrix(w, ow).astype(FLOAT)
    out = np.matmul(ry, x.data @ rx.T)

    def backward(g):
        return [(x, np.ascontiguousarray(np.matmul(ry.T, g) @ rx))]

    return _make(out, [x], backward)


def parameters_finite(params: Iterable[Parameter]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
