"""Shared oracles for the test-suite."""
import numpy as np

from mapfuse.tensor import Tensor


def gradcheck(fn, inputs, seed=0, h=1e-3):
    """Norm-wise relative error between analytic and central-difference gradients.

    ``fn`` maps a list of Tensors to one output Tensor.  The scalar objective
    is ``sum(out * r)`` for a fixed random ``r``; returns the worst error over
    all inputs.
    """
    arrays = [np.asarray(a, dtype=np.float32) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(tensors)
    r = np.random.default_rng(seed).uniform(-1, 1, out.shape).astype(np.float32)
    out.backward(r)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def objective(vals):
        o = fn([Tensor(v) for v in vals]).data
        return float(np.sum(o.astype(np.float64) * r))

    worst = 0.0
    for i, a in enumerate(arrays):
        numeric = np.zeros(a.shape, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            # the perturbation actually applied after float32 rounding
            step = float(plus[i][idx]) - float(minus[i][idx])
            numeric[idx] = (objective(plus) - objective(minus)) / step
        num = np.linalg.norm(numeric - analytic[i])
        den = max(np.linalg.norm(numeric), np.linalg.norm(analytic[i]), 1e-8)
        worst = max(worst, num / den)
    return worst


def brute_signed_distance(mask, tau):
    """O(N^2) signed distance: inside pixels measure to the nearest outside
    pixel (grid border counts as outside), outside pixels to the nearest inside one."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.empty((h, w), dtype=np.float64)
    padded = np.pad(mask, 1, constant_values=False)
    py, px = np.nonzero(~padded)
    py, px = py - 1, px - 1
    iy, ix = np.nonzero(mask)
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                d = np.sqrt(((py - y) ** 2 + (px - x) ** 2).min())
            elif iy.size:
                d = -np.sqrt(((iy - y) ** 2 + (ix - x) ** 2).min())
            else:
                d = -np.inf
            out[y, x] = d
    return np.clip(out, -tau, tau) / tau


def brute_erode(labels, radius, undefined=255):
    labels = np.asarray(labels)
    h, w = labels.shape
    out = labels.copy()
    r = int(np.floor(radius))
    for y in range(h):
        for x in range(w):
            c = labels[y, x]
            if c == undefined:
                continue
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy, xx = y + dy, x + dx
                    if dy * dy + dx * dx > radius * radius or not (0 <= yy < h and 0 <= xx < w):
                        continue
                    other = labels[yy, xx]
                    if other != undefined and other != c:
                        out[y, x] = undefined
    return out


def brute_counts(pred, ref, k, undefined=255):
    """Per-class (tp, reference count, predicted count) and correct/total by pixel loop."""
    tp, cref, cpred = [0] * k, [0] * k, [0] * k
    correct = total = 0
    for p, r in zip(np.asarray(pred).ravel(), np.asarray(ref).ravel()):
        if r == undefined:
            continue
        total += 1
        cref[r] += 1
        cpred[p] += 1
        if p == r:
            tp[r] += 1
            correct += 1
    return tp, cref, cpred, correct, total


def zero_parameters(module):
    for p in module.parameters():
        p.data[...] = 0
