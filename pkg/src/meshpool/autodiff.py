"""Minimal reverse-mode autodiff over dense float64 arrays.

Only the operations the pooling networks need: matmul, bias add, ReLU,
transpose, concat, cluster max/mean pooling, scatter, global pooling and a
log-sum-exp-stable softmax cross-entropy. Forward results are recorded on an
explicit tape; ``Tape.backward`` replays the records in exact reverse
execution order and accumulates gradients additively at fan-out points.
All reductions have a fixed order, so identical inputs give bit-identical
outputs.
"""

from __future__ import annotations

import numpy as np

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """When on, every forward op asserts its output is finite."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A dense float64 array plus a gradient slot filled during backward."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter:
    """Trainable tensor with persistent gradient and Adam state.

    The gradient buffer survives across tapes, so backward passes for
    several meshes accumulate into it until ``adam_step`` consumes and
    zeroes it.
    """

    __slots__ = ("value", "m", "v", "step")

    def __init__(self, data):
        self.value = Tensor(np.array(data, dtype=np.float64))
        self.value.grad = np.zeros_like(self.value.data)
        self.m = np.zeros_like(self.value.data)
        self.v = np.zeros_like(self.value.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad[...] = 0.0


def adam_step(param: Parameter, lr=7e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One Adam update with bias correction; zeroes the gradient afterwards."""
    param.step += 1
    g = param.value.grad
    param.m = beta1 * param.m + (1.0 - beta1) * g
    param.v = beta2 * param.v + (1.0 - beta2) * g * g
    m_hat = param.m / (1.0 - beta1**param.step)
    v_hat = param.v / (1.0 - beta2**param.step)
    param.value.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    param.zero_grad()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check(out: np.ndarray) -> np.ndarray:
    if _DEBUG_CHECKS and not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value produced by a forward op")
    return out


class Tape:
    """Ordered record of executed ops; one backward pass per tape."""

    def __init__(self):
        self._records = []  # (output tensor, backward closure)

    def _emit(self, data, backward) -> Tensor:
        out = Tensor(_check(data))
        self._records.append((out, backward))
        return out

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Accumulate d(seed * loss)/dx into every tensor on the tape."""
        loss.grad = np.full_like(loss.data, float(seed))
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)

    # ---- ops ----------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"matmul shapes {a.data.shape} x {b.data.shape}")

        def backward(g):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)

        return self._emit(a.data @ b.data, backward)

    def transpose(self, x: Tensor) -> Tensor:
        def backward(g):
            _accumulate(x, g.T)

        return self._emit(x.data.T.copy(), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ValueError(f"add shapes {a.data.shape} vs {b.data.shape}")

        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return self._emit(a.data + b.data, backward)

    def scale(self, x: Tensor, s: float) -> Tensor:
        s = float(s)

        def backward(g):
            _accumulate(x, g * s)

        return self._emit(x.data * s, backward)

    def bias_add(self, x: Tensor, b: Tensor) -> Tensor:
        if b.data.ndim != 1 or x.data.ndim != 2 or x.data.shape[1] != b.data.shape[0]:
            raise ValueError(f"bias_add shapes {x.data.shape} + {b.data.shape}")

        def backward(g):
            _accumulate(x, g)
            _accumulate(b, g.sum(axis=0))

        return self._emit(x.data + b.data[None, :], backward)

    def relu(self, x: Tensor) -> Tensor:
        mask = x.data > 0.0  # subgradient at 0 is 0

        def backward(g):
            _accumulate(x, g * mask)

        return self._emit(np.where(mask, x.data, 0.0), backward)

    def concat(self, parts, axis: int = 1) -> Tensor:
        parts = list(parts)
        if not parts:
            raise ValueError("concat of nothing")
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            for p, piece in zip(parts, np.split(g, splits, axis=axis)):
                _accumulate(p, piece)

        return self._emit(np.concatenate([p.data for p in parts], axis=axis), backward)

    def cluster_max_pool(self, x: Tensor, mask: np.ndarray, p: int) -> Tensor:
        """Columnwise max over each cluster's rows.

        The gradient routes to the argmax row of each (cluster, column);
        ties break to the lowest vertex index.
        """
        mask = _check_mask(mask, x.data.shape[0], p)
        out = np.empty((p, x.data.shape[1]))
        argmax = np.empty((p, x.data.shape[1]), dtype=np.int64)
        for j in range(p):
            rows = np.flatnonzero(mask == j)
            block = x.data[rows]
            out[j] = block.max(axis=0)
            argmax[j] = rows[np.argmax(block, axis=0)]
        cols = np.broadcast_to(np.arange(x.data.shape[1]), argmax.shape)

        def backward(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (argmax, cols), g)
            _accumulate(x, gx)

        return self._emit(out, backward)

    def cluster_mean_pool(self, x: Tensor, mask: np.ndarray, p: int) -> Tensor:
        mask = _check_mask(mask, x.data.shape[0], p)
        counts = np.bincount(mask, minlength=p).astype(np.float64)
        out = np.zeros((p, x.data.shape[1]))
        np.add.at(out, mask, x.data)
        out /= counts[:, None]

        def backward(g):
            _accumulate(x, (g / counts[:, None])[mask])

        return self._emit(out, backward)

    def cluster_scatter(self, cx: Tensor, mask: np.ndarray) -> Tensor:
        """Row i of the output is the cluster feature of mask[i]."""
        p = cx.data.shape[0]
        mask = np.asarray(mask, dtype=np.int64)
        if mask.ndim != 1:
            raise ValueError("mask must be 1-D")
        if len(mask) and (mask.min() < 0 or mask.max() >= p):
            raise ValueError("mask id out of range")

        def backward(g):
            gc = np.zeros_like(cx.data)
            np.add.at(gc, mask, g)
            _accumulate(cx, gc)

        return self._emit(cx.data[mask], backward)

    def global_max_pool(self, x: Tensor) -> Tensor:
        return self.cluster_max_pool(x, np.zeros(x.data.shape[0], dtype=np.int64), 1)

    def softmax_cross_entropy(self, logits: Tensor, target_onehot) -> Tensor:
        """Mean over rows of the cross entropy between softmax(logits) and
        the one-hot targets; numerically stable via the log-sum-exp shift."""
        y = np.asarray(target_onehot, dtype=np.float64)
        z = logits.data
        if y.shape != z.shape:
            raise ValueError(f"target shape {y.shape} vs logits {z.shape}")
        rows = len(z)
        row_sums = y.sum(axis=1)
        if not (np.all((y == 0.0) | (y == 1.0)) and np.all(row_sums == 1.0)):
            raise ValueError("targets must be one-hot rows")
        shifted = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - lse
        loss = -(y * log_probs).sum() / rows
        softmax = np.exp(log_probs)

        def backward(g):
            _accumulate(logits, (g / rows) * (softmax - y))

        return self._emit(loss, backward)


def _check_mask(mask, n: int, p: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.shape != (n,):
        raise ValueError(f"mask length {mask.shape} does not match {n} rows")
    counts = np.bincount(mask[(mask >= 0) & (mask < p)], minlength=p)
    if mask.min() < 0 or mask.max() >= p:
        raise ValueError("mask id out of range")
    if np.any(counts == 0):
        raise ValueError("empty cluster id in mask")
    return mask
