"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array (rank <= 3, row-major) together with an
optional gradient buffer.  Ops are module-level functions that build a
computation graph; calling ``backward()`` on a scalar result walks the
graph in reverse topological order and accumulates gradients into every
tensor that requires them.

Conventions:
  * float32 is the working precision for training/inference; gradient
    checking builds float64 graphs (pass dtype=np.float64 everywhere).
  * no broadcasting except where an op documents it (``add`` supports a
    per-row vector second operand; ``scale_rows``/``div_rows``/``div_cols``
    take per-row / per-column scalars).
  * ops with a reduction over the bag axis can request float64
    accumulation (``matmul(..., accumulate_f64=True)``) so that instance
    permutations perturb float32 results by at most an ulp.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/bench path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Array value plus gradient accumulator and backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} > 3 not supported (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- gradient plumbing ----------------------------------------------
    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self):
        """Reverse-mode pass from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        order = _topo_order(self)
        self._ensure_grad()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topo_order(root):
    """Iterative post-order DFS; graphs can be thousands of nodes deep."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _make_node(data, parents, backward):
    """Wrap an op result; skips graph bookkeeping when grads are off."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if t.requires_grad:
        t._ensure_grad()
        t.grad += g


def constant(data, dtype=np.float32):
    return Tensor(data, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, accumulate_f64: bool = False) -> Tensor:
    """2-D matrix product; dC/dA = dC @ B^T, dC/dB = A^T @ dC.

    accumulate_f64 runs the forward reduction in float64 and casts back,
    so the result is insensitive (≲1 ulp) to the summation order of the
    contracted axis.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if accumulate_f64 and a.dtype == np.float32:
        data = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(a.dtype)
    else:
        data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make_node(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs rank 2, got {a.shape}")

    def backward(g):
        _accum(a, g.T)

    return _make_node(a.data.T.copy(), (a,), backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a (C,) second operand added per row."""
    row_vec = b.data.ndim == 1 and a.data.ndim == 2 and a.shape[1] == b.shape[0]
    if not row_vec and a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0) if row_vec else g)

    return _make_node(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make_node(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make_node(a.data * c, (a,), backward)


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of ``a`` by scalar s[i]; s has shape (M,) or (M,1)."""
    sv = s.data.reshape(-1)
    if a.data.ndim != 2 or sv.shape[0] != a.shape[0]:
        raise ShapeError(f"scale_rows: {a.shape} with scalars {s.shape}")

    def backward(g):
        _accum(a, g * sv[:, None])
        _accum(s, (g * a.data).sum(axis=1).reshape(s.shape))

    return _make_node(a.data * sv[:, None], (a, s), backward)


def div_rows(a: Tensor, s: Tensor) -> Tensor:
    """Divide row i of ``a`` by scalar s[i] (s strictly nonzero)."""
    sv = s.data.reshape(-1)
    if a.data.ndim != 2 or sv.shape[0] != a.shape[0]:
        raise ShapeError(f"div_rows: {a.shape} with scalars {s.shape}")

    def backward(g):
        _accum(a, g / sv[:, None])
        _accum(s, (-(g * a.data).sum(axis=1) / (sv * sv)).reshape(s.shape))

    return _make_node(a.data / sv[:, None], (a, s), backward)


def div_cols(a: Tensor, s: Tensor) -> Tensor:
    """Divide column j of ``a`` by scalar s[j]."""
    sv = s.data.reshape(-1)
    if a.data.ndim != 2 or sv.shape[0] != a.shape[1]:
        raise ShapeError(f"div_cols: {a.shape} with scalars {s.shape}")

    def backward(g):
        _accum(a, g / sv[None, :])
        _accum(s, (-(g * a.data).sum(axis=0) / (sv * sv)).reshape(s.shape))

    return _make_node(a.data / sv[None, :], (a, s), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make_node(np.maximum(a.data, 0), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return _make_node(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _make_node(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _make_node(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    """Natural log; caller guarantees strictly positive input."""

    def backward(g):
        _accum(a, g / a.data)

    return _make_node(np.log(a.data), (a,), backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along ``axis``.

    The exp/sum runs in float64 so rows sum to 1 within 1e-6 even for
    float32 graphs, and so the result is stable under permutations of
    the reduced axis.
    """
    if axis >= a.data.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    x = a.data.astype(np.float64, copy=False)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _make_node(out, (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then apply a learnable affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    c = a.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    mean = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mean) * inv

    def backward(g):
        _accum(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
        _accum(beta, g.reshape(-1, c).sum(axis=0))
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (gx - m1 - xhat * m2))

    return _make_node(xhat * gamma.data + beta.data, (a, gamma, beta), backward)


def dropout(a: Tensor, rate: float, training: bool, rng) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        def backward(g):
            _accum(a, g)

        return _make_node(a.data.copy(), (a,), backward)
    draw_dtype = np.float32 if a.dtype == np.float32 else np.float64
    keep = (rng.random(a.shape, dtype=draw_dtype) >= rate).astype(a.dtype)
    factor = 1.0 / (1.0 - rate)

    def backward(g):
        _accum(a, g * keep * factor)

    return _make_node(a.data * keep * factor, (a,), backward)


# ---------------------------------------------------------------------------
# shape surgery
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _make_node(a.data.reshape(shape), (a,), backward)


def _concat(parts, axis):
    if not parts:
        raise ShapeError("concat of zero parts")
    lead = [p.shape[:axis] + p.shape[axis + 1:] for p in parts]
    if any(s != lead[0] for s in lead):
        raise ShapeError(f"concat shape mismatch off axis {axis}: {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)])

    return _make_node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def concat_last_axis(parts) -> Tensor:
    return _concat(list(parts), axis=parts[0].data.ndim - 1 if parts else -1)


def concat_rows(parts) -> Tensor:
    return _concat(list(parts), axis=0)


def slice_columns(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_columns [{start}:{stop}] of {a.shape}")

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad[:, start:stop] += g

    return _make_node(a.data[:, start:stop].copy(), (a,), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] of {a.shape}")

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            a.grad[start:stop] += g

    return _make_node(a.data[start:stop].copy(), (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index array; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            np.add.at(a.grad, idx, g)

    return _make_node(a.data[idx].copy(), (a,), backward)


def scatter_rows(a: Tensor, indices, num_rows: int) -> Tensor:
    """Place row k of ``a`` at row indices[k] of a zero (num_rows, C) result."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((num_rows, a.shape[1]), dtype=a.dtype)
    np.add.at(out, idx, a.data)

    def backward(g):
        _accum(a, g[idx])

    return _make_node(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is None:
            _accum(a, np.full_like(a.data, 1.0 / n) * g)
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis) if not keepdims else g,
                                      a.shape) / n)

    return _make_node(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def mean_rows(a: Tensor) -> Tensor:
    """Column means of a 2-D tensor, kept as a 1 x C row."""
    return reduce_mean(a, axis=0, keepdims=True)


def sum_rows(a: Tensor) -> Tensor:
    """Per-row sums of a 2-D tensor -> shape (M,)."""

    def backward(g):
        _accum(a, np.broadcast_to(g[:, None], a.shape))

    return _make_node(a.data.sum(axis=1), (a,), backward)


def sum_cols(a: Tensor) -> Tensor:
    """Per-column sums of a 2-D tensor -> shape (C,)."""

    def backward(g):
        _accum(a, np.broadcast_to(g[None, :], a.shape))

    return _make_node(a.data.sum(axis=0), (a,), backward)


def reduce_max_with_argmax(a: Tensor, axis: int):
    """Max along an axis plus the (non-differentiable) argmax indices.

    Backward routes the gradient only to the winning entries; ties pick
    the lowest index (numpy argmax convention).
    """
    arg = a.data.argmax(axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        if a.requires_grad:
            a._ensure_grad()
            buf = np.zeros_like(a.data)
            np.put_along_axis(buf, np.expand_dims(arg, axis),
                              np.expand_dims(g, axis), axis=axis)
            a.grad += buf

    return _make_node(out, (a,), backward), arg


def cross_entropy_with_logits(logits: Tensor, label: int) -> Tensor:
    """Scalar CE loss of a single (C,) or (1, C) logit vector vs a class id."""
    vec = logits.data.reshape(-1)
    c = int(label)
    if not 0 <= c < vec.shape[0]:
        raise ValueError(f"label {c} out of range for {vec.shape[0]} classes")
    m = vec.max()
    lse = m + np.log(np.exp(vec - m).sum())
    loss = np.asarray(lse - vec[c], dtype=logits.dtype)

    def backward(g):
        p = np.exp(vec - lse)
        p[c] -= 1.0
        _accum(logits, (p * float(g)).reshape(logits.shape).astype(logits.dtype))

    return _make_node(loss, (logits,), backward)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

def numeric_grad_entry(f, t: Tensor, flat_index: int, h: float = 1e-5) -> float:
    """Central difference of scalar f() w.r.t. one entry of t."""
    flat = t.data.reshape(-1)
    orig = flat[flat_index]
    flat[flat_index] = orig + h
    fp = float(f().data)
    flat[flat_index] = orig - h
    fm = float(f().data)
    flat[flat_index] = orig
    return (fp - fm) / (2.0 * h)


def check_gradients(f, tensors, h: float = 1e-5, samples: int = 20, rng=None) -> float:
    """Compare analytic gradients of scalar f() against central differences.

    Samples up to ``samples`` entries per tensor and returns the max
    relative error.  Tensors should be float64 for the 1e-4 tolerance to
    be meaningful.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.zero_grad()
    f().backward()
    worst = 0.0
    for t in tensors:
        n = t.data.size
        picks = range(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        for i in picks:
            num = numeric_grad_entry(f, t, int(i), h)
            ana = float(t.grad.reshape(-1)[int(i)])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
            worst = max(worst, err)
    return worst
