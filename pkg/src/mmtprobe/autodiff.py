"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The design is a recording tape: while a `Tape` is active, every operation
appends one entry (inputs, output, backward rule) in execution order, which
is automatically a topological order.  `backward` walks the tape once in
reverse and accumulates gradients into the `.grad` buffers of the
`requires_grad` leaves.

Without an active tape the same functions are plain numpy computations, so
evaluation-mode inference records nothing and is safe to run concurrently
over disjoint inputs.

Only the rank patterns the translation model needs are supported, and
broadcasting is deliberately narrow (trailing-suffix or leading-1
expansion) so every backward rule stays auditable.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError, TapeError

# When True, every forward op asserts its output is finite. Slow; meant for
# tests and debugging (MMT_PROBE_LOG=debug turns it on in the CLI).
FINITE_CHECKS = False

LAYER_NORM_EPS = 1e-5


class Tensor:
    """Dense real-valued n-d array, optionally participating in a tape.

    data is always a contiguous float32 or float64 numpy array; grad, when
    populated, has the same shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if arr.dtype == np.int64 else np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: never reached for 0-d
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    # Operator sugar; every path goes through the module-level ops so the
    # tape sees a single implementation of each rule.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of operations for one reverse pass.

    Entries are appended in execution order, so every operation appears
    after the producers of all its inputs.  backward() may be called once;
    a second call without a fresh tape raises TapeError.
    """

    def __init__(self):
        self.entries: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out: Tensor, inputs: tuple, backward_fn):
        out.requires_grad = True
        out._tape = self
        self.entries.append(_Node(out, inputs, backward_fn))

    def backward(self, loss: Tensor):
        """Populate .grad of every requires_grad leaf reachable from loss."""
        if self.consumed:
            raise TapeError("backward already ran on this tape; build a new tape")
        if loss.data.size != 1:
            raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        produced = {id(node.out) for node in self.entries}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # One reverse sweep; each node visited exactly once.
        for node in reversed(self.entries):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for t, ig in zip(node.inputs, input_grads):
                if ig is None or not isinstance(t, Tensor):
                    continue
                if not t.requires_grad:
                    continue
                if id(t) in produced:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
                else:
                    # Leaf: accumulate into the persistent grad buffer.
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += ig.astype(t.data.dtype, copy=False)


def backward(loss: Tensor):
    """Reverse pass for a scalar produced on a tape (see Tape.backward)."""
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise TapeError("backward called on a tensor with no recording tape")
    loss._tape.backward(loss)


class DropoutRng:
    """Counter-based RNG for dropout masks.

    Each call derives an independent Philox stream from (seed, stream,
    call index), so identical seeds and call orders reproduce identical
    masks with no sequential state shared across steps.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.calls = 0

    def next_mask(self, shape, p: float, dtype) -> np.ndarray:
        bitgen = np.random.Philox(key=self.seed, counter=[self.calls, self.stream, 0, 0])
        self.calls += 1
        u = np.random.Generator(bitgen).random(shape, dtype=np.float32)
        mask = (u >= p).astype(dtype)
        mask *= 1.0 / (1.0 - p)
        return mask


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _record(out_data, inputs, backward_fn) -> Tensor:
    if FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise ContractError("non-finite values produced by a forward operation")
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _check_broadcast(sa: tuple, sb: tuple):
    """Allow equal shapes, trailing-suffix expansion, or leading-1 expansion.

    After left-padding with 1s, every axis one operand expands along must
    precede that operand's first non-1 axis; middle-axis expansion (e.g.
    [B,1,d] against [B,L,d]) is rejected to keep backward rules simple.
    """
    if sa == sb:
        return
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + sa
    pb = (1,) * (n - len(sb)) + sb
    for x, y in zip(pa, pb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible")
    for mine, other in ((pa, pb), (pb, pa)):
        non_one = [i for i in range(n) if mine[i] != 1]
        first_real = non_one[0] if non_one else n
        for i in range(n):
            if mine[i] == 1 and other[i] != 1 and i > first_real:
                raise ShapeError(
                    f"broadcast of {sa} with {sb} expands a non-leading axis; "
                    "only trailing-suffix or leading-1 expansion is supported"
                )


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def bwd(g):
        return _sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _record(out, (a,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), bwd)


def dropout(x: Tensor, p: float, rng: DropoutRng | None, train: bool) -> Tensor:
    """Zero entries with probability p and rescale survivors by 1/(1-p).

    Evaluation mode (train=False) is the identity and records nothing.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode requires a DropoutRng")
    mask = rng.next_mask(x.shape, p, x.data.dtype)
    out = x.data * mask

    def bwd(g):
        return (g * mask,)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = np.ascontiguousarray(x.data).reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), bwd)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _record(out, (x,), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _record(out, (x,), bwd)


def take_rows(x: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table; ids may have any shape.

    Output shape is ids.shape + (row_dim,). This doubles as the embedding
    lookup; the backward rule scatter-adds into the table gradient.
    """
    if x.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-d table, got shape {x.shape}")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[0]):
        raise IndexError(
            f"row index out of range: ids in [{ids.min()}, {ids.max()}] "
            f"for a table with {x.shape[0]} rows"
        )
    out = x.data[ids]

    def bwd(g):
        gt = np.zeros_like(x.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, x.shape[1]))
        return (gt,)

    return _record(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=x.data.dtype))

    def bwd(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2d @ 2d, 3d @ 3d (same batch), or 3d @ 2d."""
    sa, sb = a.shape, b.shape
    if a.ndim == 2 and b.ndim == 2:
        if sa[1] != sb[0]:
            raise ShapeError(f"matmul inner dimensions disagree: {sa} @ {sb}")
        out = a.data @ b.data

        def bwd(g):
            return g @ b.data.T, a.data.T @ g

    elif a.ndim == 3 and b.ndim == 3:
        if sa[0] != sb[0] or sa[2] != sb[1]:
            raise ShapeError(f"batched matmul shapes disagree: {sa} @ {sb}")
        out = a.data @ b.data

        def bwd(g):
            return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    elif a.ndim == 3 and b.ndim == 2:
        if sa[2] != sb[0]:
            raise ShapeError(f"matmul inner dimensions disagree: {sa} @ {sb}")
        out = a.data @ b.data

        def bwd(g):
            da = g @ b.data.T
            db = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
            return da, db

    else:
        raise ShapeError(f"unsupported matmul ranks: {sa} @ {sb}")
    return _record(out, (a, b), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Probability distribution along the last axis, with max-subtraction."""
    d = x.data
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        # Standard layer-norm backward, fused form.
        dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), bwd)


def cross_entropy_label_smoothed(
    logits: Tensor, targets: np.ndarray, smoothing: float, pad_id: int
) -> Tensor:
    """Mean smoothed negative log-likelihood over non-pad positions.

    The target class gets weight 1-smoothing; the remaining mass is spread
    uniformly over the other V-1 classes. Positions whose target equals
    pad_id contribute nothing.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"label smoothing must be in [0, 1), got {smoothing}")
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    t = np.asarray(targets).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(
            f"targets of shape {np.asarray(targets).shape} do not match logits {logits.shape}"
        )
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise IndexError(f"target id out of range: max {t.max()} for vocab size {vocab}")

    nonpad = t != pad_id
    count = int(nonpad.sum())
    if count == 0:
        raise ContractError("cross entropy over a batch with no non-pad targets")

    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(flat.shape[0])
    lp_target = logp[rows, t]
    if vocab > 1:
        off_weight = smoothing / (vocab - 1)
    else:
        off_weight = 0.0
    nll = -((1.0 - smoothing) * lp_target + off_weight * (logp.sum(axis=-1) - lp_target))
    loss = np.asarray((nll * nonpad).sum() / count, dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(logp)
        q = np.full_like(p, off_weight)
        q[rows, t] = 1.0 - smoothing
        dflat = (p - q) * (np.asarray(g).reshape(()) / count)
        dflat[~nonpad] = 0.0
        return (dflat.reshape(logits.shape).astype(logits.data.dtype),)

    return _record(loss, (logits,), bwd)
