"""Dense tensor arithmetic with reverse-mode autodiff on an explicit tape.

Tensors wrap numpy arrays. Operations record themselves on the tape of
their operands (if any); tensors without a tape are constants and the same
ops then run as plain numpy, which is how inference works. One tape is
built per training example or batch and discarded after ``backward``.

Precision is a module-level switch: float32 by default (training),
float64 inside the :func:`precision` context (gradient checking).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "precision",
    "default_dtype",
    "matmul",
    "matmul_t",
    "affine",
    "elementwise",
    "add",
    "mul",
    "tanh",
    "sigmoid",
    "scale",
    "softmax",
    "log_softmax",
    "pick_neg_log_prob",
    "smoothed_nll",
    "concat",
    "narrow",
    "reshape",
    "transpose",
    "rows",
    "repeat_rows",
    "mean_rows",
    "stack_rows",
    "stack_steps",
    "context_mix",
    "sum_all",
    "grad_check",
]

_DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default dtype ("float32" or "float64")."""
    global _DEFAULT_DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported precision {name!r}")
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(name).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    """A dense array, optionally recorded as a node on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        where = "const" if self.tape is None else f"node {self.node}"
        return f"Tensor(shape={self.shape}, {where})"

    # Operator sugar; dispatches to the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def t(self):
        return transpose(self)

    def reshape(self, shape):
        return reshape(self, shape)


class Parameter:
    """A learned tensor with a persistent gradient accumulator."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data):
        self.name = name
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self):
        self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Op:
    __slots__ = ("out", "inputs", "name")

    def __init__(self, out: int, inputs: list, name: str):
        self.out = out
        self.inputs = inputs  # list of (node_id, fn: grad_out -> grad_in)
        self.name = name


class Tape:
    """Ordered record of operations for one forward pass.

    Node ids increase as the graph is built, so the op list is
    topologically sorted and a single reverse sweep backpropagates with
    each op visited exactly once.
    """

    def __init__(self):
        self.ops: list[_Op] = []
        self._leaves: dict[int, Parameter] = {}
        self._leaf_cache: dict[int, Tensor] = {}
        self._n_nodes = 0
        self._grads: list | None = None

    def _new_node(self) -> int:
        node = self._n_nodes
        self._n_nodes += 1
        return node

    def leaf(self, param: Parameter) -> Tensor:
        """Enter a parameter into the graph (cached per parameter)."""
        cached = self._leaf_cache.get(id(param))
        if cached is not None:
            return cached
        t = Tensor(param.data, self, self._new_node())
        t.data = param.data  # keep the exact array, no copy/cast
        self._leaves[t.node] = param
        self._leaf_cache[id(param)] = t
        return t

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(param) into every reachable Parameter."""
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list = [None] * self._n_nodes
        grads[loss.node] = np.ones((), dtype=loss.data.dtype)
        for op in reversed(self.ops):
            g = grads[op.out]
            if g is None:
                continue
            for node, fn in op.inputs:
                contrib = fn(g)
                prev = grads[node]
                grads[node] = contrib if prev is None else prev + contrib
        for node, param in self._leaves.items():
            if grads[node] is not None:
                param.grad += grads[node]
        self._grads = grads

    def grad_of(self, t: Tensor):
        """Gradient w.r.t. an intermediate tensor from the last backward."""
        if self._grads is None or t.node is None:
            return None
        return self._grads[t.node]


def lift(tape: Tape | None, param: Parameter) -> Tensor:
    """Parameter as a graph leaf, or as a constant when tape is None."""
    if tape is None:
        return Tensor(param.data)
    return tape.leaf(param)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _result(name: str, data, pairs: Iterable[tuple[Tensor, Callable]]) -> Tensor:
    """Build the output tensor, recording backward rules for taped inputs."""
    pairs = list(pairs)
    tape = _tape_of(*(t for t, _ in pairs))
    out = Tensor(data)
    out.data = data  # already the right dtype; skip the asarray copy
    if tape is not None:
        out.tape = tape
        out.node = tape._new_node()
        inputs = [(t.node, fn) for t, fn in pairs if t.tape is not None]
        tape.ops.append(_Op(out.node, inputs, name))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: [m,k]x[k,n] -> [m,n], or [m,k]x[k] -> [m]."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {ad.shape} x {bd.shape}")
    out = ad @ bd
    if bd.ndim == 2:
        pairs = [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)]
    else:
        pairs = [(a, lambda g: np.outer(g, bd)), (b, lambda g: ad.T @ g)]
    return _result("matmul", out, pairs)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose: [m,k]x[n,k] -> [m,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[1]:
        raise ShapeError(f"matmul_t shapes incompatible: {ad.shape} x {bd.shape}^T")
    out = ad @ bd.T
    return _result("matmul_t", out, [(a, lambda g: g @ bd), (b, lambda g: g.T @ ad)])


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for a vector x; rows of x through w for a matrix x."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xd, wd, bd = x.data, w.data, b.data
    if wd.ndim != 2 or bd.shape != (wd.shape[0],):
        raise ShapeError(f"affine weight/bias shapes incompatible: {wd.shape}, {bd.shape}")
    if xd.ndim == 1:
        if xd.shape[0] != wd.shape[1]:
            raise ShapeError(f"affine input {xd.shape} does not match weight {wd.shape}")
        out = wd @ xd + bd
        pairs = [
            (x, lambda g: wd.T @ g),
            (w, lambda g: np.outer(g, xd)),
            (b, lambda g: g),
        ]
    elif xd.ndim == 2:
        if xd.shape[1] != wd.shape[1]:
            raise ShapeError(f"affine input {xd.shape} does not match weight {wd.shape}")
        out = xd @ wd.T + bd
        pairs = [
            (x, lambda g: g @ wd),
            (w, lambda g: g.T @ xd),
            (b, lambda g: g.sum(axis=0)),
        ]
    else:
        raise ShapeError(f"affine input must be 1-D or 2-D, got {xd.shape}")
    return _result("affine", out, pairs)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    """Elementwise sum; also matrix + row-vector (bias broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        pairs = [(a, lambda g: g), (b, lambda g: g)]
    elif ad.ndim == 2 and bd.shape == (ad.shape[1],):
        pairs = [(a, lambda g: g), (b, lambda g: g.sum(axis=0))]
    elif bd.ndim == 2 and ad.shape == (bd.shape[1],):
        pairs = [(a, lambda g: g.sum(axis=0)), (b, lambda g: g)]
    elif bd.shape == ():
        pairs = [(a, lambda g: g), (b, lambda g: g.sum())]
    elif ad.shape == ():
        pairs = [(a, lambda g: g.sum()), (b, lambda g: g)]
    else:
        raise ShapeError(f"add shapes incompatible: {ad.shape} + {bd.shape}")
    return _result("add", ad + bd, pairs)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors or by a scalar."""
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scale(_as_tensor(a), float(b))
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return scale(_as_tensor(b), float(a))
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        raise ShapeError(f"mul shapes incompatible: {ad.shape} * {bd.shape}")
    return _result("mul", ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = x.data.dtype.type(c)
    return _result("scale", x.data * c, [(x, lambda g: g * c)])


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _result("tanh", y, [(x, lambda g: g * (1.0 - y * y))])


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # tanh form avoids exp overflow for large negative inputs
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result("sigmoid", y, [(x, lambda g: g * y * (1.0 - y))])


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "add": add, "mul": mul}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch over the pointwise op family: tanh, sigmoid, add, mul."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    x = _as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bk(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - dot)

    return _result("softmax", y, [(x, bk)])


def log_softmax(x: Tensor) -> Tensor:
    """log(softmax(x)) over the last axis, computed in the log domain."""
    x = _as_tensor(x)
    if x.data.size == 0:
        raise ShapeError("log_softmax of an empty tensor")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bk(g):
        return g - np.exp(y) * g.sum(axis=-1, keepdims=True)

    return _result("log_softmax", y, [(x, bk)])


def pick_neg_log_prob(log_probs: Tensor, index: int) -> Tensor:
    """-log_probs[index] as a scalar; gradient flows to that coordinate."""
    log_probs = _as_tensor(log_probs)
    lp = log_probs.data
    if lp.ndim != 1:
        raise ShapeError(f"pick_neg_log_prob expects a vector, got {lp.shape}")
    if not 0 <= index < lp.shape[0]:
        raise IndexError(f"index {index} out of range for {lp.shape[0]} classes")

    def bk(g):
        d = np.zeros_like(lp)
        d[index] = -g
        return d

    return _result("pick_nll", np.asarray(-lp[index]), [(log_probs, bk)])


def smoothed_nll(
    log_probs: Tensor,
    golds,
    eps: float = 0.0,
    exclude: int | None = None,
    mask=None,
) -> Tensor:
    """Summed label-smoothed negative log-likelihood over a batch of rows.

    ``log_probs`` is [B, V]; ``golds`` the gold class per row. The smoothed
    target mixes (1-eps) on the gold class with eps spread uniformly over
    the classes minus ``exclude`` (the padding class, typically). ``mask``
    weights each row's contribution (0 drops padded rows).
    """
    log_probs = _as_tensor(log_probs)
    lp = log_probs.data
    if lp.ndim != 2:
        raise ShapeError(f"smoothed_nll expects [B, V] log-probs, got {lp.shape}")
    nrows, nclasses = lp.shape
    golds = np.asarray(golds, dtype=np.int64)
    if golds.shape != (nrows,):
        raise ShapeError(f"golds shape {golds.shape} does not match {nrows} rows")
    if np.any(golds < 0) or np.any(golds >= nclasses):
        raise IndexError("gold index out of range")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing coefficient must be in [0, 1), got {eps}")
    weights = np.ones(nrows, dtype=lp.dtype) if mask is None else np.asarray(mask, dtype=lp.dtype)

    rows_idx = np.arange(nrows)
    per_row = -(1.0 - eps) * lp[rows_idx, golds]
    if eps > 0.0:
        support = nclasses - (1 if exclude is not None else 0)
        smooth = lp.sum(axis=1)
        if exclude is not None:
            smooth = smooth - lp[:, exclude]
        per_row = per_row - (eps / support) * smooth
    total = np.asarray((per_row * weights).sum(), dtype=lp.dtype)

    def bk(g):
        coef = g * weights
        d = np.zeros_like(lp)
        if eps > 0.0:
            d += (-eps / support) * coef[:, None]
            if exclude is not None:
                d[:, exclude] = 0.0
        d[rows_idx, golds] += -(1.0 - eps) * coef
        return d

    return _result("smoothed_nll", total, [(log_probs, bk)])


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_bk(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _result("concat", out, [(t, make_bk(i)) for i, t in enumerate(tensors)])


def narrow(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice along one axis."""
    x = _as_tensor(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + size)
    sl = tuple(sl)

    def bk(g):
        d = np.zeros_like(x.data)
        d[sl] = g
        return d

    return _result("narrow", x.data[sl].copy(), [(x, bk)])


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    orig = x.data.shape
    return _result("reshape", x.data.reshape(shape), [(x, lambda g: g.reshape(orig))])


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.data.shape}")
    return _result("transpose", x.data.T.copy(), [(x, lambda g: g.T)])


def rows(x: Tensor, ids) -> Tensor:
    """Gather rows by index; gradient scatter-adds into the source rows."""
    x = _as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"rows expects a matrix, got {x.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.data.shape[0]):
        raise IndexError(f"row index out of range for {x.data.shape[0]} rows")

    def bk(g):
        d = np.zeros_like(x.data)
        np.add.at(d, ids, g)
        return d

    return _result("rows", x.data[ids], [(x, bk)])


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each row k times: [B, d] -> [B*k, d]."""
    x = _as_tensor(x)
    b, d = x.data.shape
    return _result(
        "repeat_rows",
        np.repeat(x.data, k, axis=0),
        [(x, lambda g: g.reshape(b, k, d).sum(axis=1))],
    )


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows: [k, d] -> [d]."""
    x = _as_tensor(x)
    k = x.data.shape[0]
    return _result(
        "mean_rows",
        x.data.mean(axis=0),
        [(x, lambda g: np.broadcast_to(g / k, x.data.shape))],
    )


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack vectors into a matrix: k vectors of [d] -> [k, d]."""
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors])

    def make_bk(i):
        return lambda g: g[i]

    return _result("stack_rows", out, [(t, make_bk(i)) for i, t in enumerate(tensors)])


def stack_steps(tensors: Sequence[Tensor]) -> Tensor:
    """Stack per-step matrices along a middle axis: S x [B, D] -> [B, S, D]."""
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=1)

    def make_bk(i):
        return lambda g: g[:, i, :]

    return _result("stack_steps", out, [(t, make_bk(i)) for i, t in enumerate(tensors)])


def context_mix(weights: Tensor, stack: Tensor) -> Tensor:
    """Per-row weighted sum: [B, S] weights over [B, S, D] -> [B, D]."""
    weights, stack = _as_tensor(weights), _as_tensor(stack)
    wd, sd = weights.data, stack.data
    if wd.ndim != 2 or sd.ndim != 3 or wd.shape != sd.shape[:2]:
        raise ShapeError(f"context_mix shapes incompatible: {wd.shape}, {sd.shape}")
    out = np.einsum("bs,bsd->bd", wd, sd)
    pairs = [
        (weights, lambda g: np.einsum("bd,bsd->bs", g, sd)),
        (stack, lambda g: wd[:, :, None] * g[:, None, :]),
    ]
    return _result("context_mix", out, pairs)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.data.shape
    return _result(
        "sum_all",
        np.asarray(x.data.sum(), dtype=x.data.dtype),
        [(x, lambda g: np.broadcast_to(g, shape))],
    )


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error of tape gradients vs central finite differences.

    ``f`` must build a fresh tape and return the scalar loss, and must be
    deterministic (fix any internal seeds). Run under 64-bit precision;
    finite differences are unreliable at 32-bit. The relative error uses a
    floor of 1e-3 in the denominator so coordinates with (near-)zero true
    gradient are compared absolutely at that scale rather than amplifying
    finite-difference noise.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    loss.tape.backward(loss)
    analytic = {id(p): p.grad.copy() for p in params}
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p in params:
        n = p.data.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        flat = p.data.reshape(-1)
        ana = analytic[id(p)].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(numeric), abs(ana[i]), 1e-3)
            err = abs(numeric - ana[i]) / denom
            if err > worst:
                worst = err
    return worst
