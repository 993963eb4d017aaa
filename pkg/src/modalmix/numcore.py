"""Deterministic differentiable numerics on float64 numpy arrays.

A small tape-based reverse-mode engine: primitives record nodes on the
active Graph, backward() walks the tape in reverse and returns a gradient
map keyed by parameter name. Internals are float64 throughout (checkpoints
downcast to float32 at serialization time, see checkpoint.py). There is no
broadcasting beyond bias addition; shape violations raise ShapeError naming
the primitive and the offending extents.

Attention masking uses a large negative additive constant (NEG_MASK) rather
than -inf so every tensor stays finite; after the stabilizing max-subtract
the masked entries underflow to exactly 0 in softmax.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

NEG_MASK = -1e30
_LN_EPS = 1e-6  # layer_norm variance floor

_GRAPH_STACK = []


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NonFiniteError(FloatingPointError):
    """A value that must be finite is not."""


class Tensor:
    """A float64 array plus an optional producer node / parameter name."""

    __slots__ = ("data", "node", "name")

    def __init__(self, data, name=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"tensor of shape {self.data.shape} is not scalar")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def constant(data) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(data)


def parameter(name: str, data) -> Tensor:
    """A named leaf tensor; backward() reports gradients under this name."""
    if not name:
        raise ValueError("parameter needs a non-empty name")
    return Tensor(data, name=name)


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple
    out: "Tensor"
    bwd: callable  # grad_out -> tuple of per-input grads (None = no grad)


class Graph:
    """Execution tape. Nodes are appended in forward order, which is a

    topological order by construction; backward() walks it once in reverse.
    Use as a context manager around the forward pass.
    """

    def __init__(self):
        self.nodes = []
        self.leaves = {}  # id(tensor) -> named leaf Tensor

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False


def _check_finite(op: str, arr: np.ndarray):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _record(op: str, inputs, out_data: np.ndarray, bwd) -> Tensor:
    _check_finite(op, out_data)
    out = Tensor(out_data)
    if _GRAPH_STACK:
        graph = _GRAPH_STACK[-1]
        node = Node(op, tuple(inputs), out, bwd)
        out.node = node
        graph.nodes.append(node)
        for t in inputs:
            if isinstance(t, Tensor) and t.name is not None:
                graph.leaves[id(t)] = t
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, m) @ (..., m, p); leading extents must match exactly."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul", f"operands must be rank>=2, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError("matmul", f"incompatible shapes {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bwd(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return _record("matmul", (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add of equal shapes, or bias add of a (D,) vector."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def bwd(g):
            return g, g
    elif bd.ndim == 1 and ad.ndim >= 1 and ad.shape[-1] == bd.shape[0]:
        def bwd(g):
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)
    else:
        raise ShapeError("add", f"incompatible shapes {ad.shape} + {bd.shape}")
    return _record("add", (a, b), ad + bd, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _record("scale", (a,), a.data * s, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Variance floor 1e-6: a constant row maps to zeros (plus beta).
    """
    xd = x.data
    d = xd.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError("layer_norm", f"affine shapes {gamma.data.shape}/{beta.data.shape} vs last extent {d}")
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out, bwd)


def softmax(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis."""
    xd = x.data
    if xd.size == 0:
        return _record("softmax", (x,), xd.copy(), lambda g: (g.copy(),))
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), out, bwd)


def log_softmax(x: Tensor) -> Tensor:
    """log(softmax(x)) over the last axis, computed stably."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out, bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-based GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    out = xd * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf),)

    return _record("gelu", (x,), out, bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of a (V, D) table selected by an int index array."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.data.shape[0]
    if table.data.ndim != 2:
        raise ShapeError("embedding_lookup", f"table must be rank-2, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ShapeError("embedding_lookup", f"id out of range [0,{v}): {ids.min()}..{ids.max()}")
    out = table.data[ids]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return _record("embedding_lookup", (table,), out, bwd)


def concat_lastdim(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis; all other extents must match."""
    ad, bd = a.data, b.data
    if ad.shape[:-1] != bd.shape[:-1]:
        raise ShapeError("concat_lastdim", f"incompatible shapes {ad.shape} | {bd.shape}")
    out = np.concatenate([ad, bd], axis=-1)
    split = ad.shape[-1]

    def bwd(g):
        return g[..., :split], g[..., split:]

    return _record("concat_lastdim", (a, b), out, bwd)


def concat_rows(parts) -> Tensor:
    """Concatenate a list of (T_i, ...) tensors along axis 0."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows", "empty part list")
    datas = [p.data for p in parts]
    tails = {d.shape[1:] for d in datas}
    if len(tails) != 1:
        raise ShapeError("concat_rows", f"trailing extents differ: {sorted(tails)}")
    out = np.concatenate(datas, axis=0)
    lengths = [d.shape[0] for d in datas]
    offsets = np.cumsum([0] + lengths)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record("concat_rows", tuple(parts), out, bwd)


def row_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row range of a (T, ...) tensor; backward zero-pads."""
    t = x.data.shape[0]
    if not (0 <= start <= stop <= t):
        raise ShapeError("row_slice", f"range [{start},{stop}) outside [0,{t})")
    out = x.data[start:stop].copy()

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return _record("row_slice", (x,), out, bwd)


def row_gather(x: Tensor, idx) -> Tensor:
    """Select rows of a (T, ...) tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    t = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= t):
        raise ShapeError("row_gather", f"row index out of range [0,{t})")
    out = x.data[idx]

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _record("row_gather", (x,), out, bwd)


def replace_rows(x: Tensor, vec: Tensor, idx) -> Tensor:
    """Overwrite the rows in idx of a (T, D) tensor with a (D,) vector."""
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2 or vec.data.shape != (x.data.shape[1],):
        raise ShapeError("replace_rows", f"need (T,D) and (D,), got {x.data.shape} and {vec.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError("replace_rows", f"row index out of range [0,{x.data.shape[0]})")
    out = x.data.copy()
    out[idx] = vec.data

    def bwd(g):
        dx = g.copy()
        dx[idx] = 0.0
        dvec = g[idx].sum(axis=0) if idx.size else np.zeros_like(vec.data)
        return dx, dvec

    return _record("replace_rows", (x, vec), out, bwd)


def scale_rows(x: Tensor, gates: np.ndarray) -> Tensor:
    """Multiply each row of a (T, D) tensor by a constant per-row gate.

    Rows with gate exactly 0 are forced to +0.0 so a gated-out stream is
    bitwise identical to an explicit zero tensor (no -0.0 leakage).
    """
    gates = np.asarray(gates, dtype=np.float64)
    if x.data.ndim != 2 or gates.shape != (x.data.shape[0],):
        raise ShapeError("scale_rows", f"need (T,D) and (T,), got {x.data.shape} and {gates.shape}")
    col = gates[:, None]
    zero_rows = gates == 0.0
    out = x.data * col
    out[zero_rows] = 0.0

    def bwd(g):
        dg = g * col
        dg[zero_rows] = 0.0
        return (dg,)

    return _record("scale_rows", (x,), out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = x.data.shape
    out = np.ascontiguousarray(x.data).reshape(shape)

    def bwd(g):
        return (np.ascontiguousarray(g).reshape(src),)

    return _record("reshape", (x,), out, bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record("transpose", (x,), out, bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood of integer targets; shape (T,).

    Non-negative, zero exactly when the row's softmax is one-hot on target.
    """
    t = np.asarray(targets, dtype=np.int64)
    ld = logits.data
    if ld.ndim != 2 or t.shape != (ld.shape[0],):
        raise ShapeError("cross_entropy", f"need (T,K) logits and (T,) targets, got {ld.shape} and {t.shape}")
    k = ld.shape[1]
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ShapeError("cross_entropy", f"target id out of range [0,{k})")
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    rows = np.arange(ld.shape[0])
    out = lse - ld[rows, t]

    def bwd(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, t] -= 1.0
        return (p * g[:, None],)

    return _record("cross_entropy", (logits,), out, bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bwd(g):
        return (np.full(x.data.shape, float(g)),)

    return _record("sum_all", (x,), out, bwd)


def mean_all(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise ShapeError("mean_all", "mean of empty tensor")
    out = np.asarray(x.data.mean())
    n = x.data.size

    def bwd(g):
        return (np.full(x.data.shape, float(g) / n),)

    return _record("mean_all", (x,), out, bwd)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "layer_norm": layer_norm,
    "softmax": softmax,
    "gelu": gelu,
    "embedding_lookup": embedding_lookup,
    "concat_lastdim": concat_lastdim,
    "cross_entropy": cross_entropy,
}


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a named primitive. Unknown names raise ShapeError."""
    fn = _PRIMITIVES.get(op)
    if fn is None:
        raise ShapeError(op, f"unknown primitive (have {sorted(_PRIMITIVES)})")
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(graph: Graph, loss: Tensor) -> dict:
    """Reverse-accumulate gradients of a scalar loss over the tape.

    Returns {parameter name: gradient Tensor} for every named leaf the loss
    is reachable from. Each node is visited exactly once.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None or loss.node not in graph.nodes:
        raise ValueError("loss tensor was not recorded on this graph")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gin in zip(node.inputs, node.bwd(g)):
            if gin is None:
                continue
            if not isinstance(inp, Tensor) or (inp.node is None and inp.name is None):
                continue  # constant: no grad tracking
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin

    out = {}
    for key, leaf in graph.leaves.items():
        if key in grads:
            out[leaf.name] = Tensor(grads[key])
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam moments, lazily allocated per parameter."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, trainable=None):
    """One Adam update over (a subset of) the parameter dict, in place.

    grads maps name -> Tensor or ndarray; parameters without a gradient are
    untouched. A non-finite gradient raises NonFiniteError naming the
    parameter. Returns (params, state).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        if trainable is not None and name not in trainable:
            continue
        p = params[name]
        g = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", f"gradient shape {g.shape} vs parameter {p.data.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_grad_norm(grads: dict, max_norm: float = 1.0):
    """Scale the whole gradient set so its global L2 norm is <= max_norm.

    Returns (clipped grads dict, pre-clip norm). Direction is preserved;
    clipping an already-clipped set is a bitwise no-op.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    arrs = {}
    for name in sorted(grads):
        g = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        arrs[name] = g
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm <= max_norm * (1.0 + 1e-12):
        return {n: Tensor(a) for n, a in arrs.items()}, norm
    s = max_norm / norm
    return {n: Tensor(a * s) for n, a in arrs.items()}, norm


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def grad_check(make_loss, params: dict, epsilon: float = 1e-5, min_coords: int = 50, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    make_loss() must rebuild the (deterministic) forward pass from the
    current parameter values and return a scalar loss Tensor. Samples at
    least min_coords coordinates across all parameters (all of them if the
    model is smaller). Returns the max relative error, with the denominator
    floored at 1e-3 so near-zero gradients do not blow up the ratio.
    """
    from .seeding import rng_for

    with Graph() as g:
        loss = make_loss()
        analytic = backward(g, loss)

    names = sorted(params)
    sizes = [params[n].data.size for n in names]
    total = int(np.sum(sizes))
    n_samples = min(total, max(min_coords, 0))
    rng = rng_for(seed, "grad_check")
    flat_ids = rng.choice(total, size=n_samples, replace=False) if n_samples < total else np.arange(total)

    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for fid in flat_ids:
        pi = int(np.searchsorted(bounds, fid, side="right") - 1)
        name = names[pi]
        local = int(fid - bounds[pi])
        p = params[name]
        flat = p.data.reshape(-1)
        orig = flat[local]
        flat[local] = orig + epsilon
        f_plus = make_loss().item()
        flat[local] = orig - epsilon
        f_minus = make_loss().item()
        flat[local] = orig
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic[name].data.reshape(-1)[local]) if name in analytic else 0.0
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
        worst = max(worst, err)
    return worst
