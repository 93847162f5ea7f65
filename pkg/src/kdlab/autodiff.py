"""Dense-tensor reverse-mode autodiff on numpy arrays.

A Tape records primitive applications in execution order; backward() walks the
record in reverse and accumulates dLoss/dParam for every leaf parameter.
Primitives are deliberately coarse (fused attention, fused rmsnorm, log-softmax
gather) so each one gets a hand-derived backward and the op inventory stays
small enough to gradcheck exhaustively.

Conventions:
  - float32 is the working precision, float64 exists for gradchecks;
    mixing dtypes inside one op is an error.
  - every primitive validates that its output is finite; NaN/Inf anywhere is
    treated as a hard error, not a value.
  - integer index arrays (token ids, gather indices) are plain numpy arrays,
    not Tensors, and never receive gradients.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "tensor",
    "parameter",
    "record",
    "backward",
    "gradcheck",
    "matmul",
    "linear",
    "add",
    "mul",
    "scale",
    "add_const",
    "rmsnorm",
    "rope",
    "attention",
    "softmax",
    "log_softmax",
    "take_along",
    "embed",
    "slice_last",
    "reshape",
    "activation",
    "tsum",
    "register_activation",
    "activation_names",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced (or was fed) a NaN or Inf."""


# ---------------------------------------------------------------- tensors


class Tensor:
    """A numpy array plus autodiff bookkeeping. Hash/eq are by identity."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: str = ""):
        if data.dtype not in (np.float32, np.float64):
            raise TypeError(f"Tensor dtype must be float32/float64, got {data.dtype}")
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"


def tensor(data, dtype=np.float32) -> Tensor:
    """Wrap data as a non-parameter (constant) Tensor."""
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data, name: str = "") -> Tensor:
    """Wrap data as a trainable leaf."""
    return Tensor(np.asarray(data), requires_grad=True, name=name)


# ---------------------------------------------------------------- tape

_ACTIVE_TAPE: "Tape | None" = None


class Node:
    __slots__ = ("op", "inputs", "output", "bwd", "fwd")

    def __init__(self, op, inputs, output, bwd, fwd):
        self.op = op
        self.inputs = inputs  # tuple[Tensor]
        self.output = output  # Tensor
        self.bwd = bwd        # callable(out_grad) -> tuple[np.ndarray | None]
        self.fwd = fwd        # callable(*input datas) -> np.ndarray, for replay


class Tape:
    """Ordered record of primitive applications (topological by construction)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def replay(self) -> None:
        """Re-execute every recorded forward and demand bit-identical outputs.

        Valid as long as the recorded input arrays have not been mutated.
        """
        for node in self.nodes:
            if node.fwd is None:
                raise RuntimeError(f"op {node.op!r} recorded without a replay closure")
            out = node.fwd(*[t.data for t in node.inputs])
            if out.dtype != node.output.data.dtype or not np.array_equal(
                out, node.output.data
            ):
                raise AssertionError(f"replay of {node.op!r} is not bit-identical")


def record(
    op: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    bwd: Callable,
    fwd: Callable | None,
) -> Tensor:
    """Finish a primitive: finiteness check, wrap output, register on the tape.

    Exposed so sibling modules (e.g. the STE weight wrapper) can define
    primitives of their own without reaching into tape internals.
    """
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values produced by primitive {op!r}")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.nodes.append(Node(op, tuple(inputs), out, bwd, fwd))
    return out


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


def _check_finite_input(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"non-finite input to primitive {op!r}")


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Accumulate dLoss/dt for every leaf that influenced `loss`.

    Returns a map keyed by Tensor identity; any tensor in `params` that the
    loss never touched maps to zeros. Also mirrors gradients into `.grad`.
    """
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss is not the output of any operation on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    by_id: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.bwd(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if np.isnan(ig).any():
                raise NonFiniteError(f"NaN gradient during backward of {node.op!r}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            by_id[key] = t

    out: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = by_id[key]
        if t.requires_grad:
            t.grad = g
            out[t] = g
    for p in params:
        if p not in out:
            z = np.zeros_like(p.data)
            p.grad = z
            out[p] = z
    return out


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `fn` must rebuild the scalar loss from `params` on every call. Run the
    parameters in float64; central differences in float32 are meaningless.
    """
    with Tape() as tape:
        loss = fn()
    analytic = backward(tape, loss, params)

    worst = 0.0
    for p in params:
        a = analytic[p]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = float(fn().data)
            flat[i] = keep - eps
            dn = float(fn().data)
            flat[i] = keep
            fd = (up - dn) / (2.0 * eps)
            ai = float(a.reshape(-1)[i])
            err = abs(ai - fd) / max(abs(ai), abs(fd), 1.0)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- shape utils


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a (m, k) @ b (k, n) -> (m, n)."""
    _check_dtypes("matmul", a, b)
    ad, bd = a.data, b.data

    def fwd(x, y):
        return x @ y

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return record("matmul", ad @ bd, (a, b), bwd, fwd)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x (..., nin), w (nout, nin) -> (..., nout); y = x @ w.T."""
    _check_dtypes("linear", x, w)
    xd, wd = x.data, w.data

    def fwd(xv, wv):
        return xv @ wv.T

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        return (g @ wd), (g2.T @ x2)

    return record("linear", xd @ wd.T, (x, w), bwd, fwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    _check_dtypes("add", a, b)
    ash, bsh = a.data.shape, b.data.shape

    def fwd(x, y):
        return x + y

    def bwd(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return record("add", a.data + b.data, (a, b), bwd, fwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    _check_dtypes("mul", a, b)
    ad, bd = a.data, b.data

    def fwd(x, y):
        return x * y

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record("mul", ad * bd, (a, b), bwd, fwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = a.data.dtype.type(c)

    def fwd(x):
        return x * c

    def bwd(g):
        return (g * c,)

    return record("scale", a.data * c, (a,), bwd, fwd)


def add_const(a: Tensor, c: float) -> Tensor:
    """Add a python scalar constant (no gradient to the constant)."""
    c = a.data.dtype.type(c)

    def fwd(x):
        return x + c

    def bwd(g):
        return (g,)

    return record("add_const", a.data + c, (a,), bwd, fwd)


def tsum(a: Tensor) -> Tensor:
    """Sum all elements to a scalar."""
    ash = a.data.shape

    def fwd(x):
        return np.asarray(x.sum(), dtype=x.dtype)

    def bwd(g):
        return (np.broadcast_to(g, ash).astype(g.dtype, copy=False),)

    return record("tsum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bwd, fwd)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x (..., d), gain (d,): x * gain / sqrt(mean(x^2) + eps), fused."""
    _check_dtypes("rmsnorm", x, gain)
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    epsd = xd.dtype.type(eps)

    def fwd(xv, gv):
        r = 1.0 / np.sqrt(np.mean(np.square(xv), axis=-1, keepdims=True) + epsd)
        return (xv * r * gv).astype(xv.dtype, copy=False)

    r = 1.0 / np.sqrt(np.mean(np.square(xd), axis=-1, keepdims=True) + epsd)

    def bwd(g):
        u = g * gd
        dgain = (g * xd * r).reshape(-1, d).sum(axis=0)
        dx = u * r - xd * (r ** 3 / d) * np.sum(u * xd, axis=-1, keepdims=True)
        return dx.astype(xd.dtype, copy=False), dgain.astype(gd.dtype, copy=False)

    return record("rmsnorm", (xd * r * gd).astype(xd.dtype, copy=False), (x, gain), bwd, fwd)


def _rope_tables(t_len: int, half: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (t_len, half) for split-half rotary embedding."""
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(t_len, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, base: float = 10000.0) -> Tensor:
    """Rotary position application, split-half layout. x (B, T, H, hd)."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"rope expects (B, T, H, hd), got {xd.shape}")
    hd = xd.shape[-1]
    if hd % 2:
        raise ValueError("rope head dim must be even")
    half = hd // 2
    cos, sin = _rope_tables(xd.shape[1], half, base, xd.dtype)
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]

    def rotate(xv, cv, sv):
        x1, x2 = xv[..., :half], xv[..., half:]
        return np.concatenate([x1 * cv - x2 * sv, x1 * sv + x2 * cv], axis=-1)

    def fwd(xv):
        return rotate(xv, c, s)

    def bwd(g):
        # inverse rotation: substitute -angle
        return (rotate(g, c, -s),)

    return record("rope", rotate(xd, c, s), (x,), bwd, fwd)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Masked scaled-dot-product attention with grouped KV heads, fused.

    q (B, T, Hq, hd); k, v (B, S, Hkv, hd) with Hq divisible by Hkv;
    mask (B, T, S) additive (0 where allowed, large negative where not).
    Returns (B, T, Hq, hd).
    """
    _check_dtypes("attention", q, k, v)
    qd, kd, vd = q.data, k.data, v.data
    b_, t_, hq, hd = qd.shape
    hkv = kd.shape[2]
    if hq % hkv:
        raise ValueError(f"query heads {hq} not divisible by kv heads {hkv}")
    grp = hq // hkv
    inv = qd.dtype.type(1.0 / math.sqrt(hd))
    m = np.asarray(mask, dtype=qd.dtype)[:, None, None, :, :]

    def split(xv):
        return xv.reshape(b_, t_, hkv, grp, hd)

    def fwd_full(qv, kv, vv):
        q5 = split(qv)
        sc = np.einsum("btkgd,bskd->bkgts", q5, kv) * inv + m
        sc -= sc.max(axis=-1, keepdims=True)
        p = np.exp(sc)
        p /= p.sum(axis=-1, keepdims=True)
        out = np.einsum("bkgts,bskd->btkgd", p, vv)
        return p, out.reshape(b_, t_, hq, hd).astype(qv.dtype, copy=False)

    probs, out = fwd_full(qd, kd, vd)

    def fwd(qv, kv, vv):
        return fwd_full(qv, kv, vv)[1]

    def bwd(g):
        g5 = split(g)
        dp = np.einsum("btkgd,bskd->bkgts", g5, vd)
        dv = np.einsum("bkgts,btkgd->bskd", probs, g5)
        ds = probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True))
        ds *= inv
        dq = np.einsum("bkgts,bskd->btkgd", ds, kd).reshape(b_, t_, hq, hd)
        dk = np.einsum("bkgts,btkgd->bskd", ds, split(qd))
        return (
            dq.astype(qd.dtype, copy=False),
            dk.astype(kd.dtype, copy=False),
            dv.astype(vd.dtype, copy=False),
        )

    return record("attention", out, (q, k, v), bwd, fwd)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start:stop] along the last axis."""
    xd = x.data
    if not (0 <= start <= stop <= xd.shape[-1]):
        raise IndexError(f"slice [{start}:{stop}] out of range for {xd.shape}")

    def fwd(xv):
        return np.ascontiguousarray(xv[..., start:stop])

    def bwd(g):
        dx = np.zeros_like(xd)
        dx[..., start:stop] = g
        return (dx,)

    return record("slice_last", np.ascontiguousarray(xd[..., start:stop]), (x,), bwd, fwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Bijective reshape; backward reshapes the gradient back."""
    xd = x.data
    xsh = xd.shape

    def fwd(xv):
        return xv.reshape(shape)

    def bwd(g):
        return (g.reshape(xsh),)

    return record("reshape", xd.reshape(shape), (x,), bwd, fwd)


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis (max-subtracted)."""
    xd = x.data

    def compute(xv):
        z = xv - xv.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=-1, keepdims=True)).astype(xv.dtype, copy=False)

    y = compute(xd)

    def bwd(g):
        return ((y * (g - np.sum(g * y, axis=-1, keepdims=True))).astype(xd.dtype, copy=False),)

    return record("softmax", y, (x,), bwd, compute)


def log_softmax(x: Tensor) -> Tensor:
    """Row log-softmax over the last axis."""
    xd = x.data

    def compute(xv):
        z = xv - xv.max(axis=-1, keepdims=True)
        return (z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))).astype(
            xv.dtype, copy=False
        )

    y = compute(xd)
    sm = np.exp(y)

    def bwd(g):
        return ((g - sm * np.sum(g, axis=-1, keepdims=True)).astype(xd.dtype, copy=False),)

    return record("log_softmax", y, (x,), bwd, compute)


def take_along(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis: out[..., j] = x[..., idx[..., j]]."""
    xd = x.data
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("take_along indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= xd.shape[-1]):
        raise IndexError("take_along index out of range")

    def fwd(xv):
        return np.take_along_axis(xv, idx, axis=-1)

    def bwd(g):
        dx = np.zeros_like(xd)
        rows = dx.reshape(-1, xd.shape[-1])
        flat_idx = idx.reshape(-1, idx.shape[-1])
        g2 = g.reshape(-1, idx.shape[-1])
        np.add.at(rows, (np.arange(rows.shape[0])[:, None], flat_idx), g2)
        return (dx,)

    return record("take_along", np.take_along_axis(xd, idx, axis=-1), (x,), bwd, fwd)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]; backward scatter-adds."""
    td = table.data
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embed ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise IndexError("embed id out of range")

    def fwd(tv):
        return tv[ids]

    def bwd(g):
        dt = np.zeros_like(td)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (dt,)

    return record("embed", td[ids], (table,), bwd, fwd)


# ---------------------------------------------------------------- activations


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s


def _silu_grad(x, y, g):
    s = 1.0 / (1.0 + np.exp(-x))
    return g * (s * (1.0 + x * (1.0 - s)))


def _squared_relu(x):
    r = np.maximum(x, 0.0)
    return r * r


def _squared_relu_grad(x, y, g):
    return g * (2.0 * np.maximum(x, 0.0))


_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "silu": (_silu, _silu_grad),
    "squared_relu": (_squared_relu, _squared_relu_grad),
}


def register_activation(name: str, fn: Callable, grad_fn: Callable) -> None:
    """Register an elementwise activation. grad_fn(x, y, g) -> dx.

    "xielu" is deliberately not built in: its exact functional form belongs to
    its upstream reference implementation and must be plugged in, not guessed.
    """
    _ACTIVATIONS[name] = (fn, grad_fn)


def activation_names() -> list[str]:
    return sorted(_ACTIVATIONS)


def activation(x: Tensor, kind: str) -> Tensor:
    """Apply a registered elementwise activation."""
    if kind not in _ACTIVATIONS:
        raise KeyError(
            f"unknown activation {kind!r}; registered: {activation_names()} "
            f"(plug-in slots must be filled via register_activation)"
        )
    f, df = _ACTIVATIONS[kind]
    xd = x.data

    def fwd(xv):
        return f(xv).astype(xv.dtype, copy=False)

    y = fwd(xd)

    def bwd(g):
        return (df(xd, y, g).astype(xd.dtype, copy=False),)

    return record(f"activation[{kind}]", y, (x,), bwd, fwd)
