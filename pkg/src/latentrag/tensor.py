"""Minimal reverse-mode autodiff over float64 numpy buffers.

Every differentiable primitive used by the models lives here. A ``Tensor``
owns a contiguous float64 array; operations on tensors that require grad
record their parents and a closure mapping the output gradient to parent
gradients. ``Tensor.backward`` walks the recorded graph once in reverse
topological order.

Broadcasting is deliberately narrow: same-shape operands, a scalar operand,
or a row-wise bias (shape equal to the trailing dimension). Anything else
raises ``ShapeError``.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import json
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """An operation received an invalid scalar parameter."""


class DivergenceError(ValueError):
    """A KL divergence is infinite (support mismatch)."""


class ArchiveError(ValueError):
    """Unreadable checkpoint or index file."""


class UndefinedSimilarityError(ValueError):
    """Cosine similarity with a zero vector."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- introspection -------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() on non-scalar tensor of shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                # leaves get a private copy; interior grads are never mutated in place
                node.grad = g.copy() if node._backward is None else g
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(_as_tensor(other), self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(self, other)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, exponent): return power(self, exponent)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def exp(self): return exp(self)
    def log(self): return log(self)

    @property
    def T(self): return transpose(self, None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        return "b_row"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1:] == a.shape:
        return "a_row"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, side: str, shape) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{side}_scalar":
        return np.asarray(g.sum()).reshape(shape)
    if kind == f"{side}_row":
        return g.reshape(-1, shape[-1]).sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    ad = a.data.reshape(()) if kind == "a_scalar" else a.data
    bd = b.data.reshape(()) if kind == "b_scalar" else b.data
    out = ad + bd

    def backward(g):
        return _reduce_to(g, kind, "a", a.shape), _reduce_to(g, kind, "b", b.shape)
    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    return add(a, neg(_as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    ad = a.data.reshape(()) if kind == "a_scalar" else a.data
    bd = b.data.reshape(()) if kind == "b_scalar" else b.data
    out = ad * bd

    def backward(g):
        return _reduce_to(g * bd, kind, "a", a.shape), _reduce_to(g * ad, kind, "b", b.shape)
    return _result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_kind(a, b)
    ad = a.data.reshape(()) if kind == "a_scalar" else a.data
    bd = b.data.reshape(()) if kind == "b_scalar" else b.data
    out = ad / bd

    def backward(g):
        return (_reduce_to(g / bd, kind, "a", a.shape),
                _reduce_to(-g * ad / (bd * bd), kind, "b", b.shape))
    return _result(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return _result(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _result(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays or ints, not tensors")
    out = np.ascontiguousarray(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _result(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _result(out, tensors, backward, "stack")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``(M,K)@(K,N)``, equal-batch ``(...,M,K)@(...,K,N)`` and the
    row-wise case ``(...,M,K)@(K,N)`` used by linear layers.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    rowwise = b.ndim == 2 and a.ndim > 2
    if not rowwise and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    if rowwise:
        # one big GEMM instead of a broadcast loop over leading axes
        flat = a.data.reshape(-1, a.shape[-1])
        out = (flat @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data

    def backward(g):
        if rowwise:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            return ga, flat.T @ g2
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    return _result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# normalisation and probability

def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Temperature softmax with max-subtraction.

    ``mask`` is an optional boolean array broadcastable to ``x``; False
    entries receive zero probability.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)
    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)
    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    d = x.shape[-1]

    def backward(g):
        gw = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        gx_hat = g * weight.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb
    return _result(out, (x, weight, bias), backward, "layer_norm")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise UndefinedSimilarityError("cannot normalise a zero vector")
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)
    return _result(out, (x,), backward, "l2_normalize")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 of ``x`` (B,T,D) counting only rows where ``mask`` (B,T) is true."""
    m = np.asarray(mask, dtype=DTYPE)
    counts = m.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ShapeError("masked_mean over an empty row set")
    w = (m / counts)[..., None]
    out = (x.data * w).sum(axis=1)
    return _result(out, (x,), lambda g: (g[:, None, :] * w,), "masked_mean")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)
    return _result(out, (weight,), backward, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# losses and similarities

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits`` (T,V)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (T,V) logits and T targets, got {logits.shape}, {targets.shape}")
    vocab = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target index out of range for vocabulary of {vocab}")
    n = logits.shape[0]
    if n == 0:
        raise ShapeError("cross_entropy over zero positions")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    out = -logp[rows, targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)
    return _result(np.asarray(out), (logits,), backward, "cross_entropy")


def kl_divergence(p, q: Tensor, axis: int = -1) -> Tensor:
    """KL(p || q) summed over ``axis`` and averaged over any leading rows.

    ``p`` is a fixed target distribution (gradients flow only into ``q``);
    terms with ``p == 0`` contribute zero.
    """
    p_arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=DTYPE)
    q = _as_tensor(q)
    if p_arr.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes differ: {p_arr.shape} vs {q.shape}")
    support = p_arr > 0
    if np.any(support & (q.data <= 0)):
        raise DivergenceError("q assigns zero mass where p is positive")
    safe_q = np.where(support, q.data, 1.0)
    safe_p = np.where(support, p_arr, 1.0)
    terms = np.where(support, p_arr * (np.log(safe_p) - np.log(safe_q)), 0.0)
    rows = int(np.prod(p_arr.shape)) // p_arr.shape[axis] if p_arr.ndim > 1 else 1
    out = terms.sum() / rows

    def backward(g):
        return (np.where(support, -p_arr / safe_q, 0.0) * (g / rows),)
    return _result(np.asarray(out), (q,), backward, "kl")


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity along the last axis (one value per row)."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity shapes differ: {u.shape} vs {v.shape}")
    nu = np.sqrt((u.data * u.data).sum(axis=-1))
    nv = np.sqrt((v.data * v.data).sum(axis=-1))
    if np.any(nu == 0) or np.any(nv == 0):
        raise UndefinedSimilarityError("cosine similarity with a zero vector")
    dot = (u.data * v.data).sum(axis=-1)
    out = dot / (nu * nv)

    def backward(g):
        g = np.asarray(g)[..., None]
        c = out[..., None]
        gu = g * (v.data / (nu * nv)[..., None] - c * u.data / (nu * nu)[..., None])
        gv = g * (u.data / (nu * nv)[..., None] - c * v.data / (nv * nv)[..., None])
        return gu, gv
    return _result(np.asarray(out), (u, v), backward, "cosine")


# ---------------------------------------------------------------------------
# gradient checking

def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``x.data`` (perturbed in place)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return 0.0 if den == 0 else float(num / den)


def gradient_check(fn: Callable[[], Tensor], inputs: Iterable[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``."""
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_gradient(fn, t, step)))
    return worst


# ---------------------------------------------------------------------------
# checkpoint archive: magic, u64 manifest length, JSON manifest, raw <f8 blocks

_MAGIC = b"LRTCKPT1"


def save_archive(path, tensors: dict[str, np.ndarray | Tensor], meta: dict | None = None) -> str:
    """Write named float64 arrays to ``path``; returns the sha256 of the file."""
    payload = write_archive_bytes(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(payload)
    return hashlib.sha256(payload).hexdigest()


def write_archive_bytes(tensors: dict[str, np.ndarray | Tensor], meta: dict | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        value = tensors[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=DTYPE)
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta or {}, "entries": entries}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(manifest)))
    buf.write(manifest)
    for raw in blobs:
        buf.write(raw)
    return buf.getvalue()


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        payload = fh.read()
    return read_archive_bytes(payload)


def read_archive_bytes(payload: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if payload[:8] != _MAGIC or len(payload) < 16:
        raise ArchiveError("not a tensor archive")
    (mlen,) = struct.unpack("<Q", payload[8:16])
    try:
        manifest = json.loads(payload[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError("corrupt archive manifest") from exc
    base = 16 + mlen
    out = {}
    for e in manifest["entries"]:
        start = base + e["offset"]
        blob = payload[start:start + e["nbytes"]]
        if len(blob) != e["nbytes"]:
            raise ArchiveError(f"archive truncated in {e['name']!r}")
        arr = np.frombuffer(blob, dtype="<f8").astype(DTYPE)
        out[e["name"]] = arr.reshape(e["shape"])
    return out, manifest["meta"]
