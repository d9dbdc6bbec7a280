"""Small float64 tensor engine with reverse-mode differentiation.

The op set is closed on purpose: everything the model composes is here and
nothing else. Every op records a backward closure when any input requires a
gradient; ``Tensor.backward`` walks the recorded graph in reverse topological
order and accumulates into ``.grad``.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``.grad`` on every reachable leaf that requires it.

        Gradients accumulate across calls until explicitly zeroed.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: tuple, b: tuple, op: str):
    # exact shape, scalar, or one shape a trailing suffix of the other
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if len(a) > len(b) and a[len(a) - len(b):] == b:
        return
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return
    raise DimensionError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu."""
    ops = {"add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu}
    if kind not in ops:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return ops[kind](*args)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, -1, -2).copy(), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def take(x, key) -> Tensor:
    """Basic or integer-array indexing (``x[key]``) with scatter-add backward."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.array(x.data[key]), (x,), backward)


slice_ = take


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


# ---------------------------------------------------------------- normalisation

def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


LN_EPS = 1e-5


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, (d,)), _unbroadcast(g, (d,))

    return _make(xhat * gd + bias.data, (x, gain, bias), backward)


# ---------------------------------------------------------------- mask losses

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid_bce_rows(logits, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over the last axis, computed from logits."""
    logits = as_tensor(logits)
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise DimensionError(f"sigmoid_bce_rows: logits {z.shape} vs targets {t.shape}")
    n = z.shape[-1]
    loss = (np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean(axis=-1)
    return _make(loss, (logits,), lambda g: (g[..., None] * (_sigmoid(z) - t) / n,))


def dice_rows(logits, targets: np.ndarray, smooth: float = 1.0) -> Tensor:
    """``1 - (2*sum(s*t) + smooth) / (sum(s) + sum(t) + smooth)`` with ``s = sigmoid(logits)``."""
    logits = as_tensor(logits)
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise DimensionError(f"dice_rows: logits {z.shape} vs targets {t.shape}")
    s = _sigmoid(z)
    num = 2.0 * (s * t).sum(axis=-1) + smooth
    den = s.sum(axis=-1) + t.sum(axis=-1) + smooth

    def backward(g):
        ds = -(2.0 * t * den[..., None] - num[..., None]) / (den[..., None] ** 2)
        return (g[..., None] * ds * s * (1.0 - s),)

    return _make(1.0 - num / den, (logits,), backward)


# ---------------------------------------------------------------- parameters & optimiser

@dataclass
class ParamStore:
    params: dict[str, Tensor] = field(default_factory=dict)
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def add(self, path: str, value) -> Tensor:
        if path in self.params:
            raise ContractError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=path)
        self.params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self.params[path]

    def __contains__(self, path: str) -> bool:
        return path in self.params

    def __iter__(self):
        return iter(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore(step=self.step)
        for path, t in self.params.items():
            out.add(path, t.data.copy())
        out.moments = {k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()}
        return out


def adam_step(params: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update over every parameter, then zero the grads."""
    for path, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {path!r} has no gradient")
    params.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** params.step
    c2 = 1.0 - b2 ** params.step
    for path, t in params.items():
        g = t.grad
        if path in params.moments:
            m, v = params.moments[path]
        else:
            m, v = np.zeros_like(t.data), np.zeros_like(t.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        params.moments[path] = (m, v)
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    params.zero_grad()


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    probes: list[tuple[str, tuple, float, float, float]]  # path, index, analytic, numeric, rel

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(f: Callable[[], Tensor], params: ParamStore, samples: int = 20,
               h: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare taped gradients with central differences at random scalar probes.

    ``f`` must rebuild its graph from the current parameter values on every
    call. Parameters are picked with probability proportional to their size.
    """
    params.zero_grad()
    loss = f()
    loss.backward()
    analytic = {p: t.grad.copy() for p, t in params.items()}
    params.zero_grad()

    rng = np.random.default_rng(seed)
    paths = list(params)
    sizes = np.array([params[p].data.size for p in paths], dtype=np.float64)
    probes = []
    worst = 0.0
    for _ in range(samples):
        path = paths[rng.choice(len(paths), p=sizes / sizes.sum())]
        t = params[path]
        flat = int(rng.integers(t.data.size))
        idx = np.unravel_index(flat, t.shape)
        orig = t.data[idx]
        with no_grad():
            t.data[idx] = orig + h
            fp = f().item()
            t.data[idx] = orig - h
            fm = f().item()
        t.data[idx] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic[path][idx])
        rel = relative_error(a, numeric, floor)
        worst = max(worst, rel)
        probes.append((path, tuple(int(i) for i in idx), a, numeric, rel))
    return GradCheckReport(worst, probes)


# ---------------------------------------------------------------- checkpoint format

CKPT_MAGIC = b"CTCK"
CKPT_VERSION = 1


def save_checkpoint(path, params: ParamStore, header: dict | None = None):
    """Write parameters as raw little-endian float64 records behind a JSON header."""
    head = dict(header or {})
    head["step"] = params.step
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<II", CKPT_VERSION, len(blob))
    out += blob
    out += struct.pack("<I", len(params.params))
    for name, t in params.items():
        pb = name.encode("utf-8")
        out += struct.pack("<H", len(pb)) + pb
        out += struct.pack("<B", t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
        out += t.data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    raw = Path(path).read_bytes()
    try:
        if raw[:4] != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        off = 12
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        store = ParamStore(step=int(header.get("step", 0)))
        for _ in range(count):
            (plen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + plen].decode("utf-8")
            off += plen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            n = int(math.prod(shape))
            if off + 8 * n > len(raw):
                raise FormatError(f"{path}: truncated record for {name!r}")
            data = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            store.add(name, data.astype(np.float64))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return store, header


def parameters_equal(a: ParamStore, b: ParamStore) -> bool:
    if list(a) != list(b):
        return False
    return all(a[p].data.tobytes() == b[p].data.tobytes() for p in a)


def tensors(xs: Iterable) -> list[Tensor]:
    return [as_tensor(x) for x in xs]
