"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the operations the recommender needs are provided. Every op checks its
output for NaN/Inf and raises :class:`NumericError` instead of propagating
garbage. Vectors are rows: an affine map is ``x @ U + b`` with ``U`` of shape
``(d_in, d_out)``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LEAKY_SLOPE = 0.2


class NumericError(FloatingPointError):
    pass


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            data = np.array(data, dtype=np.float64)
        self.data = data
        _check(self.data, name or "tensor")
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accum(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data, name=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accum(g)
        b._accum(g)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: a._accum(-g), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accum(g * b.data)
        b._accum(g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")

    def backward(g):
        a._accum(g / b.data)
        b._accum(-g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accum(g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: a._accum(g / a.data), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: a._accum(g * s * (1.0 - s)), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: a._accum(g * (1.0 - t * t)), "tanh")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data >= 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: a._accum(g * scale), "leaky_relu")


# shape and reduction --------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inverse = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: a._accum(np.transpose(g, inverse)), "transpose")


def index_select(a, index) -> Tensor:
    """``a[index]`` with scatter-add backward, so repeated indices accumulate."""
    a = as_tensor(a)

    def backward(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        a._accum(full)

    return _make(np.array(a.data[index]), (a,), backward, "index")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        for i, t in enumerate(ts):
            t._accum(np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, backward, "stack")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    a2 = a.data if a.ndim > 1 else a.data[None, :]
    b2 = b.data if b.ndim > 1 else b.data[:, None]
    out2 = a2 @ b2
    out = out2
    if a.ndim == 1:
        out = out[..., 0, :]
    if b.ndim == 1:
        out = out[..., 0]

    def backward(g):
        g2 = g.reshape(out2.shape)
        if a.requires_grad:
            ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape)
            a._accum(ga.reshape(a.shape))
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
            b._accum(gb.reshape(b.shape))

    return _make(out, (a, b), backward, "matmul")


# normalisers and losses -----------------------------------------------------

def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is 0 get weight exactly 0."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax over an all-masked slice")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        a._accum(g - s * g.sum(axis=axis, keepdims=True))

    return _make(out, (a,), backward, "log_softmax")


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(len(targets))
    logp = log_softmax(logits, axis=-1)
    picked = index_select(logp, (rows, targets))
    return -picked.mean()


# LSTM -----------------------------------------------------------------------

def glorot(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in, fan_out = (shape[0], shape[0]) if len(shape) == 1 else shape[:2]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


_GATES = ("z", "f", "o", "c")


@dataclass
class LstmParams:
    U_z: Tensor
    W_z: Tensor
    b_z: Tensor
    U_f: Tensor
    W_f: Tensor
    b_f: Tensor
    U_o: Tensor
    W_o: Tensor
    b_o: Tensor
    U_c: Tensor
    W_c: Tensor
    b_c: Tensor

    @classmethod
    def init(cls, d_in: int, d: int, rng: np.random.Generator, prefix: str = "") -> "LstmParams":
        """Glorot-uniform gate matrices, zero biases except the forget gate (1.0)."""
        kw = {}
        for gate in _GATES:
            kw[f"U_{gate}"] = parameter(glorot(rng, (d_in, d)), f"{prefix}U_{gate}")
            kw[f"W_{gate}"] = parameter(glorot(rng, (d, d)), f"{prefix}W_{gate}")
            kw[f"b_{gate}"] = parameter(np.full(d, 1.0 if gate == "f" else 0.0), f"{prefix}b_{gate}")
        return cls(**kw)

    @property
    def hidden(self) -> int:
        return self.W_z.shape[0]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


def lstm_cell(x, prev: LstmState, p: LstmParams) -> LstmState:
    """One gated step composed from primitive ops.

    ``z`` is the input gate (it scales the candidate cell), ``f`` scales the
    previous cell, ``o`` the output.
    """
    x = as_tensor(x)
    z = sigmoid(x @ p.U_z + prev.h @ p.W_z + p.b_z)
    f = sigmoid(x @ p.U_f + prev.h @ p.W_f + p.b_f)
    o = sigmoid(x @ p.U_o + prev.h @ p.W_o + p.b_o)
    cand = tanh(x @ p.U_c + prev.h @ p.W_c + p.b_c)
    c = f * prev.c + z * cand
    h = tanh(c) * o
    return LstmState(h, c)


def lstm_sequence(X, p: LstmParams, mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Run an LSTM over ``X`` of shape (B, T, d_in) as a single fused op.

    Returns hidden states (B, T, d). ``mask`` (B, T) marks valid steps; the
    state is carried unchanged across masked steps and their outputs are 0.
    Sequences must be right-padded, so ``reverse=True`` reads each valid
    prefix back to front.
    """
    X = as_tensor(X)
    x = X.data
    B, T, d_in = x.shape
    d = p.hidden
    m = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    full = m.all(axis=0)
    gate_params = [(getattr(p, f"U_{g}"), getattr(p, f"W_{g}"), getattr(p, f"b_{g}")) for g in _GATES]
    U = np.concatenate([u.data for u, _, _ in gate_params], axis=1)
    W = np.concatenate([w.data for _, w, _ in gate_params], axis=1)
    b = np.concatenate([bb.data for _, _, bb in gate_params])
    # time-major buffers keep every per-step slice contiguous
    xa = np.ascontiguousarray((x @ U + b).transpose(1, 0, 2))
    hs = np.zeros((T + 1, B, d))  # hs[k] is the state before the k-th processed step
    cs = np.zeros((T + 1, B, d))
    acts = np.empty((T, B, 4 * d))  # sigmoid gates z, f, o then tanh candidate
    tcs = np.empty((T, B, d))
    H = np.zeros((T, B, d))
    steps = list(range(T - 1, -1, -1)) if reverse else list(range(T))
    for k, t in enumerate(steps):
        a = acts[k]
        np.matmul(hs[k], W, out=a)
        a += xa[t]
        g3 = a[:, :3 * d]
        g3 *= 0.5
        np.tanh(g3, out=g3)
        g3 += 1.0
        g3 *= 0.5
        np.tanh(a[:, 3 * d:], out=a[:, 3 * d:])
        zg, fg, og, cg = a[:, :d], a[:, d:2 * d], a[:, 2 * d:3 * d], a[:, 3 * d:]
        c_new = fg * cs[k] + zg * cg
        tc = np.tanh(c_new, out=tcs[k])
        h_new = og * tc
        if full[t]:
            hs[k + 1], cs[k + 1], H[t] = h_new, c_new, h_new
        else:
            mt = m[:, t, None]
            hs[k + 1] = np.where(mt, h_new, hs[k])
            cs[k + 1] = np.where(mt, c_new, cs[k])
            H[t] = np.where(mt, h_new, 0.0)

    def backward(gH):
        gH = gH.transpose(1, 0, 2)
        da_all = np.zeros((T, B, 4 * d))
        dh = np.zeros((B, d))
        dc = np.zeros((B, d))
        WT = W.T
        for k in range(T - 1, -1, -1):
            t = steps[k]
            a, tc, c_prev = acts[k], tcs[k], cs[k]
            zg, fg, og, cg = a[:, :d], a[:, d:2 * d], a[:, 2 * d:3 * d], a[:, 3 * d:]
            dh_new = dh + gH[t]
            dc_new = dc + dh_new * og * (1.0 - tc * tc)
            if not full[t]:
                mt = m[:, t, None]
                dh_new = np.where(mt, dh_new, 0.0)
                dc_new = np.where(mt, dc_new, 0.0)
            da = da_all[t]
            np.multiply(dc_new * cg, zg * (1.0 - zg), out=da[:, :d])
            np.multiply(dc_new * c_prev, fg * (1.0 - fg), out=da[:, d:2 * d])
            np.multiply(dh_new * tc, og * (1.0 - og), out=da[:, 2 * d:3 * d])
            np.multiply(dc_new * zg, 1.0 - cg * cg, out=da[:, 3 * d:])
            dh_step = da @ WT
            dc_step = dc_new * fg
            if full[t]:
                dh, dc = dh_step, dc_step
            else:
                dh = np.where(mt, dh_step, dh)
                dc = np.where(mt, dc_step, dc)
        # da_all is indexed by time; hs/cs by processing order
        order = np.asarray(steps)
        h_prev = np.empty((T, B, d))
        h_prev[order] = hs[:T]
        flat = da_all.reshape(-1, 4 * d)
        dW = h_prev.reshape(-1, d).T @ flat
        xt = x.transpose(1, 0, 2).reshape(-1, d_in)
        dU = xt.T @ flat
        db = flat.sum(axis=0)
        for j, (u, w, bb) in enumerate(gate_params):
            block = slice(j * d, (j + 1) * d)
            u._accum(dU[:, block])
            w._accum(dW[:, block])
            bb._accum(db[block])
        if X.requires_grad:
            X._accum((da_all @ U.T).transpose(1, 0, 2))

    H = np.ascontiguousarray(H.transpose(1, 0, 2))
    parents = [X] + [t for trio in gate_params for t in trio]
    return _make(H, parents, backward, "lstm_sequence")


def bilstm_encode(seq, fwd: LstmParams, bwd: LstmParams, mask: np.ndarray | None = None) -> Tensor:
    """Concatenate forward and backward LSTM outputs per position.

    ``seq`` is a list of d_in vectors, a (T, d_in) tensor, or a right-padded
    (B, T, d_in) batch. Output has the same leading shape with width 2d.
    """
    if isinstance(seq, (list, tuple)):
        if not seq:
            raise ValueError("bilstm_encode needs a non-empty sequence")
        seq = stack(seq, axis=0)
    seq = as_tensor(seq)
    if seq.shape[-2] == 0:
        raise ValueError("bilstm_encode needs a non-empty sequence")
    single = seq.ndim == 2
    X = reshape(seq, (1,) + seq.shape) if single else seq
    out = concat([lstm_sequence(X, fwd, mask), lstm_sequence(X, bwd, mask, reverse=True)], axis=-1)
    return reshape(out, out.shape[1:]) if single else out


# verification ---------------------------------------------------------------

def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {p.name or f"param{i}": p for i, p in enumerate(params)}


def grad_errors(f: Callable[[], Tensor], params, eps: float = 1e-6) -> dict[str, float]:
    """Per-tensor max relative error between reverse-mode and central differences."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    named = _as_named(params)
    for p in named.values():
        p.zero_grad()
    loss = f()
    loss.backward()
    errors = {}
    for name, p in named.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite objective while perturbing {name}[{i}]")
            num = (up - down) / (2.0 * eps)
            ana = analytic.reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
        errors[name] = worst
    return errors


def grad_check(f: Callable[[], Tensor], params, eps: float = 1e-6) -> float:
    """Max over all coordinates of |analytic - numeric| / max(|a|, |n|, 1e-8)."""
    return max(grad_errors(f, params, eps).values(), default=0.0)


# named-tensor container -----------------------------------------------------

_MAGIC = b"SHTC"
_VERSION = 1


def save_tensors(path, tensors: Mapping[str, Tensor | np.ndarray]):
    body = bytearray(_MAGIC + struct.pack("<II", _VERSION, len(tensors)))
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise ValueError(f"{path}: checksum mismatch")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * size
    return out


def parameters_of(objs: Iterable) -> list[Tensor]:
    return [t for t in objs if isinstance(t, Tensor) and t.requires_grad]
