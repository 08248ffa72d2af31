"""Minimal reverse-mode differentiation over dense numpy arrays.

Only the operations the network needs are provided, each with a hand
written backward rule. A graph is built implicitly as ops are applied to
:class:`Tensor` objects; :meth:`Tensor.backward` walks it in reverse
topological order and accumulates gradients into ``.grad``.

Shapes must match exactly: there is no general broadcasting.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from dfcn import kernels


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tensor:
    """A shaped array that may participate in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Propagate ``grad`` (default: ones, for scalars) to every ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} != tensor shape {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
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

        pending = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            if not node._parents:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                pending[key] = pg if key not in pending else pending[key] + pg

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward: Callable):
        """Create the result of an op; ``backward(g)`` returns one grad per parent."""
        data = np.asarray(data)
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("non-finite value produced in forward pass")
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------- ops


def gather_group(features, neighborhood):
    """Rows of ``features`` (N x d) indexed by ``neighborhood`` (M x G) -> M x G x d."""
    features = as_tensor(features)
    idx = np.asarray(neighborhood, dtype=np.int64)
    _check(features.data.ndim == 2, "gather_group expects N x d features")
    _check(idx.ndim == 2, "gather_group expects an M x G index table")
    n = features.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"neighborhood index out of range for {n} rows")
    out = features.data[idx]
    flat = np.ascontiguousarray(idx.ravel())

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, g.shape[-1]))
        return (kernels.scatter_add_rows(g2, flat, n),)

    return Tensor.from_op(out, (features,), backward)


def conv_1xK(inputs, weight, bias):
    """Per-sector aggregation of K neighbors with full channel mixing.

    ``inputs`` is M x (N_d*K) x d_in, ``weight`` d_out x K x d_in,
    ``bias`` d_out. Output is M x N_d x d_out with
    out[m, j, c] = sum_k sum_a W[c, k, a] * in[m, j*K + k, a] + b[c].
    """
    inputs, weight, bias = as_tensor(inputs), as_tensor(weight), as_tensor(bias)
    _check(inputs.data.ndim == 3 and weight.data.ndim == 3, "conv_1xK expects 3-d input and weight")
    m, gk, d_in = inputs.shape
    d_out, k, wd = weight.shape
    _check(wd == d_in, f"conv_1xK: weight expects {wd} input channels, got {d_in}")
    _check(gk % k == 0, f"conv_1xK: group axis {gk} not divisible by K={k}")
    _check(bias.shape == (d_out,), "conv_1xK: bias shape mismatch")
    n_dirs = gk // k
    x2 = inputs.data.reshape(m * n_dirs, k * d_in)
    w2 = weight.data.reshape(d_out, k * d_in)
    out = (x2 @ w2.T + bias.data).reshape(m, n_dirs, d_out)

    def backward(g):
        g2 = g.reshape(m * n_dirs, d_out)
        gx = (g2 @ w2).reshape(m, gk, d_in) if inputs.requires_grad else None
        gw = (g2.T @ x2).reshape(d_out, k, d_in) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor.from_op(out, (inputs, weight, bias), backward)


def conv_1xNd(inputs, weight, bias):
    """Orientation-aware combination across sectors.

    ``inputs`` M x N_d x d, ``weight`` d_out x N_d x d -> M x 1 x d_out with
    out[m, 0, h] = sum_c sum_j W[h, j, c] * in[m, j, c] + b[h].
    """
    inputs, weight, bias = as_tensor(inputs), as_tensor(weight), as_tensor(bias)
    _check(inputs.data.ndim == 3 and weight.data.ndim == 3, "conv_1xNd expects 3-d input and weight")
    m, n_dirs, d = inputs.shape
    d_out, wn, wd = weight.shape
    _check((wn, wd) == (n_dirs, d), f"conv_1xNd: weight {weight.shape} vs input {inputs.shape}")
    _check(bias.shape == (d_out,), "conv_1xNd: bias shape mismatch")
    x2 = inputs.data.reshape(m, n_dirs * d)
    w2 = weight.data.reshape(d_out, n_dirs * d)
    out = (x2 @ w2.T + bias.data).reshape(m, 1, d_out)

    def backward(g):
        g2 = g.reshape(m, d_out)
        gx = (g2 @ w2).reshape(m, n_dirs, d) if inputs.requires_grad else None
        gw = (g2.T @ x2).reshape(d_out, n_dirs, d) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor.from_op(out, (inputs, weight, bias), backward)


def pointwise_mlp(inputs, weight, bias=None):
    """Affine map on the last axis: ``inputs @ weight.T + bias``; weight is d_out x d_in."""
    inputs, weight = as_tensor(inputs), as_tensor(weight)
    d_out, d_in = weight.shape
    _check(inputs.shape[-1] == d_in, f"pointwise_mlp: expected {d_in} channels, got {inputs.shape[-1]}")
    lead = inputs.shape[:-1]
    x2 = inputs.data.reshape(-1, d_in)
    out = x2 @ weight.data.T
    parents = [inputs, weight]
    if bias is not None:
        bias = as_tensor(bias)
        _check(bias.shape == (d_out,), "pointwise_mlp: bias shape mismatch")
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(*lead, d_out)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(*lead, d_in) if inputs.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return Tensor.from_op(out, parents, backward)


def relu(inputs):
    inputs = as_tensor(inputs)
    mask = inputs.data > 0
    out = np.maximum(inputs.data, 0)  # keeps NaN visible to the forward check

    def backward(g):
        return (g * mask,)

    return Tensor.from_op(out, (inputs,), backward)


def max_over_group(inputs):
    """M x G x d -> M x d; the gradient goes to the first (lowest index) argmax."""
    inputs = as_tensor(inputs)
    _check(inputs.data.ndim == 3, "max_over_group expects M x G x d")
    m, g_len, d = inputs.shape
    arg = np.argmax(inputs.data, axis=1)
    out = np.take_along_axis(inputs.data, arg[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        gx = np.zeros_like(inputs.data)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        return (gx,)

    return Tensor.from_op(out, (inputs,), backward)


def concat_channels(a, b):
    """Concatenate along the last axis; all leading dimensions must agree."""
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape[:-1] == b.shape[:-1], f"concat_channels: {a.shape} vs {b.shape}")
    d1 = a.shape[-1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=-1)

    def backward(g):
        return g[..., :d1], g[..., d1:]

    return Tensor.from_op(out, (a, b), backward)


def add_elementwise(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"add_elementwise: {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return Tensor.from_op(a.data + b.data, (a, b), backward)


def reshape(inputs, shape):
    inputs = as_tensor(inputs)
    old = inputs.shape
    out = inputs.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return Tensor.from_op(out, (inputs,), backward)


def softmax_rows(inputs):
    """Row-wise softmax of an M x C matrix, max-subtracted for stability."""
    inputs = as_tensor(inputs)
    _check(inputs.data.ndim == 2 and inputs.shape[1] >= 2, "softmax_rows expects M x C with C >= 2")
    z = inputs.data - inputs.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(p, (inputs,), backward)


def weighted_sum_rows(src, index, weights):
    """out[m] = sum_j weights[m, j] * src[index[m, j]]; gradient flows to ``src`` only."""
    src = as_tensor(src)
    idx = np.asarray(index, dtype=np.int64)
    w = np.asarray(weights, dtype=src.dtype)
    _check(idx.shape == w.shape and idx.ndim == 2, "weighted_sum_rows: index/weight shape mismatch")
    n = src.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for {n} rows")
    # one neighbor column at a time keeps memory at M x d
    out = np.zeros((idx.shape[0], src.shape[1]), dtype=src.dtype)
    for j in range(idx.shape[1]):
        out += w[:, j, None] * src.data[idx[:, j]]

    def backward(g):
        gs = np.zeros_like(src.data)
        for j in range(idx.shape[1]):
            gs += kernels.scatter_add_rows(
                np.ascontiguousarray(w[:, j, None] * g), np.ascontiguousarray(idx[:, j]), n
            )
        return (gs,)

    return Tensor.from_op(out, (src,), backward)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameters; gradients live on each tensor's ``.grad``."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter (zeros where no gradient has arrived)."""
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._params.items()
        }

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_values(self):
        return int(sum(t.data.size for t in self._params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, value in state.items():
            t = self._params[name]
            if value.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != {t.shape}")
            t.data = np.array(value, dtype=self.dtype)


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"DFCNCKPT"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def save_checkpoint(store: ParamStore, path) -> Path:
    """Write parameters to ``path`` plus a ``<path>.manifest`` text file.

    Binary layout (little-endian): magic, u32 version, u32 count, then per
    parameter u16 name length, utf-8 name, u8 dtype code, u8 ndim,
    u64 per dim, raw IEEE-754 payload.
    """
    path = Path(path)
    code = _DTYPE_CODES[store.dtype.newbyteorder("<")]
    chunks = [_MAGIC, struct.pack("<II", 1, len(store))]
    manifest = []
    for name, t in store.items():
        raw = name.encode("utf-8")
        payload = np.ascontiguousarray(t.data, dtype=store.dtype.newbyteorder("<")).tobytes()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}Q", *t.shape))
        chunks.append(payload)
        shape = "x".join(str(s) for s in t.shape) or "scalar"
        manifest.append(f"{name}\t{shape}\t{hashlib.sha256(payload).hexdigest()}")
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".manifest").write_text("\n".join(manifest) + "\n")
    return path


def load_checkpoint(path, verify=True) -> dict[str, np.ndarray]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    try:
        out = _parse_checkpoint(buf)
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise ValueError(f"{path} is truncated or corrupt ({exc})") from None
    manifest = Path(str(path) + ".manifest")
    if verify and manifest.exists():
        for line in manifest.read_text().splitlines():
            name, _, digest = line.split("\t")
            got = hashlib.sha256(np.ascontiguousarray(out[name]).tobytes()).hexdigest()
            if got != digest:
                raise ValueError(f"checksum mismatch for {name} in {path}")
    return out


def _parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    version, count = struct.unpack_from("<II", buf, 8)
    if version != 1:
        raise ValueError(f"unsupported checkpoint version {version}")
    codes = {v: k for k, v in _DTYPE_CODES.items()}
    pos = 16
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dtype = codes[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(buf):
            raise struct.error("payload runs past end of file")
        out[name] = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    return out


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    rng=None,
    max_coords: int | None = None,
    wrt: Iterable[int] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    The output of ``fn`` is reduced to a scalar with a fixed random
    projection. ``max_coords`` limits the number of (randomly chosen)
    coordinates checked per input; ``wrt`` limits which inputs are checked.
    Relative error is ``|a - n| / max(|a|, |n|, floor)`` where ``floor``
    is 1e-6 of the largest numeric gradient magnitude (and at least 1e-10),
    so that entries that are zero up to finite-difference noise do not
    dominate.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    out.backward(proj)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar(xs):
        return float(np.sum(fn(*[Tensor(x) for x in xs]).data * proj))

    pairs = []
    for i in wrt:
        flat_size = arrays[i].size
        coords = np.arange(flat_size)
        if max_coords is not None and flat_size > max_coords:
            coords = rng.choice(flat_size, size=max_coords, replace=False)
        for c in coords:
            idx = np.unravel_index(c, arrays[i].shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += epsilon
            minus[i][idx] -= epsilon
            numeric = (scalar(plus) - scalar(minus)) / (2 * epsilon)
            pairs.append((float(analytic[i][idx]), numeric))

    if not pairs:
        return GradCheckReport(0.0, 0, tolerance)
    a = np.array([p[0] for p in pairs])
    n = np.array([p[1] for p in pairs])
    floor = max(1e-10, 1e-6 * float(np.abs(n).max()))
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return GradCheckReport(float(rel.max()), len(pairs), tolerance)
