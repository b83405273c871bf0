"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op records its parents and a closure that pushes the output gradient
back into them.  The graph is rebuilt on each forward pass; calling
``backward`` on a scalar walks it once in reverse topological order.

Convolution is cross-correlation (no kernel flip), NCHW layout.
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64
NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """A named trainable tensor; its gradient is cleared between optimizer steps."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)

    @property
    def value(self) -> np.ndarray:
        return self.data


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _needs_grad(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    def backward(g):
        x._accumulate(g * np.sign(x.data))

    return _result(np.abs(x.data), (x,), backward)


def relu(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g * (x.data > 0))

    return _result(np.maximum(x.data, 0.0), (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return _result(s, (x,), backward)


def pointwise(x: Tensor, fn: str) -> Tensor:
    if fn == "relu":
        return relu(x)
    if fn == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise fn {fn!r}; expected 'relu' or 'sigmoid'")


# reductions and reshapes --------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def take(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` along axis 0; backward scatters with accumulation."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _result(x.data[index], (x,), backward)


def segment_mean(x: Tensor, segments, n_segments: int) -> Tensor:
    """Mean of the rows of ``x`` sharing a segment id.  Every segment must be non-empty."""
    segments = np.asarray(segments, dtype=np.intp)
    counts = np.bincount(segments, minlength=n_segments).astype(DTYPE)
    if np.any(counts == 0):
        raise ValueError("segment_mean: empty segment")
    out = np.zeros((n_segments,) + x.shape[1:], dtype=DTYPE)
    np.add.at(out, segments, x.data)
    scale = counts.reshape((-1,) + (1,) * (x.data.ndim - 1))
    out /= scale

    def backward(g):
        x._accumulate((g / scale)[segments])

    return _result(out, (x,), backward)


# linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape (n,) or (B, n)."""
    if weight.data.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(np.outer(g, x.data) if x.data.ndim == 1 else g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g if g.ndim == 1 else g.sum(axis=0))

    return _result(out, parents, backward)


def l2_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise DegenerateVectorError(f"l2_normalize: vector norm below {eps}")
    y = x.data / norms

    def backward(g):
        # d(x/|x|) = (g - y <y, g>) / |x|
        x._accumulate((g - y * np.sum(y * g, axis=-1, keepdims=True)) / norms)

    return _result(y, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        logits._accumulate(g * p / b)

    return _result(np.asarray(loss), (logits,), backward)


# convolution --------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    b, c, h, w = x.shape
    oh, ow = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(b, c * kh * kw, oh * ow), oh, ow


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int):
    b, c, h, w = shape
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0,
           masks: Optional[Tensor] = None, groups=None) -> Tensor:
    """2-D cross-correlation.

    ``x`` is (ic, ih, iw) or (B, ic, ih, iw); ``kernel`` is (kc, ic, kh, kw).

    With ``masks`` (nd, ic, kh, kw) and per-sample ``groups``, sample b is
    convolved with ``kernel * masks[groups[b]]`` (the mask broadcast over the
    output channels).  Because the mask does not depend on the output channel
    this equals convolving the group-masked patches with the shared kernel,
    so the whole mixed-group batch is still a single matmul.
    """
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected (B,)ic,ih,iw input and 4-D kernel, got {x.shape}, {kernel.shape}")
    kc, ic, kh, kw = kernel.shape
    if xd.shape[1] != ic:
        raise ShapeError(f"conv2d: input has {xd.shape[1]} channels but kernel expects {ic}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    if kh > xd.shape[2] + 2 * pad or kw > xd.shape[3] + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xd.shape[2:]}")

    cols, oh, ow = _im2col(xd, kh, kw, stride, pad)
    wflat = kernel.data.reshape(kc, -1)
    parents = [x, kernel]
    if masks is not None:
        if masks.shape[1:] != kernel.shape[1:]:
            raise ShapeError(f"conv2d: mask bank {masks.shape} does not match kernel {kernel.shape}")
        groups = np.broadcast_to(np.asarray(groups, dtype=np.intp), (xd.shape[0],))
        if groups.min() < 0 or groups.max() >= masks.shape[0]:
            raise IndexError(f"conv2d: group label out of range [0, {masks.shape[0]})")
        sample_masks = masks.data.reshape(masks.shape[0], -1)[groups][:, :, None]
        mcols = cols * sample_masks
        parents.append(masks)
    else:
        mcols = cols
    out = np.matmul(wflat, mcols).reshape(xd.shape[0], kc, oh, ow)
    if unbatched:
        out = out[0]

    def backward(g):
        g = g.reshape(xd.shape[0], kc, oh * ow)
        if kernel.requires_grad:
            kernel._accumulate(np.tensordot(g, mcols, axes=([0, 2], [0, 2])).reshape(kernel.shape))
        if x.requires_grad or (masks is not None and masks.requires_grad):
            dmcols = np.matmul(wflat.T, g)
            if masks is not None and masks.requires_grad:
                per_sample = np.einsum("bkl,bkl->bk", dmcols, cols)
                dm = np.zeros((masks.shape[0], per_sample.shape[1]), dtype=DTYPE)
                np.add.at(dm, groups, per_sample)
                masks._accumulate(dm.reshape(masks.shape))
            if x.requires_grad:
                dcols = dmcols * sample_masks if masks is not None else dmcols
                dx = _col2im(dcols, xd.shape, kh, kw, stride, pad, oh, ow)
                x._accumulate(dx[0] if unbatched else dx)

    return _result(out, parents, backward)


# gradient checking --------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-4,
               max_entries: Optional[int] = None, seed: int = 0) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|).

    ``fn`` rebuilds the graph from the current parameter values and returns a
    scalar.  ``max_entries`` limits the number of probed coordinates per
    parameter (chosen with ``seed``); by default every coordinate is probed.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("grad_check: eps must lie in [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = fn()
    if out.data.size != 1:
        raise ShapeError(f"grad_check: graph output must be scalar, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn().data)
            flat[i] = orig - eps
            fm = float(fn().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


# checkpoints --------------------------------------------------------------

def save_checkpoint(path, tensors: dict, arch: Optional[dict] = None):
    """Write ``index.json`` and ``weights.bin`` (little-endian float64) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    with open(path / "weights.bin", "wb") as fh:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
            fh.write(arr.tobytes())
            index[name] = {"shape": list(arr.shape), "dtype": "float64", "offset": offset}
            offset += arr.nbytes
    doc = {"tensors": index}
    if arch is not None:
        doc["arch"] = arch
    tmp = path / "index.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=False))
    os.replace(tmp, path / "index.json")


def load_checkpoint(path) -> tuple[dict, Optional[dict]]:
    path = Path(path)
    doc = json.loads((path / "index.json").read_text())
    raw = (path / "weights.bin").read_bytes()
    out = {}
    for name, entry in doc["tensors"].items():
        if entry.get("dtype", "float64") != "float64":
            raise ValueError(f"checkpoint tensor {name!r} has unsupported dtype {entry['dtype']}")
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=entry["offset"])
        out[name] = arr.reshape(entry["shape"]).astype(DTYPE)
    return out, doc.get("arch")
