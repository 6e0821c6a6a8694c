"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a record to the computation graph of its
output.  ``backward`` collects the records reachable from a scalar loss,
orders them by creation sequence (the tape) and replays them in reverse,
accumulating gradients into leaf tensors that have ``requires_grad`` set.

Only the handful of primitives the encoder, losses and prompts need are
provided.  Sparse propagation matrices are plain ``scipy.sparse`` CSR
matrices treated as constants.
"""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_seq = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    """A 2-D (or 0-D scalar) float64 array that can take part in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def freeze(self) -> "Tensor":
        """Drop the gradient buffer; the tensor becomes a constant."""
        self.requires_grad = False
        self.grad = None
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out.grad = None
    if needs:
        out._inputs = inputs
        out._backward = backward
        out._seq = next(_seq)
    else:
        out._inputs = ()
        out._backward = None
        out._seq = -1
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), backward)


def spmm(adj: sp.spmatrix, x: Tensor) -> Tensor:
    """Sparse (constant) times dense: ``y[v] = sum_u adj[v, u] * x[u]``."""
    if not sp.issparse(adj):
        raise TypeError("spmm expects a scipy.sparse matrix")
    if adj.shape[1] != x.shape[0]:
        raise IndexError(f"sparse matrix columns {adj.shape[1]} exceed rows of x {x.shape[0]}")
    adj = adj.tocsr()

    def backward(g):
        return (adj.T @ g,)

    return _make(np.asarray(adj @ x.data), (x,), backward)


def _broadcast_reduce(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 2 and shape[0] == 1 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    if len(shape) == 2 and shape[1] == 1 and g.shape[0] == shape[0]:
        return g.sum(axis=1, keepdims=True)
    if shape == () or shape == (1, 1):
        return np.asarray(g.sum()).reshape(shape)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    ok = (
        len(sa) == 2 and len(sb) == 2
        and ((sb[0] == 1 and sb[1] == sa[1]) or (sa[0] == 1 and sa[1] == sb[1])
             or (sb[1] == 1 and sb[0] == sa[0]) or (sa[1] == 1 and sa[0] == sb[0]))
    )
    if not ok:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        return (_broadcast_reduce(g, a.shape) if a.requires_grad else None,
                _broadcast_reduce(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g):
        return (_broadcast_reduce(g, a.shape) if a.requires_grad else None,
                _broadcast_reduce(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a 1×d (or n×1) operand broadcasts over rows (columns)."""
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        return (_broadcast_reduce(g * B, a.shape) if a.requires_grad else None,
                _broadcast_reduce(g * A, b.shape) if b.requires_grad else None)

    return _make(A * B, (a, b), backward)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _relu_margins is not None:
        # exact zeros are structural (e.g. a row with no signal) and stay put under perturbation
        nz = np.abs(a.data[a.data != 0])
        if nz.size:
            _relu_margins.append(float(nz.min()))
    # subgradient at exactly 0 is 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    A = a.data
    return _make(np.log(A), (a,), lambda g: (g / A,))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def sum_rows(a: Tensor) -> Tensor:
    """Sum across columns: [n×d] -> [n×1]."""
    d = a.shape[1]
    return _make(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, d, axis=1),))


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows: [n×d] -> [1×d]."""
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError("mean_rows needs a non-empty 2-D tensor")
    n = a.shape[0]
    return _make(a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.repeat(g / n, n, axis=0),))


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("row index out of range")

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] if p.requires_grad else None
                     for i, p in enumerate(parts))

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def l2_normalize_rows(a: Tensor) -> Tensor:
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    if np.any(norms == 0):
        raise ZeroDivisionError("cosine similarity undefined for a zero-norm vector")
    u = a.data / norms

    def backward(g):
        # d(x/|x|) = (g - u (u.g)) / |x|
        return ((g - u * np.sum(u * g, axis=1, keepdims=True)) / norms,)

    return _make(u, (a,), backward)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` [n×d] and ``b`` [m×d]."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix width mismatch {a.shape} vs {b.shape}")
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)))


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two row vectors, returned as a 1×1 tensor."""
    if a.shape[0] != 1 or b.shape[0] != 1:
        raise ShapeError("cosine_sim expects 1×d row vectors")
    return cosine_matrix(a, b)


# ---------------------------------------------------------------------------
# reverse pass


@dataclass
class Tape:
    """Records reachable from a loss, in creation order."""

    records: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._inputs)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.records)

    def replay(self, loss: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for inp, gi in zip(node._inputs, node._backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._backward is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    Tape.from_loss(loss).replay(loss)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# kink monitor used by gradient checks to reject configurations sitting on a
# relu corner
_relu_margins: list[float] | None = None


class relu_margin_monitor:
    """Context manager collecting min |x| over every relu input."""

    def __enter__(self):
        global _relu_margins
        self._prev = _relu_margins
        _relu_margins = []
        self.margins = _relu_margins
        return self

    def __exit__(self, *exc):
        global _relu_margins
        _relu_margins = self._prev
        return False

    @property
    def min_margin(self) -> float:
        return min(self.margins) if self.margins else float("inf")


# ---------------------------------------------------------------------------
# serialization: u64 rank, u64 dims[rank], little-endian float64 row-major


def write_tensor(path: str | Path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (rank,) = struct.unpack_from("<Q", raw, 0)
    dims = struct.unpack_from(f"<{rank}Q", raw, 8)
    offset = 8 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: payload has {len(raw) - offset} bytes, expected {8 * count}")
    return np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(dims)


def save_tensors(directory: str | Path, tensors: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    """Write each array to ``<name>.bin`` and a ``manifest.json`` index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in tensors.items():
        fname = name.replace("/", "__") + ".bin"
        write_tensor(directory / fname, arr)
        entries[name] = {"file": fname, "shape": list(np.shape(arr))}
    manifest = {"tensors": entries}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_tensors(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    out = {}
    for name, entry in manifest["tensors"].items():
        arr = read_tensor(directory / entry["file"])
        if list(arr.shape) != list(entry["shape"]):
            raise ValueError(f"{name}: shape {arr.shape} disagrees with manifest {entry['shape']}")
        out[name] = arr
    return out, manifest
