"""Dense fp64 tensors with a reverse-mode differentiation tape.

A ``Tensor`` is an immutable fp64 ndarray plus tape metadata: the op kind
that produced it, its parent tensors and a vector-Jacobian closure.  Ops are
free functions (``matmul``, ``add``, ``softmax`` ...) that build the tape as
they compute; ``backward`` walks it once in reverse topological order and
accumulates gradients into the leaves.

Every op validates that its result is finite and raises ``NonFiniteError``
naming the op otherwise, so NaN/Inf never propagates silently.  Elementwise
ops accept only equal shapes or a scalar operand; anything fancier (bias
rows, tiling) is its own op with its own explicit gradient rule, which keeps
each rule auditable in isolation.

``finite_diff_check`` is the independent gradient oracle: central
differences over parameter entries, with max-reduction ties detected and
excluded from the pass/fail verdict.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_ids = itertools.count()


class _TieMonitor:
    """Records near-ties seen by max-reductions while enabled.

    Used only by finite_diff_check; costs nothing when disabled.
    """

    enabled = False
    tol = 0.0
    events = 0

    @classmethod
    def start(cls, tol: float) -> None:
        cls.enabled = True
        cls.tol = tol
        cls.events = 0

    @classmethod
    def stop(cls) -> int:
        cls.enabled = False
        return cls.events


def _require_finite(data: np.ndarray, op: str) -> None:
    # cheap single reduction first; the sum is non-finite whenever any
    # element is, so the exact scan runs only on suspicion
    with np.errstate(over="ignore", invalid="ignore"):
        total = data.sum()
    if not np.isfinite(total) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Immutable fp64 array node on the differentiation tape."""

    __slots__ = ("id", "data", "grad", "op", "parents", "requires", "_vjp")

    def __init__(self, data, requires: bool = False):
        arr = np.array(data, dtype=np.float64)  # copy: detach from caller
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite values in tensor literal")
        arr.flags.writeable = False
        self.id = next(_ids)
        self.data = arr
        self.grad = None
        self.op = "leaf"
        self.parents = ()
        self.requires = requires
        self._vjp = None

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents, vjp,
                 check: bool = True) -> "Tensor":
        # ops that only select or rearrange finite inputs skip the check
        if check:
            _require_finite(data, op)
        t = cls.__new__(cls)
        # views (reshape/transpose) of immutable tensors stay views
        if data.flags.writeable:
            data.flags.writeable = False
        t.id = next(_ids)
        t.data = data
        t.grad = None
        t.op = op
        t.parents = tuple(parents)
        t.requires = any(p.requires for p in parents)
        t._vjp = vjp if t.requires else None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate(self, g: np.ndarray) -> None:
        # copy on first arrival: pass-through VJPs may hand one array to
        # two parents, and a bound buffer must stay safe to += into later
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def accumulate_owned(self, g: np.ndarray) -> None:
        """Bind without copying.  Only for arrays the caller freshly computed
        (or disjoint views of the consumer's own, already-final gradient)."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # operator sugar; the named functions are the primary API
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Leaf tensor that never receives a gradient."""
    return Tensor(x, requires=False)


class Parameter:
    """Named trainable leaf; value is rebound (never mutated) on update."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.trainable = trainable
        self.value = Tensor(value, requires=trainable)

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    def assign(self, data: np.ndarray) -> None:
        if data.shape != self.value.shape:
            raise ShapeError(
                f"assign shape {data.shape} != parameter shape {self.value.shape}"
            )
        self.value = Tensor(data, requires=self.trainable)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


# ---------------------------------------------------------------------------
# elementwise ops (equal shapes or one scalar operand)
# ---------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


def _acc_match(parent: Tensor, g: np.ndarray) -> None:
    """Route a full-shape gradient to a possibly-scalar binary operand."""
    if g.shape == parent.shape:
        parent.accumulate(g)  # pass-through: must copy
    else:
        parent.accumulate_owned(np.sum(g).reshape(parent.shape))


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = a.data + b.data

    def vjp(g):
        if a.requires:
            _acc_match(a, g)
        if b.requires:
            _acc_match(b, g)

    return Tensor._from_op(out_data, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = a.data - b.data

    def vjp(g):
        if a.requires:
            _acc_match(a, g)
        if b.requires:
            _acc_match(b, -g)

    return Tensor._from_op(out_data, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = a.data * b.data

    def vjp(g):
        if a.requires:
            ga = g * b.data
            a.accumulate_owned(ga if ga.shape == a.shape
                               else np.sum(ga).reshape(a.shape))
        if b.requires:
            gb = g * a.data
            b.accumulate_owned(gb if gb.shape == b.shape
                               else np.sum(gb).reshape(b.shape))

    return Tensor._from_op(out_data, "mul", (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python float (no extra leaf on the tape)."""
    c = float(c)
    out_data = a.data * c

    def vjp(g):
        a.accumulate_owned(g * c)

    return Tensor._from_op(out_data, "scale", (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def vjp(g):
        a.accumulate_owned(g * (1.0 - y * y))

    return Tensor._from_op(y, "tanh", (a,), vjp, check=False)


def sigmoid(a: Tensor) -> Tensor:
    # 0.5*(tanh(x/2)+1) is overflow-free for all fp64 inputs
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def vjp(g):
        a.accumulate_owned(g * y * (1.0 - y))

    return Tensor._from_op(y, "sigmoid", (a,), vjp, check=False)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    y = np.where(mask, a.data, 0.0)

    def vjp(g):
        a.accumulate_owned(g * mask)

    return Tensor._from_op(y, "relu", (a,), vjp, check=False)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    y = np.log(a.data)

    def vjp(g):
        a.accumulate_owned(g / a.data)

    return Tensor._from_op(y, "log", (a,), vjp, check=False)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    mask = a.data > floor
    y = np.where(mask, a.data, floor)

    def vjp(g):
        a.accumulate_owned(g * mask)

    return Tensor._from_op(y, "clamp_min", (a,), vjp, check=False)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        y = a.data @ b.data

    def vjp(g):
        if a.requires:
            a.accumulate_owned(g @ b.data.T)
        if b.requires:
            b.accumulate_owned(a.data.T @ g)

    return Tensor._from_op(y, "matmul", (a, b), vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a leading axis: (N,m,k) @ (N,k,n) -> (N,m,n)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm needs 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    y = np.matmul(a.data, b.data)

    def vjp(g):
        if a.requires:
            a.accumulate_owned(np.matmul(g, np.swapaxes(b.data, 1, 2)))
        if b.requires:
            b.accumulate_owned(np.matmul(np.swapaxes(a.data, 1, 2), g))

    return Tensor._from_op(y, "bmm", (a, b), vjp)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis; bias gradient sums leading axes."""
    if b.data.ndim != 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: {a.shape} with bias {b.shape}")
    y = a.data + b.data

    def vjp(g):
        if a.requires:
            a.accumulate(g)  # pass-through
        if b.requires:
            b.accumulate_owned(g.reshape(-1, b.shape[0]).sum(axis=0))

    return Tensor._from_op(y, "add_bias", (a, b), vjp)


def pair_sum(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs sum along axis 1: out[n, i, j, ...] = a[n, i, ...] + b[n, j, ...].

    Both operands are (N, R, ...); the result is (N, R, R, ...).  The
    gradient rule is the mirror image: sum the incoming gradient over the
    axis the operand was broadcast along.
    """
    if a.shape != b.shape or a.data.ndim < 2:
        raise ShapeError(f"pair_sum needs equal (N, R, ...) shapes, got {a.shape} and {b.shape}")
    n, r = a.shape[:2]
    rest = a.shape[2:]
    y = a.data.reshape((n, r, 1) + rest) + b.data.reshape((n, 1, r) + rest)

    def vjp(g):
        if a.requires:
            a.accumulate_owned(g.sum(axis=2))
        if b.requires:
            b.accumulate_owned(g.sum(axis=1))

    return Tensor._from_op(y, "pair_sum", (a, b), vjp)


# ---------------------------------------------------------------------------
# softmax and reductions
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        a.accumulate_owned(y * (g - inner))

    return Tensor._from_op(y, "softmax", (a,), vjp, check=False)


def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax + ndim if ax < 0 else ax for ax in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axes}")
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
    return axes


def _unsqueeze(g: np.ndarray, axes: tuple, ndim: int) -> np.ndarray:
    shape = list(g.shape)
    for ax in sorted(axes):
        shape.insert(ax, 1)
    return g.reshape(shape)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    y = np.add.reduce(a.data, axis=axes) if axes else a.data.copy()

    def vjp(g):
        a.accumulate(np.broadcast_to(_unsqueeze(g, axes, a.data.ndim), a.shape))

    return Tensor._from_op(np.asarray(y, dtype=np.float64), "sum", (a,), vjp)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    y = np.add.reduce(a.data, axis=axes) / count if axes else a.data.copy()

    def vjp(g):
        a.accumulate(
            np.broadcast_to(_unsqueeze(g, axes, a.data.ndim), a.shape) / count
        )

    return Tensor._from_op(np.asarray(y, dtype=np.float64), "mean", (a,), vjp)


def reduce_max(a: Tensor, axes=None) -> Tensor:
    """Max over axes; ties route the full gradient to the lowest flat index."""
    axes = _normalize_axes(axes, a.data.ndim)
    ndim = a.data.ndim
    kept = tuple(ax for ax in range(ndim) if ax not in axes)
    perm = kept + axes
    moved = np.transpose(a.data, perm)
    outer_shape = moved.shape[: len(kept)]
    flat = moved.reshape(int(np.prod(outer_shape, dtype=np.int64)) if kept else 1, -1)
    arg = np.argmax(flat, axis=1)  # np.argmax breaks ties at the lowest index
    y = flat[np.arange(flat.shape[0]), arg].reshape(outer_shape)

    if _TieMonitor.enabled and flat.shape[1] > 1:
        part = np.partition(flat, flat.shape[1] - 2, axis=1)
        gap = part[:, -1] - part[:, -2]
        _TieMonitor.events += int(np.count_nonzero(gap <= _TieMonitor.tol))

    def vjp(g):
        gmoved = np.zeros_like(flat)
        gmoved[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        inv = np.argsort(perm)
        a.accumulate_owned(np.transpose(gmoved.reshape(moved.shape), inv))

    return Tensor._from_op(np.asarray(y, dtype=np.float64), "max", (a,), vjp,
                           check=False)


# ---------------------------------------------------------------------------
# shape and indexing ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    y = a.data.reshape(shape)

    def vjp(g):
        a.accumulate_owned(g.reshape(a.shape))

    return Tensor._from_op(y, "reshape", (a,), vjp, check=False)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    y = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        a.accumulate_owned(np.transpose(g, inv))

    return Tensor._from_op(y, "transpose", (a,), vjp, check=False)


def take_flat(a: Tensor, idx: np.ndarray, out_shape) -> Tensor:
    """Gather from the flattened input: out.flat[i] = a.flat[idx[i]].

    The gradient scatter-adds back, so repeated indices sum, which is what
    makes this single op cover im2col patches, bilinear corner gathers and
    pairwise tiling.
    """
    idx = np.asarray(idx)
    y = a.data.ravel()[idx].reshape(out_shape)

    def vjp(g):
        acc = np.bincount(idx.ravel(), weights=g.ravel(), minlength=a.data.size)
        a.accumulate_owned(acc.reshape(a.shape))

    return Tensor._from_op(y, "take_flat", (a,), vjp, check=False)


def concat0(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat0 of zero tensors")
    y = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def vjp(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires:
                p.accumulate_owned(g[offset : offset + n])  # disjoint views
            offset += n

    return Tensor._from_op(y, "concat0", parts, vjp, check=False)


def pad_zero(a: Tensor, pad_width) -> Tensor:
    """Zero-pad; pad_width is a per-axis (before, after) list as in np.pad."""
    pad_width = [tuple(p) for p in pad_width]
    y = np.pad(a.data, pad_width)
    slices = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, a.shape))

    def vjp(g):
        a.accumulate_owned(g[slices])

    return Tensor._from_op(y, "pad_zero", (a,), vjp, check=False)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar loss; visits each node once."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires:
        return

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires and p.id not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of a central-difference check against the tape."""

    max_rel_err: float
    n_checked: int
    n_ties: int
    passed: bool
    worst: tuple = ()  # (param name, flat entry index)
    entries: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: max rel err {self.max_rel_err:.3e} over "
            f"{self.n_checked} entries ({self.n_ties} tie-excluded)"
        )


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def finite_diff_check(
    f,
    params,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng=None,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor built from the given Parameters.  Each checked entry is perturbed
    by +/-eps; entries whose evaluations hit a max-reduction near-tie are
    reported but excluded from the verdict, since the subgradient choice is
    arbitrary there.  Relative error uses a unit floor:
    |a-b| / max(1, |a|, |b|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    base = f()
    if base.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued function")
    again = f()
    if not np.array_equal(base.data, again.data):
        raise ValueError("function is not deterministic: repeated evaluations differ")

    for p in params:
        p.zero_grad()
    backward(again)
    tape_grads = {p.name: p.grad.copy() for p in params}

    entries = []
    for p in params:
        for flat in range(p.data.size):
            entries.append((p, flat))
    if max_entries is not None and len(entries) > max_entries:
        if rng is None:
            raise ValueError("sampling entries requires an rng")
        chosen = []
        pool = list(range(len(entries)))
        for _ in range(max_entries):
            k = rng.randint(len(pool))
            chosen.append(pool.pop(k))
        entries = [entries[i] for i in sorted(chosen)]

    tie_tol = 4.0 * eps
    max_err = 0.0
    worst = ()
    n_ties = 0
    rows = []
    for p, flat in entries:
        original = p.value
        vals = original.data.copy()
        ref = vals.flat[flat]

        ties = 0
        vals.flat[flat] = ref + eps
        p.assign(vals)
        _TieMonitor.start(tie_tol)
        up = f().item()
        ties += _TieMonitor.stop()

        vals.flat[flat] = ref - eps
        p.assign(vals)
        _TieMonitor.start(tie_tol)
        down = f().item()
        ties += _TieMonitor.stop()

        p.value = original

        fd = (up - down) / (2.0 * eps)
        tape = tape_grads[p.name].flat[flat]
        err = _rel_err(tape, fd)
        tied = ties > 0
        rows.append((p.name, flat, tape, fd, err, tied))
        if tied:
            n_ties += 1
        elif err > max_err:
            max_err = err
            worst = (p.name, flat)

    return GradCheckReport(
        max_rel_err=max_err,
        n_checked=len(rows) - n_ties,
        n_ties=n_ties,
        passed=max_err <= tol,
        worst=worst,
        entries=rows,
    )


# ---------------------------------------------------------------------------
# serialization: binary block and CSV
# ---------------------------------------------------------------------------

MAGIC = b"RGT1"


def write_tensor(fh, arr: np.ndarray) -> None:
    """Little-endian block: magic, u32 rank, u64 extents, fp64 payload."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(arr.astype("<f8").tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_csv(path, arr: np.ndarray) -> None:
    """Plain-text export for small 1-D/2-D tensors."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"csv export supports rank <= 2, got shape {arr.shape}")
    with open(path, "w") as fh:
        for row in arr:
            fh.write(",".join(f"{v:.17g}" for v in row))
            fh.write("\n")
