"""Dense 2-D tensors and a recorded-operation tape for reverse-mode gradients.

Everything is float64 and strictly two-dimensional. Ops compute eagerly with
numpy and record a backward rule on the active tape (entered with
``with Tape() as tape:``) whenever any input requires gradients. Outside a
tape the same ops run as plain inference. One tape serves one training step.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .sparse import SparseOp


class AutodiffError(ValueError):
    """Shape, domain, or tape misuse."""


class Tensor:
    """A 2-D float64 value, optionally tracked for gradients.

    ``node_id`` is the handle on the tape the tensor was last recorded on;
    it is None for tensors that never touched a tape.
    """

    __slots__ = ("values", "requires_grad", "node_id", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise AutodiffError(f"tensors are 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise AutodiffError("non-finite values in tensor construction")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("input_ids", "backward_fn")

    def __init__(self, input_ids, backward_fn):
        self.input_ids = input_ids
        self.backward_fn = backward_fn


_ACTIVE_TAPE = None


class Tape:
    """Ordered recording of operations for one reverse sweep.

    Node ids are list positions, so every input precedes its consumers by
    construction; ``backward`` still checks this defensively.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._watched: dict[int, Tensor] = {}
        self._outer = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False

    def __len__(self):
        return len(self._nodes)

    def watch(self, tensor: Tensor) -> int:
        """Register a leaf tensor on this tape, reusing its id if present."""
        if tensor._tape is self and tensor.node_id is not None:
            return tensor.node_id
        nid = len(self._nodes)
        self._nodes.append(_Node((), None))
        tensor.node_id = nid
        tensor._tape = self
        if tensor.requires_grad:
            self._watched[nid] = tensor
        return nid

    def _record(self, out: Tensor, input_ids, backward_fn) -> None:
        nid = len(self._nodes)
        if any(i >= nid for i in input_ids):
            raise AutodiffError("tape ordering violated: input recorded after use")
        self._nodes.append(_Node(tuple(input_ids), backward_fn))
        out.node_id = nid
        out._tape = self
        out.requires_grad = True


def backward(tape: Tape, loss: Tensor, retain_all: bool = False):
    """Gradients of a scalar loss for every watched leaf on the tape.

    Leaves that did not participate in the loss get zero gradients. With
    ``retain_all`` the returned dict also keeps every intermediate node's
    gradient (useful for op-level tests).
    """
    if loss._tape is not tape or loss.node_id is None:
        raise AutodiffError("loss was not recorded on this tape")
    if loss.values.shape != (1, 1):
        raise AutodiffError(f"loss must be 1x1, got {loss.values.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for nid in range(loss.node_id, -1, -1):
        node = tape._nodes[nid]
        if node.backward_fn is None:
            continue
        g = grads.get(nid) if retain_all else grads.pop(nid, None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for iid, ig in zip(node.input_ids, input_grads):
            if ig is None:
                continue
            if iid >= nid:
                raise AutodiffError("cycle detected in tape")
            if iid in grads:
                grads[iid] = grads[iid] + ig
            else:
                grads[iid] = ig
    out = {
        nid: grads.get(nid, np.zeros_like(t.values))
        for nid, t in tape._watched.items()
    }
    if retain_all:
        out.update(grads)
    return out


def _tape_for(*tensors):
    if _ACTIVE_TAPE is None:
        return None
    if any(t.requires_grad for t in tensors if isinstance(t, Tensor)):
        return _ACTIVE_TAPE
    return None


def _unary(x, out_vals, grad_fn):
    out = Tensor(out_vals)
    tape = _tape_for(x)
    if tape is not None:
        ix = tape.watch(x)
        tape._record(out, (ix,), lambda g: (grad_fn(g),))
    return out


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape[1] != b.values.shape[0]:
        raise AutodiffError(
            f"matmul shape mismatch: {a.values.shape} @ {b.values.shape}"
        )
    out = Tensor(a.values @ b.values)
    tape = _tape_for(a, b)
    if tape is not None:
        ia, ib = tape.watch(a), tape.watch(b)
        av, bv = a.values, b.values
        na, nb = a.requires_grad, b.requires_grad
        tape._record(
            out,
            (ia, ib),
            lambda g: (g @ bv.T if na else None, av.T @ g if nb else None),
        )
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-row operand broadcasts over the other's rows."""
    sa, sb = a.values.shape, b.values.shape
    if sa != sb and not (
        (sa[0] == 1 and sa[1] == sb[1]) or (sb[0] == 1 and sb[1] == sa[1])
    ):
        raise AutodiffError(f"add shape mismatch: {sa} vs {sb}")
    out = Tensor(a.values + b.values)
    tape = _tape_for(a, b)
    if tape is not None:
        ia, ib = tape.watch(a), tape.watch(b)
        na, nb = a.requires_grad, b.requires_grad

        def bwd(g):
            ga = gb = None
            if na:
                ga = g.sum(axis=0, keepdims=True) if sa[0] == 1 and g.shape[0] > 1 else g
            if nb:
                gb = g.sum(axis=0, keepdims=True) if sb[0] == 1 and g.shape[0] > 1 else g
            return ga, gb

        tape._record(out, (ia, ib), bwd)
    return out


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; a 1-column operand broadcasts across columns."""
    sa, sb = a.values.shape, b.values.shape
    if sa != sb and not (
        (sa[1] == 1 and sa[0] == sb[0]) or (sb[1] == 1 and sb[0] == sa[0])
    ):
        raise AutodiffError(f"elementwise_mul shape mismatch: {sa} vs {sb}")
    out = Tensor(a.values * b.values)
    tape = _tape_for(a, b)
    if tape is not None:
        ia, ib = tape.watch(a), tape.watch(b)
        av, bv = a.values, b.values
        na, nb = a.requires_grad, b.requires_grad

        def bwd(g):
            ga = gb = None
            if na:
                ga = g * bv
                if sa[1] == 1 and ga.shape[1] > 1:
                    ga = ga.sum(axis=1, keepdims=True)
            if nb:
                gb = g * av
                if sb[1] == 1 and gb.shape[1] > 1:
                    gb = gb.sum(axis=1, keepdims=True)
            return ga, gb

        tape._record(out, (ia, ib), bwd)
    return out


def concat_cols(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise AutodiffError("concat_cols needs at least one tensor")
    rows = tensors[0].values.shape[0]
    if any(t.values.shape[0] != rows for t in tensors):
        raise AutodiffError("concat_cols operands must share their row count")
    out = Tensor(np.concatenate([t.values for t in tensors], axis=1))
    tape = _tape_for(*tensors)
    if tape is not None:
        ids = [tape.watch(t) for t in tensors]
        widths = [t.values.shape[1] for t in tensors]
        offsets = np.concatenate(([0], np.cumsum(widths)))
        needs = [t.requires_grad for t in tensors]

        def bwd(g):
            return tuple(
                g[:, offsets[k]:offsets[k + 1]] if needs[k] else None
                for k in range(len(widths))
            )

        tape._record(out, ids, bwd)
    return out


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.values.shape[0]
    if not (0 <= start < stop <= n):
        raise AutodiffError(f"row slice [{start}:{stop}] out of range for {n} rows")
    out_vals = x.values[start:stop].copy()

    def grad_fn(g):
        gx = np.zeros_like(x.values)
        gx[start:stop] = g
        return gx

    return _unary(x, out_vals, grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _unary(x, np.where(mask, x.values, 0.0), lambda g: g * mask)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.values > 0
    out_vals = np.where(mask, x.values, slope * x.values)
    return _unary(x, out_vals, lambda g: g * np.where(mask, 1.0, slope))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _sigmoid_grad(out_vals: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * out_vals * (1.0 - out_vals)


def sigmoid(x: Tensor) -> Tensor:
    out_vals = _stable_sigmoid(x.values)
    return _unary(x, out_vals, lambda g: _sigmoid_grad(out_vals, g))


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise AutodiffError("log requires strictly positive input; clamp first")
    xv = x.values
    return _unary(x, np.log(xv), lambda g: g / xv)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only through unclipped entries."""
    if lo >= hi:
        raise AutodiffError("clamp needs lo < hi")
    inside = (x.values > lo) & (x.values < hi)
    return _unary(x, np.clip(x.values, lo, hi), lambda g: g * inside)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, x.values * c, lambda g: g * c)


def sum_all(x: Tensor) -> Tensor:
    out_vals = np.array([[x.values.sum()]])
    shape = x.values.shape
    return _unary(x, out_vals, lambda g: np.full(shape, g[0, 0]))


def row_l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm below eps pass through."""
    norms = np.linalg.norm(x.values, axis=1, keepdims=True)
    degenerate = norms < eps
    safe = np.where(degenerate, 1.0, norms)
    out_vals = x.values / safe
    yv = out_vals

    def grad_fn(g):
        dots = (yv * g).sum(axis=1, keepdims=True)
        gx = (g - yv * dots) / safe
        return np.where(degenerate, g, gx)

    return _unary(x, out_vals, grad_fn)


def row_softmax_masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax per row over the entries where ``mask`` is True; rest are zero.

    An all-masked row means a node reached attention without even a
    self-loop, which is a caller bug, so it raises.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.values.shape:
        raise AutodiffError("mask shape must match input shape")
    if np.any(~mask.any(axis=1)):
        raise AutodiffError("softmax over an all-masked row")
    shifted = np.where(mask, x.values, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    expd = np.where(mask, np.exp(shifted), 0.0)
    out_vals = expd / expd.sum(axis=1, keepdims=True)
    yv = out_vals

    def grad_fn(g):
        dots = (yv * g).sum(axis=1, keepdims=True)
        return yv * (g - dots)

    return _unary(x, out_vals, grad_fn)


def mean_rows_masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row i of the output is the mean of x's rows selected by mask row i.

    Rows selecting nothing yield zeros. ``mask`` has shape
    (output rows, input rows).
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.shape[1] != x.values.shape[0]:
        raise AutodiffError("mask must be (n_out, n_in) with n_in matching x rows")
    counts = mask.sum(axis=1, keepdims=True).astype(np.float64)
    weights = np.where(counts > 0, mask / np.where(counts == 0, 1.0, counts), 0.0)
    out_vals = weights @ x.values
    return _unary(x, out_vals, lambda g: weights.T @ g)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows by index, duplicates allowed; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise AutodiffError("gather index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.values.shape[0]):
        raise AutodiffError("gather index out of range")
    out_vals = x.values[idx]
    shape = x.values.shape

    def grad_fn(g):
        gx = np.zeros(shape)
        kernels.scatter_add_rows(gx, idx, g)
        return gx

    return _unary(x, out_vals, grad_fn)


def _segment_starts(indptr: np.ndarray):
    counts = np.diff(indptr)
    nonempty = np.flatnonzero(counts > 0)
    return counts, nonempty


def segment_sum(x: Tensor, indptr: np.ndarray, n_segments: int) -> Tensor:
    """Sum contiguous row blocks delimited by ``indptr`` into one row each."""
    indptr = np.asarray(indptr, dtype=np.int64)
    if indptr.size != n_segments + 1 or indptr[-1] != x.values.shape[0]:
        raise AutodiffError("indptr does not partition the input rows")
    counts = np.diff(indptr)
    out_vals = kernels.segment_sum_rows(indptr, x.values, n_segments)

    def grad_fn(g):
        return np.repeat(g, counts, axis=0)

    return _unary(x, out_vals, grad_fn)


def segment_softmax(x: Tensor, indptr: np.ndarray) -> Tensor:
    """Softmax within each contiguous row block of a single-column tensor."""
    indptr = np.asarray(indptr, dtype=np.int64)
    if x.values.shape[1] != 1:
        raise AutodiffError("segment_softmax expects a single-column tensor")
    if indptr[-1] != x.values.shape[0]:
        raise AutodiffError("indptr does not partition the input rows")
    counts, nonempty = _segment_starts(indptr)
    v = x.values[:, 0]
    seg_max = np.zeros(indptr.size - 1)
    if v.size:
        seg_max[nonempty] = np.maximum.reduceat(v, indptr[nonempty])
    shifted = np.exp(v - np.repeat(seg_max, counts))
    seg_sum = np.zeros(indptr.size - 1)
    if v.size:
        seg_sum[nonempty] = np.add.reduceat(shifted, indptr[nonempty])
    out_vals = (shifted / np.repeat(seg_sum, counts))[:, None]
    yv = out_vals[:, 0]

    def grad_fn(g):
        gy = g[:, 0]
        dots = np.zeros(indptr.size - 1)
        if gy.size:
            dots[nonempty] = np.add.reduceat(yv * gy, indptr[nonempty])
        return (yv * (gy - np.repeat(dots, counts)))[:, None]

    return _unary(x, out_vals, grad_fn)


def sparse_matmul(op: SparseOp, x: Tensor) -> Tensor:
    """Product of a fixed sparse operator with a dense tracked tensor."""
    out_vals = op.matmul(x.values)
    return _unary(x, out_vals, lambda g: op.t_matmul(g))


def weighted_neighbor_sum(alpha: Tensor, feats: Tensor, col_idx, indptr) -> Tensor:
    """Per-segment sum of ``alpha``-scaled rows of ``feats``.

    Segment i of the output is sum over its edges e of
    alpha[e] * feats[col_idx[e]]; this is the attention-weighted neighbor
    combination, fused so no edge-by-feature intermediate is materialized.
    """
    col_idx = np.asarray(col_idx, dtype=np.int64)
    indptr = np.asarray(indptr, dtype=np.int64)
    if alpha.values.shape != (col_idx.size, 1):
        raise AutodiffError("alpha must be one column with one row per edge")
    if indptr[-1] != col_idx.size:
        raise AutodiffError("indptr does not partition the edges")
    if col_idx.size and col_idx.max() >= feats.values.shape[0]:
        raise AutodiffError("edge column index out of range")
    av = alpha.values[:, 0]
    fv = feats.values
    out = Tensor(kernels.weighted_neighbor_sum(indptr, col_idx, av, fv))
    tape = _tape_for(alpha, feats)
    if tape is not None:
        ia, ifeats = tape.watch(alpha), tape.watch(feats)
        na, nf = alpha.requires_grad, feats.requires_grad

        def bwd(g):
            galpha, gfeats = kernels.weighted_neighbor_sum_grads(
                indptr, col_idx, av, fv, g, fv.shape[0]
            )
            return (galpha[:, None] if na else None, gfeats if nf else None)

        tape._record(out, (ia, ifeats), bwd)
    return out
