"""A small reverse-mode autodiff tape over real float64 arrays.

Only the primitives the two networks need are provided: einsum, fixed-index
gathers, block-sparse and constant sparse linear maps, 2D convolution, relu,
elementwise add/sub/scale, reshape/transpose, stacking and the MSE loss.
Complex quantities are carried as (real, imag) pairs by the caller.

Usage::

    tape = Tape()
    x = tape.param(arr)          # leaf that receives a gradient
    y = tape.einsum("ij,j->i", A, x)
    loss = tape.mse(y, target)
    tape.backward(loss)
    x.grad
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["Var", "Tape", "TapeError"]


class TapeError(RuntimeError):
    """A variable does not belong to the tape or the replay diverged."""


class Var:
    __slots__ = ("value", "grad", "tape", "index", "requires_grad")

    def __init__(self, value, tape, index, requires_grad):
        self.value = value
        self.grad = None
        self.tape = tape
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, grad={self.requires_grad})"


class _Node:
    __slots__ = ("name", "inputs", "out", "fwd", "bwd")

    def __init__(self, name, inputs, out, fwd, bwd):
        self.name, self.inputs, self.out, self.fwd, self.bwd = name, inputs, out, fwd, bwd


def _parse(spec):
    lhs, out = spec.replace(" ", "").split("->")
    return lhs.split(","), out


def _einsum_grad(spec, values, k, g):
    """Gradient of ``einsum(spec, *values)`` with respect to operand ``k``."""
    ins, out = _parse(spec)
    target = ins[k]
    others = [v for i, v in enumerate(values) if i != k]
    other_specs = [s for i, s in enumerate(ins) if i != k]
    present = set(out).union(*other_specs) if other_specs else set(out)
    keep = "".join(c for c in target if c in present)
    # indices summed away inside operand k alone: broadcast back afterwards
    res = np.einsum(",".join([out] + other_specs) + "->" + keep, g, *others)
    if keep != target:
        res = res.reshape([res.shape[keep.index(c)] if c in keep else 1 for c in target])
        res = np.broadcast_to(res, values[k].shape).copy()
    return res


class Tape:
    """Records primitive operations and runs them backwards."""

    def __init__(self):
        self.nodes = []
        self.vars = []
        self.params = []

    # -- leaves ------------------------------------------------------------

    def _new(self, value, requires_grad):
        v = Var(np.asarray(value, dtype=float), self, len(self.vars), requires_grad)
        self.vars.append(v)
        return v

    def param(self, value) -> Var:
        v = self._new(value, True)
        self.params.append(v)
        return v

    def const(self, value) -> Var:
        return self._new(value, False)

    def _check(self, *xs):
        for x in xs:
            if not isinstance(x, Var) or x.tape is not self:
                raise TapeError("operand is not a variable of this tape")

    def _record(self, name, inputs, fwd, bwd):
        self._check(*inputs)
        out = self._new(fwd(*[x.value for x in inputs]),
                        any(x.requires_grad for x in inputs))
        self.nodes.append(_Node(name, inputs, out, fwd, bwd))
        return out

    # -- primitives --------------------------------------------------------

    def einsum(self, spec, *xs) -> Var:
        def fwd(*v):
            return np.einsum(spec, *v)

        def bwd(g, *v):
            return [_einsum_grad(spec, v, k, g) for k in range(len(v))]
        return self._record("einsum", list(xs), fwd, bwd)

    def add(self, a, b) -> Var:
        return self._record("add", [a, b], np.add, lambda g, x, y: [g, g])

    def sub(self, a, b) -> Var:
        return self._record("sub", [a, b], np.subtract, lambda g, x, y: [g, -g])

    def scale(self, a, c: float) -> Var:
        return self._record("scale", [a], lambda x: c * x, lambda g, x: [c * g])

    def relu(self, a) -> Var:
        return self._record("relu", [a], lambda x: np.maximum(x, 0.0),
                            lambda g, x: [g * (x > 0)])

    def reshape(self, a, shape) -> Var:
        return self._record("reshape", [a], lambda x: x.reshape(shape),
                            lambda g, x: [g.reshape(x.shape)])

    def transpose(self, a, axes) -> Var:
        inv = np.argsort(axes)
        return self._record("transpose", [a], lambda x: np.transpose(x, axes),
                            lambda g, x: [np.transpose(g, inv)])

    def stack(self, xs, axis) -> Var:
        def fwd(*v):
            return np.stack(v, axis=axis)

        def bwd(g, *v):
            return [np.take(g, k, axis=axis) for k in range(len(v))]
        return self._record("stack", list(xs), fwd, bwd)

    def concat(self, xs, axis) -> Var:
        sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

        def fwd(*v):
            return np.concatenate(v, axis=axis)

        def bwd(g, *v):
            return np.split(g, sizes, axis=axis)
        return self._record("concat", list(xs), fwd, bwd)

    def gather(self, a, index, axis) -> Var:
        """``np.take(a, index, axis)`` for a fixed integer index array."""
        index = np.asarray(index)

        def bwd(g, x):
            out = np.zeros_like(x)
            gm = np.moveaxis(g, list(range(axis, axis + index.ndim)),
                             list(range(index.ndim)))
            om = np.moveaxis(out, axis, 0)
            np.add.at(om, index, gm)
            return [out]
        return self._record("gather", [a], lambda x: np.take(x, index, axis=axis), bwd)

    def sparse_map(self, a, M: sp.spmatrix, axis: int = -1) -> Var:
        """Apply a constant sparse matrix along ``axis``."""
        M = sp.csr_matrix(M)
        MT = M.T.tocsr()

        def apply(mat, x):
            xm = np.moveaxis(x, axis, -1)
            flat = xm.reshape(-1, xm.shape[-1])
            y = (mat @ flat.T).T.reshape(xm.shape[:-1] + (mat.shape[0],))
            return np.moveaxis(y, -1, axis)
        return self._record("sparse_map", [a], lambda x: apply(M, x),
                            lambda g, x: [apply(MT, g)])

    def bsmm(self, W, X, row_idx, col_idx, n_out) -> Var:
        """Block-sparse left multiply ``Y = A X`` with trainable blocks.

        ``A`` has ``n_out`` rows; block ``k`` is ``W[k]`` placed at rows
        ``row_idx[k]`` and columns ``col_idx[k]``. ``X`` has shape
        ``(batch, n_in, ncols)``.
        """
        row_idx = np.asarray(row_idx)
        col_idx = np.asarray(col_idx)
        nb, bh = row_idx.shape
        rows = row_idx.ravel()
        S = sp.csr_matrix((np.ones(rows.size), (rows, np.arange(rows.size))),
                          shape=(n_out, rows.size))
        ST = S.T.tocsr()

        def scatter(P):
            z, _, c = P.shape
            return (S @ P.transpose(1, 0, 2).reshape(rows.size, -1)).reshape(n_out, z, c).transpose(1, 0, 2)

        def fwd(w, x):
            P = np.einsum("kab,zkbc->zkac", w, x[:, col_idx])
            return scatter(P.reshape(x.shape[0], rows.size, x.shape[2]))

        def bwd(g, w, x):
            z, _, c = g.shape
            gP = (ST @ g.transpose(1, 0, 2).reshape(n_out, -1)).reshape(rows.size, z, c)
            gP = gP.transpose(1, 0, 2).reshape(z, nb, bh, c)
            Xg = x[:, col_idx]
            dW = np.einsum("zkac,zkbc->kab", gP, Xg)
            dXg = np.einsum("kab,zkac->zkbc", w, gP)
            dX = np.zeros_like(x)
            np.add.at(dX, (slice(None), col_idx.ravel()), dXg.reshape(z, -1, c))
            return [dW, dX]
        return self._record("bsmm", [W, X], fwd, bwd)

    def conv2d(self, x, K, b) -> Var:
        """Stride-1 'same' cross-correlation.

        ``x`` is ``(batch, c_in, H, W)``, ``K`` is ``(c_out, c_in, k, k)`` with
        odd ``k``, ``b`` is ``(c_out,)``.
        """
        k = K.shape[-1]
        p = k // 2

        def windows(v):
            vp = np.pad(v, ((0, 0), (0, 0), (p, p), (p, p)))
            return sliding_window_view(vp, (k, k), axis=(2, 3))

        def fwd(v, w, bias):
            return np.einsum("bchwxy,ocxy->bohw", windows(v), w) + bias[None, :, None, None]

        def bwd(g, v, w, bias):
            dK = np.einsum("bchwxy,bohw->ocxy", windows(v), g)
            db = g.sum(axis=(0, 2, 3))
            H, Wd = v.shape[2:]
            dxp = np.zeros((v.shape[0], v.shape[1], H + 2 * p, Wd + 2 * p))
            for a in range(k):
                for c in range(k):
                    dxp[:, :, a:a + H, c:c + Wd] += np.einsum("bohw,oc->bchw", g, w[:, :, a, c])
            return [dxp[:, :, p:p + H, p:p + Wd], dK, db]
        return self._record("conv2d", [x, K, b], fwd, bwd)

    def mse(self, pred, target) -> Var:
        """Mean of squared differences over every entry (a scalar)."""
        def fwd(p, t):
            return np.asarray(np.mean((p - t) ** 2))

        def bwd(g, p, t):
            d = 2.0 * g * (p - t) / p.size
            return [d, -d]
        return self._record("mse", [pred, target], fwd, bwd)

    # -- execution ---------------------------------------------------------

    def backward(self, out: Var, seed=None) -> None:
        """Accumulate ``d out / d v`` into ``v.grad`` for every parameter ``v``."""
        self._check(out)
        grads = {out.index: np.ones_like(out.value) if seed is None else np.asarray(seed, float)}
        for node in reversed(self.nodes):
            g = grads.pop(node.out.index, None)
            if g is None or not node.out.requires_grad:
                continue
            parts = node.bwd(g, *[x.value for x in node.inputs])
            for x, gx in zip(node.inputs, parts):
                if not x.requires_grad:
                    continue
                gx = np.asarray(gx)
                if x.index in grads:
                    grads[x.index] = grads[x.index] + gx
                else:
                    grads[x.index] = gx
        for v in self.params:
            v.grad = grads.get(v.index, np.zeros_like(v.value))

    def replay(self) -> None:
        """Recompute every node from current leaf values; raise if any output changes.

        Leaves are not modified, so a replay after recording must reproduce the
        primal values bit for bit.
        """
        for node in self.nodes:
            val = node.fwd(*[x.value for x in node.inputs])
            if val.shape != node.out.value.shape or not np.array_equal(val, node.out.value):
                raise TapeError(f"replay of {node.name} diverged")
            node.out.value = val
