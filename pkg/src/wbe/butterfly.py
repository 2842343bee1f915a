"""Butterfly factorization of complementary low-rank kernels.

A matrix ``K`` of size ``(2^L s) x (2^L s')`` is complementary low rank when,
at every level ``l``, splitting the rows into ``2^l`` blocks and the columns
into ``2^(L-l)`` blocks leaves every block numerically low rank. Such a matrix
factors as

    K ~ U^L G^(L-1) ... G^h M H^h* ... H^(L-1)* V^L*,    h = L / 2,

a product of ``L + 3`` block-sparse matrices with ``O(r^2 N L)`` entries.

Layout of the intermediate spaces
---------------------------------
At level ``l`` the row-side basis space holds one ``r``-vector per block
pair ``(i, j)`` (``i`` a row block at level ``l``, ``j`` a column block), at
offset ``(i * 2^(L-l) + j) * r``. The column side uses the same layout with
the roles of rows and columns swapped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import Grids, read_tensor, write_tensor

__all__ = [
    "BlockSparse",
    "ButterflyFactors",
    "RankReport",
    "build_kernel_matrix",
    "check_complementary_lowrank",
    "butterfly_factorize",
    "butterfly_apply",
    "sandwich_apply",
    "numerical_rank",
    "save_factors",
    "load_factors",
    "split_size",
]


def build_kernel_matrix(omega: float, grids: Grids) -> np.ndarray:
    """``K[m, i] = exp(-i omega rho_i cos t_m)`` as a dense complex array."""
    from .born import build_kernel
    return build_kernel(omega, grids).K


def split_size(n: int, L: int) -> int:
    """Leaf size ``s`` with ``n = 2^L s``; raises ``ValueError`` otherwise."""
    if L < 0 or n % (1 << L):
        raise ValueError(f"size {n} is not of the form 2^{L} * s")
    return n >> L


# ---------------------------------------------------------------------------
# rank sweep
# ---------------------------------------------------------------------------

def numerical_rank(block: np.ndarray, tol: float) -> int:
    """Number of singular values above ``tol`` times the largest one (0 for a zero block)."""
    if block.size == 0:
        return 0
    sv = np.linalg.svd(block, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > tol * sv[0]))


@dataclass
class RankReport:
    """Per-level block ranks of a complementary low-rank sweep."""

    L: int
    tol: float
    ranks: dict                      # level -> (2^l, 2^(L-l)) int array
    max_rank: int

    def level_max(self) -> dict:
        return {l: int(r.max()) for l, r in self.ranks.items()}


def _default_levels(n: int) -> int:
    # deepest partition that still leaves leaves of at least 4 entries
    L = 0
    while n % (1 << (L + 1)) == 0 and n >> (L + 1) >= 4:
        L += 1
    return L


def check_complementary_lowrank(matrix, level: int | None = None, tol: float = 1e-8,
                                L: int | None = None) -> RankReport:
    """Numerical ranks of every block of the level partitions of ``matrix``.

    At level ``l`` the rows are split ``2^l`` ways and the columns ``2^(L-l)``
    ways. With ``level=None`` every level ``0 .. L`` is swept.

    Parameters
    ----------
    L : int, optional
        Partition depth. Defaults to the deepest split of the smaller side that
        leaves blocks of at least four entries (``L = 4`` for ``N = 64``).
    """
    A = np.asarray(matrix)
    nr, nc = A.shape
    if L is None:
        L = _default_levels(min(nr, nc))
    split_size(nr, L)
    split_size(nc, L)
    levels = range(L + 1) if level is None else [level]
    ranks = {}
    for l in levels:
        if not 0 <= l <= L:
            raise ValueError(f"level {l} outside 0..{L}")
        br, bc = nr >> l, nc >> (L - l)
        R = np.zeros((1 << l, 1 << (L - l)), dtype=int)
        for i in range(R.shape[0]):
            for j in range(R.shape[1]):
                R[i, j] = numerical_rank(A[i * br:(i + 1) * br, j * bc:(j + 1) * bc], tol)
        ranks[l] = R
    return RankReport(L, tol, ranks, max(int(r.max()) for r in ranks.values()))


# ---------------------------------------------------------------------------
# block-sparse storage
# ---------------------------------------------------------------------------

@dataclass
class BlockSparse:
    """Sparse matrix made of equally shaped dense blocks on index sets.

    Block ``k`` adds ``data[k]`` at rows ``row_idx[k]`` and columns
    ``col_idx[k]``. Index sets need not be contiguous, and blocks may share rows
    or columns (their contributions add).
    """

    shape: tuple
    row_idx: np.ndarray              # (nb, bh) int
    col_idx: np.ndarray              # (nb, bw) int
    data: np.ndarray                 # (nb, bh, bw)

    @property
    def block_shape(self) -> tuple:
        return self.data.shape[1:]

    @property
    def n_blocks(self) -> int:
        return self.data.shape[0]

    @property
    def nnz(self) -> int:
        """Stored entries."""
        return int(self.data.size)

    def H(self) -> "BlockSparse":
        """Conjugate transpose."""
        return BlockSparse(self.shape[::-1], self.col_idx, self.row_idx,
                           np.conj(np.swapaxes(self.data, 1, 2)))

    def tosparse(self) -> sp.csr_matrix:
        nb, bh, bw = self.data.shape
        rows = np.broadcast_to(self.row_idx[:, :, None], (nb, bh, bw)).ravel()
        cols = np.broadcast_to(self.col_idx[:, None, :], (nb, bh, bw)).ravel()
        return sp.csr_matrix((self.data.ravel(), (rows, cols)), shape=self.shape)

    def todense(self) -> np.ndarray:
        return self.tosparse().toarray()

    def matmul(self, x: np.ndarray) -> np.ndarray:
        """``self @ x`` for ``x`` of shape ``(n,)`` or ``(n, k)``."""
        if x.shape[0] != self.shape[1]:
            raise ValueError(f"dimension mismatch: {self.shape} @ {x.shape}")
        vec = x.ndim == 1
        X = x[:, None] if vec else x
        prod = np.einsum("kab,kbc->kac", self.data, X[self.col_idx])
        out = np.zeros((self.shape[0], X.shape[1]), dtype=np.result_type(self.data, X))
        np.add.at(out, self.row_idx.ravel(), prod.reshape(-1, X.shape[1]))
        return out[:, 0] if vec else out


# ---------------------------------------------------------------------------
# factorization
# ---------------------------------------------------------------------------

@dataclass
class ButterflyFactors:
    """Factor chain ``[U^L, G^(L-1)..G^h, M, H^h*..H^(L-1)*, V^L*]``.

    ``flops`` counts multiply-adds performed by :func:`butterfly_apply`.
    """

    L: int
    s: int
    s_col: int
    rank: int
    factors: list
    flops: int = field(default=0, repr=False)

    @property
    def h(self) -> int:
        return self.L // 2

    @property
    def shape(self) -> tuple:
        return (self.factors[0].shape[0], self.factors[-1].shape[1])

    @property
    def N(self) -> int:
        return self.shape[0]

    @property
    def U(self) -> BlockSparse:
        return self.factors[0]

    @property
    def G(self) -> list:
        """Row-side transfer factors ``G^(L-1), ..., G^h``."""
        return self.factors[1:1 + self.L - self.h]

    @property
    def M(self) -> BlockSparse:
        return self.factors[1 + self.L - self.h]

    @property
    def H(self) -> list:
        """Column-side transfer factors ``H^h, ..., H^(L-1)`` (not conjugated)."""
        return [f.H() for f in self.factors[2 + self.L - self.h:-1]]

    @property
    def V(self) -> BlockSparse:
        return self.factors[-1].H()

    def stored_entries(self) -> int:
        return sum(f.nnz for f in self.factors)

    def todense(self) -> np.ndarray:
        out = self.factors[-1].tosparse()
        for f in reversed(self.factors[:-1]):
            out = f.tosparse() @ out
        return out.toarray()


def _offset(i, j, l, L, r):
    return ((i << (L - l)) + j) * r


def _svd_r(A, r):
    # thin SVD truncated (or zero-padded) to exactly r columns
    U, S, Vh = np.linalg.svd(A, full_matrices=False)
    k = min(r, S.size)
    Uo = np.zeros((A.shape[0], r), dtype=complex)
    So = np.zeros(r)
    Vo = np.zeros((A.shape[1], r), dtype=complex)
    Uo[:, :k], So[:k], Vo[:, :k] = U[:, :k], S[:k], Vh[:k].conj().T
    return Uo, So, Vo


def _row_chain(bases, sv, L, h, leaf, r):
    """Leaf basis and transfer factors for one side.

    ``bases[(i, j)]`` / ``sv[(i, j)]`` are the stage-one column bases and
    singular values of block ``(i, j)`` at level ``h`` (``i`` indexes the side
    being refined). Returns ``(U_leaf, [G^(L-1), ..., G^h])``.
    """
    dim = r << L
    transfers = []
    for l in range(h, L):
        # children at level l + 1: row block c, column block j' (coarser)
        nrow_c, ncol_c = 1 << (l + 1), 1 << (L - l - 1)
        half = bases[(0, 0)].shape[0] // 2
        cb, csv = {}, {}
        for c in range(nrow_c):
            p, top = divmod(c, 2)
            rows = slice(0, half) if top == 0 else slice(half, 2 * half)
            for jc in range(ncol_c):
                Z = np.hstack([bases[(p, 2 * jc + t)][rows] * sv[(p, 2 * jc + t)] for t in (0, 1)])
                cb[(c, jc)], csv[(c, jc)], _ = _svd_r(Z, r)
        nb = 1 << L
        ri = np.empty((nb, 2 * r), dtype=np.int64)
        ci = np.empty((nb, r), dtype=np.int64)
        data = np.empty((nb, 2 * r, r), dtype=complex)
        k = 0
        for i in range(1 << l):
            for j in range(1 << (L - l)):
                P = bases[(i, j)]
                parts = []
                for t in (0, 1):
                    child = (2 * i + t, j // 2)
                    rows = slice(0, half) if t == 0 else slice(half, 2 * half)
                    parts.append(cb[child].conj().T @ P[rows])
                    o = _offset(child[0], child[1], l + 1, L, r)
                    ri[k, t * r:(t + 1) * r] = np.arange(o, o + r)
                o = _offset(i, j, l, L, r)
                ci[k] = np.arange(o, o + r)
                data[k] = np.vstack(parts)
                k += 1
        transfers.append(BlockSparse((dim, dim), ri, ci, data))
        bases, sv = cb, csv
    nb = 1 << L
    ri = np.empty((nb, leaf), dtype=np.int64)
    ci = np.empty((nb, r), dtype=np.int64)
    data = np.empty((nb, leaf, r), dtype=complex)
    for i in range(nb):
        ri[i] = np.arange(i * leaf, (i + 1) * leaf)
        ci[i] = np.arange(i * r, (i + 1) * r)
        data[i] = bases[(i, 0)]
    U = BlockSparse((leaf << L, dim), ri, ci, data)
    return U, transfers[::-1]


def butterfly_factorize(matrix, L: int, r: int) -> ButterflyFactors:
    """Two-stage butterfly factorization with fixed block rank ``r``.

    Stage one takes a truncated SVD of every block at the middle level
    ``h = L/2``. Stage two walks outwards: the basis of a child block is the
    leading left singular subspace of its parents' halves weighted by their
    singular values, and each transfer block projects a parent half onto it.

    Raises
    ------
    ValueError
        If a side is not ``2^L`` times an integer, ``L`` is odd, or ``r``
        exceeds the smaller side of a middle-level block.
    """
    A = np.asarray(matrix, dtype=complex)
    if L < 0 or L % 2:
        raise ValueError(f"L must be a non-negative even integer, got {L}")
    if r < 1:
        raise ValueError("rank must be >= 1")
    nr, nc = A.shape
    s, sc = split_size(nr, L), split_size(nc, L)
    h = L // 2
    br, bc = nr >> h, nc >> (L - h)
    if r > min(br, bc):
        raise ValueError(f"rank {r} exceeds the middle-level block size {min(br, bc)}")

    Ub, Vb, S = {}, {}, {}
    for i in range(1 << h):
        for j in range(1 << (L - h)):
            u, sv, v = _svd_r(A[i * br:(i + 1) * br, j * bc:(j + 1) * bc], r)
            Ub[(i, j)], Vb[(j, i)], S[(i, j)] = u, v, sv
    Sv = {(j, i): v for (i, j), v in S.items()}

    U, G = _row_chain(Ub, S, L, h, s, r)
    V, Hs = _row_chain(Vb, Sv, L, h, sc, r)

    # M couples row-side pair (i, j) with column-side pair (j, i)
    nb = 1 << L
    ri = np.empty((nb, r), dtype=np.int64)
    ci = np.empty((nb, r), dtype=np.int64)
    data = np.zeros((nb, r, r), dtype=complex)
    k = 0
    for i in range(1 << h):
        for j in range(1 << (L - h)):
            o = _offset(i, j, h, L, r)
            ri[k] = np.arange(o, o + r)
            o = _offset(j, i, L - h, L, r)
            ci[k] = np.arange(o, o + r)
            data[k] = np.diag(S[(i, j)])
            k += 1
    M = BlockSparse((r << L, r << L), ri, ci, data)

    factors = [U, *G, M, *[f.H() for f in Hs[::-1]], V.H()]
    assert len(factors) == L + 3
    return ButterflyFactors(L, s, sc, r, factors)


def butterfly_apply(bf: ButterflyFactors, x: np.ndarray) -> np.ndarray:
    """Apply the factor chain right to left; ``x`` is a vector or a column stack."""
    x = np.asarray(x)
    if x.shape[0] != bf.shape[1]:
        raise ValueError(f"dimension mismatch: factors {bf.shape}, input {x.shape}")
    ncols = 1 if x.ndim == 1 else x.shape[1]
    y = x
    for f in reversed(bf.factors):
        y = f.matmul(y)
        bf.flops += f.nnz * ncols
    return y


def sandwich_apply(bf: ButterflyFactors, data, j: int, grids: Grids | None = None) -> np.ndarray:
    """Row ``j`` of the back-projection through the factored kernel.

    Computes ``w * diag(K* Lam_j K)`` with ``K`` replaced by its factor chain:
    the core ``U* Lam_j U`` is pushed outwards through ``G``, ``M`` and ``H``
    as ``T <- F* T F`` and the diagonal is read off the final ``V`` layer
    blockwise. ``Lam_j`` is the data shifted by ``j``; ``w`` is the angular
    quadrature weight, ``(2 pi / n_sc)^2``.
    """
    from .born import shift_data
    lam = data.values if hasattr(data, "values") else np.asarray(data)
    n = lam.shape[0]
    if lam.shape != (n, n) or n != bf.shape[0]:
        raise ValueError(f"data of shape {lam.shape} does not fit factors {bf.shape}")
    w = (2 * np.pi / n) ** 2 if grids is None else grids.quad_weight
    T = shift_data(lam, j)
    for f in bf.factors[:-1]:
        F = f.tosparse()
        T = (F.conj().T @ (F.conj().T @ T).conj().T).conj().T  # F* T F
    V = bf.factors[-1]  # V^L*, blocks (r, s')
    # diag(V T V*) restricted to each block of V^L*
    out = np.zeros(bf.shape[1], dtype=complex)
    Vb = np.conj(np.swapaxes(V.data, 1, 2))        # (nb, s', r)
    for k in range(V.n_blocks):
        rows = V.row_idx[k]
        Tk = T[np.ix_(rows, rows)]
        out[V.col_idx[k]] += np.einsum("ar,rq,aq->a", Vb[k], Tk, Vb[k].conj())
    return w * out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_factors(bf: ButterflyFactors, directory) -> None:
    """Write one WBT1 tensor of stacked blocks per factor plus ``index.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"L": bf.L, "s": bf.s, "s_col": bf.s_col, "rank": bf.rank, "factors": []}
    for k, f in enumerate(bf.factors):
        name = f"factor_{k:02d}.wbt"
        write_tensor(d / name, f.data.astype(complex))
        meta["factors"].append({"file": name, "shape": list(f.shape),
                                "row_idx": f.row_idx.tolist(), "col_idx": f.col_idx.tolist()})
    (d / "index.json").write_text(json.dumps(meta))


def load_factors(directory) -> ButterflyFactors:
    d = Path(directory)
    meta = json.loads((d / "index.json").read_text())
    factors = []
    for entry in meta["factors"]:
        factors.append(BlockSparse(tuple(entry["shape"]),
                                   np.asarray(entry["row_idx"], dtype=np.int64),
                                   np.asarray(entry["col_idx"], dtype=np.int64),
                                   read_tensor(d / entry["file"])))
    return ButterflyFactors(meta["L"], meta["s"], meta["s_col"], meta["rank"], factors)
