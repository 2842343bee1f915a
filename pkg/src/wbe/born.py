"""Linearized scattering: the Born map, its equivariant adjoint, and filtered back-projection.

Conventions
-----------
Data matrices are indexed ``[m, n]`` = (receiver ``r_m``, source ``s_n``).
The normalized Born map is

    (F eta)[m, n] = h^2 sum_y exp(-i omega (r_m - s_n) . y) eta(y)

and its adjoint, with the angular quadrature weight ``(2 pi / n_sc)^2``, is

    (F* Lam)(y) = (2 pi / n_sc)^2 sum_{m,n} exp(i omega (r_m - s_n) . y) Lam[m, n].

On the polar grid the adjoint reduces to ``diag(K* Lam_j K)`` with the
kernel ``K[m, i] = exp(-i omega rho_i cos t_m)`` shared by every angle
``theta_j`` -- which is what makes it exactly rotation equivariant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .core import FrequencySet, Grids
from .helmholtz import FarField, WideBandData
from .media import Medium

__all__ = [
    "Kernel",
    "PolarField",
    "FbpConfig",
    "FbpResult",
    "build_kernel",
    "apply_F",
    "shift_data",
    "adjoint_impl1",
    "adjoint_impl2",
    "adjoint_on_grid",
    "polar_to_cart",
    "polar_to_cart_matrix",
    "apply_normal",
    "fbp_reconstruct",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Kernel:
    """``K[m, i] = exp(-i omega rho_i cos t_m)`` and its split ``K = C - iS``."""

    K: np.ndarray
    omega: float

    @property
    def C(self) -> np.ndarray:
        return self.K.real

    @property
    def S(self) -> np.ndarray:
        return -self.K.imag


@dataclass(frozen=True)
class PolarField:
    """Back-projected field on the ``(theta_j, rho_i)`` grid, shape ``(n_theta, n_rho)``."""

    alpha: np.ndarray
    omega: float


@dataclass(frozen=True)
class FbpConfig:
    """Tikhonov filtered back-projection settings.

    ``epsilon`` is relative to the largest eigenvalue of ``F*F`` (estimated by
    20 power iterations) unless ``relative`` is false.
    """

    epsilon: float = 1e-2
    relative: bool = True
    cg_tol: float = 1e-6
    cg_max_iter: int = 500
    operator: str = "composed"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.operator not in ("composed", "grid"):
            raise ValueError("operator must be 'composed' or 'grid'")


def build_kernel(omega: float, grids: Grids) -> Kernel:
    phase = omega * np.outer(np.cos(grids.angles), grids.rho)
    return Kernel(np.cos(phase) - 1j * np.sin(phase), float(omega))


def _values(data) -> np.ndarray:
    return data.values if isinstance(data, FarField) else np.asarray(data)


def apply_F(medium, omega: float, grids: Grids) -> FarField:
    """Normalized Born data of ``medium`` by trapezoidal quadrature on the Cartesian nodes."""
    eta = medium.grid if isinstance(medium, Medium) else np.asarray(medium)
    X, Y = grids.mesh()
    a = grids.angles
    c, s = np.cos(a), np.sin(a)
    # exp(-i w (r - s).y) = exp(-i w r.y) * exp(+i w s.y)
    Er = np.exp(-1j * omega * (np.multiply.outer(c, X) + np.multiply.outer(s, Y)))
    Er = Er.reshape(grids.n_sc, -1)
    lam = grids.h ** 2 * (Er * eta.ravel()) @ Er.conj().T
    return FarField(lam, float(omega), grids.R, normalized=True)


def shift_data(data, j: int):
    """Rotate data in both angles: ``out[m, n] = in[(m + j) % n_sc, (n + j) % n_sc]``."""
    lam = _values(data)
    out = np.roll(lam, (-j, -j), axis=(-2, -1))
    if isinstance(data, FarField):
        return FarField(out, data.omega, data.R, data.normalized)
    return out


@lru_cache(maxsize=32)
def shift_indices(n_sc: int) -> np.ndarray:
    """Flat gather indices ``I[j, m, n]`` realising :func:`shift_data` for every ``j``."""
    j = np.arange(n_sc)[:, None, None]
    m = np.arange(n_sc)[None, :, None]
    n = np.arange(n_sc)[None, None, :]
    return ((m + j) % n_sc) * n_sc + (n + j) % n_sc


def _all_shifts(lam: np.ndarray) -> np.ndarray:
    n = lam.shape[-1]
    return lam.reshape(lam.shape[:-2] + (n * n,))[..., shift_indices(n)]


def adjoint_impl2(data, kernel: Kernel, grids: Grids) -> PolarField:
    """Complex back-projection, row ``j`` = ``w diag(K* Lam_j K)``."""
    lam = _values(data)
    K = kernel.K
    shifted = _all_shifts(lam)                   # (j, m, n)
    right = shifted @ K                          # (j, m, i)
    alpha = np.einsum("mi,jmi->ji", K.conj(), right)
    return PolarField(grids.quad_weight * alpha, kernel.omega)


def adjoint_impl1(data, kernel: Kernel, grids: Grids) -> PolarField:
    """Real back-projection from the four-term cosine/sine expansion.

    Equal to the real part of :func:`adjoint_impl2`.
    """
    lam = _values(data)
    C, S = kernel.C, kernel.S
    sh = _all_shifts(lam)
    LR, LI = sh.real, sh.imag
    ones = np.ones(grids.n_sc)
    alpha = (ones @ (C * (LR @ C)) + ones @ (S * (LR @ S))
             + ones @ (C * (LI @ S)) - ones @ (S * (LI @ C)))
    return PolarField(grids.quad_weight * alpha, kernel.omega)


def adjoint_on_grid(data, omega: float, grids: Grids, points: np.ndarray | None = None) -> np.ndarray:
    """Exact adjoint evaluated at arbitrary points (default: the Cartesian nodes).

    Returns a complex array; with ``points=None`` the result has the medium's shape.
    """
    lam = _values(data)
    if points is None:
        X, Y = grids.mesh()
        pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    else:
        pts = np.asarray(points)
    a = grids.angles
    # exp(i w r_m.y) Lam[m, n] exp(-i w s_n.y)
    E = np.exp(1j * omega * (pts[:, 0:1] * np.cos(a) + pts[:, 1:2] * np.sin(a)))
    val = grids.quad_weight * np.einsum("pm,mn,pn->p", E, lam, E.conj())
    return val.reshape(grids.n_eta, grids.n_eta) if points is None else val


def _lagrange3(t: np.ndarray) -> np.ndarray:
    # weights at nodes -1, 0, +1 for offset t from the middle node
    return np.stack([t * (t - 1) / 2, (1 - t) * (1 + t), t * (t + 1) / 2], axis=-1)


@lru_cache(maxsize=32)
def polar_to_cart_matrix(grids: Grids) -> sp.csr_matrix:
    """Sparse ``(n_eta^2, n_theta * n_rho)`` quadratic-interpolation matrix.

    Separable three-point Lagrange stencils in ``rho`` and (periodic) ``theta``;
    nodes outside ``rho_max`` use ``rho = rho_max``. At the origin the angle
    is undefined, so that node averages the radial stencil over every angle;
    this keeps the map exactly equivariant under quarter turns.
    """
    X, Y = grids.mesh()
    x, y = X.ravel(), Y.ravel()
    rho = np.minimum(np.hypot(x, y), grids.rho_max)
    theta = np.mod(np.arctan2(y, x), 2 * np.pi)
    n_t, n_r = grids.n_theta, grids.n_rho
    dr = 1.0 / (2 * n_r)
    dt = 2 * np.pi / n_t

    if n_r >= 3:
        ir = np.clip(np.floor(rho / dr + 0.5).astype(int), 1, n_r - 2)
        wr = _lagrange3(rho / dr - ir)
        r_idx = ir[:, None] + np.array([-1, 0, 1])
    else:
        r_idx = np.zeros((x.size, 1), dtype=int)
        wr = np.ones((x.size, 1))
    jt = np.floor(theta / dt + 0.5).astype(int)
    wt = _lagrange3(theta / dt - jt)
    t_idx = np.mod(jt[:, None] + np.array([-1, 0, 1]), n_t)

    rows = np.repeat(np.arange(x.size), wt.shape[1] * wr.shape[1])
    cols = (t_idx[:, :, None] * n_r + r_idx[:, None, :]).reshape(-1)
    vals = (wt[:, :, None] * wr[:, None, :]).reshape(-1)
    origin = np.flatnonzero(np.hypot(x, y) == 0)
    keep = ~np.isin(rows, origin)
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    for o in origin:
        k = wr.shape[1]
        rows = np.concatenate([rows, np.full(n_t * k, o)])
        cols = np.concatenate([cols, (np.arange(n_t)[:, None] * n_r + r_idx[o][None, :]).ravel()])
        vals = np.concatenate([vals, np.tile(wr[o] / n_t, n_t)])
    M = sp.csr_matrix((vals, (rows, cols)), shape=(x.size, n_t * n_r))
    M.sum_duplicates()
    return M


def polar_to_cart(field, grids: Grids) -> np.ndarray:
    """Interpolate a polar field onto the Cartesian nodes."""
    alpha = field.alpha if isinstance(field, PolarField) else np.asarray(field)
    M = polar_to_cart_matrix(grids)
    flat = alpha.reshape(alpha.shape[:-2] + (-1,))
    out = (M @ flat.reshape(-1, flat.shape[-1]).T).T
    return out.reshape(alpha.shape[:-2] + (grids.n_eta, grids.n_eta))


def back_project(data, omega: float, grids: Grids, operator: str = "composed") -> np.ndarray:
    """Cartesian back-projection ``F* Lam`` (real part), via the polar grid or exactly."""
    if operator == "grid":
        return adjoint_on_grid(data, omega, grids).real
    pf = adjoint_impl2(data, build_kernel(omega, grids), grids)
    return polar_to_cart(pf.alpha.real, grids)


def _normal_single(eta, omega, grids, operator="composed"):
    return back_project(apply_F(eta, omega, grids), omega, grids, operator)


def apply_normal(eta, freqs, grids: Grids, operator: str = "composed") -> np.ndarray:
    """``sum_omega F*F eta``, applied compositionally (the kernel is never formed).

    ``freqs`` may be a :class:`FrequencySet` or a sequence of angular frequencies.
    """
    eta = eta.grid if isinstance(eta, Medium) else np.asarray(eta, dtype=float)
    omegas = freqs.omegas if isinstance(freqs, FrequencySet) else np.atleast_1d(freqs)
    return sum(_normal_single(eta, w, grids, operator) for w in omegas)


def _power_iteration(op, shape, steps=20, seed=0):
    v = np.random.default_rng(seed).standard_normal(shape)
    lam = 0.0
    for _ in range(steps):
        v /= np.linalg.norm(v)
        w = op(v)
        lam = float(np.vdot(v, w).real)
        v = w
    return abs(lam)


@dataclass
class FbpResult:
    """Reconstruction plus per-frequency solver diagnostics."""

    eta: np.ndarray
    converged: bool
    iterations: list
    residuals: list
    epsilons: list


def _cg(op, b, tol, max_iter):
    """Conjugate gradients on ``op x = b``; stops on ``||r|| <= tol ||b||``.

    Returns ``(x, converged, iterations, relative residual)``; on failure the
    iterate with the smallest residual is returned.
    """
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return x, True, 0, 0.0
    r = b.copy()
    p = r.copy()
    rr = np.vdot(r, r).real
    best, best_res = x.copy(), 1.0
    for it in range(1, max_iter + 1):
        Ap = op(p)
        pAp = np.vdot(p, Ap).real
        if pAp <= 0:
            break
        a = rr / pAp
        x = x + a * p
        r = r - a * Ap
        rr_new = np.vdot(r, r).real
        res = np.sqrt(rr_new) / bnorm
        if res < best_res:
            best, best_res = x.copy(), res
        if res <= tol:
            # confirm against the true residual, not the recursion
            true_res = np.linalg.norm(b - op(x)) / bnorm
            if true_res <= tol:
                return x, True, it, true_res
            r = b - op(x)
            rr_new = np.vdot(r, r).real
        p = r + (rr_new / rr) * p
        rr = rr_new
    return best, False, max_iter, best_res


def fbp_reconstruct(data, config: FbpConfig, grids: Grids, freqs=None) -> FbpResult:
    """Tikhonov-filtered back-projection averaged over frequencies.

    For each frequency, solve ``(F*F + eps I) eta = F* Lam`` by conjugate
    gradients on the Cartesian grid, then average the per-frequency solutions.

    Parameters
    ----------
    data : WideBandData, FarField, or sequence of FarField
        Normalized data for one sample. A :class:`WideBandData` must hold a
        single sample (``N == 1``) or be indexed beforehand.
    """
    fields = _as_fields(data, freqs, grids)
    sols, its, ress, eps_used = [], [], [], []
    converged = True
    for ff in fields:
        w = ff.omega
        normal = lambda v, w=w: _normal_single(v, w, grids, config.operator)
        eps = config.epsilon
        if config.relative:
            eps *= _power_iteration(normal, (grids.n_eta, grids.n_eta))
        rhs = back_project(ff, w, grids, config.operator)
        x, ok, it, res = _cg(lambda v: normal(v) + eps * v, rhs, config.cg_tol, config.cg_max_iter)
        if not ok:
            log.warning("CG did not converge at omega=%.3f (residual %.2e)", w, res)
        converged &= ok
        sols.append(x)
        its.append(it)
        ress.append(res)
        eps_used.append(eps)
    return FbpResult(np.mean(sols, axis=0), converged, its, ress, eps_used)


def _as_fields(data, freqs, grids):
    if isinstance(data, FarField):
        return [data]
    if isinstance(data, WideBandData):
        lam = data.lam
        if lam.ndim == 4:
            if lam.shape[0] != 1:
                raise ValueError("fbp_reconstruct takes one sample; index the dataset first")
            lam = lam[0]
        return [FarField(l, w, grids.R, True) for l, w in zip(lam, data.omegas)]
    data = list(data)
    if data and isinstance(data[0], FarField):
        return data
    if freqs is None:
        raise ValueError("raw arrays need an explicit frequency set")
    omegas = freqs.omegas if isinstance(freqs, FrequencySet) else np.asarray(freqs)
    return [FarField(np.asarray(l), w, grids.R, True) for l, w in zip(data, omegas)]
