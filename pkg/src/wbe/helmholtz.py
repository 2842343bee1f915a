"""Forward scattering: finite-difference Helmholtz solves with a PML and far-field sampling.

The scattered field solves

    Laplace(u) + omega^2 (1 + eta) u = -omega^2 eta exp(i omega s.x)

on the computational box ``[-L_c, L_c]^2`` (the medium is zero-padded into
it), surrounded by a perfectly matched layer. The receiver circle of radius
``R`` lies inside the box, outside the medium support.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import RegularGridInterpolator
from scipy.special import hankel1

from .core import FrequencySet, Grids
from .media import Medium

__all__ = [
    "HelmholtzConfig",
    "Field",
    "FarField",
    "WideBandData",
    "SolverError",
    "c_nor",
    "solve_scattered",
    "far_field",
    "normalize",
    "simulate_dataset",
    "HelmholtzOperator",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The linear solve missed the residual contract."""


@dataclass(frozen=True)
class HelmholtzConfig:
    """Discretization of the forward problem.

    ``refine`` sets the computational spacing ``h_c = h / refine`` relative to
    the medium grid. ``pml_width`` counts PML nodes appended outside the box on
    each side; when ``None`` it is chosen so the layer is at least
    ``pml_thickness`` thick (and never fewer than 10 nodes).

    ``receiver="sample"`` reads ``u_sc`` at the receivers by bilinear
    interpolation. ``receiver="pattern"`` expands ``u_sc`` on the receiver
    circle in outgoing Hankel modes and evaluates the leading-order
    asymptotic field at radius ``R``, removing the O(1/(omega R)) and Fresnel
    near-field terms that plain sampling carries.
    """

    L_c: float = 1.0
    refine: int = 2
    pml_width: int | None = None
    pml_thickness: float = 0.25
    pml_order: int = 2
    pml_intensity: float = 80.0
    solver_tol: float = 1e-8
    receiver: str = "sample"

    def __post_init__(self):
        if self.receiver not in ("sample", "pattern"):
            raise ValueError("receiver must be 'sample' or 'pattern'")
        if self.pml_width is not None and self.pml_width < 10:
            raise ValueError("pml_width must be >= 10")
        if self.refine < 1:
            raise ValueError("refine must be >= 1")

    def spacing(self, grids: Grids) -> float:
        return grids.h / self.refine

    def width(self, grids: Grids) -> int:
        if self.pml_width is not None:
            return self.pml_width
        return max(10, int(math.ceil(self.pml_thickness / self.spacing(grids) - 1e-9)))


@dataclass(frozen=True)
class Field:
    """Scattered field on the computational mesh (PML nodes included)."""

    values: np.ndarray
    coords: np.ndarray
    omega: float
    s_angle: float
    residual: float


@dataclass(frozen=True)
class FarField:
    """Receiver-by-source data matrix ``values[m, n] = u_sc(R r_m; s_n)``."""

    values: np.ndarray
    omega: float
    R: float = 0.9
    normalized: bool = False

    @property
    def n_sc(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class WideBandData:
    """One normalized far field per frequency, for ``N`` samples.

    ``lam`` has shape ``(N, n_freqs, n_sc, n_sc)``.
    """

    lam: np.ndarray
    freqs: FrequencySet

    @property
    def omegas(self) -> np.ndarray:
        return self.freqs.omegas


def c_nor(omega: float, R: float) -> complex:
    """Leading-order far-field constant ``e^{i pi/4} / sqrt(8 pi omega) * omega^2 * e^{i omega R} / sqrt(R)``."""
    return (np.exp(1j * np.pi / 4) / np.sqrt(8 * np.pi * omega)
            * omega ** 2 * np.exp(1j * omega * R) / np.sqrt(R))


def _pml_profile(coords, L_c, thickness, order, intensity, omega):
    d = np.clip(np.abs(coords) - L_c, 0.0, None)
    sigma = intensity * (d / thickness) ** order
    return 1.0 + 1j * sigma / omega


class HelmholtzOperator:
    """Factorized discrete Helmholtz operator for one (medium, frequency) pair.

    Building the object assembles and LU-factorizes the matrix once; every
    call to :meth:`solve` reuses the factorization for a new plane-wave source.
    """

    def __init__(self, medium: Medium, omega: float, grids: Grids, config: HelmholtzConfig):
        if omega <= 0:
            raise ValueError("omega must be positive")
        if not config.L_c > grids.R:
            raise ValueError(f"computational box L_c={config.L_c} must contain R={grids.R}")
        self.omega = float(omega)
        self.grids = grids
        self.config = config
        hc = config.spacing(grids)
        npml = config.width(grids)
        n_box = int(round(2 * config.L_c / hc))
        if not math.isclose(n_box * hc, 2 * config.L_c, rel_tol=1e-12):
            raise ValueError("L_c must be a multiple of the computational spacing")
        self.hc = hc
        # nodes from -(L_c + npml hc) to +(L_c + npml hc); outermost ring is Dirichlet
        self.coords = hc * np.arange(-(n_box // 2 + npml), n_box // 2 + npml + 1)
        n = self.coords.size
        self.n = n

        ppw = 2 * np.pi / (omega * hc)
        if ppw < 6:
            warnings.warn(f"only {ppw:.1f} points per wavelength on the computational grid")

        self.eta = self._embed(medium.grid, grids)
        thickness = npml * hc
        half = np.concatenate([self.coords - hc / 2, [self.coords[-1] + hc / 2]])
        s_node = _pml_profile(self.coords, config.L_c, thickness, config.pml_order,
                              config.pml_intensity, omega)
        s_half = _pml_profile(half, config.L_c, thickness, config.pml_order,
                              config.pml_intensity, omega)
        m = n - 2
        # 1D stretched second difference on interior nodes 1..n-2
        inner = slice(1, n - 1)
        a_minus = 1.0 / (s_node[inner] * s_half[1:n - 1] * hc ** 2)
        a_plus = 1.0 / (s_node[inner] * s_half[2:n] * hc ** 2)
        D = sp.diags([a_minus[1:], -(a_minus + a_plus), a_plus[:-1]], [-1, 0, 1],
                     shape=(m, m), format="csr")
        I = sp.identity(m, format="csr")
        k2 = omega ** 2 * (1.0 + self.eta[inner, inner]).ravel()
        self.A = (sp.kron(D, I) + sp.kron(I, D) + sp.diags(k2)).tocsc()
        self._lu = spla.splu(self.A)

    def _embed(self, eta, grids):
        # bilinear interpolation of nodal medium values onto the computational nodes
        x = grids.x
        xe = np.concatenate([x, [0.5]])
        ee = np.zeros((x.size + 1, x.size + 1))
        ee[:-1, :-1] = eta
        interp = RegularGridInterpolator((xe, xe), ee, bounds_error=False, fill_value=0.0)
        X, Y = np.meshgrid(self.coords, self.coords, indexing="ij")
        out = interp(np.stack([X.ravel(), Y.ravel()], axis=-1)).reshape(X.shape)
        return out

    def rhs(self, s_angle: float) -> np.ndarray:
        X, Y = np.meshgrid(self.coords, self.coords, indexing="ij")
        u_in = np.exp(1j * self.omega * (np.cos(s_angle) * X + np.sin(s_angle) * Y))
        return -self.omega ** 2 * self.eta * u_in

    def solve(self, s_angle: float) -> Field:
        b_full = self.rhs(s_angle)
        b = b_full[1:-1, 1:-1].ravel()
        u = np.zeros((self.n, self.n), dtype=complex)
        bnorm = np.linalg.norm(b)
        if bnorm == 0:
            return Field(u, self.coords, self.omega, s_angle, 0.0)
        x = self._lu.solve(b)
        res = np.linalg.norm(self.A @ x - b) / bnorm
        if res > self.config.solver_tol:
            raise SolverError(f"relative residual {res:.3e} exceeds {self.config.solver_tol:.1e}")
        u[1:-1, 1:-1] = x.reshape(self.n - 2, self.n - 2)
        return Field(u, self.coords, self.omega, s_angle, float(res))

    def sample(self, fld: Field, points: np.ndarray) -> np.ndarray:
        """Bilinear interpolation of ``fld`` at ``points`` of shape ``(k, 2)``."""
        interp = RegularGridInterpolator((self.coords, self.coords), fld.values)
        return interp(points)


def solve_scattered(medium: Medium, omega: float, s_index: int, config: HelmholtzConfig,
                    grids: Grids) -> Field:
    """Scattered field for the plane wave with direction angle ``2 pi s_index / n_sc``."""
    op = HelmholtzOperator(medium, omega, grids, config)
    return op.solve(grids.angles[s_index])


def receiver_points(grids: Grids) -> np.ndarray:
    a = grids.angles
    return grids.R * np.stack([np.cos(a), np.sin(a)], axis=-1)


class _PatternMap:
    """Linear map from ``u_sc`` on a fine circle to the asymptotic field at the receivers."""

    def __init__(self, omega, grids):
        kR = omega * grids.R
        M = 1 << int(math.ceil(math.log2(max(4 * grids.n_sc, 2 * kR + 64))))
        phi = 2 * np.pi * np.arange(M) / M
        self.points = grids.R * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
        K = int(min(M // 2 - 1, math.ceil(kR) + 32))
        k = np.arange(-K, K + 1)
        # c_k = (1/M) sum_p u(phi_p) e^{-ik phi_p} / H_k(kR); far field uses H_k ~ lead * (-i)^k
        lead = np.sqrt(2 / (np.pi * kR)) * np.exp(1j * (kR - np.pi / 4))
        coef = lead * (-1j) ** k / hankel1(k, kR)
        E_in = np.exp(-1j * np.outer(k, phi)) / M
        E_out = np.exp(1j * np.outer(grids.angles, k))
        self.T = E_out @ (coef[:, None] * E_in)

    def __call__(self, values):
        return self.T @ values


def far_field(medium: Medium, omega: float, grids: Grids, config: HelmholtzConfig) -> FarField:
    """Unnormalized data matrix: rows are receivers, columns are sources."""
    op = HelmholtzOperator(medium, omega, grids, config)
    if config.receiver == "pattern":
        pm = _PatternMap(omega, grids)
        pts, post = pm.points, pm
    else:
        pts, post = receiver_points(grids), (lambda v: v)
    out = np.empty((grids.n_sc, grids.n_sc), dtype=complex)
    for n, s in enumerate(grids.angles):
        out[:, n] = post(op.sample(op.solve(s), pts))
    return FarField(out, float(omega), grids.R, normalized=False)


def normalize(ff: FarField) -> FarField:
    """Divide by the far-field constant so the data match the unit-weight Born kernel."""
    if ff.normalized:
        raise ValueError("far field is already normalized")
    return FarField(ff.values / c_nor(ff.omega, ff.R), ff.omega, ff.R, normalized=True)


def _simulate_one(args):
    k, eta, freqs, grids, config = args
    med = Medium(eta)
    try:
        return [normalize(far_field(med, 2 * np.pi * f, grids, config)).values for f in freqs]
    except Exception as exc:
        raise SolverError(f"sample {k}: {exc}") from exc


def simulate_dataset(media, freqs: FrequencySet, grids: Grids, config: HelmholtzConfig,
                     jobs: int = 1) -> WideBandData:
    """Normalized far fields for every medium and frequency.

    Samples are independent and may run in ``jobs`` worker processes; output
    order always follows the input order.
    """
    grids_list = [m.grid if isinstance(m, Medium) else np.asarray(m) for m in media]
    if any(g.shape != (grids.n_eta, grids.n_eta) for g in grids_list):
        raise ValueError("all media must share n_eta with the grids")
    tasks = [(k, g, tuple(freqs), grids, config) for k, g in enumerate(grids_list)]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_simulate_one, tasks))
    else:
        results = [_simulate_one(t) for t in tasks]
    lam = np.zeros((len(tasks), len(freqs), grids.n_sc, grids.n_sc), dtype=complex)
    for k, r in enumerate(results):
        lam[k] = np.stack(r)
    return WideBandData(lam, freqs)
