"""Benchmark media families and exact quarter-turn rotations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Grids, Rng

__all__ = [
    "Medium",
    "check_medium",
    "gen_shepp_logan",
    "gen_random_smooth",
    "gen_triangles",
    "rotate_medium",
    "SHEPP_LOGAN_ELLIPSES",
]

FAMILIES = ("shepp-logan", "smooth", "tri3", "tri5", "tri10")


@dataclass(frozen=True)
class Medium:
    """Perturbation ``eta = n - 1`` sampled on the Cartesian nodes of ``[-0.5, 0.5]^2``.

    ``grid[a, b]`` is the value at ``(x_a, x_b)``; see :class:`wbe.core.Grids`.
    """

    grid: np.ndarray
    label: str = ""

    @property
    def n_eta(self) -> int:
        return self.grid.shape[0]


def check_medium(values: np.ndarray) -> None:
    """Raise ``ValueError`` unless ``values`` satisfies the medium invariants."""
    v = np.asarray(values)
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ValueError(f"medium must be square 2D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("medium has non-finite values")
    if np.any(np.abs(v) > 1.0):
        raise ValueError("medium exceeds |eta| <= 1")
    ring = np.concatenate([v[0], v[-1], v[:, 0], v[:, -1]])
    if np.any(ring != 0):
        raise ValueError("medium is nonzero on the outer pixel ring")


def _finish(values: np.ndarray, label: str) -> Medium:
    values = np.where(Grids(1, values.shape[0]).interior_mask(), values, 0.0)
    values = np.clip(values, -1.0, 1.0)
    return Medium(values, label)


# (x0, y0, semi-axis a, semi-axis b, rotation in degrees, additive intensity)
# on [-1, 1]^2, the original 1974 table.
SHEPP_LOGAN_ELLIPSES = (
    (0.0, 0.0, 0.69, 0.92, 0.0, 2.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
    (0.0, -0.606, 0.023, 0.023, 0.0, 0.01),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
)


def gen_shepp_logan(n_eta: int, contrast_scale: float = 0.2) -> Medium:
    """Shepp-Logan phantom rescaled so that ``max |eta| == contrast_scale``.

    The phantom's ``[-1, 1]^2`` frame is mapped onto ``[-0.5, 0.5]^2``.
    """
    if n_eta < 16:
        raise ValueError(f"n_eta={n_eta} too small to resolve the phantom (need >= 16)")
    X, Y = Grids(1, n_eta).mesh()
    X, Y = 2 * X, 2 * Y
    img = np.zeros((n_eta, n_eta))
    for x0, y0, a, b, phi, val in SHEPP_LOGAN_ELLIPSES:
        c, s = math.cos(math.radians(phi)), math.sin(math.radians(phi))
        u = (X - x0) * c + (Y - y0) * s
        v = -(X - x0) * s + (Y - y0) * c
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += val
    peak = np.abs(img).max()
    return _finish(img * (contrast_scale / peak), "shepp-logan")


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unit-sum 2D Gaussian truncated at 4 sigma."""
    rad = int(math.ceil(4 * sigma))
    t = np.arange(-rad, rad + 1)
    g = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2 * sigma ** 2))
    g[t[:, None] ** 2 + t[None, :] ** 2 > (4 * sigma) ** 2] = 0.0
    return g / g.sum()


def gen_random_smooth(n_eta: int, n_points: int, sigma: float, amp: float, rng: Rng) -> Medium:
    """Random spikes on interior pixels blurred by a truncated Gaussian.

    Spike values are uniform on ``[-amp, amp]``; ``sigma`` is in pixels.
    """
    if n_points < 0 or sigma <= 0 or amp <= 0:
        raise ValueError("need n_points >= 0, sigma > 0, amp > 0")
    spikes = np.zeros((n_eta, n_eta))
    if n_points:
        lo, hi = 2, n_eta - 1
        idx = rng.integers(lo, hi, (n_points, 2))
        vals = rng.uniform(-amp, amp, n_points)
        np.add.at(spikes, (idx[:, 0], idx[:, 1]), vals)
    out = ndimage.correlate(spikes, gaussian_kernel(sigma), mode="constant")
    return _finish(out, "smooth")


def _triangle_mask(X, Y, cx, cy, side, angle):
    # vertices at circumradius side/sqrt(3); inside test via three half-planes
    rc = side / math.sqrt(3.0)
    ang = angle + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    vx, vy = cx + rc * np.cos(ang), cy + rc * np.sin(ang)
    inside = np.ones(X.shape, dtype=bool)
    for k in range(3):
        ax, ay = vx[k], vy[k]
        bx, by = vx[(k + 1) % 3], vy[(k + 1) % 3]
        inside &= (bx - ax) * (Y - ay) - (by - ay) * (X - ax) >= 0
    return inside


def gen_triangles(n_eta: int, side_px: float, count: int, contrast: float, rng: Rng) -> Medium:
    """``count`` equilateral triangles of side ``side_px`` pixels, max-unioned.

    Centres and orientations are uniform; a node is filled when its centre
    lies inside a triangle. Coordinates are in pixel units.
    """
    if side_px < 2:
        raise ValueError(f"side_px={side_px} must be >= 2")
    if count < 0 or not 0 < contrast <= 1:
        raise ValueError("need count >= 0 and 0 < contrast <= 1")
    a = np.arange(n_eta, dtype=float)
    X, Y = np.meshgrid(a, a, indexing="ij")
    img = np.zeros((n_eta, n_eta))
    rc = side_px / math.sqrt(3.0)
    lo, hi = 2 + rc, n_eta - 2 - rc
    if hi < lo:
        lo = hi = (n_eta) / 2.0
    for _ in range(count):
        cx, cy = rng.uniform(lo, hi, 2)
        angle = rng.uniform(0.0, 2 * np.pi / 3)
        img = np.maximum(img, contrast * _triangle_mask(X, Y, cx, cy, side_px, angle))
    return _finish(img, f"tri{int(side_px)}" if float(side_px).is_integer() else "tri")


def rotate_medium(medium: Medium, quarter_turns: int) -> Medium:
    """Rotate by ``quarter_turns`` x 90 degrees about the origin, clockwise.

    The clockwise sense matches :func:`wbe.born.shift_data`: rotating the medium
    by ``q`` quarter turns corresponds to ``shift_data(data, q * n_sc // 4)``.
    Nodes ``1 .. n - 1`` are permuted exactly; row and column 0 stay in place.
    """
    if quarter_turns not in (0, 1, 2, 3):
        raise ValueError(f"quarter_turns must be in 0..3, got {quarter_turns}")
    g = medium.grid
    n = g.shape[0]
    if n % 2:
        raise ValueError("rotation about the origin needs even n_eta")
    out = g.copy()
    # new(x, y) = old(-y, x) per clockwise quarter turn; index -y <-> n - b
    sub = g[1:, 1:]
    for _ in range(quarter_turns):
        sub = sub[::-1, :].T
    out[1:, 1:] = sub
    return Medium(out, medium.label)
