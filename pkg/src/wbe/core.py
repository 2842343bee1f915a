"""Shared grids, frequency sets, the counter-based RNG and the WBT1 tensor format.

Every other module builds on the types defined here:

* :class:`Grids` holds the angular, polar and Cartesian meshes.
* :class:`FrequencySet` holds the (dyadic) source frequencies.
* :class:`Rng` is a splitmix64 counter-based generator whose streams are
  bit-identical on every platform.
* :func:`write_tensor` / :func:`read_tensor` implement the ``WBT1`` binary
  tensor container.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Grids",
    "FrequencySet",
    "Rng",
    "glorot_uniform",
    "write_tensor",
    "read_tensor",
    "TensorFormatError",
    "TensorIOError",
    "MagicMismatchError",
    "DimOverflowError",
]


@dataclass(frozen=True)
class Grids:
    """Discretization shared by the forward solver, back-projection and models.

    Parameters
    ----------
    n_sc : int
        Number of equiangular source/receiver directions (also ``n_theta``).
    n_eta : int
        Cartesian resolution per axis of the medium on ``[-0.5, 0.5]^2``.
    n_rho : int, optional
        Number of polar radii; defaults to ``n_sc``.
    R : float
        Radius of the receiver circle.

    Notes
    -----
    The Cartesian mesh is node-centred: ``x_k = -0.5 + k / n_eta`` for
    ``k = 0 .. n_eta - 1``. For even ``n_eta`` the node ``k = n_eta // 2`` sits
    at the origin and indices ``1 .. n_eta - 1`` are symmetric about it, so
    quarter turns about the origin are exact index permutations.
    """

    n_sc: int
    n_eta: int
    n_rho: int | None = None
    R: float = 0.9

    def __post_init__(self):
        if self.n_rho is None:
            object.__setattr__(self, "n_rho", self.n_sc)
        if self.n_sc < 1 or self.n_eta < 2 or self.n_rho < 1:
            raise ValueError("grid sizes must be positive")
        if not self.R > 0.5:
            raise ValueError(f"receiver radius R={self.R} must exceed 1/2")

    @property
    def n_theta(self) -> int:
        return self.n_sc

    @property
    def h(self) -> float:
        """Cartesian grid spacing."""
        return 1.0 / self.n_eta

    @property
    def angles(self) -> np.ndarray:
        """Source, receiver and polar angles ``2 pi j / n_sc``."""
        return 2.0 * np.pi * np.arange(self.n_sc) / self.n_sc

    @property
    def theta(self) -> np.ndarray:
        return self.angles

    @property
    def rho(self) -> np.ndarray:
        """Polar radii ``i / (2 n_rho)``, all strictly below 1/2."""
        return np.arange(self.n_rho) / (2.0 * self.n_rho)

    @property
    def rho_max(self) -> float:
        return (self.n_rho - 1) / (2.0 * self.n_rho)

    @property
    def x(self) -> np.ndarray:
        """Cartesian node coordinates along one axis."""
        return -0.5 + np.arange(self.n_eta) * self.h

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` with ``X[a, b] = x_a`` and ``Y[a, b] = x_b``."""
        return np.meshgrid(self.x, self.x, indexing="ij")

    @property
    def quad_weight(self) -> float:
        """Weight of the double angular quadrature, ``(2 pi / n_sc)^2``."""
        return (2.0 * np.pi / self.n_sc) ** 2

    def interior_mask(self) -> np.ndarray:
        """Nodes allowed to carry a nonzero perturbation.

        Indices ``2 .. n_eta - 2`` along each axis: symmetric about the origin
        and clear of the outermost pixel ring.
        """
        m = np.zeros((self.n_eta, self.n_eta), dtype=bool)
        m[2:self.n_eta - 1, 2:self.n_eta - 1] = True
        return m


@dataclass(frozen=True)
class FrequencySet:
    """Ordered source frequencies in Hz; ``omega = 2 pi f`` with unit background speed."""

    freqs: tuple[float, ...]

    def __post_init__(self):
        f = tuple(float(v) for v in self.freqs)
        if not f:
            raise ValueError("empty frequency set")
        if any(b <= a for a, b in zip(f, f[1:])) or f[0] <= 0:
            raise ValueError(f"frequencies must be positive and strictly increasing: {f}")
        object.__setattr__(self, "freqs", f)

    @classmethod
    def dyadic(cls, top: float, count: int = 3) -> "FrequencySet":
        """``count`` frequencies ending at ``top``, each double the previous."""
        return cls(tuple(top / 2 ** (count - 1 - k) for k in range(count)))

    @classmethod
    def desk_scale(cls, n_sc: int) -> "FrequencySet":
        """The 2.5 / 5 / 10 Hz set rescaled by ``n_sc / 80`` (constant PPW)."""
        return cls(tuple(f * n_sc / 80.0 for f in (2.5, 5.0, 10.0)))

    @property
    def omegas(self) -> np.ndarray:
        return 2.0 * np.pi * np.asarray(self.freqs)

    def __len__(self) -> int:
        return len(self.freqs)

    def __iter__(self):
        return iter(self.freqs)


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps mod 2**64
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MUL1
        z = (z ^ (z >> np.uint64(27))) * _MUL2
        return z ^ (z >> np.uint64(31))


@dataclass
class Rng:
    """Counter-based splitmix64 generator.

    Output ``k`` of a stream is ``mix(key + (k + 1) * GAMMA)``, so the sequence
    depends only on ``(seed, stream)`` and the draw index. Independent
    streams for parallel work come from :meth:`fork`.
    """

    seed: int
    stream: int = 0
    counter: int = field(default=0, repr=False)

    def __post_init__(self):
        key = np.array([self.seed & _MASK64], dtype=np.uint64)
        if self.stream:
            key = _mix64(key ^ _mix64(np.array([self.stream & _MASK64], dtype=np.uint64)))
        self._key = key[0]

    def fork(self, stream: int) -> "Rng":
        """A new generator keyed on ``(seed, stream)``; the parent is untouched."""
        return Rng(int(_mix64(np.array([self._key], dtype=np.uint64))[0]), stream + 1)

    def next_u64(self, n: int) -> np.ndarray:
        k = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._key + k * _GAMMA)

    def random(self, size=None) -> np.ndarray | float:
        """Doubles uniform on ``[0, 1)`` built from the top 53 bits."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def integers(self, low: int, high: int, size=None):
        """Integers on ``[low, high)``."""
        out = low + np.floor(np.asarray(self.random(size)) * (high - low)).astype(np.int64)
        return int(out) if size is None else out

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int, dims) -> np.ndarray:
    """Glorot/Xavier uniform samples on ``[-sqrt(6/(fan_in+fan_out)), +...]``."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan counts must be >= 1, got fan_in={fan_in}, fan_out={fan_out}")
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, tuple(dims))


# ---------------------------------------------------------------------------
# WBT1 tensor files
# ---------------------------------------------------------------------------

MAGIC = b"WBT1"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f8"): 1, np.dtype("<c16"): 2}
_CODE_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<c16")}
_MAX_DIM = 2 ** 32


class TensorFormatError(Exception):
    """Base class for WBT1 failures."""


class TensorIOError(TensorFormatError):
    """The file could not be read or written."""


class MagicMismatchError(TensorFormatError):
    """The file does not start with the WBT1 magic bytes."""


class DimOverflowError(TensorFormatError):
    """An axis length exceeds 2**32."""


def write_tensor(path, tensor) -> None:
    """Write a real or complex array as a WBT1 file.

    Real input is stored as f64, complex input as interleaved (re, im) f64
    pairs. Non-finite entries are rejected.
    """
    arr = np.asarray(tensor)
    if np.iscomplexobj(arr):
        arr = arr.astype("<c16")
    else:
        arr = arr.astype("<f8")
    for d in arr.shape:
        if d > _MAX_DIM:
            raise DimOverflowError(f"axis length {d} exceeds 2**32")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor has non-finite entries")
    header = MAGIC + struct.pack("<III", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(arr).tobytes())
    except OSError as exc:
        raise TensorIOError(f"cannot write {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    """Read a WBT1 file written by :func:`write_tensor`."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise TensorIOError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise TensorIOError(f"{path}: truncated header")
    version, code, ndim = struct.unpack_from("<III", raw, 4)
    if version != VERSION or code not in _CODE_DTYPES:
        raise TensorIOError(f"{path}: unsupported version {version} or dtype code {code}")
    off = 16
    if len(raw) < off + 8 * ndim:
        raise TensorIOError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, off)
    if any(d > _MAX_DIM for d in dims):
        raise DimOverflowError(f"{path}: axis length exceeds 2**32: {dims}")
    off += 8 * ndim
    dtype = _CODE_DTYPES[code]
    count = math.prod(dims)
    if len(raw) - off != count * dtype.itemsize:
        raise TensorIOError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(dims).copy()
