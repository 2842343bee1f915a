"""Dataset directories and PGM/CSV export."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..core import FrequencySet, read_tensor, write_tensor
from ..helmholtz import WideBandData

__all__ = ["write_dataset", "read_dataset", "lambda_name", "write_pgm", "read_pgm",
           "write_csv", "read_csv"]


def lambda_name(freq: float) -> str:
    return f"lambda_f{freq:g}.wbt"


def write_dataset(directory, media: np.ndarray, data: WideBandData, meta: dict) -> None:
    """``media.wbt`` [N, n_eta, n_eta], one ``lambda_f<freq>.wbt`` [N, n_sc, n_sc] per frequency, ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "media.wbt", media)
    for k, f in enumerate(data.freqs):
        write_tensor(d / lambda_name(f), data.lam[:, k])
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_dataset(directory):
    """Return ``(media, WideBandData, meta)``."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    media = read_tensor(d / "media.wbt")
    fs = FrequencySet(tuple(meta["freqs"]))
    lam = np.stack([read_tensor(d / lambda_name(f)) for f in fs], axis=1)
    return media, WideBandData(lam, fs), meta


def write_pgm(path, image) -> dict:
    """8-bit binary PGM with min-max scaling; the scale goes to ``<path>.json``.

    A constant image maps to mid-gray (128).
    """
    a = np.asarray(image, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"PGM export needs a 2D tensor, got shape {a.shape}")
    lo, hi = float(a.min()), float(a.max())
    if hi > lo:
        pix = np.rint((a - lo) / (hi - lo) * 255).astype(np.uint8)
    else:
        pix = np.full(a.shape, 128, dtype=np.uint8)
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    scale = {"min": lo, "max": hi, "levels": 255, "constant": hi == lo}
    Path(str(path) + ".json").write_text(json.dumps(scale))
    return scale


def read_pgm(path) -> np.ndarray:
    """Pixel values of a PGM written by :func:`write_pgm`, mapped back through the sidecar."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    cols, rows = (int(v) for v in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols).astype(float)
    scale = json.loads(Path(str(path) + ".json").read_text())
    if scale["constant"]:
        return np.full((rows, cols), scale["min"])
    return scale["min"] + pix / 255 * (scale["max"] - scale["min"])


def write_csv(path, image) -> None:
    a = np.asarray(image, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"CSV export needs a 2D tensor, got shape {a.shape}")
    header = ",".join(f"c{j}" for j in range(a.shape[1]))
    np.savetxt(path, a, delimiter=",", fmt="%.17g", header=header, comments="")


def read_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
