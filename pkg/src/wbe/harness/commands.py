"""Desk-scale experiment commands behind the ``wbe`` CLI.

Every command takes the validated configuration dict, an output directory and
a worker bound, and returns a small JSON-serializable summary.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..born import FbpConfig, apply_F, fbp_reconstruct
from ..core import FrequencySet, Grids, Rng, read_tensor, write_tensor
from ..helmholtz import HelmholtzConfig, WideBandData, simulate_dataset
from ..media import (Medium, gen_random_smooth, gen_shepp_logan, gen_triangles,
                     rotate_medium)
from ..model.networks import ModelConfig, closed_form_counts, init_params, param_count, predict
from ..model.train import (TrainConfig, load_checkpoint, metric_rel_rmse, save_checkpoint,
                           train, write_history)
from .io import read_dataset, write_csv, write_dataset, write_pgm
from .schema import ConfigError

__all__ = ["cmd_gen", "cmd_fbp", "cmd_train", "cmd_rotate_test", "cmd_sweep", "cmd_export",
           "make_media", "COMMANDS"]

log = logging.getLogger(__name__)

FAMILY_DEFAULTS = {
    "shepp-logan": {"contrast_scale": 0.2},
    "smooth": {"n_points": 15, "sigma": 4.0, "amp": 0.3, "contrast_scale": 0.2},
    "tri3": {"count": 5, "contrast": 0.2},
    "tri5": {"count": 5, "contrast": 0.2},
    "tri10": {"count": 5, "contrast": 0.2},
}

_TRAIN_KEYS = ("lr", "batch", "epochs", "decay_rate", "decay_steps", "init")


def _section(cfg, name):
    return dict(cfg.get(name, {}))


def _dataset_grids(ds):
    n_eta = ds.get("n_eta", 16)
    n_sc = ds.get("n_sc", n_eta)
    return Grids(n_sc, n_eta, ds.get("n_rho"), ds.get("R", 0.9))


def make_media(ds: dict, seed: int) -> np.ndarray:
    """``N`` media of one family; sample ``k`` draws from the RNG stream ``k``."""
    family = ds.get("family", "smooth")
    p = {**FAMILY_DEFAULTS[family], **ds.get("params", {})}
    n = ds.get("n_eta", 16)
    N = ds.get("N", 1)
    root = Rng(seed)
    out = np.zeros((N, n, n))
    for k in range(N):
        rng = root.fork(k)
        if family == "shepp-logan":
            m = gen_shepp_logan(n, p["contrast_scale"]).grid
        elif family == "smooth":
            m = gen_random_smooth(n, p["n_points"], p["sigma"], p["amp"], rng).grid
            peak = np.abs(m).max()
            if p["contrast_scale"] and peak > 0:
                m = m * (p["contrast_scale"] / peak)
        else:
            m = gen_triangles(n, float(family[3:]), p["count"], p["contrast"], rng).grid
        out[k] = m
    return out


def _dataset_path(cfg, out):
    ds = cfg.get("dataset", {})
    if "path" in ds:
        return Path(ds["path"])
    if (Path(out) / "meta.json").exists():
        return Path(out)
    raise ConfigError("dataset.path is required (or run `wbe gen` into --out first)")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def cmd_gen(cfg, out, jobs=1):
    ds = _section(cfg, "dataset")
    seed = cfg.get("seed", 0)
    grids = _dataset_grids(ds)
    freqs = FrequencySet(tuple(ds["freqs"])) if "freqs" in ds else FrequencySet.desk_scale(grids.n_sc)
    hcfg = HelmholtzConfig(**ds.get("solver", {}))
    media = make_media(ds, seed)
    forward = ds.get("forward", "pde")
    if forward == "born":
        # linearized data F eta, for checking the inversion against its own model
        lam = np.stack([[apply_F(m, w, grids).values for w in freqs.omegas] for m in media])
        data = WideBandData(lam, freqs)
    else:
        data = simulate_dataset(list(media), freqs, grids, hcfg, jobs=jobs)
    meta = {
        "n_sc": grids.n_sc, "n_eta": grids.n_eta, "n_rho": grids.n_rho, "R": grids.R,
        "freqs": list(freqs.freqs), "seed": seed, "family": ds.get("family", "smooth"),
        "N": int(media.shape[0]), "forward": forward,
        "params": {**FAMILY_DEFAULTS[ds.get("family", "smooth")], **ds.get("params", {})},
        "solver": hcfg.__dict__,
    }
    write_dataset(out, media, data, meta)
    return {"dataset": str(out), "N": meta["N"], "freqs": meta["freqs"]}


# ---------------------------------------------------------------------------
# fbp
# ---------------------------------------------------------------------------

def _fbp_one(args):
    lam, freqs, grids, fcfg = args
    res = fbp_reconstruct(WideBandData(lam[None], freqs), fcfg, grids)
    return res.eta, res.converged, max(res.iterations), max(res.residuals)


def _grids_from_meta(meta):
    return Grids(meta["n_sc"], meta["n_eta"], meta.get("n_rho"), meta.get("R", 0.9))


def _subset(data: WideBandData, idx):
    if idx is None:
        return data
    if any(i >= len(data.freqs) for i in idx):
        raise ConfigError(f"frequency subset {idx} out of range for {len(data.freqs)} frequencies")
    fs = FrequencySet(tuple(data.freqs.freqs[i] for i in idx))
    return WideBandData(data.lam[:, list(idx)], fs)


def _map(fn, tasks, jobs):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


def _rel_errors(preds, trues):
    out = []
    for p, t in zip(preds, trues):
        n = np.linalg.norm(t)
        out.append(np.linalg.norm(p - t) / n if n > 0 else float("nan"))
    return np.array(out)


def cmd_fbp(cfg, out, jobs=1):
    fb = _section(cfg, "fbp")
    media, data, meta = read_dataset(_dataset_path(cfg, out))
    grids = _grids_from_meta(meta)
    data = _subset(data, fb.pop("freq_subset", None))
    images = fb.pop("images", False)
    fcfg = FbpConfig(**fb)
    tasks = [(data.lam[k], data.freqs, grids, fcfg) for k in range(media.shape[0])]
    results = _map(_fbp_one, tasks, jobs)
    recon = np.stack([r[0] for r in results])
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "fbp_recon.wbt", recon)
    errs = _rel_errors(recon, media)
    with open(out / "fbp_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "rel_rmse", "converged", "iterations", "residual"])
        for k, (e, r) in enumerate(zip(errs, results)):
            w.writerow([k, f"{e:.17g}", int(r[1]), r[2], f"{r[3]:.6e}"])
    if images:
        (out / "images").mkdir(exist_ok=True)
        for k in range(recon.shape[0]):
            write_pgm(out / "images" / f"fbp_{k:04d}.pgm", recon[k])
            write_pgm(out / "images" / f"true_{k:04d}.pgm", media[k])
    ok = ~np.isnan(errs)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero-norm samples excluded from rel_rmse")
    mean = float(errs[ok].mean()) if ok.any() else None
    return {"rel_rmse": mean, "all_converged": bool(all(r[1] for r in results)),
            "freqs": list(data.freqs.freqs)}


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _split(n, fraction):
    n_train = int(round(n * fraction))
    if not 0 < n_train < n:
        raise ConfigError(f"train_fraction={fraction} leaves an empty split for N={n}")
    return np.arange(n_train), np.arange(n_train, n)


def _model_config(tr, meta, freqs):
    keys = ("L", "r", "n_sr", "conv_kernel", "conv_channels", "conv_symmetry")
    extra = {k: (tuple(tr[k]) if k == "conv_channels" else tr[k]) for k in keys if k in tr}
    return ModelConfig(tr.get("kind", "uncompressed"), meta["n_sc"], meta["n_eta"], tuple(freqs),
                       n_rho=meta.get("n_rho"), R=meta.get("R", 0.9), **extra)


def _train_cell(args):
    tr, meta, lam, media, tr_idx, va_idx, seed = args
    mcfg = _model_config(tr, meta, tr["_freqs"])
    tcfg = TrainConfig(seed=seed, **{k: tr[k] for k in _TRAIN_KEYS if k in tr})
    params = init_params(mcfg, tcfg.init, seed)
    params, hist = train(params, lam[tr_idx], media[tr_idx], lam[va_idx], media[va_idx], tcfg)
    return params, hist, tcfg


def cmd_train(cfg, out, jobs=1):
    tr = _section(cfg, "train")
    seed = cfg.get("seed", 0)
    media, data, meta = read_dataset(_dataset_path(cfg, out))
    data = _subset(data, tr.get("freq_subset"))
    tr["_freqs"] = list(data.freqs.freqs)
    tr_idx, va_idx = _split(media.shape[0], tr.get("train_fraction", 0.75))
    params, hist, tcfg = _train_cell((tr, meta, data.lam, media, tr_idx, va_idx, seed))
    out = Path(out)
    ck = Path(tr.get("checkpoint", out / "checkpoint"))
    params.metadata.update({"train_fraction": tr.get("train_fraction", 0.75),
                            "freq_subset": tr.get("freq_subset")})
    save_checkpoint(params, ck, tcfg)
    write_history(hist, out / "history.csv")
    final = hist[-1]["val_rel_rmse"] if hist else metric_rel_rmse(
        predict(params, data.lam[va_idx]), media[va_idx])
    counts = param_count(params)
    summary = {"val_rel_rmse": final, "checkpoint": str(ck), "param_count": counts,
               "closed_form": closed_form_counts(params.config)}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2))
    print(f"final validation rel_rmse {final:.6f}", file=sys.stderr)
    return summary


# ---------------------------------------------------------------------------
# rotate-test
# ---------------------------------------------------------------------------

def rotate_dataset(media, lam, q, n_sc):
    """Rotate media by ``q`` quarter turns and shift the far fields to match."""
    if n_sc % 4:
        raise ConfigError(f"n_sc={n_sc} must be divisible by 4 for quarter-turn tests")
    rm = np.stack([rotate_medium(Medium(m), q % 4).grid for m in media])
    j = (q * n_sc // 4) % n_sc
    rl = np.roll(lam, (-j, -j), axis=(-2, -1))
    return rm, rl


def cmd_rotate_test(cfg, out, jobs=1):
    rt = _section(cfg, "rotate_test")
    tr = _section(cfg, "train")
    out = Path(out)
    media, data, meta = read_dataset(_dataset_path(cfg, out))
    turns = rt.get("quarter_turns", [0, 1, 2, 3])
    retrain = rt.get("retrain", False)
    if not retrain:
        ck = Path(rt.get("checkpoint", tr.get("checkpoint", out / "checkpoint")))
        params = load_checkpoint(ck)
        data = _subset(data, params.metadata.get("freq_subset"))
        frac = params.metadata.get("train_fraction", tr.get("train_fraction", 0.75))
    else:
        data = _subset(data, tr.get("freq_subset"))
        frac = tr.get("train_fraction", 0.75)
    tr_idx, va_idx = _split(media.shape[0], frac)
    rows = []
    for q in turns:
        if rt.get("resimulate", False):
            grids = _grids_from_meta(meta)
            rm = np.stack([rotate_medium(Medium(m), q % 4).grid for m in media])
            rl = simulate_dataset(list(rm), data.freqs, grids,
                                  HelmholtzConfig(**meta.get("solver", {})), jobs=jobs).lam
        else:
            rm, rl = rotate_dataset(media, data.lam, q, meta["n_sc"])
        if retrain:
            tr["_freqs"] = list(data.freqs.freqs)
            params, _, _ = _train_cell((tr, meta, rl, rm, tr_idx, va_idx, cfg.get("seed", 0)))
        err = metric_rel_rmse(predict(params, rl[va_idx]), rm[va_idx])
        rows.append((q, 90 * q, err))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rotate_test.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quarter_turns", "degrees", "rel_rmse"])
        for q, deg, e in rows:
            w.writerow([q, deg, f"{e:.17g}"])
    errs = [e for _, _, e in rows]
    return {"rows": rows, "spread": float(max(errs) - min(errs))}


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _sweep_cell(args):
    try:
        params, hist, _ = _train_cell(args)
        return hist[-1]["val_rel_rmse"] if hist else float("nan"), ""
    except Exception as exc:   # recorded per cell; the sweep continues
        return float("nan"), f"{type(exc).__name__}: {exc}"


def cmd_sweep(cfg, out, jobs=1):
    sw = _section(cfg, "sweep")
    tr = _section(cfg, "train")
    seed = cfg.get("seed", 0)
    media, data, meta = read_dataset(_dataset_path(cfg, out))
    tr_all, va_idx = _split(media.shape[0], tr.get("train_fraction", 0.75))
    sizes = sw.get("sizes", [tr_all.size])
    nf = len(data.freqs)
    fsets = sw.get("freq_sets", [[nf - 1], list(range(nf))])
    for fs in fsets:
        if any(i >= nf for i in fs):
            raise ConfigError(f"frequency set {fs} out of range for {nf} frequencies")
    tasks, cells = [], []
    for size in sizes:
        if size > tr_all.size:
            raise ConfigError(f"sweep size {size} exceeds the {tr_all.size} training samples")
        for fs in fsets:
            sub = _subset(data, fs)
            t = dict(tr, _freqs=list(sub.freqs.freqs))
            tasks.append((t, meta, sub.lam, media, tr_all[:size], va_idx, seed))
            cells.append((size, tuple(fs)))
    results = _map(_sweep_cell, tasks, jobs)
    labels = ["+".join(f"f{i + 1}" for i in fs) for fs in fsets]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    table = {}
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_train", *labels])
        for size in sizes:
            row = []
            for fs in fsets:
                val, err = results[cells.index((size, tuple(fs)))]
                if err:
                    log.warning("sweep cell (%d, %s) failed: %s", size, fs, err)
                row.append(val)
                table[f"{size}:{'+'.join(map(str, fs))}"] = val
            w.writerow([size, *[f"{v:.17g}" for v in row]])
    return {"table": table, "labels": labels}


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def cmd_export(cfg, out, jobs=1):
    ex = _section(cfg, "export")
    path = Path(ex["tensor"])
    arr = read_tensor(path)
    for i in ex.get("index", []):
        if arr.ndim == 0 or i >= arr.shape[0]:
            raise ConfigError(f"export.index {ex['index']} out of range for shape {read_tensor(path).shape}")
        arr = arr[i]
    if np.iscomplexobj(arr):
        part = ex.get("part", "real")
        arr = {"real": arr.real, "imag": arr.imag, "abs": np.abs(arr)}[part]
    if arr.ndim != 2:
        raise ConfigError(f"export needs a 2D slice, got shape {arr.shape}; set export.index")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fmt = ex.get("format", "pgm")
    stem = path.stem + "".join(f"_{i}" for i in ex.get("index", []))
    target = out / f"{stem}.{fmt}"
    if fmt == "pgm":
        write_pgm(target, arr)
    else:
        write_csv(target, arr)
    return {"file": str(target)}


COMMANDS = {
    "gen": cmd_gen,
    "fbp": cmd_fbp,
    "train": cmd_train,
    "rotate-test": cmd_rotate_test,
    "sweep": cmd_sweep,
    "export": cmd_export,
}
