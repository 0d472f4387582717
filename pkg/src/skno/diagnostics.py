"""Post-hoc analyses of trained operators: entanglement entropy of layer
snapshots, SVD energy capture, dictionary sparsity and super-resolution sweeps."""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from .adjoint import rel_l2_per_sample
from .exceptions import UsageError
from .model import SknoModel, forward

log = logging.getLogger(__name__)

ENERGY_THRESHOLD = 1e-3


def entanglement_entropy(V) -> float:
    """Shannon entropy (natural log) of the normalised squared singular values of ``V``."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2:
        raise UsageError(f"expected a matrix, got shape {V.shape}")
    if not np.all(np.isfinite(V)):
        raise UsageError("matrix has non-finite entries")
    s = np.linalg.svd(V, compute_uv=False)
    total = np.linalg.norm(s)
    if total == 0:
        raise UsageError("entropy undefined for an all-zero matrix")
    c2 = (s / total) ** 2
    c2 = c2[c2 >= 1e-300]
    return float(-np.sum(c2 * np.log(c2)))


def layer_trace(model: SknoModel, sample) -> list[tuple[str, np.ndarray]]:
    """``(label, V)`` snapshots of one sample, each reshaped to ``(points, n_p)``.

    Labels run ``"0", "01", "1", "12", "2", ...``: ``"l(l+1)"`` is the output
    of the linear block of layer ``l`` before its activation.
    """
    a = np.asarray(sample, dtype=np.float64)
    if a.ndim == model.arch.d + 1:
        a = a[None]
    if a.shape[0] != 1:
        raise UsageError("layer_trace takes a single sample")
    trace: list = []
    forward(model, a, training=False, trace=trace)
    return [(label, v.reshape(-1, v.shape[-1])) for label, v in trace]


def trace_entropies(model: SknoModel, sample, csv_path=None) -> list[tuple[str, float | None]]:
    """Entropy at every trace stage; all-zero snapshots are reported as ``None`` (skipped)."""
    rows = []
    for label, V in layer_trace(model, sample):
        rows.append((label, entanglement_entropy(V) if np.any(V) else None))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "entropy"])
            for label, s in rows:
                w.writerow([label, "skipped" if s is None else f"{s:.12e}"])
    return rows


def energy_capture(V, chi, r: int) -> tuple[float, float, float]:
    """Energy of ``u = V chi`` captured by the top-``r`` SVD modes of ``V``.

    Returns ``(E(r), ||u - V_r chi||, ||u|| sqrt(1 - E(r)))``; the last two
    agree exactly in exact arithmetic.
    """
    V = np.asarray(V, dtype=np.float64)
    chi = np.asarray(chi, dtype=np.float64).reshape(-1)
    if V.ndim != 2 or V.shape[1] != chi.size:
        raise UsageError(f"V {V.shape} and chi {chi.shape} are incompatible")
    if not 1 <= r <= V.shape[1]:
        raise UsageError(f"r must lie in [1, {V.shape[1]}], got {r}")
    u = V @ chi
    nu = np.linalg.norm(u)
    if nu == 0:
        raise UsageError("V chi is zero; energy capture undefined")
    U, s, Vt = np.linalg.svd(V, full_matrices=False)
    w = (s * (Vt @ chi)) ** 2
    e = float(np.sum(w[:r]) / np.sum(w))
    e = min(e, 1.0)
    Vr = (U[:, :r] * s[:r]) @ Vt[:r]
    direct = float(np.linalg.norm(u - Vr @ chi))
    return e, direct, float(nu * np.sqrt(max(1.0 - e, 0.0)))


def dictionary_report(model: SknoModel, a, csv_path=None) -> list[dict]:
    """Per auxiliary index: recovery weight magnitude and mean last-layer energy.

    Rows are sorted by descending ``|chi_m|``; ``below_threshold`` flags mean
    energies under 1e-3.
    """
    if model.arch.recover_kind != "linear":
        raise UsageError(
            f"dictionary report needs linear recovery (got {model.arch.recover_kind!r}); "
            "retrain with recover_kind='linear'"
        )
    a = np.asarray(a, dtype=np.float64)
    chi = model.params["recover.chi"]
    weight = np.linalg.norm(chi, axis=1)
    energy = np.zeros(model.arch.n_p)
    for i in range(a.shape[0]):
        _, V = layer_trace(model, a[i:i + 1])[-1]
        energy += np.sum(V * V, axis=0) / V.shape[0]
    energy /= a.shape[0]
    order = np.argsort(-weight, kind="stable")
    rows = [dict(aux_index=int(m), abs_weight=float(weight[m]), mean_energy=float(energy[m]),
                 below_threshold=bool(energy[m] < ENERGY_THRESHOLD)) for m in order]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["aux_index", "abs_weight", "mean_energy", "below_threshold"])
            for row in rows:
                w.writerow([row["aux_index"], f"{row['abs_weight']:.12e}",
                            f"{row['mean_energy']:.12e}", int(row["below_threshold"])])
    return rows


def superres_sweep(model: SknoModel, generator, resolutions, csv_path=None) -> dict:
    """Mean relative L2 at each resolution of data from ``generator(resolution)``.

    Resolutions below ``2 * modes`` are skipped with a warning row. Returns
    ``{"rows": [(resolution, rel_l2 | None)], "variance": ..., "ratio": max/min}``.
    """
    need = 2 * model.arch.modes
    rows = []
    for n in resolutions:
        if n < need:
            log.warning("resolution %d below minimum %d; skipped", n, need)
            rows.append((n, None))
            continue
        ds = generator(n)
        pred = forward(model, ds.a, training=False)
        rows.append((n, float(rel_l2_per_sample(pred, ds.u).mean())))
    errs = np.array([e for _, e in rows if e is not None])
    variance = float(np.var(errs)) if errs.size else float("nan")
    ratio = float(errs.max() / errs.min()) if errs.size and errs.min() > 0 else float("nan")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["resolution", "rel_l2"])
            for n, e in rows:
                w.writerow([n, "skipped" if e is None else f"{e:.12e}"])
    return {"rows": rows, "variance": variance, "ratio": ratio}


def write_trace_files(model: SknoModel, samples, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        p = out_dir / f"trace_{i}.csv"
        trace_entropies(model, s[None], p)
        paths.append(p)
    return paths
