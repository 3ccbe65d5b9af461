"""Transfer values, deterministic PCA, class separation, and scatter export."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import LABELS, SHORT
from .model import Model, read_weight_file, truncate_at, weights_fingerprint, write_weight_file


class StaleCacheError(RuntimeError):
    pass


class DegenerateDataError(ValueError):
    pass


@dataclass
class TransferValues:
    matrix: np.ndarray
    labels: np.ndarray
    source: str
    layer: str


def dataset_hash(x: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(x.shape).encode())
    h.update(np.ascontiguousarray(x, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<i8").tobytes())
    return h.hexdigest()


def _fingerprint(model: Model, layer: str, x: np.ndarray, y: np.ndarray) -> str:
    idx = model.index(layer)
    return (f"fingerprint;model={model.name};layer={layer};"
            f"weights={weights_fingerprint(model, idx)};data={dataset_hash(x, y)}")


def extract_transfer_values(model: Model, layer: str, data, cache_path: str | Path | None = None,
                            batch_size: int = 64) -> TransferValues:
    """Row ``i`` is the activation of ``layer`` for sample ``i`` (flattened).

    With ``cache_path``, an existing cache whose fingerprint matches is read
    back; a mismatching one raises :class:`StaleCacheError`.
    """
    x, y = np.asarray(data.x), np.asarray(data.y)
    fp = _fingerprint(model, layer, x, y)
    if cache_path is not None and Path(cache_path).exists():
        records = read_weight_file(cache_path)
        stored = next((k for k in records if k.startswith("fingerprint;")), None)
        if stored != fp:
            raise StaleCacheError(f"transfer-value cache {cache_path} was built from different inputs")
        values, labels = records["transfer_values"]
        return TransferValues(values, labels.astype(np.int64), model.name, layer)
    extractor = truncate_at(model, layer)
    out = extractor.predict(x, batch_size)
    matrix = out.reshape(len(out), -1).astype(np.float32)
    if cache_path is not None:
        write_weight_file(cache_path, [(fp, []), ("transfer_values", [matrix, y.astype(np.float32)])])
    return TransferValues(matrix, y.astype(np.int64), model.name, layer)


@dataclass
class PCAResult:
    mean: np.ndarray
    components: np.ndarray  # [k, d], orthonormal rows
    explained_variance: np.ndarray
    projected: np.ndarray


def pca_fit(values, n_components: int = 2) -> PCAResult:
    """SVD of the column-centred matrix.

    Each component is signed so its largest-magnitude coordinate is
    positive; explained variance is ``s**2 / (n - 1)``.
    """
    x = np.asarray(getattr(values, "matrix", values), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("PCA needs an n x d matrix with n >= 2")
    if not np.all(np.isfinite(x)):
        raise ValueError("PCA input contains non-finite values")
    mean = x.mean(axis=0)
    xc = x - mean
    if not np.any(xc):
        raise DegenerateDataError("all rows are identical; principal directions are undefined")
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    k = min(n_components, vt.shape[0])
    comps = vt[:k].copy()
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    var = s[:k] ** 2 / (x.shape[0] - 1)
    return PCAResult(mean, comps, var, xc @ comps.T)


def project(result: PCAResult, values) -> np.ndarray:
    x = np.asarray(getattr(values, "matrix", values), dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != result.mean.shape[0]:
        raise ValueError(f"feature width {x.shape[1]} != fitted width {result.mean.shape[0]}")
    return (x - result.mean) @ result.components.T


def _mask(labels: np.ndarray, group) -> np.ndarray:
    group = {group} if isinstance(group, (int, np.integer)) else set(group)
    return np.isin(labels, list(group))


def separation_metric(projected: np.ndarray, labels: Sequence[int], pair) -> float:
    """Centroid distance over the mean within-group RMS spread.

    ``pair`` is ``(a, b)`` where each side is a label or a collection of
    labels, e.g. ``(0, (1, 2))`` for Low versus the rest.
    """
    p = np.asarray(projected, dtype=np.float64)
    labels = np.asarray(labels)
    groups = [p[_mask(labels, g)] for g in pair]
    for g, pts in zip(pair, groups):
        if len(pts) == 0:
            raise ValueError(f"class {g} absent from the projection")
    centroids = [g.mean(axis=0) for g in groups]
    spread = np.mean([np.sqrt(((g - c) ** 2).sum(axis=1).mean()) for g, c in zip(groups, centroids)])
    dist = float(np.linalg.norm(centroids[0] - centroids[1]))
    if spread == 0:
        return 0.0 if dist == 0 else float("inf")
    return dist / float(spread)


# -- scatter export ----------------------------------------------------------------------

COLORS = ("#2ca02c", "#d62728", "#9467bd")


def scatter_csv(projected: np.ndarray, labels: Sequence[int], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pc1", "pc2", "label"])
        for (a, b), l in zip(projected, labels):
            w.writerow([f"{a:.12g}", f"{b:.12g}", SHORT[int(l)]])


def scatter_svg(projected: np.ndarray, labels: Sequence[int], path: str | Path, title: str = "PCA",
                size: int = 480) -> None:
    p = np.asarray(projected, dtype=np.float64)
    margin = 40
    lo, hi = p.min(axis=0), p.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = margin + (p - lo) / span * (size - 2 * margin)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<text x="{size / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<text x="{size / 2:.1f}" y="{size - 8}" text-anchor="middle" font-size="12">PC1</text>',
           f'<text x="12" y="{size / 2:.1f}" font-size="12" transform="rotate(-90 12 {size / 2:.1f})">PC2</text>']
    for (x, y), l in zip(xy, labels):
        out.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="2.5" fill="{COLORS[int(l)]}" fill-opacity="0.7"/>')
    for i, name in enumerate(LABELS):
        y0 = 36 + 16 * i
        out.append(f'<rect x="{size - 100}" y="{y0 - 9}" width="10" height="10" fill="{COLORS[i]}"/>')
        out.append(f'<text x="{size - 84}" y="{y0}" font-size="12">{name} ({SHORT[i]})</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def scatter_export(projected: np.ndarray, labels: Sequence[int], path: str | Path, fmt: str = "csv",
                   title: str = "PCA") -> None:
    if np.asarray(projected).shape[1:] != (2,):
        raise ValueError("scatter export needs n x 2 coordinates")
    if fmt == "csv":
        scatter_csv(projected, labels, path)
    elif fmt == "svg":
        scatter_svg(projected, labels, path, title)
    else:
        raise ValueError(f"unknown scatter format {fmt!r}")
