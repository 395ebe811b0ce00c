"""Melt-pool segmentation and measurement on off-axis thermal frames."""
import csv
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_THRESHOLD_C = 1250.0
DEFAULT_MEDIAN_KERNEL = 5

AGGREGATE_COLUMNS = ("power_w", "velocity_mm_s", "mean_length_px", "mean_height_px", "n_kept", "n_removed")


@dataclass(frozen=True)
class MeltPoolMeasurement:
    length_px: float
    height_px: float
    mask_area_px: int


def _check_frame(frame):
    frame = np.asarray(frame, dtype=float)
    if frame.ndim != 2 or min(frame.shape) < 1:
        raise ValueError(f"thermal frame must be a nonempty 2-D array, got shape {frame.shape}")
    if not np.isfinite(frame).all():
        raise ValueError("thermal frame contains non-finite values")
    return frame


def median_filter(frame, kernel=DEFAULT_MEDIAN_KERNEL):
    """kernel x kernel median with edge-replicated borders."""
    frame = _check_frame(frame)
    if int(kernel) != kernel or kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"median kernel must be a positive odd integer, got {kernel}")
    if kernel == 1:
        return frame.copy()
    return ndimage.median_filter(frame, size=int(kernel), mode="nearest")


_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def raw_threshold(frame, threshold_c=DEFAULT_THRESHOLD_C):
    return _check_frame(frame) >= threshold_c


def threshold_mask(frame, threshold_c=DEFAULT_THRESHOLD_C, fill_holes=True):
    """Pixels at or above ``threshold_c``, reduced to the largest 8-connected blob.

    Interior holes (cool-looking centres) are filled unless ``fill_holes``
    is off. Ties between equally large blobs go to the lowest label.
    """
    mask = raw_threshold(frame, threshold_c)
    labels, n = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    keep = labels == (int(np.argmax(sizes)) + 1)
    if fill_holes:
        keep = ndimage.binary_fill_holes(keep)
    return keep


def measure_lh(mask):
    """Bounding-box extents: length is horizontal (columns), height vertical (rows)."""
    mask = np.asarray(mask, dtype=bool)
    area = int(mask.sum())
    if area == 0:
        return MeltPoolMeasurement(0.0, 0.0, 0)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return MeltPoolMeasurement(float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1), area)


def measure_frame(temps, threshold_c=DEFAULT_THRESHOLD_C, kernel=DEFAULT_MEDIAN_KERNEL):
    """Median filter, isotherm mask and L/H measurement in one call."""
    return measure_lh(threshold_mask(median_filter(temps, kernel), threshold_c))


def _z_outliers(values, sigma):
    values = np.asarray(values, dtype=float)
    std = values.std()  # population std
    if std == 0 or math.isinf(sigma):
        return np.zeros(values.shape, dtype=bool)
    z = np.abs(values - values.mean()) / std
    # z of a lone outlier can land a few ulps under an exact boundary value
    return z >= sigma - 1e-9


def remove_outliers(cells, sigma=3.0):
    """Single-pass sigma rule inside each DOE cell.

    ``cells`` maps a cell key to a sequence of ``(length, height)`` pairs
    (plain scalars are accepted as a single measured quantity).
    A value is dropped when its length or its height sits ``sigma`` or more
    population standard deviations from its cell mean. Returns a mapping of
    the same keys to the kept pairs, in input order.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = OrderedDict()
    for key, values in cells.items():
        values = list(values)
        if len(values) < 2:
            raise ValueError(f"cell {key!r} needs at least 2 values, got {len(values)}")
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        drop = np.zeros(len(values), dtype=bool)
        for col in arr.T:
            drop |= _z_outliers(col, sigma)
        out[key] = [v for v, d in zip(values, drop) if not d]
    return out


def outlier_flags(records, sigma=3.0, key=lambda r: r.cell, value=lambda r: (r.length_px, r.height_px)):
    """Per-record drop flags using the same rule as :func:`remove_outliers`."""
    groups = OrderedDict()
    for i, r in enumerate(records):
        groups.setdefault(key(r), []).append(i)
    flags = np.zeros(len(records), dtype=bool)
    for idx in groups.values():
        if len(idx) < 2:
            continue
        arr = np.asarray([value(records[i]) for i in idx], dtype=float)
        drop = _z_outliers(arr[:, 0], sigma) | _z_outliers(arr[:, 1], sigma)
        flags[idx] = drop
    return flags


@dataclass(frozen=True)
class CellAggregate:
    power_w: float
    velocity_mm_s: float
    mean_length_px: float
    mean_height_px: float
    n_kept: int
    n_removed: int

    @property
    def missing(self):
        return self.n_kept == 0


def aggregate_doe(records, removed=None, cells=None):
    """Mean length and height per (power, velocity) cell.

    ``records`` are the kept records; ``removed`` (optional) are the dropped
    ones, only counted. Cells listed in ``cells`` with no kept record come
    back flagged missing with NaN means.
    """
    kept, dropped = OrderedDict(), {}
    for c in cells or ():
        kept.setdefault(tuple(c), [])
    for r in records:
        kept.setdefault(r.cell, []).append(r)
    for r in removed or ():
        dropped[r.cell] = dropped.get(r.cell, 0) + 1
        kept.setdefault(r.cell, [])
    rows = []
    for cell in sorted(kept):
        rs = kept[cell]
        if rs:
            mean_l = sum(r.length_px for r in rs) / len(rs)
            mean_h = sum(r.height_px for r in rs) / len(rs)
        else:
            mean_l = mean_h = float("nan")
        rows.append(CellAggregate(cell[0], cell[1], mean_l, mean_h, len(rs), dropped.get(cell, 0)))
    return rows


def write_aggregate_csv(path, rows):
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGGREGATE_COLUMNS)
        for r in rows:
            w.writerow([f"{r.power_w:g}", f"{r.velocity_mm_s:g}", f"{r.mean_length_px:.4f}", f"{r.mean_height_px:.4f}", r.n_kept, r.n_removed])


def preprocess_manifest(manifest_path, out_dir, threshold_c=DEFAULT_THRESHOLD_C, kernel=DEFAULT_MEDIAN_KERNEL, sigma=3.0):
    """Measure every off-axis frame, drop outliers and write the cleaned dataset.

    Writes ``manifest.csv`` (measured geometry, paths rebased onto the
    original images), ``norm.json`` and ``doe_aggregate.csv`` into
    ``out_dir``. Only reads the source dataset.
    """
    from .synth import FrameRecord, NormalizationConstants, intensity_to_celsius, read_manifest, read_png, write_manifest

    records, root = read_manifest(manifest_path)
    measured = []
    for r in records:
        m = measure_frame(intensity_to_celsius(read_png(root / r.off_axis_path)), threshold_c, kernel)
        if m.mask_area_px == 0:
            continue
        measured.append(FrameRecord(r.frame_id, r.on_axis_path, r.off_axis_path, r.power_w, r.velocity_mm_s, m.length_px, m.height_px))
    flags = outlier_flags(measured, sigma)
    kept = [r for r, f in zip(measured, flags) if not f]
    removed = [r for r, f in zip(measured, flags) if f]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.csv", kept, relative_to=root)
    NormalizationConstants.from_records(kept).save(out / "norm.json")
    rows = aggregate_doe(kept, removed)
    write_aggregate_csv(out / "doe_aggregate.csv", rows)
    return out / "manifest.csv", rows
