"""Grid-resolution attention maps: one cell per patch, 8-bit grayscale."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Union

import numpy as np

from milgrade import SLIDE_CLASSES
from milgrade.errors import ContractError, NumericError, UsageError
from milgrade.model import Bag, MilParams, mil_forward


@dataclass(frozen=True)
class HeatmapSpec:
    target_class: Union[int, str] = "predicted"
    cell: int = 8
    normalization: tuple[float, float] = (1.0, 99.0)

    def __post_init__(self):
        if self.cell < 1:
            raise ContractError("cell must be >= 1")
        lo, hi = self.normalization
        if not 0 <= lo <= hi <= 100:
            raise ContractError(f"percentiles must satisfy 0 <= lo <= hi <= 100, got {self.normalization}")


def resolve_class(target: Union[int, str], n_classes: int) -> Union[int, str]:
    if isinstance(target, int):
        if not 0 <= target < n_classes:
            raise UsageError(f"class index {target} out of range")
        return target
    t = str(target).strip().lower()
    if t == "predicted":
        return t
    if t.isdigit():
        return resolve_class(int(t), n_classes)
    if t in SLIDE_CLASSES[:n_classes]:
        return SLIDE_CLASSES.index(t)
    raise UsageError(f"unknown class {target!r}; expected one of {', '.join(SLIDE_CLASSES)} or 'predicted'")


def normalize_attention(a: np.ndarray, lo_pct: float, hi_pct: float) -> np.ndarray:
    """Percentile clip then min-max to 0..255; a constant column maps to 255."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = np.percentile(a, [lo_pct, hi_pct])
    clipped = np.clip(a, lo, hi)
    span = clipped.max() - clipped.min()
    if span <= 0:
        return np.full(a.shape, 255, dtype=np.uint8)
    return np.rint((clipped - clipped.min()) / span * 255.0).astype(np.uint8)


def render_attention_map(params: MilParams, bag: Bag, spec: HeatmapSpec = HeatmapSpec()):
    """Returns (raster, csv_text, class_index)."""
    out = mil_forward(params, bag)
    if not (np.all(np.isfinite(out.logits)) and np.all(np.isfinite(out.attention))):
        raise NumericError(f"non-finite attention or logits for slide {bag.slide_id}")
    target = resolve_class(spec.target_class, params.config.n_classes)
    cls = int(np.argmax(out.logits)) if target == "predicted" else target
    values = normalize_attention(out.attention[:, cls], *spec.normalization)

    grid = bag.coords // bag.patch_size
    origin = grid.min(axis=0)
    grid = grid - origin
    gw, gh = grid.max(axis=0) + 1
    c = spec.cell
    raster = np.zeros((gh * c, gw * c), dtype=np.uint8)
    for (gx, gy), v in zip(grid, values):
        raster[gy * c : (gy + 1) * c, gx * c : (gx + 1) * c] = v

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", *[f"a_class{k}" for k in range(params.config.n_classes)]])
    for (x, y), row in zip(bag.coords, out.attention):
        w.writerow([int(x), int(y), *[repr(float(v)) for v in row]])
    return raster, buf.getvalue(), cls
