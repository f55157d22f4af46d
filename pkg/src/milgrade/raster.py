"""Binary PPM/PGM rasters, saturation-based tissue detection and grid patch extraction.

Mask pixel values are patch classes: 0 background/non-tumor, 1 lepidic,
2 acinar, 3 papillary, 4 micropapillary, 5 solid, 6 cribriform.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from milgrade.errors import ContractError, DataError, FormatError

CRIBRIFORM = 6
SATURATION_THRESHOLD = 8  # out of 255


@dataclass(frozen=True)
class PatchSample:
    coord: tuple[int, int]
    label: int
    tissue_fraction: float


def _read_netpbm(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} header, found {raw[:2]!r}")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: malformed header") from None
    if not 0 < maxval < 256:
        raise FormatError(f"{path}: only 8-bit rasters are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    data = raw[pos : pos + need]
    if len(data) != need:
        raise FormatError(f"{path}: truncated raster ({len(data)} of {need} bytes)")
    arr = np.frombuffer(data, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")


def write_ppm(path, image) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def write_pgm(path, image) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def _tissue_mask(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.uint8)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    # 255 * 255 still fits in uint16
    mx = np.maximum(np.maximum(r, g), b).astype(np.uint16)
    mn = np.minimum(np.minimum(r, g), b).astype(np.uint16)
    # S = (max - min) / max >= 8/255 in integer form; S is 0 where max is 0
    return (mx > 0) & ((mx - mn) * 255 >= SATURATION_THRESHOLD * mx)


def tissue_fraction(patch) -> float:
    patch = np.asarray(patch)
    if patch.size == 0:
        return 0.0
    return float(_tissue_mask(patch).mean())


def _grid(h: int, w: int, patch_size: int):
    if patch_size < 1:
        raise ContractError("patch_size must be >= 1")
    return h // patch_size, w // patch_size


def _cells(x: np.ndarray, gh: int, gw: int, ps: int) -> np.ndarray:
    """(H, W, ...) -> (gh, gw, ps*ps, ...) view of the full-size grid cells."""
    x = x[: gh * ps, : gw * ps]
    rest = x.shape[2:]
    x = x.reshape(gh, ps, gw, ps, *rest).swapaxes(1, 2)
    return x.reshape(gh, gw, ps * ps, *rest)


def extract_tissue_patches(image, patch_size: int = 448, tissue_min: float = 0.10) -> list[tuple[int, int]]:
    image = np.asarray(image)
    if image.ndim != 3 or image.size == 0:
        raise ContractError(f"expected a non-empty RGB raster, got shape {image.shape}")
    gh, gw = _grid(image.shape[0], image.shape[1], patch_size)
    if gh == 0 or gw == 0:
        return []
    frac = _cells(_tissue_mask(image), gh, gw, patch_size).mean(axis=-1)
    rows, cols = np.nonzero(frac >= tissue_min)
    return [(int(c) * patch_size, int(r) * patch_size) for r, c in zip(rows, cols)]


def extract_labeled_patches(image, mask, patch_size: int = 448, tissue_min: float = 0.10) -> list[PatchSample]:
    """Grid patches that are a single non-cribriform class and at least ``tissue_min`` tissue."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim != 3 or mask.ndim != 2 or image.shape[:2] != mask.shape:
        raise ContractError(
            f"image {image.shape[1]}x{image.shape[0]} and mask "
            f"{mask.shape[1] if mask.ndim == 2 else '?'}x{mask.shape[0]} differ in size"
        )
    bad = np.argwhere(mask > CRIBRIFORM)
    if len(bad):
        y, x = bad[0]
        raise DataError(f"invalid mask value {int(mask[y, x])} at pixel (x={x}, y={y})")
    gh, gw = _grid(mask.shape[0], mask.shape[1], patch_size)
    if gh == 0 or gw == 0:
        return []
    m = _cells(mask, gh, gw, patch_size)
    pure = np.all(m == m[..., :1], axis=-1)
    frac = _cells(_tissue_mask(image), gh, gw, patch_size).mean(axis=-1)
    label = m[..., 0]
    keep = pure & (label != CRIBRIFORM) & (frac >= tissue_min)
    out = []
    for r, c in zip(*np.nonzero(keep)):
        out.append(PatchSample((int(c) * patch_size, int(r) * patch_size), int(label[r, c]), float(frac[r, c])))
    return out
