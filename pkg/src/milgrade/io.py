"""On-disk bag layout: manifest.jsonl plus one .femb/.fcoo (and optional .flbl) per slide.

.femb  "FEMB" u32 version=1, u32 n, u32 dim, n*dim little-endian f32 row-major
.fcoo  "FCOO" u32 version=1, u32 n, n*(i32 x, i32 y)
.flbl  "FLBL" u32 version=1, u32 n, n*u8 patch class (255 = unlabeled)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from milgrade.errors import ContractError, FormatError
from milgrade.model import Bag

MANIFEST = "manifest.jsonl"
UNLABELED = 255
_VERSION = 1
_RECORD_KEYS = ("slide_id", "patient_id", "label", "n_patches", "dim", "patch_size", "embedding_path", "coord_path")


@dataclass
class SlideRecord:
    slide_id: str
    patient_id: str
    label: Optional[int]
    n_patches: int
    dim: int
    patch_size: int
    embedding_path: str
    coord_path: str

    def __post_init__(self):
        if not self.slide_id or not self.patient_id:
            raise ContractError("slide_id and patient_id must be non-empty")
        if self.n_patches < 1:
            raise ContractError(f"slide {self.slide_id}: n_patches must be >= 1")
        if self.label is not None and not 0 <= self.label < 5:
            raise ContractError(f"slide {self.slide_id}: label {self.label} out of range")

    def to_json(self) -> str:
        d = asdict(self)
        if d["label"] is None:
            del d["label"]
        return json.dumps({k: d[k] for k in _RECORD_KEYS if k in d}, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "SlideRecord":
        try:
            d = json.loads(line)
            return cls(
                slide_id=str(d["slide_id"]),
                patient_id=str(d["patient_id"]),
                label=d.get("label"),
                n_patches=int(d["n_patches"]),
                dim=int(d["dim"]),
                patch_size=int(d["patch_size"]),
                embedding_path=str(d["embedding_path"]),
                coord_path=str(d["coord_path"]),
            )
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
            if isinstance(e, ContractError):
                raise FormatError(f"invalid manifest entry: {e}") from None
            raise FormatError(f"invalid manifest line: {line.strip()[:80]!r}") from None


def encode_embeddings(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ContractError(f"embedding block must be a non-empty n x dim array, got {x.shape}")
    x32 = np.ascontiguousarray(x, dtype="<f4")
    if not np.all(np.isfinite(x32)):
        raise ContractError("embedding block contains non-finite values")
    return b"FEMB" + struct.pack("<III", _VERSION, x32.shape[0], x32.shape[1]) + x32.tobytes()


def decode_embeddings(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    n, (dim,) = _header(raw, b"FEMB", "<I", name)
    need = 16 + n * dim * 4
    if len(raw) != need:
        raise FormatError(f"{name}: truncated or oversized payload ({len(raw)} bytes, expected {need})")
    x = np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, dim).astype(np.float32)
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{name}: non-finite embedding values")
    return x


def encode_coords(coords) -> bytes:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if len(c) == 0:
        raise ContractError("coord block must be non-empty")
    if len({tuple(r) for r in c.tolist()}) != len(c):
        raise ContractError("duplicate coordinates")
    return b"FCOO" + struct.pack("<II", _VERSION, len(c)) + np.ascontiguousarray(c, dtype="<i4").tobytes()


def decode_coords(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    n, _ = _header(raw, b"FCOO", "", name)
    need = 12 + n * 8
    if len(raw) != need:
        raise FormatError(f"{name}: truncated or oversized payload ({len(raw)} bytes, expected {need})")
    c = np.frombuffer(raw, dtype="<i4", offset=12).reshape(n, 2).astype(np.int64)
    if len({tuple(r) for r in c.tolist()}) != n:
        raise FormatError(f"{name}: duplicate coordinates")
    return c


def encode_patch_labels(labels) -> bytes:
    lab = np.asarray(labels, dtype=np.int64).ravel()
    if len(lab) == 0:
        raise ContractError("label block must be non-empty")
    if np.any((lab < 0) | ((lab > 5) & (lab != UNLABELED))):
        raise ContractError("patch labels must be 0..5 or 255")
    return b"FLBL" + struct.pack("<II", _VERSION, len(lab)) + lab.astype(np.uint8).tobytes()


def decode_patch_labels(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    n, _ = _header(raw, b"FLBL", "", name)
    if len(raw) != 12 + n:
        raise FormatError(f"{name}: truncated or oversized payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=12).astype(np.int64)


def _header(raw: bytes, magic: bytes, extra: str, name: str):
    fmt = "<II" + extra.lstrip("<")
    size = 4 + struct.calcsize(fmt)
    if len(raw) < 4 or raw[:4] != magic:
        raise FormatError(f"{name}: bad magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < size:
        raise FormatError(f"{name}: truncated header")
    version, n, *rest = struct.unpack_from(fmt, raw, 4)
    if version != _VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if n == 0:
        raise ContractError(f"{name}: empty block (n=0)")
    return n, rest


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing file {path}") from None


def write_bag(record: SlideRecord, embeddings, coords, root, patch_labels=None) -> None:
    emb = np.asarray(embeddings)
    if emb.ndim != 2 or emb.shape != (record.n_patches, record.dim):
        raise ContractError(
            f"slide {record.slide_id}: embeddings {emb.shape} disagree with record ({record.n_patches}, {record.dim})"
        )
    root = Path(root)
    emb_path = root / record.embedding_path
    emb_path.parent.mkdir(parents=True, exist_ok=True)
    coord_path = root / record.coord_path
    coord_path.parent.mkdir(parents=True, exist_ok=True)
    emb_bytes = encode_embeddings(emb)
    coord_bytes = encode_coords(coords)
    if len(np.asarray(coords).reshape(-1, 2)) != record.n_patches:
        raise ContractError(f"slide {record.slide_id}: coord count disagrees with n_patches")
    emb_path.write_bytes(emb_bytes)
    coord_path.write_bytes(coord_bytes)
    if patch_labels is not None:
        if len(patch_labels) != record.n_patches:
            raise ContractError(f"slide {record.slide_id}: label count disagrees with n_patches")
        label_path(record, root).write_bytes(encode_patch_labels(patch_labels))


def label_path(record: SlideRecord, root) -> Path:
    return (Path(root) / record.embedding_path).with_suffix(".flbl")


def read_bag(record: SlideRecord, root) -> Bag:
    root = Path(root)
    emb = decode_embeddings(_read(root / record.embedding_path), record.embedding_path)
    coords = decode_coords(_read(root / record.coord_path), record.coord_path)
    if emb.shape != (record.n_patches, record.dim):
        raise FormatError(
            f"slide {record.slide_id}: file holds {emb.shape}, manifest says ({record.n_patches}, {record.dim})"
        )
    if len(coords) != len(emb):
        raise FormatError(f"slide {record.slide_id}: {len(coords)} coords for {len(emb)} embeddings")
    return Bag(record.slide_id, record.patient_id, emb, coords, record.patch_size, record.label)


def read_patch_labels(record: SlideRecord, root) -> Optional[np.ndarray]:
    p = label_path(record, root)
    if not p.exists():
        return None
    lab = decode_patch_labels(p.read_bytes(), str(p.name))
    if len(lab) != record.n_patches:
        raise FormatError(f"{p.name}: {len(lab)} labels for {record.n_patches} patches")
    return lab


def write_manifest(records, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    text = "".join(r.to_json() + "\n" for r in records)
    (root / MANIFEST).write_text(text, encoding="utf-8")


def read_manifest(root) -> list[SlideRecord]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FormatError(f"no {MANIFEST} in {root}")
    lines = path.read_text(encoding="utf-8").splitlines()
    return [SlideRecord.from_json(line) for line in lines if line.strip()]


def load_bags(root) -> list[Bag]:
    return [read_bag(r, root) for r in read_manifest(root)]


def write_bags(bags, root, patch_labels=None) -> list[SlideRecord]:
    """Write every bag plus the manifest; returns the records in order."""
    records = []
    for i, bag in enumerate(bags):
        rec = SlideRecord(
            slide_id=bag.slide_id,
            patient_id=bag.patient_id,
            label=bag.label,
            n_patches=bag.n,
            dim=bag.embeddings.shape[1],
            patch_size=bag.patch_size,
            embedding_path=f"bags/{bag.slide_id}.femb",
            coord_path=f"bags/{bag.slide_id}.fcoo",
        )
        write_bag(rec, bag.embeddings, bag.coords, root, None if patch_labels is None else patch_labels[i])
        records.append(rec)
    write_manifest(records, root)
    return records
