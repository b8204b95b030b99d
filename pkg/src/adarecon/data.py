"""Dataset folder ingestion and on-disk formats.

Dataset layout (one directory per category)::

    <root>/<category>/train/good/*.png
    <root>/<category>/test/good/*.png
    <root>/<category>/test/<defect>/*.png
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png

Raw array layout (``.bin``): the 8 bytes ``ADRARR01``, a little-endian
``uint32`` rank, ``rank`` little-endian ``uint32`` dimensions, then the
values as little-endian ``float32`` in row-major order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "DatasetError",
    "TestItem",
    "CategoryIndex",
    "DatasetLayout",
    "load_dataset",
    "read_image",
    "read_mask",
    "to_model_range",
    "to_storage_uint8",
    "write_image",
    "write_raw_array",
    "read_raw_array",
    "write_map_png",
]

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
RAW_MAGIC = b"ADRARR01"


class DatasetError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        head = self.errors[0] if len(self.errors) == 1 else f"{len(self.errors)} dataset errors"
        super().__init__(head + ("" if len(self.errors) == 1 else ":\n  " + "\n  ".join(self.errors)))


@dataclass(frozen=True)
class TestItem:
    path: Path
    defect_type: str
    mask_path: Path | None

    @property
    def label(self) -> int:
        return 0 if self.defect_type == "good" else 1

    @property
    def name(self) -> str:
        return f"{self.defect_type}/{self.path.stem}"


@dataclass
class CategoryIndex:
    name: str
    root: Path
    train: list[Path] = field(default_factory=list)
    test: list[TestItem] = field(default_factory=list)


@dataclass
class DatasetLayout:
    root: Path
    categories: dict[str, CategoryIndex]

    def __getitem__(self, name: str) -> CategoryIndex:
        if name not in self.categories:
            raise KeyError(f"category {name!r} not in {self.root} (have: {sorted(self.categories)})")
        return self.categories[name]


def _images_in(d: Path) -> list[Path]:
    if not d.is_dir():
        return []
    return sorted((p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()),
                  key=lambda p: p.name)


def _size_of(path: Path, errors: list[str]):
    try:
        with Image.open(path) as im:
            return im.size
    except Exception as exc:  # noqa: BLE001 - any decoder failure is a dataset error
        errors.append(f"{path}: unreadable image ({exc})")
        return None


def _find_mask(cat_root: Path, defect: str, stem: str) -> Path | None:
    gt = cat_root / "ground_truth" / defect
    for cand in (gt / f"{stem}_mask.png", gt / f"{stem}.png"):
        if cand.is_file():
            return cand
    return None


def _index_category(cat_root: Path, errors: list[str]) -> CategoryIndex:
    idx = CategoryIndex(cat_root.name, cat_root)
    idx.train = _images_in(cat_root / "train" / "good")
    if not idx.train:
        errors.append(f"{cat_root / 'train' / 'good'}: no training images")
    for p in idx.train:
        _size_of(p, errors)
    test_root = cat_root / "test"
    defects = sorted(d.name for d in test_root.iterdir() if d.is_dir()) if test_root.is_dir() else []
    if not defects:
        errors.append(f"{test_root}: no test images")
    for defect in defects:
        for p in _images_in(test_root / defect):
            size = _size_of(p, errors)
            mask = None
            if defect != "good":
                mask = _find_mask(cat_root, defect, p.stem)
                if mask is None:
                    errors.append(f"{p}: missing ground-truth mask "
                                  f"{cat_root / 'ground_truth' / defect / (p.stem + '_mask.png')}")
                else:
                    msize = _size_of(mask, errors)
                    if size is not None and msize is not None and msize != size:
                        errors.append(f"{mask}: mask size {msize} != image size {size}")
            idx.test.append(TestItem(p, defect, mask))
    return idx


def load_dataset(root: str | Path, categories: list[str] | None = None) -> DatasetLayout:
    """Index and validate a dataset folder.

    All problems are collected and raised together as :class:`DatasetError`,
    each naming the offending file.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError([f"{root}: dataset root does not exist"])
    names = categories or sorted(d.name for d in root.iterdir()
                                 if d.is_dir() and (d / "train").is_dir())
    if not names:
        raise DatasetError([f"{root}: no category directories with a train/ folder"])
    errors: list[str] = []
    cats = {}
    for name in names:
        if not (root / name).is_dir():
            errors.append(f"{root / name}: category directory not found")
            continue
        cats[name] = _index_category(root / name, errors)
    if errors:
        raise DatasetError(errors)
    return DatasetLayout(root, cats)


def to_model_range(img: np.ndarray) -> np.ndarray:
    """``uint8`` or [0, 1] float ``(H, W[, C])`` -> float32 ``(C, H, W)`` in [-1, 1]."""
    a = np.asarray(img)
    a = a.astype(np.float32) / 255.0 if a.dtype == np.uint8 else a.astype(np.float32)
    if a.ndim == 2:
        a = a[..., None]
    return np.ascontiguousarray(a.transpose(2, 0, 1) * 2.0 - 1.0)


def to_storage_uint8(x: np.ndarray) -> np.ndarray:
    """Model-range ``(C, H, W)`` -> ``uint8`` ``(H, W, C)`` (or ``(H, W)`` for one channel)."""
    a = np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    a = np.round(a * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return a[..., 0] if a.shape[2] == 1 else a


def read_image(path: str | Path, resolution: int | None = None, mode: str = "RGB") -> np.ndarray:
    """Image as ``uint8`` ``(H, W, C)``, bilinearly resized to ``resolution`` if given."""
    with Image.open(path) as im:
        im = im.convert(mode)
        if resolution and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        a = np.asarray(im, dtype=np.uint8)
    return a if a.ndim == 3 else a[..., None]


def read_mask(path: str | Path | None, shape: tuple[int, int]) -> np.ndarray:
    """Binary ``uint8`` mask of ``shape``; a missing path means an all-normal mask."""
    if path is None:
        return np.zeros(shape, dtype=np.uint8)
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (shape[1], shape[0]):
            im = im.resize((shape[1], shape[0]), Image.NEAREST)
        return (np.asarray(im) > 127).astype(np.uint8)


def write_image(path: str | Path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img)).save(path)


def write_raw_array(path: str | Path, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes(order="C"))


def read_raw_array(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw array file")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload has {data.size} values, header says {shape}")
    return data.reshape(shape).astype(np.float32)


def write_map_png(path: str | Path, amap: np.ndarray) -> None:
    """16-bit grayscale, min-max scaled; the scaling goes to ``<path>.json``."""
    a = np.asarray(amap, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)
    Path(str(path) + ".json").write_text(json.dumps({"min": lo, "max": hi, "bits": 16}) + "\n")
