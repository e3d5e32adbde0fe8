"""
ConfProbe Dataset Ingestion
Loads labelled image directories (labels.csv + PNG or raw tensor files)
"""

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import yaml
from PIL import Image as PILImage

from .errors import IngestionError, ErrorCode

TENSOR_MAGIC = b"BBCT"
TENSOR_VERSION = 1
TENSOR_HEADER = struct.Struct("<4sIIII")    # magic, version, H, W, C
TENSOR_SUFFIX = ".bbct"
LABELS_FILE = "labels.csv"
META_FILE = "meta.yaml"


@dataclass
class Dataset:
    """Images (H x W x C floats in [0, 1]) with their true labels"""
    images: List[np.ndarray]
    labels: List[int]
    num_classes: int
    filenames: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self):
        return self.images[0].shape if self.images else None

    def subset(self, start: int, stop: int) -> "Dataset":
        return Dataset(
            images=self.images[start:stop],
            labels=self.labels[start:stop],
            num_classes=self.num_classes,
            filenames=self.filenames[start:stop],
        )


def save_tensor(img: np.ndarray, path: Union[str, Path]):
    """Write the raw tensor format: BBCT header then little-endian float32 row-major"""
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise IngestionError(f"Tensor must be H x W x C, got {arr.shape}", code=ErrorCode.BAD_TENSOR)
    height, width, channels = arr.shape
    with open(path, "wb") as f:
        f.write(TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, height, width, channels))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    """Read a raw tensor file into an H x W x C float64 array"""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < TENSOR_HEADER.size:
        raise IngestionError(f"{path.name}: truncated header", code=ErrorCode.BAD_TENSOR)
    magic, version, height, width, channels = TENSOR_HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC or version != TENSOR_VERSION:
        raise IngestionError(f"{path.name}: not a BBCT v{TENSOR_VERSION} tensor", code=ErrorCode.BAD_TENSOR)
    expected = height * width * channels * 4
    payload = data[TENSOR_HEADER.size:]
    if len(payload) != expected:
        raise IngestionError(f"{path.name}: expected {expected} payload bytes, found {len(payload)}",
                             code=ErrorCode.BAD_TENSOR)
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width, channels)
    return values.astype(np.float64)


def load_png(path: Union[str, Path]) -> np.ndarray:
    """8-bit RGB PNG scaled to [0, 1]"""
    with PILImage.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def load_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == TENSOR_SUFFIX:
        return load_tensor(path)
    if path.suffix.lower() == ".png":
        return load_png(path)
    raise IngestionError(f"{path.name}: unsupported image format", code=ErrorCode.BAD_TENSOR)


def load_dataset(path: Union[str, Path], num_classes: Optional[int] = None) -> Dataset:
    """Load a dataset directory in labels.csv order

    The declared class count comes from `num_classes`, then meta.yaml, then
    the largest label + 1.
    """
    root = Path(path)
    labels_path = root / LABELS_FILE
    if not labels_path.exists():
        raise IngestionError(f"Missing {LABELS_FILE} in {root}", code=ErrorCode.FILE_MISSING)

    rows = _read_labels(labels_path)

    if num_classes is None and (root / META_FILE).exists():
        with open(root / META_FILE) as f:
            meta = yaml.safe_load(f) or {}
        num_classes = meta.get("num_classes")
    if num_classes is None:
        num_classes = max(label for _, label in rows) + 1 if rows else 2

    images, labels, filenames = [], [], []
    shape = None
    for filename, label in rows:
        if not 0 <= label < num_classes:
            raise IngestionError(f"{filename}: label {label} outside [0, {num_classes})",
                                 code=ErrorCode.LABEL_OUT_OF_RANGE)
        image_path = root / filename
        if not image_path.exists():
            raise IngestionError(f"{filename}: listed in {LABELS_FILE} but missing", code=ErrorCode.FILE_MISSING)
        img = load_image(image_path)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise IngestionError(f"{filename}: shape {img.shape} differs from {shape}",
                                 code=ErrorCode.SHAPE_INCONSISTENT)
        if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
            raise IngestionError(f"{filename}: values must be finite and in [0, 1]", code=ErrorCode.BAD_TENSOR)
        images.append(img)
        labels.append(label)
        filenames.append(filename)

    return Dataset(images=images, labels=labels, num_classes=int(num_classes), filenames=filenames)


def _read_labels(labels_path: Path) -> list:
    rows = []
    with open(labels_path, newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if line_no == 1 and [c.strip().lower() for c in row] == ["filename", "label"]:
                continue
            if len(row) != 2:
                raise IngestionError(f"{LABELS_FILE} line {line_no}: expected 'filename,label'",
                                     code=ErrorCode.MALFORMED_CSV)
            filename, label = row[0].strip(), row[1].strip()
            try:
                rows.append((filename, int(label)))
            except ValueError:
                raise IngestionError(f"{LABELS_FILE} line {line_no}: label '{label}' is not an integer",
                                     code=ErrorCode.MALFORMED_CSV)
    return rows


def write_dataset(dataset: Dataset, path: Union[str, Path]):
    """Write a dataset directory as raw tensors + labels.csv + meta.yaml"""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    filenames = dataset.filenames or [f"img_{i:05d}{TENSOR_SUFFIX}" for i in range(len(dataset))]
    with open(root / LABELS_FILE, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["filename", "label"])
        for filename, img, label in zip(filenames, dataset.images, dataset.labels):
            save_tensor(img, root / filename)
            writer.writerow([filename, label])
    with open(root / META_FILE, "w") as f:
        yaml.dump({"num_classes": dataset.num_classes}, f, default_flow_style=False)
