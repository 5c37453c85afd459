import logging
import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from paritygraft.services.tensors import PixelImage, ShapeError

logger = logging.getLogger(__name__)

CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_BATCHES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_BATCH = "test_batch.bin"

TENSOR_MAGIC = b"TNSR"
WEIGHTS_MAGIC = b"WGTS"
CONTAINER_VERSION = 1
DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_FOR_KIND = {("u", 1): 0, ("f", 4): 1, ("f", 8): 2}

PPM_WHITESPACE = b" \t\r\n\x0b\x0c"


class FormatError(ValueError):
    def __init__(self, reason: str, offset: int = 0):
        super().__init__(f"{reason} (at byte {offset})")
        self.reason = reason
        self.offset = offset


class PpmFormatError(FormatError):
    pass


class CifarFormatError(FormatError):
    pass


class ContainerFormatError(FormatError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: tuple[PixelImage, ...]
    labels: tuple[int, ...]
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "labels", tuple(int(label) for label in self.labels))
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels.")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive.")
        bad = [label for label in self.labels if not 0 <= label < self.num_classes]
        if bad:
            raise ValueError(f"Labels {sorted(set(bad))} fall outside [0, {self.num_classes}).")
        shapes = {img.shape for img in self.images}
        if len(shapes) > 1:
            raise ShapeError(f"Dataset mixes image shapes: {sorted(shapes)}.")

    @classmethod
    def from_arrays(cls, pixels: np.ndarray, labels: Iterable[int], num_classes: int) -> "LabeledDataset":
        arr = np.asarray(pixels, dtype=np.uint8)
        if arr.ndim != 4:
            raise ShapeError(f"Expected (N, C, H, W) pixels, got shape {arr.shape}.")
        return cls(tuple(PixelImage.from_array(a) for a in arr), tuple(labels), num_classes)

    def __len__(self) -> int:
        return len(self.images)

    @cached_property
    def pixels(self) -> np.ndarray:
        """All images stacked as one read-only (N, C, H, W) uint8 array."""
        if not self.images:
            arr = np.zeros((0, 0, 0, 0), dtype=np.uint8)
        else:
            arr = np.stack([img.data for img in self.images])
        arr.setflags(write=False)
        return arr

    @property
    def sample_shape(self) -> Optional[tuple[int, int, int]]:
        return self.images[0].shape if self.images else None

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset(
            tuple(self.images[i] for i in indices),
            tuple(self.labels[i] for i in indices),
            self.num_classes,
        )

    def take(self, count: int) -> "LabeledDataset":
        return self.subset(range(min(count, len(self))))


# CIFAR-10 binary batches


def load_cifar10(data: bytes) -> LabeledDataset:
    if len(data) % CIFAR_RECORD:
        raise CifarFormatError(f"length {len(data)} is not a multiple of {CIFAR_RECORD}", len(data))
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        raise CifarFormatError(f"label {int(labels[bad[0]])} is not a CIFAR-10 class", int(bad[0]) * CIFAR_RECORD)
    if not len(records):
        return LabeledDataset((), (), CIFAR_CLASSES)
    pixels = records[:, 1:].reshape((-1,) + CIFAR_SHAPE)
    return LabeledDataset.from_arrays(pixels, labels.tolist(), CIFAR_CLASSES)


def dump_cifar10(dataset: LabeledDataset) -> bytes:
    if len(dataset) == 0:
        return b""
    if dataset.sample_shape != CIFAR_SHAPE:
        raise ShapeError(f"CIFAR records hold 3x32x32 images, got {dataset.sample_shape}.")
    if max(dataset.labels) >= CIFAR_CLASSES:
        raise ValueError("CIFAR records hold labels 0..9.")
    labels = np.asarray(dataset.labels, dtype=np.uint8)[:, np.newaxis]
    flat = dataset.pixels.reshape(len(dataset), -1)
    return np.concatenate([labels, flat], axis=1).tobytes()


def load_cifar10_dir(path: str, train: bool = True) -> LabeledDataset:
    names = CIFAR_TRAIN_BATCHES if train else (CIFAR_TEST_BATCH,)
    parts = []
    for name in names:
        with open(os.path.join(path, name), "rb") as handle:
            parts.append(load_cifar10(handle.read()))
    logger.info("Loaded %d CIFAR-10 %s samples from %s.", sum(len(p) for p in parts), "train" if train else "test", path)
    return LabeledDataset(
        tuple(img for p in parts for img in p.images),
        tuple(label for p in parts for label in p.labels),
        CIFAR_CLASSES,
    )


# P6 PPM


def _ppm_header(data: bytes) -> tuple[list[bytes], int]:
    if data[:2] != b"P6":
        raise PpmFormatError("not a binary PPM (magic must be P6)", 0)
    pos = 2
    tokens: list[bytes] = []
    while len(tokens) < 3:
        while pos < len(data):
            if data[pos] in PPM_WHITESPACE:
                pos += 1
            elif data[pos] == ord("#"):
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                break
        start = pos
        while pos < len(data) and data[pos] not in PPM_WHITESPACE and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise PpmFormatError("truncated header", pos)
        tokens.append(data[start:pos])
    if pos >= len(data) or data[pos] not in PPM_WHITESPACE:
        raise PpmFormatError("header must end with a single whitespace byte", pos)
    return tokens, pos + 1


def read_ppm(data: bytes) -> PixelImage:
    tokens, offset = _ppm_header(data)
    if not all(t.isdigit() for t in tokens):
        raise PpmFormatError(f"non-numeric header field in {tokens!r}", offset)
    width, height, maxval = (int(t) for t in tokens)
    if width < 1 or height < 1:
        raise PpmFormatError(f"image size {width}x{height} is empty", offset)
    if maxval != 255:
        raise PpmFormatError(f"maxval {maxval} is not 255", offset)
    expected = 3 * width * height
    payload = data[offset:]
    if len(payload) < expected:
        raise PpmFormatError(f"payload has {len(payload)} of {expected} bytes", len(data))
    if len(payload) > expected:
        raise PpmFormatError(f"{len(payload) - expected} trailing bytes after the payload", offset + expected)
    interleaved = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return PixelImage.from_array(interleaved.transpose(2, 0, 1))


def write_ppm(img: PixelImage) -> bytes:
    if img.channels != 3:
        raise ShapeError(f"PPM stores 3 channels, image has {img.channels}.")
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.data.transpose(1, 2, 0).tobytes()


# TNSR / WGTS containers


def write_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    code = CODE_FOR_KIND.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise ValueError(f"Containers store uint8, float32 or float64, got {arr.dtype}.")
    if arr.ndim > 255:
        raise ValueError("Containers store at most 255 dimensions.")
    header = TENSOR_MAGIC + bytes([CONTAINER_VERSION, code, arr.ndim])
    dims = np.asarray(arr.shape, dtype="<u4").tobytes()
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    return header + dims + payload


def _decode_tensor(data: bytes, offset: int) -> tuple[np.ndarray, int]:
    if data[offset : offset + 4] != TENSOR_MAGIC:
        raise ContainerFormatError("tensor magic mismatch", offset)
    if len(data) < offset + 7:
        raise ContainerFormatError("truncated tensor header", len(data))
    version, code, rank = data[offset + 4], data[offset + 5], data[offset + 6]
    if version != CONTAINER_VERSION:
        raise ContainerFormatError(f"unknown tensor version {version}", offset + 4)
    if code not in DTYPE_CODES:
        raise ContainerFormatError(f"unknown dtype code {code}", offset + 5)
    pos = offset + 7
    if len(data) < pos + 4 * rank:
        raise ContainerFormatError("truncated dims", len(data))
    dims = tuple(int(d) for d in np.frombuffer(data, dtype="<u4", count=rank, offset=pos))
    pos += 4 * rank
    dtype = DTYPE_CODES[code]
    size = dtype.itemsize * math.prod(dims)
    if len(data) < pos + size:
        raise ContainerFormatError(f"payload needs {size} bytes, {len(data) - pos} remain", pos)
    arr = np.frombuffer(data, dtype=dtype, count=math.prod(dims), offset=pos).reshape(dims).copy()
    return arr, pos + size


def read_tensor(data: bytes) -> np.ndarray:
    arr, end = _decode_tensor(data, 0)
    if end != len(data):
        raise ContainerFormatError(f"{len(data) - end} trailing bytes after the tensor", end)
    return arr


def write_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    if len(tensors) > 255:
        raise ValueError("A weights container holds at most 255 tensors.")
    parts = [WEIGHTS_MAGIC, bytes([len(tensors)])]
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        if not encoded or len(encoded) > 0xFFFF:
            raise ValueError(f"Tensor name {name!r} must be 1..65535 UTF-8 bytes.")
        parts.append(len(encoded).to_bytes(2, "little"))
        parts.append(encoded)
        parts.append(write_tensor(array))
    return b"".join(parts)


def read_weights(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != WEIGHTS_MAGIC:
        raise ContainerFormatError("weights magic mismatch", 0)
    if len(data) < 5:
        raise ContainerFormatError("missing tensor count", len(data))
    count = data[4]
    pos = 5
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(data) < pos + 2:
            raise ContainerFormatError("truncated name length", len(data))
        length = int.from_bytes(data[pos : pos + 2], "little")
        pos += 2
        if length == 0 or len(data) < pos + length:
            raise ContainerFormatError("truncated or empty tensor name", pos)
        try:
            name = data[pos : pos + length].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerFormatError("tensor name is not UTF-8", pos) from exc
        if name in tensors:
            raise ContainerFormatError(f"duplicate tensor name {name!r}", pos)
        pos += length
        tensors[name], pos = _decode_tensor(data, pos)
    if pos != len(data):
        raise ContainerFormatError(f"{len(data) - pos} trailing bytes after the last tensor", pos)
    return tensors


# Synthetic data


def synth_dataset(
    classes: int,
    per_class: int,
    seed: int,
    noise: float = 16.0,
    shape: tuple[int, int, int] = CIFAR_SHAPE,
) -> LabeledDataset:
    """Class-conditional colour fields with a Gaussian blob, plus pixel noise, rounded to 8 bits.

    Each class gets its own hue and blob position; prototypes stay inside [40, 220] so noise rarely
    clips and the even/odd split of clean pixels stays near one half.
    """
    if classes < 2:
        raise ValueError("synth_dataset needs at least 2 classes.")
    if per_class < 0 or noise < 0:
        raise ValueError("per_class and noise must be non-negative.")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, h), np.linspace(0.0, 1.0, w), indexing="ij")

    prototypes = []
    for k in range(classes):
        angle = 2.0 * np.pi * k / classes
        colour = 0.5 + 0.5 * np.cos(angle + 2.0 * np.pi * np.arange(c) / 3.0)
        cy, cx = 0.5 + 0.25 * np.sin(angle), 0.5 + 0.25 * np.cos(angle)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.15**2))
        prototypes.append(40.0 + 120.0 * colour[:, None, None] + 60.0 * blob[None])

    labels = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(len(labels))
    labels = labels[order]
    base = np.stack(prototypes)[labels] if len(labels) else np.zeros((0,) + tuple(shape))
    samples = base + rng.normal(0.0, noise, size=base.shape) if noise else base
    pixels = np.clip(np.rint(samples), 0, 255).astype(np.uint8)
    return LabeledDataset.from_arrays(pixels, labels.tolist(), classes)
