from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional, Sequence, Union

import numpy as np

PIXEL_MAX = 255
PARITY_SCALE = 10000


class ShapeError(ValueError):
    pass


class StageError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PixelImage:
    """An 8-bit raster in channel-major (C, H, W) layout."""

    channels: int
    height: int
    width: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if min(self.channels, self.height, self.width) < 1:
            raise ShapeError("PixelImage dimensions must be positive.")
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"PixelImage data must be integer typed, got {arr.dtype}.")
        if arr.size != self.channels * self.height * self.width:
            raise ShapeError(
                f"PixelImage data has {arr.size} values, expected "
                f"{self.channels}x{self.height}x{self.width}."
            )
        if arr.size and (arr.min() < 0 or arr.max() > PIXEL_MAX):
            raise ValueError("PixelImage values must lie in [0, 255].")
        arr = np.array(arr, dtype=np.uint8).reshape(self.channels, self.height, self.width)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "PixelImage":
        arr = np.asarray(array)
        if arr.ndim != 3:
            raise ShapeError(f"Expected a (C, H, W) array, got shape {arr.shape}.")
        channels, height, width = arr.shape
        return cls(channels=channels, height=height, width=width, data=arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def n(self) -> int:
        return self.channels * self.height * self.width

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PixelImage):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    __hash__ = None  # type: ignore[assignment]


class Stage(str, Enum):
    RAW = "raw"
    NORMALIZED = "normalized"
    STANDARDIZED = "standardized"


ImageSource = Union[PixelImage, Sequence[PixelImage], np.ndarray]


def stack_pixels(images: ImageSource) -> np.ndarray:
    if isinstance(images, PixelImage):
        return images.data[np.newaxis]
    if isinstance(images, np.ndarray):
        if images.dtype != np.uint8 or images.ndim not in (3, 4):
            raise ShapeError("Pixel arrays must be uint8 with shape (C, H, W) or (N, C, H, W).")
        return images if images.ndim == 4 else images[np.newaxis]
    if not images:
        raise ShapeError("Cannot stack an empty image sequence.")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ShapeError(f"Images differ in shape: {sorted(shapes)}.")
    return np.stack([img.data for img in images])


def _channel_vector(values: Sequence[float], channels: int, what: str) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64).reshape(-1)
    if vec.size not in (1, channels):
        raise ShapeError(f"{what} needs 1 or {channels} values, got {vec.size}.")
    return vec.reshape(-1, 1, 1)


@dataclass(frozen=True, eq=False)
class SampleTensor:
    """Double-precision samples, (C, H, W) or (N, C, H, W), tagged with their pipeline stage."""

    data: np.ndarray
    stage: Stage
    mean: Optional[tuple[float, ...]] = None
    std: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim not in (3, 4):
            raise ShapeError(f"SampleTensor must be rank 3 or 4, got shape {arr.shape}.")
        standardized = self.stage is Stage.STANDARDIZED
        if standardized != (self.mean is not None and self.std is not None):
            raise StageError("mean and std are set exactly when the tensor is standardized.")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_pixels(cls, images: ImageSource) -> "SampleTensor":
        return cls(stack_pixels(images).astype(np.float64), Stage.RAW)

    @property
    def batched(self) -> bool:
        return self.data.ndim == 4

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        c, h, w = self.data.shape[-3:]
        return (c, h, w)

    @property
    def n(self) -> int:
        c, h, w = self.sample_shape
        return c * h * w

    def __len__(self) -> int:
        return self.data.shape[0] if self.batched else 1

    def as_batch(self) -> "SampleTensor":
        if self.batched:
            return self
        return self.with_data(self.data[np.newaxis])

    def with_data(self, data: np.ndarray) -> "SampleTensor":
        return SampleTensor(data, self.stage, self.mean, self.std)

    def select(self, indices: Union[slice, Sequence[int], np.ndarray]) -> "SampleTensor":
        return self.with_data(self.as_batch().data[indices])

    def chunks(self, size: int) -> Iterator["SampleTensor"]:
        batch = self.as_batch()
        for start in range(0, len(batch), size):
            yield batch.select(slice(start, start + size))

    def require(self, *stages: Stage) -> None:
        if self.stage not in stages:
            wanted = ", ".join(s.value for s in stages)
            raise StageError(f"Expected a {wanted} tensor, got {self.stage.value}.")

    def normalize(self) -> "SampleTensor":
        self.require(Stage.RAW)
        return SampleTensor(self.data / PIXEL_MAX, Stage.NORMALIZED)

    def standardize(self, mean: Sequence[float], std: Sequence[float]) -> "SampleTensor":
        self.require(Stage.NORMALIZED)
        channels = self.sample_shape[0]
        mean_vec = _channel_vector(mean, channels, "mean")
        std_vec = _channel_vector(std, channels, "std")
        if np.any(std_vec <= 0):
            raise ValueError("std values must be positive.")
        return SampleTensor(
            (self.data - mean_vec) / std_vec,
            Stage.STANDARDIZED,
            mean=tuple(float(v) for v in mean_vec.ravel()),
            std=tuple(float(v) for v in std_vec.ravel()),
        )


@dataclass(frozen=True)
class Preprocess:
    """The input pipeline a deployed model applies: normalize, then optionally standardize."""

    mean: Optional[tuple[float, ...]] = None
    std: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if (self.mean is None) != (self.std is None):
            raise ValueError("mean and std must be given together.")
        if self.std is not None and any(s <= 0 for s in self.std):
            raise ValueError("std values must be positive.")

    @property
    def standardizes(self) -> bool:
        return self.mean is not None

    def apply(self, images: ImageSource) -> SampleTensor:
        return self.from_normalized(SampleTensor.from_pixels(images).normalize().data)

    def from_normalized(self, data: np.ndarray) -> SampleTensor:
        tensor = SampleTensor(data, Stage.NORMALIZED)
        if self.mean is None or self.std is None:
            return tensor
        return tensor.standardize(self.mean, self.std)

    def describe(self) -> dict:
        if not self.standardizes:
            return {"stage": Stage.NORMALIZED.value}
        return {"stage": Stage.STANDARDIZED.value, "mean": list(self.mean), "std": list(self.std)}
