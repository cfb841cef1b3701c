"""Alpha compositing on in-memory image buffers.

All arithmetic happens on the stored (gamma-encoded) values as-is, in
float64.  Out-of-range inputs are rejected rather than clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

__all__ = [
    "ImageBuffer",
    "composite",
    "extract_hand",
    "extract_naive",
    "recompose_onto",
]


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """An H×W×C array of intensities in [0, 1] (C is 1 for alpha, 3 for RGB)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractViolation(f"image buffers are HxWx1 or HxWx3, got shape {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractViolation("image buffer values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def extent(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.data, other.data)

    __hash__ = None


def _as_buffer(x) -> ImageBuffer:
    return x if isinstance(x, ImageBuffer) else ImageBuffer(x)


def _check(alpha: ImageBuffer, *colors: ImageBuffer) -> None:
    if alpha.channels != 1:
        raise ContractViolation(f"alpha must have 1 channel, got {alpha.channels}")
    for c in colors:
        if c.channels != 3:
            raise ContractViolation(f"color buffers must have 3 channels, got {c.channels}")
        if c.extent != alpha.extent:
            raise ContractViolation(f"extent mismatch: alpha {alpha.extent} vs color {c.extent}")


def composite(F, B, alpha) -> ImageBuffer:
    """I = alpha*F + (1 - alpha)*B, per pixel and channel."""
    F, B, alpha = _as_buffer(F), _as_buffer(B), _as_buffer(alpha)
    _check(alpha, F, B)
    a = alpha.data
    return ImageBuffer(a * F.data + (1.0 - a) * B.data)


def extract_hand(alpha, F) -> ImageBuffer:
    """The isolated object image alpha*F, free of background contribution."""
    alpha, F = _as_buffer(alpha), _as_buffer(F)
    _check(alpha, F)
    return ImageBuffer(alpha.data * F.data)


def extract_naive(alpha, I) -> ImageBuffer:
    """alpha*I: what matting pipelines that skip foreground estimation produce.

    Where 0 < alpha < 1 this differs from :func:`extract_hand` by
    alpha*(1 - alpha)*(B - F), i.e. it leaks background color.
    """
    alpha, I = _as_buffer(alpha), _as_buffer(I)
    _check(alpha, I)
    return ImageBuffer(alpha.data * I.data)


def recompose_onto(alpha, F, new_background) -> ImageBuffer:
    return composite(F, new_background, alpha)
