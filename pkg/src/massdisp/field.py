"""Dense 2-D multi-channel fields and their file I/O.

A field is an immutable (channels, height, width) float64 grid. Confidence
maps, vote masses, offset planes and gradient signals all share this one
container; range restrictions such as "confidences lie in [0, 1]" are
enforced at the operation boundaries that need them, not here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError

MDNF_MAGIC = b"MDNF"
_HEADER = struct.Struct("<4sIII")

# Refuse to allocate fields above this element count when parsing untrusted
# headers (u32 dims can multiply far past anything this library handles).
_MAX_ELEMENTS = 1 << 31


@dataclass(frozen=True)
class ScalarField:
    """Immutable H×W×C grid of float64 values, stored channel-outermost."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ShapeError(f"field data must be (channels, height, width), got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise ShapeError(f"field dimensions must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError("field values must be finite")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def channel(self, index: int) -> np.ndarray:
        if not 0 <= index < self.channels:
            raise ShapeError(f"channel {index} out of range for {self.channels}-channel field")
        return self.data[index]

    def same_shape(self, other: "ScalarField") -> bool:
        return self.data.shape == other.data.shape


# Gradient signals (dL/d-field) are plain fields of the same shape.
GradSignal = ScalarField


def new_field(height: int, width: int, channels: int, fill: float = 0.0) -> ScalarField:
    """Create a constant-filled field of the given shape."""
    if height < 1 or width < 1 or channels < 1:
        raise ShapeError(f"invalid field shape ({height}, {width}, {channels})")
    if not np.isfinite(fill):
        raise ShapeError(f"fill value must be finite, got {fill!r}")
    return ScalarField(np.full((channels, height, width), float(fill)))


def field_from_array(arr: np.ndarray) -> ScalarField:
    """Wrap a (C, H, W) or (H, W) array as a field, copying it."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, :, :]
    return ScalarField(a.copy())


@dataclass(frozen=True)
class DisplacementField:
    """Paired horizontal/vertical offset planes, one channel per vote edge.

    Offsets are in output-grid pixel units: a value stored at pixel (row, col)
    of channel e sends that pixel's vote to (col + ox, row + oy) for the
    graph edge with index e.
    """

    ox: ScalarField
    oy: ScalarField

    def __post_init__(self):
        if self.ox.shape != self.oy.shape:
            raise ShapeError(
                f"ox and oy must have identical shapes, got {self.ox.shape} vs {self.oy.shape}"
            )

    @property
    def channels(self) -> int:
        return self.ox.channels

    @property
    def height(self) -> int:
        return self.ox.height

    @property
    def width(self) -> int:
        return self.ox.width


def displacement_from_arrays(ox: np.ndarray, oy: np.ndarray) -> DisplacementField:
    return DisplacementField(field_from_array(ox), field_from_array(oy))


def save_mdnf(field: ScalarField, path) -> None:
    """Write a field in the MDNF container (bit-exact round trip)."""
    header = _HEADER.pack(MDNF_MAGIC, field.height, field.width, field.channels)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(field.data.tobytes(order="C"))


def load_mdnf(path) -> ScalarField:
    """Read a field written by :func:`save_mdnf`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("file too short for an MDNF header")
    magic, height, width, channels = _HEADER.unpack_from(raw)
    if magic != MDNF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MDNF_MAGIC!r}")
    if min(height, width, channels) < 1:
        raise FormatError(f"invalid dimensions ({height}, {width}, {channels})")
    count = height * width * channels
    if count > _MAX_ELEMENTS:
        raise FormatError(f"declared size {count} elements overflows the supported range")
    payload = raw[_HEADER.size :]
    if len(payload) != count * 8:
        raise FormatError(
            f"payload holds {len(payload)} bytes, header declares {count} float64 values"
        )
    data = np.frombuffer(payload, dtype="<f8").reshape(channels, height, width)
    return ScalarField(data.copy())


def export_pgm(field: ScalarField, channel: int, path) -> None:
    """Export one channel as an 8-bit binary PGM image.

    Values are mapped linearly from the channel's [min, max] onto [0, 255];
    a constant channel maps to all-zero.
    """
    plane = field.channel(channel)
    lo = float(plane.min())
    hi = float(plane.max())
    if hi > lo:
        scaled = np.round((plane - lo) * (255.0 / (hi - lo)))
    else:
        scaled = np.zeros_like(plane)
    img = scaled.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{field.width} {field.height}\n255\n".encode("ascii"))
        fh.write(img.tobytes(order="C"))
