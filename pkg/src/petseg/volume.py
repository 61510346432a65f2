"""Volume containers plus intensity normalization and mask handling.

All voxel data is held as C-ordered ``float64`` arrays indexed ``[x, y, z]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from petseg.errors import (
    BadChannelCount,
    ConstantVolume,
    NonBinaryMask,
    NonFiniteVoxel,
    NonIntegerLabels,
    ShapeMismatch,
    SpacingMismatch,
)

HU_MIN = -1024.0
HU_MAX = 1024.0
SPACING_RTOL = 1e-5


def _frozen_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.flags.writeable:
        arr = arr.view()
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A 3-D scalar grid with voxel spacing and origin, both in millimetres.

    ``orientation`` carries the raw NIfTI qform/sform fields through I/O
    untouched; geometric operations drop it because it no longer applies.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    binary: bool = False
    orientation: dict[str, Any] | None = field(default=None, repr=False)

    def __post_init__(self):
        arr = _frozen_array(self.data)
        if arr.ndim != 3:
            raise ShapeMismatch(f"expected a 3-D array, got shape {arr.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or len(origin) != 3:
            raise ValueError("spacing and origin need exactly three components")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive and finite, got {spacing}")
        if self.binary and not is_binary_array(arr):
            raise NonBinaryMask("volume flagged binary holds values other than 0 and 1")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data, binary: bool = False) -> "Volume3D":
        """Same grid, new voxel values."""
        return replace(self, data=data, binary=binary)

    def same_grid(self, other: "Volume3D") -> bool:
        return self.shape == other.shape and spacing_close(self.spacing, other.spacing)

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.spacing == other.spacing
            and self.origin == other.origin
            and np.array_equal(self.data, other.data)
        )


def is_binary_array(arr) -> bool:
    arr = np.asarray(arr)
    return bool(np.all((arr == 0) | (arr == 1)))


def spacing_close(a, b, rtol: float = SPACING_RTOL) -> bool:
    return bool(np.allclose(a, b, rtol=rtol, atol=0.0))


def _require_finite(vol: Volume3D):
    if not np.all(np.isfinite(vol.data)):
        raise NonFiniteVoxel("volume contains NaN or infinite voxels")


@dataclass(frozen=True)
class MultiChannelVolume:
    """Co-registered channels sharing one grid (CT, PET and optionally a prior mask)."""

    channels: tuple[Volume3D, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def shape(self):
        return self.channels[0].shape

    @property
    def spacing(self):
        return self.channels[0].spacing

    def __len__(self):
        return len(self.channels)

    def __getitem__(self, name: str) -> Volume3D:
        try:
            return self.channels[self.names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def unstack(self) -> list[Volume3D]:
        return list(self.channels)

    def as_array(self) -> np.ndarray:
        """Channel-first ``(C, nx, ny, nz)`` array."""
        return np.stack([c.data for c in self.channels])


@dataclass(frozen=True)
class MaskPair:
    """Binary GTVp and GTVn masks of one HECKTOR case."""

    gtvp: Volume3D
    gtvn: Volume3D

    def __post_init__(self):
        for m in (self.gtvp, self.gtvn):
            if not (m.binary or is_binary_array(m.data)):
                raise NonBinaryMask("MaskPair members must be binary")
        if not self.gtvp.same_grid(self.gtvn):
            raise ShapeMismatch("GTVp and GTVn masks live on different grids")

    def as_dict(self) -> dict[str, Volume3D]:
        return {"GTVp": self.gtvp, "GTVn": self.gtvn}


def clip_rescale_ct(ct: Volume3D) -> Volume3D:
    """Clamp Hounsfield units to [-1024, 1024] and divide by 1024."""
    _require_finite(ct)
    return ct.with_data(np.clip(ct.data, HU_MIN, HU_MAX) / HU_MAX)


def rescale_pet(pet: Volume3D, window: tuple[float, float] | None = None) -> Volume3D:
    """Affinely map PET intensities onto [-1, 1].

    By default the per-volume ``[min, max]`` is used.  Passing ``window``
    fixes the source range instead (values outside it are clamped), which
    gives a dataset-global normalization.
    """
    _require_finite(pet)
    if window is None:
        lo, hi = float(pet.data.min()), float(pet.data.max())
        values = pet.data
    else:
        lo, hi = (float(w) for w in window)
        values = np.clip(pet.data, lo, hi)
    if not hi > lo:
        raise ConstantVolume(f"PET range is degenerate (min={lo}, max={hi})")
    out = 2.0 * (values - lo) / (hi - lo) - 1.0
    # guard the end points against rounding just outside [-1, 1]
    return pet.with_data(np.clip(out, -1.0, 1.0))


def split_mask(label_map: Volume3D, label_gtvp: int = 1, label_gtvn: int = 2) -> MaskPair:
    if label_gtvp == label_gtvn:
        raise ValueError("GTVp and GTVn label codes must differ")
    data = label_map.data
    if not np.all(np.isfinite(data)) or np.any(data < 0) or np.any(data != np.round(data)):
        raise NonIntegerLabels("label map must hold non-negative integers")
    gtvp = label_map.with_data((data == label_gtvp).astype(np.float64), binary=True)
    gtvn = label_map.with_data((data == label_gtvn).astype(np.float64), binary=True)
    return MaskPair(gtvp=gtvp, gtvn=gtvn)


def merge_masks(masks: MaskPair, label_gtvp: int = 1, label_gtvn: int = 2) -> Volume3D:
    """Inverse of :func:`split_mask` for disjoint masks."""
    data = masks.gtvp.data * label_gtvp + masks.gtvn.data * label_gtvn
    return masks.gtvp.with_data(data)


def stack_channels(vols: Sequence[Volume3D], names: Sequence[str]) -> MultiChannelVolume:
    vols = list(vols)
    names = list(names)
    if not 2 <= len(vols) <= 3:
        raise BadChannelCount(f"need 2 or 3 channels, got {len(vols)}")
    if len(names) != len(vols) or len(set(names)) != len(names):
        raise ValueError("channel names must be unique and match the channel count")
    ref = vols[0]
    for v in vols[1:]:
        if v.shape != ref.shape:
            raise ShapeMismatch(f"channel shapes differ: {ref.shape} vs {v.shape}")
        if not spacing_close(v.spacing, ref.spacing):
            raise SpacingMismatch(f"channel spacings differ: {ref.spacing} vs {v.spacing}")
    return MultiChannelVolume(channels=tuple(vols), names=tuple(names))


def binarize(vol: Volume3D, threshold: float = 0.5) -> Volume3D:
    return vol.with_data((vol.data >= threshold).astype(np.float64), binary=True)


def mask_array(mask) -> np.ndarray:
    """Boolean view of a binary mask given as a Volume3D or array."""
    arr = mask.data if isinstance(mask, Volume3D) else np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not is_binary_array(arr):
        raise NonBinaryMask("mask holds values other than 0 and 1")
    return arr != 0
