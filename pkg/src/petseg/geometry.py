"""Resampling, deterministic crop/pad with exact inversion, and augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from petseg.errors import BadConfig, NonFiniteVoxel, OffsetMismatch, ShapeMismatch
from petseg.volume import MaskPair, MultiChannelVolume, Volume3D, is_binary_array

HECKTOR_CROP = (192, 192, 192)
UNETR_CROP = (192, 192, 224)

# channels that hold masks rather than intensities
MASK_CHANNELS = frozenset({"PRIOR"})


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def resampled_shape(shape, spacing, target_spacing) -> tuple[int, int, int]:
    return tuple(
        max(1, _round_half_away(n * s / t)) for n, s, t in zip(shape, spacing, target_spacing)
    )


def _linear_axis(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n = arr.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    w = coords - lo
    shape = [1] * arr.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    # exact at integer coordinates, where w == 0
    return a + w * (b - a)


def _nearest_axis(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n = arr.shape[axis]
    idx = np.clip(np.floor(coords + 0.5), 0, n - 1).astype(np.intp)
    return np.take(arr, idx, axis=axis)


def resample(
    vol: Volume3D,
    target_spacing: Sequence[float],
    mode: str = "trilinear",
    shape: Sequence[int] | None = None,
    align: str = "origin",
) -> Volume3D:
    """Resample onto a grid of ``target_spacing``.

    With ``align="origin"`` both grids share the centre of voxel 0: output
    voxel ``i`` sits at continuous source index ``i * target / source``.
    With ``align="extent"`` the outer voxel faces line up instead (source
    index ``(i + 0.5) * target / source - 0.5``), so nearest upsampling by
    an integer factor replicates every voxel the same number of times.
    Coordinates past either end are clamped to the edge.  The output shape
    defaults to ``round(n * source / target)`` (at least 1); pass ``shape``
    to force it, e.g. when mapping back onto a known original grid.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if align not in ("origin", "extent"):
        raise ValueError(f"align must be 'origin' or 'extent', got {align!r}")
    target_spacing = tuple(float(t) for t in target_spacing)
    if not all(np.isfinite(t) and t > 0 for t in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if not np.all(np.isfinite(vol.data)):
        raise NonFiniteVoxel("cannot resample a volume with non-finite voxels")
    out_shape = (
        resampled_shape(vol.shape, vol.spacing, target_spacing)
        if shape is None
        else tuple(int(n) for n in shape)
    )
    interp = _linear_axis if mode == "trilinear" else _nearest_axis
    arr = vol.data
    for axis in range(3):
        ratio = target_spacing[axis] / vol.spacing[axis]
        if out_shape[axis] == arr.shape[axis] and ratio == 1.0:
            continue
        coords = np.arange(out_shape[axis], dtype=np.float64)
        coords = coords * ratio if align == "origin" else (coords + 0.5) * ratio - 0.5
        arr = interp(arr, axis, coords)
    origin = vol.origin
    if align == "extent":
        origin = tuple(o + 0.5 * (t - s) for o, t, s in zip(vol.origin, target_spacing, vol.spacing))
    binary = vol.binary and mode == "nearest"
    return Volume3D(np.ascontiguousarray(arr), spacing=target_spacing, origin=origin, binary=binary)


def rescale_to_shape(vol: Volume3D, shape: Sequence[int], mode: str = "trilinear") -> Volume3D:
    """Resample so the same physical extent spans ``shape`` voxels (faces aligned)."""
    shape = tuple(int(n) for n in shape)
    spacing = tuple(s * n / t for s, n, t in zip(vol.spacing, vol.shape, shape))
    return resample(vol, spacing, mode, shape=shape, align="extent")


@dataclass(frozen=True)
class CropSpec:
    """Crop window geometry.

    ``recorded_offsets`` are the source indices of the window's first voxel;
    negative values mean the axis was padded symmetrically instead.
    """

    target_shape: tuple[int, int, int] = HECKTOR_CROP
    policy_xy: str = "center"
    policy_z: str = "top"
    z_anchor: str = "high"
    recorded_offsets: tuple[int, int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "target_shape", tuple(int(t) for t in self.target_shape))
        if len(self.target_shape) != 3 or min(self.target_shape) < 1:
            raise BadConfig(f"crop target {self.target_shape} must be three positive sizes")
        if self.policy_xy != "center":
            raise BadConfig(f"policy_xy must be 'center', got {self.policy_xy!r}")
        if self.policy_z not in ("top", "center"):
            raise BadConfig(f"policy_z must be 'top' or 'center', got {self.policy_z!r}")
        if self.z_anchor not in ("high", "low"):
            raise BadConfig(f"z_anchor must be 'high' or 'low', got {self.z_anchor!r}")

    def offsets_for(self, shape) -> tuple[int, int, int]:
        offsets = []
        for axis, (n, t) in enumerate(zip(shape, self.target_shape)):
            if n < t:
                offsets.append(-((t - n) // 2))
            elif axis == 2 and self.policy_z == "top":
                offsets.append(n - t if self.z_anchor == "high" else 0)
            else:
                offsets.append((n - t) // 2)
        return tuple(offsets)


def _window(n: int, t: int, off: int):
    """Overlap of source range [0, n) with window [off, off + t)."""
    src_lo, src_hi = max(off, 0), min(off + t, n)
    return slice(src_lo, src_hi), slice(src_lo - off, src_hi - off)


def crop_at(vol: Volume3D, target_shape, offsets, pad_value: float = 0.0) -> Volume3D:
    """Window of ``target_shape`` starting at ``offsets``; out-of-range voxels get ``pad_value``."""
    target_shape = tuple(int(t) for t in target_shape)
    out = np.full(target_shape, float(pad_value))
    src, dst = zip(*(_window(n, t, o) for n, t, o in zip(vol.shape, target_shape, offsets)))
    out[dst] = vol.data[src]
    origin = tuple(o + off * s for o, off, s in zip(vol.origin, offsets, vol.spacing))
    binary = vol.binary and pad_value in (0.0, 1.0)
    return Volume3D(out, spacing=vol.spacing, origin=origin, binary=binary)


def crop(vol: Volume3D, spec: CropSpec, pad_value: float = 0.0) -> tuple[Volume3D, CropSpec]:
    """Crop or pad to ``spec.target_shape``; the returned spec records the offsets used.

    x and y are centred (start ``floor((n - t) / 2)``).  z is centred or,
    with ``policy_z="top"``, anchored at the high (default) or low end.  An
    axis shorter than the target is padded symmetrically instead and gets a
    negative offset.
    """
    offsets = spec.offsets_for(vol.shape)
    cropped = crop_at(vol, spec.target_shape, offsets, pad_value)
    return cropped, replace(spec, recorded_offsets=offsets)


def uncrop(pred: Volume3D, spec: CropSpec, original_shape, fill_value: float = 0.0) -> Volume3D:
    """Place a cropped volume back at its recorded offsets inside ``original_shape``."""
    if spec.recorded_offsets is None:
        raise OffsetMismatch("crop spec carries no recorded offsets")
    if pred.shape != spec.target_shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != crop target {spec.target_shape}")
    original_shape = tuple(int(n) for n in original_shape)
    for n, t, off in zip(original_shape, spec.target_shape, spec.recorded_offsets):
        inside = 0 <= off and off + t <= n
        padded = n < t and off <= 0 and off + t >= n
        if not (inside or padded):
            raise OffsetMismatch(f"offset {off} with window {t} does not fit an axis of {n}")
    out = np.full(original_shape, float(fill_value))
    src, dst = zip(
        *(_window(n, t, o) for n, t, o in zip(original_shape, spec.target_shape, spec.recorded_offsets))
    )
    out[src] = pred.data[dst]
    origin = tuple(
        o - off * s for o, off, s in zip(pred.origin, spec.recorded_offsets, pred.spacing)
    )
    binary = pred.binary and fill_value in (0.0, 1.0)
    return Volume3D(out, spacing=pred.spacing, origin=origin, binary=binary)


# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_axes: tuple[bool, bool, bool] = (True, True, True)
    flip_prob: float = 0.5
    rotation_max_deg: tuple[float, float, float] = (15.0, 15.0, 15.0)
    rotation_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    scale_prob: float = 0.5
    translation_max_mm: tuple[float, float, float] = (10.0, 10.0, 10.0)
    translation_prob: float = 0.5
    gaussian_noise_std: float = 0.02
    noise_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.8, 1.25)
    gamma_prob: float = 0.5
    gamma_channels: tuple[str, ...] = ("PET",)
    seed: int = 0

    def validate(self):
        probs = (self.flip_prob, self.rotation_prob, self.scale_prob,
                 self.translation_prob, self.noise_prob, self.gamma_prob)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise BadConfig("augmentation probabilities must lie in [0, 1]")
        for name in ("flip_axes", "rotation_max_deg", "translation_max_mm"):
            if len(getattr(self, name)) != 3:
                raise BadConfig(f"{name} needs three per-axis values")
        if any(r < 0 for r in self.rotation_max_deg + self.translation_max_mm):
            raise BadConfig("rotation and translation bounds must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise BadConfig(f"scale_range {self.scale_range} needs 0 < lo <= hi")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise BadConfig(f"gamma_range {self.gamma_range} needs 0 < lo <= hi")
        if self.gaussian_noise_std < 0:
            raise BadConfig("gaussian_noise_std must be non-negative")


@dataclass(frozen=True)
class Transform:
    """One concrete draw of the augmentation parameters."""

    flips: tuple[bool, bool, bool] = (False, False, False)
    rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    translation_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_std: float = 0.0
    gamma: float = 1.0
    noise_seed: int = 0

    @property
    def is_spatial_identity(self) -> bool:
        return (
            not any(self.rotation_deg)
            and self.scale == 1.0
            and not any(self.translation_mm)
        )


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *tags]))


def sample_transform(cfg: AugmentConfig, draw_index: int) -> Transform:
    """Draw transform parameters; a pure function of ``(cfg.seed, draw_index)``."""
    cfg.validate()
    rng = _rng(cfg.seed, int(draw_index))
    # a fixed number of draws per category keeps streams aligned across configs
    u = rng.random(6)
    flips = tuple(bool(en and f < cfg.flip_prob) for en, f in zip(cfg.flip_axes, rng.random(3)))
    rot = rng.uniform(-1.0, 1.0, 3) * np.asarray(cfg.rotation_max_deg)
    scale = rng.uniform(*cfg.scale_range) if cfg.scale_range[0] < cfg.scale_range[1] else cfg.scale_range[0]
    trans = rng.uniform(-1.0, 1.0, 3) * np.asarray(cfg.translation_max_mm)
    glo, ghi = cfg.gamma_range
    gamma = math.exp(rng.uniform(math.log(glo), math.log(ghi))) if glo < ghi else glo
    noise_seed = int(rng.integers(0, 2**63))
    return Transform(
        flips=flips,
        rotation_deg=tuple(float(r) for r in rot) if u[0] < cfg.rotation_prob else (0.0, 0.0, 0.0),
        scale=float(scale) if u[1] < cfg.scale_prob else 1.0,
        translation_mm=tuple(float(t) for t in trans) if u[2] < cfg.translation_prob else (0.0, 0.0, 0.0),
        noise_std=cfg.gaussian_noise_std if u[3] < cfg.noise_prob else 0.0,
        gamma=float(gamma) if u[4] < cfg.gamma_prob else 1.0,
        noise_seed=noise_seed,
    )


def _rotation_matrix(deg) -> np.ndarray:
    ax, ay, az = np.deg2rad(deg)

    def rot(c, s, i, j):
        m = np.eye(3)
        m[i, i], m[i, j], m[j, i], m[j, j] = c, -s, s, c
        return m

    rx = rot(math.cos(ax), math.sin(ax), 1, 2)
    ry = rot(math.cos(ay), math.sin(ay), 2, 0)
    rz = rot(math.cos(az), math.sin(az), 0, 1)
    m = rz @ ry @ rx
    # exact permutation matrices for multiples of 90 degrees
    return np.where(np.abs(m - np.round(m)) < 1e-12, np.round(m), m)


def _spatial(arr: np.ndarray, t: Transform, spacing, order: int) -> np.ndarray:
    for axis, flip in enumerate(t.flips):
        if flip:
            arr = np.flip(arr, axis)
    if t.is_spatial_identity:
        return np.ascontiguousarray(arr)
    # output index -> input index, rotating/scaling about the volume centre
    # in physical space so anisotropic spacing is respected
    sp = np.asarray(spacing, dtype=np.float64)
    centre = (np.asarray(arr.shape) - 1) / 2.0
    inv = _rotation_matrix(t.rotation_deg).T / t.scale
    matrix = np.diag(1.0 / sp) @ inv @ np.diag(sp)
    shift = np.asarray(t.translation_mm) / sp
    offset = centre - matrix @ (centre + shift)
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="nearest")


def _gamma(arr: np.ndarray, gamma: float) -> np.ndarray:
    unit = (np.clip(arr, -1.0, 1.0) + 1.0) / 2.0
    return 2.0 * unit**gamma - 1.0


def apply_transform(
    mcv: MultiChannelVolume,
    masks,
    t: Transform,
    gamma_channels: Sequence[str] = ("PET",),
):
    """Apply one transform to every channel and mask of a case.

    Image channels go through trilinear sampling, the gamma curve (listed
    channels only) and additive noise.  Masks, and mask-like channels such as
    a two-step prior, use nearest sampling and keep their values.
    """
    spacing = mcv.spacing
    noise_rng = np.random.default_rng(t.noise_seed)
    channels = []
    for name, ch in zip(mcv.names, mcv.channels):
        if name in MASK_CHANNELS:
            channels.append(ch.with_data(_spatial(ch.data, t, spacing, order=0), binary=ch.binary))
            continue
        arr = _spatial(ch.data, t, spacing, order=1)
        if t.gamma != 1.0 and name in gamma_channels:
            arr = _gamma(arr, t.gamma)
        if t.noise_std > 0:
            arr = np.clip(arr + noise_rng.normal(0.0, t.noise_std, arr.shape), -1.0, 1.0)
        channels.append(ch.with_data(arr))
    out = MultiChannelVolume(channels=tuple(channels), names=mcv.names)

    def move(m: Volume3D) -> Volume3D:
        if m.shape != mcv.shape:
            raise ShapeMismatch(f"mask shape {m.shape} != image shape {mcv.shape}")
        return m.with_data(_spatial(m.data, t, spacing, order=0), binary=m.binary or is_binary_array(m.data))

    if isinstance(masks, MaskPair):
        moved = MaskPair(gtvp=move(masks.gtvp), gtvn=move(masks.gtvn))
    elif isinstance(masks, Volume3D):
        moved = move(masks)
    elif masks is None:
        moved = None
    else:
        moved = [move(m) for m in masks]
    return out, moved


def augment(mcv: MultiChannelVolume, masks, cfg: AugmentConfig, draw_index: int):
    """Sample a transform for ``(cfg.seed, draw_index)`` and apply it."""
    t = sample_transform(cfg, draw_index)
    return apply_transform(mcv, masks, t, gamma_channels=cfg.gamma_channels)
