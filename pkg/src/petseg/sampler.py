"""Label-biased patch sampling for patch-based training."""

from __future__ import annotations

import bisect
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from petseg.errors import BadConfig, PadFirst, ShapeMismatch
from petseg.nifti_io import write_nifti
from petseg.volume import MultiChannelVolume, Volume3D, mask_array


@dataclass(frozen=True)
class SamplerConfig:
    patch_shape: tuple[int, int, int] = (96, 96, 96)
    samples_per_volume: int = 80
    fg_probability: float = 0.5
    # (epoch, probability) breakpoints, piecewise constant from each epoch on
    fg_schedule: tuple[tuple[int, float], ...] | None = None
    seed: int = 0

    def validate(self):
        if len(self.patch_shape) != 3 or min(self.patch_shape) < 1:
            raise BadConfig(f"patch_shape {self.patch_shape} must be three positive sizes")
        if self.samples_per_volume < 1:
            raise BadConfig("samples_per_volume must be at least 1")
        if not 0.0 <= self.fg_probability <= 1.0:
            raise BadConfig("fg_probability must lie in [0, 1]")
        if self.fg_schedule:
            epochs = [e for e, _ in self.fg_schedule]
            if any(b <= a for a, b in zip(epochs, epochs[1:])):
                raise BadConfig("fg_schedule epochs must be strictly increasing")
            if any(not 0.0 <= p <= 1.0 for _, p in self.fg_schedule):
                raise BadConfig("fg_schedule probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class Patch:
    data: MultiChannelVolume
    label: Volume3D
    source_case: str
    origin: tuple[int, int, int]
    center: tuple[int, int, int]
    from_foreground: bool


def fg_probability_at(cfg: SamplerConfig, epoch: int) -> float:
    """Foreground-centring probability in effect at ``epoch``.

    Epochs before the first breakpoint use ``cfg.fg_probability``.
    """
    if not cfg.fg_schedule:
        return float(cfg.fg_probability)
    epochs = [e for e, _ in cfg.fg_schedule]
    i = bisect.bisect_right(epochs, epoch) - 1
    if i < 0:
        return float(cfg.fg_probability)
    return float(cfg.fg_schedule[i][1])


def case_tag(case_id: str) -> int:
    return zlib.crc32(case_id.encode("utf-8"))


def _sub(vol: Volume3D, origin, size) -> Volume3D:
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    phys = tuple(o + i * s for o, i, s in zip(vol.origin, origin, vol.spacing))
    return Volume3D(vol.data[sl], spacing=vol.spacing, origin=phys, binary=vol.binary)


def sample_patches(
    mcv: MultiChannelVolume,
    mask: Volume3D,
    cfg: SamplerConfig,
    epoch: int = 0,
    case_id: str = "",
) -> list[Patch]:
    """Draw ``cfg.samples_per_volume`` patches from one case.

    Each centre comes from the mask foreground with probability
    ``fg_probability_at(cfg, epoch)`` and from the whole volume otherwise;
    with no foreground every draw is uniform.  The window is shifted inward
    to stay in bounds, which always keeps the drawn centre inside it.
    Patches are views into the source arrays.
    """
    cfg.validate()
    shape = np.asarray(mcv.shape)
    if tuple(mask.shape) != tuple(shape):
        raise ShapeMismatch(f"mask shape {mask.shape} != image shape {tuple(shape)}")
    psize = np.asarray(cfg.patch_shape)
    if np.any(shape < psize):
        raise PadFirst(f"volume {tuple(shape)} is smaller than patch {tuple(psize)}; pad with geometry.crop")

    fg = np.flatnonzero(mask_array(mask))
    p_fg = fg_probability_at(cfg, epoch)
    n_vox = int(np.prod(shape))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & (2**64 - 1), case_tag(case_id), int(epoch)]))
    coin = rng.random(cfg.samples_per_volume)
    pick_fg = rng.integers(0, max(fg.size, 1), cfg.samples_per_volume)
    pick_all = rng.integers(0, n_vox, cfg.samples_per_volume)

    patches = []
    for k in range(cfg.samples_per_volume):
        use_fg = bool(fg.size and coin[k] < p_fg)
        flat = fg[pick_fg[k]] if use_fg else pick_all[k]
        center = np.array(np.unravel_index(flat, tuple(shape)))
        origin = np.clip(center - psize // 2, 0, shape - psize)
        o = tuple(int(v) for v in origin)
        patches.append(
            Patch(
                data=MultiChannelVolume(
                    channels=tuple(_sub(c, o, psize) for c in mcv.channels), names=mcv.names
                ),
                label=_sub(mask, o, psize),
                source_case=case_id,
                origin=o,
                center=tuple(int(v) for v in center),
                from_foreground=use_fg,
            )
        )
    return patches


def export_patches(patches: Sequence[Patch], out_dir, index_name: str = "patches.tsv") -> Path:
    """Write each patch as one NIfTI per channel plus a label file.

    An index table records, per patch, the case id, origin and file names.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["patch_id\tcase_id\torigin_x\torigin_y\torigin_z\tfrom_foreground\tchannels\tlabel"]
    for i, p in enumerate(patches):
        pid = f"{p.source_case or 'case'}_p{i:04d}"
        files = []
        for name, ch in zip(p.data.names, p.data.channels):
            fname = f"{pid}_{name.lower()}.nii.gz"
            write_nifti(ch, out_dir / fname, "float32")
            files.append(fname)
        label = f"{pid}_label.nii.gz"
        write_nifti(p.label, out_dir / label, "uint8")
        lines.append("\t".join([pid, p.source_case, *map(str, p.origin), str(int(p.from_foreground)), ",".join(files), label]))
    index = out_dir / index_name
    index.write_text("\n".join(lines) + "\n")
    return index
