"""Deterministic PET/CT phantoms with ellipsoidal lesions, for tests and demos."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from petseg.nifti_io import write_nifti
from petseg.pipeline.manifest import CaseRecord, Manifest, write_manifest
from petseg.volume import Volume3D

_TAG_SYNTH = 0x5EED
_TAG_NEGATIVES = 0x0E6A


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]  # voxel index coordinates
    radii_mm: tuple[float, float, float]
    label: int
    uptake: float


def ellipsoid_mask(shape, spacing, center, radii_mm) -> np.ndarray:
    """Voxels whose centres fall inside an axis-aligned ellipsoid."""
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape)
    for g, c, s, r in zip(grids, center, spacing, radii_mm):
        acc = acc + ((g - c) * s / r) ** 2
    return acc <= 1.0


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *tags]))


def _place_lesions(rng, shape, spacing, body_c, body_r, specs) -> list[Lesion]:
    """Non-overlapping lesions inside the body ellipsoid."""
    placed: list[Lesion] = []
    for label, uptake in specs:
        for _ in range(200):
            radii = tuple(float(rng.uniform(2.5, 5.0) * s) for s in spacing)
            # sample a point inside 60% of the body ellipsoid
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            frac = 0.6 * rng.random() ** (1 / 3)
            center = tuple(float(c + frac * d * r / s) for c, d, r, s in zip(body_c, direction, body_r, spacing))
            if any(c - r / s < 1 or c + r / s > n - 2 for c, r, s, n in zip(center, radii, spacing, shape)):
                continue
            ok = True
            for other in placed:
                dist = math.dist(np.multiply(center, spacing), np.multiply(other.center, spacing))
                if dist <= max(radii) + max(other.radii_mm) + 2 * max(spacing):
                    ok = False
                    break
            if ok:
                placed.append(Lesion(center, radii, label, uptake))
                break
    return placed


def make_case(rng, kind: str, shape, spacing, negative: bool):
    shape = tuple(int(n) for n in shape)
    spacing = tuple(float(s) for s in spacing)
    body_c = tuple((n - 1) / 2 for n in shape)
    body_r = tuple(0.42 * n * s for n, s in zip(shape, spacing))
    body = ellipsoid_mask(shape, spacing, body_c, body_r)

    ct = np.full(shape, -1000.0)
    ct[body] = 40.0
    spine_c = (body_c[0], body_c[1] + 0.25 * shape[1], body_c[2])
    spine = ellipsoid_mask(shape, spacing, spine_c, (3 * spacing[0], 3 * spacing[1], 10 * body_r[2]))
    ct[spine & body] = 700.0
    ct = np.round(ct + rng.normal(0.0, 12.0, shape))

    pet = np.where(body, 1.0, 0.05) + rng.gamma(4.0, 0.05, shape)

    if kind == "hecktor":
        specs = [(1, float(rng.uniform(8, 14)))]
        specs += [(2, float(rng.uniform(5, 10))) for _ in range(int(rng.integers(0, 3)))]
    elif negative:
        specs = []
    else:
        specs = [(1, float(rng.uniform(6, 14))) for _ in range(int(rng.integers(1, 4)))]
    lesions = _place_lesions(rng, shape, spacing, body_c, body_r, specs)

    labels = np.zeros(shape)
    for les in lesions:
        m = ellipsoid_mask(shape, spacing, les.center, les.radii_mm)
        labels[m] = les.label
        pet[m] += les.uptake
        ct[m] = np.round(ct[m] + 15.0)
    if kind == "autopet":
        # physiological uptake that is not tumour
        bladder_c = (body_c[0], body_c[1], 0.2 * shape[2])
        bladder = ellipsoid_mask(shape, spacing, bladder_c, tuple(3.0 * s for s in spacing)) & (labels == 0)
        pet[bladder] += 10.0
    return ct, pet.astype(np.float32).astype(np.float64), labels, lesions


def synth_phantom(
    n_cases: int,
    seed: int,
    kind: str,
    out_dir,
    shape=(48, 48, 40),
    spacing=(2.0, 2.0, 3.0),
    negative_fraction: float = 0.5,
) -> Manifest:
    """Write ``n_cases`` phantom cases plus ``manifest.tsv`` under ``out_dir``.

    HECKTOR phantoms carry label 1 (GTVp, always present) and label 2
    (GTVn, zero to two nodes).  AutoPET phantoms are binary, and exactly
    ``round(n_cases * negative_fraction)`` of them have an empty mask.
    Output bytes depend only on the arguments.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be at least 1")
    if kind not in ("hecktor", "autopet"):
        raise ValueError(f"kind must be hecktor or autopet, got {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_neg = int(math.floor(n_cases * negative_fraction + 0.5)) if kind == "autopet" else 0
    negatives = set(_rng(seed, _TAG_NEGATIVES).permutation(n_cases)[:n_neg].tolist())

    cases = []
    for i in range(n_cases):
        case_id = f"case{i:03d}"
        rng = _rng(seed, zlib.crc32(case_id.encode()), _TAG_SYNTH)
        ct, pet, labels, lesions = make_case(rng, kind, shape, spacing, i in negatives)
        case_dir = out_dir / case_id
        case_dir.mkdir(exist_ok=True)
        vol = lambda a: Volume3D(a, spacing=spacing)  # noqa: E731
        write_nifti(vol(ct), case_dir / "ct.nii.gz", "int16")
        write_nifti(vol(pet), case_dir / "pet.nii.gz", "float32")
        write_nifti(vol(labels), case_dir / "mask.nii.gz", "uint8")
        (case_dir / "phantom.json").write_text(
            json.dumps({"shape": list(shape), "spacing": list(spacing), "lesions": [asdict(l) for l in lesions]}, indent=1)
        )
        cases.append(
            CaseRecord(
                case_id=case_id,
                ct_path=case_dir / "ct.nii.gz",
                pet_path=case_dir / "pet.nii.gz",
                mask_path=case_dir / "mask.nii.gz",
                center_id=f"C{i % 3}",
                has_tumor=bool(lesions),
            )
        )
    meta = {"common_spacing": ",".join(repr(float(s)) for s in spacing)} if kind == "autopet" else {}
    manifest = Manifest(dataset_kind=kind, cases=cases, meta=meta)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
