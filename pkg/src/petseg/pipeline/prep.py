"""Dataset preparation, two-step channel assembly, evaluation and output checks.

A prepared directory looks like::

    out/
      run.json          run record: prepared / excluded / failed cases, config
      prepared.tsv      manifest of the prepared cases
      case000/
        ct.nii.gz  pet.nii.gz  mask.nii.gz  [gtvp.nii.gz gtvn.nii.gz]  prep.json

``prep.json`` stores the original grid, the resampling and the crop
offsets, which is all :func:`to_original_space` needs to put a prediction
back where it came from.
"""

from __future__ import annotations

import json
import logging
import math
import random
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from petseg.errors import EmptyManifest, GridMismatch, MissingPrior, PetSegError, SpacingDisagreement
from petseg.geometry import CropSpec, crop, crop_at, rescale_to_shape, resample, uncrop
from petseg.metrics import EvalPair
from petseg.nifti_io import nifti_exists, read_nifti, write_nifti
from petseg.pipeline.config import RunConfig, dump_config
from petseg.pipeline.manifest import CaseRecord, Manifest, read_manifest, write_manifest
from petseg.volume import (
    HU_MIN,
    Volume3D,
    binarize,
    clip_rescale_ct,
    is_binary_array,
    merge_masks,
    rescale_pet,
    spacing_close,
    split_mask,
    stack_channels,
)

log = logging.getLogger(__name__)

META_VERSION = 1
META_NAME = "prep.json"


@dataclass
class PrepMeta:
    case_id: str
    kind: str
    original_shape: tuple[int, int, int]
    original_spacing: tuple[float, float, float]
    original_origin: tuple[float, float, float]
    resampled: bool
    resampled_spacing: tuple[float, float, float]
    resampled_shape: tuple[int, int, int]
    crop_target: tuple[int, int, int] | None
    crop_offsets: tuple[int, int, int] | None
    z_anchor: str
    policy_z: str = "top"
    version: int = META_VERSION

    @property
    def prepared_shape(self) -> tuple[int, int, int]:
        return tuple(self.crop_target) if self.crop_target else tuple(self.resampled_shape)

    @property
    def pad(self) -> list[tuple[int, int]] | None:
        """Voxels of padding before/after each axis, or None without a crop."""
        if not self.crop_target:
            return None
        out = []
        for n, t, off in zip(self.resampled_shape, self.crop_target, self.crop_offsets):
            before = max(-off, 0)
            after = max(off + t - n, 0)
            out.append((before, after))
        return out

    def crop_spec(self) -> CropSpec:
        return CropSpec(target_shape=tuple(self.crop_target), policy_z=self.policy_z,
                        z_anchor=self.z_anchor, recorded_offsets=tuple(self.crop_offsets))

    def dump(self, path):
        record = asdict(self)
        record["pad"] = self.pad
        Path(path).write_text(json.dumps(record, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "PrepMeta":
        record = json.loads(Path(path).read_text())
        record.pop("pad", None)
        if record.get("version") != META_VERSION:
            raise ValueError(f"{path}: unsupported prep metadata version {record.get('version')}")
        for key in ("original_shape", "original_spacing", "original_origin", "resampled_spacing",
                    "resampled_shape", "crop_target", "crop_offsets"):
            if record.get(key) is not None:
                record[key] = tuple(record[key])
        return cls(**record)


@dataclass
class PrepResult:
    out_dir: Path
    prepared: list[str] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed


def _write_image(vol: Volume3D, path: Path, cfg: RunConfig):
    write_nifti(vol, path, cfg.prep.image_dtype)


def _write_mask(vol: Volume3D, path: Path):
    write_nifti(vol, path, "uint8")


def _fname(stem: str, cfg: RunConfig) -> str:
    return stem + cfg.prep.suffix


def to_prepared_space(vol: Volume3D, meta: PrepMeta, mode: str, pad_value: float = 0.0) -> Volume3D:
    """Apply a case's recorded resampling and crop to a volume on its original grid."""
    if vol.shape != tuple(meta.original_shape):
        raise GridMismatch(f"volume shape {vol.shape} != original shape {meta.original_shape}")
    if meta.resampled:
        vol = resample(vol, meta.resampled_spacing, mode)
    if meta.crop_target:
        vol = crop_at(vol, meta.crop_target, meta.crop_offsets, pad_value)
    return vol


def to_original_space(pred: Volume3D, meta: PrepMeta, fill_value: float = 0.0) -> Volume3D:
    """Reinsert a prepared-grid prediction into its original image grid (nearest)."""
    if pred.shape != meta.prepared_shape:
        raise GridMismatch(f"prediction shape {pred.shape} != prepared shape {meta.prepared_shape}")
    vol = Volume3D(pred.data, spacing=meta.resampled_spacing, binary=pred.binary)
    if meta.crop_target:
        vol = uncrop(vol, meta.crop_spec(), meta.resampled_shape, fill_value)
    if meta.resampled:
        vol = resample(vol, meta.original_spacing, "nearest", shape=meta.original_shape)
    return Volume3D(vol.data, spacing=meta.original_spacing, origin=meta.original_origin, binary=vol.binary)


def _binary_mask(vol: Volume3D, what: str) -> Volume3D:
    if not is_binary_array(vol.data):
        raise PetSegError(f"{what} is not binary")
    return vol.with_data(vol.data, binary=True)


def _prep_one(case: CaseRecord, kind: str, cfg: RunConfig, out_dir: Path, declared_spacing) -> tuple[str, str | None, str | None]:
    """Prepare one case; returns ``(case_id, status, message)``."""
    ct = read_nifti(case.ct_path)
    pet = read_nifti(case.pet_path)
    mask = read_nifti(case.mask_path) if case.mask_path else None
    for name, vol in (("PET", pet), ("mask", mask)):
        if vol is not None and vol.shape != ct.shape:
            raise GridMismatch(f"{name} shape {vol.shape} != CT shape {ct.shape}")

    if kind == "hecktor":
        target_spacing = tuple(cfg.prep.hecktor_spacing)
        crop_target = tuple(cfg.crop.hecktor_shape)
        resampled = True
    else:
        if declared_spacing is not None:
            for name, vol in (("CT", ct), ("PET", pet), ("mask", mask)):
                if vol is not None and not spacing_close(vol.spacing, declared_spacing):
                    raise SpacingDisagreement(
                        f"{name} spacing {vol.spacing} differs from declared common spacing {declared_spacing}"
                    )
        target_spacing = ct.spacing
        crop_target = tuple(cfg.crop.autopet_shape) if cfg.crop.autopet_shape else None
        resampled = False

    if resampled:
        ct_r = resample(ct, target_spacing, "trilinear")
        pet_r = resample(pet, target_spacing, "trilinear")
        mask_r = resample(mask, target_spacing, "nearest") if mask is not None else None
    else:
        ct_r, pet_r, mask_r = ct, pet, mask

    offsets = None
    if crop_target:
        spec = CropSpec(target_shape=crop_target, policy_z=cfg.crop.policy_z, z_anchor=cfg.crop.z_anchor)
        ct_c, spec = crop(ct_r, spec, HU_MIN)
        pet_c, _ = crop(pet_r, spec, float(pet_r.data.min()))
        mask_c = crop(mask_r, spec, 0.0)[0] if mask_r is not None else None
        offsets = spec.recorded_offsets
    else:
        ct_c, pet_c, mask_c = ct_r, pet_r, mask_r

    ct_n = clip_rescale_ct(ct_c)
    pet_n = rescale_pet(pet_c, cfg.prep.pet_window)
    stack_channels([ct_n, pet_n], ["CT", "PET"])

    case_dir = out_dir / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    _write_image(ct_n, case_dir / _fname("ct", cfg), cfg)
    _write_image(pet_n, case_dir / _fname("pet", cfg), cfg)
    if mask_c is not None:
        if kind == "hecktor":
            pair = split_mask(mask_c, cfg.prep.label_gtvp, cfg.prep.label_gtvn)
            _write_mask(pair.gtvp, case_dir / _fname("gtvp", cfg))
            _write_mask(pair.gtvn, case_dir / _fname("gtvn", cfg))
            _write_mask(merge_masks(pair, cfg.prep.label_gtvp, cfg.prep.label_gtvn), case_dir / _fname("mask", cfg))
        else:
            _write_mask(_binary_mask(mask_c, f"{case.case_id} mask"), case_dir / _fname("mask", cfg))

    meta = PrepMeta(
        case_id=case.case_id,
        kind=kind,
        original_shape=ct.shape,
        original_spacing=ct.spacing,
        original_origin=ct.origin,
        resampled=resampled,
        resampled_spacing=tuple(float(s) for s in target_spacing),
        resampled_shape=ct_r.shape,
        crop_target=crop_target,
        crop_offsets=offsets,
        z_anchor=cfg.crop.z_anchor,
        policy_z=cfg.crop.policy_z,
    )
    meta.dump(case_dir / META_NAME)
    return case.case_id, "prepared", None


def _prep_worker(args):
    case, kind, cfg, out_dir, declared = args
    try:
        return _prep_one(case, kind, cfg, out_dir, declared)
    except (PetSegError, OSError, ValueError) as exc:
        return case.case_id, "failed", f"{type(exc).__name__}: {exc}"


def _run_cases(cases, kind, cfg: RunConfig, out_dir: Path, declared):
    jobs = [(c, kind, cfg, out_dir, declared) for c in cases]
    if cfg.run.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.run.jobs) as pool:
            return list(pool.map(_prep_worker, jobs))
    return [_prep_worker(j) for j in jobs]


def _is_negative(case: CaseRecord) -> bool:
    if case.mask_path is None:
        return case.has_tumor is False
    return not np.any(read_nifti(case.mask_path).data)


def _finish(result: PrepResult, manifest: Manifest, kind: str, cfg: RunConfig, extra: dict) -> PrepResult:
    out_dir = result.out_dir
    by_id = manifest.by_id()
    prepared_cases = []
    for cid in result.prepared:
        case_dir = out_dir / cid
        prior = nifti_exists(case_dir / "prior")
        mask = nifti_exists(case_dir / "mask")
        prepared_cases.append(
            CaseRecord(
                case_id=cid,
                ct_path=case_dir / _fname("ct", cfg),
                pet_path=case_dir / _fname("pet", cfg),
                mask_path=mask,
                prior_path=prior,
                center_id=by_id[cid].center_id,
                has_tumor=by_id[cid].has_tumor,
            )
        )
    write_manifest(Manifest(dataset_kind=kind, cases=prepared_cases), out_dir / "prepared.tsv")
    record = {
        "kind": kind,
        "n_input": len(manifest.cases),
        "prepared": result.prepared,
        "excluded": result.excluded,
        "failed": result.failed,
        "z_anchor": cfg.crop.z_anchor,
        "config": dump_config(cfg),
        **extra,
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=1) + "\n")
    return result


def _collect(result: PrepResult, outcomes):
    for cid, status, msg in outcomes:
        if status == "prepared":
            result.prepared.append(cid)
        else:
            log.warning("case %s failed: %s", cid, msg)
            result.failed[cid] = msg


def prep_hecktor(manifest: Manifest, cfg: RunConfig, out_dir) -> PrepResult:
    """Resample to the common spacing, crop, normalize and split masks."""
    if manifest.dataset_kind != "hecktor":
        raise ValueError(f"prep_hecktor needs a hecktor manifest, got {manifest.dataset_kind}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = PrepResult(out_dir)
    _collect(result, _run_cases(manifest.cases, "hecktor", cfg, out_dir, None))
    return _finish(result, manifest, "hecktor", cfg, {})


def prep_autopet(manifest: Manifest, cfg: RunConfig, out_dir, tumor_only: bool = False) -> PrepResult:
    """Normalize AutoPET cases on their native grid, optionally dropping negatives.

    Cases are checked against the manifest's declared ``common_spacing``;
    an optional crop (``crop.autopet_shape``) is applied when configured.
    """
    if manifest.dataset_kind != "autopet":
        raise ValueError(f"prep_autopet needs an autopet manifest, got {manifest.dataset_kind}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = PrepResult(out_dir)
    cases = list(manifest.cases)
    if tumor_only:
        negative = {c.case_id for c in cases if _is_negative(c)}
        result.excluded = [c.case_id for c in cases if c.case_id in negative]
        cases = [c for c in cases if c.case_id not in negative]
        if not cases:
            raise EmptyManifest("no cases left after removing negatives")
    _collect(result, _run_cases(cases, "autopet", cfg, out_dir, manifest.common_spacing))
    return _finish(result, manifest, "autopet", cfg, {"tumor_only": tumor_only})


def load_prepared(case_dir) -> tuple[PrepMeta, dict[str, Volume3D]]:
    """Read a prepared case's metadata and every volume it holds, by stem."""
    case_dir = Path(case_dir)
    meta = PrepMeta.load(case_dir / META_NAME)
    vols = {}
    for stem in ("ct", "pet", "prior", "mask", "gtvp", "gtvn"):
        path = nifti_exists(case_dir / stem)
        if path is not None:
            vols[stem] = read_nifti(path)
    return meta, vols


def prior_to_prepared(prior: Volume3D, meta: PrepMeta) -> Volume3D:
    """Bring a first-stage prediction onto a case's prepared grid (nearest).

    Accepted inputs, tried in order: already on the prepared grid; on the
    original grid; or a rescaled copy of the original image extent, such
    as a low-resolution first-stage output.
    """
    if prior.shape == meta.prepared_shape:
        return Volume3D(prior.data, spacing=meta.resampled_spacing)
    if prior.shape != tuple(meta.original_shape):
        extent = np.multiply(prior.shape, prior.spacing)
        target = np.multiply(meta.original_shape, meta.original_spacing)
        if not np.all(np.abs(extent - target) <= np.asarray(prior.spacing)):
            raise GridMismatch(
                f"prior grid {prior.shape} @ {prior.spacing} matches neither the prepared, the original "
                f"nor a rescaled original grid of case {meta.case_id}"
            )
        prior = rescale_to_shape(prior, meta.original_shape, "nearest")
    prior = Volume3D(prior.data, spacing=meta.original_spacing)
    return to_prepared_space(prior, meta, "nearest", 0.0)


def assemble_two_step(prep_dir, priors: Mapping[str, Path], out_dir, cfg: RunConfig) -> PrepResult:
    """Copy a prepared set and add each case's binarized prior as a third channel."""
    prep_dir, out_dir = Path(prep_dir), Path(out_dir)
    manifest = read_manifest(prep_dir / "prepared.tsv")
    out_dir.mkdir(parents=True, exist_ok=True)
    result = PrepResult(out_dir)
    for case in manifest.cases:
        cid = case.case_id
        try:
            if cid not in priors or priors[cid] is None or not Path(priors[cid]).exists():
                raise MissingPrior(f"no prior prediction for case {cid}")
            meta, vols = load_prepared(prep_dir / cid)
            prior = binarize(prior_to_prepared(read_nifti(priors[cid]), meta), cfg.metrics.threshold)
            prior = Volume3D(prior.data, spacing=vols["ct"].spacing, origin=vols["ct"].origin, binary=True)
            stack_channels([vols["ct"], vols["pet"], prior], ["CT", "PET", "PRIOR"])
            dst = out_dir / cid
            if dst.resolve() != (prep_dir / cid).resolve():
                shutil.copytree(prep_dir / cid, dst, dirs_exist_ok=True)
            _write_mask(prior, dst / _fname("prior", cfg))
            result.prepared.append(cid)
        except (PetSegError, OSError, ValueError) as exc:
            log.warning("case %s failed: %s", cid, exc)
            result.failed[cid] = f"{type(exc).__name__}: {exc}"
    return _finish(result, manifest, manifest.dataset_kind, cfg, {"two_step": True, "source": str(prep_dir)})


# evaluation


def structures_of(kind: str, vol: Volume3D, cfg: RunConfig) -> dict[str, Volume3D]:
    if kind == "hecktor":
        return split_mask(vol, cfg.prep.label_gtvp, cfg.prep.label_gtvn).as_dict()
    return {"TUMOR": binarize(vol, cfg.metrics.threshold)}


def find_prediction(case: CaseRecord, predictions_dir) -> Path | None:
    if case.prediction_path is not None:
        return case.prediction_path
    if predictions_dir is None:
        return None
    return nifti_exists(Path(predictions_dir) / case.case_id)


def load_eval_pairs(
    manifest: Manifest,
    cfg: RunConfig,
    predictions_dir=None,
    prep_dir=None,
    tumor_only: bool = False,
) -> list[EvalPair]:
    """Pair each case's original-space truth with its reinserted prediction.

    Predictions live on the prepared grid whenever ``prep_dir`` holds the
    case's metadata, and are then mapped back before scoring.
    """
    pairs = []
    for case in manifest.cases:
        if case.mask_path is None:
            raise ValueError(f"case {case.case_id} has no ground-truth mask")
        truth = read_nifti(case.mask_path)
        if tumor_only and not np.any(truth.data):
            continue
        pred_path = find_prediction(case, predictions_dir)
        if pred_path is None:
            raise FileNotFoundError(f"no prediction for case {case.case_id}")
        pred = read_nifti(pred_path)
        meta_path = Path(prep_dir) / case.case_id / META_NAME if prep_dir else None
        if meta_path is not None and meta_path.exists():
            pred = to_original_space(pred, PrepMeta.load(meta_path))
        if pred.shape != truth.shape:
            raise GridMismatch(f"case {case.case_id}: prediction {pred.shape} vs truth {truth.shape}")
        t_parts = structures_of(manifest.dataset_kind, truth, cfg)
        p_parts = structures_of(manifest.dataset_kind, pred, cfg)
        for name in t_parts:
            pairs.append(EvalPair(case.case_id, t_parts[name], p_parts[name], name))
    return pairs


# output checks


def verify_prepared(prep_dir) -> list[str]:
    """Re-open every prepared case and list violated contracts (empty when fine)."""
    prep_dir = Path(prep_dir)
    problems = []
    case_dirs = sorted(p.parent for p in prep_dir.glob(f"*/{META_NAME}"))
    if not case_dirs:
        return [f"{prep_dir}: no prepared cases found"]
    for case_dir in case_dirs:
        cid = case_dir.name
        try:
            meta, vols = load_prepared(case_dir)
        except (PetSegError, OSError, ValueError) as exc:
            problems.append(f"{cid}: unreadable ({exc})")
            continue
        ref = vols.get("ct")
        if ref is None or "pet" not in vols:
            problems.append(f"{cid}: missing CT or PET channel")
            continue
        if ref.shape != meta.prepared_shape:
            problems.append(f"{cid}: shape {ref.shape} != recorded {meta.prepared_shape}")
        for name, vol in vols.items():
            if not vol.same_grid(ref):
                problems.append(f"{cid}: {name} grid differs from CT")
        for name in ("ct", "pet"):
            d = vols[name].data
            if d.min() < -1.0 or d.max() > 1.0:
                problems.append(f"{cid}: {name} outside [-1, 1]")
        for name in ("prior", "gtvp", "gtvn"):
            if name in vols and not is_binary_array(vols[name].data):
                problems.append(f"{cid}: {name} is not binary")
        if meta.kind == "autopet" and "mask" in vols and not is_binary_array(vols["mask"].data):
            problems.append(f"{cid}: mask is not binary")
        if "gtvp" in vols and "gtvn" in vols and np.any(vols["gtvp"].data * vols["gtvn"].data):
            problems.append(f"{cid}: GTVp and GTVn overlap")
    return problems


def split_manifest(manifest: Manifest, test_fraction: float = 0.2, seed: int = 0, stratify: bool = False):
    """Seeded train/test split; ``stratify`` splits each center separately."""
    groups: dict[str, list[CaseRecord]] = {}
    for c in manifest.cases:
        key = (c.center_id or "") if stratify else ""
        groups.setdefault(key, []).append(c)
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must lie in [0, 1], got {test_fraction}")
    keys = sorted(groups)
    # largest-remainder allocation keeps the total at round(n * fraction)
    total = int(math.floor(len(manifest.cases) * test_fraction + 0.5))
    quotas = {k: len(groups[k]) * test_fraction for k in keys}
    alloc = {k: int(math.floor(q)) for k, q in quotas.items()}
    by_remainder = sorted(keys, key=lambda k: (-(quotas[k] - alloc[k]), k))
    for k in by_remainder[: total - sum(alloc.values())]:
        alloc[k] += 1
    rnd = random.Random(seed)
    test_ids = set()
    for key in keys:
        members = sorted(groups[key], key=lambda c: c.case_id)
        rnd.shuffle(members)
        test_ids.update(c.case_id for c in members[: alloc[key]])
    train = manifest.subset(c.case_id for c in manifest.cases if c.case_id not in test_ids)
    test = manifest.subset(test_ids)
    return train, test
