"""Case manifests: tab-separated tables with ``# key=value`` metadata lines.

Example::

    # schema_version=1
    # dataset_kind=autopet
    # common_spacing=2.0,2.0,3.0
    case_id	ct_path	pet_path	mask_path	prediction_path	prior_path	center_id	has_tumor
    case000	case000/ct.nii.gz	case000/pet.nii.gz	case000/mask.nii.gz				1

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

SCHEMA_VERSION = 1
COLUMNS = ("case_id", "ct_path", "pet_path", "mask_path", "prediction_path", "prior_path", "center_id", "has_tumor")
PATH_COLUMNS = ("ct_path", "pet_path", "mask_path", "prediction_path", "prior_path")


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    ct_path: Path | None = None
    pet_path: Path | None = None
    mask_path: Path | None = None
    prediction_path: Path | None = None
    prior_path: Path | None = None
    center_id: str | None = None
    has_tumor: bool | None = None


@dataclass
class Manifest:
    dataset_kind: str
    cases: list[CaseRecord]
    schema_version: int = SCHEMA_VERSION
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.dataset_kind not in ("hecktor", "autopet"):
            raise ValueError(f"dataset_kind must be hecktor or autopet, got {self.dataset_kind!r}")
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate case ids: {dup}")

    @property
    def common_spacing(self) -> tuple[float, float, float] | None:
        raw = self.meta.get("common_spacing")
        if not raw:
            return None
        return tuple(float(v) for v in raw.split(","))

    def by_id(self) -> dict[str, CaseRecord]:
        return {c.case_id: c for c in self.cases}

    def subset(self, case_ids) -> "Manifest":
        keep = set(case_ids)
        return replace(self, cases=[c for c in self.cases if c.case_id in keep], meta=dict(self.meta))


def _bool(text: str) -> bool | None:
    text = text.strip().lower()
    if not text:
        return None
    return text in ("1", "true", "yes")


def read_manifest(path) -> Manifest:
    path = Path(path)
    base = path.parent
    meta: dict[str, str] = {}
    body = []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(io.StringIO("\n".join(body)), delimiter="\t")
    if reader.fieldnames is None or "case_id" not in reader.fieldnames:
        raise ValueError(f"{path}: header row with a case_id column is required")
    unknown = set(reader.fieldnames) - set(COLUMNS)
    if unknown:
        raise ValueError(f"{path}: unknown manifest columns {sorted(unknown)}")
    cases = []
    for row in reader:
        kwargs = {"case_id": row["case_id"].strip()}
        for col in PATH_COLUMNS:
            val = (row.get(col) or "").strip()
            kwargs[col] = (base / val) if val else None
        kwargs["center_id"] = (row.get("center_id") or "").strip() or None
        kwargs["has_tumor"] = _bool(row.get("has_tumor") or "")
        cases.append(CaseRecord(**kwargs))
    version = int(meta.pop("schema_version", SCHEMA_VERSION))
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported manifest schema_version {version}")
    kind = meta.pop("dataset_kind", "")
    return Manifest(dataset_kind=kind, cases=cases, schema_version=version, meta=meta)


def _rel(p: Path | None, base: Path) -> str:
    if p is None:
        return ""
    return Path(os.path.relpath(Path(p).resolve(), base.resolve())).as_posix()


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    base = path.parent
    lines = [f"# schema_version={manifest.schema_version}", f"# dataset_kind={manifest.dataset_kind}"]
    lines += [f"# {k}={v}" for k, v in sorted(manifest.meta.items())]
    lines.append("\t".join(COLUMNS))
    for c in manifest.cases:
        row = []
        for col in COLUMNS:
            val = getattr(c, col)
            if col in PATH_COLUMNS:
                row.append(_rel(val, base))
            elif col == "has_tumor":
                row.append("" if val is None else str(int(val)))
            else:
                row.append("" if val is None else str(val))
        lines.append("\t".join(row))
    path.write_text("\n".join(lines) + "\n")
    return path
