import json
import shutil

import numpy as np
import pytest

from petseg.errors import EmptyManifest, GridMismatch
from petseg.geometry import uncrop
from petseg.metrics import evaluate_set
from petseg.nifti_io import nifti_exists, read_nifti, write_nifti
from petseg.pipeline import prep
from petseg.pipeline.config import RunConfig
from petseg.pipeline.manifest import Manifest, read_manifest, write_manifest
from petseg.pipeline.synth import synth_phantom
from petseg.volume import Volume3D, is_binary_array

SMALL = dict(shape=(24, 24, 20), spacing=(2.0, 2.0, 3.0))
HK_CFG = RunConfig().with_overrides(crop={"hecktor_shape": (48, 48, 48)}, prep={"hecktor_spacing": (2.0, 2.0, 2.0)})


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def autopet(tmp_path_factory):
    root = tmp_path_factory.mktemp("ap")
    return synth_phantom(4, 11, "autopet", root, **SMALL), root


@pytest.fixture(scope="module")
def hecktor(tmp_path_factory):
    root = tmp_path_factory.mktemp("hk")
    m = synth_phantom(3, 5, "hecktor", root, **SMALL)
    out = root / "prep"
    res = prep.prep_hecktor(m, HK_CFG, out)
    return m, out, res


# synthetic phantoms


def test_synth_is_deterministic(tmp_path):
    synth_phantom(3, 9, "autopet", tmp_path / "a", **SMALL)
    synth_phantom(3, 9, "autopet", tmp_path / "b", **SMALL)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    synth_phantom(3, 10, "autopet", tmp_path / "c", **SMALL)
    assert _files(tmp_path / "a") != _files(tmp_path / "c")


def test_synth_negative_fraction(tmp_path):
    m = synth_phantom(10, 1, "autopet", tmp_path, shape=(16, 16, 12), spacing=(2, 2, 3), negative_fraction=0.5)
    empty = [c for c in m.cases if not read_nifti(c.mask_path).data.any()]
    assert len(empty) == 5
    assert all(c.has_tumor is False for c in empty)


def test_synth_lesions_match_ellipsoid_membership(autopet):
    m, root = autopet
    for case in m.cases:
        info = json.loads((root / case.case_id / "phantom.json").read_text())
        mask = read_nifti(case.mask_path).data
        sx, sy, sz = info["spacing"]
        nx, ny, nz = info["shape"]
        expected = 0
        for les in info["lesions"]:
            (cx, cy, cz), (rx, ry, rz) = les["center"], les["radii_mm"]
            for i in range(nx):
                for j in range(ny):
                    for k in range(nz):
                        expected += ((i - cx) * sx / rx) ** 2 + ((j - cy) * sy / ry) ** 2 + ((k - cz) * sz / rz) ** 2 <= 1.0
        assert int(mask.sum()) == expected


def test_synth_hecktor_labels(hecktor):
    m, _, _ = hecktor
    for case in m.cases:
        labels = set(np.unique(read_nifti(case.mask_path).data))
        assert 1.0 in labels and labels <= {0.0, 1.0, 2.0}


# HECKTOR preparation


def test_hecktor_contracts(hecktor):
    m, out, res = hecktor
    assert res.ok and sorted(res.prepared) == [c.case_id for c in m.cases]
    assert prep.verify_prepared(out) == []
    for cid in res.prepared:
        meta, vols = prep.load_prepared(out / cid)
        for name in ("ct", "pet", "gtvp", "gtvn", "mask"):
            assert vols[name].shape == (48, 48, 48)
        assert vols["ct"].data.min() >= -1 and vols["ct"].data.max() <= 1
        assert is_binary_array(vols["gtvp"].data) and not np.any(vols["gtvp"].data * vols["gtvn"].data)
        assert meta.resampled_spacing == (2.0, 2.0, 2.0)


def test_hecktor_uncrop_reproduces_resampled_mask(hecktor):
    m, out, res = hecktor
    from petseg.geometry import resample

    for case in m.cases:
        meta, vols = prep.load_prepared(out / case.case_id)
        resampled = resample(read_nifti(case.mask_path), meta.resampled_spacing, "nearest")
        back = uncrop(vols["mask"], meta.crop_spec(), meta.resampled_shape)
        lo = [max(o, 0) for o in meta.crop_offsets]
        hi = [min(o + t, n) for o, t, n in zip(meta.crop_offsets, meta.crop_target, meta.resampled_shape)]
        win = tuple(slice(a, b) for a, b in zip(lo, hi))
        np.testing.assert_array_equal(back.data[win], resampled.data[win])


def test_hecktor_z_padding(tmp_path):
    # 50 slices of 3 mm -> 150 slices of 1 mm, padded to 192
    m = synth_phantom(1, 2, "hecktor", tmp_path / "src", shape=(16, 16, 50), spacing=(12.0, 12.0, 3.0))
    cfg = RunConfig().with_overrides(prep={"hecktor_spacing": (12.0, 12.0, 1.0)}, crop={"hecktor_shape": (16, 16, 192)})
    res = prep.prep_hecktor(m, cfg, tmp_path / "out")
    meta, vols = prep.load_prepared(tmp_path / "out" / "case000")
    assert res.ok and meta.resampled_shape[2] == 150 and meta.crop_offsets[2] == -21
    for name, pad in (("ct", -1.0), ("pet", -1.0), ("mask", 0.0)):
        d = vols[name].data
        assert np.all(d[:, :, :21] == pad) and np.all(d[:, :, 171:] == pad)
    assert vols["mask"].data[:, :, 21:171].sum() > 0


def test_hecktor_parallel_matches_serial(tmp_path, hecktor):
    m, out, _ = hecktor
    par = tmp_path / "par"
    prep.prep_hecktor(m, HK_CFG.with_overrides(run={"jobs": 2}), par)
    a, b = _files(out), _files(par)
    a.pop(next(k for k in a if k.name == "prepared.tsv"))
    b.pop(next(k for k in b if k.name == "prepared.tsv"))
    a = {k: v for k, v in a.items() if k.name != "run.json"}
    b = {k: v for k, v in b.items() if k.name != "run.json"}
    assert a == b


def test_failing_case_is_isolated(tmp_path):
    m = synth_phantom(3, 4, "hecktor", tmp_path / "src", **SMALL)
    write_nifti(Volume3D(np.zeros((5, 5, 5))), m.cases[1].pet_path)
    res = prep.prep_hecktor(m, HK_CFG, tmp_path / "out")
    assert not res.ok
    assert list(res.failed) == ["case001"] and "GridMismatch" in res.failed["case001"]
    assert res.prepared == ["case000", "case002"]
    run = json.loads((tmp_path / "out" / "run.json").read_text())
    assert run["failed"] == res.failed


# AutoPET preparation


def test_autopet_tumor_only_accounting(autopet, tmp_path):
    m, _ = autopet
    neg = {c.case_id for c in m.cases if not read_nifti(c.mask_path).data.any()}
    assert len(neg) == 2
    res = prep.prep_autopet(m, RunConfig(), tmp_path / "t", tumor_only=True)
    assert sorted(res.excluded) == sorted(neg)
    assert len(res.prepared) + len(res.excluded) + len(res.failed) == len(m.cases)
    assert [c.case_id for c in read_manifest(tmp_path / "t" / "prepared.tsv").cases] == res.prepared
    full = prep.prep_autopet(m, RunConfig(), tmp_path / "f")
    assert len(full.prepared) == 4 and full.excluded == []


def test_autopet_mask_counts_preserved(autopet, tmp_path):
    m, _ = autopet
    prep.prep_autopet(m, RunConfig(), tmp_path / "o")
    for c in m.cases:
        _, vols = prep.load_prepared(tmp_path / "o" / c.case_id)
        assert vols["mask"].data.sum() == read_nifti(c.mask_path).data.sum()
        assert vols["pet"].data.min() == -1.0 and vols["pet"].data.max() == 1.0


def test_autopet_spacing_disagreement(autopet, tmp_path):
    m, root = autopet
    bad = Manifest("autopet", m.cases, meta={"common_spacing": "1.0,1.0,1.0"})
    res = prep.prep_autopet(bad, RunConfig(), tmp_path / "o")
    assert not res.prepared and all("SpacingDisagreement" in v for v in res.failed.values())


def test_autopet_all_negative(tmp_path):
    m = synth_phantom(2, 0, "autopet", tmp_path, shape=(12, 12, 8), spacing=(2, 2, 3), negative_fraction=1.0)
    with pytest.raises(EmptyManifest):
        prep.prep_autopet(m, RunConfig(), tmp_path / "o", tumor_only=True)


def test_autopet_optional_crop(autopet, tmp_path):
    m, _ = autopet
    cfg = RunConfig().with_overrides(crop={"autopet_shape": (32, 32, 32)})
    prep.prep_autopet(m, cfg, tmp_path / "o")
    meta, vols = prep.load_prepared(tmp_path / "o" / "case000")
    assert vols["ct"].shape == (32, 32, 32) and meta.crop_offsets == (-4, -4, -6)


# evaluation through the prepared space


def test_identity_predictions_score_one(hecktor, tmp_path):
    m, out, _ = hecktor
    preds = tmp_path / "preds"
    preds.mkdir()
    for c in m.cases:
        shutil.copy(out / c.case_id / "mask.nii.gz", preds / f"{c.case_id}.nii.gz")
    pairs = prep.load_eval_pairs(m, HK_CFG, preds, out)
    rep = evaluate_set(pairs)
    assert rep.mean_dsc_agg == 1.0
    assert {c.structure for c in rep.per_case} == {"GTVp", "GTVn"}


def test_missing_prediction(autopet, tmp_path):
    m, _ = autopet
    with pytest.raises(FileNotFoundError):
        prep.load_eval_pairs(m, RunConfig(), tmp_path)


def test_prediction_on_wrong_grid(autopet, tmp_path):
    m, _ = autopet
    for c in m.cases:
        write_nifti(Volume3D(np.zeros((3, 3, 3))), tmp_path / f"{c.case_id}.nii.gz", "uint8")
    with pytest.raises(GridMismatch):
        prep.load_eval_pairs(m, RunConfig(), tmp_path)


# two-step assembly


def test_two_step_with_truth_priors(autopet, tmp_path):
    m, _ = autopet
    prep.prep_autopet(m, RunConfig(), tmp_path / "p")
    priors = {c.case_id: c.mask_path for c in m.cases}
    res = prep.assemble_two_step(tmp_path / "p", priors, tmp_path / "two", RunConfig())
    assert res.ok
    for c in m.cases:
        _, vols = prep.load_prepared(tmp_path / "two" / c.case_id)
        np.testing.assert_array_equal(vols["prior"].data, vols["mask"].data)
    assert prep.verify_prepared(tmp_path / "two") == []
    assert all(c.prior_path for c in read_manifest(tmp_path / "two" / "prepared.tsv").cases)


def test_two_step_zero_prior(autopet, tmp_path):
    m, _ = autopet
    prep.prep_autopet(m, RunConfig(), tmp_path / "p")
    zero = tmp_path / "zero.nii.gz"
    write_nifti(Volume3D(np.zeros(SMALL["shape"]), spacing=SMALL["spacing"]), zero, "uint8")
    res = prep.assemble_two_step(tmp_path / "p", {c.case_id: zero for c in m.cases}, tmp_path / "two", RunConfig())
    assert res.ok
    _, vols = prep.load_prepared(tmp_path / "two" / "case000")
    assert not vols["prior"].data.any() and vols["ct"].shape == vols["prior"].shape


def test_two_step_low_resolution_prior(autopet, tmp_path):
    m, _ = autopet
    prep.prep_autopet(m, RunConfig(), tmp_path / "p")
    case = m.cases[0]
    truth = read_nifti(case.mask_path)
    rng = np.random.default_rng(0)
    low = (rng.random((12, 12, 10)) < 0.2).astype(float)
    low_path = tmp_path / "low.nii.gz"
    write_nifti(Volume3D(low, spacing=(4.0, 4.0, 6.0)), low_path, "uint8")
    meta, _ = prep.load_prepared(tmp_path / "p" / case.case_id)
    placed = prep.prior_to_prepared(read_nifti(low_path), meta)
    assert placed.shape == truth.shape and placed.data.sum() == low.sum() * 8


def test_two_step_errors(autopet, tmp_path):
    m, _ = autopet
    prep.prep_autopet(m, RunConfig(), tmp_path / "p")
    odd = tmp_path / "odd.nii.gz"
    write_nifti(Volume3D(np.zeros((7, 7, 7))), odd, "uint8")
    priors = {c.case_id: c.mask_path for c in m.cases}
    priors["case000"] = None
    priors["case001"] = odd
    res = prep.assemble_two_step(tmp_path / "p", priors, tmp_path / "two", RunConfig())
    assert "MissingPrior" in res.failed["case000"] and "GridMismatch" in res.failed["case001"]
    assert sorted(res.prepared) == ["case002", "case003"]


# splitting and verification


def test_split_is_seeded_and_stratified(tmp_path):
    m = synth_phantom(12, 3, "autopet", tmp_path, shape=(8, 8, 8), spacing=(2, 2, 2))
    train, test = prep.split_manifest(m, 0.25, seed=1, stratify=True)
    assert len(test.cases) == 3 and len(train.cases) == 9
    assert sorted(c.center_id for c in test.cases) == ["C0", "C1", "C2"]
    again = prep.split_manifest(m, 0.25, seed=1, stratify=True)[1]
    assert [c.case_id for c in again.cases] == [c.case_id for c in test.cases]
    other = prep.split_manifest(m, 0.25, seed=2)[1]
    assert len(other.cases) == 3
    assert not {c.case_id for c in train.cases} & {c.case_id for c in test.cases}


def test_verify_flags_problems(hecktor, tmp_path):
    _, out, _ = hecktor
    bad = tmp_path / "bad"
    shutil.copytree(out, bad)
    write_nifti(Volume3D(np.full((48, 48, 48), 1.5), spacing=(2, 2, 2)), bad / "case000" / "ct.nii.gz", "float32")
    write_nifti(Volume3D(np.zeros((4, 4, 4))), bad / "case001" / "pet.nii.gz", "float32")
    problems = prep.verify_prepared(bad)
    assert any("case000: ct outside" in p for p in problems)
    assert any(p.startswith("case001") for p in problems)
    assert prep.verify_prepared(tmp_path / "nothing")
