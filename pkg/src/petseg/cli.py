"""Command-line entry point: ``petseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from petseg import numerics
from petseg.errors import PetSegError
from petseg.metrics import evaluate_set, rank_leaderboard
from petseg.nifti_io import nifti_exists, read_nifti, write_nifti
from petseg.pipeline import prep as prep_mod
from petseg.pipeline.config import RunConfig, load_config
from petseg.pipeline.manifest import read_manifest, write_manifest
from petseg.pipeline.reports import (
    format_eval_summary,
    read_aggregate_table,
    read_eval_report,
    write_eval_report,
    write_leaderboard,
    write_stat_report,
)
from petseg.pipeline.synth import synth_phantom
from petseg.sampler import export_patches, sample_patches
from petseg.stats import per_case_pvalues, pvalue_matrix, render_matrix
from petseg.volume import binarize, split_mask, stack_channels

log = logging.getLogger("petseg")


def _triple(kind):
    def parse(text):
        parts = [kind(p) for p in text.split(",")]
        if len(parts) != 3:
            raise argparse.ArgumentTypeError("expected three comma-separated values")
        return tuple(parts)

    return parse


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(run={"seed": args.seed}, sampler={"seed": args.seed},
                                 augment={"seed": args.seed}, stats={"seed": args.seed})
    if args.jobs is not None:
        cfg = cfg.with_overrides(run={"jobs": args.jobs})
    if args.z_anchor is not None:
        cfg = cfg.with_overrides(crop={"z_anchor": args.z_anchor})
    if args.empty_empty is not None:
        cfg = cfg.with_overrides(metrics={"empty_empty": args.empty_empty},
                                 stats={"empty_empty": args.empty_empty})
    return cfg


def _report_prep(result) -> int:
    print(f"prepared {len(result.prepared)}  excluded {len(result.excluded)}  failed {len(result.failed)}"
          f"  -> {result.out_dir}")
    for cid, msg in result.failed.items():
        print(f"  FAILED {cid}: {msg}", file=sys.stderr)
    return 0 if result.ok else 1


def cmd_synth(args, cfg):
    m = synth_phantom(args.n, cfg.run.seed, args.kind, args.out, shape=args.shape,
                      spacing=args.spacing, negative_fraction=args.negative_fraction)
    print(f"wrote {len(m.cases)} {args.kind} phantoms to {args.out}/manifest.tsv")
    return 0


def cmd_prep_hecktor(args, cfg):
    return _report_prep(prep_mod.prep_hecktor(read_manifest(args.manifest), cfg, args.out))


def cmd_prep_autopet(args, cfg):
    if args.crop:
        cfg = cfg.with_overrides(crop={"autopet_shape": args.crop})
    return _report_prep(prep_mod.prep_autopet(read_manifest(args.manifest), cfg, args.out, args.tumor_only))


def cmd_split_masks(args, cfg):
    pair = split_mask(read_nifti(args.label_map), args.gtvp, args.gtvn)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(pair.gtvp, out / "gtvp.nii.gz", "uint8")
    write_nifti(pair.gtvn, out / "gtvn.nii.gz", "uint8")
    print(f"GTVp voxels {int(pair.gtvp.data.sum())}  GTVn voxels {int(pair.gtvn.data.sum())}")
    return 0


def cmd_sample_patches(args, cfg):
    meta, vols = prep_mod.load_prepared(args.case_dir)
    names = ["CT", "PET"] + (["PRIOR"] if "prior" in vols else [])
    mcv = stack_channels([vols[n.lower()] for n in names], names)
    mask = binarize(vols["mask"], 0.5)
    sampler = cfg.sampler
    if args.patch:
        from dataclasses import replace

        sampler = replace(sampler, patch_shape=args.patch)
    patches = sample_patches(mcv, mask, sampler, epoch=args.epoch, case_id=meta.case_id)
    index = export_patches(patches, args.out)
    print(f"wrote {len(patches)} patches; index {index}")
    return 0


def cmd_assemble(args, cfg):
    prep_dir = Path(args.prep_dir)
    priors = {}
    if args.priors_manifest:
        priors = {c.case_id: c.prior_path or c.prediction_path for c in read_manifest(args.priors_manifest).cases}
    else:
        for case in read_manifest(prep_dir / "prepared.tsv").cases:
            priors[case.case_id] = nifti_exists(Path(args.priors) / case.case_id)
    return _report_prep(prep_mod.assemble_two_step(prep_dir, priors, args.out, cfg))


def cmd_split(args, cfg):
    manifest = read_manifest(args.manifest)
    train, test = prep_mod.split_manifest(manifest, args.test_fraction, cfg.run.seed, args.stratify)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(train, out / "train.tsv")
    write_manifest(test, out / "test.tsv")
    print(f"train {len(train.cases)}  test {len(test.cases)}")
    return 0


def cmd_eval(args, cfg):
    manifest = read_manifest(args.manifest)
    pairs = prep_mod.load_eval_pairs(manifest, cfg, args.predictions, args.prep_dir, args.tumor_only)
    report = evaluate_set(pairs, cfg.metrics.empty_empty)
    jsonl, _ = write_eval_report(report, args.out, args.name)
    print(format_eval_summary(report, args.name))
    print(f"report: {jsonl}")
    return 0


def cmd_stats(args, cfg):
    if args.reports:
        models = {}
        for path in args.reports:
            name, report = read_eval_report(path)
            models[name] = {(c.case_id, c.structure): c.dsc for c in report.per_case}
        report = per_case_pvalues(models, cfg.stats)
    else:
        if not args.manifest or len(args.model) < 2:
            raise SystemExit("stats needs --reports, or --manifest with two or more --model NAME=DIR")
        manifest = read_manifest(args.manifest)
        models = {}
        for spec in args.model:
            name, _, pred_dir = spec.partition("=")
            models[name] = prep_mod.load_eval_pairs(manifest, cfg, pred_dir, args.prep_dir, args.tumor_only)
        report = pvalue_matrix(models, cfg.stats)
    write_stat_report(report, args.out, args.name)
    print(render_matrix(report))
    return 0


def cmd_rank(args, cfg):
    entries = []
    for path in args.inputs:
        if str(path).endswith(".jsonl"):
            name, report = read_eval_report(path)
            entries.append((name, report.dsc_agg_per_structure))
        else:
            entries.extend(read_aggregate_table(path))
    text = write_leaderboard(rank_leaderboard(entries), args.out)
    print(text, end="")
    return 0


def cmd_losscheck(args, cfg):
    rng = np.random.default_rng(cfg.run.seed)
    worst = {"dice": 0.0, "focal": 0.0, "dice_focal": 0.0}
    values = {k: [] for k in worst}
    fns = {"dice": numerics.dice_loss, "focal": numerics.focal_loss, "dice_focal": numerics.dice_focal_loss}
    for _ in range(args.n):
        pred = rng.uniform(0.05, 0.95, (4, 4, 4))
        target = rng.random((4, 4, 4)) < 0.4
        for key, fn in fns.items():
            loss, grad = fn(pred, target, cfg.loss)
            fd = numerics.central_difference(lambda p: fn(p, target, cfg.loss)[0], pred, args.step)
            worst[key] = max(worst[key], numerics.gradient_error(grad, fd))
            values[key].append(loss)
    failed = False
    for key in fns:
        status = "ok" if worst[key] < args.tol else "FAIL"
        failed |= status == "FAIL"
        print(f"{key:<11} mean loss {np.mean(values[key]):.6f}  max grad rel err {worst[key]:.3e}  {status}")
    return 1 if failed else 0


def cmd_verify(args, cfg):
    problems = prep_mod.verify_prepared(args.prep_dir)
    for p in problems:
        print(p)
    print("verify: OK" if not problems else f"verify: {len(problems)} problem(s)")
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="petseg", description="PET/CT segmentation benchmark toolkit")
    p.add_argument("--config", help="run configuration file (key = value with [sections])")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--jobs", type=int, help="parallel workers for case-level work")
    p.add_argument("--z-anchor", choices=("high", "low"), help="end of the z axis treated as the top")
    p.add_argument("--empty-empty", choices=("one", "zero", "exclude"),
                   help="score of an empty prediction on an empty truth")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate phantom cases")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--kind", choices=("hecktor", "autopet"), default="autopet")
    s.add_argument("--negative-fraction", type=float, default=0.5)
    s.add_argument("--shape", type=_triple(int), default=(48, 48, 40))
    s.add_argument("--spacing", type=_triple(float), default=(2.0, 2.0, 3.0))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prep-hecktor", help="resample, crop and normalize HECKTOR cases")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prep_hecktor)

    s = sub.add_parser("prep-autopet", help="normalize AutoPET cases")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--tumor-only", action="store_true", help="drop cases with an empty mask")
    s.add_argument("--crop", type=_triple(int), help="optional crop, e.g. 192,192,224")
    s.set_defaults(func=cmd_prep_autopet)

    s = sub.add_parser("split-masks", help="split a label map into GTVp/GTVn masks")
    s.add_argument("label_map")
    s.add_argument("--out", required=True)
    s.add_argument("--gtvp", type=int, default=1)
    s.add_argument("--gtvn", type=int, default=2)
    s.set_defaults(func=cmd_split_masks)

    s = sub.add_parser("sample-patches", help="draw label-sampled patches from a prepared case")
    s.add_argument("case_dir")
    s.add_argument("--out", required=True)
    s.add_argument("--epoch", type=int, default=0)
    s.add_argument("--patch", type=_triple(int))
    s.set_defaults(func=cmd_sample_patches)

    s = sub.add_parser("assemble-two-step", help="add first-stage predictions as a third channel")
    s.add_argument("prep_dir")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--priors", help="directory of <case_id>.nii[.gz] priors")
    g.add_argument("--priors-manifest", help="manifest whose prior_path column names the priors")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_assemble)

    s = sub.add_parser("split", help="seeded train/test split of a manifest")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--stratify", action="store_true", help="split each center separately")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("eval", help="Dice and aggregated Dice of predictions")
    s.add_argument("manifest")
    s.add_argument("--predictions", help="directory of <case_id>.nii[.gz] predictions")
    s.add_argument("--prep-dir", help="prepared directory; its metadata maps predictions back")
    s.add_argument("--out", required=True)
    s.add_argument("--name", default="model")
    s.add_argument("--tumor-only", action="store_true", help="skip cases with an empty truth")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("stats", help="Wilcoxon p-value matrix between models")
    s.add_argument("--reports", nargs="+", help="eval reports; compares per-case Dice")
    s.add_argument("--manifest", help="with --model: bootstrap aggregated Dice")
    s.add_argument("--model", action="append", default=[], metavar="NAME=DIR")
    s.add_argument("--prep-dir")
    s.add_argument("--tumor-only", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--name", default="stats")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("rank", help="rank models by mean aggregated Dice")
    s.add_argument("inputs", nargs="+", help="eval reports (.jsonl) or name/structure tables (.tsv)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_rank)

    s = sub.add_parser("losscheck", help="finite-difference check of the loss gradients")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--step", type=float, default=1e-6)
    s.add_argument("--tol", type=float, default=1e-6)
    s.set_defaults(func=cmd_losscheck)

    s = sub.add_parser("verify", help="re-check contracts of a prepared directory")
    s.add_argument("prep_dir")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _build_config(args)
        return args.func(args, cfg)
    except (PetSegError, OSError, ValueError) as exc:
        print(f"petseg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
