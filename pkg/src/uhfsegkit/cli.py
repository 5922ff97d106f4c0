"""Command-line entry point: ``uhfsegkit <subcommand> ...``.

Exit codes: 0 success, 1 usage error or invalid manifest, 2 partial batch
failure, 3 I/O or format error. Errors are printed to stderr as one JSON
object per line.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import labels as lab
from .ensemble import average_and_argmax, load_manifest
from .metrics import evaluate_pair, write_metrics_csv
from .nifti import NiftiFormatError, load_nifti, save_nifti
from .pipeline import ManifestError, PipelineManifest, run_pipeline
from .resample import ResampleSpec, provenance, resample_image, resample_labels
from .stats import format_threshold, group_stats, read_group_csv, write_group_csv
from .synth import CaseFailure, SynthConfig, case_stem, generate_corpus, write_case
from .volumetry import (
    normalize_by_tiv,
    plot_comparison_svg,
    read_tiv_csv,
    structure_volumes,
    tiv_compare,
    write_comparison_csv,
    write_tiv_csv,
    write_volumes_csv,
)

EXIT_USAGE, EXIT_PARTIAL, EXIT_IO = 1, 2, 3
JOBS_ENV = "UHFSEGKIT_JOBS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        sys.exit(EXIT_USAGE)


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected a or a,b,c")
    return tuple(parts)


def _id_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _convention(name):
    return lab.get_convention(name) if name else None


def _nifti_paths(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.name.endswith((".nii", ".nii.gz")))


def _stem(path: Path) -> str:
    name = path.name
    for suf in (".nii.gz", ".nii"):
        if name.endswith(suf):
            return name[: -len(suf)]
    return path.stem


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_prep_labels(a) -> int:
    labels = lab.load_labels(a.labels, _convention(a.convention))
    out = lab.relabel_unassigned_to_csf(labels, load_nifti(a.mask), a.csf_id)
    lab.save_labels(out, a.out)
    return 0


def cmd_extract_cortex(a) -> int:
    labels = lab.load_labels(a.labels, _convention(a.convention))
    cortex, parc = lab.extract_cortex(labels)
    a.out.mkdir(parents=True, exist_ok=True)
    lab.save_labels(cortex, a.out / "cortex.nii.gz")
    lab.save_labels(parc, a.out / "parcellation.nii.gz")
    return 0


def cmd_synth(a) -> int:
    cfg_dict = json.loads(Path(a.config).read_text()) if a.config else {}
    if a.seed is not None:
        cfg_dict["seed"] = a.seed
    if a.mode:
        cfg_dict["intensity_synthesis"] = a.mode == "image"
    if a.replication is not None:
        cfg_dict["replication"] = a.replication
    cfg = SynthConfig.from_dict(cfg_dict)
    paths = _nifti_paths(a.inputs)
    if not paths:
        raise UsageError(f"no NIfTI label maps in {a.inputs}")
    conv = _convention(a.convention)
    inputs = [lab.load_labels(p, conv) for p in paths]
    a.out.mkdir(parents=True, exist_ok=True)
    (a.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    failures = 0
    for case in generate_corpus(inputs, cfg, jobs=a.jobs, names=[_stem(p) for p in paths]):
        if isinstance(case, CaseFailure):
            failures += 1
            _emit_error("case-failed", f"{case_stem(case)}: {case.error}")
            continue
        write_case(case, a.out)
    return EXIT_PARTIAL if failures else 0


def _spec(a, **kw) -> ResampleSpec:
    if a.like is not None:
        ref = load_nifti(a.like)
        return ResampleSpec(target_grid=(ref.dims, ref.affine), **kw)
    return ResampleSpec(target_spacing=a.target_spacing, **kw)


def cmd_resample(a) -> int:
    if a.labels:
        labels = lab.load_labels(a.input, _convention(a.convention))
        mode = "one-hot-linear" if a.label_mode == "onehot" else "nearest"
        spec = _spec(a, label_mode=mode)
        lab.save_labels(resample_labels(labels, spec, jobs=a.jobs), a.out, descrip=provenance(spec, "labels"))
    else:
        spec = _spec(a, image_order=a.order)
        save_nifti(resample_image(load_nifti(a.input), spec, jobs=a.jobs), a.out, descrip=provenance(spec, "image"))
    return 0


def cmd_ensemble(a) -> int:
    folds = load_manifest(a.manifest)
    seg = average_and_argmax(folds, _convention(a.convention))
    lab.save_labels(seg, a.out)
    return 0


def cmd_eval(a) -> int:
    mode = a.mode
    conv = _convention(a.convention) or (lab.FS35 if mode == "whole-brain" else lab.DKT62)
    reference = lab.DK68 if mode == "cortex" else conv
    excl = lab.evaluation_label_set(mode, (conv, reference), a.exclude)
    print(excl.describe(), file=sys.stderr)
    gt = lab.load_labels(a.gt, conv)
    pred = lab.load_labels(a.pred, conv)
    rep = evaluate_pair(gt, pred, excl, a.subject or _stem(Path(a.gt)))
    if a.out is None:
        write_metrics_csv([rep], sys.stdout)
    else:
        a.out.parent.mkdir(parents=True, exist_ok=True)
        write_metrics_csv([rep], a.out)
    return 0


def cmd_volumetry(a) -> int:
    overrides = dict(read_tiv_csv(a.tiv_reference)[0]) if a.tiv_reference else {}
    reports = []
    for p in a.labels:
        sid = _stem(p)
        labels = lab.load_labels(p, _convention(a.convention))
        rep = structure_volumes(labels, sid, a.tiv_exclude)
        reports.append(normalize_by_tiv(rep, overrides.get(sid)))
    a.out.mkdir(parents=True, exist_ok=True)
    write_volumes_csv(reports, a.out / "volumes.csv")
    write_tiv_csv(reports, a.out / "tiv.csv")
    return 0


def cmd_tiv_compare(a) -> int:
    ours, groups = read_tiv_csv(a.ours)
    ref, ref_groups = read_tiv_csv(a.reference)
    cmp = tiv_compare(ours, ref, {**ref_groups, **groups})
    a.out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(cmp, a.out / "tiv_comparison.csv")
    if a.svg:
        plot_comparison_svg(cmp, a.out / "tiv_comparison.svg")
    print(f"n={cmp.overall.n} r={cmp.overall.r:.4f} slope={cmp.overall.slope:.4f} intercept={cmp.overall.intercept:.2f}")
    return 0


def cmd_group_stats(a) -> int:
    groups = tuple(g.strip() for g in a.groups.split(","))
    if len(groups) != 2:
        raise UsageError("--groups needs exactly two names, e.g. HC,PDP")
    rows = read_group_csv(a.input)
    results = group_stats(rows, groups, a.alpha, a.m, a.method)
    m = a.m or len(results)
    print(f"alpha={a.alpha} m={m} threshold={a.alpha / m:g} (displayed {format_threshold(a.alpha / m)})", file=sys.stderr)
    a.out.parent.mkdir(parents=True, exist_ok=True)
    write_group_csv(results, a.out)
    return 0


def cmd_pipeline(a) -> int:
    manifest = PipelineManifest.load(a.manifest)
    if a.seed is not None:
        manifest.seed = a.seed
    report = run_pipeline(manifest, jobs=a.jobs)
    for sid in report.failed_subjects:
        _emit_error("subject-failed", sid)
    return report.exit_code


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    version = f"uhfsegkit {__version__}"
    parser = _Parser(prog="uhfsegkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=version)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--version", action="version", version=version)
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    conv_help = "label convention: FS35, FSV95, DKT62, DK68 or a CSV (id,name,hemisphere); inferred when omitted"

    p = add("prep-labels", cmd_prep_labels, "assign unlabelled brain-mask voxels to CSF")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--csf-id", type=int, default=lab.CSF_ID)
    p.add_argument("--convention", help=conv_help)

    p = add("extract-cortex", cmd_extract_cortex, "split a whole-brain map into cortex-only and parcellation maps")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--convention", help=conv_help)

    p = add("synth", cmd_synth, "generate a domain-randomised corpus from label maps")
    p.add_argument("--config", type=Path, help="JSON with SynthConfig fields")
    p.add_argument("--inputs", type=Path, required=True, help="directory of label maps")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=("image", "labels-only"))
    p.add_argument("--replication", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--convention", help=conv_help)
    p.add_argument("--jobs", type=int, default=_default_jobs())

    p = add("resample", cmd_resample, "resample an image (cubic spline) or label map (one-hot linear)")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    tgt = p.add_mutually_exclusive_group(required=True)
    tgt.add_argument("--target-spacing", type=_triple)
    tgt.add_argument("--like", type=Path)
    p.add_argument("--labels", action="store_true", help="treat the input as a label map")
    p.add_argument("--label-mode", choices=("onehot", "nearest"), default="onehot")
    p.add_argument("--order", choices=("cubic", "linear", "nearest"), default="cubic")
    p.add_argument("--convention", help=conv_help)
    p.add_argument("--jobs", type=int, default=_default_jobs())

    p = add("ensemble", cmd_ensemble, "average fold probabilities and write the argmax label map")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--convention", help=conv_help)

    p = add("eval", cmd_eval, "per-label DSC and ASD between ground truth and prediction")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--mode", choices=("whole-brain", "cortex"), default="whole-brain")
    p.add_argument("--exclude", type=_id_list, help="comma-separated ids replacing the default exclusions ('' = none)")
    p.add_argument("--subject")
    p.add_argument("--out", type=Path, help="CSV path (stdout when omitted)")
    p.add_argument("--convention", help=conv_help)

    p = add("volumetry", cmd_volumetry, "structure volumes, TIV and TIV-normalised volumes")
    p.add_argument("--labels", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--tiv-reference", type=Path, help="CSV subject_id,tiv_mm3 used as normalisation denominator")
    p.add_argument("--tiv-exclude", type=_id_list, default=[])
    p.add_argument("--convention", help=conv_help)

    p = add("tiv-compare", cmd_tiv_compare, "compare TIVs against a reference (Pearson r, regression)")
    p.add_argument("--ours", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--svg", action="store_true")

    p = add("group-stats", cmd_group_stats, "Mann-Whitney U per ROI with Bonferroni correction")
    p.add_argument("--input", type=Path, required=True, help="CSV subject_id,group,roi,normalized_volume[,method]")
    p.add_argument("--groups", required=True, help="two group names, e.g. HC,PDP")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--m", type=int, help="number of comparisons (defaults to the tests in the file)")
    p.add_argument("--method", default="", help="method name when the CSV has no method column")
    p.add_argument("--out", type=Path, required=True)

    p = add("pipeline", cmd_pipeline, "run a JSON pipeline manifest over all subjects")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=_default_jobs())
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ManifestError) as exc:
        _emit_error("usage" if isinstance(exc, UsageError) else "manifest", str(exc))
        return EXIT_USAGE
    except (NiftiFormatError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
