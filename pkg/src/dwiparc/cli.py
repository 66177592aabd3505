"""Command-line interface.

Exit codes: 0 success, 2 validation failure, 3 runtime stage failure,
4 backend protocol failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import ablation, metrics
from .errors import (
    BackendContractError,
    BackendError,
    ConfigurationError,
    DwiparcError,
    GradientSchemeError,
    LabelDataError,
    NiftiFormatError,
    SchemaValidationError,
    StageError,
    TransformError,
    VolumeError,
)
from .nifti import read_dwi, read_nifti, read_transform, write_array, write_nifti
from .pipeline import PipelineConfig, build_backends, load_inputs, run_pipeline, validate_paths
from .postprocess import PostprocessConfig, postprocess_labels
from .resample import conform
from .schema import LabelVolume, from_freesurfer_lut, load_schema, to_freesurfer_lut
from .tensor import MAP_NAMES, derive_maps, eigendecompose, fit_tensor

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_BACKEND = 0, 2, 3, 4

_VALIDATION = (
    ConfigurationError, SchemaValidationError, VolumeError, NiftiFormatError, GradientSchemeError,
    TransformError, LabelDataError, FileNotFoundError, ValueError,
)


def exit_code_for(exc):
    if isinstance(exc, StageError):
        if exc.stage == "configuration":
            return EXIT_VALIDATION
        return exit_code_for(exc.cause) if isinstance(exc.cause, (BackendError, BackendContractError)) else EXIT_RUNTIME
    if isinstance(exc, (BackendError, BackendContractError)):
        return EXIT_BACKEND
    if isinstance(exc, _VALIDATION):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def write_text_atomic(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=path.name, dir=path.parent)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# commands


def cmd_fit_dti(args):
    dwi_path = Path(args.dwi)
    for p in (dwi_path, args.bval, args.bvec):
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")
    dwi = read_dwi(dwi_path, args.bval, args.bvec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = fit_tensor(dwi)
    maps = derive_maps(eigendecompose(tensors, vectors=False))
    write_array(tensors.tensor.astype(np.float32), dwi.affine, out / "tensor.nii", "float32")
    write_array(tensors.valid.astype(np.uint8), dwi.affine, out / "valid.nii", "uint8")
    for name in MAP_NAMES:
        write_nifti(maps[name], out / f"{name.lower()}.nii")
    return EXIT_OK


def cmd_conform(args):
    v = read_nifti(args.input)
    if not hasattr(v, "dims"):
        raise ConfigurationError("conform takes a 3D volume")
    write_nifti(conform(v, args.interpolation, args.dim), args.output)
    return EXIT_OK


def cmd_parcellate(args):
    config = PipelineConfig.from_json(args.config)
    if args.threads:
        config.workers = args.threads
    out = Path(args.out_dir or config.resolve(config.output_dir or "."))
    validate_paths(config)
    inputs, schema, transform = load_inputs(config)
    backends = build_backends(config, schema)
    try:
        result = run_pipeline(inputs, backends, schema, config, transform)
    finally:
        for be in backends.values():
            be.close()
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(result.labels.volume, out / "labels.nii")
    write_nifti(result.coarse.volume, out / "coarse.nii")
    write_text_atomic(out / "manifest.json", json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _label_volume(path, schema, space):
    vol = read_nifti(path)
    lv = LabelVolume(vol, schema, "freesurfer-lut" if space == "lut" else space)
    return lv


def cmd_postprocess(args):
    schema = load_schema(args.schema)
    coarse = LabelVolume(read_nifti(args.coarse), schema, "coarse")
    fine = _label_volume(args.fine, schema, args.space)
    if fine.space == "freesurfer-lut":
        fine = from_freesurfer_lut(fine)
    cfg = PostprocessConfig(args.connectivity, args.max_iters)
    result = postprocess_labels(fine, coarse, cfg)
    if args.space == "lut":
        result = to_freesurfer_lut(result)
    write_nifti(result.volume, args.output)
    return EXIT_OK


def _names(schema, space):
    if space == "lut":
        return {l.lut_id: l.name for l in schema.labels}
    if space == "coarse":
        return {g.id: g.name for g in schema.groups}
    return {l.id: l.name for l in schema.labels}


def evaluate_files(pred_path, gt_path, schema, space="lut", maps=None, pooled=True):
    """Library-level equivalent of ``evaluate``: returns (csv text, summary json text)."""
    sp = {"lut": "freesurfer-lut", "internal": "fine-internal", "coarse": "coarse"}[space]
    pred = LabelVolume(read_nifti(pred_path), schema, sp)
    gt = LabelVolume(read_nifti(gt_path), schema, sp)
    loaded = {k: read_nifti(v) for k, v in (maps or {}).items() if v}
    reports = metrics.evaluate(pred.volume, gt.volume, names=_names(schema, space), maps=loaded, pooled=pooled)
    return metrics.reports_to_csv(reports), metrics.summary_to_json(metrics.aggregate(reports))


def cmd_evaluate(args):
    schema = load_schema(args.schema)
    maps = {"FA": args.fa, "MD": args.md, "CS": args.cs}
    text, summary = evaluate_files(args.pred, args.gt, schema, args.space, maps, not args.max_directed)
    write_text_atomic(args.output, text)
    if args.summary:
        write_text_atomic(args.summary, summary)
    return EXIT_OK


def rsd_files(labels_path, map_specs, schema=None, space="lut"):
    labels = read_nifti(labels_path)
    tables = {}
    for spec in map_specs:
        name, _, path = spec.rpartition("=")
        if not name:
            name = Path(path).name.split(".")[0].upper()
        tables[name] = metrics.rsd(read_nifti(path), labels)
    names = _names(schema, space) if schema is not None else {}
    return metrics.rsd_to_csv(tables, names)


def cmd_rsd(args):
    schema = load_schema(args.schema) if args.schema or args.names else None
    write_text_atomic(args.output, rsd_files(args.labels, args.maps, schema, args.space))
    return EXIT_OK


def cmd_ablation_plan(args):
    with open(args.base_config) as fh:
        base = json.load(fh)
    if args.combination:
        combos = [ablation.parse_combination(c) for c in args.combination]
    else:
        combos = ablation.enumerate_combinations(args.codes or ablation.VOCABULARY, args.sizes)
    paths = ablation.emit_manifest_set(combos, base, args.out_dir)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_ablation_rank(args):
    runs = []
    for path in args.runs:
        with open(path) as fh:
            doc = json.load(fh)
        for d in doc if isinstance(doc, list) else [doc]:
            runs.append(ablation.RunManifest.from_dict(d))
    ranked = ablation.rank_runs(runs, args.metric)
    text = ablation.leaderboard_csv(ranked)
    if args.output:
        write_text_atomic(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dwiparc", description="Two-stage diffusion-MRI parcellation toolkit.")
    p.add_argument("--threads", type=int, default=0, help="concurrent tile predictions (parcellate)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit-dti", help="fit tensors and write scalar maps")
    s.add_argument("dwi")
    s.add_argument("--bval")
    s.add_argument("--bvec")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_fit_dti)

    s = sub.add_parser("conform", help="resample a volume to 256^3, 1 mm, LIA")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--interpolation", choices=("nearest", "trilinear"), default="trilinear")
    s.add_argument("--dim", type=int, default=256)
    s.set_defaults(func=cmd_conform)

    s = sub.add_parser("parcellate", help="run the two-stage pipeline from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_parcellate)

    s = sub.add_parser("postprocess", help="mask, dilate and component-filter a merged label volume")
    s.add_argument("--coarse", required=True)
    s.add_argument("--fine", required=True)
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--schema")
    s.add_argument("--space", choices=("lut", "fine-internal"), default="fine-internal")
    s.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    s.add_argument("--max-iters", type=int)
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("evaluate", help="per-region DSC / HD95 (and optional RSD) report")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--schema")
    s.add_argument("--space", choices=("lut", "internal", "coarse"), default="lut")
    s.add_argument("--fa")
    s.add_argument("--md")
    s.add_argument("--cs")
    s.add_argument("--max-directed", action="store_true", help="HD95 as max of directed percentiles")
    s.add_argument("--output", "-o", required=True)
    s.add_argument("--summary")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("rsd", help="per-region relative standard deviation of scalar maps")
    s.add_argument("labels")
    s.add_argument("maps", nargs="+", help="map files, optionally NAME=path")
    s.add_argument("--schema")
    s.add_argument("--names", action="store_true", help="add region names from the schema")
    s.add_argument("--space", choices=("lut", "internal", "coarse"), default="lut")
    s.add_argument("--output", "-o", required=True)
    s.set_defaults(func=cmd_rsd)

    s = sub.add_parser("ablation-plan", help="write one pipeline config per input-map combination")
    s.add_argument("--base-config", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--codes", nargs="+")
    s.add_argument("--sizes", nargs="+", type=int, default=[1])
    s.add_argument("--combination", nargs="+", help="explicit combinations such as T+F+S+E1")
    s.set_defaults(func=cmd_ablation_plan)

    s = sub.add_parser("ablation-rank", help="rank run manifests into a leaderboard CSV")
    s.add_argument("runs", nargs="+")
    s.add_argument("--metric")
    s.add_argument("--output", "-o")
    s.set_defaults(func=cmd_ablation_rank)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DwiparcError, OSError, ValueError, KeyError) as exc:
        code = exit_code_for(exc)
        print(f"dwiparc {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
