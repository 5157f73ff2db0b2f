"""Command line entry point: ``voxelage <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .evaluation import compute_pad, evaluate_cohort, export_panel, export_slice, slice_rgb
from .interpret import grad_cam, grad_cam_averaged, occlusion_sensitivity, save_saliency, smoothgrad
from .models import UnknownLayerError, load_checkpoint
from .nifti import read_nifti, write_nifti
from .phantom import generate_cohort, load_cohort, phantom_spec_from_dict
from .preprocess import normalize_intensity, reorient_canonical
from .training import TrainConfig, predict_global, predict_voxel, train_global_model, train_voxel_model
from .volume import ValidationError

logger = logging.getLogger("voxelage")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

PRESETS = ("voxel", "global", "desk_voxel", "desk_global")

PANEL_KINDS = ("image", "gradcam", "occlusion", "smoothgrad", "pad")
PANEL_COLORMAPS = {
    "image": "gray",
    "gradcam": "red_yellow_blue",
    "occlusion": "diverging_blue_white_red",
    "smoothgrad": "red_yellow_blue",
    "pad": "diverging_blue_white_red",
}


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ValidationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config_dict(config: str | None, overrides, defaults: dict | None = None) -> dict:
    """Config file (or preset name) merged with ``key=value`` overrides."""
    d = dict(defaults or {})
    if config:
        path = Path(config)
        if path.exists():
            with open(path) as f:
                loaded = json.load(f)
            if not isinstance(loaded, dict):
                raise ValidationError(f"config {config} must hold a JSON object")
            d.update(loaded)
        elif path.stem in PRESETS:
            d.update(TrainConfig.preset(path.stem).to_dict())
        else:
            raise FileNotFoundError(f"config file {config} not found")
    for text in overrides or []:
        k, v = parse_override(text)
        d[k] = v
    return d


def _json_dump(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (tuple, Path)):
        return list(o) if isinstance(o, tuple) else str(o)
    raise TypeError(type(o).__name__)


def _write_run_records(out: Path, command: str, resolved: dict, seed, started: str):
    out.mkdir(parents=True, exist_ok=True)
    _json_dump(resolved, out / "resolved_config.json")
    _json_dump(
        {
            "command": command,
            "seed": seed,
            "versions": {
                "voxelage": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "torch": torch.__version__,
            },
            "started": started,
            "finished": datetime.now(timezone.utc).isoformat(),
        },
        out / "run_manifest.json",
    )


def _load_image(path):
    return normalize_intensity(reorient_canonical(read_nifti(path)))


# --- subcommands -----------------------------------------------------------


def cmd_phantom_gen(args) -> dict:
    defaults = {"size": 32, "seed": 0}
    d = load_config_dict(args.config, args.override, defaults)
    if args.size is not None:
        d["size"] = args.size
    if args.seed is not None:
        d["seed"] = args.seed
    n = int(d.pop("n", 8))
    if args.n is not None:
        n = args.n
    spec = phantom_spec_from_dict(d)
    subjects = generate_cohort(spec, n, args.out)
    logger.info("wrote %d phantoms to %s", len(subjects), args.out)
    return {**d, "n": n}


def cmd_train(args) -> dict:
    d = load_config_dict(args.config or "desk_voxel", args.override)
    if args.seed is not None:
        d["seed"] = args.seed
    d["num_workers"] = args.workers
    cfg = TrainConfig.from_dict(d)
    if not args.input:
        raise ValidationError("train needs --input (cohort directory or manifest.csv)")
    cohort = load_cohort(args.input)
    train = train_voxel_model if cfg.model_kind == "voxel" else train_global_model
    _, log = train(cohort, cfg, out_dir=args.out)
    logger.info("trained %d epochs; final total loss %.4f", len(log), log[-1]["total"])
    return cfg.to_dict()


def cmd_predict(args) -> dict:
    model = _require_model(args)
    if not args.input:
        raise ValidationError("predict needs --input")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vol = _load_image(args.input)
    result = {"input": str(args.input)}
    if model.kind == "voxel":
        window = args.patch or model.manifest.get("train_config", {}).get("patch_size")
        pred = predict_voxel(model, vol, window=window)
        write_nifti(vol.with_data(pred.voxel_age), out / "voxel_age.nii.gz")
        labels = np.asarray(pred.seg_probs).argmax(axis=0).astype(np.float32)
        write_nifti(vol.with_data(labels), out / "segmentation.nii.gz")
        result["global_age"] = pred.global_age
        if args.age is not None:
            mask = labels > 0
            pad = compute_pad(vol.with_data(pred.voxel_age), args.age, vol.with_data(mask.astype(np.float32)))
            write_nifti(pad.map, out / "pad.nii.gz")
            result["chronological_age"] = args.age
    else:
        result["global_age"] = float(predict_global(model, [vol.data], preprocess=False)[0])
    _json_dump(result, out / "prediction.json")
    return {"model": str(args.model), "input": str(args.input), "age": args.age, "patch": args.patch}


def _target_from_args(args, vol, model):
    if args.target == "global_age":
        return "global_age"
    if args.target == "voxel_age":
        if model.kind != "voxel":
            raise ValidationError("target voxel_age needs a voxel-level model")
        if args.roi:
            roi = read_nifti(args.roi)
            roi = reorient_canonical(roi).data > 0
        else:
            roi = vol.data > 0
        return roi
    raise ValidationError(f"unknown target {args.target!r}; use global_age or voxel_age")


def _default_layers(model):
    if model.kind == "voxel":
        final = f"enc{model.config.levels - 1}"
        return "enc1", final
    return "block2", "block4"


def cmd_interpret(args) -> dict:
    model = _require_model(args)
    if not args.input:
        raise ValidationError("interpret needs --input")
    vol = _load_image(args.input)
    target = _target_from_args(args, vol, model)
    early_default, final_default = _default_layers(model)
    early = args.layer_early or early_default
    final = args.layer_final or final_default
    method = args.method
    if method == "gradcam":
        res = grad_cam(model, vol, final, target)
    elif method == "gradcam_avg":
        res = grad_cam_averaged(model, vol, early, final, target)
    elif method == "occlusion":
        res = occlusion_sensitivity(model, vol, args.patch, args.stride, args.fill, target)
    elif method == "smoothgrad":
        seed = args.seed if args.seed is not None else 0
        res = smoothgrad(model, vol, args.n_samples, args.sigma, target, args.mode, seed=seed)
    else:
        raise ValidationError(f"unknown method {method!r}")
    nii, side = save_saliency(res, Path(args.out) / method, checkpoint_id=str(args.model))
    logger.info("wrote %s and %s", nii, side)
    return {"method": method, **res.params, "target": args.target, "model": str(args.model)}


def cmd_eval(args) -> dict:
    model = _require_model(args)
    if not args.input:
        raise ValidationError("eval needs --input (cohort directory or manifest.csv)")
    subjects = load_cohort(args.input)
    window = args.patch or model.manifest.get("train_config", {}).get("patch_size")
    report = evaluate_cohort(model, subjects, window=window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "metrics.csv")
    _json_dump(report.summary(), out / "metrics_summary.json")
    return {"model": str(args.model), "input": str(args.input), "patch": args.patch}


def _panel_inputs(input_path: Path) -> dict:
    if input_path.is_dir():
        found = {}
        for kind in PANEL_KINDS:
            for cand in (input_path / f"{kind}.nii.gz", input_path / f"{kind}.nii"):
                if cand.exists():
                    found[kind] = cand
                    break
        if not found:
            raise FileNotFoundError(f"no {'/'.join(PANEL_KINDS)} NIfTI files in {input_path}")
        return found
    return {"image": input_path}


def cmd_export(args) -> dict:
    if not args.input:
        raise ValidationError("export needs --input (NIfTI file or directory)")
    inputs = _panel_inputs(Path(args.input))
    out = Path(args.out)
    subject = args.subject or Path(args.input).name.split(".")[0]
    panels = []
    for kind, path in inputs.items():
        vol = reorient_canonical(read_nifti(path))
        index = args.index if args.index is not None else vol.shape[args.axis] // 2
        cmap = args.colormap or PANEL_COLORMAPS.get(kind, "gray")
        export_slice(vol, args.axis, index, out / f"{subject}_{kind}_{args.axis}{index}.png", cmap)
        panels.append(slice_rgb(vol, args.axis, index, cmap))
    if len(panels) > 1:
        index = args.index if args.index is not None else "mid"
        export_panel(panels, out / f"{subject}_panel_{args.axis}{index}.png")
    return {"input": str(args.input), "axis": args.axis, "index": args.index, "colormap": args.colormap}


def _require_model(args):
    if not args.model:
        raise ValidationError(f"{args.command} needs --model (checkpoint directory)")
    return load_checkpoint(args.model)


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "interpret": cmd_interpret,
    "eval": cmd_eval,
    "export": cmd_export,
}


def _common(p: argparse.ArgumentParser):
    default_workers = int(os.environ.get("VOXELAGE_NUM_WORKERS", "1"))
    p.add_argument("--config", help="JSON config file or preset name (desk_voxel, desk_global, voxel, global)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=default_workers, help="data-pipeline workers [$VOXELAGE_NUM_WORKERS]")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxelage", description="Voxel-level brain age prediction toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom-gen", help="generate a synthetic phantom cohort")
    _common(p)
    p.add_argument("--n", type=int, default=None, help="number of subjects")
    p.add_argument("--size", type=int, default=None, help="voxels per axis")

    p = sub.add_parser("train", help="train a voxel-level or global model")
    _common(p)
    p.add_argument("--input", help="cohort directory or manifest.csv")

    for name, help_ in (("predict", "run a trained model on one image"), ("eval", "evaluate a model on a cohort")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--model", help="checkpoint directory")
        p.add_argument("--input", help="NIfTI image (predict) or cohort (eval)")
        p.add_argument("--patch", type=int, default=None, help="sliding-window size")
        if name == "predict":
            p.add_argument("--age", type=float, default=None, help="chronological age for a PAD map")

    p = sub.add_parser("interpret", help="compute a saliency map")
    _common(p)
    p.add_argument("--model", help="checkpoint directory")
    p.add_argument("--input", help="NIfTI image")
    p.add_argument("--method", choices=["gradcam", "gradcam_avg", "occlusion", "smoothgrad"], default="gradcam")
    p.add_argument("--target", default="global_age", help="global_age or voxel_age")
    p.add_argument("--roi", help="ROI mask NIfTI for target voxel_age (default: nonzero input)")
    p.add_argument("--layer-early", dest="layer_early")
    p.add_argument("--layer-final", dest="layer_final")
    p.add_argument("--patch", type=int, default=None, help="occlusion cube size")
    p.add_argument("--stride", type=int, default=None, help="occlusion stride")
    p.add_argument("--fill", type=float, default=0.0, help="occlusion fill value")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=25, help="SmoothGrad draws")
    p.add_argument("--sigma", type=float, default=0.1, help="SmoothGrad noise, fraction of dynamic range")
    p.add_argument("--mode", choices=["signed", "magnitude"], default="signed")

    p = sub.add_parser("export", help="render NIfTI slices to PNG")
    _common(p)
    p.add_argument("--input", help="NIfTI file, or a directory with image/gradcam/occlusion/smoothgrad/pad files")
    p.add_argument("--axis", type=int, default=2)
    p.add_argument("--index", type=int, default=None)
    p.add_argument("--colormap", choices=["gray", "red_yellow_blue", "diverging_blue_white_red"], default=None)
    p.add_argument("--subject", default=None)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    started = datetime.now(timezone.utc).isoformat()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"voxelage: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        resolved = COMMANDS[args.command](args)
        _write_run_records(Path(args.out), args.command, resolved, args.seed, started)
    except (ValidationError, UnknownLayerError) as e:
        print(f"voxelage {args.command}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"voxelage {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
