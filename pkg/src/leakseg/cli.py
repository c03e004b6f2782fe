"""Command-line entry point: config parsing, dispatch, manifests.

Commands: train, cross-train, ablate, sweep, eval, predict, diff-map,
synth. Every run directory receives a manifest (config echo, seeds,
dataset checksums, timestamps) sufficient to reproduce the run. Exit
codes: 0 ok, 2 config, 3 data, 4 numeric, 5 io.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

from . import __version__, evaluation
from .config import ExperimentConfig, parse_config
from .data import load_dataset, _list_images, _load_mask_bool, _load_image_u8
from .errors import ConfigError, DataError, IO_EXIT_CODE, NumericError
from .synth import SynthParams, write_synthetic_corpus
from .trainer import build_state, evaluate_on_index, load_checkpoint, train, train_cross_domain

DATA_ROOT_ENV = "LEAKSEG_DATA_ROOT"

ABLATION_RUNS = ("unet_only", "unet_gan", "unet_gan_mt", "full")
ABLATION_DIRS = {"unet_only": "unet", "unet_gan": "unet_gan", "unet_gan_mt": "unet_gan_mt", "full": "full"}

SWEEP_GRIDS = {
    "leak-layers": [(1,), (2,), (3,), (1, 2), (1, 3), (2, 3), (1, 2, 3)],
    "leak-alpha": [0.1, 0.5, 1.0, 1.1, 1.5],
    "focal": [(1.0, 0.25), (2.0, 0.25), (5.0, 0.25)],
    "consistency": ["focal", "mse"],
}


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p != ""]


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p != ""]


def _bool_flag(text: str) -> bool:
    if text.lower() in ("true", "1", "yes", "on"):
        return True
    if text.lower() in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


# flag name -> (dotted config key, argparse kwargs)
CONFIG_FLAGS: list[tuple[str, str, dict]] = [
    ("--data-root", "data.root", dict(type=str, help="dataset root (images/, masks/, fov/)")),
    ("--layout", "data.layout", dict(type=str, help="drive|stare|chase_db1|synthetic|generic")),
    ("--n-labelled", "data.n_labelled", dict(type=int, help="number of labelled training images")),
    ("--patches-per-epoch", "data.patches_per_epoch", dict(type=int, help="training patches per bookkeeping epoch")),
    ("--eval-root", "data.eval_root", dict(type=str, help="held-out dataset root for the final report")),
    ("--channels", "data.channels", dict(type=int, help="input channels (default 1 synthetic, 3 fundus)")),
    ("--ablation", "ablation.mode", dict(type=str, help="unet_only|unet_gan|unet_gan_mt|full")),
    ("--leak-enabled", "ablation.leak.enabled", dict(type=_bool_flag, help="force the leak switch (full mode only)")),
    ("--leak-layers", "ablation.leak.layers", dict(type=_int_list, help="decoder levels to inject, e.g. 1,2")),
    ("--leak-alpha", "ablation.leak.alpha", dict(type=_float_list, help="generator-side leak scaling(s)")),
    ("--leak-beta", "ablation.leak.beta", dict(type=_float_list, help="skip-side leak scaling(s)")),
    ("--lambda1", "loss.lambda1", dict(type=float, help="supervised loss weight")),
    ("--lambda2", "loss.lambda2", dict(type=float, help="unsupervised GAN loss weight")),
    ("--lambda3", "loss.lambda3", dict(type=float, help="consistency loss weight")),
    ("--focal-alpha-t", "loss.focal_alpha_t", dict(type=float, help="focal scaling factor")),
    ("--focal-rho", "loss.focal_rho", dict(type=float, help="focal focusing power")),
    ("--consistency", "loss.consistency", dict(type=str, help="focal|mse")),
    ("--gen-loss", "loss.gen_loss", dict(type=str, help="adv|feature-matching")),
    ("--lr", "optim.lr", dict(type=float, help="Adam learning rate")),
    ("--iterations", "optim.iterations", dict(type=int, help="outer training iterations")),
    ("--batch-labelled", "optim.batch_labelled", dict(type=int)),
    ("--batch-unlabelled", "optim.batch_unlabelled", dict(type=int)),
    ("--batch-fake", "optim.batch_fake", dict(type=int)),
    ("--d-steps", "optim.d_steps", dict(type=int, help="discriminator sub-steps per iteration")),
    ("--g-steps", "optim.g_steps", dict(type=int, help="generator sub-steps per iteration")),
    ("--checkpoint-every", "optim.checkpoint_every", dict(type=int)),
    ("--ema-alpha", "ema.alpha", dict(type=float, help="teacher EMA smoothing, in [0.9, 0.999]")),
    ("--noise-lambda", "ema.noise_lambda", dict(type=float, help="teacher input-noise scale, in (0, 1)")),
    ("--gen-base-width", "model.gen_base_width", dict(type=int, help="generator channels at the 8x8 grid")),
    ("--disc-base-width", "model.disc_base_width", dict(type=int, help="U-Net width at full resolution")),
    ("--z-len", "model.z_len", dict(type=int, help="latent length; fixed at 100, overrides rejected")),
    ("--stride", "evaluation.stride", dict(type=int, help="stitching stride, in [1, 64]")),
    ("--threshold", "evaluation.threshold", dict(type=float, help="vessel decision threshold, in (0, 1)")),
    ("--fov", "evaluation.fov", dict(type=str, help="auto|on|off")),
    ("--eval-net", "evaluation.eval_net", dict(type=str, help="student|teacher")),
    ("--seed", "seed", dict(type=int)),
    ("--precision", "precision", dict(type=str, help="float32|float64")),
    ("--threads", "torch_threads", dict(type=int, help="torch CPU threads (pin to 1 for byte-exact runs)")),
    ("--out", "out_dir", dict(type=str, help="run output directory")),
]

CROSS_FLAGS: list[tuple[str, str, dict]] = [
    ("--target-root", "cross_domain.root", dict(type=str, help="target-domain dataset root")),
    ("--target-layout", "cross_domain.layout", dict(type=str)),
    ("--target-eval-root", "cross_domain.eval_root", dict(type=str)),
    ("--mix-ratio", "cross_domain.mix_ratio", dict(type=float, help="target share of the unlabelled batch")),
]


def _add_config_flags(parser: argparse.ArgumentParser, extra: list = ()) -> None:
    parser.add_argument("--config", type=str, default=None, help="JSON or YAML config file")
    for flag, dotted, kwargs in list(CONFIG_FLAGS) + list(extra):
        parser.add_argument(flag, dest=dotted.replace(".", "__"), default=None, **kwargs)


def _collect_overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for flag, dotted, _ in CONFIG_FLAGS + CROSS_FLAGS:
        value = getattr(args, dotted.replace(".", "__"), None)
        if value is not None:
            overrides[dotted] = value
    # broadcast a single alpha/beta across all selected leak layers
    layers = overrides.get("ablation.leak.layers")
    if layers is not None:
        for key in ("ablation.leak.alpha", "ablation.leak.beta"):
            values = overrides.get(key)
            if values is None:
                overrides[key] = [1.0] * len(layers)
            elif len(values) == 1 and len(layers) > 1:
                overrides[key] = values * len(layers)
    if overrides.get("data.root") is None and os.environ.get(DATA_ROOT_ENV):
        overrides.setdefault("data.root", os.environ[DATA_ROOT_ENV])
    return overrides


def _build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = parse_config(args.config, _collect_overrides(args))
    return cfg


def _echo_config(cfg: ExperimentConfig) -> None:
    print(json.dumps({"resolved_config": cfg.to_dict()}, indent=2))


def _dataset_checksum(root: str | Path) -> str:
    """sha256 over the sorted file contents of a dataset root."""
    digest = hashlib.sha256()
    root = Path(root)
    for sub in ("images", "masks", "fov"):
        d = root / sub
        if not d.is_dir():
            continue
        for path in _list_images(d):
            digest.update(path.name.encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: ExperimentConfig) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    roots = {"data": cfg.data.root}
    if cfg.data.eval_root:
        roots["eval"] = cfg.data.eval_root
    if cfg.cross_domain is not None:
        roots["target"] = cfg.cross_domain.root
        if cfg.cross_domain.eval_root:
            roots["target_eval"] = cfg.cross_domain.eval_root
    manifest = {
        "schema_version": 1,
        "command": command,
        "package_version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "dataset_checksums": {
            name: _dataset_checksum(root) for name, root in roots.items() if root
        },
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "finished_utc": None,
        "outputs": {"out_dir": str(out_dir)},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _finish_manifest(path: Path, outputs: dict) -> None:
    manifest = json.loads(path.read_text())
    manifest["finished_utc"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    manifest["outputs"].update({k: v for k, v in outputs.items() if k != "state"})
    path.write_text(json.dumps(manifest, indent=2))


# ---------------------------------------------------------------------------
# commands


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    _echo_config(cfg)
    manifest = write_manifest(Path(cfg.out_dir), "train", cfg)
    result = train(cfg, resume_from=args.resume)
    _finish_manifest(manifest, result)
    return 0


def _cmd_cross_train(args) -> int:
    cfg = _build_config(args)
    if cfg.cross_domain is None:
        raise ConfigError("cross-train needs --target-root (or a cross_domain config block)")
    _echo_config(cfg)
    manifest = write_manifest(Path(cfg.out_dir), "cross-train", cfg)
    result = train_cross_domain(cfg, resume_from=args.resume)
    _finish_manifest(manifest, result)
    return 0


def _cmd_ablate(args) -> int:
    base = _build_config(args)
    _echo_config(base)
    root = Path(base.out_dir)
    for mode in ABLATION_RUNS:
        sub = dataclasses.replace(
            base,
            ablation=dataclasses.replace(base.ablation, mode=mode),
            out_dir=str(root / ABLATION_DIRS[mode]),
        )
        manifest = write_manifest(Path(sub.out_dir), f"ablate:{mode}", sub)
        result = train(sub)
        _finish_manifest(manifest, result)
        print(f"[ablate] finished {mode} -> {sub.out_dir}")
    return 0


def _cmd_sweep(args) -> int:
    base = _build_config(args)
    _echo_config(base)
    root = Path(base.out_dir)
    kind = args.kind
    runs: list[tuple[str, ExperimentConfig]] = []
    if kind == "leak-layers":
        for layers in SWEEP_GRIDS[kind]:
            leak = dataclasses.replace(
                base.ablation.leak,
                layers=tuple(layers),
                alpha=(1.0,) * len(layers),
                beta=(1.0,) * len(layers),
            )
            name = "layers_" + "_".join(map(str, layers))
            runs.append((name, dataclasses.replace(
                base, ablation=dataclasses.replace(base.ablation, mode="full", leak=leak))))
    elif kind == "leak-alpha":
        for alpha in SWEEP_GRIDS[kind]:
            leak = dataclasses.replace(
                base.ablation.leak, alpha=(alpha,) * len(base.ablation.leak.layers)
            )
            runs.append((f"alpha_{alpha}", dataclasses.replace(
                base, ablation=dataclasses.replace(base.ablation, mode="full", leak=leak))))
    elif kind == "focal":
        for alpha_t, rho in SWEEP_GRIDS[kind]:
            loss = dataclasses.replace(base.loss, focal_alpha_t=alpha_t, focal_rho=rho, consistency="focal")
            runs.append((f"focal_at{alpha_t}_rho{rho}", dataclasses.replace(base, loss=loss)))
    elif kind == "consistency":
        for cons in SWEEP_GRIDS[kind]:
            loss = dataclasses.replace(base.loss, consistency=cons)
            runs.append((f"cons_{cons}", dataclasses.replace(base, loss=loss)))
    else:
        raise ConfigError(f"unknown sweep kind '{kind}'; expected one of {sorted(SWEEP_GRIDS)}")
    for name, cfg in runs:
        cfg = dataclasses.replace(cfg, out_dir=str(root / name))
        manifest = write_manifest(Path(cfg.out_dir), f"sweep:{kind}:{name}", cfg)
        result = train(cfg)
        _finish_manifest(manifest, result)
        print(f"[sweep] finished {name} -> {cfg.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _build_config(args)
    _echo_config(cfg)
    out_dir = Path(args.report_out or cfg.out_dir)
    manifest = write_manifest(out_dir, "eval", cfg)
    state = build_state(cfg)
    load_checkpoint(state, args.ckpt)
    root = args.on_root or (cfg.data.eval_root or cfg.data.root)
    layout = args.on_layout or cfg.data.layout
    index = load_dataset(root, layout)

    thresholds = [cfg.evaluation.threshold]
    if args.sweep_threshold:
        thresholds = _float_list(args.sweep_threshold)
    rows = []
    report_path = None
    for thr in thresholds:
        cfg_t = dataclasses.replace(
            cfg, evaluation=dataclasses.replace(cfg.evaluation, threshold=thr)
        )
        entries = evaluate_on_index(state, cfg_t, index)
        if not entries:
            raise DataError(f"no masked images to evaluate under {root}")
        setting = {
            "dataset": cfg.data.layout,
            "eval_dataset": index.name,
            "n_labelled": cfg.data.n_labelled,
            "ablation": cfg.ablation.mode,
            "seed": cfg.seed,
            "threshold": thr,
            "stride": cfg.evaluation.stride,
            "eval_net": cfg.evaluation.eval_net,
            "checkpoint": str(args.ckpt),
        }
        sub_out = out_dir if len(thresholds) == 1 else out_dir / f"threshold_{thr}"
        report_path = evaluation.emit_report(entries, setting, sub_out)
        report = evaluation.read_report(report_path)
        pooled = report["aggregate"]["pixel_pooled"]
        rows.append((thr, pooled["acc"], pooled["sp"], pooled["se"]))
        print(f"threshold {thr}: {evaluation.format_metric_row(pooled['acc'], pooled['sp'], pooled['se'])}")
    if len(rows) > 1:
        lines = ["threshold,acc,sp,se"]
        for thr, acc, sp, se in rows:
            lines.append(f"{thr},{acc},{sp if sp is not None else ''},{se if se is not None else ''}")
        (out_dir / "threshold_sweep.csv").write_text("\n".join(lines) + "\n")
    _finish_manifest(manifest, {"report": str(report_path)})
    return 0


def _cmd_predict(args) -> int:
    cfg = _build_config(args)
    state = build_state(cfg)
    load_checkpoint(state, args.ckpt)
    net = state.discriminator
    if cfg.evaluation.eval_net == "teacher" and state.teacher is not None:
        net = state.teacher.net
    out_dir = Path(args.predict_out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for image_path in args.images:
        image = _load_image_u8(image_path)
        prob, mask = evaluation.predict_full_image(
            net, image, stride=cfg.evaluation.stride, threshold=cfg.evaluation.threshold
        )
        stem = Path(image_path).stem
        evaluation.save_probability_map(prob, out_dir / f"{stem}_prob.png")
        evaluation.save_mask(mask, out_dir / f"{stem}_mask.png")
        print(f"predicted {image_path} -> {out_dir / (stem + '_mask.png')}")
    return 0


def _cmd_diff_map(args) -> int:
    pred = _load_mask_bool(args.pred)
    gt = _load_mask_bool(args.gt)
    diff = evaluation.difference_map(pred, gt)
    evaluation.save_difference_map(diff, args.diff_out)
    counts = evaluation.confusion_counts(pred, gt)
    print(f"fp={counts.fp} fn={counts.fn} tp={counts.tp} tn={counts.tn} -> {args.diff_out}")
    return 0


def _cmd_synth(args) -> int:
    params = SynthParams(
        canvas=args.canvas,
        depth=args.depth,
        width_range=(args.width_min, args.width_max),
        n_roots=args.n_roots,
        background_level=args.background_level,
        background_jitter=args.background_jitter,
        contrast=args.contrast,
        contrast_jitter=args.contrast_jitter,
        noise_level=args.noise_level,
        intensity_shift=args.intensity_shift,
        blur_sigma=args.blur_sigma,
    )
    manifest = write_synthetic_corpus(args.synth_out, args.count, params, args.synth_seed)
    print(f"wrote {args.count} synthetic image/mask pairs; manifest at {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leakseg",
        description=(
            "Semi-supervised vessel segmentation: a K+1-class GAN with a U-Net "
            "discriminator, generator-activation leaking, and mean-teacher "
            "focal-consistency regularization."
        ),
    )
    parser.add_argument("--version", action="version", version=f"leakseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="within-dataset semi-supervised training")
    _add_config_flags(p_train)
    p_train.add_argument("--resume", type=str, default=None, help="checkpoint to continue from")
    p_train.set_defaults(func=_cmd_train)

    p_cross = sub.add_parser("cross-train", help="train on a source domain, adapt with target unlabelled data")
    _add_config_flags(p_cross, CROSS_FLAGS)
    p_cross.add_argument("--resume", type=str, default=None)
    p_cross.set_defaults(func=_cmd_cross_train)

    p_abl = sub.add_parser("ablate", help="run the unet / unet_gan / unet_gan_mt / full ladder")
    _add_config_flags(p_abl)
    p_abl.set_defaults(func=_cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="hyperparameter sweeps (leak layers, leak alpha, focal, consistency)")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--kind", type=str, required=True, help="leak-layers|leak-alpha|focal|consistency")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint with whole-image stitching")
    _add_config_flags(p_eval)
    p_eval.add_argument("--ckpt", type=str, required=True)
    p_eval.add_argument("--on-root", type=str, default=None, help="dataset root to evaluate (default: eval_root)")
    p_eval.add_argument("--on-layout", type=str, default=None)
    p_eval.add_argument("--report-out", type=str, default=None)
    p_eval.add_argument("--sweep-threshold", type=str, default=None, help="comma list of thresholds to sweep")
    p_eval.set_defaults(func=_cmd_eval)

    p_pred = sub.add_parser("predict", help="write probability maps and masks for images")
    _add_config_flags(p_pred)
    p_pred.add_argument("--ckpt", type=str, required=True)
    p_pred.add_argument("--predict-out", type=str, required=True)
    p_pred.add_argument("images", nargs="+", help="image files")
    p_pred.set_defaults(func=_cmd_predict)

    p_diff = sub.add_parser("diff-map", help="render FP (blue) / FN (yellow) difference image")
    p_diff.add_argument("--pred", type=str, required=True)
    p_diff.add_argument("--gt", type=str, required=True)
    p_diff.add_argument("--diff-out", type=str, required=True)
    p_diff.set_defaults(func=_cmd_diff_map)

    p_synth = sub.add_parser("synth", help="generate a synthetic vessel corpus")
    p_synth.add_argument("--synth-out", "--out", dest="synth_out", type=str, required=True)
    p_synth.add_argument("--count", type=int, default=10)
    p_synth.add_argument("--canvas", type=int, default=96)
    p_synth.add_argument("--depth", type=int, default=3)
    p_synth.add_argument("--width-min", type=float, default=1.0)
    p_synth.add_argument("--width-max", type=float, default=4.0)
    p_synth.add_argument("--n-roots", type=int, default=2)
    p_synth.add_argument("--background-level", type=float, default=0.62)
    p_synth.add_argument("--background-jitter", type=float, default=0.05)
    p_synth.add_argument("--contrast", type=float, default=-0.35)
    p_synth.add_argument("--contrast-jitter", type=float, default=0.04)
    p_synth.add_argument("--noise-level", type=float, default=0.03)
    p_synth.add_argument("--intensity-shift", type=float, default=0.0)
    p_synth.add_argument("--blur-sigma", type=float, default=0.7)
    p_synth.add_argument("--synth-seed", "--seed", dest="synth_seed", type=int, default=0)
    p_synth.set_defaults(func=_cmd_synth)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())
