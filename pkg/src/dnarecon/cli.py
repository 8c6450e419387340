"""Command-line entry point: phantom, project, fbp, train, reconstruct, eval.

Every subcommand accepts ``--config FILE`` holding ``key=value`` lines
(``#`` starts a comment). Keys are the long flag names with or without the
leading dashes; dashes and underscores are interchangeable. Values given
as flags override the file, which overrides the built-in defaults.

Exit status: 0 on success, 1 on a runtime or file error, 2 on a usage or
configuration error, 3 when training stops on a non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .backprojection import fbp_reconstruct
from .data_io import (
    DatasetManifest,
    FormatError,
    array_digest,
    load_image_file,
    load_images,
    load_raw,
    random_phantom_spec,
    raw_kind,
    render_phantom,
    save_pgm,
    save_raw,
)
from .geometry import GeometryConfig, radon_forward
from .losses import LossWeights, MetricsReport
from .networks import DNA, DNAConfig, PAPER_CRITIC_CHANNELS, load_checkpoint
from .training import NonFiniteError, TrainConfig, pretrain_then_finetune, resume_state, train_loop

log = logging.getLogger("dnarecon")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_NONFINITE = 0, 1, 2, 3
IMAGE_SUFFIXES = (".raw", ".pgm")


class UsageError(Exception):
    pass


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# name, type, default, help. ``None`` defaults mean "not set"; ``required``
# options are checked after the config file has been merged.
Option = tuple[str, Callable[[str], Any], Any, str]

GEOMETRY_OPTIONS: list[Option] = [
    ("views", int, 16, "number of projection views"),
    ("span", float, 180.0, "angular span in degrees"),
    ("supersample", int, 2, "sub-pixel sampling of the projector rotations"),
]

COMMANDS: dict[str, tuple[str, list[Option], tuple[str, ...]]] = {
    "phantom": (
        "write random ellipse phantoms (RAW + PGM previews + manifest.json)",
        [
            ("count", int, 10, "number of phantoms"),
            ("size", int, 64, "image side length"),
            ("seed", int, 0, "random seed"),
            ("views", int, 16, "view count recorded in the manifest"),
            ("out-dir", Path, None, "output directory"),
        ],
        ("out-dir",),
    ),
    "project": (
        "forward-project an image file into a sinogram file",
        GEOMETRY_OPTIONS + [("in", Path, None, "input image (RAW or PGM)"), ("out", Path, None, "output sinogram")],
        ("in", "out"),
    ),
    "fbp": (
        "analytic filtered backprojection of a sinogram file",
        [
            ("span", float, 180.0, "angular span in degrees"),
            ("supersample", int, 2, "sub-pixel sampling of the projector rotations"),
            ("size", int, None, "expected image size (checked against the sinogram)"),
            ("in", Path, None, "input sinogram"),
            ("out", Path, None, "output image (.raw; a .pgm preview is written alongside)"),
        ],
        ("in", "out"),
    ),
    "train": (
        "train the reconstruction network (optional natural-image pre-training)",
        GEOMETRY_OPTIONS
        + [
            ("data-dir", Path, None, "CT training images (.raw/.pgm files or a manifest.json)"),
            ("pretrain-dir", Path, None, "natural images for pre-training (.pgm/.raw)"),
            ("out-dir", Path, None, "output directory"),
            ("resume", Path, None, "continue the fine-tune phase from a training checkpoint"),
            ("size", int, 64, "image side length"),
            ("max-iterations", int, 1000, "fine-tune generator iterations"),
            ("pretrain-iterations", int, 0, "pre-training generator iterations"),
            ("seed", int, 0, "random seed"),
            ("batch-size", int, 10, "batch size"),
            ("lr", float, 1e-4, "Adam learning rate"),
            ("beta1", float, 0.5, "Adam beta1"),
            ("beta2", float, 0.9, "Adam beta2"),
            ("critic-updates", int, 4, "critic steps per generator step"),
            ("checkpoint-every", int, 0, "checkpoint period in iterations (0: first and last only)"),
            ("branches", int, 23, "backprojection branches"),
            ("merge", str, "mean", "branch merge: mean or channels"),
            ("filter-channels", _int_tuple, (1, 8, 8, 1), "filter-stack channel widths"),
            ("unet-width", int, 36, "U-net channel width"),
            ("cardinality", int, 4, "ResNeXt cardinality"),
            ("critic-channels", _int_tuple, PAPER_CRITIC_CHANNELS, "six critic convolution widths"),
            ("critic-hidden", int, 1024, "critic hidden dense width"),
            ("lambda-q", float, 5e-3, "adversarial weight"),
            ("lambda-p", float, 0.1, "structural weight"),
            ("lambda-r", float, 1.0, "sinogram-consistency weight"),
            ("lambda-gp", float, 10.0, "gradient-penalty weight"),
        ],
        ("data-dir", "out-dir"),
    ),
    "reconstruct": (
        "reconstruct sinograms with a trained checkpoint",
        [
            ("checkpoint", Path, None, "model checkpoint"),
            ("in", Path, None, "sinogram file or directory of sinogram files"),
            ("out", Path, None, "output directory (g2/, plus fbp/ and g1/ with --emit-intermediate)"),
            ("emit-intermediate", _bool, False, "also write the FBP and first-generator images"),
        ],
        ("checkpoint", "in", "out"),
    ),
    "eval": (
        "per-image SSIM / PSNR / RMSE of predictions against ground truth",
        [
            ("pred-dir", Path, None, "predicted images"),
            ("truth-dir", Path, None, "ground-truth images"),
            ("out", Path, None, "report CSV"),
            ("windowed-ssim", _bool, False, "use 8x8 windowed SSIM instead of global statistics"),
        ],
        ("pred-dir", "truth-dir", "out"),
    ),
}


def _key(name: str) -> str:
    return name.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnarecon", description="Few-view CT reconstruction toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, (help_text, options, _) in COMMANDS.items():
        p = sub.add_parser(cmd, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, default=None, help="key=value configuration file")
        for name, typ, default, help_opt in options:
            flag = f"--{name}"
            suffix = f" (default: {default})" if default is not None else ""
            if typ is _bool:
                p.add_argument(flag, dest=_key(name), nargs="?", const=True, type=_bool, default=None, help=help_opt + suffix)
            else:
                p.add_argument(flag, dest=_key(name), type=typ, default=None, help=help_opt + suffix)
    return parser


def read_config_file(path: Path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` begins a comment."""
    out: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[_key(key)] = value
    return out


def resolve_config(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Merge flags over the config file over defaults; reject unknown keys."""
    _, options, required = COMMANDS[command]
    types = {_key(n): t for n, t, _, _ in options}
    merged = {_key(n): d for n, _, d, _ in options}
    if args.config is not None:
        from_file = read_config_file(args.config)
        unknown = sorted(set(from_file) - set(types))
        if unknown:
            raise UsageError(f"{args.config}: unknown keys for '{command}': {', '.join(unknown)}")
        for k, v in from_file.items():
            try:
                merged[k] = types[k](v)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {k}: {v!r} ({exc})") from exc
    for k in types:
        v = getattr(args, k)
        if v is not None:
            merged[k] = v
    missing = [f"--{r}" for r in required if merged[_key(r)] is None]
    if missing:
        raise UsageError(f"'{command}' needs {', '.join(missing)} (as a flag or in --config)")
    return merged


def _jsonable(cfg: dict) -> dict:
    return {k: (str(v) if isinstance(v, Path) else list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}


def _geometry(n: int, views: int, span_deg: float, supersample: int) -> GeometryConfig:
    try:
        return GeometryConfig(n, views, math.radians(span_deg), supersample=supersample)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------
# subcommands


def cmd_phantom(cfg: dict) -> int:
    if cfg["count"] < 0:
        raise UsageError("--count must be >= 0")
    out: Path = cfg["out_dir"]
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg["seed"])
    entries = []
    for i in range(cfg["count"]):
        img = render_phantom(random_phantom_spec(rng), cfg["size"]).astype(np.float32)
        stem = f"phantom_{i:04d}"
        save_raw(out / f"{stem}.raw", img)
        save_pgm(out / f"{stem}.pgm", img)
        entries.append((f"{stem}.raw", "train"))
    manifest = DatasetManifest(entries, cfg["size"], cfg["views"], seed=cfg["seed"], normalization="none (phantoms in [0, 1])")
    manifest.to_json(out / "manifest.json")
    log.info("wrote %d phantoms to %s", cfg["count"], out)
    return EXIT_OK


def cmd_project(cfg: dict) -> int:
    img = load_image_file(cfg["in"])
    if img.shape[0] != img.shape[1]:
        raise UsageError(f"{cfg['in']}: image must be square, got {img.shape}")
    geo = _geometry(img.shape[0], cfg["views"], cfg["span"], cfg["supersample"])
    sino = radon_forward(torch.from_numpy(img), geo).numpy()
    save_raw(cfg["out"], sino, "sinogram")
    return EXIT_OK


def _preview_path(path: Path) -> Path:
    return path.with_suffix(".pgm")


def cmd_fbp(cfg: dict) -> int:
    sino = load_raw(cfg["in"], "sinogram")
    views, n = sino.shape
    if cfg["size"] is not None and cfg["size"] != n:
        raise UsageError(f"{cfg['in']}: sinogram has {n} detector bins but --size is {cfg['size']}")
    geo = _geometry(n, views, cfg["span"], cfg["supersample"])
    img = fbp_reconstruct(torch.from_numpy(sino), geo).numpy()
    save_raw(cfg["out"], img)
    save_pgm(_preview_path(Path(cfg["out"])), img)
    return EXIT_OK


def _image_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise UsageError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def _load_corpus(location: Path, n: int) -> tuple[np.ndarray, list[str]]:
    if location.is_file() and location.suffix == ".json":
        paths = [Path(p) for p in DatasetManifest.from_json(location).paths("train")]
    else:
        files = _image_files(location)
        # prefer RAW when a PGM preview of the same image sits next to it
        raws = {p.stem for p in files if p.suffix.lower() == ".raw"}
        paths = [p for p in files if p.suffix.lower() == ".raw" or p.stem not in raws]
    if not paths:
        raise UsageError(f"no images found in {location}")
    images = load_images(paths, n)
    return images, [str(p) for p in paths]


def _train_config(cfg: dict, iterations: int, phase: str) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        critic_updates=cfg["critic_updates"],
        max_iterations=iterations,
        seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"],
        loss_weights=LossWeights(cfg["lambda_q"], cfg["lambda_p"], cfg["lambda_r"], cfg["lambda_gp"]),
        phase=phase,
    )


def cmd_train(cfg: dict) -> int:
    n = cfg["size"]
    model_cfg = DNAConfig(
        image_size=n,
        num_views=cfg["views"],
        angular_span=math.radians(cfg["span"]),
        supersample=cfg["supersample"],
        branches=cfg["branches"],
        merge=cfg["merge"],
        filter_channels=cfg["filter_channels"],
        unet_width=cfg["unet_width"],
        cardinality=cfg["cardinality"],
        critic_channels=cfg["critic_channels"],
        critic_hidden=cfg["critic_hidden"],
    )
    try:
        finetune = _train_config(cfg, cfg["max_iterations"], "finetune")
        pretrain = _train_config(cfg, cfg["pretrain_iterations"], "pretrain")
        model = DNA(model_cfg, seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out: Path = cfg["out_dir"]
    ct_images, ct_paths = _load_corpus(cfg["data_dir"], n)
    echo = _jsonable(cfg)

    if cfg["resume"] is not None:
        model, gen_state, critic_state, done = resume_state(cfg["resume"])
        if model.config != model_cfg:
            raise UsageError(f"{cfg['resume']}: checkpoint architecture differs from the requested configuration")
        res = train_loop(ct_images, model, finetune, out, gen_state, critic_state, start_iteration=done)
        manifest = {
            "config": echo,
            "model": model_cfg.to_dict(),
            "resumed_from": str(cfg["resume"]),
            "phases": [
                {
                    "phase": "finetune",
                    "corpus_sha256": array_digest(ct_images),
                    "corpus_size": len(ct_images),
                    "start_iteration": done,
                    "iterations": res.iteration,
                    "losses": str(out / "losses.csv"),
                    "checkpoints": [str(p) for p in res.checkpoints],
                }
            ],
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return EXIT_OK

    natural = None
    if cfg["pretrain_iterations"] > 0:
        if cfg["pretrain_dir"] is None:
            raise UsageError("--pretrain-iterations > 0 needs --pretrain-dir")
        natural, _ = _load_corpus(cfg["pretrain_dir"], n)
    echo["data_files"] = ct_paths
    pretrain_then_finetune(natural, ct_images, model, pretrain, finetune, out, echo)
    return EXIT_OK


def _sinogram_inputs(location: Path) -> list[Path]:
    if location.is_dir():
        files = sorted(p for p in location.iterdir() if p.is_file() and p.suffix.lower() in (".sin", ".raw"))
        files = [p for p in files if raw_kind(p) == "sinogram"]
        if not files:
            raise UsageError(f"no sinogram files in {location}")
        return files
    if not location.exists():
        raise FileNotFoundError(f"{location}: no such file")
    return [location]


def cmd_reconstruct(cfg: dict) -> int:
    ckpt: Path = cfg["checkpoint"]
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} does not exist")
    model, _ = load_checkpoint(ckpt)
    model.eval()
    inputs = _sinogram_inputs(cfg["in"])
    out: Path = cfg["out"]
    stages = ("fbp", "g1", "g2") if cfg["emit_intermediate"] else ("g2",)
    for s in stages:
        (out / s).mkdir(parents=True, exist_ok=True)
    for path in inputs:
        sino = load_raw(path, "sinogram")
        if sino.shape != model.geo.sinogram_shape:
            raise UsageError(f"{path}: sinogram is {sino.shape}, checkpoint geometry expects {model.geo.sinogram_shape}")
        with torch.no_grad():
            fbp_img, g1_img, g2_img = model(torch.from_numpy(sino))
        results = {"fbp": fbp_img, "g1": g1_img, "g2": g2_img}
        stem = path.name.split(".")[0]
        for s in stages:
            save_raw(out / s / f"{stem}.raw", results[s][0, 0].numpy())
    log.info("reconstructed %d sinograms into %s", len(inputs), out)
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    def index(d: Path) -> dict[str, Path]:
        found: dict[str, Path] = {}
        for p in _image_files(d):
            stem = p.name.split(".")[0]
            # a RAW file wins over its PGM preview
            if stem not in found or p.suffix.lower() == ".raw":
                found[stem] = p
        return found

    preds, truths = index(cfg["pred_dir"]), index(cfg["truth_dir"])
    only_pred = sorted(set(preds) - set(truths))
    only_truth = sorted(set(truths) - set(preds))
    if only_pred or only_truth:
        lines = [f"prediction without ground truth: {preds[s]}" for s in only_pred]
        lines += [f"ground truth without prediction: {truths[s]}" for s in only_truth]
        raise UsageError("unmatched files:\n  " + "\n  ".join(lines))
    if not preds:
        raise UsageError(f"no images in {cfg['pred_dir']}")
    report = MetricsReport()
    for stem in sorted(preds):
        p, t = load_image_file(preds[stem]), load_image_file(truths[stem])
        if p.shape != t.shape:
            raise UsageError(f"{preds[stem]} is {p.shape} but {truths[stem]} is {t.shape}")
        report.add(stem, p, t, windowed=cfg["windowed_ssim"])
    report.to_csv(cfg["out"])
    m = report.mean()
    log.info("mean ssim %.4f psnr %.2f dB rmse %.4f", m["ssim"], m["psnr_db"], m["rmse"])
    return EXIT_OK


HANDLERS = {
    "phantom": cmd_phantom,
    "project": cmd_project,
    "fbp": cmd_fbp,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"dnarecon {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"dnarecon {args.command}: training stopped: {exc} (diagnostic checkpoint written to the output directory)", file=sys.stderr)
        return EXIT_NONFINITE
    except (OSError, FormatError, ValueError) as exc:
        print(f"dnarecon {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
