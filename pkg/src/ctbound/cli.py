"""``ctbound`` command line: gen-data, train, infer, evaluate.

Exit codes: 0 success, 2 configuration error, 3 input error, 4 numeric failure.
Every command writes the resolved configuration to ``config.ini`` in its
output directory.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import dataset, metrics, noise, pipeline, solver
from .config import PRESETS, RunConfig
from .exceptions import (ConfigurationError, ImageIOError, InputError, InvalidParameterError,
                         NumericError)
from .foj import PatchGridSpec
from .models import build_model, load_model, save_model
from .training import (PatchTensors, init_stage_loss, prepare_refine_item, train_init,
                       train_refine, write_log)

log = logging.getLogger("ctbound")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4


def _prepare_out(path, force=False):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise InputError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise InputError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


# ------------------------------------------------------------------- gen-data

def cmd_gen_data(args, config):
    data = config["data"]
    if args.kind:
        config.update({"data": {"kind": args.kind}})
    for name in ("count", "seed"):
        if getattr(args, name) is not None:
            config.update({"data": {name: getattr(args, name)}})
    kind = data["kind"]
    out = _prepare_out(args.out, args.force)
    params = {"count": data["count"], "seed": data["seed"], "channels": data["channels"],
              "alpha_range": list(config.alpha_range()),
              "patch_size": config["grid"]["patch_size"]}
    if kind == "patches":
        params["preset"] = data["preset"]
        samples = noise.gen_patch_dataset(data["count"], config["grid"]["patch_size"],
                                          config.alpha_range(), data["seed"], data["channels"],
                                          data["preset"])
        dataset.write_patch_dataset(out, samples, params)
    elif kind == "composites":
        params.update(height=data["height"], width=data["width"], max_shapes=data["max_shapes"])
        samples = noise.gen_composite_images(data["count"], data["height"], data["width"],
                                             alpha_range=config.alpha_range(), seed=data["seed"],
                                             channels=data["channels"],
                                             max_shapes=data["max_shapes"])
        dataset.write_composite_dataset(out, samples, params)
    else:
        raise ConfigurationError(f"[data] kind must be patches or composites, got {kind!r}")
    config.write(out / "config.ini")
    print(f"wrote {len(samples)} {kind} samples to {out}")


# ---------------------------------------------------------------------- train

def _grid_for(config, shape):
    g = config["grid"]
    return PatchGridSpec(shape[0], shape[1], g["patch_size"], g["stride"], shape[2])


def cmd_train(args, config):
    if args.stage == "refine" and not args.init_checkpoint:
        raise ConfigurationError("training the refinement stage needs --init-checkpoint "
                                 "(a trained, frozen initialization model)")
    out = _prepare_out(args.out, args.force)
    if args.stage == "init":
        _, samples = dataset.load_dataset(args.data, expect="patches")
        data = PatchTensors.from_samples(samples)
        cfg = config.init_train()
        _seed_everything(cfg.seed)
        model = build_model(config.init_hparams(data.patches.shape[-1]))
        before = init_stage_loss(model, data, cfg.eps_delta)
        rows = train_init(model, data, cfg, checkpoint_dir=out)
        after = init_stage_loss(model, data, cfg.eps_delta)
        save_model(model, out / "init.ckpt")
        print(f"init loss {before:.6g} -> {after:.6g}")
    else:
        try:
            init_model = load_model(args.init_checkpoint, expect="init")
        except OSError as exc:
            raise ConfigurationError(f"cannot read init checkpoint: {exc}") from exc
        _, samples = dataset.load_dataset(args.data, expect="composites")
        items = []
        for s in samples:
            grid = _grid_for(config, s.noisy.counts.shape)
            items.append(prepare_refine_item(init_model, s.noisy.counts, s.noisy.alpha, grid,
                                             noise.composite_truth(s, grid)))
        cfg = config.refine_train()
        _seed_everything(cfg.seed)
        model = build_model(config.refine_hparams(samples[0].noisy.counts.shape[2]))
        rows = train_refine(model, items, cfg, checkpoint_dir=out)
        save_model(model, out / "refine.ckpt")
        print(f"refine loss {rows[0][3]:.6g} -> {rows[-1][3]:.6g}" if rows else "no epochs run")
    write_log(out / "train_log.csv", rows)
    config.write(out / "config.ini")


# ---------------------------------------------------------------------- infer

def _read_input(path, alpha):
    path = Path(path)
    if path.suffix.lower() == ".ctb":
        image = noise.read_ctb(path)
        return image.counts.astype(np.float64), image.alpha if alpha is None else alpha
    # ordinary images are treated as normalized intensities
    return noise.load_image(path), 1.0 if alpha is None else alpha


def _load_for_infer(args, config):
    if args.method == "direct":
        return None, None
    if not args.init_checkpoint:
        raise ConfigurationError("--method ctbound needs --init-checkpoint")
    try:
        init_model = load_model(args.init_checkpoint, expect="init")
        refine_model = (load_model(args.refine_checkpoint, expect="refine")
                        if args.refine_checkpoint else None)
    except OSError as exc:
        raise InputError(f"unreadable checkpoint: {exc}") from exc
    return init_model, refine_model


def run_infer(image, alpha, grid, args, config, models_):
    eps = config["eval"]["boundary_eps"]
    if args.method == "direct":
        return solver.fit_image(image, grid, config.solver(), alpha=alpha, eps=eps)
    init_model, refine_model = models_
    return pipeline.infer(image, grid, init_model, refine_model, alpha=alpha, eps=eps)


def write_outputs(out, result, alpha):
    out.mkdir(parents=True, exist_ok=True)
    noise.save_image(out / "boundary.png", result.boundary)
    noise.save_image(out / "color.png", result.color / alpha)
    pipeline.write_params_grid(out / "params.txt", result.params, result.grid, alpha)
    (out / "timing.txt").write_text(result.timing_line() + "\n")


def cmd_infer(args, config):
    models_ = _load_for_infer(args, config)
    source = Path(args.input)
    out = _prepare_out(args.out, args.force)
    if source.is_dir():
        manifest = dataset.read_manifest(source)
        jobs = [(source / e["file"], out / dataset.sample_stem(e)) for e in manifest["samples"]]
    else:
        jobs = [(source, out)]
    for path, target in jobs:
        image, alpha = _read_input(path, args.alpha)
        grid = _grid_for(config, image.shape)
        result = run_infer(image, alpha, grid, args, config, models_)
        write_outputs(target, result, alpha)
        print(f"{path.name} {result.timing_line()}")
    config.write(out / "config.ini")


# ------------------------------------------------------------------- evaluate

def _wall_seconds(pred_dir):
    try:
        line = (pred_dir / "timing.txt").read_text()
    except OSError:
        return math.nan
    for token in line.split():
        if token.startswith("total="):
            return float(token[6:]) / 1e3
    return math.nan


def evaluate_directory(pred_root, truth_dir, config):
    """EvalReport for one prediction directory against a composite dataset."""
    kind, samples = dataset.load_dataset(truth_dir, expect="composites")
    manifest = dataset.read_manifest(truth_dir)
    thresholds = config.thresholds()
    eps, binarize = config["eval"]["boundary_eps"], config["eval"]["binarize"]
    per_image, times = [], []
    single = (Path(pred_root) / "params.txt").exists()
    if single and len(samples) != 1:
        raise InputError(f"{pred_root} holds one prediction but {truth_dir} has {len(samples)}")
    for entry, s in zip(manifest["samples"], samples):
        pred_dir = Path(pred_root) if single else Path(pred_root) / dataset.sample_stem(entry)
        try:
            params, grid, alpha = pipeline.read_params_grid(pred_dir / "params.txt")
        except OSError as exc:
            raise InputError(f"missing prediction for {entry['file']}: {exc}") from exc
        if (grid.image_height, grid.image_width) != s.clean.shape[:2]:
            raise InputError(f"{pred_dir}: prediction is {grid.image_height}x{grid.image_width}, "
                             f"truth is {s.clean.shape[0]}x{s.clean.shape[1]}")
        alpha = 1.0 if alpha is None else alpha
        truth = noise.composite_truth(s, grid)
        color = pipeline.render_maps(params, grid, eps)[1]
        per_image.append(metrics.evaluate_params(params, color, alpha, truth, s.clean, grid,
                                                 thresholds, eps, binarize))
        times.append(_wall_seconds(pred_dir))
    wall = float(np.mean(times)) if times else math.nan
    return metrics.summarize(per_image, Path(pred_root).name, wall, thresholds, binarize)


def cmd_evaluate(args, config):
    out = _prepare_out(args.out, args.force)
    if args.labels and len(args.labels) != len(args.pred):
        raise ConfigurationError("--labels needs one label per --pred directory")
    reports = []
    for i, pred in enumerate(args.pred):
        rep = evaluate_directory(pred, args.truth, config)
        if args.labels:
            rep.label = args.labels[i]
        reports.append(rep)
    (out / "report.csv").write_text(metrics.reports_to_csv(reports))
    table = metrics.format_table(reports)
    (out / "report.txt").write_text(table)
    config.write(out / "config.ini")
    print(table, end="")


# ----------------------------------------------------------------------- main

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [data] [grid] [init] [refine] "
                                         "[solver] [eval] [run] sections")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--threads", type=int, help="cap on worker threads")
    common.add_argument("--force", action="store_true", help="write into a non-empty output dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ctbound", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--kind", choices=["patches", "composites"])
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--stage", choices=["init", "refine"], required=True)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--init-checkpoint", help="frozen init model (required for refine)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="boundary and color maps for an image")
    p.add_argument("input", help="image (.ctb, .png, .pgm) or composite dataset directory")
    p.add_argument("--method", choices=["ctbound", "direct"], default="ctbound")
    p.add_argument("--init-checkpoint")
    p.add_argument("--refine-checkpoint")
    p.add_argument("--alpha", type=float, help="photon level, if not stored with the image")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions against truth")
    p.add_argument("--pred", nargs="+", required=True, help="prediction directories")
    p.add_argument("--truth", required=True, help="composite dataset directory")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = RunConfig.load(args.config, args.preset, args.set)
        if args.threads is not None:
            config.update({"run": {"threads": args.threads}}, "--threads")
        for flag in ("patch_size", "stride"):
            if getattr(args, flag, None) is not None:
                config.update({"grid": {flag: getattr(args, flag)}}, f"--{flag}")
        threads = config["run"]["threads"]
        if threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {threads}")
        torch.set_num_threads(threads)
        started = time.perf_counter()
        args.func(args, config)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - started)
    except (ConfigurationError, InvalidParameterError) as exc:
        print(f"ctbound: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, ImageIOError) as exc:
        print(f"ctbound: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"ctbound: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
