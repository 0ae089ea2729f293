"""Command-line entry point: ``stainsep <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .baseline import nnls_unmix, pinv_unmix
from .metrics import channel_crossover, crossover_csv, reconstruction_metrics
from .stains import StainMatrix, bl_decode, render_knockout, render_single_channel, normalize_columns
from .synth import SceneSpec, generate_corpus, recovery_score
from .trainer import (ConfigError, PatchIndex, TrainConfig, ingest_patches, load_model,
                      separate, train)


class CliError(Exception):
    def __init__(self, category: str, message: str):
        self.category = category
        super().__init__(message)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("missing-file", f"{path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _scene_spec(doc: dict, seed: int | None) -> SceneSpec:
    doc = dict(doc)
    stains = doc.pop("stains", None)
    if stains is not None:
        doc["stains"] = StainMatrix(np.asarray(stains["columns"], float).T, tuple(stains["names"]))
    if seed is not None:
        doc["seed"] = seed
    known = set(SceneSpec.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown scene spec keys: {sorted(unknown)}")
    try:
        return SceneSpec(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scene spec: {exc}") from None


def cmd_synth(args) -> None:
    spec_path = args.spec or args.config
    spec = _scene_spec(_load_json(spec_path) if spec_path else {}, args.seed)
    out = _out_dir(args)
    io.write_stain_matrix(out / "stains.json", spec.stains, normalized=True)
    for i, (rgb, C, _) in enumerate(generate_corpus(spec, args.count)):
        io.write_image(out / f"scene_{i:04d}.png", rgb)
        io.write_concentrations(out / f"scene_{i:04d}.sqc1", C)


def cmd_ingest(args) -> None:
    index = ingest_patches(args.images, min_tissue=args.min_tissue)
    out = Path(args.out or "index.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(index.to_text())


def cmd_train(args) -> None:
    doc = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.steps is not None:
        doc["steps"] = args.steps
    cfg = TrainConfig.from_dict(doc)
    data = Path(args.data)
    if data.is_dir():
        index = ingest_patches(data)
    elif data.is_file():
        index = PatchIndex.from_text(data.read_text(), base=data.parent)
    else:
        raise CliError("missing-file", f"{data} does not exist")
    out = _out_dir(args)
    result = train(cfg, index)
    io.write_checkpoint(out / "checkpoint.sqck", result.checkpoint)
    (out / "losses.csv").write_text(result.csv())
    io.write_stain_matrix(out / "stains.json", result.stains, normalized=True)


def _stains_for(args) -> StainMatrix:
    if getattr(args, "checkpoint", None):
        return load_model(io.read_checkpoint(args.checkpoint))[1]
    if getattr(args, "stain_matrix", None):
        return normalize_columns(io.read_stain_matrix(args.stain_matrix))
    raise CliError("usage", "either --checkpoint or --stain-matrix is required")


def cmd_separate(args) -> None:
    x = io.read_image(args.input)
    if args.method == "model":
        if not args.checkpoint:
            raise CliError("usage", "--method model needs --checkpoint")
        C = separate(io.read_checkpoint(args.checkpoint), x)
    else:
        if not args.stain_matrix:
            raise CliError("usage", f"--method {args.method} needs --stain-matrix")
        S = normalize_columns(io.read_stain_matrix(args.stain_matrix))
        fn = nnls_unmix if args.method == "nnls" else pinv_unmix
        C = fn(S, x).concentrations
    C.values = C.values.astype(np.float32)
    out = Path(args.out or "concentrations.sqc1")
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_concentrations(out, C)


def cmd_render(args) -> None:
    C = io.read_concentrations(args.conc)
    S = _stains_for(args)
    if S.names != C.names:
        raise CliError("mismatch", f"stain names {list(S.names)} differ from map {list(C.names)}")
    if args.mode == "recon":
        rgb = bl_decode(S, C.values.astype(np.float64))
    else:
        if not args.channel:
            raise CliError("usage", f"--mode {args.mode} needs --channel")
        k = S.index(args.channel)
        fn = render_single_channel if args.mode == "single" else render_knockout
        rgb = fn(S, C.values.astype(np.float64), k)
    out = Path(args.out or f"{args.mode}.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_image(out, rgb)


def cmd_eval(args) -> None:
    out = _out_dir(args)
    pred = io.read_concentrations(args.pred)
    (out / "crossover.csv").write_text(crossover_csv(channel_crossover(pred), pred.names))
    if args.truth:
        truth = io.read_concentrations(args.truth)
        if truth.names != pred.names:
            raise CliError("mismatch", f"stain names {list(pred.names)} vs {list(truth.names)}")
        rep = recovery_score(pred.values, truth.values)
        rows = ["stain,matched,correlation,scale,relative_error"]
        for k, name in enumerate(truth.names):
            rows.append(f"{name},{pred.names[rep.permutation[k]]},{float(rep.correlations[k])!r},"
                        f"{float(rep.scales[k])!r},{float(rep.relative_errors[k])!r}")
        (out / "recovery.csv").write_text("\n".join(rows) + "\n")
    if args.recon or args.orig:
        if not (args.recon and args.orig):
            raise CliError("usage", "--recon and --orig must be given together")
        m = reconstruction_metrics(io.read_image(args.recon), io.read_image(args.orig))
        (out / "reconstruction.csv").write_text(
            "mean_l1,psnr,ssim\n" + f"{float(m['mean_l1'])!r},{float(m['psnr'])!r},{float(m['ssim'])!r}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None)
    common.add_argument("--out", default=None)
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 gives bit-reproducible runs")

    p = argparse.ArgumentParser(prog="stainsep", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic scenes")
    s.add_argument("--spec", default=None)
    s.add_argument("--count", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", parents=[common], help="index tissue patches")
    s.add_argument("--images", required=True)
    s.add_argument("--min-tissue", type=float, default=0.5)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", parents=[common], help="write a concentration map")
    s.add_argument("--method", choices=("model", "nnls", "pinv"), default="model")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--stain-matrix", default=None)
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("render", parents=[common], help="render stain images")
    s.add_argument("--mode", choices=("single", "knockout", "recon"), required=True)
    s.add_argument("--channel", default=None)
    s.add_argument("--conc", required=True)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--stain-matrix", default=None)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", parents=[common], help="write metric CSVs")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", default=None)
    s.add_argument("--recon", default=None)
    s.add_argument("--orig", default=None)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, io.FormatError, KeyError, ValueError, IndexError) as exc:
        category = {FileNotFoundError: "missing-file", io.FormatError: "format"}.get(type(exc), "invalid")
        msg = str(exc).replace("\n", " ")
        print(f"error: {category}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
