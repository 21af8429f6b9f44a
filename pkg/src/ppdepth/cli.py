"""Command line entry point: ``ppd <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import config as config_mod
from .checkpoint import CheckpointFormatError
from .dit import ConfigError
from .io import FormatError
from .metrics import CameraIntrinsics
from .model import ABLATIONS, ablation_config
from .semantic import FeatureFormatError

log = logging.getLogger("ppdepth")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="TOML run config")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config key (repeatable; value parsed as TOML)")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("--strict", action="store_true", help="deterministic single-threaded execution")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppd", description="Pixel-space flow-matching depth toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render the synthetic dataset")
    _add_common(p)
    p.add_argument("--out", help="dataset directory (data.dir)")
    p.add_argument("--count", type=int, help="total number of scenes (data.count)")

    p = sub.add_parser("pretrain-encoder", help="pretrain and freeze the toy semantic encoder")
    _add_common(p)
    p.add_argument("--data", help="dataset directory (data.dir)")
    p.add_argument("--out", help="encoder checkpoint path (pretrain.out)")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("train", help="train the depth model")
    _add_common(p)
    p.add_argument("--data", help="dataset directory (data.dir)")
    p.add_argument("--out", help="run directory (train.out_dir)")
    p.add_argument("--steps", type=int)
    p.add_argument("--encoder", help="pretrained encoder checkpoint (train.encoder)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), help="architecture row: vanilla, sp or sp-cas")
    p.add_argument("--checked", action="store_true", help="finite checks on every op")

    p = sub.add_parser("infer", help="predict relative depth for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--manifest", help="dataset manifest instead of explicit image paths")
    p.add_argument("images", nargs="*", help="PGM images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=4, help="sampler steps")
    p.add_argument("--vis", action="store_true", help="also write 8-bit visualisation PGMs")
    p.add_argument("--raw", action="store_true", help="write the normalised model output unscaled")
    p.add_argument("--strict", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("eval", help="evaluate predictions listed in a manifest")
    p.add_argument("manifest", nargs="?", help="CSV: id,pred_path,gt_path,fx,fy,cx,cy")
    p.add_argument("--pred-dir")
    p.add_argument("--gt-dir")
    p.add_argument("--out", default="report", help="report prefix (writes .csv and .json)")
    p.add_argument("--align", choices=("log", "metric", "none"), default="log")
    p.add_argument("--compare", nargs="+", metavar="LABEL=REPORT.json",
                   help="emit a side-by-side table of existing reports instead")
    p.add_argument("--strict", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("export-ply", help="depth PFM to ASCII PLY point cloud")
    p.add_argument("depth")
    p.add_argument("--out", required=True)
    p.add_argument("--image", help="PGM whose intensity becomes vertex colour")
    p.add_argument("--intrinsics", nargs=4, type=float, metavar=("FX", "FY", "CX", "CY"))
    p.add_argument("--strict", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _resolve_config(args) -> config_mod.RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.strict:
        overrides.append("strict=true")
    for flag, key in (("out", None), ("data", "data.dir"), ("count", "data.count"), ("steps", None),
                      ("encoder", "train.encoder"), ("resume", "train.resume")):
        val = getattr(args, flag, None)
        if val is None:
            continue
        if flag == "out":
            key = {"generate": "data.dir", "pretrain-encoder": "pretrain.out", "train": "train.out_dir"}[args.command]
        if flag == "steps":
            key = "pretrain.steps" if args.command == "pretrain-encoder" else "train.steps"
        overrides.append(f"{key}={_toml_value(val)}")
    if getattr(args, "checked", False):
        overrides.append("train.checked=true")
    cfg = config_mod.load(args.config, overrides)
    if getattr(args, "ablation", None):
        cfg.model = ablation_config(args.ablation, cfg.model)
    return cfg


def _toml_value(v) -> str:
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return str(v)


def thread_limit(requested: int = 0, strict: bool = False) -> Optional[int]:
    """Worker-thread cap: 1 in strict mode, else min(config, PPD_THREADS) when set."""
    if strict:
        return 1
    caps = [requested] if requested > 0 else []
    env = os.environ.get("PPD_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"PPD_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("PPD_THREADS must be >= 1")
        caps.append(n)
    return min(caps) if caps else None


def _limits(n: Optional[int]):
    return threadpool_limits(limits=n) if n else contextlib.nullcontext()


def _dispatch(args) -> int:
    from . import pipeline  # heavy imports only once arguments parsed

    if args.command in ("generate", "pretrain-encoder", "train"):
        cfg = _resolve_config(args)
        with _limits(thread_limit(cfg.threads, cfg.strict)):
            if args.command == "generate":
                out = pipeline.run_generate(cfg)
                print(f"dataset written to {Path(cfg.data.dir)} ({', '.join(out)})")
            elif args.command == "pretrain-encoder":
                _, hist = pipeline.run_pretrain(cfg)
                print(f"encoder saved to {cfg.pretrain.out} (final loss {hist[-1] if hist else float('nan'):.5f})")
            else:
                res = pipeline.run_train(cfg)
                print(f"checkpoint {res.checkpoint}")
        return EXIT_OK

    with _limits(thread_limit(0, args.strict)):
        if args.command == "infer":
            if args.steps < 1:
                raise UsageError("--steps must be >= 1")
            if args.manifest:
                res, em = pipeline.run_infer_manifest(args.checkpoint, args.manifest, args.out, args.seed,
                                                      args.steps, args.vis)
                print(f"eval manifest {em}")
            else:
                if not args.images:
                    raise UsageError("give image paths or --manifest")
                res = pipeline.run_infer(args.checkpoint, args.images, args.out, args.seed, args.steps,
                                         args.vis, args.raw)
            print(f"{len(res.outputs)} predictions written to {args.out}")
            for path, err in res.errors:
                print(f"error: {path}: {err}", file=sys.stderr)
            return EXIT_FAIL if res.errors else EXIT_OK

        if args.command == "eval":
            if args.compare:
                reports = {}
                for item in args.compare:
                    label, sep, path = item.partition("=")
                    if not sep:
                        raise UsageError(f"--compare expects LABEL=REPORT.json, got {item!r}")
                    reports[label] = path
                print(pipeline.ablation_table(reports, args.out + ".md"), end="")
                return EXIT_OK
            if not args.manifest:
                raise UsageError("eval needs a manifest (or --compare)")
            rep = pipeline.run_eval(args.manifest, args.out, args.pred_dir, args.gt_dir, args.align)
            print(f"absrel {rep.absrel:.6f}  delta1 {rep.delta1:.6f}  chamfer_edge {rep.chamfer_edge:.6f}  "
                  f"({rep.n_images} images)")
            for m in rep.missing:
                print(f"missing or unreadable: {m}", file=sys.stderr)
            return EXIT_OK if rep.ok else EXIT_FAIL

        if args.command == "export-ply":
            K = CameraIntrinsics(*args.intrinsics) if args.intrinsics else None
            n = pipeline.run_export_ply(args.depth, args.out, K, args.image)
            print(f"{n} vertices written to {args.out}")
            return EXIT_OK
    raise UsageError(f"unknown command {args.command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .pipeline import TrainingAborted
    try:
        return _dispatch(args)
    except (ConfigError, UsageError) as e:
        print(f"ppd {args.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CheckpointFormatError, FeatureFormatError, TrainingAborted, OSError, ValueError) as e:
        print(f"ppd {args.command}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
