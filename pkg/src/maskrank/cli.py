"""``maskrank`` command line: train, eval, sweep, grad-check, mask-apply, gen-synth.

Exit codes:

    0  success
    1  unexpected internal error
    2  configuration error (bad flags, bad config JSON, missing paths)
    3  data error (unreadable manifest/raster/checkpoint, too few identities)
    4  verification failure (a gradient check exceeded its tolerance)

Without a manifest, ``train``, ``eval`` and ``sweep`` use the standard
synthetic benchmark generated in memory. Every output file is a pure function
of the config, seed and inputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, gradcheck, training
from .encoder import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import EvaluationError
from .sampler import InsufficientDataError
from .training import ConfigError, ExperimentConfig

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_VERIFY = 4

DEFAULT_ALPHAS = (0.1, 0.15, 0.2, 0.5, 1.0)
DEFAULT_LAMBDAS = (0.0, 1.0, 2.0, 5.0, 10.0)

log = logging.getLogger("maskrank")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------- helpers


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cfg = ExperimentConfig.from_json(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    overrides = {
        "seed": getattr(args, "seed", None),
        "out_dir": getattr(args, "out_dir", None),
        "loss": getattr(args, "loss", None),
        "alpha": getattr(args, "alpha", None),
        "lam": getattr(args, "lam", None),
        "steps": getattr(args, "steps", None),
        "manifest": getattr(args, "manifest", None),
    }
    try:
        cfg = cfg.with_overrides(**overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if getattr(args, "no_masks", False):
        cfg = replace(cfg, use_masks=False)
    if cfg.manifest is not None and not Path(cfg.manifest).is_file():
        raise ConfigError(f"manifest {cfg.manifest} does not exist")
    return cfg


def load_data(cfg: ExperimentConfig) -> dataio.Corpus:
    if cfg.manifest is None:
        return training.benchmark_corpus()
    return dataio.load_corpus(cfg.manifest)


def out_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.out_dir if cfg.out_dir is not None else ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def echo_config(cfg: ExperimentConfig) -> str:
    # the output directory is where the echo lives; leaving it out keeps reruns
    # into different directories byte-identical
    d = cfg.to_json()
    d.pop("out_dir", None)
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _fmt(v: float) -> str:
    return repr(float(v))


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse value list {text!r}") from exc
    if not vals:
        raise ConfigError("value list is empty")
    return vals


# ------------------------------------------------------------------ commands


def cmd_train(cfg: ExperimentConfig, corpus: dataio.Corpus) -> training.TrainResult:
    """Train, then write checkpoint.bin, losses.csv and config.json to the output directory."""
    dest = out_dir(cfg)

    def progress(step, value):
        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("step %d loss %.6f", step, value)

    result = training.train(cfg, corpus, log=progress)
    save_checkpoint(dest / "checkpoint.bin", result.params)
    rows = [(i, _fmt(v)) for i, v in enumerate(result.losses)]
    (dest / "losses.csv").write_text(_csv(rows, ["step", "loss"]))
    (dest / "config.json").write_text(echo_config(cfg))
    return result


def cmd_eval(checkpoint, corpus: dataio.Corpus, protocol: str = "single", use_masks: bool = True, dest=None):
    """Evaluate a checkpoint on the query/gallery splits; writes report.json when ``dest`` is given."""
    params = load_checkpoint(checkpoint)
    report = training.evaluate_params(params, corpus, protocol, use_masks=use_masks)
    if dest is not None:
        Path(dest).mkdir(parents=True, exist_ok=True)
        (Path(dest) / "report.json").write_text(dump_json(report.to_json()))
    return report


def cmd_sweep(cfg: ExperimentConfig, corpus: dataio.Corpus, alphas=DEFAULT_ALPHAS, lambdas=DEFAULT_LAMBDAS,
              losses=None, protocol: str = "single") -> str:
    """Train and evaluate one cell per grid point; returns the CSV text.

    With ``losses`` given the sweep iterates loss names at the config's alpha
    and lambda and adds a leading ``loss`` column.
    """
    if losses:
        cells = [{"loss": name} for name in losses]
        header = ["loss", "alpha", "lambda", "rank1", "map"]
    else:
        cells = [{"alpha": a, "lam": lam} for a in alphas for lam in lambdas]
        header = ["alpha", "lambda", "rank1", "map"]
    rows = []
    for cell in cells:
        try:
            cell_cfg = cfg.with_overrides(**cell)
            _, report = training.run_cell(cell_cfg, corpus, protocol)
        except (ValueError, InsufficientDataError) as exc:
            label = ", ".join(f"{k}={v}" for k, v in cell.items())
            raise type(exc)(f"sweep cell ({label}) failed: {exc}") from exc
        row = [_fmt(cell_cfg.alpha), _fmt(cell_cfg.lam), _fmt(report.rank(1)), _fmt(report.map)]
        if losses:
            row.insert(0, cell_cfg.loss)
        rows.append(row)
        log.info("cell %s rank1 %.4f map %.4f", cell, report.rank(1), report.map)
    return _csv(rows, header)


def cmd_grad_check(name: str, trials: int = 100, tolerance: float | None = None, seed: int = 0):
    names = gradcheck.CHECKS if name == "all" else (name,)
    return [gradcheck.grad_check(n, trials=trials, tolerance=tolerance, seed=seed) for n in names]


def cmd_mask_apply(image_path, mask_path, out_path) -> np.ndarray:
    image = dataio.read_raster(image_path)
    mask = dataio.read_raster(mask_path)
    try:
        out = dataio.apply_mask(image, mask[:, :, 0] if mask.shape[2] == 1 else mask.mean(axis=2))
    except dataio.DataError as exc:
        raise dataio.DataError(f"{image_path} / {mask_path}: {exc}") from exc
    dataio.write_raster(out_path, out)
    return out


def cmd_gen_synth(spec: dataio.SyntheticSpec, dest) -> Path:
    corpus = dataio.gen_synthetic(spec)
    manifest = dataio.write_corpus(corpus, dest)
    (Path(dest) / "spec.json").write_text(dump_json(dataio.spec_to_json(spec)))
    return manifest


# --------------------------------------------------------------------- parser


def _add_common(p, protocol=False):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--loss", choices=training.LOSSES)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--manifest", help="JSONL manifest (default: standard synthetic benchmark)")
    p.add_argument("--no-masks", action="store_true", help="feed an all-zero masked stream")
    if protocol:
        p.add_argument("--protocol", choices=("single", "multi"), default="single")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskrank", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an encoder; writes checkpoint.bin, losses.csv, config.json")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes report.json")
    _add_common(p, protocol=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="alpha x lambda grid (or loss comparison); writes sweep.csv")
    _add_common(p, protocol=True)
    p.add_argument("--alphas", default=",".join(map(str, DEFAULT_ALPHAS)))
    p.add_argument("--lambdas", default=",".join(map(str, DEFAULT_LAMBDAS)))
    p.add_argument("--compare-losses", action="store_true",
                   help="iterate softmax, triplet, npair, ranking instead of the grid")

    p = sub.add_parser("grad-check", help="analytic vs finite-difference gradients")
    p.add_argument("--loss", default="all", choices=("all",) + gradcheck.CHECKS)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, help="max relative error (default 1e-5, 1e-4 for encoder)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("mask-apply", help="zero the pixels outside a mask")
    p.add_argument("image")
    p.add_argument("mask")
    p.add_argument("out")

    p = sub.add_parser("gen-synth", help="write a synthetic corpus with manifest")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=training.BENCHMARK_SEED)
    p.add_argument("--identities", type=int, default=training.BENCHMARK_SPEC.identities)
    p.add_argument("--images", type=int, default=training.BENCHMARK_SPEC.images_per_identity)
    p.add_argument("--test-identities", type=int, default=training.BENCHMARK_SPEC.test_identities)
    p.add_argument("--sigma", type=float, default=training.BENCHMARK_SPEC.sigma)
    return parser


def run(args) -> int:
    if args.command == "train":
        cfg = load_config(args)
        cmd_train(cfg, load_data(cfg))
    elif args.command == "eval":
        cfg = load_config(args)
        if not Path(args.checkpoint).is_file():
            raise ConfigError(f"checkpoint {args.checkpoint} does not exist")
        report = cmd_eval(args.checkpoint, load_data(cfg), args.protocol, cfg.use_masks, out_dir(cfg))
        sys.stdout.write(dump_json(report.to_json()))
    elif args.command == "sweep":
        cfg = load_config(args)
        losses = training.LOSSES if args.compare_losses else None
        text = cmd_sweep(cfg, load_data(cfg), _floats(args.alphas), _floats(args.lambdas), losses, args.protocol)
        (out_dir(cfg) / "sweep.csv").write_text(text)
        sys.stdout.write(text)
    elif args.command == "grad-check":
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        reports = cmd_grad_check(args.loss, args.trials, args.tol, args.seed)
        text = dump_json([r.to_json() for r in reports])
        if args.out_dir:
            Path(args.out_dir).mkdir(parents=True, exist_ok=True)
            (Path(args.out_dir) / "gradcheck.json").write_text(text)
        sys.stdout.write(text)
        failed = [r.name for r in reports if not r.passed]
        if failed:
            raise CommandError(f"gradient check failed for: {', '.join(failed)}", EXIT_VERIFY)
    elif args.command == "mask-apply":
        cmd_mask_apply(args.image, args.mask, args.out)
    elif args.command == "gen-synth":
        try:
            spec = replace(
                training.BENCHMARK_SPEC, seed=args.seed, identities=args.identities,
                images_per_identity=args.images, test_identities=args.test_identities, sigma=args.sigma,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        cmd_gen_synth(spec, args.out_dir)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except CommandError as exc:
        print(f"maskrank: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"maskrank: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (dataio.DataError, dataio.FeatureFormatError, CheckpointError, InsufficientDataError,
            EvaluationError, OSError) as exc:
        print(f"maskrank: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
