"""``cmalign`` command line: gen, train, eval, match, gradcheck.

Results go to stdout as JSON (TSV for the gradcheck table); diagnostics go to
stderr. Exit codes: 0 ok, 2 configuration error, 3 I/O or checkpoint/dataset
mismatch, 4 non-finite loss, 5 gradient check failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional


from . import cmft
from .config import Config, ConfigError, load
from .data import DatasetError, SyntheticConfig, generate_synthetic_dataset, load_directory_dataset
from .tensor_field import DimensionError

log = logging.getLogger("cmalign")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_GRADCHECK = 0, 2, 3, 4, 5
RESOLVED_CONFIG = "resolved-config.txt"
SEED_KEYS = ("data.seed", "train.seed", "eval.gallery_seed")


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmalign", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, applied after the file (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", parents=[common], help="render a synthetic two-modality dataset")
    gen.add_argument("--overwrite", action="store_true", help="replace an existing dataset in --out")
    sub.add_parser("train", parents=[common], help="train from scratch on data.root")
    ev = sub.add_parser("eval", parents=[common], help="cross-modal retrieval metrics of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    match = sub.add_parser("match", parents=[common], help="export masks, co-attention and top-k matches")
    match.add_argument("--checkpoint", required=True)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every primitive")
    return parser


def resolve_config(args) -> Config:
    cfg = load(args.config, args.overrides)
    if args.seed is not None:
        for key in SEED_KEYS:
            cfg.set(key, str(args.seed))
    return cfg


def write_resolved(cfg: Config, out: Optional[str]) -> None:
    if not out:
        return
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    (path / RESOLVED_CONFIG).write_text(cfg.dumps())


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


# -- subcommands ------------------------------------------------------------------------

def run_gen(args, cfg: Config) -> int:
    cfg.require(["data.n_identities", "data.images_per_identity"])
    d = cfg.section("data")
    root = args.out or d["root"]
    if not root:
        raise ConfigError("missing required key data.root (or pass --out)")
    try:
        synth = SyntheticConfig(d["n_identities"], d["images_per_identity"], d["height"], d["width"], d["seed"],
                                d["max_shift"], d["scale_jitter"], d["occlusion"], d["occlusion_prob"],
                                d["clutter"], d["noise"], d["identity_offset"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        summary = generate_synthetic_dataset(root, synth, overwrite=args.overwrite)
    except DatasetError as exc:
        raise CommandError(EXIT_IO, str(exc)) from exc
    write_resolved(cfg, root)
    emit({"root": str(root), **summary})
    return EXIT_OK


def run_train(args, cfg: Config) -> int:
    from .train import NonFiniteLossError, TrainConfig, fit

    cfg.require(["data.root"])
    if not args.out:
        raise ConfigError("train needs --out")
    try:
        tcfg = TrainConfig.from_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    dataset = load_directory_dataset(cfg["data.root"])
    if dataset.image_shape != (tcfg.model.height, tcfg.model.width, tcfg.model.channels):
        tcfg = replace(tcfg, model=replace(tcfg.model, height=dataset.image_shape[0],
                                           width=dataset.image_shape[1]))
        log.info("input size taken from the dataset: %s", dataset.image_shape)
    write_resolved(cfg, args.out)
    try:
        _, records = fit(dataset, tcfg, args.out)
    except NonFiniteLossError as exc:
        raise CommandError(EXIT_NONFINITE, str(exc)) from exc
    final = records[-1] if records else {"epoch": -1, "step": -1}
    emit({"epochs": tcfg.epochs, "steps": len(records), "checkpoint": str(Path(args.out) / "checkpoint"),
          **{k: final.get(k) for k in ("L_ID", "L_IC", "L_DT", "L_total")}})
    return EXIT_OK


def _load_model(path):
    from .train import load_checkpoint

    try:
        return load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise CommandError(EXIT_IO, f"checkpoint {path}: {exc}") from exc


def run_eval(args, cfg: Config) -> int:
    from .evaluate import cross_modal_eval

    root = cfg["eval.root"] or cfg["data.root"]
    if not root:
        raise ConfigError("missing required key eval.root (or data.root)")
    query = cfg["eval.query_modality"]
    if query not in ("A", "B"):
        raise ConfigError(f"eval.query_modality must be A or B, got {query!r}")
    model = _load_model(args.checkpoint)
    dataset = load_directory_dataset(root)
    s = model.extractor.shape
    if dataset.image_shape != (s.height, s.width, s.channels):
        raise CommandError(EXIT_IO, f"dataset images are {dataset.image_shape}, checkpoint expects "
                                    f"{(s.height, s.width, s.channels)}")
    write_resolved(cfg, args.out)
    res = cross_modal_eval(model.extractor, dataset, query, cfg["eval.trials"], cfg["eval.gallery_seed"],
                           cfg["loss.gem_p"])
    result = {"query_modality": query, "gallery_modality": "A" if query == "B" else "B", **res.to_json()}
    if args.out:
        (Path(args.out) / "metrics.json").write_text(json.dumps(result, sort_keys=True) + "\n")
    emit(result)
    return EXIT_OK


def run_match(args, cfg: Config) -> int:
    from .evaluate import export_artifacts

    cfg.require(["match.image_a", "match.image_b"])
    if not args.out:
        raise ConfigError("match needs --out")
    if cfg["match.k"] < 1:
        raise ConfigError("match.k must be >= 1")
    model = _load_model(args.checkpoint)
    s = model.extractor.shape
    images = []
    for key in ("match.image_a", "match.image_b"):
        img = cmft.load(cfg[key])
        if img.shape != (s.height, s.width, s.channels):
            raise CommandError(EXIT_IO, f"{cfg[key]}: shape {img.shape}, checkpoint expects "
                                        f"{(s.height, s.width, s.channels)}")
        images.append(img)
    write_resolved(cfg, args.out)
    files = export_artifacts(model.extractor, images[0], images[1], args.out, cfg["match.k"], cfg["loss.beta"])
    emit(files)
    return EXIT_OK


def run_gradcheck(args, cfg: Config) -> int:
    from .gradcheck import run_suite

    g = cfg.section("gradcheck")
    write_resolved(cfg, args.out)
    try:
        errors = run_suite(g["ops"], g["seeds"], g["step"])
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from exc
    failing = [name for name, err in errors.items() if not err < g["tol"]]
    lines = ["op\tmax_rel_error\tstatus"]
    lines += [f"{name}\t{err:.3e}\t{'FAIL' if name in failing else 'ok'}" for name, err in errors.items()]
    sys.stdout.write("\n".join(lines) + "\n")
    if failing:
        print(f"gradient check above tol {g['tol']:g}: {', '.join(failing)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


COMMANDS = {"gen": run_gen, "train": run_train, "eval": run_eval, "match": run_match, "gradcheck": run_gradcheck}


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS threads at ``CMALIGN_THREADS`` when set."""
    value = os.environ.get("CMALIGN_THREADS", "").strip()
    if not value:
        yield
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"CMALIGN_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        cfg = resolve_config(args)
        with thread_limit():
            return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, DatasetError, cmft.CMFTError, DimensionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
