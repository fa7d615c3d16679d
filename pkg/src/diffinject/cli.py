"""``diffinject`` command line.

Every stage subcommand takes ``--config`` and ``--out`` (the run directory).
On failure the first line printed to stderr is ``error[<category>] <stage>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bias_bench, classifiers, injector
from .config import load_config
from .errors import ConfigError, DiffInjectError, StageError
from .pipeline import Pipeline, load_mask_file, run_experiment, synthesize, write_provenance
from .report import report_run

SUBCOMMANDS = ("gen-data", "train-bias", "extract-topk", "train-diffusion", "inject",
               "train-debiased", "evaluate", "run", "report")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffinject", description="Diffusion-based dataset debiasing pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    def stage(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        sp.add_argument("--out", help="run directory (overrides config 'out')")
        sp.add_argument("--resume", action="store_true", help="reuse finished stage artifacts")
        return sp

    stage("gen-data", "generate the biased train split and unbiased test split")
    stage("train-bias", "train the GCE bias classifier")
    sp = stage("extract-topk", "rank training samples by bias-classifier CE loss")
    sp.add_argument("--k", type=int, help="number of samples to keep (default from config)")
    stage("train-diffusion", "train the P2-weighted denoiser")
    stage("train-debiased", "train the vanilla and the debiased classifier")
    sp = stage("evaluate", "print unbiased-test metrics of the trained classifiers")
    sp.add_argument("--model", choices=("bias", "vanilla", "debiased"), default="debiased")
    stage("run", "run every stage and write metrics.json / record.json")

    sp = sub.add_parser("inject", help="inject chosen contents into chosen originals")
    sp.add_argument("--config")
    sp.add_argument("--run", required=True, help="run directory holding trained stages")
    sp.add_argument("--content", required=True, help="comma-separated content sample ids")
    sp.add_argument("--originals", required=True, help="comma-separated original sample ids")
    sp.add_argument("--gamma", type=float, default=None)
    sp.add_argument("--mask", default=None, help="mask file at bottleneck resolution, or 'none'")
    sp.add_argument("--out", required=True, help="directory for images and provenance.csv")

    sp = sub.add_parser("report", help="tables and sample grids from finished runs")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rows", type=int, default=8)
    return p


def _ids(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _pipeline(args) -> Pipeline:
    cfg = load_config(args.config)
    if getattr(args, "k", None) is not None:
        cfg.pipeline.K = args.k
        cfg.validate()
    return Pipeline(cfg, out=args.out or cfg.out)


def _inject(args) -> None:
    pipe = Pipeline(load_config(args.config), out=args.run)
    for dep in ("gen-data", "train-diffusion"):
        if not pipe.done(dep):
            raise StageError("inject", ConfigError(f"upstream stage {dep!r} has not been run in {args.run}"))
    contents, originals = _ids(args.content), _ids(args.originals)
    if len(contents) == 1:
        contents = contents * len(originals)
    if len(contents) != len(originals):
        raise ConfigError("--content must list one id or as many ids as --originals")
    d_orig = pipe.train_set()
    denoiser, schedule, _ = pipe.denoiser()
    c = pipe.cfg.injection
    gamma = c.gamma_inject if args.gamma is None else args.gamma
    mask_mode = c.mask if args.mask is None else args.mask
    if mask_mode not in ("auto", "none", "foreground"):
        mask_mode = load_mask_file(mask_mode, denoiser.bottleneck_shape[1])
    t_edit = c.t_edit
    if t_edit is None and pipe.done("inject"):
        t_edit = json.loads((pipe.dir("inject") / "calibration.json").read_text())["t_edit"]
    cfg = injector.InjectionConfig(gamma, t_edit, c.t_boost, None, c.eta_boost, c.num_steps)
    seed = pipe.cfg.section_seed("injection")
    pairs = list(zip(contents, originals))
    images = synthesize(denoiser, schedule, d_orig, pairs, cfg, mask_mode, pipe.cfg.data.bias_kind,
                        seed, c.batch_size, c.workers)
    resolved = cfg.resolved(schedule)
    labels = d_orig.class_labels[d_orig.index_of(contents)]
    ids = np.arange(len(pairs))
    syn = bias_bench.Dataset(np.round(images * 255) / 255, labels, None, None, ids, None, "synthetic")
    out = Path(args.out)
    bias_bench.save_dataset(syn, out)
    write_provenance(out / "provenance.csv", [
        {"sample_id": int(i), "content_id": co, "original_id": o, "gamma": gamma,
         "t_edit": resolved.t_edit, "t_boost": resolved.t_boost, "seed": seed, "assigned_label": int(l)}
        for i, (co, o), l in zip(ids, pairs, labels)])
    print(f"wrote {len(pairs)} synthetic images to {out}")


def _evaluate(args) -> None:
    pipe = _pipeline(args)
    stage = {"bias": "train-bias", "vanilla": "train-vanilla", "debiased": "train-debiased"}[args.model]
    for dep in ("gen-data", stage):
        if not pipe.done(dep):
            raise StageError("evaluate", ConfigError(f"upstream stage {dep!r} has not been run"))
    model, _ = classifiers.load_classifier(pipe.dir(stage) / "model.pt")
    print(json.dumps(classifiers.evaluate(model, pipe.test_set()), indent=2, sort_keys=True))


def dispatch(argv=None) -> int:
    parser = _parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            pipe_cfg = load_config(args.config)
            record = run_experiment(pipe_cfg, out=args.out or pipe_cfg.out, resume=args.resume)
            print(json.dumps(record["metrics"], indent=2, sort_keys=True))
        elif args.command == "report":
            print(json.dumps(report_run(args.run, args.out, grid_rows=args.rows), sort_keys=True))
        elif args.command == "inject":
            _inject(args)
        elif args.command == "evaluate":
            _evaluate(args)
        else:
            pipe = _pipeline(args)
            stages = ["train-vanilla", "train-debiased"] if args.command == "train-debiased" else [args.command]
            for s in stages:
                path = pipe.run_stage(s, resume=args.resume, upstream=False)
                print(path)
    except StageError as exc:
        print(f"error[{getattr(exc.cause, 'category', 'stage')}] {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    except DiffInjectError as exc:
        print(f"error[{exc.category}] {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())
