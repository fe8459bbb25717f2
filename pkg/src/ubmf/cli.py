"""Command-line entry point.

Subcommands: gen-data, perturb, train-ssl, fit-prior, train-filter,
evaluate, report, run.  Stage commands share one JSON config (defaults
built in), overridable with repeated ``--set key.path=value`` flags.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import datagen, perturb, pipeline
from .errors import UBMFError
from .rng import rng_for


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides",
                   help="override a config entry, e.g. --set ssl.iters=50")
    p.add_argument("--out-dir", default=None, help="run directory override")
    p.add_argument("--seed", type=int, default=None, help="seed override")


def _load_cfg(args) -> dict:
    overrides = list(args.overrides)
    if args.out_dir is not None:
        overrides.append(f"out_dir={args.out_dir}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return pipeline.load_config(args.config, overrides)


def _cmd_gen_data(args) -> int:
    if args.manifest:
        with open(args.manifest, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    else:
        manifest = datagen.default_manifest()
    ds = datagen.generate(manifest, seed=args.seed)
    datagen.save_dataset(args.out, ds)
    print(f"wrote {ds.samples.shape[0]} samples "
          f"({ds.samples.shape[1]} channel(s) x {ds.samples.shape[2]}) "
          f"to {args.out}")
    return 0


def _cmd_perturb(args) -> int:
    ds = datagen.load_dataset(args.data)
    x = ds.samples[args.index].astype(np.float64)
    rng = rng_for(args.seed, "cli-perturb", args.kind)
    if args.kind == "weak":
        out = perturb.weak_view_arr(x, rng)
    elif args.kind == "strong":
        out = perturb.strong_view_arr(x, rng)
    else:
        spec = perturb.PerturbSpec(
            kind=args.kind,
            strength=perturb.expected_strength(args.kind, {}),
            params={}, seed=args.seed)
        from .signal import Signal
        sig = Signal(values=x, sample_rate=ds.manifest["sample_rate"])
        out = perturb.apply_spec(spec, sig).values
    np.save(args.out, out)
    print(f"perturbed sample {args.index} with '{args.kind}' -> {args.out}")
    return 0


def _run_stages(args, stages) -> int:
    cfg = _load_cfg(args)
    pipeline.run_pipeline(cfg, stages=stages,
                          resume=getattr(args, "resume", False))
    print(f"completed stage(s) {', '.join(stages)} in {cfg['out_dir']}")
    return 0


def _cmd_train_ssl(args) -> int:
    return _run_stages(args, ["data", "phase1", "ssl"])


def _cmd_fit_prior(args) -> int:
    return _run_stages(args, ["prior"])


def _cmd_train_filter(args) -> int:
    return _run_stages(args, ["filter"])


def _cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    metrics = pipeline.run_pipeline(cfg, stages=["eval"],
                                    resume=getattr(args, "resume", False))
    ev = metrics["eval"]["ubmf"]
    print(f"mean standardized accuracy over {ev['n_tasks']} episodes: "
          f"{ev['mean_std_acc']} ± {ev['ci95']}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_cfg(args)
    pipeline.run_pipeline(cfg, resume=args.resume)
    print(pipeline.report(cfg["out_dir"]))
    return 0


def _cmd_report(args) -> int:
    print(pipeline.report(args.run_dir))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ubmf",
        description="Uncertainty-aware few-shot fault diagnosis pipeline "
                    "on synthetic vibration data")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--manifest", default=None, help="manifest JSON path")
    g.add_argument("--out", required=True, help="output .ubmf path")
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(fn=_cmd_gen_data)

    pe = sub.add_parser("perturb", help="apply a perturbation to one sample")
    pe.add_argument("--data", required=True, help="dataset .ubmf path")
    pe.add_argument("--index", type=int, default=0)
    pe.add_argument("--kind", default="weak",
                    help="weak | strong | a named operator (jitter, "
                         "uniform_scale, magnitude_warp, time_warp, "
                         "slice_shuffle, random_mask, rotate)")
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--out", required=True, help="output .npy path")
    pe.set_defaults(fn=_cmd_perturb)

    for name, fn, needs_resume in (
            ("train-ssl", _cmd_train_ssl, True),
            ("fit-prior", _cmd_fit_prior, True),
            ("train-filter", _cmd_train_filter, True),
            ("evaluate", _cmd_evaluate, True)):
        sp = sub.add_parser(name)
        _add_config_args(sp)
        if needs_resume:
            sp.add_argument("--resume", action="store_true",
                            help="reuse existing stage artifacts")
        sp.set_defaults(fn=fn)

    r = sub.add_parser("run", help="full pipeline plus summary report")
    _add_config_args(r)
    r.add_argument("--resume", action="store_true",
                   help="reuse existing stage artifacts")
    r.set_defaults(fn=_cmd_run)

    rp = sub.add_parser("report", help="summarize a finished run directory")
    rp.add_argument("run_dir")
    rp.set_defaults(fn=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except pipeline.StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except UBMFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
