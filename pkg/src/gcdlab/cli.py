"""Command-line entry point.

Subcommands: synth, extract, train-embedder, train-diffusion, intervene,
sample, segment-train, segment-eval, evaluate, report, run. Exit codes:
0 success, 2 config error, 3 numeric failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import rng as rngmod
from .checkpoint import load_cascade, load_segmenter, save_byol, save_cascade, save_segmenter
from .diffusion import init_cascade, train_stage
from .downstream import SegmenterConfig, train_segmenter
from .embed import ByolConfig, byol_train
from .errors import ConfigError, GcdlabError, MissingArtifactError, NumericError
from .interventions import InterventionSpec
from .maskgraph import load_graph
from .pipeline import (
    ExperimentConfig,
    _json_bytes,
    _load_dir_pairs,
    _training_arrays,
    collect_crops,
    combine_reports,
    evaluate_dirs,
    extract_graphs,
    run_interventions,
    run_pipeline,
    sample_graphs_to_dir,
    segment_eval,
)
from .synthdata import SynthConfig, build_dataset

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_MISSING = 4


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, required=True, help="explicit RNG seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcdlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a paired image/mask dataset")
    p.add_argument("--config", type=Path, help="dataset config JSON (optional)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-train", type=int, default=64)
    p.add_argument("--n-test", type=int, default=16)
    _add_seed(p)

    p = sub.add_parser("extract", help="build visibility graphs from masks")
    p.add_argument("--masks", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=("extracted", "image", "manual"), default="extracted")
    p.add_argument("--embedder", type=Path, help="embedder checkpoint (extracted mode)")

    p = sub.add_parser("train-embedder", help="train the object embedder")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=400)
    _add_seed(p)

    p = sub.add_parser("train-diffusion", help="train one cascade stage")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--graphs", type=Path, required=True)
    p.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    p.add_argument("--ckpt", type=Path, required=True,
                   help="cascade bundle; created by stage 0, updated by later stages")
    p.add_argument("--config", type=Path, help="experiment config JSON (optional)")
    p.add_argument("--steps", type=int, help="override stage training steps")
    _add_seed(p)

    p = sub.add_parser("intervene", help="apply graph interventions")
    p.add_argument("--graphs", type=Path, required=True)
    p.add_argument("--kind", required=True,
                   choices=("remove", "change", "cutpaste", "cutpaste-short", "interp"))
    p.add_argument("--node", type=int)
    p.add_argument("--to-class", type=int)
    p.add_argument("--t", type=float)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    _add_seed(p)

    p = sub.add_parser("sample", help="sample image/mask pairs from graphs")
    p.add_argument("--graphs", type=Path, required=True, help="dir or single .graph.json")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--gamma", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", type=Path, required=True)
    _add_seed(p)

    p = sub.add_parser("segment-train", help="train the downstream segmenter")
    p.add_argument("--data", type=Path, required=True, help="dir of .ppm/.pgm pairs")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=2500)
    _add_seed(p)

    p = sub.add_parser("segment-eval", help="evaluate a segmenter with Dice/AJI")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="IP/IR/FID between real and generated dirs")
    p.add_argument("--real", type=Path, required=True)
    p.add_argument("--gen", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True, help="embedder checkpoint")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--k", type=int, default=3)

    p = sub.add_parser("report", help="merge metric reports into one table")
    p.add_argument("--inputs", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run", help="run the full pipeline from a config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    return parser


_KIND_MAP = {
    "remove": "remove",
    "change": "change_class",
    "cutpaste": "cut_paste",
    "cutpaste-short": "cut_paste_short",
    "interp": "interpolate",
}


def _cmd_synth(args) -> None:
    if args.config:
        try:
            doc = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"dataset config is not valid JSON: {exc}")
        cfg = ExperimentConfig.from_dict({"dataset": doc}).dataset
    else:
        cfg = SynthConfig()
    build_dataset(cfg, args.n_train, args.n_test, args.seed, args.out)
    print(f"wrote dataset to {args.out}")


def _cmd_extract(args) -> None:
    ids = extract_graphs(args.masks, args.mode, args.embedder, args.out)
    print(f"extracted {len(ids)} graphs to {args.out}")


def _cmd_train_embedder(args) -> None:
    crops = collect_crops(args.data)
    cfg = ByolConfig(steps=args.steps)
    params, history = byol_train(crops, cfg, rngmod.derive_key(args.seed, "byol"))
    save_byol(args.out, params)
    print(f"trained embedder ({len(history)} steps, "
          f"loss {history[0]:.3f} -> {history[-1]:.3f}) -> {args.out}")


def _cmd_train_diffusion(args) -> None:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    cfg.seed = args.seed
    stacks, graphs, cond = _training_arrays(cfg, args.data, args.graphs)
    if args.stage == 0 or not args.ckpt.exists():
        if args.stage != 0 and not args.ckpt.exists():
            raise MissingArtifactError(
                f"{args.ckpt} not found; train stage 0 first"
            )
        cascade = init_cascade(cfg.diffusion, cfg.encoder, cfg.features,
                               rngmod.derive_key(args.seed, "cascade-init"))
    else:
        cascade = load_cascade(args.ckpt)
    history = train_stage(
        cascade, args.stage, stacks, cond,
        rngmod.derive_key(args.seed, "train", args.stage), steps=args.steps,
    )
    save_cascade(args.ckpt, cascade)
    print(f"stage {args.stage}: loss {history[0]:.3f} -> {history[-1]:.3f} -> {args.ckpt}")


def _cmd_intervene(args) -> None:
    graphs = [load_graph(p) for p in sorted(Path(args.graphs).glob("*.graph.json"))]
    graphs = [g for g in graphs if g.n_nodes > 0]
    if not graphs:
        raise MissingArtifactError(f"no graphs under {args.graphs}; run extract")
    spec = InterventionSpec(
        kind=_KIND_MAP[args.kind], node=args.node, to_class=args.to_class,
        t=args.t, count=args.count,
    )
    paths = run_interventions(graphs, [spec], args.seed, args.out)
    print(f"wrote {len(paths)} intervened graphs to {args.out}")


def _cmd_sample(args) -> None:
    cascade = load_cascade(args.ckpt)
    src = Path(args.graphs)
    if src.is_dir():
        pool = [load_graph(p) for p in sorted(src.glob("*.graph.json"))]
    else:
        pool = [load_graph(src)]
    if not pool:
        raise MissingArtifactError(f"no graphs at {src}")
    picks = [pool[i % len(pool)] for i in range(args.n)]
    sample_graphs_to_dir(cascade, picks, args.out, args.seed,
                         gamma=args.gamma, steps=args.steps)
    print(f"sampled {args.n} pairs to {args.out}")


def _cmd_segment_train(args) -> None:
    pairs = _load_dir_pairs(args.data)
    cfg = SegmenterConfig(steps=args.steps)
    model, history = train_segmenter(pairs, cfg, rngmod.derive_key(args.seed, "seg"))
    save_segmenter(args.out, model)
    print(f"trained segmenter (loss {history[0]:.3f} -> {history[-1]:.3f}) -> {args.out}")


def _cmd_segment_eval(args) -> None:
    model = load_segmenter(args.ckpt)
    pairs = _load_dir_pairs(args.test)
    report = segment_eval(model, pairs)
    Path(args.out).write_bytes(_json_bytes(report.to_dict()))
    print(json.dumps(report.to_dict()))


def _cmd_evaluate(args) -> None:
    report = evaluate_dirs(args.real, args.gen, args.ckpt, k=args.k)
    Path(args.out).write_bytes(_json_bytes(report.to_dict()))
    print(json.dumps(report.to_dict()))


def _cmd_report(args) -> None:
    table = combine_reports(args.inputs, args.out)
    print(f"combined {len(table['rows'])} rows -> {args.out}")


def _cmd_run(args) -> None:
    cfg = ExperimentConfig.from_json(args.config)
    table = run_pipeline(cfg, args.out)
    print(json.dumps(table))


_COMMANDS = {
    "synth": _cmd_synth,
    "extract": _cmd_extract,
    "train-embedder": _cmd_train_embedder,
    "train-diffusion": _cmd_train_diffusion,
    "intervene": _cmd_intervene,
    "sample": _cmd_sample,
    "segment-train": _cmd_segment_train,
    "segment-eval": _cmd_segment_eval,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "run": _cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except GcdlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
