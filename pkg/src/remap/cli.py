"""Command line front end.

Every subcommand takes the same --config file plus --set overrides, and
prints a reproducibility stanza (config hash, seed, library versions)
to stderr so runs can be traced back to their exact inputs.  Exit codes:
0 ok, 2 bad config or usage, 3 bad data, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import load_model, save_model
from .config import RunConfig, load_config
from .entropy import (collect_pair_distances, init_weights, load_weights,
                      save_weights)
from .errors import EngineError, ConfigError, DataError
from .evaluate import EvalOptions, evaluate, format_report, search_exhaustive
from .grid import build_grid, scale_counts
from .pq import (adc_search, load_codebook, pq_encode, pq_train, read_codes,
                 save_codebook, write_codes)
from .synth import SynthConfig, generate
from .tensorio import TensorCache, load_manifest
from .train import TrainConfig, train, write_trace_csv
from .workflows import (descriptor_matrix, fit_projection, init_model,
                        read_descriptors, write_descriptors)


def _stanza(cfg: RunConfig) -> None:
    print(f"# remap {__version__} | config {cfg.config_hash()} | seed {cfg.seed} | "
          f"python {platform.python_version()} | numpy {np.__version__}",
          file=sys.stderr)


def _load(args) -> RunConfig:
    cfg = load_config(args.config, args.set or [])
    _stanza(cfg)
    return cfg


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(margin=t.margin, learning_rate=t.learning_rate,
                       momentum=t.momentum, weight_decay=t.weight_decay,
                       accumulate=t.accumulate, remine_every=t.remine_every,
                       epochs=t.epochs, seed=cfg.seed)


def cmd_grid_info(args) -> int:
    g = build_grid(args.width, args.height, args.scales)
    counts = scale_counts(g)
    print(f"map {args.width}x{args.height}, scales {args.scales}: "
          f"{len(g.regions)} regions")
    for s, c in enumerate(counts, start=1):
        print(f"  scale {s}: {c}")
    if args.verbose:
        for r in g.regions:
            print(f"  s={r.scale} x=[{r.x0},{r.x1}) y=[{r.y0},{r.y1})")
    return 0


def cmd_fit_entropy(args) -> int:
    cfg = _load(args)
    manifest = load_manifest(args.manifest)
    samples = collect_pair_distances(
        manifest, cfg.layers, cfg.grid_scales,
        pair_budget=cfg.entropy.pair_budget, seed=cfg.seed)
    weights = init_weights(samples, bins=cfg.entropy.bins,
                           epsilon=cfg.entropy.epsilon,
                           min_samples=cfg.entropy.min_samples)
    save_weights(weights, args.out)
    print(f"wrote {len(weights.weights)} region weights to {args.out}")
    return 0


def cmd_fit_whitening(args) -> int:
    cfg = _load(args)
    manifest = load_manifest(args.manifest)
    cache = TensorCache()
    ew = load_weights(args.weights) if args.weights else None
    if cfg.alpha_init == "entropy" and ew is None:
        raise ConfigError(["alpha_init=entropy needs --weights"])
    model = init_model(manifest, cfg.layers, cfg.grid_scales, cfg.method,
                       alpha_init=cfg.alpha_init, entropy_weights=ew,
                       cache=cache)
    fit_projection(model, manifest, cfg.whitening.out_dim, cache=cache,
                   eigen_floor=cfg.whitening.eigen_floor, workers=cfg.workers)
    save_model(model, args.out)
    print(f"model: method {model.method}, layers {model.layer_ids}, "
          f"{model.d_cat} -> {model.d_out} dims; saved to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    manifest = load_manifest(args.manifest)
    model = load_model(args.model)
    out = Path(args.out)
    ckpt_fn = None
    if cfg.train.checkpoint_every:
        def ckpt_fn(window_index, m):
            save_model(m, out.with_suffix(out.suffix + f".w{window_index:05d}"))
    model, trace = train(model, manifest, _train_config(cfg),
                         checkpoint_every=cfg.train.checkpoint_every,
                         checkpoint_fn=ckpt_fn)
    save_model(model, out)
    if args.trace:
        write_trace_csv(trace, args.trace)
    last = trace[-1].mean_loss if trace else float("nan")
    print(f"trained {len(trace)} windows, final mean loss {last:.6f}; "
          f"saved to {out}")
    return 0


def cmd_extract(args) -> int:
    cfg = _load(args)
    manifest = load_manifest(args.manifest)
    model = load_model(args.model)
    ids, X = descriptor_matrix(manifest, model, multiscale=cfg.eval.multiscale,
                               workers=cfg.workers)
    write_descriptors(ids, X, args.out)
    print(f"wrote {len(ids)} descriptors of dim {X.shape[1]} to {args.out}")
    return 0


def cmd_pq_train(args) -> int:
    cfg = _load(args)
    ids, X = read_descriptors(args.descriptors)
    codebook = pq_train(X, m=cfg.pq.m, k=cfg.pq.k, iters=cfg.pq.iters,
                        seed=cfg.seed)
    save_codebook(codebook, args.out)
    print(f"codebook m={codebook.m} k={codebook.k} sub_dim={codebook.sub_dim}; "
          f"saved to {args.out}")
    return 0


def cmd_pq_encode(args) -> int:
    cfg = _load(args)
    ids, X = read_descriptors(args.descriptors)
    codebook = load_codebook(args.codebook)
    codes = pq_encode(codebook, X)
    write_codes(ids, codes, args.out)
    print(f"encoded {len(ids)} descriptors at {codebook.m} bytes each "
          f"to {args.out}")
    return 0


def cmd_search(args) -> int:
    cfg = _load(args)
    ids, X = read_descriptors(args.descriptors)
    if args.query_id not in ids:
        raise DataError(f"query id {args.query_id!r} not in descriptor set")
    query = X[ids.index(args.query_id)]
    if args.codebook:
        codebook = load_codebook(args.codebook)
        code_ids, codes = read_codes(args.codes, codebook.m)
        ranked = [(i, d) for i, d in adc_search(codebook, query, codes, code_ids)
                  if i != args.query_id]
    else:
        ranked = search_exhaustive(ids, X, query, exclude_id=args.query_id)
    ranked = ranked[:args.topk] if args.topk else ranked
    doc = {"query_id": args.query_id,
           "results": [{"image_id": i, "distance": d} for i, d in ranked]}
    text = json.dumps(doc, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    manifest = load_manifest(args.manifest)
    if args.descriptors:
        ids, X = read_descriptors(args.descriptors)
    else:
        model = load_model(args.model)
        ids, X = descriptor_matrix(manifest, model,
                                   multiscale=cfg.eval.multiscale,
                                   workers=cfg.workers)
    options = EvalOptions(search=cfg.eval.search,
                          truncate_dim=cfg.eval.truncate_dim,
                          qe_topk=cfg.eval.qe_topk,
                          multiscale=cfg.eval.multiscale,
                          include_self=cfg.eval.include_self,
                          with_recall4=cfg.eval.recall4,
                          pq_m=cfg.pq.m, pq_k=cfg.pq.k, pq_iters=cfg.pq.iters,
                          seed=cfg.seed)
    report = evaluate(manifest, ids, X, options)
    print(format_report(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True)
                                  + "\n")
    return 0


def cmd_synth_gen(args) -> int:
    cfg = _load(args)
    scfg = SynthConfig(classes=args.classes or cfg.synth.classes,
                       per_class=args.per_class or cfg.synth.per_class,
                       seed=cfg.seed)
    manifest_path = generate(scfg, args.out)
    print(f"generated {scfg.classes * scfg.per_class} images "
          f"({scfg.classes} classes) under {args.out}")
    print(f"manifest: {manifest_path}")
    return 0


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run config file")
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                   help="override a config value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="remap",
        description="Region-entropy descriptor engine for image retrieval")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("grid-info", help="print the ROI grid for a map size")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--scales", type=int, required=True)
    p.add_argument("--verbose", action="store_true", help="list every region")
    p.set_defaults(fn=cmd_grid_info)

    p = sub.add_parser("fit-entropy", help="fit per-region entropy weights")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output weights JSON")
    p.set_defaults(fn=cmd_fit_entropy)

    p = sub.add_parser("fit-whitening",
                       help="initialise a model with a whitening projection")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", help="entropy weights JSON for alpha_init=entropy")
    p.add_argument("--out", required=True, help="output model file")
    p.set_defaults(fn=cmd_fit_whitening)

    p = sub.add_parser("train", help="triplet-train a model")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="input model file")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--trace", help="loss trace CSV path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("extract", help="compute descriptors for a manifest")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output descriptor file")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("pq-train", help="fit a product quantization codebook")
    _add_config_flags(p)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--out", required=True, help="output codebook file")
    p.set_defaults(fn=cmd_pq_train)

    p = sub.add_parser("pq-encode", help="encode descriptors to PQ codes")
    _add_config_flags(p)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True, help="output codes file")
    p.set_defaults(fn=cmd_pq_encode)

    p = sub.add_parser("search", help="rank the database for one query id")
    _add_config_flags(p)
    p.add_argument("--descriptors", required=True)
    p.add_argument("--query-id", required=True)
    p.add_argument("--codebook", help="PQ codebook (with --codes for ADC search)")
    p.add_argument("--codes", help="PQ codes file")
    p.add_argument("--topk", type=int, default=0, help="truncate output (0 = all)")
    p.add_argument("--out", help="ranking JSON path (default stdout)")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("evaluate", help="score retrieval quality on a manifest")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", help="model file (computes descriptors)")
    p.add_argument("--descriptors", help="reuse an extracted descriptor file")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("synth-gen", help="generate a synthetic planted dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int, dest="per_class")
    p.set_defaults(fn=cmd_synth_gen)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "evaluate" and not (args.model or args.descriptors):
        print("error: evaluate needs --model or --descriptors", file=sys.stderr)
        return 2
    if args.command == "search" and bool(args.codebook) != bool(args.codes):
        print("error: --codebook and --codes go together", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
