"""Command-line entry point.

Subcommands: gen-synth, train, eval, explain, export-emb. Every RunConfig key
is a flag (``--lambda-local 0``); ``--config FILE`` supplies defaults that
flags override. The resolved configuration is written next to the outputs.

Exit codes: 0 ok, 2 config, 3 IO/format, 4 validation/protocol, 5 divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys

from . import explain, synth
from .config import RunConfig
from .corpus import load_dataset
from .errors import ConfigError, DocZSLError
from .evaluate import (baseline_avg_wordvec, calibrate_gamma, evaluate, export_embeddings, proxy_classes,
                       write_embeddings, write_report)
from .train import fit, load_checkpoint, save_checkpoint, write_log
from .wordvec import parse_wordvec_file

log = logging.getLogger("doczsl")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PROTOCOL, EXIT_DIVERGED = 0, 2, 3, 4, 5

CHECKPOINT_FILE = "checkpoint.jsonl"
LOG_FILE = "train_log.jsonl"
REPORT_FILE = "eval_report.jsonl"
SUMMARY_FILE = "eval_summary.txt"
CALIBRATION_FILE = "calibration.jsonl"
EMBEDDINGS_FILE = "embeddings.jsonl"
ATTRIBUTION_FILE = "attributions.jsonl"


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _resolve(args):
    overrides = {k: v for k, v in vars(args).items() if k in RunConfig.keys() and v is not None}
    cfg = RunConfig.from_sources(args.config, overrides)
    if not cfg.out:
        raise ConfigError("--out is required")
    os.makedirs(cfg.out, exist_ok=True)
    cfg.write(cfg.out)
    return cfg


def _dataset(cfg):
    wv = parse_wordvec_file(cfg.data_path("wordvecs"))
    ds = load_dataset(cfg.data_path("documents"), cfg.data_path("features"), cfg.data_path("split"), wv,
                      max_words=cfg.max_words, oov_policy=cfg.oov_policy)
    return ds, wv


def _load_params(cfg, ds):
    if not cfg.checkpoint:
        raise ConfigError("--checkpoint is required")
    ckpt = load_checkpoint(cfg.checkpoint)
    if ckpt.params.config.r0 != ds.r0:
        raise ConfigError(f"checkpoint expects r0={ckpt.params.config.r0}, data has r0={ds.r0}")
    return ckpt.params


def cmd_gen_synth(args):
    cfg = _resolve(args)
    paths, data = synth.generate(cfg.synth_config(), cfg.out)
    paths["config"] = os.path.join(cfg.out, "config.txt")
    for kind in sorted(paths):
        print(f"{_sha256(paths[kind])}  {paths[kind]}")
    print("counts: " + " ".join(f"{k}={v}" for k, v in sorted(data.counts.items())))
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve(args)
    ds, _ = _dataset(cfg)
    result = fit(ds, cfg.train_config())
    ckpt = os.path.join(cfg.out, CHECKPOINT_FILE)
    save_checkpoint(result.params, ckpt, state=result.state,
                    extra={"best_epoch": result.best_epoch, "best_heldout_h": result.best_h,
                           "proxy_classes": result.proxy, "lambda_local": cfg.lambda_local})
    write_log(result.log, os.path.join(cfg.out, LOG_FILE))
    print(f"best epoch {result.best_epoch} held-out H {result.best_h:.4f}")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args):
    cfg = _resolve(args)
    ds, _ = _dataset(cfg)
    params = _load_params(cfg, ds)
    gamma = cfg.gamma_value()
    if gamma is None:
        proxy = proxy_classes(ds.seen_classes, cfg.proxy_classes, cfg.seed)
        cal = calibrate_gamma(params, ds, mode=cfg.calibration, proxy=proxy, steps=cfg.gamma_steps)
        gamma = cal.gamma
        with open(os.path.join(cfg.out, CALIBRATION_FILE), "w", encoding="utf-8") as fh:
            for g, u, s, h in cal.curve:
                fh.write(f'{{"gamma":{g!r},"u":{u!r},"s":{s!r},"h":{h!r}}}\n')
    report = evaluate(params, ds, gamma)
    write_report(report, os.path.join(cfg.out, REPORT_FILE), os.path.join(cfg.out, SUMMARY_FILE))
    print(report.summary(), end="")
    return EXIT_OK


def _find_image(ds, image_id):
    if image_id not in ds:
        raise ConfigError(f"unknown image id {image_id!r}")
    return ds.record(image_id)


def _find_doc(ds, class_id):
    if class_id not in ds.documents:
        raise ConfigError(f"unknown class id {class_id!r}")
    return ds.documents[class_id]


def cmd_explain(args):
    cfg = _resolve(args)
    ds, _ = _dataset(cfg)
    params = _load_params(cfg, ds)
    out_records, svg = [], None
    if args.what == "top-words":
        if not args.class_id:
            raise ConfigError("top-words needs --class")
        out_records.append(explain.top_attended_words(_find_doc(ds, args.class_id), params, args.k or 8))
    else:
        if not args.image:
            raise ConfigError(f"{args.what} needs --image")
        rec = _find_image(ds, args.image)
        doc = _find_doc(ds, args.class_id or rec.class_id)
        if args.what == "patch-to-word":
            out_records.append(explain.patch_to_word(rec, doc, params, args.patch, args.k or 3))
        else:
            if args.word is not None:
                if args.word not in doc.tokens:
                    raise ConfigError(f"word {args.word!r} not in document for {doc.class_id!r}")
                position = doc.tokens.index(args.word)
            else:
                position = args.position
            attribution = explain.word_to_image(rec, doc, params, position)
            out_records.append(attribution)
            svg = os.path.join(cfg.out, f"word_to_image_{rec.image_id}_{position}.svg")
            explain.render_heatmap_svg(attribution.payload["grid"], svg,
                                       title=f"{doc.tokens[position]} -> {rec.image_id}")
    path = os.path.join(cfg.out, ATTRIBUTION_FILE)
    explain.write_attributions(out_records, path)
    for r in out_records:
        if "words" in r.payload:
            for token, weight in r.payload["words"]:
                print(f"{token}\t{weight:.6f}")
        else:
            for row in r.payload["grid"]:
                print(" ".join(f"{x:.3f}" for x in row))
    print(f"attributions {path}" + (f"\nsvg {svg}" if svg else ""))
    return EXIT_OK


def cmd_export_emb(args):
    cfg = _resolve(args)
    ds, wv = _dataset(cfg)
    path = os.path.join(cfg.out, EMBEDDINGS_FILE)
    if args.baseline == "avg-wordvec":
        write_embeddings(baseline_avg_wordvec(ds.documents, wv), path)
    elif args.baseline:
        raise ConfigError(f"unknown baseline {args.baseline!r}")
    else:
        export_embeddings(_load_params(cfg, ds), ds.documents, path)
    print(f"{_sha256(path)}  {path}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="doczsl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="key=value file; flags override it")
        defaults = RunConfig()
        for key in RunConfig.keys():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=key.upper(),
                           help=f"(default: {getattr(defaults, key)!r})")
        return p

    p = add_config_flags(sub.add_parser("gen-synth", help="write a synthetic dataset"))
    p.set_defaults(func=cmd_gen_synth)
    p = add_config_flags(sub.add_parser("train", help="train and checkpoint a model"))
    p.set_defaults(func=cmd_train)
    p = add_config_flags(sub.add_parser("eval", help="ZSL / GZSL evaluation of a checkpoint"))
    p.set_defaults(func=cmd_eval)
    p = add_config_flags(sub.add_parser("explain", help="attention exports"))
    p.add_argument("what", choices=["top-words", "patch-to-word", "word-to-image"])
    p.add_argument("--class", dest="class_id")
    p.add_argument("--image")
    p.add_argument("--word")
    p.add_argument("--position", type=int, default=0)
    p.add_argument("--patch", type=int, default=0)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_explain)
    p = add_config_flags(sub.add_parser("export-emb", help="export per-class document embeddings"))
    p.add_argument("--baseline", choices=["avg-wordvec"])
    p.set_defaults(func=cmd_export_emb)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DocZSLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, OSError) else EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
