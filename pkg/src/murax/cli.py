"""``murax`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import cam as cam_mod
from . import checkpoint
from .config import ConfigKeyError, RunConfig, resolve
from .dataset import DatasetIndex, check_disjoint, load_csv_index, scan_tree
from .imaging import read_png, write_png
from .metrics import evaluate, predict_views, study_predictions
from .model import build, feature_forward_logits
from .pipeline import ImagePipeline
from .preprocess import normalize, preprocess_image

log = logging.getLogger("murax")


def _global_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", metavar="PATH", help="YAML or JSON file with config sections")
    g.add_argument("--profile", choices=("desk", "full"), help="default set for model size and input side")
    g.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable")
    g.add_argument("--threads", type=int, default=1, metavar="N",
                   help="cap on BLAS threads and data-loading workers (1 = fully serial)")
    g.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_options()
    parser = argparse.ArgumentParser(prog="murax", description="Radiograph abnormality classifier toolkit")
    parser.add_argument("--version", action="version", version=f"murax {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")

    p = sub.add_parser("preprocess", parents=[common], help="write ROI crops for a split")
    p.add_argument("--data", help="dataset root (default: data.root)")
    p.add_argument("--split", default="train", choices=("train", "valid"))
    p.add_argument("--out", required=True, help="directory for cropped PNGs and rois.json")

    for name, text in (("train", "train one model"), ("train-ensemble", "train several models with derived seeds")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", help="dataset root (default: data.root)")
        p.add_argument("--out", required=True, help="run directory for checkpoints and history")
        if name == "train-ensemble":
            p.add_argument("--n", type=int, help="number of members (default: train.n_models)")

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints (ensembled) on a split")
    p.add_argument("--models", nargs="+", required=True, metavar="CKPT")
    p.add_argument("--data", help="dataset root (default: data.root)")
    p.add_argument("--split", default="valid", choices=("train", "valid"))
    p.add_argument("--report", required=True, help="output JSON report path")

    p = sub.add_parser("predict", parents=[common], help="study or image probabilities")
    p.add_argument("--models", nargs="+", required=True, metavar="CKPT")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", nargs="+", metavar="PNG", help="views of a single study")
    src.add_argument("--data", help="dataset root; predicts every study of --split")
    p.add_argument("--split", default="valid", choices=("train", "valid"))
    p.add_argument("--out", required=True, help="output JSON path")

    p = sub.add_parser("heatmap", parents=[common], help="class-activation overlay for one image")
    p.add_argument("--model", required=True, metavar="CKPT")
    p.add_argument("--image", required=True, metavar="PNG")
    p.add_argument("--out", required=True, metavar="PNG")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds (0..N-1)")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


# ---------------------------------------------------------------- helpers


def load_split(cfg: RunConfig, root: str, split: str) -> DatasetIndex:
    verify = cfg.get("data", "verify_images")
    if cfg.get("data", "source") == "csv":
        return load_csv_index(
            os.path.join(root, f"{split}_image_paths.csv"),
            os.path.join(root, f"{split}_labeled_studies.csv"),
            verify_images=verify,
        )
    return scan_tree(root, split, verify_images=verify)


def make_pipeline(cfg: RunConfig, seed: Optional[int] = None) -> ImagePipeline:
    seed = cfg.get("train", "seed") if seed is None else seed
    return ImagePipeline(cfg.preprocess_config(), cfg.augment_config(), seed)


def _root(cfg: RunConfig, args) -> str:
    return getattr(args, "data", None) or cfg.get("data", "root")


def _load_models(paths, cfg: RunConfig):
    models, hashes = [], []
    for p in paths:
        m, _ = checkpoint.load(p, precision=cfg.precision)
        models.append(m)
        hashes.append(checkpoint.file_hash(p))
    return models, hashes


def _write_json(path: str, data) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands


def cmd_gen_synth(cfg, args) -> int:
    from .synth import generate

    manifest = generate(cfg.synth_spec(), args.out, overwrite=args.overwrite)
    for split, c in sorted(manifest["counts"].items()):
        log.info("%s: %d studies (%d positive), %d views", split, c["studies"], c["positive"], c["views"])
    print(os.path.abspath(args.out))
    return 0


def cmd_preprocess(cfg, args) -> int:
    index = load_split(cfg, _root(cfg, args), args.split)
    pcfg = cfg.preprocess_config()
    root = os.path.abspath(_root(cfg, args))
    rois = {}
    for path, _, _ in index.views():
        crop, box, _ = preprocess_image(read_png(path), pcfg)
        rel = os.path.relpath(os.path.abspath(path), root)
        write_png(os.path.join(args.out, rel), crop)
        rois[rel] = [box.x0, box.y0, box.x1, box.y1]
    _write_json(os.path.join(args.out, "rois.json"), rois)
    print(os.path.abspath(args.out))
    return 0


def _train_data(cfg, args):
    root = _root(cfg, args)
    train_ix = load_split(cfg, root, "train")
    try:
        valid_ix = load_split(cfg, root, "valid")
    except Exception as exc:  # validation split is optional
        log.warning("no validation split (%s); best checkpoint falls back to training loss", exc)
        valid_ix = None
    if valid_ix is not None:
        check_disjoint(train_ix, valid_ix)
    return train_ix, valid_ix


def cmd_train(cfg, args) -> int:
    from .trainer import train

    train_ix, valid_ix = _train_data(cfg, args)
    tcfg = cfg.train_config()
    model = build(cfg.model_config(), seed=tcfg.seed, precision=cfg.precision)
    result = train(
        model, train_ix, valid_ix, tcfg, make_pipeline(cfg), args.out,
        workers=args.threads, keep_epoch_checkpoints=cfg.get("train", "keep_epoch_checkpoints"),
    )
    _write_json(os.path.join(args.out, "run_config.json"), {"config": cfg.flat(), "config_hash": cfg.digest()})
    print(f"{result.best_checkpoint} sha256={result.best_hash}")
    return 0


def cmd_train_ensemble(cfg, args) -> int:
    from .trainer import train_ensemble

    train_ix, valid_ix = _train_data(cfg, args)
    n = args.n if args.n is not None else cfg.get("train", "n_models")
    results = train_ensemble(
        n, cfg.model_config(), train_ix, valid_ix, cfg.train_config(), make_pipeline(cfg), args.out,
        precision=cfg.precision, workers=args.threads,
        keep_epoch_checkpoints=cfg.get("train", "keep_epoch_checkpoints"),
    )
    _write_json(os.path.join(args.out, "run_config.json"), {"config": cfg.flat(), "config_hash": cfg.digest()})
    for r in results:
        print(f"{r.best_checkpoint} sha256={r.best_hash}")
    return 0


def cmd_eval(cfg, args) -> int:
    index = load_split(cfg, _root(cfg, args), args.split)
    models, hashes = _load_models(args.models, cfg)
    report = evaluate(models, index, make_pipeline(cfg), cfg.get("eval", "batch_size"), hashes, workers=args.threads)
    report.write(args.report)
    o = report.overall
    log.info("studies=%d kappa=%.4f auc=%s accuracy=%.4f", o.count, o.kappa, o.auc, o.accuracy)
    print(os.path.abspath(args.report))
    missing = report.undefined()
    if missing:
        log.error("undefined metrics: %s", ", ".join(missing))
        return 1
    return 0


def cmd_predict(cfg, args) -> int:
    models, hashes = _load_models(args.models, cfg)
    pipe = make_pipeline(cfg).for_eval()
    if args.images:
        member = []
        for m in models:
            x = np.stack([pipe.eval_input(p) for p in args.images]).astype(m.params["classifier.weight"].dtype)
            member.append(feature_forward_logits(m, x, "eval")[2].data[:, 0].astype(np.float64))
        views = np.mean(member, axis=0)
        prob = float(views.mean())
        out = {"views": dict(zip(args.images, map(float, views))), "study_prob": prob, "label": int(prob > 0.5)}
    else:
        index = load_split(cfg, args.data, args.split)
        probs = [predict_views(m, index, pipe, cfg.get("eval", "batch_size"), args.threads) for m in models]
        preds = study_predictions(index, np.mean(probs, axis=0))
        out = {
            "studies": [
                {"study": p.key, "study_prob": p.study_prob, "label": p.predicted_label, "views": p.per_view_probs}
                for p in preds
            ]
        }
    out["checkpoint_hashes"] = hashes
    _write_json(args.out, out)
    print(os.path.abspath(args.out))
    return 0


def cmd_heatmap(cfg, args) -> int:
    model, _ = checkpoint.load(args.model, precision=cfg.precision)
    pcfg = cfg.preprocess_config()
    if pcfg.side != model.config.input_side:
        raise ValueError(f"checkpoint expects input side {model.config.input_side}, preprocess.side is {pcfg.side}")
    crop, _, geom = preprocess_image(read_png(args.image), pcfg)
    x = normalize(crop, pcfg.mean, pcfg.std)[None].astype(model.params["classifier.weight"].dtype)
    feats, logits, prob = feature_forward_logits(model, x, "eval")
    raw = cam_mod.cam(feats, model.params["classifier.weight"])
    cam_mod.render_overlay(crop, raw, args.out)
    px, py = cam_mod.peak_location(raw, pcfg.side, geom)
    log.info("probability=%.4f peak (source px) x=%.1f y=%.1f", float(prob.data[0, 0]), px, py)
    print(os.path.abspath(args.out))
    return 0


def cmd_gradcheck(cfg, args) -> int:
    from .autograd import run_suite

    rows = run_suite(range(args.seeds))
    worst = {}
    for name, _, err in rows:
        worst[name] = max(worst.get(name, 0.0), err)
    failed = [n for n, e in worst.items() if not e < args.tolerance]
    for name in sorted(worst):
        log.info("%-24s max_rel_err=%.3e %s", name, worst[name], "FAIL" if name in failed else "ok")
    return 1 if failed else 0


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "train-ensemble": cmd_train_ensemble,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "heatmap": cmd_heatmap,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        cfg = resolve(args.profile, args.config, args.overrides, args.seed)
    except ConfigKeyError as exc:
        parser.print_usage(sys.stderr)
        print(f"murax: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"murax: error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    for line in cfg.flat():
        log.info("config %s", line)
    log.info("config hash %s", cfg.digest())
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        log.debug("traceback", exc_info=True)
        print(f"murax: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
