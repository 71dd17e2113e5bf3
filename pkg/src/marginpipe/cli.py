"""Command-line surface for the margin-assessment pipeline.

Subcommands cover the whole chain: phantom data generation, patch
extraction, the three training stages, patch prediction, coarse-mask
reconstruction, mask refinement, evaluation, and the focal-loss ablation
harness. Every command is deterministic for a fixed config and seed, never
mutates its inputs, and echoes its effective configuration next to its
outputs.

Exit codes: 0 success, 1 usage, 2 data/contract error, 3 backend error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import (
    RunConfig,
    load_run_config,
    with_seed,
    write_effective_config,
)
from .errors import BackendError, ConfigError, DataError, MarginPipeError
from .ffcl import (
    FocalParams,
    finetune,
    predict_patch,
    pretrain_global,
    pretrain_local,
    write_training_log,
)
from .metrics import ConfusionCounts, aggregate_mask_metrics, auc, classification_metrics, roc_csv
from .model import build_model, load_checkpoint, save_checkpoint
from .patchflow import (
    extract_patches,
    load_image,
    load_manifest,
    load_mask,
    load_patch_cache,
    reconstruct_coarse_mask,
    save_patch_cache,
)
from .phantom import SPLITS, generate_dataset
from .refinement import RemoteClient, refine

logger = logging.getLogger(__name__)

ENDPOINT_ENV_VAR = "MARGINPIPE_ENDPOINT"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # default argparse exits with code 2
        raise _UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> tuple[int, ...]:
    values = tuple(int(part) for part in text.split(",") if part.strip())
    if not values:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return values


def _load_rc(args) -> RunConfig:
    rc = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    return with_seed(rc, getattr(args, "seed", None))


def _pool_map(jobs: int, fn, items):
    """Order-preserving map, threaded when jobs > 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_binary_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8) * np.uint8(255), "L").convert("1").save(path, "PNG")


def _read_binary_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.array(img.convert("1")) > 0).astype(np.uint8)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _load_cache(path_value: str | None, what: str) -> list:
    if not path_value:
        raise ConfigError(f"no {what} patch cache configured (set data.{what}_patches)")
    if not Path(path_value).exists():
        raise DataError(f"{what} patch cache not found: {path_value}")
    records, _ = load_patch_cache(path_value)
    return records


# ---------------------------------------------------------------------------
# commands


def cmd_phantom_gen(args) -> int:
    rc = _load_rc(args)
    counts = rc.data.counts
    if args.counts:
        parts = args.counts.split(",")
        if len(parts) != 3:
            raise ConfigError("--counts must be train,val,test (e.g. 20,4,6)")
        counts = dict(zip(SPLITS, (int(p) for p in parts)))
    out = Path(args.out)
    manifest = generate_dataset(rc.phantom, counts, out)
    write_effective_config(rc, out, {"name": "phantom gen", "counts": counts})
    print(manifest)
    return 0


def cmd_patches_extract(args) -> int:
    rc = _load_rc(args)
    entries = [e for e in load_manifest(args.manifest) if e["split"] == args.split]
    if not entries:
        raise DataError(f"manifest has no entries for split '{args.split}'")

    def one(entry):
        image = load_image(entry["image_path"])
        mask = load_mask(entry["mask_path"])
        return extract_patches(image, mask, rc.patches, args.split)

    records = [rec for batch in _pool_map(args.jobs, one, entries) for rec in batch]
    if not records:
        raise DataError(f"no patches met the labeling criterion for split '{args.split}'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = out / f"patches_{args.split}.bin"
    n_pos = sum(r.label for r in records)
    save_patch_cache(
        cache,
        records,
        meta={"split": args.split, "n_images": len(entries), "n_positive": n_pos},
    )
    write_effective_config(rc, out, {"name": "patches extract", "split": args.split})
    logger.info("%d patches (%d positive) from %d images", len(records), n_pos, len(entries))
    print(cache)
    return 0


def cmd_train(args) -> int:
    rc = _load_rc(args)
    out = Path(args.out)
    if args.resume and Path(args.resume).resolve() == out.resolve():
        raise ConfigError("--in and --out must differ; commands do not mutate inputs")
    tc = rc.train_config(args.stage, seed=args.seed)
    model = load_checkpoint(args.resume) if args.resume else build_model(rc.model)

    train_records = _load_cache(rc.data.train_patches, "train")
    if args.stage == "local":
        result = pretrain_local(
            model, train_records, tc,
            objective=args.objective, include_projection=args.include_projection,
        )
    elif args.stage == "global":
        result = pretrain_global(model, train_records, tc)
    else:
        if not rc.data.val_patches:
            raise ConfigError(
                "fine-tuning needs the 'val' split for early stopping "
                "(set data.val_patches; run `patches extract --split val` first)"
            )
        val_records = _load_cache(rc.data.val_patches, "val")
        result = finetune(model, train_records, val_records, rc.focal, tc)

    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out)
    log_path = Path(args.log) if args.log else Path(str(out) + ".log.csv")
    write_training_log(result.records, log_path)
    write_effective_config(
        rc, out.parent, {"name": f"train {args.stage}", "out": out.name},
        name=f"{out.stem}-config.json",
    )
    logger.info("stage %s done: %d epochs, stage tag %r", args.stage,
                len(result.records), result.model.stage)
    print(out)
    return 0


def cmd_predict(args) -> int:
    rc = _load_rc(args)
    model = load_checkpoint(args.ckpt)
    entries = [e for e in load_manifest(args.manifest) if e["split"] == args.split]
    if not entries:
        raise DataError(f"manifest has no entries for split '{args.split}'")

    def one(entry):
        image = load_image(entry["image_path"])
        mask = load_mask(entry["mask_path"])
        records = extract_patches(image, mask, rc.patches, args.split)
        patches = []
        for rec in records:
            prob, label = predict_patch(model, rec.pixels, args.threshold)
            patches.append({
                "origin": list(rec.origin),
                "label_true": rec.label,
                "prob": prob,
                "label_pred": label,
            })
        return {
            "id": Path(entry["image_path"]).stem,
            "image_path": entry["image_path"],
            "dims": list(image.shape),
            "split": entry["split"],
            "patches": patches,
        }

    images = _pool_map(args.jobs, one, entries)
    doc = {
        "checkpoint": str(args.ckpt),
        "stage": model.stage,
        "threshold": args.threshold,
        "patch_size": rc.patches.patch_size,
        "images": sorted(images, key=lambda im: im["id"]),
    }
    out = Path(args.out)
    _write_json(out, doc)
    write_effective_config(
        rc, out.parent, {"name": "predict", "split": args.split},
        name=f"{out.stem}-config.json",
    )
    n = sum(len(im["patches"]) for im in images)
    logger.info("predicted %d patches over %d images", n, len(images))
    print(out)
    return 0


def cmd_reconstruct(args) -> int:
    doc = json.loads(Path(args.preds).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    patch_size = doc.get("patch_size", 64)

    def one(image_doc):
        votes = [(tuple(p["origin"]), p["label_pred"]) for p in image_doc["patches"]]
        mask = reconstruct_coarse_mask(
            votes, tuple(image_doc["dims"]),
            aggregation=args.aggregation, vote_threshold=args.vote_threshold,
            patch_size=patch_size,
        )
        _write_binary_mask(out / f"{image_doc['id']}.png", mask)
        return image_doc["id"]

    ids = _pool_map(args.jobs, one, doc["images"])
    _write_json(out / "reconstruct-settings.json", {
        "aggregation": args.aggregation,
        "vote_threshold": args.vote_threshold,
        "patch_size": patch_size,
        "preds": str(args.preds),
    })
    logger.info("reconstructed %d coarse masks", len(ids))
    print(out)
    return 0


def cmd_refine(args) -> int:
    rc = _load_rc(args)
    endpoint = args.endpoint or os.environ.get(ENDPOINT_ENV_VAR) or rc.refine.endpoint
    # an explicit --endpoint means remote unless --backend says otherwise; the
    # ambient environment variable only supplies the URL, never the backend
    backend = args.backend or ("remote" if args.endpoint else rc.refine.backend)
    cfg = dataclasses.replace(rc.refine, backend=backend, endpoint=endpoint)
    mask_paths = sorted(Path(args.masks).glob("*.png"))
    if not mask_paths:
        raise DataError(f"no mask PNGs found under {args.masks}")
    images_dir = Path(args.images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    client = RemoteClient(cfg.endpoint, cfg.timeout_ms, cfg.max_inflight) \
        if cfg.backend == "remote" else None

    def one(mask_path: Path):
        image_path = images_dir / mask_path.name
        if not image_path.exists():
            raise DataError(f"no image for mask {mask_path.name} under {images_dir}")
        image = load_image(image_path)
        mc = _read_binary_mask(mask_path)
        if not mc.any():
            # nothing to prompt with; pass the empty mask through
            _write_binary_mask(out / mask_path.name, mc)
            return (mask_path.stem, 0.0, 0.0)
        result = refine(image, mc, cfg, client=client)
        _write_binary_mask(out / mask_path.name, result.m2)
        return (mask_path.stem, *result.latency_ms)

    stats = _pool_map(args.jobs, one, mask_paths)
    total = [sum(s[1:]) for s in stats]
    write_effective_config(rc, out, {"name": "refine", "backend": cfg.backend})
    logger.info("refined %d masks, mean latency %.1f ms (max %.1f)",
                len(stats), float(np.mean(total)), float(np.max(total)))
    print(out)
    return 0


def cmd_eval_masks(args) -> int:
    pred_paths = sorted(Path(args.pred).glob("*.png"))
    if not pred_paths:
        raise DataError(f"no mask PNGs found under {args.pred}")
    truth_dir = Path(args.truth)

    def one(pred_path: Path):
        truth_path = truth_dir / pred_path.name
        if not truth_path.exists():
            raise DataError(f"no truth mask for {pred_path.name} under {truth_dir}")
        pred = _read_binary_mask(pred_path)
        with Image.open(truth_path) as img:
            truth_arr = np.array(img)
        truth = np.isin(truth_arr, args.truth_label).astype(np.uint8)
        return pred, truth, pred_path.stem

    triples = _pool_map(args.jobs, one, pred_paths)
    report = aggregate_mask_metrics(
        [t[0] for t in triples], [t[1] for t in triples], [t[2] for t in triples]
    )
    report["truth_label"] = list(args.truth_label)
    _write_json(Path(args.out), report)
    logger.info("mean DSC %.4f over %d masks", report["mean"]["dsc"], len(triples))
    print(args.out)
    return 0


def cmd_eval_patches(args) -> int:
    doc = json.loads(Path(args.preds).read_text())
    labels, scores, preds = [], [], []
    for image_doc in doc["images"]:
        for p in image_doc["patches"]:
            labels.append(p["label_true"])
            scores.append(p["prob"])
            preds.append(p["label_pred"])
    if not labels:
        raise DataError(f"{args.preds} contains no patches")
    cc = ConfusionCounts.from_predictions(preds, labels)
    report = {
        "auc": auc(scores, labels),
        "threshold": doc.get("threshold", 0.5),
        "n_patches": len(labels),
        "counts": {"tp": cc.tp, "fp": cc.fp, "tn": cc.tn, "fn": cc.fn},
        "metrics": classification_metrics(cc),
    }
    if args.roc:
        roc_csv(scores, labels, args.roc)
        report["roc_csv"] = str(args.roc)
    _write_json(Path(args.out), report)
    logger.info("AUC %.4f over %d patches", report["auc"], len(labels))
    print(args.out)
    return 0


def cmd_ablate_focal(args) -> int:
    rc = _load_rc(args)
    alphas = [float(a) for a in args.alphas.split(",") if a]
    gammas = [float(g) for g in args.gammas.split(",") if g]
    if not alphas or not gammas:
        raise ConfigError("--alphas and --gammas must each name at least one value")
    train_records = _load_cache(rc.data.train_patches, "train")
    val_records = _load_cache(rc.data.val_patches, "val")
    eval_records = (
        _load_cache(rc.data.test_patches, "test") if rc.data.test_patches else val_records
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tc = rc.train_config("finetune", seed=args.seed)

    runs = []
    for alpha in alphas:
        for gamma in gammas:
            fp = FocalParams(alpha=alpha, gamma=gamma)
            model = build_model(rc.model)
            finetune(model, train_records, val_records, fp, tc)
            scored = [predict_patch(model, r.pixels) for r in eval_records]
            scores = [s[0] for s in scored]
            labels = [r.label for r in eval_records]
            csv_name = f"roc_alpha{alpha:g}_gamma{gamma:g}.csv"
            roc_csv(scores, labels, out / csv_name)
            run = {
                "alpha": alpha,
                "gamma": gamma,
                "auc": auc(scores, labels),
                "roc_csv": csv_name,
                "n_eval_patches": len(eval_records),
            }
            runs.append(run)
            logger.info("alpha=%g gamma=%g -> AUC %.4f", alpha, gamma, run["auc"])
    _write_json(out / "summary.json", {"runs": runs})
    write_effective_config(rc, out, {"name": "ablate focal",
                                     "alphas": alphas, "gammas": gammas})
    print(out / "summary.json")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p, config=True, seed=True, jobs=False):
    if config:
        p.add_argument("--config", help="run configuration JSON")
    if seed:
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
    if jobs:
        p.add_argument("--jobs", type=int, default=1,
                       help="per-image worker threads (default 1)")


def build_parser() -> _Parser:
    parser = _Parser(prog="marginpipe", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="synthetic radiograph datasets")
    psub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = psub.add_parser("gen", help="generate a dataset with manifest")
    _add_common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--counts", help="train,val,test image counts (e.g. 20,4,6)")
    g.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("patches", help="patch extraction")
    psub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = psub.add_parser("extract", help="extract labeled patches for one split")
    _add_common(g, jobs=True)
    g.add_argument("--manifest", required=True)
    g.add_argument("--split", required=True, choices=SPLITS)
    g.add_argument("--out", required=True, help="directory for the patch cache")
    g.set_defaults(func=cmd_patches_extract)

    p = sub.add_parser("train", help="training stages (chainable via checkpoints)")
    p.add_argument("stage", choices=("local", "global", "finetune"))
    _add_common(p)
    p.add_argument("--in", dest="resume", default=None,
                   help="checkpoint to continue from (omit to start fresh)")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--log", default=None, help="training log CSV (default <out>.log.csv)")
    p.add_argument("--objective", choices=("cosine", "goodness"), default="cosine",
                   help="local-stage objective")
    p.add_argument("--include-projection", action="store_true",
                   help="also train the projection during the local stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-patch probabilities for one split")
    _add_common(p, jobs=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="predictions JSON")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("reconstruct", help="coarse masks from patch predictions")
    p.add_argument("--preds", required=True)
    p.add_argument("--out", required=True, help="directory for mask PNGs")
    p.add_argument("--aggregation", choices=("mean", "any-positive"), default="mean")
    p.add_argument("--vote-threshold", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("refine", help="refine coarse masks")
    _add_common(p, jobs=True)
    p.add_argument("--backend", choices=("morphological", "remote"), default=None,
                   help="refinement backend (default: the config's; --endpoint implies remote)")
    p.add_argument("--endpoint", default=None,
                   help=f"remote service URL (or set {ENDPOINT_ENV_VAR})")
    p.add_argument("--masks", required=True, help="directory of coarse mask PNGs")
    p.add_argument("--images", required=True, help="directory of matching image PNGs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="evaluation reports")
    psub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = psub.add_parser("masks", help="DSC/Hausdorff/accuracy of mask directories")
    g.add_argument("--pred", required=True)
    g.add_argument("--truth", required=True)
    g.add_argument("--truth-label", type=_int_list, default=(3,),
                   help="comma list of truth-PNG labels counted as positive (default 3)")
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_eval_masks)
    g = psub.add_parser("patches", help="classification metrics from predictions JSON")
    g.add_argument("--preds", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--roc", default=None, help="write an fpr/tpr/threshold CSV here")
    g.set_defaults(func=cmd_eval_patches)

    p = sub.add_parser("ablate", help="ablation harnesses")
    psub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = psub.add_parser("focal", help="fine-tune across an alpha/gamma grid "
                                      "(alpha=0.5 gamma=0 is plain weighted BCE)")
    _add_common(g)
    g.add_argument("--alphas", required=True, help="comma-separated alpha values")
    g.add_argument("--gammas", required=True, help="comma-separated gamma values")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_ablate_focal)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except BackendError as exc:
        logger.error("backend failure: %s", exc)
        return 3
    except (MarginPipeError, OSError) as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
