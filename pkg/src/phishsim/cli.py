"""Command-line entry point.

Subcommands: ingest, split, dedup, train, index (build|query|add|threshold),
predict, evaluate, robustness, project. Configuration comes from an optional
JSON config file (--config, or the PHISHSIM_CONFIG environment variable)
whose keys mirror the library dataclasses; command-line flags win over the
file. Every run writes a provenance sidecar recording the resolved
configuration, seeds, and package versions. Logs go to stderr; artifacts are
new files, inputs are never modified.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    CorpusError,
    CorpusManifest,
    Screenshot,
    WebsiteIdentity,
    load_image,
    load_manifest,
    load_split,
    near_duplicate_scan,
    split_corpus,
    write_duplicate_report,
    write_manifest,
    write_split,
)
from .embedder import (
    EmbedderError,
    ModelConfig,
    build_model,
    embed,
    load_checkpoint,
    model_fingerprint,
)
from .evaluator import (
    EvaluatorError,
    HogParams,
    baseline_hog_nn,
    baseline_pretrained_nn,
    evaluate_model,
    project_embeddings_2d,
    write_eval_report,
    write_predictions,
    write_projection,
    write_roc_points,
)
from .index import (
    EmbeddingIndexError,
    build_index,
    load_index,
    predict,
    query,
    save_index,
    select_threshold,
    with_threshold,
)
from .robustness import (
    ATTACK_KINDS,
    GRID_PRESETS,
    PerturbationSpec,
    RobustnessError,
    RobustnessReport,
    adversarial_finetune,
    attack_report,
    robustness_report,
    write_robustness_report,
)
from .trainer import (
    ImageBank,
    TrainerError,
    TrainHyper,
    TrainingPool,
    TrainSession,
    train_stage1,
    train_stage2,
)

log = logging.getLogger("phishsim")

_ERRORS = (
    CorpusError, EmbedderError, TrainerError, EmbeddingIndexError,
    EvaluatorError, RobustnessError, FileNotFoundError, NotImplementedError,
)


# ---------------------------------------------------------------------------
# Config and provenance plumbing


def _load_config_file(args) -> dict:
    path = getattr(args, "config", None) or os.environ.get("PHISHSIM_CONFIG")
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CorpusError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise CorpusError(f"config file {p} must hold a JSON object")
    return data


def _resolve_hyper(args, config: dict) -> TrainHyper:
    values = dict(config.get("hyper", {}))
    flag_map = {
        "margin": "margin",
        "lr": "lr",
        "lr_decay": "lr_decay",
        "lr_decay_every": "lr_decay_every",
        "batch_size": "batch_size",
        "stage1_minibatches": "stage1_minibatches",
        "stage2_query_sets": "stage2_query_sets",
        "stage2_repeats": "stage2_repeats_per_query_set",
        "stage2_minibatches_per_subset": "stage2_minibatches_per_subset",
        "distance": "distance_in_loss",
        "network_type": "network_type",
        "checkpoint_every": "checkpoint_every",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    return TrainHyper.from_dict(values)


def _resolve_model_config(args, config: dict) -> ModelConfig:
    values = dict(config.get("model", {}))
    for flag, key in (
        ("backbone", "backbone"), ("head", "head"), ("added_layer", "added_layer"),
    ):
        val = getattr(args, flag, None)
        if val is not None:
            values[key] = val
    weights = getattr(args, "weights", None)
    values.setdefault("pretrained_init", weights is not None)
    values.setdefault("backbone", "vgg16")
    values.setdefault("added_layer", "conv5x5_512")
    values.setdefault("head", "global_max_pool")
    return ModelConfig.from_dict(values)


def _write_provenance(target: Path, args, config: dict, extra: dict | None = None) -> None:
    resolved = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in vars(args).items()
        if k != "func"
    }
    record = {
        "command": args.command,
        "arguments": resolved,
        "config_file": config,
        "versions": _versions(),
    }
    if extra:
        record.update(extra)
    canonical = json.dumps(record, sort_keys=True, default=str)
    record["config_hash"] = hashlib.sha256(canonical.encode()).hexdigest()
    path = target if target.suffix == ".json" else Path(str(target) + ".provenance.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n",
                   encoding="utf-8")
    tmp.replace(path)


def _versions() -> dict:
    import cv2
    import scipy
    import sklearn
    import torch

    return {
        "phishsim": __version__,
        "numpy": np.__version__,
        "torch": torch.__version__,
        "opencv": cv2.__version__,
        "scipy": scipy.__version__,
        "sklearn": sklearn.__version__,
    }


def _load_model(args):
    """Model from --checkpoint if given, otherwise built from flags/config."""
    ckpt = getattr(args, "checkpoint", None)
    if ckpt:
        model, meta, _ = load_checkpoint(ckpt)
        return model
    config = _resolve_model_config(args, _load_config_file(args))
    return build_model(config, rng_seed=args.seed, pretrained_weights=getattr(args, "weights", None))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_ingest(args) -> int:
    root = Path(args.root)
    if not root.is_dir():
        raise CorpusError(f"ingest root is not a directory: {root}")
    websites: dict[str, WebsiteIdentity] = {}
    records: list[Screenshot] = []

    def add_site(site_dir: Path):
        wid = site_dir.name
        if wid not in websites:
            websites[wid] = WebsiteIdentity(
                website_id=wid, name=wid, domains=(f"{wid}.example",), category=None
            )

    for source_class, sub in (("trusted", "trusted"), ("phishing", "phishing")):
        base = root / sub
        if not base.is_dir():
            continue
        for site_dir in sorted(p for p in base.iterdir() if p.is_dir()):
            add_site(site_dir)
            for i, img in enumerate(sorted(site_dir.glob("*.png")) + sorted(site_dir.glob("*.jpg"))):
                records.append(
                    Screenshot(
                        record_id=f"{source_class[0]}-{site_dir.name}-{i:04d}",
                        image_path=img,
                        source_class=source_class,
                        website_id=site_dir.name,
                    )
                )
    benign = root / "benign"
    if benign.is_dir():
        for i, img in enumerate(sorted(benign.glob("*.png")) + sorted(benign.glob("*.jpg"))):
            records.append(
                Screenshot(
                    record_id=f"b-{i:04d}", image_path=img, source_class="benign_test"
                )
            )
    manifest = CorpusManifest(websites=sorted(websites.values(), key=lambda w: w.website_id),
                              records=records)
    out = Path(args.manifest)
    write_manifest(manifest, out)
    _write_provenance(out, args, {})
    log.info("ingested %d websites, %d records -> %s", len(websites), len(records), out)
    return 0


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    split = split_corpus(
        manifest,
        phishing_train_fraction=args.phishing_train_fraction,
        validation_fraction=args.validation_fraction,
        seed=args.seed,
    )
    out = Path(args.out)
    write_split(split, out)
    _write_provenance(out, args, _load_config_file(args))
    counts = {}
    for name in ("train", "validation", "test"):
        counts[name] = sum(1 for v in split.assignment.values() if v == name)
    log.info("split written to %s (%s)", out, counts)
    return 0


def cmd_dedup(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.feature == "model":
        model = _load_model(args)
        feature_fn = lambda img: embed(model, img)
    else:
        feature_fn = _pixel_feature
    report = near_duplicate_scan(manifest.records, feature_fn, threshold=args.dedup_threshold)
    out = Path(args.out)
    write_duplicate_report(report, out)
    _write_provenance(out, args, _load_config_file(args))
    log.info(
        "dedup: %d pairs in %d components below threshold %.6g -> %s",
        len(report.pairs), len(report.components), report.threshold, out,
    )
    return 0


def _pixel_feature(img: np.ndarray) -> np.ndarray:
    import cv2

    small = cv2.resize(img, (32, 32), interpolation=cv2.INTER_AREA)
    return small.ravel().astype(np.float32)


def cmd_train(args) -> int:
    config_file = _load_config_file(args)
    hyper = _resolve_hyper(args, config_file)
    manifest = load_manifest(args.manifest)
    split = load_split(args.split)
    pool = TrainingPool.from_split(manifest, split)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    optimizer_state, start_step = None, 0
    if args.resume:
        model, meta, optimizer_state = load_checkpoint(args.resume)
        start_step = int(meta.get("global_step", 0))
        log.info("resumed %s at minibatch %d", args.resume, start_step)
    else:
        model_config = _resolve_model_config(args, config_file)
        model = build_model(model_config, rng_seed=args.seed,
                            pretrained_weights=args.weights)
    session = TrainSession(
        model, hyper, rng=np.random.default_rng(args.seed),
        checkpoint_dir=out_dir, log_path=out_dir / "training_log.jsonl",
        optimizer_state=optimizer_state, start_step=start_step,
    )
    if args.stage in ("1", "both"):
        result = train_stage1(session, pool)
        log.info("stage 1 done at minibatch %d -> %s", result.global_step, result.checkpoint_path)
    if args.stage in ("2", "both"):
        result = train_stage2(session, pool)
        log.info("stage 2 done at minibatch %d -> %s", result.global_step, result.checkpoint_path)
    final = session.save("model", stage=f"stage{args.stage}")
    _write_provenance(final, args, config_file, extra={"hyper": hyper.to_dict()})
    log.info("final checkpoint: %s", final)
    print(final)
    return 0


def cmd_index(args) -> int:
    config_file = _load_config_file(args)
    if args.index_op == "build":
        model = _load_model(args)
        manifest = load_manifest(args.manifest)
        split = load_split(args.split)
        records = [
            r for r in manifest.records
            if r.source_class in ("trusted", "phishing")
            and split.assignment[r.record_id] == "train"
        ]
        index = build_index(model, records)
        save_index(index, args.out)
        _write_provenance(Path(args.out), args, config_file)
        log.info("index of %d rows (%d websites) -> %s", len(index),
                 len(index.websites()), args.out)
    elif args.index_op == "query":
        model = _load_model(args)
        index = load_index(args.index)
        vec = embed(model, load_image(args.image))
        for rank, m in enumerate(query(index, vec, k=args.k), 1):
            print(f"match\t{rank}\t{m.website_id}\t{m.record_id}\t{m.distance!r}")
    elif args.index_op == "add":
        model = _load_model(args)
        index = load_index(args.index)
        manifest = load_manifest(args.manifest)
        records = [
            r for r in manifest.records
            if r.website_id == args.website and r.source_class == "trusted"
        ]
        if not records:
            raise EmbeddingIndexError(
                f"manifest has no trusted records for website {args.website!r}"
            )
        from .index import add_website

        new_index = add_website(index, model, records)
        save_index(new_index, args.out)
        _write_provenance(Path(args.out), args, config_file)
        log.info("added %d rows for %s -> %s", len(records), args.website, args.out)
    elif args.index_op == "threshold":
        model = _load_model(args)
        index = load_index(args.index)
        manifest = load_manifest(args.manifest)
        split = load_split(args.split)
        fp = model_fingerprint(model)
        phish = split.records(manifest, args.split_name, "phishing")
        benign = split.records(manifest, args.split_name, "benign_test")
        if not phish or not benign:
            raise EmbeddingIndexError(
                f"split {args.split_name!r} has no phishing/benign records to "
                "calibrate on (re-split with a validation fraction?)"
            )
        bank = ImageBank(capacity=64)
        phish_d = [
            predict(index, model, bank.get(r), fingerprint=fp).min_distance for r in phish
        ]
        benign_d = [
            predict(index, model, bank.get(r), fingerprint=fp).min_distance for r in benign
        ]
        tau = select_threshold(phish_d, benign_d)
        save_index(with_threshold(index, tau), args.out)
        _write_provenance(Path(args.out), args, config_file)
        log.info("threshold %.6g calibrated on %d+%d records -> %s",
                 tau, len(phish_d), len(benign_d), args.out)
        print(tau)
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args)
    index = load_index(args.index)
    result = predict(index, model, load_image(args.image),
                     query_record=str(args.image), k=args.k)
    print(f"verdict\t{result.verdict}\t{result.min_distance!r}")
    for rank, m in enumerate(result.top_matches, 1):
        print(f"match\t{rank}\t{m.website_id}\t{m.record_id}\t{m.distance!r}")
    return 0


def cmd_evaluate(args) -> int:
    config_file = _load_config_file(args)
    manifest = load_manifest(args.manifest)
    split = load_split(args.split)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.baseline == "pretrained":
        config = _resolve_model_config(args, config_file)
        report = baseline_pretrained_nn(
            config.backbone, manifest, split, weights_path=args.weights,
            split_name=args.split_name, seed=args.seed,
        )
    elif args.baseline == "hog":
        params = HogParams(
            orientations=args.hog_orientations,
            cell_pixels=args.hog_cell_pixels,
            block_cells=args.hog_block_cells,
        )
        report = baseline_hog_nn(manifest, split, params, split_name=args.split_name)
    else:
        model = _load_model(args)
        if args.index:
            index = load_index(args.index)
        else:
            records = [
                r for r in manifest.records
                if r.source_class in ("trusted", "phishing")
                and split.assignment[r.record_id] == "train"
            ]
            index = build_index(model, records)
        report = evaluate_model(model, index, manifest, split, split_name=args.split_name)
    write_eval_report(report, out_dir / "report.json")
    write_roc_points(report, out_dir / "roc.tsv")
    write_predictions(report, out_dir / "predictions.tsv")
    _write_provenance(out_dir / "provenance.json", args, config_file)
    log.info(
        "evaluate(%s): top1=%.4f top5=%.4f auc=%.4f partial=%.6f -> %s",
        args.baseline, report.top1_match, report.top5_match, report.auc,
        report.partial_auc_at_1pct, out_dir,
    )
    print(json.dumps({
        "top1_match": report.top1_match, "top5_match": report.top5_match,
        "auc": report.auc, "partial_auc_at_1pct": report.partial_auc_at_1pct,
    }))
    return 0


def cmd_robustness(args) -> int:
    config_file = _load_config_file(args)
    manifest = load_manifest(args.manifest)
    split = load_split(args.split)
    model = _load_model(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.finetune_minibatches:
        lo, hi = (float(x) for x in args.epsilon_range.split(","))
        hyper = _resolve_hyper(args, config_file)
        _, meta, optimizer_state = load_checkpoint(args.checkpoint)
        pool = TrainingPool.from_split(manifest, split)
        session = TrainSession(
            model, hyper, rng=np.random.default_rng(args.seed),
            checkpoint_dir=out_dir,
            optimizer_state=optimizer_state,
            start_step=int(meta.get("global_step", 0)),
        )
        result = adversarial_finetune(
            session, pool, epsilon_range=(lo, hi),
            minibatches=args.finetune_minibatches,
        )
        _write_provenance(result.checkpoint_path, args, config_file)
        log.info("adversarial fine-tune -> %s", result.checkpoint_path)
        print(result.checkpoint_path)
        return 0

    if not args.grid and args.adv == "none":
        raise RobustnessError(
            "nothing to do: pass --grid, --adv, or --finetune-minibatches"
        )
    if not args.index:
        raise RobustnessError("--index is required for --grid/--adv evaluation")
    index = load_index(args.index)
    if args.grid:
        specs = GRID_PRESETS[args.grid]()
        report = robustness_report(
            model, index, manifest, split, specs,
            seed=args.seed, trials=args.trials, split_name=args.split_name,
        )
        out = out_dir / "robustness.tsv"
        write_robustness_report(report, out)
        _write_provenance(out, args, config_file)
        log.info("robustness grid %s (%d specs) -> %s", args.grid, len(specs), out)
    if args.adv != "none":
        report = attack_report(
            model, index, manifest, split,
            attack=args.adv.replace("-", "_"),
            epsilon=args.epsilon, steps=args.steps, step_epsilon=args.step_epsilon,
            seed=args.seed, split_name=args.split_name,
        )
        out = out_dir / "adversarial.tsv"
        write_robustness_report(report, out)
        _write_provenance(out, args, config_file)
        row = report.rows[0]
        log.info("%s: top1 drop %.4f, auc drop %.4f -> %s",
                 row.label, row.top1_drop, row.auc_drop, out)
        print(json.dumps({"label": row.label, "top1_drop": row.top1_drop,
                          "auc_drop": row.auc_drop}))
    return 0


def cmd_project(args) -> int:
    manifest = load_manifest(args.manifest)
    split = load_split(args.split) if args.split else None
    model = _load_model(args)
    records = []
    for rec in manifest.records:
        if split is not None and args.split_name != "all":
            if split.assignment[rec.record_id] != args.split_name:
                continue
        records.append(rec)
    if not records:
        raise EvaluatorError("no records selected for projection")
    records = sorted(records, key=lambda r: r.record_id)
    from .embedder import embed_batch

    bank = ImageBank(capacity=64)
    vectors = embed_batch(model, [bank.get(r) for r in records])
    labels = [r.website_id or r.source_class for r in records]
    points = project_embeddings_2d(vectors, labels, seed=args.seed,
                                   perplexity=args.perplexity)
    out = Path(args.out)
    write_projection(points, out)
    _write_provenance(out, args, _load_config_file(args))
    log.info("projected %d embeddings -> %s", len(points), out)
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", help="model checkpoint to load")
    p.add_argument("--backbone", choices=["vgg16", "resnet50", "tiny"],
                   help="backbone architecture (when not loading a checkpoint)")
    p.add_argument("--added-layer", dest="added_layer",
                   choices=["conv5x5_512", "conv3x3_512", "none"])
    p.add_argument("--head", choices=["global_max_pool", "global_avg_pool",
                                      "flatten", "fc1024"])
    p.add_argument("--weights", help="local pretrained backbone weights file")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (default: $PHISHSIM_CONFIG)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phishsim",
        description="Visual-similarity phishing detection toolkit",
    )
    parser.add_argument("--version", action="version", version=f"phishsim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a directory tree into a manifest")
    p.add_argument("--root", required=True,
                   help="directory with trusted/<site>/, phishing/<site>/, benign/")
    p.add_argument("--manifest", required=True, help="output manifest path")
    _add_common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="assign records to train/validation/test")
    p.add_argument("--manifest", required=True)
    p.add_argument("--phishing-train-fraction", dest="phishing_train_fraction",
                   type=float, default=0.4)
    p.add_argument("--validation-fraction", dest="validation_fraction",
                   type=float, default=0.0)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("dedup", help="near-duplicate scan over the corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dedup-threshold", dest="dedup_threshold", type=float,
                   help="feature-distance threshold; default = 1st percentile "
                        "of cross-website distances")
    p.add_argument("--feature", choices=["pixels", "model"], default="pixels")
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("train", help="two-stage triplet training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    for flag, typ in (
        ("--margin", float), ("--lr", float), ("--lr-decay", float),
        ("--lr-decay-every", int), ("--batch-size", int),
        ("--stage1-minibatches", int), ("--stage2-query-sets", int),
        ("--stage2-repeats", int), ("--stage2-minibatches-per-subset", int),
        ("--checkpoint-every", int),
    ):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ)
    p.add_argument("--distance", choices=["squared_l2", "l1"])
    p.add_argument("--network-type", dest="network_type", choices=["triplet", "siamese"])
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build, query, extend, or calibrate an index")
    ops = p.add_subparsers(dest="index_op", required=True)
    b = ops.add_parser("build")
    b.add_argument("--manifest", required=True)
    b.add_argument("--split", required=True)
    b.add_argument("--out", required=True)
    _add_model_flags(b)
    _add_common(b)
    q = ops.add_parser("query")
    q.add_argument("--index", required=True)
    q.add_argument("--image", required=True)
    q.add_argument("-k", type=int, default=5)
    _add_model_flags(q)
    _add_common(q)
    a = ops.add_parser("add")
    a.add_argument("--index", required=True)
    a.add_argument("--manifest", required=True)
    a.add_argument("--website", required=True)
    a.add_argument("--out", required=True)
    _add_model_flags(a)
    _add_common(a)
    t = ops.add_parser("threshold")
    t.add_argument("--index", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--split", required=True)
    t.add_argument("--split-name", dest="split_name", default="validation")
    t.add_argument("--out", required=True)
    _add_model_flags(t)
    _add_common(t)
    for op in (b, q, a, t):
        op.set_defaults(func=cmd_index, command="index")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("predict", help="classify one screenshot")
    p.add_argument("--index", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("-k", type=int, default=5)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics on the held-out split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--split-name", dest="split_name", default="test")
    p.add_argument("--baseline", choices=["none", "pretrained", "hog"], default="none")
    p.add_argument("--index", help="prebuilt index (default: build from the split)")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--hog-orientations", dest="hog_orientations", type=int, default=9)
    p.add_argument("--hog-cell-pixels", dest="hog_cell_pixels", type=int, default=16)
    p.add_argument("--hog-block-cells", dest="hog_block_cells", type=int, default=2)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "robustness",
        help="perturbation grids, FGSM attacks, adversarial fine-tuning",
        description="Perturbation grid presets: mild = the weaker parameter "
                    "row (blur sigma 1.5, darken gamma 1.3, brighten gamma 0.8, "
                    "noise variance 0.01, salt-pepper 5%%, occlusion quadrant 4, "
                    "shift (-30,-30)); strong = the stronger row (3.5 / 1.5 / "
                    "0.5 / 0.1 / 15%% / quadrant 2 / (-50,-50)); full = both. "
                    "FGSM presets mirror the standard attack grid: epsilon "
                    "0.005 single-step, or 5 iterative steps of 0.002.",
    )
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--split-name", dest="split_name", default="test")
    p.add_argument("--index")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--grid", choices=sorted(GRID_PRESETS))
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--adv", choices=["none", "fgsm", "fgsm-closest", "fgsm-iterative"],
                   default="none")
    p.add_argument("--epsilon", type=float, default=0.005)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--step-epsilon", dest="step_epsilon", type=float, default=0.002)
    p.add_argument("--finetune-minibatches", dest="finetune_minibatches", type=int)
    p.add_argument("--epsilon-range", dest="epsilon_range", default="0.003,0.01")
    for flag, typ in (("--margin", float), ("--lr", float), ("--batch-size", int)):
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("project", help="2-D projection of embeddings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", help="optional split file to filter records")
    p.add_argument("--split-name", dest="split_name", default="all")
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_project)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    try:
        return args.func(args)
    except _ERRORS as exc:
        message = str(exc).replace("\n", " ").replace("\t", " ")
        sys.stderr.write(f"error\t{type(exc).__name__}\t{message}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
