"""Command-line entry point: validate, split, train, predict, analyze, report.

Exit codes: 0 success, 1 domain error (bad data, bad config, failed
predictions), 2 I/O error (unreadable or missing files).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import nets
from .analysis import ErrorRecord, PredictionRecord, analyze, load_analysis, read_dump, write_dump
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dataset import ManifestError, Split, SplitSpec, load_manifest, split_train_test
from .metrics import BREAKING_THRESHOLD
from .report import render_table, write_reports
from .train import (CACHE_ENV, ConfigError, TrainConfig, finetune_attribute_head, parse_bool,
                    precompute_features, read_config, train_attribute_head, train_identity)

log = logging.getLogger("ffsense")

EXIT_OK, EXIT_DOMAIN, EXIT_IO = 0, 1, 2
REQUIRED_CONFIG_KEYS = ("seed", "epochs")
HEAD_FILES = {nets.AGE: "age.ckpt", nets.GENDER: "gender.ckpt", nets.ETHNICITY: "ethnicity.ckpt"}
HEAD_NAMES = {nets.AGE: "age", nets.GENDER: "gender", nets.ETHNICITY: "ethnicity"}


class DomainError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ------------------------------------------------------------------ commands


def cmd_validate(args) -> int:
    try:
        manifest = load_manifest(args.manifest)
    except ManifestError as exc:
        for problem in exc.problems:
            _err(problem)
        return EXIT_DOMAIN
    print(f"OK: {len(manifest.subjects)} subjects, {len(manifest.images)} images, "
          f"{len(manifest.filters)} filters")
    return EXIT_OK


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    spec = SplitSpec(args.fraction, args.seed or 0, not args.global_split)
    split = split_train_test(manifest, spec)
    split.save(args.out)
    print(f"train {len(split.train)} / test {len(split.test)} -> {args.out}")
    return EXIT_OK


def network_spec_from_config(values: dict, num_identities: int) -> nets.NetworkSpec:
    def ints(key, default):
        raw = values.get(key)
        return default if raw is None else tuple(int(v) for v in raw.split(",") if v.strip())

    try:
        return nets.build_facefilternet(
            num_identities,
            input_size=int(values.get("input_size", nets.INPUT_SIZE)),
            stage_blocks=ints("stage_blocks", (3, 4, 6, 3)),
            base_width=int(values.get("base_width", 64)),
            pretrained=parse_bool(values.get("pretrained", "false")),
            bridge_blocks=int(values.get("bridge_blocks", 1)),
            bridge_width=int(values.get("bridge_width", 128)),
            bridge_scale=float(values.get("bridge_scale", 0.1)),
        )
    except ValueError as exc:
        raise ConfigError(f"bad network configuration: {exc}") from None


def train_configs(values: dict) -> tuple[TrainConfig, dict[str, TrainConfig], tuple[int, ...]]:
    missing = [k for k in REQUIRED_CONFIG_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing config key: {', '.join(missing)}")
    identity = TrainConfig.from_mapping({**values, "loss": "cross_entropy"})
    head_values = {
        "epochs": values.get("head_epochs", "100"),
        "batch_size": values.get("head_batch_size", values.get("batch_size", "16")),
        "learning_rate": values.get("head_learning_rate", "1e-3"),
        "optimizer": values.get("head_optimizer", values.get("optimizer", "adaptive_moment")),
        "seed": values["seed"],
        "freeze_extractor": values.get("freeze_extractor", "true"),
        "class_weighting": values.get("class_weighting", "false"),
    }
    heads = {
        nets.AGE: TrainConfig.from_mapping({**head_values, "loss": values.get("age_loss", "mse")}),
        nets.GENDER: TrainConfig.from_mapping({**head_values, "loss": "cross_entropy"}),
        nets.ETHNICITY: TrainConfig.from_mapping({**head_values, "loss": "cross_entropy"}),
    }
    raw_hidden = values.get("head_hidden", "256")
    try:
        hidden = tuple(int(v) for v in raw_hidden.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for head_hidden: {raw_hidden!r}") from None
    return identity, heads, hidden


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    split = Split.load(args.split)
    values = read_config(args.config)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    identity_cfg, head_cfgs, hidden = train_configs(values)
    spec = network_spec_from_config(values, manifest.num_identities)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ckpt, report = train_identity(manifest, split, spec, identity_cfg)
    save_checkpoint(ckpt, out / "identity.ckpt")
    _write_json(out / "identity_report.json", report.to_dict())
    test_acc = report.final["test_accuracy"]
    print(f"identity: train accuracy {report.final['train_accuracy']:.4f}, "
          f"test accuracy {'n/a' if test_acc is None else format(test_acc, '.4f')}")

    cache = Path(os.environ[CACHE_ENV]) if os.environ.get(CACHE_ENV) else out / "feature_cache"
    train_feats = precompute_features(ckpt, manifest, split.train, cache)
    test_feats = precompute_features(ckpt, manifest, split.test, cache)
    summary = {"identity": report.final}
    for kind, cfg in head_cfgs.items():
        attr = HEAD_NAMES[kind]

        def label(image_id):
            subject = manifest.subject(manifest.image(image_id).subject_id)
            return getattr(subject, attr)

        if cfg.freeze_extractor:
            head, head_report = train_attribute_head(
                train_feats, {i: label(i) for i in split.train}, kind, cfg, hidden,
                eval_features=test_feats, eval_labels={i: label(i) for i in split.test})
        else:
            extractor, head, head_report = finetune_attribute_head(
                ckpt, manifest, split.train, {i: label(i) for i in split.train}, kind, cfg, hidden)
            save_checkpoint(extractor, out / f"{attr}_extractor.ckpt")
        save_checkpoint(head, out / HEAD_FILES[kind])
        _write_json(out / f"{attr}_report.json", head_report.to_dict())
        summary[attr] = head_report.final
        print(f"{attr}: {head_report.final}")
    _write_json(out / "train_summary.json", summary)
    return EXIT_OK


def _prediction_ids(args, manifest) -> list[str]:
    if args.ids:
        text = Path(args.ids).read_text(encoding="utf-8")
        return [line.strip() for line in text.splitlines() if line.strip()]
    if args.split:
        split = Split.load(args.split)
        return {"train": list(split.train), "test": list(split.test),
                "all": list(split.train) + list(split.test)}[args.subset]
    return [im.image_id for im in manifest.images]


def predict_record(extractor: Checkpoint, heads: dict, manifest, image_id: str,
                   head_extractors: dict | None = None) -> PredictionRecord:
    im = manifest.image(image_id)
    image = manifest.load_image(image_id)
    identity, feats = nets.identity_with_features(extractor, image)
    head_extractors = head_extractors or {}

    def head_input(kind):
        other = head_extractors.get(kind)
        return feats if other is None else nets.extract_features(other, image)

    age = float(nets.head_outputs(heads[nets.AGE], head_input(nets.AGE))[0, 0])
    return PredictionRecord(
        image_id=image_id, subject_id=im.subject_id, filter_id=im.filter_id,
        identity_probs=identity.probs, predicted_identity=identity.predicted,
        age_pred=min(max(age, 0.0), nets.MAX_AGE),
        gender_probs=nets.softmax(nets.head_outputs(heads[nets.GENDER], head_input(nets.GENDER))[0]),
        ethnicity_probs=nets.softmax(nets.head_outputs(heads[nets.ETHNICITY], head_input(nets.ETHNICITY))[0]),
    )


def cmd_predict(args) -> int:
    manifest = load_manifest(args.manifest)
    ckpt_dir = Path(args.checkpoints)
    extractor = load_checkpoint(ckpt_dir / "identity.ckpt")
    heads = {kind: load_checkpoint(ckpt_dir / name) for kind, name in HEAD_FILES.items()}
    head_extractors = {kind: load_checkpoint(ckpt_dir / f"{HEAD_NAMES[kind]}_extractor.ckpt")
                       for kind in HEAD_FILES if (ckpt_dir / f"{HEAD_NAMES[kind]}_extractor.ckpt").is_file()}
    if tuple(extractor.classes) != manifest.identity_classes:
        raise DomainError("checkpoint identity classes do not match the manifest subjects")
    records, failed = [], 0
    for image_id in _prediction_ids(args, manifest):
        try:
            records.append(predict_record(extractor, heads, manifest, image_id, head_extractors))
        except (LookupError, ValueError, OSError) as exc:
            records.append(ErrorRecord(image_id, str(exc)))
            failed += 1
    write_dump(records, args.out)
    print(f"{len(records)} predictions -> {args.out}" + (f" ({failed} failed)" if failed else ""))
    return EXIT_DOMAIN if failed else EXIT_OK


def cmd_analyze(args) -> int:
    manifest = load_manifest(args.manifest)
    records = read_dump(args.predictions)
    test_ids = Split.load(args.split).test if args.split else None
    result = analyze(records, manifest, args.threshold, test_ids)
    result.write(args.out)
    if result.distortion is not None:
        breaking = [result.filter_labels.get(f, f) for f in result.distortion.breaking]
        print(f"breaking filters (d > {args.threshold}): {', '.join(breaking) if breaking else 'none'}")
    print(f"identity accuracy {result.identity.accuracy:.6f}; analysis -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    analysis = load_analysis(args.analysis)
    written = write_reports(analysis, args.out)
    if args.format:
        sys.stdout.write(render_table(analysis["distortion"], args.format, analysis["filter_labels"]))
    print(f"{len(written)} report files -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffsense", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("split", help="write a train/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.8)
    p.add_argument("--global", dest="global_split", action="store_true",
                   help="split all images at once instead of per subject")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the identity network and attribute heads")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write a prediction dump")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split")
    p.add_argument("--subset", choices=("train", "test", "all"), default="test")
    p.add_argument("--ids", help="file with one image id per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("analyze", help="compute every metric report from a dump")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=BREAKING_THRESHOLD)
    p.add_argument("--split", help="also score the split's test images on their own")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="render analysis JSON into tables")
    p.add_argument("--analysis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("markdown", "csv"),
                   help="also print the distortion table in this format")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ManifestError as exc:
        for problem in exc.problems:
            _err(problem)
        return EXIT_DOMAIN
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO
    except (ValueError, LookupError, DomainError) as exc:
        _err(str(exc))
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
