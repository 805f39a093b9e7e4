"""Command line interface.

One executable, seven subcommands: convert, enhance, synth, train, infer,
eval, ablate.  Configuration comes from JSON files with --set key=value
overrides on top; unknown keys are rejected, never ignored.  The
environment variable CMCR_SEED, when set, overrides the configured seed
for synth, train and ablate.  Every run writes a manifest with the fully
resolved configuration and SHA-256 fingerprints of its inputs.

Exit codes: 0 success, 1 domain error (--json-errors switches the stderr
message to JSON), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

import cmcr
from cmcr import ablation, enhance, evaluate, figures, store, synth, trainer
from cmcr.errors import CmcrError, ConfigInvalidError, IoFailureError


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_sets(config: dict, pairs) -> dict:
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigInvalidError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        config[key] = _parse_value(value)
    return config


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalidError(f"{path}: invalid JSON: {exc}") from exc


def _env_seed() -> int | None:
    raw = os.environ.get("CMCR_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigInvalidError(f"CMCR_SEED must be an integer, got "
                                 f"{raw!r}") from exc


def _manifest_path(out: str) -> str:
    if os.path.isdir(out):
        return os.path.join(out, "manifest.json")
    return str(out) + ".manifest.json"


def write_manifest(out, command: str, config: dict, inputs) -> str:
    entries = {}
    for p in inputs:
        entries[str(p)] = synth.fingerprint_files([p])
    path = _manifest_path(out)
    payload = {"tool": "cmcr", "version": cmcr.__version__,
               "command": command, "config": config,
               "input_fingerprints": entries}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ------------------------------------------------------------- subcommands

def cmd_convert(args) -> int:
    data = store.read_text_matrix(args.input)
    ids = None
    if args.ids:
        with open(args.ids, "r", encoding="utf-8") as fh:
            ids = [line.rstrip("\n") for line in fh if line.strip()]
    m = store.EmbeddingMatrix(data.astype(np.float32), ids=ids)
    if args.normalize:
        m = store.normalize(m)
    store.save(m, args.output)
    write_manifest(args.output, "convert",
                   {"input": args.input, "normalize": args.normalize,
                    "ids": args.ids, "output": args.output},
                   [args.input])
    print(f"wrote {m.rows}x{m.dim} matrix to {args.output} "
          f"(normalized={m.normalized})")
    return 0


def cmd_enhance(args) -> int:
    texts = store.load(args.texts)
    bank = enhance.MemoryBank(store.load(args.bank), label=args.bank)
    cfg = enhance.EnhancementConfig(tau1=args.tau1, chunk=args.chunk,
                                    top_k=args.top_k)
    out = enhance.precompute_consistent(texts, bank, cfg)
    store.save(out, args.out)
    write_manifest(args.out, "enhance",
                   {"texts": args.texts, "bank": args.bank,
                    "tau1": args.tau1, "chunk": args.chunk,
                    "top_k": args.top_k, "out": args.out},
                   [args.texts, args.bank])
    print(f"aggregated {out.rows} rows against {bank.rows}-row bank "
          f"-> {args.out}")
    return 0


def cmd_synth(args) -> int:
    config = _load_json(args.config) if args.config else {}
    _apply_sets(config, args.set)
    seed = _env_seed()
    if seed is not None:
        config["seed"] = seed
    cfg = synth.SynthConfig.from_dict(config)
    world = synth.generate(cfg)
    fp = synth.save_world(world, args.out)
    write_manifest(args.out, "synth", cfg.to_dict(),
                   [args.config] if args.config else [])
    print(f"world of {cfg.n_items} items written to {args.out}")
    print(f"fingerprint {fp}")
    return 0


def _resolve_train_config(args) -> trainer.TrainConfig:
    config: dict = {}
    if args.preset:
        config.update(trainer.preset_config(args.preset))
    if args.config:
        file_cfg = _load_json(args.config)
        config.update(file_cfg)
    _apply_sets(config, args.set)
    seed = _env_seed()
    if seed is not None:
        config["seed"] = seed
    if not config:
        raise ConfigInvalidError("train needs --config and/or --preset")
    return trainer.TrainConfig.from_dict(config)


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    run = trainer.train(cfg)
    if cfg.world_dir:
        inputs = [os.path.join(cfg.world_dir, f"{n}.emb")
                  for n in synth.MODALITIES]
    else:
        inputs = [cfg.corpus_text1, cfg.corpus_text2, cfg.bank1, cfg.bank2]
    write_manifest(cfg.out_dir, "train", run.config, inputs)
    figures.training_curves(run.epochs,
                            os.path.join(cfg.out_dir, "train_curves.png"))
    final = run.epochs[-1]
    print(f"trained {len(run.epochs)} epochs ({run.total_steps} steps); "
          f"final L={final['L']:.6f}")
    print(f"checkpoints: {run.ckpt_f1} {run.ckpt_f2}")
    print(f"log: {run.log_path}")
    return 0


def cmd_infer(args) -> int:
    matrix = store.load(args.input)
    out = trainer.infer(args.ckpt, matrix)
    store.save(out, args.out)
    write_manifest(args.out, "infer",
                   {"ckpt": args.ckpt, "input": args.input,
                    "out": args.out},
                   [args.ckpt, args.input])
    print(f"projected {out.rows} rows -> {args.out}")
    return 0


def _read_gt(path):
    values = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    values.append(int(line))
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    return values


def cmd_eval_retrieval(args) -> int:
    queries = store.load(args.queries)
    gallery = store.load(args.gallery)
    if args.gt:
        gt = _read_gt(args.gt)
    else:
        gt = list(range(queries.rows))  # identity pairing
    report = evaluate.retrieval(queries, gallery, gt)
    payload = report.to_dict()
    payload["modality_gap"] = evaluate.modality_gap(queries, gallery) \
        if queries.dim == gallery.dim else None
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(args.report, "eval-retrieval",
                   {"queries": args.queries, "gallery": args.gallery,
                    "gt": args.gt, "report": args.report},
                   [args.queries, args.gallery]
                   + ([args.gt] if args.gt else []))
    print(f"mAP {report.map_pct:.4f}  R@1 {report.r1_pct:.4f}  "
          f"R@5 {report.r5_pct:.4f}  ({report.queries} queries, "
          f"{report.gallery} gallery)")
    return 0


def _read_records(path):
    records = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            fields = set(reader.fieldnames or [])
            needed = {"has_gt", "iou", "confidence"}
            if not needed <= fields:
                raise ConfigInvalidError(
                    f"{path}: needs columns {sorted(needed)}, "
                    f"found {sorted(fields)}")
            for row in reader:
                has_gt = row["has_gt"].strip().lower() in ("1", "true", "yes")
                records.append(evaluate.DetectionRecord(
                    has_gt=has_gt,
                    iou=float(row["iou"]) if row["iou"].strip() else 0.0,
                    confidence=float(row["confidence"])))
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    return records


def cmd_eval_counterfactual(args) -> int:
    records = _read_records(args.records)
    cfg = evaluate.CounterfactualConfig(gamma=args.gamma)
    ap, max_f1 = evaluate.counterfactual_metrics(records, cfg)
    payload = {"AP": ap, "MaxF1": max_f1, "gamma": args.gamma,
               "records": len(records)}
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_manifest(args.report, "eval-counterfactual",
                       payload, [args.records])
    print(f"AP {ap:.4f}  MaxF1 {max_f1:.4f}  ({len(records)} records)")
    return 0


def cmd_ablate(args) -> int:
    overrides: dict = {}
    _apply_sets(overrides, args.set)
    seed = _env_seed()
    if seed is not None:
        overrides["seed"] = seed
    if args.suite == "table5":
        comparison = ablation.run_table5(args.world, args.out, overrides)
        n = len(comparison["per_preset"])
        print(f"table5 suite: {n} presets -> {args.out}")
    else:
        comparison = ablation.run_noise_sweep(args.world, args.out,
                                              overrides)
        print(f"noise sweep: {len(comparison['points'])} levels "
              f"-> {args.out}")
    write_manifest(args.out, f"ablate-{args.suite}",
                   {"suite": args.suite, "world": args.world,
                    "overrides": overrides},
                   [os.path.join(args.world, f"{n}.emb")
                    for n in synth.MODALITIES])
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmcr",
        description="Connect two contrastive embedding spaces through "
                    "their shared modality.")
    parser.add_argument("--json-errors", action="store_true",
                        help="emit domain errors as JSON on stderr")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="plain-text matrix -> CMCR-EMB")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--ids", help="optional ID file, one per row")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("enhance",
                       help="precompute memory-aggregated partners")
    p.add_argument("--texts", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--tau1", type=float, default=enhance.DEFAULT_TAU1)
    p.add_argument("--chunk", type=int, default=enhance.DEFAULT_CHUNK)
    p.add_argument("--top-k", type=int, default=None, dest="top_k",
                   help="optional softmax truncation (approximation)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("synth", help="generate a synthetic two-space world")
    p.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the two projectors")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--preset",
                   help="paper, synthetic, or ablation-A..ablation-K")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="project a matrix through a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluation metrics")
    esub = p.add_subparsers(dest="eval_command", required=True)
    pr = esub.add_parser("retrieval", help="single-relevant-item retrieval")
    pr.add_argument("--queries", required=True)
    pr.add_argument("--gallery", required=True)
    pr.add_argument("--gt", help="text file, one gallery index per query "
                                 "line; identity pairing when omitted")
    pr.add_argument("--report", required=True)
    pr.set_defaults(func=cmd_eval_retrieval)
    pc = esub.add_parser("counterfactual",
                         help="AP / Max-F1 over detection records")
    pc.add_argument("--records", required=True,
                    help="CSV with columns has_gt,iou,confidence")
    pc.add_argument("--gamma", type=float, default=0.5)
    pc.add_argument("--report")
    pc.set_defaults(func=cmd_eval_counterfactual)

    p = sub.add_parser("ablate", help="run an ablation suite")
    p.add_argument("--suite", choices=("table5", "noise"), required=True)
    p.add_argument("--world", required=True,
                   help="directory written by `cmcr synth`")
    p.add_argument("--out", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CmcrError as exc:
        if args.json_errors:
            print(json.dumps({"error": type(exc).__name__,
                              "message": str(exc)}), file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
