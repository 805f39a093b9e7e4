"""Ablation suites over the synthetic world.

Both suites share one world and one split, train each configuration with
the same seed, score held-out image/audio retrieval through the trained
projectors, and emit a comparison report as JSON and CSV plus a rendered
figure.
"""

from __future__ import annotations

import csv
import json
import os

from cmcr import evaluate, figures, store, synth, trainer

NOISE_LEVELS = (0.0, 0.001, 0.002, 0.004, 0.008, 0.016)


def _split_paths(world_dir, out_dir, train_fraction: float) -> dict:
    split_dir = os.path.join(out_dir, "split")
    marker = os.path.join(split_dir, "split.json")
    if os.path.exists(marker):
        with open(marker, "r", encoding="utf-8") as fh:
            have = json.load(fh)
        if (have.get("world_dir") == str(world_dir)
                and have.get("train_fraction") == train_fraction):
            return have["paths"]
    return synth.materialize_split(world_dir, split_dir, train_fraction)


def train_and_eval(cfg: trainer.TrainConfig, eval_space1_path,
                   eval_space2_path) -> tuple[trainer.TrainRun, dict]:
    """One training run scored on held-out non-overlapping pairs."""
    run = trainer.train(cfg)
    eval1 = store.load(eval_space1_path)
    eval2 = store.load(eval_space2_path)
    proj1 = trainer.infer(run.ckpt_f1, eval1)
    proj2 = trainer.infer(run.ckpt_f2, eval2)
    report = evaluate.bidirectional_report(proj1, proj2)
    return run, report


def _preset_cfg(preset_name: str, paths: dict, out_dir: str,
                overrides: dict | None) -> trainer.TrainConfig:
    cfg = trainer.preset_config(preset_name)
    cfg.pop("world_dir", None)
    cfg.update({n: paths[n] for n in
                ("corpus_text1", "corpus_text2", "bank1", "bank2")})
    cfg["out_dir"] = out_dir
    # all softmax-consistency presets share one precomputation cache
    if overrides:
        cfg.update(overrides)
    return trainer.TrainConfig.from_dict(cfg)


def run_table5(world_dir, out_dir, overrides: dict | None = None) -> dict:
    """Train presets A-K on a shared world/seed; compare eval retrieval."""
    os.makedirs(out_dir, exist_ok=True)
    frac = trainer.preset_config("synthetic")["train_fraction"]
    if overrides and "train_fraction" in overrides:
        frac = overrides["train_fraction"]
    paths = _split_paths(world_dir, out_dir, frac)
    shared_prepared = os.path.join(out_dir, "prepared-softmax")
    per_preset = {}
    for letter in trainer.ablation_preset_letters():
        name = f"ablation-{letter}"
        base = trainer.preset_config(name)
        flags = {k: v for k, v in base.items()
                 if k.startswith(("disable_", "consistency"))
                 and v not in (False, "softmax")}
        run_over = dict(overrides or {})
        run_over.pop("train_fraction", None)
        if base.get("consistency", "softmax") == "softmax":
            run_over.setdefault("prepared_dir", shared_prepared)
        cfg = _preset_cfg(name, paths, os.path.join(out_dir, name), run_over)
        run, report = train_and_eval(cfg, paths["eval_space1"],
                                     paths["eval_space2"])
        per_preset[letter] = {"preset": name, "flags": flags,
                              "report": report,
                              "final_loss": run.epochs[-1]}
    comparison = {"suite": "table5", "world_dir": str(world_dir),
                  "per_preset": per_preset}
    _emit(comparison, out_dir, "table5")
    figures.ablation_bars(per_preset,
                          os.path.join(out_dir, "table5_map.png"))
    return comparison


def run_noise_sweep(world_dir, out_dir, overrides: dict | None = None,
                    levels=NOISE_LEVELS) -> dict:
    """Sweep the completion-noise variance on the default configuration."""
    os.makedirs(out_dir, exist_ok=True)
    frac = trainer.preset_config("synthetic")["train_fraction"]
    if overrides and "train_fraction" in overrides:
        frac = overrides["train_fraction"]
    paths = _split_paths(world_dir, out_dir, frac)
    points = []
    for sigma2 in levels:
        run_over = dict(overrides or {})
        run_over.pop("train_fraction", None)
        run_over["sigma2"] = sigma2
        if sigma2 == 0.0:
            run_over["disable_noise"] = True
        tag = f"sigma2-{sigma2:g}"
        cfg = _preset_cfg("synthetic", paths, os.path.join(out_dir, tag),
                          run_over)
        _, report = train_and_eval(cfg, paths["eval_space1"],
                                   paths["eval_space2"])
        points.append({"sigma2": sigma2, "mean_map": report["mean_map"],
                       "report": report})
    comparison = {"suite": "noise", "world_dir": str(world_dir),
                  "points": points}
    _emit(comparison, out_dir, "noise")
    figures.noise_curve(points, os.path.join(out_dir, "noise_map.png"))
    return comparison


def _emit(comparison: dict, out_dir, tag: str) -> None:
    with open(os.path.join(out_dir, f"{tag}.json"), "w",
              encoding="utf-8") as fh:
        json.dump(comparison, fh, indent=2, sort_keys=True)
        fh.write("\n")
    rows = []
    if tag == "table5":
        for letter, entry in comparison["per_preset"].items():
            rep = entry["report"]
            rows.append({
                "preset": letter,
                "flags": ";".join(f"{k}={v}" for k, v
                                  in sorted(entry["flags"].items())),
                "a2i_mAP": f"{rep['a2i']['mAP']:.4f}",
                "a2i_R@1": f"{rep['a2i']['R@1']:.4f}",
                "a2i_R@5": f"{rep['a2i']['R@5']:.4f}",
                "i2a_mAP": f"{rep['i2a']['mAP']:.4f}",
                "i2a_R@1": f"{rep['i2a']['R@1']:.4f}",
                "i2a_R@5": f"{rep['i2a']['R@5']:.4f}",
            })
    else:
        for point in comparison["points"]:
            rep = point["report"]
            rows.append({
                "sigma2": f"{point['sigma2']:g}",
                "mean_mAP": f"{point['mean_map']:.4f}",
                "a2i_mAP": f"{rep['a2i']['mAP']:.4f}",
                "i2a_mAP": f"{rep['i2a']['mAP']:.4f}",
            })
    with open(os.path.join(out_dir, f"{tag}.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
