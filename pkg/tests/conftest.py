"""Shared fixtures.

The expensive fixtures (the pinned world and the preset training grid)
are session-scoped so the acceptance tests and the trainer tests share
one copy.  Everything is seeded, so sharing does not couple tests.
"""

import os
import time

import numpy as np
import pytest

from cmcr import ablation, evaluate, store, synth, trainer


@pytest.fixture(scope="session")
def pinned_world(tmp_path_factory):
    """Default synthetic world written to disk, plus its 50/50 split."""
    root = tmp_path_factory.mktemp("pinned")
    world_dir = str(root / "world")
    world = synth.generate(synth.SynthConfig())
    synth.save_world(world, world_dir)
    paths = ablation._split_paths(world_dir, str(root / "run"), 0.5)
    return {"root": str(root), "world_dir": world_dir, "paths": paths}


@pytest.fixture(scope="session")
def preset_grid(pinned_world):
    """Training runs for presets C, F, H, J, K over seeds 7, 8, 9.

    One shared prepared-precomputation directory; each run gets its own
    output directory.  Takes about a minute, paid once per session.
    """
    paths = pinned_world["paths"]
    root = pinned_world["root"]
    t1m = store.load(paths["corpus_text1"])
    ev1 = store.load(paths["eval_space1"])
    grid = {}
    started = time.monotonic()
    for letter in "CFHJK":
        for seed in (7, 8, 9):
            over = {"seed": seed}
            if letter != "J":
                over["prepared_dir"] = os.path.join(root, "prep")
            cfg = ablation._preset_cfg(
                f"ablation-{letter}", paths,
                os.path.join(root, f"run-{letter}-s{seed}"), over)
            run, report = ablation.train_and_eval(
                cfg, paths["eval_space1"], paths["eval_space2"])
            proj_text = trainer.infer(run.ckpt_f1, t1m)
            proj_image = trainer.infer(run.ckpt_f1, ev1)
            grid[(letter, seed)] = {
                "run": run,
                "report": report,
                "gap": evaluate.modality_gap(proj_text, proj_image),
            }
    return {"runs": grid, "elapsed": time.monotonic() - started}


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    """Small world and split for fast trainer and CLI tests."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = synth.SynthConfig(n_items=120, d_latent=8, d_space1=16,
                            d_space2=16, seed=3)
    world = synth.generate(cfg)
    world_dir = str(root / "world")
    synth.save_world(world, world_dir)
    paths = ablation._split_paths(world_dir, str(root / "run"), 0.5)
    return {"root": str(root), "world_dir": world_dir, "paths": paths,
            "config": cfg}


def tiny_train_config(paths, out_dir, **overrides):
    base = {
        "corpus_text1": paths["corpus_text1"],
        "corpus_text2": paths["corpus_text2"],
        "bank1": paths["bank1"],
        "bank2": paths["bank2"],
        "out_dir": out_dir,
        "batch_size": 32,
        "epochs": 2,
        "lr_init": 1e-2,
        "sigma2": 0.001,
        "d_hidden": 32,
        "d_out": 16,
        "seed": 5,
    }
    base.update(overrides)
    return trainer.TrainConfig.from_dict(base)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
