"""Training orchestration: precomputation, batching, optimization, checkpoints.

The pipeline never touches an encoder.  It loads two text matrices (the
overlapping modality as seen by each source space) and two frozen memory
banks, precomputes the memory-aggregated cross-modal partners offline,
then trains the two projectors with fresh completion noise per batch.
Inputs are read-only throughout; all artifacts land in the output
directory.

Everything is driven by named sub-streams of one seed, so two runs with
the same config produce bitwise-identical logs and checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from cmcr import enhance, losses, optim, projector, store, synth
from cmcr.errors import (
    ConfigInvalidError,
    NonFiniteLossError,
    ZeroRowError,
)
from cmcr.rng import PortableRng

# Named rng sub-streams hanging off the config seed.
STREAM_INIT_F1 = 101
STREAM_INIT_F2 = 102
STREAM_SHUFFLE = 201
STREAM_NOISE = 202
STREAM_CONSISTENCY = 301

CONSISTENCY_MODES = ("softmax", "argmax", "random")

_PATH_FIELDS = ("corpus_text1", "corpus_text2", "bank1", "bank2")

# JSON spelling of attributes that cannot be Python identifiers/keywords.
_JSON_ALIASES = {"lambda": "intra_weight"}
_ATTR_TO_JSON = {v: k for k, v in _JSON_ALIASES.items()}


@dataclass
class TrainConfig:
    # inputs: either four explicit matrix paths, or a synthetic world dir
    corpus_text1: str | None = None
    corpus_text2: str | None = None
    bank1: str | None = None
    bank2: str | None = None
    world_dir: str | None = None
    train_fraction: float = 0.5
    out_dir: str = "runs/run"
    prepared_dir: str | None = None

    # scalars
    tau1: float = 0.01
    tau2: float = 0.01
    tau3: float = 0.01
    sigma2: float = 0.004
    intra_weight: float = 0.1  # JSON key "lambda"
    batch_size: int = 10240
    epochs: int = 36
    lr_init: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    # projector shape (d_in comes from the data)
    d_hidden: int = 1024
    d_out: int = 512
    final_relu: bool = True

    # enhancement
    chunk: int = enhance.DEFAULT_CHUNK
    top_k: int | None = None
    intra_squared: bool = False

    # ablation switches
    disable_ttc: bool = False
    disable_avc: bool = False
    disable_intra_space1: bool = False
    disable_intra_space2: bool = False
    disable_noise: bool = False
    disable_renorm: bool = False
    consistency: str = "softmax"

    save_every_epoch: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigInvalidError("batch_size must be >= 2")
        if self.epochs < 1:
            raise ConfigInvalidError("epochs must be >= 1")
        for name in ("tau1", "tau2", "tau3", "lr_init"):
            if getattr(self, name) <= 0:
                raise ConfigInvalidError(f"{name} must be > 0")
        if self.sigma2 < 0 or self.intra_weight < 0:
            raise ConfigInvalidError("sigma2 and lambda must be >= 0")
        if self.consistency not in CONSISTENCY_MODES:
            raise ConfigInvalidError(
                f"consistency must be one of {CONSISTENCY_MODES}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigInvalidError("train_fraction must be in (0, 1)")
        if min(self.d_hidden, self.d_out) < 2:
            raise ConfigInvalidError("projector dims must be >= 2")
        explicit = [getattr(self, n) for n in _PATH_FIELDS]
        if self.world_dir is not None and any(p is not None for p in explicit):
            raise ConfigInvalidError(
                "give either world_dir or explicit corpus/bank paths")
        if self.world_dir is None and any(p is None for p in explicit):
            raise ConfigInvalidError(
                "missing input paths: set world_dir or all of "
                + ", ".join(_PATH_FIELDS))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for attr, key in _ATTR_TO_JSON.items():
            d[key] = d.pop(attr)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        for key, attr in _JSON_ALIASES.items():
            if key in d:
                if attr in d:
                    raise ConfigInvalidError(
                        f"both '{key}' and '{attr}' given")
                d[attr] = d.pop(key)
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalidError(f"unknown config keys: {sorted(unknown)}")
        try:
            return TrainConfig(**d)
        except TypeError as exc:
            raise ConfigInvalidError(str(exc)) from exc


def preset_config(name: str) -> dict:
    """Named starting points; returned as plain dicts for merging."""
    # The synthetic preset runs only 200 optimizer steps, so the
    # contrastive terms must saturate early for the attraction-only
    # term to leave a visible footprint: slightly coarser temperatures
    # than the large-scale defaults, less completion noise (the toy
    # world has far less encoding loss than a real encoder), and a
    # from-scratch learning rate.
    base_synth = {
        "world_dir": "world",
        "train_fraction": 0.5,
        "out_dir": "runs/synthetic",
        "batch_size": 256,
        "epochs": 50,
        "lr_init": 1e-2,
        "tau2": 0.02,
        "tau3": 0.05,
        "sigma2": 0.001,
        "lambda": 0.1,
        "d_hidden": 128,
        "d_out": 64,
        "seed": 7,
    }
    presets: dict[str, dict] = {
        # documented large-scale defaults; expects real embedding dumps
        "paper": {
            "batch_size": 10240,
            "epochs": 36,
            "lr_init": 1e-3,
            "sigma2": 0.004,
            "lambda": 0.1,
            "d_hidden": 1024,
            "d_out": 512,
            "seed": 0,
        },
        "synthetic": dict(base_synth),
    }
    ablation_flags = {
        "A": {"disable_intra_space2": True},
        "B": {"disable_intra_space1": True},
        "C": {"disable_intra_space1": True, "disable_intra_space2": True},
        "D": {"disable_ttc": True},
        "E": {"disable_avc": True},
        "F": {"disable_ttc": True, "disable_avc": True},
        "G": {"disable_renorm": True},
        "H": {"disable_renorm": True, "disable_noise": True},
        "I": {"consistency": "argmax"},
        "J": {"consistency": "random"},
        "K": {},
    }
    for letter, flags in ablation_flags.items():
        cfg = dict(base_synth)
        cfg.update(flags)
        cfg["out_dir"] = f"runs/ablation-{letter}"
        presets[f"ablation-{letter}"] = cfg
    if name not in presets:
        raise ConfigInvalidError(
            f"unknown preset {name!r}; choose from {sorted(presets)}")
    return presets[name]


def ablation_preset_letters() -> list[str]:
    return list("ABCDEFGHIJK")


@dataclass
class PreparedCorpus:
    text1: store.EmbeddingMatrix
    text2: store.EmbeddingMatrix
    cross1: store.EmbeddingMatrix
    cross2: store.EmbeddingMatrix
    fingerprint: str
    directory: str
    from_cache: bool = False


def _resolve_inputs(cfg: TrainConfig) -> dict:
    """Explicit paths, or materialized split files from a synthetic world."""
    if cfg.world_dir is None:
        return {n: getattr(cfg, n) for n in _PATH_FIELDS}
    split_dir = os.path.join(cfg.out_dir, "split")
    marker = os.path.join(split_dir, "split.json")
    want = {"world_dir": str(cfg.world_dir),
            "train_fraction": cfg.train_fraction}
    if os.path.exists(marker):
        with open(marker, "r", encoding="utf-8") as fh:
            have = json.load(fh)
        if all(have.get(k) == v for k, v in want.items()):
            return {n: have["paths"][n] for n in _PATH_FIELDS}
    paths = synth.materialize_split(cfg.world_dir, split_dir,
                                    cfg.train_fraction)
    return {n: paths[n] for n in _PATH_FIELDS}


def _prepare_fingerprint(cfg: TrainConfig, paths: dict) -> str:
    base = synth.fingerprint_files(paths.values())
    extra = {
        "tau1": cfg.tau1,
        "chunk": cfg.chunk,
        "top_k": cfg.top_k,
        "consistency": cfg.consistency,
        "seed": cfg.seed if cfg.consistency == "random" else None,
        "base": base,
    }
    return projector.config_hash(extra)


def prepare(cfg: TrainConfig) -> PreparedCorpus:
    """Load the paired corpus and precompute cross-modal partner matrices.

    Results are persisted under the prepared directory keyed by a content
    fingerprint; a rerun on unchanged inputs reuses the files instead of
    recomputing.
    """
    paths = _resolve_inputs(cfg)
    directory = cfg.prepared_dir or os.path.join(cfg.out_dir, "prepared")
    fp = _prepare_fingerprint(cfg, paths)
    marker = os.path.join(directory, "fingerprint.json")
    names = ("text1", "text2", "cross1", "cross2")
    if os.path.exists(marker):
        with open(marker, "r", encoding="utf-8") as fh:
            have = json.load(fh)
        if have.get("fingerprint") == fp:
            mats = {n: store.load(os.path.join(directory, f"{n}.emb"))
                    for n in names}
            return PreparedCorpus(fingerprint=fp, directory=directory,
                                  from_cache=True, **mats)

    text1 = store.load(paths["corpus_text1"])
    text2 = store.load(paths["corpus_text2"])
    store.require_normalized(text1, "corpus_text1")
    store.require_normalized(text2, "corpus_text2")
    store.PairedCorpus(text1, text2)  # row-count check
    bank1 = enhance.MemoryBank(store.load(paths["bank1"]), label="bank1")
    bank2 = enhance.MemoryBank(store.load(paths["bank2"]), label="bank2")

    if cfg.consistency == "softmax":
        ecfg = enhance.EnhancementConfig(tau1=cfg.tau1, sigma2=cfg.sigma2,
                                         seed=cfg.seed, chunk=cfg.chunk,
                                         top_k=cfg.top_k)
        cross1 = enhance.precompute_consistent(text1, bank1, ecfg)
        cross2 = enhance.precompute_consistent(text2, bank2, ecfg)
    elif cfg.consistency == "argmax":
        cross1 = enhance.nearest_consistent(text1, bank1, chunk=cfg.chunk)
        cross2 = enhance.nearest_consistent(text2, bank2, chunk=cfg.chunk)
    else:
        rng = PortableRng(cfg.seed, STREAM_CONSISTENCY)
        cross1 = enhance.random_consistent(text1, bank1, rng)
        cross2 = enhance.random_consistent(text2, bank2, rng)

    os.makedirs(directory, exist_ok=True)
    mats = {"text1": text1, "text2": text2, "cross1": cross1,
            "cross2": cross2}
    for n in names:
        store.save(mats[n], os.path.join(directory, f"{n}.emb"))
    with open(marker, "w", encoding="utf-8") as fh:
        json.dump({"fingerprint": fp, "inputs": {k: str(v) for k, v
                                                 in paths.items()}},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return PreparedCorpus(fingerprint=fp, directory=directory, **mats)


@dataclass
class TrainRun:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    ckpt_f1: str = ""
    ckpt_f2: str = ""
    out_dir: str = ""
    log_path: str = ""
    fingerprint: str = ""
    total_steps: int = 0


def _steps_per_epoch(n: int, batch_size: int) -> int:
    # the trailing partial batch runs unless it is too small for batch norm
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


def _renorm_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0.0
    if np.any(zero):
        raise ZeroRowError(f"row {int(np.argmax(zero))} has zero norm")
    return x / norms[:, None]


def train(cfg: TrainConfig) -> TrainRun:
    """Run the full optimization; returns per-epoch logs and checkpoint paths.

    Per epoch: seeded shuffle; per batch: completion noise on all four
    embedding groups (four independent draws), both projectors forward in
    train mode, combined loss, exact backward, one AdamW step per
    projector under the shared cosine schedule.
    """
    prepared = prepare(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)

    t1 = prepared.text1.data.astype(np.float64)
    c1 = prepared.cross1.data.astype(np.float64)
    t2 = prepared.text2.data.astype(np.float64)
    c2 = prepared.cross2.data.astype(np.float64)
    n = t1.shape[0]

    spe = _steps_per_epoch(n, cfg.batch_size) if n >= 2 else 0
    if spe == 0:
        raise ConfigInvalidError(
            f"corpus of {n} rows yields no trainable batch of >= 2 rows")
    total_steps = cfg.epochs * spe

    params1 = projector.init((t1.shape[1], cfg.d_hidden, cfg.d_out),
                             cfg.seed, stream=STREAM_INIT_F1,
                             final_relu=cfg.final_relu)
    params2 = projector.init((t2.shape[1], cfg.d_hidden, cfg.d_out),
                             cfg.seed, stream=STREAM_INIT_F2,
                             final_relu=cfg.final_relu)
    ocfg = optim.AdamWConfig(lr_init=cfg.lr_init, beta1=cfg.beta1,
                             beta2=cfg.beta2, eps=cfg.eps,
                             weight_decay=cfg.weight_decay,
                             total_steps=total_steps)
    opt1 = optim.AdamW(params1.learnable(), ocfg,
                       no_decay=projector.NO_DECAY)
    opt2 = optim.AdamW(params2.learnable(), ocfg,
                       no_decay=projector.NO_DECAY)
    lcfg = losses.LossConfig(tau2=cfg.tau2, tau3=cfg.tau3,
                             intra_weight=cfg.intra_weight,
                             intra_squared=cfg.intra_squared)

    shuffle_rng = PortableRng(cfg.seed, STREAM_SHUFFLE)
    noise_rng = PortableRng(cfg.seed, STREAM_NOISE)

    def complete(x: np.ndarray) -> np.ndarray:
        if not cfg.disable_noise:
            return enhance.add_noise(x, cfg.sigma2, noise_rng,
                                     renormalize=not cfg.disable_renorm)
        if not cfg.disable_renorm:
            return _renorm_rows(x)
        return x

    resolved = cfg.to_dict()
    cfg_hash = projector.config_hash(resolved)
    run = TrainRun(config=resolved, out_dir=cfg.out_dir,
                   log_path=os.path.join(cfg.out_dir, "train_log.jsonl"),
                   fingerprint=prepared.fingerprint,
                   total_steps=total_steps)

    step = 0
    with open(run.log_path, "w", encoding="utf-8") as log:
        for epoch in range(1, cfg.epochs + 1):
            perm = shuffle_rng.permutation(n)
            sums = {"L": 0.0, "L_ttc": 0.0, "L_avc": 0.0, "L_intra": 0.0}
            batches = 0
            last_lr = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                if idx.shape[0] < 2:
                    continue
                bt1 = complete(t1[idx])
                bc1 = complete(c1[idx])
                bt2 = complete(t2[idx])
                bc2 = complete(c2[idx])

                out1, cache1 = projector.forward(
                    params1, np.vstack([bt1, bc1]), "train")
                out2, cache2 = projector.forward(
                    params2, np.vstack([bt2, bc2]), "train")
                b = idx.shape[0]
                batch_emb = losses.BatchEmbeddings(
                    text1=out1[:b], cross1=out1[b:],
                    text2=out2[:b], cross2=out2[b:])
                res = losses.total_loss(
                    batch_emb, lcfg,
                    use_ttc=not cfg.disable_ttc,
                    use_avc=not cfg.disable_avc,
                    use_intra1=not cfg.disable_intra_space1,
                    use_intra2=not cfg.disable_intra_space2)
                if not np.isfinite(res.value):
                    dump = os.path.join(cfg.out_dir, "nonfinite_batch.json")
                    with open(dump, "w", encoding="utf-8") as fh:
                        json.dump({"epoch": epoch, "step": step,
                                   "indices": idx.tolist()}, fh)
                    raise NonFiniteLossError(
                        f"loss became non-finite at epoch {epoch} step "
                        f"{step}; batch indices dumped to {dump}")

                grads1 = projector.backward(
                    params1, cache1,
                    np.vstack([res.grads.text1, res.grads.cross1]))
                grads2 = projector.backward(
                    params2, cache2,
                    np.vstack([res.grads.text2, res.grads.cross2]))
                last_lr = optim.lr_at(step, ocfg)
                opt1.step(params1.learnable(), grads1)
                opt2.step(params2.learnable(), grads2)
                step += 1
                batches += 1
                sums["L"] += res.value
                sums["L_ttc"] += res.ttc
                sums["L_avc"] += res.avc
                sums["L_intra"] += res.intra

            record = {"epoch": epoch}
            record.update({k: v / batches for k, v in sums.items()})
            record["lr"] = last_lr
            run.epochs.append(record)
            log.write(json.dumps(record) + "\n")
            if cfg.save_every_epoch:
                for tag, params in (("f1", params1), ("f2", params2)):
                    projector.save_checkpoint(
                        params,
                        os.path.join(cfg.out_dir,
                                     f"{tag}_epoch{epoch:04d}.ckpt"),
                        step=step, config_hash=cfg_hash)

    run.ckpt_f1 = os.path.join(cfg.out_dir, "f1_final.ckpt")
    run.ckpt_f2 = os.path.join(cfg.out_dir, "f2_final.ckpt")
    projector.save_checkpoint(params1, run.ckpt_f1, step=step,
                              config_hash=cfg_hash)
    projector.save_checkpoint(params2, run.ckpt_f2, step=step,
                              config_hash=cfg_hash)
    with open(os.path.join(cfg.out_dir, "run.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"config": resolved, "config_hash": cfg_hash,
                   "fingerprint": prepared.fingerprint,
                   "total_steps": total_steps,
                   "checkpoints": {"f1": run.ckpt_f1, "f2": run.ckpt_f2},
                   "final": run.epochs[-1]},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run


def infer(ckpt_path, inputs):
    """Eval-mode projection through a saved checkpoint.

    Accepts an EmbeddingMatrix (returns one, flagged normalized) or a
    plain 2-D array (returns an array; zero rows give an empty output).
    """
    params, _ = projector.load_checkpoint(ckpt_path)
    raw = np.asarray(getattr(inputs, "data", inputs), dtype=np.float64)
    out, _ = projector.forward(params, raw, "eval")
    if isinstance(inputs, store.EmbeddingMatrix):
        return store.EmbeddingMatrix(out.astype(np.float32),
                                     ids=inputs.ids, normalized=True)
    return out
