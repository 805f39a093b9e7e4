"""Synthetic two-space world with known ground truth.

Items are latent unit vectors.  Each space embeds the latent through its
own fixed column-orthonormal map W_s; within a space, every modality
stream (text and image in space 1, text and audio in space 2) shares that
map but gets its own gap offset and its own encoder noise:

    e(z) = normalize(W_s z + g*b_sm + eps),   eps ~ N(0, noise_sigma^2 I)

Sharing W_s within a space makes the two modalities of one space
cosine-aligned up to gap and noise, which is what contrastive
pre-training produces and what memory-bank aggregation relies on; the
two spaces use independent maps, so they start out mutually unaligned
and the connection actually has to be learned.  Orthonormal maps make
each clean stream an isometric copy of the latent geometry, so
"correctly aligned" is well-defined and every downstream claim is
testable against row-index ground truth.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from cmcr.errors import ConfigInvalidError, FractionInvalidError, IoFailureError
from cmcr.rng import PortableRng
from cmcr.store import EmbeddingMatrix, PairedCorpus, load, save, take
from cmcr.enhance import MemoryBank

MODALITIES = ("space1_text", "space1_image", "space2_text", "space2_audio")
WORLD_MANIFEST = "world.json"
_SPLIT_STREAM = 1013904223  # dedicated rng stream for splitting


@dataclass(frozen=True)
class SynthConfig:
    n_items: int = 2000
    d_latent: int = 32
    d_space1: int = 64
    d_space2: int = 64
    noise_sigma: float = 0.05
    gap_magnitude: float = 0.5
    seed: int = 7

    def __post_init__(self):
        if min(self.n_items, self.d_latent, self.d_space1, self.d_space2) < 2:
            raise ConfigInvalidError("all counts must be >= 2")
        if self.d_latent > min(self.d_space1, self.d_space2):
            raise ConfigInvalidError(
                f"d_latent {self.d_latent} exceeds a space dim")
        if self.noise_sigma < 0 or self.gap_magnitude < 0:
            raise ConfigInvalidError("noise_sigma and gap_magnitude >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(SynthConfig)}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalidError(f"unknown config keys: {sorted(unknown)}")
        try:
            return SynthConfig(**d)
        except TypeError as exc:
            raise ConfigInvalidError(str(exc)) from exc


@dataclass
class SynthWorld:
    config: SynthConfig
    latent: np.ndarray
    streams: dict[str, EmbeddingMatrix]  # keyed by MODALITIES

    @property
    def n(self) -> int:
        return self.latent.shape[0]


def _unit_rows(rng: PortableRng, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _orthonormal_map(rng: PortableRng, d_out: int, d_in: int) -> np.ndarray:
    """Column-orthonormal d_out x d_in matrix via QR with a sign fix."""
    q, r = np.linalg.qr(rng.standard_normal((d_out, d_in)))
    return q * np.sign(np.diag(r))


def generate(cfg: SynthConfig) -> SynthWorld:
    """Deterministically build all five matrices from cfg.seed.

    Draw order is fixed: latent first, then per space its shared map
    followed by offset and noise for each of its two modality streams, in
    MODALITIES order.
    """
    rng = PortableRng(cfg.seed)
    latent = _unit_rows(rng, cfg.n_items, cfg.d_latent)
    space_maps = {
        "space1": _orthonormal_map(rng, cfg.d_space1, cfg.d_latent),
        "space2": _orthonormal_map(rng, cfg.d_space2, cfg.d_latent),
    }
    streams = {}
    for name in MODALITIES:
        space = name.split("_")[0]
        w = space_maps[space]
        d_s = w.shape[0]
        offset = _unit_rows(rng, 1, d_s)[0]
        eps = rng.normal(cfg.noise_sigma, size=(cfg.n_items, d_s))
        raw = latent @ w.T + cfg.gap_magnitude * offset + eps
        unit = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        streams[name] = EmbeddingMatrix(unit.astype(np.float32),
                                        normalized=True)
    return SynthWorld(config=cfg, latent=latent, streams=streams)


def fingerprint_files(paths) -> str:
    """SHA-256 over the concatenated bytes of the given files, in order."""
    h = hashlib.sha256()
    for p in sorted(str(q) for q in paths):
        h.update(os.path.basename(p).encode("utf-8"))
        try:
            with open(p, "rb") as fh:
                h.update(fh.read())
        except OSError as exc:
            raise IoFailureError(f"cannot read {p}: {exc}") from exc
    return h.hexdigest()


def save_world(world: SynthWorld, out_dir) -> str:
    """Write the five matrices plus a manifest; returns the fingerprint."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    latent_path = os.path.join(out_dir, "latent.emb")
    save(EmbeddingMatrix(world.latent.astype(np.float32), normalized=True),
         latent_path)
    paths.append(latent_path)
    for name in MODALITIES:
        p = os.path.join(out_dir, f"{name}.emb")
        save(world.streams[name], p)
        paths.append(p)
    fp = fingerprint_files(paths)
    manifest = {"config": world.config.to_dict(), "fingerprint": fp,
                "files": [os.path.basename(p) for p in paths]}
    with open(os.path.join(out_dir, WORLD_MANIFEST), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return fp


def load_world(world_dir) -> SynthWorld:
    manifest_path = os.path.join(world_dir, WORLD_MANIFEST)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoFailureError(f"cannot read {manifest_path}: {exc}") from exc
    cfg = SynthConfig.from_dict(manifest["config"])
    latent = load(os.path.join(world_dir, "latent.emb")).data.astype(
        np.float64)
    streams = {name: load(os.path.join(world_dir, f"{name}.emb"))
               for name in MODALITIES}
    return SynthWorld(config=cfg, latent=latent, streams=streams)


@dataclass
class WorldSplit:
    """Training views (texts + banks) and held-out evaluation pairs.

    The memory banks are built from the train-side image/audio rows, so
    nothing the trainer sees overlaps the eval items.
    """
    train_corpus: PairedCorpus
    bank1: MemoryBank
    bank2: MemoryBank
    eval_space1: EmbeddingMatrix   # held-out image-side rows
    eval_space2: EmbeddingMatrix   # held-out audio-side rows
    train_indices: np.ndarray
    eval_indices: np.ndarray


def split(world: SynthWorld, train_fraction: float,
          seed: int | None = None) -> WorldSplit:
    """Deterministic disjoint split of items into train and eval roles."""
    if not 0.0 < train_fraction < 1.0:
        raise FractionInvalidError(
            f"train_fraction must be in (0, 1), got {train_fraction}")
    n = world.n
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    rng = PortableRng(world.config.seed if seed is None else seed,
                      _SPLIT_STREAM)
    perm = rng.permutation(n)
    train_idx = np.sort(perm[:n_train])
    eval_idx = np.sort(perm[n_train:])
    corpus = PairedCorpus(take(world.streams["space1_text"], train_idx),
                          take(world.streams["space2_text"], train_idx))
    bank1 = MemoryBank(take(world.streams["space1_image"], train_idx),
                       label="space1-image")
    bank2 = MemoryBank(take(world.streams["space2_audio"], train_idx),
                       label="space2-audio")
    return WorldSplit(
        train_corpus=corpus,
        bank1=bank1,
        bank2=bank2,
        eval_space1=take(world.streams["space1_image"], eval_idx),
        eval_space2=take(world.streams["space2_audio"], eval_idx),
        train_indices=train_idx,
        eval_indices=eval_idx,
    )


def materialize_split(world_dir, dest_dir, train_fraction: float = 0.5,
                      seed: int | None = None) -> dict:
    """Write split matrices as files so training configs can point at them."""
    world = load_world(world_dir)
    parts = split(world, train_fraction, seed=seed)
    os.makedirs(dest_dir, exist_ok=True)
    names = {
        "corpus_text1": parts.train_corpus.left,
        "corpus_text2": parts.train_corpus.right,
        "bank1": parts.bank1.matrix,
        "bank2": parts.bank2.matrix,
        "eval_space1": parts.eval_space1,
        "eval_space2": parts.eval_space2,
    }
    paths = {}
    for name, matrix in names.items():
        p = os.path.join(dest_dir, f"{name}.emb")
        save(matrix, p)
        paths[name] = p
    meta = {
        "world_dir": str(world_dir),
        "train_fraction": train_fraction,
        "seed": world.config.seed if seed is None else seed,
        "train_indices": parts.train_indices.tolist(),
        "eval_indices": parts.eval_indices.tolist(),
        "paths": paths,
    }
    with open(os.path.join(dest_dir, "split.json"), "w",
              encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
