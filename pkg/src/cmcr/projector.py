"""Two-block MLP projector with hand-derived backpropagation.

Architecture: Linear -> BatchNorm -> ReLU, twice, then a final L2 row
normalization so outputs live on the unit sphere where all similarities
are cosine.  Gradients are exact, including the paths through the batch
statistics of batch norm and through the final normalization.  Parameters
are held in float64; checkpoints store float32 (which round-trips exactly
into float64).

Batch norm follows the common convention: epsilon 1e-5, running-stat
momentum 0.1, biased variance inside the normalization, unbiased variance
in the running update.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from cmcr.errors import (
    BatchTooSmallError,
    CacheMismatchError,
    DimMismatchError,
    IoFailureError,
    MagicMismatchError,
    ShapeMismatchError,
    TruncatedFileError,
    ZeroRowError,
)
from cmcr.rng import PortableRng

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CKPT_MAGIC = b"CMCRCKP1"

# Serialization order of the parameter tensors inside a checkpoint.
TENSOR_ORDER = (
    "weight1", "bias1", "gamma1", "beta1", "run_mean1", "run_var1",
    "weight2", "bias2", "gamma2", "beta2", "run_mean2", "run_var2",
)
LEARNABLE = ("weight1", "bias1", "gamma1", "beta1",
             "weight2", "bias2", "gamma2", "beta2")
# Batch-norm scale/shift stay out of weight decay.
NO_DECAY = ("gamma1", "beta1", "gamma2", "beta2")


@dataclass
class ProjectorParams:
    dims: tuple[int, int, int]
    weight1: np.ndarray
    bias1: np.ndarray
    gamma1: np.ndarray
    beta1: np.ndarray
    run_mean1: np.ndarray
    run_var1: np.ndarray
    weight2: np.ndarray
    bias2: np.ndarray
    gamma2: np.ndarray
    beta2: np.ndarray
    run_mean2: np.ndarray
    run_var2: np.ndarray
    final_relu: bool = True

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_ORDER}

    def learnable(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in LEARNABLE}


@dataclass
class ForwardCache:
    params: ProjectorParams
    mode: str
    rows: int
    x: np.ndarray
    xhat1: np.ndarray
    inv_std1: np.ndarray
    mask1: np.ndarray
    h1: np.ndarray
    xhat2: np.ndarray
    inv_std2: np.ndarray
    mask2: np.ndarray | None
    norms: np.ndarray
    y: np.ndarray


def init(dims, seed: int, stream: int = 0, final_relu: bool = True
         ) -> ProjectorParams:
    """Fresh parameters: weights uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    biases zero, batch-norm at identity (gamma 1, beta 0, mean 0, var 1)."""
    d_in, d_hidden, d_out = (int(d) for d in dims)
    if min(d_in, d_hidden, d_out) < 1:
        raise ShapeMismatchError(f"dims must be positive, got {dims}")
    rng = PortableRng(seed, stream)

    def uniform_fan(n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        return (rng.uniform((n_in, n_out)) * 2.0 - 1.0) * bound

    return ProjectorParams(
        dims=(d_in, d_hidden, d_out),
        weight1=uniform_fan(d_in, d_hidden),
        bias1=np.zeros(d_hidden),
        gamma1=np.ones(d_hidden),
        beta1=np.zeros(d_hidden),
        run_mean1=np.zeros(d_hidden),
        run_var1=np.ones(d_hidden),
        weight2=uniform_fan(d_hidden, d_out),
        bias2=np.zeros(d_out),
        gamma2=np.ones(d_out),
        beta2=np.zeros(d_out),
        run_mean2=np.zeros(d_out),
        run_var2=np.ones(d_out),
        final_relu=final_relu,
    )


def param_count(p: ProjectorParams, learnable_only: bool = True) -> int:
    names = LEARNABLE if learnable_only else TENSOR_ORDER
    return sum(getattr(p, n).size for n in names)


def _bn_forward(z, gamma, beta, run_mean, run_var, train: bool):
    if train:
        mu = z.mean(axis=0)
        var = z.var(axis=0)  # biased, used in the normalization
        n = z.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        run_mean *= 1.0 - BN_MOMENTUM
        run_mean += BN_MOMENTUM * mu
        run_var *= 1.0 - BN_MOMENTUM
        run_var += BN_MOMENTUM * unbiased
    else:
        mu, var = run_mean, run_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mu) * inv_std
    return gamma * xhat + beta, xhat, inv_std


def forward(p: ProjectorParams, batch, mode: str = "train"
            ) -> tuple[np.ndarray, ForwardCache]:
    """Run the projector; returns unit-norm rows and the cache backward needs.

    Train mode normalizes with batch statistics and updates the running
    ones; eval mode reads the running statistics and never mutates them.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(getattr(batch, "data", batch), dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatchError(f"batch must be 2-D, got {x.ndim}-D")
    d_in, _, _ = p.dims
    if x.shape[1] != d_in:
        raise DimMismatchError(f"batch dim {x.shape[1]} vs projector {d_in}")
    train = mode == "train"
    if train and x.shape[0] < 2:
        raise BatchTooSmallError(
            f"train mode needs >= 2 rows, got {x.shape[0]}")

    z1 = x @ p.weight1 + p.bias1
    a1, xhat1, inv_std1 = _bn_forward(z1, p.gamma1, p.beta1,
                                      p.run_mean1, p.run_var1, train)
    mask1 = a1 > 0
    h1 = np.where(mask1, a1, 0.0)

    z2 = h1 @ p.weight2 + p.bias2
    a2, xhat2, inv_std2 = _bn_forward(z2, p.gamma2, p.beta2,
                                      p.run_mean2, p.run_var2, train)
    if p.final_relu:
        mask2 = a2 > 0
        h2 = np.where(mask2, a2, 0.0)
    else:
        mask2 = None
        h2 = a2

    norms = np.linalg.norm(h2, axis=1)
    if x.shape[0] and np.any(norms == 0.0):
        raise ZeroRowError(
            f"row {int(np.argmax(norms == 0.0))} collapsed to zero "
            "before output normalization")
    y = h2 / norms[:, None] if x.shape[0] else h2
    cache = ForwardCache(params=p, mode=mode, rows=x.shape[0], x=x,
                         xhat1=xhat1, inv_std1=inv_std1, mask1=mask1, h1=h1,
                         xhat2=xhat2, inv_std2=inv_std2, mask2=mask2,
                         norms=norms, y=y)
    return y, cache


def _bn_backward(dout, xhat, inv_std, gamma):
    """Gradient through y = gamma*xhat + beta with batch statistics."""
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    n = dout.shape[0]
    dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0)
                          - xhat * (dxhat * xhat).sum(axis=0))
    return dz, dgamma, dbeta


def backward(p: ProjectorParams, cache: ForwardCache, grad_out
             ) -> dict[str, np.ndarray]:
    """Exact parameter gradients for the matching train-mode forward call.

    Input gradients are not produced: the source embeddings are frozen.
    """
    if cache.params is not p:
        raise CacheMismatchError("cache was produced by different params")
    if cache.mode != "train":
        raise CacheMismatchError("backward needs a train-mode cache")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.y.shape:
        raise ShapeMismatchError(
            f"grad_out shape {g.shape} vs output {cache.y.shape}")

    # through y = h2/||h2||: the radial component of g is annihilated
    inv_norm = 1.0 / cache.norms[:, None]
    dh2 = (g - cache.y * (g * cache.y).sum(axis=1, keepdims=True)) * inv_norm

    da2 = dh2 * cache.mask2 if p.final_relu else dh2
    dz2, dgamma2, dbeta2 = _bn_backward(da2, cache.xhat2, cache.inv_std2,
                                        p.gamma2)
    dweight2 = cache.h1.T @ dz2
    dbias2 = dz2.sum(axis=0)
    dh1 = dz2 @ p.weight2.T

    da1 = dh1 * cache.mask1
    dz1, dgamma1, dbeta1 = _bn_backward(da1, cache.xhat1, cache.inv_std1,
                                        p.gamma1)
    dweight1 = cache.x.T @ dz1
    dbias1 = dz1.sum(axis=0)

    return {"weight1": dweight1, "bias1": dbias1,
            "gamma1": dgamma1, "beta1": dbeta1,
            "weight2": dweight2, "bias2": dbias2,
            "gamma2": dgamma2, "beta2": dbeta2}


# ------------------------------------------------------------ checkpoints
# CMCR-CKPT v1: magic, u32 little-endian header length, JSON header
# (dims, final_relu, step, config hash, tensor order with shapes), then the
# tensors concatenated as little-endian float32 in header order.

def save_checkpoint(p: ProjectorParams, path, step: int = 0,
                    config_hash: str = "") -> None:
    header = {
        "format": "CMCR-CKPT",
        "version": 1,
        "dims": list(p.dims),
        "final_relu": p.final_relu,
        "step": int(step),
        "config_hash": config_hash,
        "tensors": [[name, list(getattr(p, name).shape)]
                    for name in TENSOR_ORDER],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            for name in TENSOR_ORDER:
                fh.write(np.ascontiguousarray(
                    getattr(p, name), dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailureError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[ProjectorParams, dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailureError(f"cannot read {path}: {exc}") from exc
    if len(blob) < len(CKPT_MAGIC) + 4:
        raise TruncatedFileError(f"{path}: too short for a checkpoint")
    if blob[:8] != CKPT_MAGIC:
        raise MagicMismatchError(f"{path}: bad checkpoint magic")
    (head_len,) = struct.unpack_from("<I", blob, 8)
    head_end = 12 + head_len
    if len(blob) < head_end:
        raise TruncatedFileError(f"{path}: header truncated")
    try:
        header = json.loads(blob[12:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoFailureError(f"{path}: unreadable header") from exc
    fields = {}
    offset = head_end
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        if len(blob) < offset + count * 4:
            raise TruncatedFileError(f"{path}: tensor {name} truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        fields[name] = arr.astype(np.float64).reshape(shape)
        offset += count * 4
    params = ProjectorParams(dims=tuple(header["dims"]),
                             final_relu=bool(header.get("final_relu", True)),
                             **fields)
    return params, header


def config_hash(obj) -> str:
    """Stable short hash of any JSON-serializable config."""
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()[:16]
