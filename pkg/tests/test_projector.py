"""Projector forward/backward, initialization, checkpoints."""

import numpy as np
import pytest

from cmcr import projector
from cmcr.errors import (
    BatchTooSmallError,
    CacheMismatchError,
    DimMismatchError,
    MagicMismatchError,
    TruncatedFileError,
    ZeroRowError,
)
from cmcr.rng import PortableRng

from conftest import unit_rows


def loss_through(p, x):
    """Scalar probe loss sum(y * coef) used by the finite-difference checks."""
    y, cache = projector.forward(p, x, mode="train")
    coef = np.arange(y.size, dtype=np.float64).reshape(y.shape) / y.size
    return float((y * coef).sum()), coef, cache


# --------------------------------------------------------------- forward

def test_identity_configuration_normalizes_input():
    """Weights identity, bn at running stats (0,1), eval mode: the network
    reduces to two ReLUs and the final row normalization."""
    d = 4
    p = projector.init((d, d, d), seed=0)
    p.weight1 = np.eye(d)
    p.weight2 = np.eye(d)
    x = np.asarray([[3.0, 4.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0]])
    y, _ = projector.forward(p, x, mode="eval")
    want = x / np.linalg.norm(x, axis=1, keepdims=True)
    # eval-mode bn divides by sqrt(1 + eps), a common rescale that the
    # final normalization cancels
    assert np.allclose(y, want, atol=1e-7)


def test_output_rows_unit_norm_both_modes():
    p = projector.init((6, 16, 16), seed=1)
    x = unit_rows(PortableRng(2, 0), 12, 6)
    y_train, _ = projector.forward(p, x, mode="train")
    y_eval, _ = projector.forward(p, x, mode="eval")
    assert np.allclose(np.linalg.norm(y_train, axis=1), 1.0, atol=1e-9)
    assert np.allclose(np.linalg.norm(y_eval, axis=1), 1.0, atol=1e-9)


def test_identical_rows_batch_collapses_explicitly():
    """Zero batch variance maps every feature to beta; with beta at its
    zero init the rows die at the last relu and the collapse is reported,
    not silently normalized."""
    p = projector.init((4, 8, 4), seed=3)
    x = np.tile(unit_rows(PortableRng(4, 0), 1, 4), (5, 1))
    with pytest.raises(ZeroRowError):
        projector.forward(p, x, mode="train")
    # a shifted beta keeps the same batch alive: epsilon makes the
    # normalization finite, there is no BatchTooSmall for rows >= 2
    p.beta1[:] = 0.5
    p.beta2[:] = 0.5
    y, _ = projector.forward(p, x, mode="train")
    assert np.all(np.isfinite(y))


def test_forward_matches_scalar_loop_oracle():
    """Vectorized forward against a plain double-loop re-implementation."""
    p = projector.init((512, 24, 16), seed=9)
    x = unit_rows(PortableRng(10, 0), 4, 512)
    y, _ = projector.forward(p, x, mode="train")

    z1 = np.empty((4, 24))
    for i in range(4):
        for j in range(24):
            acc = p.bias1[j]
            for k in range(512):
                acc += x[i, k] * p.weight1[k, j]
            z1[i, j] = acc
    mu = z1.mean(axis=0)
    var = z1.var(axis=0)
    h1 = np.maximum(p.gamma1 * (z1 - mu) / np.sqrt(var + 1e-5) + p.beta1, 0.0)
    z2 = h1 @ p.weight2 + p.bias2
    mu2, var2 = z2.mean(axis=0), z2.var(axis=0)
    h2 = np.maximum(p.gamma2 * (z2 - mu2) / np.sqrt(var2 + 1e-5) + p.beta2,
                    0.0)
    want = h2 / np.linalg.norm(h2, axis=1, keepdims=True)
    assert np.allclose(y, want, atol=1e-5)


def test_train_mode_updates_running_stats_eval_does_not():
    p = projector.init((4, 6, 4), seed=5)
    x = unit_rows(PortableRng(6, 0), 8, 4)
    before = p.run_mean1.copy()
    projector.forward(p, x, mode="eval")
    assert np.array_equal(p.run_mean1, before)
    projector.forward(p, x, mode="train")
    assert not np.array_equal(p.run_mean1, before)


def test_eval_forward_is_pure():
    p = projector.init((5, 7, 5), seed=6)
    x = unit_rows(PortableRng(7, 0), 3, 5)
    y1, _ = projector.forward(p, x, mode="eval")
    y2, _ = projector.forward(p, x, mode="eval")
    assert np.array_equal(y1, y2)


def test_train_needs_two_rows_eval_accepts_one_and_zero():
    p = projector.init((4, 6, 4), seed=7)
    one = unit_rows(PortableRng(8, 0), 1, 4)
    with pytest.raises(BatchTooSmallError):
        projector.forward(p, one, mode="train")
    y, _ = projector.forward(p, one, mode="eval")
    assert y.shape == (1, 4)
    empty, _ = projector.forward(p, np.zeros((0, 4)), mode="eval")
    assert empty.shape == (0, 4)


def test_dim_mismatch_rejected():
    p = projector.init((4, 6, 4), seed=8)
    with pytest.raises(DimMismatchError):
        projector.forward(p, np.zeros((3, 5)), mode="eval")


# -------------------------------------------------------------- backward

def test_zero_upstream_gradient_gives_zero_param_grads():
    p = projector.init((6, 9, 6), seed=11)
    x = unit_rows(PortableRng(12, 0), 5, 6)
    y, cache = projector.forward(p, x, mode="train")
    grads = projector.backward(p, cache, np.zeros_like(y))
    for g in grads.values():
        assert np.all(g == 0.0)


def test_backward_linear_in_upstream_gradient():
    p = projector.init((6, 9, 6), seed=13)
    x = unit_rows(PortableRng(14, 0), 5, 6)
    y, cache = projector.forward(p, x, mode="train")
    g = unit_rows(PortableRng(15, 0), 5, 6)
    one = projector.backward(p, cache, g)
    two = projector.backward(p, cache, 2.0 * g)
    for name in one:
        assert np.allclose(2.0 * one[name], two[name], atol=1e-12)


@pytest.mark.parametrize("seed", [101, 102, 103])
def test_gradients_match_finite_differences(seed):
    """Central differences over every learnable scalar, h=1e-4.

    Bias gradients are structurally zero (batch norm re-centers each
    feature), so relative error uses a floor of 1e-6 to keep the
    comparison meaningful on those coordinates.
    """
    p = projector.init((16, 32, 16), seed=seed)
    x = unit_rows(PortableRng(seed + 7, 0), 8, 16)
    value, coef, cache = loss_through(p, x)
    grads = projector.backward(p, cache, coef)

    h = 1e-4
    worst = 0.0
    for name in projector.LEARNABLE:
        tensor = getattr(p, name)
        it = np.nditer(tensor, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = tensor[idx]
            run_backup = {n: getattr(p, n).copy()
                          for n in ("run_mean1", "run_var1",
                                    "run_mean2", "run_var2")}
            tensor[idx] = keep + h
            up, _, _ = loss_through(p, x)
            for n, v in run_backup.items():
                getattr(p, n)[:] = v
            tensor[idx] = keep - h
            down, _, _ = loss_through(p, x)
            for n, v in run_backup.items():
                getattr(p, n)[:] = v
            tensor[idx] = keep
            fd = (up - down) / (2.0 * h)
            an = grads[name][idx]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, rel)
    assert worst < 1e-4


def test_backward_rejects_eval_cache_and_foreign_cache():
    p = projector.init((4, 12, 12), seed=17)
    x = unit_rows(PortableRng(18, 0), 4, 4)
    y, eval_cache = projector.forward(p, x, mode="eval")
    with pytest.raises(CacheMismatchError):
        projector.backward(p, eval_cache, np.zeros_like(y))
    other = projector.init((4, 12, 12), seed=18)
    _, cache = projector.forward(other, x, mode="train")
    with pytest.raises(CacheMismatchError):
        projector.backward(p, cache, np.zeros_like(y))


# ------------------------------------------------------------------ init

def test_init_deterministic_and_fan_in_bounded():
    a = projector.init((512, 1024, 512), seed=4)
    b = projector.init((512, 1024, 512), seed=4)
    for name in projector.TENSOR_ORDER:
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert np.abs(a.weight1).max() <= 1.0 / np.sqrt(512)
    assert np.abs(a.weight2).max() <= 1.0 / np.sqrt(1024)
    assert np.all(a.bias1 == 0) and np.all(a.gamma1 == 1)


def test_param_count_enumeration():
    """512->1024->512: weights plus biases plus bn scale/shift."""
    p = projector.init((512, 1024, 512), seed=0)
    weights_biases = 512 * 1024 + 1024 + 1024 * 512 + 512
    bn = 2 * 1024 + 2 * 512
    assert projector.param_count(p) == weights_biases + bn
    # running stats are state, not parameters
    assert (projector.param_count(p, learnable_only=False)
            == weights_biases + 2 * bn)


# ----------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_preserves_values(tmp_path):
    p = projector.init((6, 12, 12), seed=21)
    x = unit_rows(PortableRng(22, 0), 6, 6)
    projector.forward(p, x, mode="train")  # move running stats off init
    path = tmp_path / "p.ckpt"
    projector.save_checkpoint(p, path, step=17, config_hash="abc")
    q, header = projector.load_checkpoint(path)
    assert header["step"] == 17
    assert header["config_hash"] == "abc"
    assert q.dims == p.dims
    for name in projector.TENSOR_ORDER:
        # float32 on disk: round-trip equals the float32 cast of the source
        assert np.array_equal(getattr(q, name),
                              getattr(p, name).astype(np.float32)
                              .astype(np.float64))


def test_checkpoint_infer_equivalence(tmp_path):
    p = projector.init((6, 12, 12), seed=23)
    x = unit_rows(PortableRng(24, 0), 7, 6)
    projector.forward(p, x, mode="train")
    path = tmp_path / "p.ckpt"
    projector.save_checkpoint(p, path)
    q, _ = projector.load_checkpoint(path)
    # evaluating the reloaded params twice is bitwise stable
    y1, _ = projector.forward(q, x, mode="eval")
    y2, _ = projector.forward(q, x, mode="eval")
    assert np.array_equal(y1, y2)


def test_checkpoint_corruption_detected(tmp_path):
    p = projector.init((4, 6, 4), seed=25)
    path = tmp_path / "p.ckpt"
    projector.save_checkpoint(p, path)
    raw = path.read_bytes()

    bad_magic = tmp_path / "m.ckpt"
    bad_magic.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(MagicMismatchError):
        projector.load_checkpoint(bad_magic)

    short = tmp_path / "s.ckpt"
    short.write_bytes(raw[:-10])
    with pytest.raises(TruncatedFileError):
        projector.load_checkpoint(short)


def test_no_final_relu_variant():
    p = projector.init((5, 8, 5), seed=27, final_relu=False)
    x = unit_rows(PortableRng(28, 0), 6, 5)
    y, cache = projector.forward(p, x, mode="train")
    assert np.allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-9)
    assert (y < 0).any()  # without the last relu, negatives survive
    grads = projector.backward(p, cache, np.ones_like(y))
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_config_hash_stable_and_order_insensitive():
    a = projector.config_hash({"a": 1, "b": [2, 3]})
    b = projector.config_hash({"b": [2, 3], "a": 1})
    assert a == b and len(a) == 16
    assert projector.config_hash({"a": 2}) != a
