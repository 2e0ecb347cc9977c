import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cascade_mae import layers as L
from cascade_mae.gradcheck import grad_check
from cascade_mae.linalg import SingularSystemError, linear_solve_ridge
from cascade_mae.rng import RngStream, rng_derive


# rng ----------------------------------------------------------------------------

def draws(stream, k=100):
    return stream.generator().random(k)


def test_derive_is_deterministic():
    s = RngStream(42)
    assert np.array_equal(draws(rng_derive(s, "client", 3)), draws(rng_derive(s, "client", 3)))


def test_derive_distinct_index_differs():
    s = RngStream(42)
    a, b = draws(s.derive("client", 3)), draws(s.derive("client", 4))
    assert (a != b).any()


def test_derive_path_order_matters():
    s = RngStream(7)
    a = draws(s.derive("round", 1).derive("client", 2))
    b = draws(s.derive("round", 2).derive("client", 1))
    assert (a != b).any()


def test_derive_rejects_empty_label():
    with pytest.raises(ValueError):
        rng_derive(RngStream(0), "", 1)


def test_stream_independent_of_call_order():
    s = RngStream(3)
    first = draws(s.derive("x", 1))
    draws(s.derive("y", 0), 1000)
    assert np.array_equal(first, draws(s.derive("x", 1)))


def test_streams_look_independent():
    s = RngStream(11)
    a, b = draws(s.derive("a"), 5000), draws(s.derive("b"), 5000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


# grad check ---------------------------------------------------------------------

def test_grad_check_polynomial():
    rep = grad_check(lambda p: (float(p["w"][0] ** 2), {"w": 2 * p["w"]}), {"w": np.array([3.0])}, 1e-8)
    assert rep.passed and rep.worst < 1e-8


def test_grad_check_flags_wrong_gradient():
    rep = grad_check(lambda p: (float(p["w"][0] ** 2), {"w": 3 * p["w"]}), {"w": np.array([3.0])}, 1e-4)
    assert not rep.passed
    assert "w" in rep.failures()[0]


def test_grad_check_names_nonfinite_parameter():
    def fn(p):
        v = p["w"][0]
        return (float(np.log(v)) if v > 0 else float("nan")), {"w": 1 / p["w"]}

    rep = grad_check(fn, {"w": np.array([1e-7])}, 1e-4)
    assert rep.nonfinite == ["w"]
    assert not rep.passed


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _scalar_head(out, proj):
    """Reduce an output tensor to a scalar with a fixed random projection."""
    return float((out * proj).sum()), proj


@pytest.mark.parametrize("seed", [0, 1])
def test_linear_grad(seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 4)
    proj = _rand(rng, 2, 3, 5)
    params = {"w": _rand(rng, 4, 5), "b": _rand(rng, 5), "x": x}

    def fn(p):
        y, c = L.linear_forward(p["x"], p["w"], p["b"])
        loss, dy = _scalar_head(y, proj)
        dx, g = L.linear_backward(dy, c)
        return loss, {**g, "x": dx}

    assert grad_check(fn, params, 1e-4).passed


def test_layer_norm_grad_tight():
    rng = np.random.default_rng(2)
    proj = _rand(rng, 3, 6)
    params = {"g": _rand(rng, 6), "b": _rand(rng, 6), "x": _rand(rng, 3, 6)}

    def fn(p):
        y, c = L.layer_norm_forward(p["x"], p["g"], p["b"])
        loss, dy = _scalar_head(y, proj)
        dx, g = L.layer_norm_backward(dy, c)
        return loss, {**g, "x": dx}

    rep = grad_check(fn, params, 1e-6)
    assert rep.passed, rep.failures()


def test_gelu_mlp_grad():
    rng = np.random.default_rng(3)
    proj = _rand(rng, 2, 3, 4)
    params = {"w1": _rand(rng, 4, 8), "b1": _rand(rng, 8), "w2": _rand(rng, 8, 4),
              "b2": _rand(rng, 4), "x": _rand(rng, 2, 3, 4)}

    def fn(p):
        y, c = L.mlp_forward(p["x"], p)
        loss, dy = _scalar_head(y, proj)
        dx, g = L.mlp_backward(dy, c)
        return loss, {**g, "x": dx}

    assert grad_check(fn, params, 1e-4).passed


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_grad(heads):
    rng = np.random.default_rng(4)
    d = 4
    proj = _rand(rng, 2, 3, d)
    params = {f"{k}{n}": _rand(rng, d, d) * 0.5 if k == "w" else _rand(rng, d) * 0.1
              for k in "wb" for n in "qkvo"}
    params["x"] = _rand(rng, 2, 3, d)

    def fn(p):
        y, c = L.attention_forward(p["x"], p, heads)
        loss, dy = _scalar_head(y, proj)
        dx, g = L.attention_backward(dy, c)
        return loss, {**g, "x": dx}

    rep = grad_check(fn, params, 1e-4)
    assert rep.passed, rep.failures()


def test_block_grad():
    rng = np.random.default_rng(5)
    blk = {k: v.astype(np.float64) for k, v in L.init_block(rng, 4, 8).items()}
    blk = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in blk.items()}
    proj = _rand(rng, 2, 3, 4)
    blk["x"] = _rand(rng, 2, 3, 4)

    def fn(p):
        y, c = L.block_forward(p["x"], p, 2)
        loss, dy = _scalar_head(y, proj)
        dx, g = L.block_backward(dy, c)
        return loss, {**g, "x": dx}

    rep = grad_check(fn, blk, 1e-4)
    assert rep.passed, rep.failures()


def test_softmax_cross_entropy_grad():
    rng = np.random.default_rng(6)
    labels = np.array([0, 2, 1, 2])

    def fn(p):
        loss, d = L.softmax_cross_entropy(p["z"], labels)
        return loss, {"z": d}

    assert grad_check(fn, {"z": _rand(rng, 4, 3)}, 1e-4).passed


def test_masked_mse_grad_and_value():
    rng = np.random.default_rng(7)
    target = _rand(rng, 2, 4, 3)
    weight = np.array([[1, 0, 1, 0], [0, 0, 1, 1]], dtype=bool)[..., None]

    def fn(p):
        loss, d = L.masked_mse(p["y"], target, weight)
        return loss, {"y": d}

    assert grad_check(fn, {"y": _rand(rng, 2, 4, 3)}, 1e-4).passed
    pred = target.copy()
    pred[0, 0, 1] += 2.0
    loss, _ = L.masked_mse(pred, target, weight)
    assert loss == pytest.approx(0.5 * 4 / (4 * 3))


def test_softmax_ce_uniform_logits():
    loss, _ = L.softmax_cross_entropy(np.zeros((3, 4)), np.array([0, 1, 2]))
    assert loss == pytest.approx(np.log(4))


# ridge solver -------------------------------------------------------------------

def test_ridge_identity():
    W = linear_solve_ridge(np.eye(3), np.eye(3), 0.0)
    assert np.allclose(W, np.eye(3), atol=1e-14)


def test_ridge_recovers_map():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 20))
    M = rng.standard_normal((4, 4))
    W = linear_solve_ridge(A, M @ A, 0.0)
    assert np.abs(W - M).max() < 1e-8


def test_ridge_rank_deficient_beats_random_probes():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 30))
    B = rng.standard_normal((5, 30))
    lam = 1e-6
    W = linear_solve_ridge(A, B, lam)
    assert np.isfinite(W).all()

    def res(V):
        return 0.5 * np.sum((B - V @ A) ** 2)

    for _ in range(100):
        probe = W + rng.standard_normal(W.shape) * rng.choice([1e-2, 1e-1, 1.0])
        assert res(W) <= res(probe)


def test_ridge_singular_without_lambda_raises():
    A = np.ones((3, 10))
    with pytest.raises(SingularSystemError):
        linear_solve_ridge(A, A, 0.0)


def test_ridge_column_mismatch():
    with pytest.raises(ValueError):
        linear_solve_ridge(np.ones((2, 3)), np.ones((2, 4)), 1.0)


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 6), extra=st.integers(0, 20), lam=st.sampled_from([0.0, 1e-3, 1.0]),
       seed=st.integers(0, 2**31))
def test_ridge_normal_equations(d, extra, lam, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d + extra))
    B = rng.standard_normal((d, d + extra))
    W = linear_solve_ridge(A, B, lam)
    lhs = W @ (A @ A.T + lam * np.eye(d))
    rhs = B @ A.T
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * max(np.linalg.norm(rhs), 1.0)


def test_float32_training_forward_stays_float32():
    rng = np.random.default_rng(0)
    blk = L.init_block(rng, 8, 16)
    x = rng.standard_normal((2, 4, 8)).astype(np.float32)
    y, _ = L.block_forward(x, blk, 2)
    assert y.dtype == np.float32
