"""Closed layer vocabulary with hand-written forward/backward passes.

Every layer is a pair ``*_forward(...) -> (out, cache)`` and
``*_backward(dout, cache) -> (dx, grads)``. Parameters are plain numpy arrays
held in flat ``dict[str, ndarray]`` stores; gradient dicts use the same keys.
There is no graph: models chain these calls explicitly.
"""
from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)

ParamStore = dict[str, np.ndarray]


def sub(params: ParamStore, prefix: str) -> ParamStore:
    """View of the entries under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def prefixed(grads: ParamStore, prefix: str) -> ParamStore:
    return {f"{prefix}.{k}": v for k, v in grads.items()}


# linear ---------------------------------------------------------------------

def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, {"w": x2.T @ dy2, "b": dy2.sum(axis=0)}


# layer norm -----------------------------------------------------------------

def layer_norm_forward(x, g, b, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    d = xhat.shape[-1]
    dy2 = dy.reshape(-1, d)
    grads = {"g": (dy2 * xhat.reshape(-1, d)).sum(axis=0), "b": dy2.sum(axis=0)}
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, grads


# gelu (tanh approximation) --------------------------------------------------

def gelu_forward(x):
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


# multi-head self attention ----------------------------------------------------

def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(x, p: ParamStore, n_heads: int):
    n, t, d = x.shape
    if d % n_heads:
        raise ValueError(f"n_heads={n_heads} does not divide width {d}")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)

    def heads(y):
        return y.reshape(n, t, n_heads, dh).transpose(0, 2, 1, 3)

    q_lin, cq = linear_forward(x, p["wq"], p["bq"])
    k_lin, ck = linear_forward(x, p["wk"], p["bk"])
    v_lin, cv = linear_forward(x, p["wv"], p["bv"])
    q, k, v = heads(q_lin), heads(k_lin), heads(v_lin)
    a = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    ctx = (a @ v).transpose(0, 2, 1, 3).reshape(n, t, d)
    out, co = linear_forward(ctx, p["wo"], p["bo"])
    return out, (cq, ck, cv, co, q, k, v, a, scale, n_heads)


def attention_backward(dout, cache):
    cq, ck, cv, co, q, k, v, a, scale, n_heads = cache
    n, h, t, dh = q.shape
    dctx, g_o = linear_backward(dout, co)
    dctx = dctx.reshape(n, t, h, dh).transpose(0, 2, 1, 3)
    da = dctx @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ dctx
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(y):
        return y.transpose(0, 2, 1, 3).reshape(n, t, h * dh)

    dx_q, g_q = linear_backward(merge(dq), cq)
    dx_k, g_k = linear_backward(merge(dk), ck)
    dx_v, g_v = linear_backward(merge(dv), cv)
    grads = {
        "wq": g_q["w"], "bq": g_q["b"],
        "wk": g_k["w"], "bk": g_k["b"],
        "wv": g_v["w"], "bv": g_v["b"],
        "wo": g_o["w"], "bo": g_o["b"],
    }
    return dx_q + dx_k + dx_v, grads


# gelu mlp -------------------------------------------------------------------

def mlp_forward(x, p: ParamStore):
    h, c1 = linear_forward(x, p["w1"], p["b1"])
    a, cg = gelu_forward(h)
    y, c2 = linear_forward(a, p["w2"], p["b2"])
    return y, (c1, cg, c2)


def mlp_backward(dy, cache):
    c1, cg, c2 = cache
    da, g2 = linear_backward(dy, c2)
    dh = gelu_backward(da, cg)
    dx, g1 = linear_backward(dh, c1)
    return dx, {"w1": g1["w"], "b1": g1["b"], "w2": g2["w"], "b2": g2["b"]}


# pre-norm transformer block -------------------------------------------------

def block_forward(x, p: ParamStore, n_heads: int):
    h1, c_ln1 = layer_norm_forward(x, p["ln1.g"], p["ln1.b"])
    att, c_att = attention_forward(h1, sub(p, "attn"), n_heads)
    x1 = x + att
    h2, c_ln2 = layer_norm_forward(x1, p["ln2.g"], p["ln2.b"])
    m, c_mlp = mlp_forward(h2, sub(p, "mlp"))
    return x1 + m, (c_ln1, c_att, c_ln2, c_mlp)


def block_backward(dy, cache):
    c_ln1, c_att, c_ln2, c_mlp = cache
    dh2, g_mlp = mlp_backward(dy, c_mlp)
    dx1_ln, g_ln2 = layer_norm_backward(dh2, c_ln2)
    dx1 = dy + dx1_ln
    dh1, g_att = attention_backward(dx1, c_att)
    dx_ln, g_ln1 = layer_norm_backward(dh1, c_ln1)
    grads = {
        **prefixed(g_ln1, "ln1"),
        **prefixed(g_att, "attn"),
        **prefixed(g_ln2, "ln2"),
        **prefixed(g_mlp, "mlp"),
    }
    return dx1 + dx_ln, grads


def init_block(rng: np.random.Generator, d: int, d_ff: int, dtype=np.float32) -> ParamStore:
    """Xavier-uniform matrices, zero biases, unit LayerNorm gains."""

    def xavier(fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)

    p = {"ln1.g": np.ones(d, dtype), "ln1.b": np.zeros(d, dtype)}
    for name in ("q", "k", "v", "o"):
        p[f"attn.w{name}"] = xavier(d, d)
        p[f"attn.b{name}"] = np.zeros(d, dtype)
    p["ln2.g"] = np.ones(d, dtype)
    p["ln2.b"] = np.zeros(d, dtype)
    p["mlp.w1"] = xavier(d, d_ff)
    p["mlp.b1"] = np.zeros(d_ff, dtype)
    p["mlp.w2"] = xavier(d_ff, d)
    p["mlp.b2"] = np.zeros(d, dtype)
    return p


# losses ---------------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    s = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    logp = s - logz
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def masked_mse(pred, target, weight):
    """Half mean squared error over entries selected by ``weight``.

    ``weight`` broadcasts against ``pred`` (e.g. ``[n, B, 1]`` per-patch flags);
    the mean runs over selected pixels only.
    """
    w = np.broadcast_to(weight, pred.shape)
    count = float(w.sum())
    if count == 0:
        raise ValueError("masked_mse: no entries selected")
    diff = (pred - target) * w
    loss = 0.5 * float((diff * diff).sum()) / count
    return loss, diff / count
