"""Masked autoencoder with a visible-only encoder and a full-sequence decoder.

The client model has one encoder block and one decoder block; the same code
runs the cascaded ``depth``-block encoder assembled on the server.

Parameter names::

    enc.embed.{w,b}  enc.pos  enc.block{i}.*       (encoder, i < depth)
    dec.proj.{w,b}   dec.mask_token  dec.pos  dec.block.*  dec.head.{w,b}
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import layers as L
from .data import FIXED, Geometry, MaskPlan, PatchSequence, full_plan, sample_mask
from .layers import ParamStore
from .optim import OptimizerState, adam_update
from .rng import RngStream, as_stream

MASKED_ONLY = "masked"
ALL_PIXELS = "all"


@dataclass(frozen=True)
class MaeConfig:
    geometry: Geometry = Geometry(16, 16, 4, 3)
    d_enc: int = 64
    d_dec: int = 32
    enc_heads: int = 4
    dec_heads: int = 4
    mlp_ratio: int = 4
    depth: int = 1

    def validate(self) -> None:
        self.geometry.validate()
        if self.d_enc % self.enc_heads or self.d_dec % self.dec_heads:
            raise ValueError("head count must divide model width")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


@dataclass
class MaeParams:
    config: MaeConfig
    params: ParamStore

    def copy(self) -> "MaeParams":
        return MaeParams(self.config, {k: v.copy() for k, v in self.params.items()})


def trunc_normal(gen: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2
    return (out * std).astype(dtype)


def xavier(gen, fan_in, fan_out, dtype=np.float32):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def init_encoder_embed(cfg: MaeConfig, rng: RngStream) -> ParamStore:
    gen = rng.derive("embed").generator()
    g = cfg.geometry
    return {
        "enc.embed.w": xavier(gen, g.patch_dim, cfg.d_enc),
        "enc.embed.b": np.zeros(cfg.d_enc, np.float32),
        "enc.pos": trunc_normal(gen, (g.num_patches, cfg.d_enc)),
    }


def init_block(d: int, mlp_ratio: int, rng: RngStream) -> ParamStore:
    return L.init_block(rng.generator(), d, mlp_ratio * d)


def init_mae(cfg: MaeConfig, rng: RngStream | int) -> MaeParams:
    cfg.validate()
    rng = as_stream(rng)
    g = cfg.geometry
    p = init_encoder_embed(cfg, rng)
    for i in range(cfg.depth):
        blk = init_block(cfg.d_enc, cfg.mlp_ratio, rng.derive("enc_block", i))
        p.update(L.prefixed(blk, f"enc.block{i}"))
    gen = rng.derive("decoder").generator()
    p["dec.proj.w"] = xavier(gen, cfg.d_enc, cfg.d_dec)
    p["dec.proj.b"] = np.zeros(cfg.d_dec, np.float32)
    p["dec.mask_token"] = trunc_normal(gen, (cfg.d_dec,))
    p["dec.pos"] = trunc_normal(gen, (g.num_patches, cfg.d_dec))
    p.update(L.prefixed(init_block(cfg.d_dec, cfg.mlp_ratio, rng.derive("dec_block")), "dec.block"))
    p["dec.head.w"] = xavier(gen, cfg.d_dec, g.patch_dim)
    p["dec.head.b"] = np.zeros(g.patch_dim, np.float32)
    return MaeParams(cfg, p)


def is_offset(name: str) -> bool:
    """Input-independent additive parameters: biases, LN shifts, positions, mask token."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b") or leaf in ("pos", "mask_token")


def zero_reference(mae: MaeParams) -> MaeParams:
    """Copy with every additive offset zeroed, so that h(0) = 0 and g(0) = 0."""
    return MaeParams(mae.config, {
        k: np.zeros_like(v) if is_offset(k) else v.copy() for k, v in mae.params.items()
    })


# encoder --------------------------------------------------------------------

def encoder_forward(p: ParamStore, cfg: MaeConfig, patches, ids, skip_blocks=False):
    """Embed the patches at positions ``ids`` [n, t] and run the encoder blocks."""
    xv = np.take_along_axis(patches, ids[..., None], axis=1)
    e, c_embed = L.linear_forward(xv, p["enc.embed.w"], p["enc.embed.b"])
    x = e + p["enc.pos"][ids]
    caches = []
    if not skip_blocks:
        for i in range(cfg.depth):
            x, c = L.block_forward(x, L.sub(p, f"enc.block{i}"), cfg.enc_heads)
            caches.append(c)
    return x, (c_embed, ids, caches, p["enc.pos"].shape)


def encoder_backward(dz, cache) -> ParamStore:
    c_embed, ids, caches, pos_shape = cache
    grads = {}
    for i in reversed(range(len(caches))):
        dz, g = L.block_backward(dz, caches[i])
        grads.update(L.prefixed(g, f"enc.block{i}"))
    dpos = np.zeros(pos_shape, dtype=dz.dtype)
    np.add.at(dpos, ids.reshape(-1), dz.reshape(-1, dz.shape[-1]))
    grads["enc.pos"] = dpos
    _, g = L.linear_backward(dz, c_embed)
    grads["enc.embed.w"], grads["enc.embed.b"] = g["w"], g["b"]
    return grads


def _check_fixed(plan: MaskPlan, patches):
    if plan.semantics != FIXED:
        raise ValueError("the encoder needs a fixed-count mask plan")
    if plan.visible.shape != patches.shape[:2]:
        raise ValueError(f"plan {plan.visible.shape} does not match patches {patches.shape}")
    if plan.b < 1:
        raise ValueError("no visible patches")


def encode_visible(mae: MaeParams, seq: PatchSequence, plan: MaskPlan) -> np.ndarray:
    _check_fixed(plan, seq.patches)
    z, _ = encoder_forward(mae.params, mae.config, seq.patches, plan.ids_keep)
    return z


# decoder --------------------------------------------------------------------

def decoder_forward(p: ParamStore, cfg: MaeConfig, z, ids_keep, num_patches: int):
    n, b, _ = z.shape
    y, c_proj = L.linear_forward(z, p["dec.proj.w"], p["dec.proj.b"])
    full = np.broadcast_to(p["dec.mask_token"], (n, num_patches, cfg.d_dec)).copy()
    np.put_along_axis(full, ids_keep[..., None], y, axis=1)
    x = full + p["dec.pos"]
    x, c_blk = L.block_forward(x, L.sub(p, "dec.block"), cfg.dec_heads)
    out, c_head = L.linear_forward(x, p["dec.head.w"], p["dec.head.b"])
    return out, (c_proj, c_blk, c_head, ids_keep)


def decoder_backward(dout, cache):
    c_proj, c_blk, c_head, ids_keep = cache
    dx, g_head = L.linear_backward(dout, c_head)
    dx, g_blk = L.block_backward(dx, c_blk)
    grads = {"dec.head.w": g_head["w"], "dec.head.b": g_head["b"], "dec.pos": dx.sum(axis=0)}
    grads.update(L.prefixed(g_blk, "dec.block"))
    dy = np.take_along_axis(dx, ids_keep[..., None], axis=1)
    keep = np.zeros(dx.shape[:2], dtype=bool)
    np.put_along_axis(keep, ids_keep, True, axis=1)
    grads["dec.mask_token"] = dx[~keep].sum(axis=0)
    dz, g_proj = L.linear_backward(dy, c_proj)
    grads["dec.proj.w"], grads["dec.proj.b"] = g_proj["w"], g_proj["b"]
    return dz, grads


def decode_full(mae: MaeParams, latents: np.ndarray, plan: MaskPlan) -> PatchSequence:
    if latents.shape[:2] != plan.ids_keep.shape:
        raise ValueError(f"latents {latents.shape} do not match plan with b={plan.b}")
    out, _ = decoder_forward(mae.params, mae.config, latents, plan.ids_keep, plan.num_patches)
    return PatchSequence(out, mae.config.geometry)


# loss -----------------------------------------------------------------------

def loss_weight(plan: MaskPlan, mode: str) -> np.ndarray:
    if mode == MASKED_ONLY:
        return plan.masked[..., None]
    if mode == ALL_PIXELS:
        return np.ones(plan.visible.shape + (1,), dtype=bool)
    raise ValueError(f"unknown loss mode {mode!r}")


def masked_recon_loss(recon: PatchSequence, target: PatchSequence, plan: MaskPlan,
                      mode: str = MASKED_ONLY) -> float:
    if recon.patches.shape != target.patches.shape:
        raise ValueError("reconstruction and target shapes differ")
    loss, _ = L.masked_mse(recon.patches, target.patches, loss_weight(plan, mode))
    return loss


def loss_and_grads(p: ParamStore, cfg: MaeConfig, patches, plan: MaskPlan, mode=MASKED_ONLY):
    """Forward + backward of the reconstruction loss; returns (loss, grads, recon)."""
    _check_fixed(plan, patches)
    ids = plan.ids_keep
    z, c_enc = encoder_forward(p, cfg, patches, ids)
    recon, c_dec = decoder_forward(p, cfg, z, ids, patches.shape[1])
    loss, drecon = L.masked_mse(recon, patches, loss_weight(plan, mode))
    dz, grads = decoder_backward(drecon, c_dec)
    grads.update(encoder_backward(dz, c_enc))
    return loss, grads, recon


def reconstruct(mae: MaeParams, seq: PatchSequence, plan: MaskPlan) -> PatchSequence:
    return decode_full(mae, encode_visible(mae, seq, plan), plan)


def train_step(mae: MaeParams, opt: OptimizerState, batch: PatchSequence, rng: RngStream,
               mask_ratio: float = 0.75, mode: str = MASKED_ONLY):
    """Sample a fresh mask, take one AdamW step on the reconstruction loss."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    plan = sample_mask(len(batch), batch.geometry.num_patches, mask_ratio, FIXED, rng)
    loss, grads, _ = loss_and_grads(mae.params, mae.config, batch.patches, plan, mode)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite reconstruction loss at optimizer step {opt.step + 1}")
    params, opt = adam_update(mae.params, grads, opt)
    return MaeParams(mae.config, params), opt, loss


def eval_recon_loss(mae: MaeParams, seq: PatchSequence, plan: MaskPlan, mode=MASKED_ONLY) -> float:
    return masked_recon_loss(reconstruct(mae, seq, plan), seq, plan, mode)


def feature_interference(mae: MaeParams, seq: PatchSequence, plan: MaskPlan,
                         linear_surrogate: bool = False) -> np.ndarray:
    """``z - z~``: encoder output on the clean sequence minus on the zero-filled one.

    Both passes see all B tokens. ``linear_surrogate`` replaces the blocks by
    the identity so the encoder is affine in its input.
    """
    p, cfg = mae.params, mae.config
    ids = full_plan(len(seq), seq.geometry.num_patches).order
    z, _ = encoder_forward(p, cfg, seq.patches, ids, skip_blocks=linear_surrogate)
    corrupted = seq.patches * plan.visible[..., None]
    zt, _ = encoder_forward(p, cfg, corrupted, ids, skip_blocks=linear_surrogate)
    return z - zt


def with_depth(cfg: MaeConfig, depth: int) -> MaeConfig:
    return replace(cfg, depth=depth)
