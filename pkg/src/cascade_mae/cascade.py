"""Server-side cascade of pre-trained one-block encoders and downstream tasks."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import layers as L
from .checkpoint import config_from_meta, config_meta, read_params, write_params
from .data import FIXED, ImageBatch, PatchSequence, apply_mask_zero, patchify, sample_mask, unpatchify
from .fed import local_train
from .layers import ParamStore
from .mae import (MaeConfig, MaeParams, encoder_backward, encoder_forward,
                  init_block, init_encoder_embed, init_mae, reconstruct, trunc_normal)
from .optim import AdamConfig, adam_update, init_optimizer
from .rng import RngStream, as_stream

EMBED_KEYS = ("enc.embed.w", "enc.embed.b", "enc.pos")


@dataclass(frozen=True)
class CascadeSpec:
    depth: int
    p_pre: int
    source: tuple[int, ...] | str | None = None  # lineage ids, "replicate:<i>", or None
    init_seed: int = 0
    shuffle_order: bool = False

    def source_ids(self, available: int) -> list[int]:
        if not 0 <= self.p_pre <= self.depth:
            raise ValueError(f"p_pre={self.p_pre} outside [0, {self.depth}]")
        if isinstance(self.source, str):
            kind, _, idx = self.source.partition(":")
            if kind != "replicate" or not idx.isdigit():
                raise ValueError(f"bad source {self.source!r}")
            ids = [int(idx)] * self.p_pre
        elif self.source is None:
            ids = list(range(self.p_pre))
            if self.shuffle_order:
                gen = RngStream(self.init_seed).derive("cascade_order").generator()
                ids = [int(i) for i in gen.permutation(available)[: self.p_pre]]
        else:
            ids = [int(i) for i in self.source]
            if len(ids) != self.p_pre:
                raise ValueError(f"{len(ids)} source ids for p_pre={self.p_pre}")
        if ids and max(ids) >= available:
            raise ValueError(f"source lineage {max(ids)} but only {available} sources")
        return ids


@dataclass
class ViTClassifier:
    config: MaeConfig  # encoder part; depth = number of blocks
    n_classes: int
    params: ParamStore

    def copy(self) -> "ViTClassifier":
        return ViTClassifier(self.config, self.n_classes, {k: v.copy() for k, v in self.params.items()})


def _check_sources(sources: list[MaeParams]) -> MaeConfig:
    if not sources:
        raise ValueError("no source models")
    c0 = sources[0].config
    for s in sources[1:]:
        c = s.config
        if (c.d_enc, c.enc_heads, c.mlp_ratio, c.geometry) != (c0.d_enc, c0.enc_heads, c0.mlp_ratio, c0.geometry):
            raise ValueError("source models disagree on encoder dimensions")
    return c0


def _cascade_encoder(sources, spec: CascadeSpec, cfg: MaeConfig, rng: RngStream) -> ParamStore:
    ids = spec.source_ids(len(sources))
    if ids:
        first = sources[ids[0]].params
        p = {k: first[k].copy() for k in EMBED_KEYS}
    else:
        p = init_encoder_embed(cfg, rng.derive("fresh_embed"))
    for slot in range(spec.depth):
        if slot < len(ids):
            blk = L.sub(sources[ids[slot]].params, "enc.block0")
            blk = {k: v.copy() for k, v in blk.items()}
        else:
            # keyed by slot so arms that share a fresh slot share its init
            blk = init_block(cfg.d_enc, cfg.mlp_ratio, rng.derive("fresh_block", slot))
        p.update(L.prefixed(blk, f"enc.block{slot}"))
    return p


def cascade_assemble(sources: list[MaeParams], spec: CascadeSpec, n_classes: int,
                     rng: RngStream | int | None = None) -> ViTClassifier:
    """Stack source encoder blocks into a ``spec.depth``-block classifier.

    Slots ``< p_pre`` get bit-exact copies of the source blocks, the rest are
    fresh. Patch embedding and positions come from the first source when
    ``p_pre >= 1``. The final norm and head are always fresh.
    """
    base = _check_sources(sources) if sources else None
    if base is None:
        raise ValueError("cascade needs at least one source for its dimensions")
    rng = as_stream(spec.init_seed if rng is None else rng)
    cfg = replace(base, depth=spec.depth)
    p = _cascade_encoder(sources, spec, cfg, rng)
    gen = rng.derive("head").generator()
    p["norm.g"] = np.ones(cfg.d_enc, np.float32)
    p["norm.b"] = np.zeros(cfg.d_enc, np.float32)
    p["head.w"] = trunc_normal(gen, (cfg.d_enc, n_classes))
    p["head.b"] = np.zeros(n_classes, np.float32)
    return ViTClassifier(cfg, n_classes, p)


def save_classifier(path, clf: ViTClassifier, **extra) -> Path:
    meta = {"kind": "classifier", **config_meta(clf.config), "n_classes": clf.n_classes, **extra}
    return write_params(path, clf.params, meta)


def load_classifier(path) -> ViTClassifier:
    params, meta = read_params(path)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path}: not a classifier checkpoint (kind={meta.get('kind')})")
    return ViTClassifier(config_from_meta(meta), int(meta["n_classes"]), params)


def fresh_classifier(cfg: MaeConfig, depth: int, n_classes: int, rng) -> ViTClassifier:
    """Un-pretrained baseline with the same initialisation scheme."""
    template = MaeParams(replace(cfg, depth=1), {})
    return cascade_assemble([template], CascadeSpec(depth, 0), n_classes, rng)


def assemble_multiblock_mae(sources: list[MaeParams], spec: CascadeSpec | int,
                            rng: RngStream | int | None = None, decoder_source: int | None = None) -> MaeParams:
    """Cascaded encoder plus the decoder of a designated source (default: first used)."""
    if isinstance(spec, int):
        spec = CascadeSpec(spec, min(spec, len(sources)))
    base = _check_sources(sources)
    rng = as_stream(spec.init_seed if rng is None else rng)
    cfg = replace(base, depth=spec.depth)
    p = _cascade_encoder(sources, spec, cfg, rng)
    ids = spec.source_ids(len(sources))
    dec_from = decoder_source if decoder_source is not None else (ids[0] if ids else None)
    if dec_from is None:
        fresh = init_mae(replace(base, depth=1), rng.derive("fresh_decoder"))
        dec = fresh.params
    else:
        dec = sources[dec_from].params
    p.update({k: v.copy() for k, v in dec.items() if k.startswith("dec.")})
    return MaeParams(cfg, p)


def server_refine(model: MaeParams, unlabeled: ImageBatch | PatchSequence | None, epochs: int,
                  rng: RngStream | int, batch_size: int = 32, mask_ratio: float = 0.75,
                  adam: AdamConfig | None = None) -> MaeParams:
    """Masked-reconstruction training of an assembled model on server-held images."""
    if unlabeled is None or len(unlabeled) == 0 or epochs == 0:
        return model
    data = unlabeled if isinstance(unlabeled, PatchSequence) else patchify(unlabeled, model.config.geometry.patch)
    opt = init_optimizer(model.params, adam)
    model, _, _ = local_train(model, opt, data, epochs, as_stream(rng).derive("refine"),
                              batch_size, mask_ratio)
    return model


def classifier_from_mae(model: MaeParams, n_classes: int, rng) -> ViTClassifier:
    """Drop the decoder of an assembled MAE and attach a fresh head."""
    blocks = [MaeParams(replace(model.config, depth=1), {
        **{k: model.params[k] for k in EMBED_KEYS},
        **L.prefixed(L.sub(model.params, f"enc.block{i}"), "enc.block0"),
    }) for i in range(model.config.depth)]
    spec = CascadeSpec(model.config.depth, model.config.depth)
    return cascade_assemble(blocks, spec, n_classes, rng)


# classifier forward/backward ------------------------------------------------------

def _all_ids(n, num_patches):
    return np.broadcast_to(np.arange(num_patches), (n, num_patches))


def classifier_forward(p: ParamStore, cfg: MaeConfig, patches):
    ids = _all_ids(len(patches), patches.shape[1])
    z, c_enc = encoder_forward(p, cfg, patches, ids)
    pooled = z.mean(axis=1)
    h, c_ln = L.layer_norm_forward(pooled, p["norm.g"], p["norm.b"])
    logits, c_head = L.linear_forward(h, p["head.w"], p["head.b"])
    return logits, (c_enc, c_ln, c_head, z.shape[1])


def classifier_backward(dlogits, cache) -> ParamStore:
    c_enc, c_ln, c_head, t = cache
    dh, g_head = L.linear_backward(dlogits, c_head)
    dpooled, g_ln = L.layer_norm_backward(dh, c_ln)
    dz = np.repeat(dpooled[:, None, :] / t, t, axis=1)
    grads = encoder_backward(dz, c_enc)
    grads.update({"head.w": g_head["w"], "head.b": g_head["b"],
                  "norm.g": g_ln["g"], "norm.b": g_ln["b"]})
    return grads


def classifier_loss_and_grads(p: ParamStore, cfg: MaeConfig, patches, labels):
    logits, cache = classifier_forward(p, cfg, patches)
    loss, dlogits = L.softmax_cross_entropy(logits, labels)
    return loss, classifier_backward(dlogits, cache)


def predict_logits(clf: ViTClassifier, images: ImageBatch, batch_size: int = 256) -> np.ndarray:
    seq = patchify(images, clf.config.geometry.patch)
    out = [classifier_forward(clf.params, clf.config, seq.patches[i:i + batch_size])[0]
           for i in range(0, len(seq), batch_size)]
    return np.concatenate(out)


def evaluate(clf: ViTClassifier, test: ImageBatch) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = predict_logits(clf, test).argmax(axis=1)
    return float((pred == test.labels).mean())


def stratified_subset(labels, fraction: float, rng: RngStream) -> np.ndarray:
    labels = np.asarray(labels)
    n_cls = int(labels.max()) + 1
    if not 0 < fraction <= 1:
        raise ValueError(f"label fraction must be in (0, 1], got {fraction}")
    if fraction * len(labels) < n_cls:
        raise ValueError("label fraction leaves fewer samples than classes")
    gen = rng.generator()
    keep = []
    for c in range(n_cls):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise ValueError(f"class {c} absent from training labels")
        take = max(1, int(round(fraction * len(idx))))
        keep.append(gen.permutation(idx)[:take])
    return np.sort(np.concatenate(keep))


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_accuracy: float


def finetune(clf: ViTClassifier, train: ImageBatch, label_fraction: float, epochs: int,
             rng: RngStream | int, batch_size: int = 32, adam: AdamConfig | None = None):
    """Full fine-tuning with softmax cross-entropy on a stratified label subset.

    Returns ``(classifier, curve)`` with one :class:`EpochStats` per epoch.
    """
    rng = as_stream(rng)
    subset = train.take(stratified_subset(train.labels, label_fraction, rng.derive("labels")))
    seq = patchify(subset, clf.config.geometry.patch)
    labels = subset.labels
    params, cfg = clf.params, clf.config
    opt = init_optimizer(params, adam)
    curve = []
    for e in range(epochs):
        order = rng.derive("epoch", e).generator().permutation(len(seq))
        total, correct = 0.0, 0
        for start in range(0, len(seq), batch_size):
            idx = order[start:start + batch_size]
            logits, cache = classifier_forward(params, cfg, seq.patches[idx])
            loss, dlogits = L.softmax_cross_entropy(logits, labels[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite fine-tuning loss in epoch {e}")
            params, opt = adam_update(params, classifier_backward(dlogits, cache), opt)
            total += loss * len(idx)
            correct += int((logits.argmax(1) == labels[idx]).sum())
        curve.append(EpochStats(e, total / len(seq), correct / len(seq)))
    return ViTClassifier(cfg, clf.n_classes, params), curve


# reconstruction dumps --------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> Path:
    """Binary P6 pixmap from an ``[H, W, 3]`` array in [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = rgb.shape
    data = (np.clip(rgb, 0, 1) * 255 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a P6 pixmap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit pixmaps supported")
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def reconstruction_grid(model: MaeParams, images: ImageBatch, ratio: float, rng,
                        fresh: MaeParams | None = None):
    """Columns: masked input, fresh-model recon, model recon, ground truth.

    Returns ``(grid [rows*H, 4*W, 3], plan)``.
    """
    rng = as_stream(rng)
    seq = patchify(images, model.config.geometry.patch)
    plan = sample_mask(len(seq), seq.geometry.num_patches, ratio, FIXED, rng.derive("mask"))
    if fresh is None:
        fresh = init_mae(model.config, rng.derive("fresh"))
    cols = [
        unpatchify(apply_mask_zero(seq, plan)).images,
        unpatchify(reconstruct(fresh, seq, plan)).images,
        unpatchify(reconstruct(model, seq, plan)).images,
        images.images,
    ]
    x = np.concatenate(cols, axis=3)  # [n, c, H, 4W]
    if x.shape[1] == 1:
        x = np.repeat(x, 3, axis=1)
    elif x.shape[1] != 3:
        x = np.repeat(x[:, :1], 3, axis=1)
    n, _, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(n * h, w, 3), plan


def reconstruct_dump(model: MaeParams, images: ImageBatch, ratio: float, rng, path,
                     fresh: MaeParams | None = None) -> Path:
    grid, _ = reconstruction_grid(model, images, ratio, rng, fresh)
    return write_ppm(path, grid)


# footprint ------------------------------------------------------------------

def linear_params(d_in: int, d_out: int) -> int:
    return d_in * d_out + d_out


def block_params(d: int, d_ff: int) -> int:
    return 4 * linear_params(d, d) + 2 * 2 * d + linear_params(d, d_ff) + linear_params(d_ff, d)


def block_flops(tokens: int, d: int, d_ff: int) -> int:
    proj = 4 * 2 * tokens * d * d
    attn = 2 * 2 * tokens * tokens * d  # scores and weighted sum
    mlp = 2 * 2 * tokens * d * d_ff
    return proj + attn + mlp


def model_footprint(model: MaeParams | ViTClassifier, mask_ratio: float = 0.75) -> tuple[int, int]:
    """Exact parameter count and matmul FLOPs (2 per multiply-add) for one image."""
    params = sum(int(v.size) for v in model.params.values())
    cfg = model.config
    g = cfg.geometry
    B = g.num_patches
    if isinstance(model, ViTClassifier):
        t = B
        flops = 2 * t * g.patch_dim * cfg.d_enc
        flops += cfg.depth * block_flops(t, cfg.d_enc, cfg.mlp_ratio * cfg.d_enc)
        flops += 2 * cfg.d_enc * model.n_classes
        return params, flops
    b = max(1, int(round((1 - mask_ratio) * B)))
    flops = 2 * b * g.patch_dim * cfg.d_enc
    flops += cfg.depth * block_flops(b, cfg.d_enc, cfg.mlp_ratio * cfg.d_enc)
    flops += 2 * b * cfg.d_enc * cfg.d_dec
    flops += block_flops(B, cfg.d_dec, cfg.mlp_ratio * cfg.d_dec)
    flops += 2 * B * cfg.d_dec * g.patch_dim
    return params, flops
