"""Desk-scale experiment pipeline shared by the CLI and the acceptance suite.

One seed = one synthetic world: an unlabeled pre-training pool split over
clients, relay pre-training of L lineages, then labeled train/test sets and an
unlabeled server set drawn from fresh streams of the same seed.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .cascade import (CascadeSpec, assemble_multiblock_mae, cascade_assemble, classifier_from_mae,
                      evaluate, finetune, reconstruct_dump, server_refine)
from .checkpoint import load_mae, save_mae
from .data import FIXED, ImageBatch, PartitionSpec, partition, patchify, sample_mask, synth_dataset
from .fed import FedRunConfig, run_pretraining
from .mae import MaeParams, eval_recon_loss
from .optim import AdamConfig
from .rng import RngStream

ACCURACY_HEADER = ("depth", "p_pre", "seed", "label_fraction", "accuracy")


@dataclass(frozen=True)
class DeskSetup:
    # synthetic images
    noise: float = 1.0
    n_classes: int = 4
    size: int = 16
    pool_per_class: int = 512
    train_per_class: int = 64
    test_per_class: int = 500
    # federated pre-training
    clients: int = 10
    lineages: int = 5
    rounds: int = 100
    local_epochs: int = 2
    alpha: float = 0.0
    mask_ratio: float = 0.75
    # downstream
    label_fraction: float = 0.25
    finetune_epochs: int = 40
    finetune_lr: float = 1e-3
    server_images: int = 256
    refine_epochs: int = 10
    refine_depth: int = 3
    recon_depth: int = 5
    recon_images: int = 256

    def fed_config(self, seed: int, **kw) -> FedRunConfig:
        return FedRunConfig(clients=self.clients, rounds=self.rounds, local_epochs=self.local_epochs,
                            clients_per_round=self.lineages, lineages=self.lineages,
                            mask_ratio=self.mask_ratio, seed=seed).with_(**kw)

    def key(self, seed: int) -> str:
        """Short digest of everything that determines the pre-trained lineages."""
        fields = ("noise", "n_classes", "size", "pool_per_class", "clients", "lineages", "rounds",
                  "local_epochs", "alpha", "mask_ratio")
        text = ";".join(f"{f}={getattr(self, f)!r}" for f in fields) + f";seed={seed}"
        return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()

    def with_(self, **kw) -> "DeskSetup":
        return replace(self, **kw)


def _images(setup: DeskSetup, per_class: int, seed: int, label: str) -> ImageBatch:
    return synth_dataset(per_class, setup.n_classes, setup.size, setup.size, setup.noise,
                         rng=RngStream(seed).derive(label))


def pretrain_pool(setup: DeskSetup, seed: int) -> ImageBatch:
    return _images(setup, setup.pool_per_class, seed, "pool")


def downstream_sets(setup: DeskSetup, seed: int):
    """``(train, test, server)``; server images are used without labels."""
    train = _images(setup, setup.train_per_class, seed, "train")
    test = _images(setup, setup.test_per_class, seed, "test")
    per = setup.server_images // setup.n_classes
    server = _images(setup, per, seed, "server") if per else train.take(np.arange(0))
    return train, test, server


def pretrain_sources(setup: DeskSetup, seed: int, cache_dir=None, workers: int = 1) -> list[MaeParams]:
    """Final lineage models of one relay pre-training run, cached on disk when asked."""
    cache = Path(cache_dir) / setup.key(seed) if cache_dir is not None else None
    paths = [cache / f"lineage_{i}.ckpt" for i in range(setup.lineages)] if cache else []
    if cache and all(p.exists() for p in paths):
        return [load_mae(p) for p in paths]
    pool = pretrain_pool(setup, seed)
    cfg = setup.fed_config(seed, workers=workers)
    shards = partition(pool.labels, PartitionSpec(setup.clients, setup.alpha, seed))
    state, metrics = run_pretraining(cfg, pool, shards)
    models = state.models
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
        for p, m in zip(paths, models):
            # write then rename, so concurrent jobs never read half a file
            tmp = save_mae(p.with_suffix(f".tmp{os.getpid()}"), m, seed=seed)
            os.replace(tmp, p)
        metrics.to_csv(cache / "metrics.csv")
        (cache / "setup.txt").write_text("".join(f"{k}={v}\n" for k, v in asdict(setup).items()))
    return models


def _finetune_eval(clf, train, test, setup: DeskSetup, seed: int) -> float:
    clf, _ = finetune(clf, train, setup.label_fraction, setup.finetune_epochs,
                      RngStream(seed).derive("finetune"), adam=AdamConfig(lr=setup.finetune_lr))
    return evaluate(clf, test)


def cascade_accuracy(sources, setup: DeskSetup, seed: int, depth: int, p_pre: int,
                     source=None, data=None) -> float:
    """Assemble, fine-tune and test one ablation arm.

    Every arm of a seed shares the fresh-slot initialisation, head, label
    subset and batch order, so arms differ only in which blocks are pre-trained.
    """
    train, test, _ = data or downstream_sets(setup, seed)
    spec = CascadeSpec(depth, p_pre, source=source if p_pre else None, init_seed=seed)
    clf = cascade_assemble(sources, spec, setup.n_classes, RngStream(seed).derive("classifier"))
    return _finetune_eval(clf, train, test, setup, seed)


def ablation_rows(setup: DeskSetup, seeds, arms, cache_dir=None, source=None, log=None):
    """Rows ``(depth, p_pre, seed, label_fraction, accuracy)`` for each arm and seed."""
    rows = []
    for seed in seeds:
        sources = pretrain_sources(setup, seed, cache_dir)
        data = downstream_sets(setup, seed)
        for depth, p_pre in arms:
            acc = cascade_accuracy(sources, setup, seed, depth, p_pre, source, data)
            rows.append((depth, p_pre, seed, setup.label_fraction, acc))
            if log:
                log(f"seed={seed} depth={depth} p_pre={p_pre} accuracy={acc:.4f}")
    return rows


def median_by_arm(rows) -> dict[tuple[int, int], float]:
    groups: dict[tuple[int, int], list[float]] = {}
    for depth, p_pre, _, _, acc in rows:
        groups.setdefault((depth, p_pre), []).append(acc)
    return {k: float(np.median(v)) for k, v in sorted(groups.items())}


def refine_pair(sources, setup: DeskSetup, seed: int) -> tuple[float, float]:
    """Downstream accuracy of a cascaded MAE without and with server refinement."""
    train, test, server = downstream_sets(setup, seed)
    depth = min(setup.refine_depth, len(sources))
    model = assemble_multiblock_mae(sources, depth, RngStream(seed).derive("assemble"))
    refined = server_refine(model, server, setup.refine_epochs, RngStream(seed).derive("server"))
    accs = []
    for m in (model, refined):
        clf = classifier_from_mae(m, setup.n_classes, RngStream(seed).derive("classifier"))
        accs.append(_finetune_eval(clf, train, test, setup, seed))
    return accs[0], accs[1]


def recon_pair(sources, setup: DeskSetup, seed: int, dump_path=None) -> tuple[float, float]:
    """Held-out masked reconstruction loss of the cascaded MAE and of a fresh one."""
    depth = setup.recon_depth
    if depth > len(sources):
        raise ValueError(f"need {depth} lineages for a {depth}-block MAE, have {len(sources)}")
    pre = assemble_multiblock_mae(sources, depth, RngStream(seed).derive("assemble"))
    fresh = assemble_multiblock_mae(sources, CascadeSpec(depth, 0), RngStream(seed).derive("fresh"))
    held = _images(setup, max(1, setup.recon_images // setup.n_classes), seed, "held_out")
    seq = patchify(held, pre.config.geometry.patch)
    plan = sample_mask(len(seq), seq.geometry.num_patches, 0.75, FIXED, RngStream(seed).derive("held_mask"))
    if dump_path is not None:
        rows = np.linspace(0, len(held) - 1, min(8, len(held))).astype(int)  # spread over classes
        reconstruct_dump(pre, held.take(rows), 0.75,
                         RngStream(seed).derive("dump"), dump_path, fresh=fresh)
    return eval_recon_loss(pre, seq, plan), eval_recon_loss(fresh, seq, plan)
