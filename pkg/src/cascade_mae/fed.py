"""Federated pre-training rounds.

Two protocol modes:

* ``relay``: L independent model lineages; each round lineage i trains on the
  i-th selected client and keeps its optimizer state. Lineages never exchange
  parameters.
* ``fedavg``: one global model broadcast to C clients each round, replaced by
  the average of their local results. Optimizer state is reset every round.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import save_mae
from .data import ClientShard, Geometry, ImageBatch, PatchSequence, patchify
from .mae import MaeConfig, MaeParams, init_mae, train_step
from .optim import AdamConfig, OptimizerState, init_optimizer
from .rng import RngStream

RELAY = "relay"
FEDAVG = "fedavg"


@dataclass(frozen=True)
class FedRunConfig:
    clients: int = 100
    rounds: int = 200
    local_epochs: int = 10
    clients_per_round: int = 5
    mode: str = RELAY
    lineages: int = 5
    batch_size: int = 32
    mask_ratio: float = 0.75
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    weighted_average: bool = False
    shared_init: bool = True
    seed: int = 0
    # model
    patch: int = 4
    d_enc: int = 64
    d_dec: int = 32
    enc_heads: int = 4
    dec_heads: int = 4
    mlp_ratio: int = 4
    # execution
    workers: int = 1
    checkpoint_every: int = 0

    def validate(self) -> None:
        if not 1 <= self.clients_per_round <= self.clients:
            raise ValueError(f"need 1 <= C <= K, got C={self.clients_per_round}, K={self.clients}")
        if self.mode not in (RELAY, FEDAVG):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == RELAY and self.lineages != self.clients_per_round:
            raise ValueError("relay mode pairs one client per lineage: need C == L")
        if min(self.rounds, self.local_epochs, self.checkpoint_every) < 0:
            raise ValueError("rounds, local_epochs and checkpoint_every must be >= 0")
        if self.batch_size < 1 or self.workers < 1:
            raise ValueError("batch_size and workers must be >= 1")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.lr, self.beta1, self.beta2, 1e-8, self.weight_decay)

    def model_config(self, geometry: Geometry) -> MaeConfig:
        return MaeConfig(geometry, self.d_enc, self.d_dec, self.enc_heads, self.dec_heads,
                         self.mlp_ratio, depth=1)

    @property
    def root(self) -> RngStream:
        return RngStream(self.seed)

    def with_(self, **kw) -> "FedRunConfig":
        return FedRunConfig(**{**asdict(self), **kw})


def _parse_field(f, text: str):
    if f.type in (bool, "bool"):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"{f.name}: expected a boolean, got {text!r}")
    kind = {"int": int, "float": float, "str": str}.get(f.type, f.type)
    return kind(text)


def config_from_mapping(values: dict[str, str], base: FedRunConfig | None = None) -> FedRunConfig:
    known = {f.name: f for f in fields(FedRunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    parsed = {k: _parse_field(known[k], str(v)) for k, v in values.items()}
    cfg = (base or FedRunConfig()).with_(**parsed)
    cfg.validate()
    return cfg


def config_to_text(cfg: FedRunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in asdict(cfg).items())


# state ------------------------------------------------------------------------

@dataclass
class MetricsLog:
    rows: list[tuple[int, int, int, float, float]] = field(default_factory=list)

    HEADER = ("round", "unit_id", "client_id", "loss", "seconds")

    def append(self, rnd, unit, client, loss, seconds) -> None:
        self.rows.append((int(rnd), int(unit), int(client), float(loss), float(seconds)))

    def without_time(self) -> list[tuple]:
        return [r[:4] for r in self.rows]

    def mean_loss(self, rnd: int) -> float:
        return float(np.mean([r[3] for r in self.rows if r[0] == rnd]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r[0], r[1], r[2], repr(r[3]), f"{r[4]:.6f}"])


@dataclass
class LineageState:
    lineage_id: int
    model: MaeParams
    opt: OptimizerState
    visits: list[tuple[int, int, float]] = field(default_factory=list)


@dataclass
class ServerState:
    mode: str
    lineages: list[LineageState] = field(default_factory=list)
    global_model: MaeParams | None = None
    round: int = 0
    metrics: MetricsLog = field(default_factory=MetricsLog)

    @property
    def models(self) -> list[MaeParams]:
        if self.mode == RELAY:
            return [ln.model for ln in self.lineages]
        return [self.global_model]


# protocol operations ------------------------------------------------------------

def select_clients(rnd: int, cfg: FedRunConfig, rng: RngStream | None = None) -> list[int]:
    """C distinct client ids, uniform without replacement, fixed per (seed, round)."""
    if cfg.clients_per_round > cfg.clients:
        raise ValueError("more clients per round than clients")
    gen = (rng or cfg.root).derive("select", rnd).generator()
    return [int(i) for i in gen.choice(cfg.clients, size=cfg.clients_per_round, replace=False)]


def local_train(model: MaeParams, opt: OptimizerState, data: PatchSequence, epochs: int,
                rng: RngStream, batch_size: int = 32, mask_ratio: float = 0.75):
    """``epochs`` shuffled passes over ``data``; returns (model, opt, final-epoch mean loss)."""
    if len(data) == 0:
        raise ValueError("empty shard")
    loss = math.nan
    for e in range(epochs):
        ep = rng.derive("epoch", e)
        order = ep.derive("shuffle").generator().permutation(len(data))
        losses = []
        for j, start in enumerate(range(0, len(data), batch_size)):
            batch = data.take(order[start:start + batch_size])
            model, opt, bl = train_step(model, opt, batch, ep.derive("batch", j), mask_ratio)
            losses.append(bl * len(batch))
        loss = float(sum(losses) / len(data))
    return model, opt, loss


def average_params(models: list[MaeParams], weights=None) -> MaeParams:
    if not models:
        raise ValueError("nothing to average")
    names = set(models[0].params)
    for m in models[1:]:
        if set(m.params) != names or any(
            m.params[k].shape != models[0].params[k].shape for k in names
        ):
            raise ValueError("parameter shapes differ between models")
    if weights is None:
        w = np.full(len(models), 1.0 / len(models))
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    out = {}
    for k in models[0].params:
        stack = np.stack([m.params[k].astype(np.float64) for m in models])
        out[k] = np.tensordot(w, stack, axes=1).astype(models[0].params[k].dtype)
    return MaeParams(models[0].config, out)


def init_state(cfg: FedRunConfig, geometry: Geometry) -> ServerState:
    cfg.validate()
    mcfg = cfg.model_config(geometry)
    root = cfg.root.derive("init")
    if cfg.mode == FEDAVG:
        model = init_mae(mcfg, root)
        return ServerState(FEDAVG, global_model=model)
    lineages = []
    for i in range(cfg.lineages):
        model = init_mae(mcfg, root if cfg.shared_init else root.derive("lineage", i))
        lineages.append(LineageState(i, model, init_optimizer(model.params, cfg.adam)))
    return ServerState(RELAY, lineages=lineages)


def _pool_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_round_relay(state: ServerState, shards: list[ClientShard], data: PatchSequence,
                    cfg: FedRunConfig, rnd: int) -> ServerState:
    if state.mode != RELAY:
        raise ValueError("run_round_relay needs a relay-mode state")
    selected = select_clients(rnd, cfg)
    base = cfg.root.derive("round", rnd)

    def job(i):
        ln, client = state.lineages[i], selected[i]
        t0 = time.perf_counter()
        model, opt, loss = local_train(
            ln.model, ln.opt, data.take(shards[client].indices), cfg.local_epochs,
            base.derive("lineage", ln.lineage_id), cfg.batch_size, cfg.mask_ratio,
        )
        return LineageState(ln.lineage_id, model, opt, ln.visits + [(rnd, client, loss)]), \
            time.perf_counter() - t0

    results = _pool_map(job, range(len(state.lineages)), cfg.workers)
    metrics = MetricsLog(list(state.metrics.rows))
    for (ln, secs), client in zip(results, selected):
        metrics.append(rnd, ln.lineage_id, client, ln.visits[-1][2], secs)
    return ServerState(RELAY, lineages=[ln for ln, _ in results], round=rnd, metrics=metrics)


def run_round_fedavg(state: ServerState, shards: list[ClientShard], data: PatchSequence,
                     cfg: FedRunConfig, rnd: int, return_clients: bool = False):
    if state.mode != FEDAVG:
        raise ValueError("run_round_fedavg needs a fedavg-mode state")
    selected = select_clients(rnd, cfg)
    base = cfg.root.derive("round", rnd)

    def job(client):
        t0 = time.perf_counter()
        model = state.global_model
        model, _, loss = local_train(
            model, init_optimizer(model.params, cfg.adam), data.take(shards[client].indices),
            cfg.local_epochs, base.derive("client", client), cfg.batch_size, cfg.mask_ratio,
        )
        return model, loss, time.perf_counter() - t0

    results = _pool_map(job, selected, cfg.workers)
    metrics = MetricsLog(list(state.metrics.rows))
    for (_, loss, secs), client in zip(results, selected):
        metrics.append(rnd, 0, client, loss, secs)
    if cfg.local_epochs == 0:
        new_global = state.global_model
    else:
        weights = [len(shards[c]) for c in selected] if cfg.weighted_average else None
        new_global = average_params([m for m, _, _ in results], weights)
    out = ServerState(FEDAVG, global_model=new_global, round=rnd, metrics=metrics)
    return (out, [m for m, _, _ in results]) if return_clients else out


def write_checkpoints(state: ServerState, directory, rnd: int) -> None:
    d = Path(directory) / f"round_{rnd}"
    try:
        if state.mode == RELAY:
            for ln in state.lineages:
                save_mae(d / f"lineage_{ln.lineage_id}.ckpt", ln.model, round=rnd)
        else:
            save_mae(d / "global.ckpt", state.global_model, round=rnd)
    except OSError as exc:
        raise OSError(f"writing checkpoints for round {rnd}: {exc}") from exc


def run_pretraining(cfg: FedRunConfig, dataset: ImageBatch | PatchSequence,
                    shards: list[ClientShard], out_dir=None):
    """Run ``cfg.rounds`` rounds from a fresh initialisation.

    Returns ``(state, metrics)``. With ``out_dir`` set, checkpoints are written
    every ``checkpoint_every`` rounds and after the final round.
    """
    cfg.validate()
    data = dataset if isinstance(dataset, PatchSequence) else patchify(dataset, cfg.patch)
    if len(shards) != cfg.clients:
        raise ValueError(f"{len(shards)} shards for {cfg.clients} clients")
    state = init_state(cfg, data.geometry)
    step = run_round_relay if cfg.mode == RELAY else run_round_fedavg
    for rnd in range(1, cfg.rounds + 1):
        state = step(state, shards, data, cfg, rnd)
        if out_dir is not None and (
            rnd == cfg.rounds or (cfg.checkpoint_every and rnd % cfg.checkpoint_every == 0)
        ):
            write_checkpoints(state, out_dir, rnd)
    return state, state.metrics
