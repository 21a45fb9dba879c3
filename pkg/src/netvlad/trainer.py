"""SGD training of NetVLAD parameters with cached-representation hard negative mining."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .descriptors import DescriptorDataset, ValidationError, array_hash, l2_normalize_rows
from .encoders import NetVladEncoder
from .evaluation import evaluate
from .geodata import MIN_DAYS_APART, build_tuples
from .loss import LossConfig, TrainingTuple, weak_triplet_loss
from .pooling import NetVladParams, init_netvlad, netvlad_backward, netvlad_forward

log = logging.getLogger(__name__)

PARAM_NAMES = ("w", "b", "c")


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    margin: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 4
    epochs: int = 30
    pool_size: int = 1000
    keep: int = 10
    recompute_interval: int = 1000
    lr_period: int = 5
    clusters: int = 8
    target_ratio: float = 100.0
    init_sample: int = 20000
    min_days: float = MIN_DAYS_APART
    decay: tuple = ("w", "c")
    precision: str = "single"
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValidationError("need lr >= 0, 0 <= momentum < 1, weight_decay >= 0")
        for name in ("batch_size", "pool_size", "keep", "recompute_interval", "lr_period", "clusters", "init_sample"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if set(self.decay) - set(PARAM_NAMES):
            raise ValidationError(f"decay entries must be among {PARAM_NAMES}")
        object.__setattr__(self, "decay", tuple(self.decay))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay"] = list(self.decay)
        return d


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.001
    velocity: dict = field(default_factory=dict)
    epoch: int = 0
    decay: tuple = ("w", "c")

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError("learning rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")


def sgd_step(params: NetVladParams, grads: dict, state: OptimizerState) -> tuple[NetVladParams, OptimizerState]:
    """Heavy-ball momentum with L2 weight decay added to the gradient:
    v <- mu v - lr (g + wd p);  p <- p + v."""
    for name in PARAM_NAMES:
        g = np.asarray(grads[name])
        if g.shape != getattr(params, name).shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name}; step aborted")
    new, vel = {}, {}
    for name in PARAM_NAMES:
        p = getattr(params, name)
        g = np.asarray(grads[name], dtype=p.dtype)
        if name in state.decay and state.weight_decay:
            g = g + p.dtype.type(state.weight_decay) * p
        v = state.velocity.get(name)
        v = np.zeros_like(p) if v is None else v
        v = p.dtype.type(state.momentum) * v - p.dtype.type(state.learning_rate) * g
        vel[name] = v
        new[name] = p + v
    out = OptimizerState(state.learning_rate, state.momentum, state.weight_decay, vel, state.epoch, state.decay)
    return params.replace(**new), out


def lr_schedule(initial_lr: float, epoch: int, period: int = 5) -> float:
    return initial_lr * 0.5 ** (epoch // period)


def recompute_interval(base: int, epoch: int, period: int = 5) -> int:
    """Queries between cache rebuilds; doubles whenever the learning rate halves."""
    return base * 2 ** (epoch // period)


# ---------------------------------------------------------------------------
# cache and mining


@dataclass
class ReprCache:
    ids: list
    reprs: np.ndarray
    staleness: int = 0
    rebuilds: int = 1

    def __post_init__(self):
        self.index = {i: n for n, i in enumerate(self.ids)}

    def __getitem__(self, image_id) -> np.ndarray:
        return self.reprs[self.index[image_id]]


def recompute_cache(dataset: DescriptorDataset, params: NetVladParams, previous: ReprCache | None = None) -> ReprCache:
    """Re-encode every image of ``dataset``; staleness resets to zero."""
    reprs = NetVladEncoder(params).encode(dataset.descriptors)
    rebuilds = 1 if previous is None else previous.rebuilds + 1
    return ReprCache(list(dataset.ids), reprs, 0, rebuilds)


@dataclass
class MiningState:
    capacity: int = 10
    remembered: dict = field(default_factory=dict)

    def get(self, query_id) -> list:
        return list(self.remembered.get(query_id, ()))


def hardest_by_distance(query_repr: np.ndarray, candidates: Sequence, cache: ReprCache, keep: int) -> list:
    """The ``keep`` candidates nearest to the query in cached space (ties by id)."""
    cands = sorted(set(candidates))
    if not cands:
        return []
    reps = cache.reprs[[cache.index[c] for c in cands]]
    diff = reps - query_repr
    d2 = np.sum(diff * diff, axis=1)
    order = sorted(range(len(cands)), key=lambda i: (d2[i], cands[i]))
    return [cands[i] for i in order[:keep]]


def mine_negatives(
    query_id, negative_ids: Sequence, cache: ReprCache, mining: MiningState,
    pool_size: int = 1000, keep: int = 10, rng: np.random.Generator | None = None,
) -> list:
    """Randomized hard negative mining.

    Candidates are ``pool_size`` negatives drawn uniformly (all of them when
    fewer exist) plus the negatives remembered for this query; the ``keep``
    closest to the cached query representation are returned and remembered.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    negs = list(negative_ids)
    if not negs:
        raise ValidationError(f"query {query_id!r} has no definite negatives")
    if len(negs) > pool_size:
        pool = [negs[i] for i in rng.choice(len(negs), size=pool_size, replace=False)]
    else:
        pool = negs
    valid = set(negs)
    remembered = [n for n in mining.get(query_id) if n in valid]
    chosen = hardest_by_distance(cache[query_id], pool + remembered, cache, keep)
    mining.remembered[query_id] = chosen[: mining.capacity]
    return chosen


# ---------------------------------------------------------------------------
# training loop


def tuple_loss_and_grads(
    params: NetVladParams, maps: np.ndarray, n_pos: int, cfg: LossConfig
) -> tuple[float, dict]:
    """Loss of one tuple given stacked maps [query, positives..., negatives...]
    (already descriptor-normalized) and its parameter gradients."""
    reprs, cache = netvlad_forward(maps, params)
    res = weak_triplet_loss(reprs[0], reprs[1 : 1 + n_pos], reprs[1 + n_pos :], cfg)
    if res.loss == 0.0:
        return 0.0, {n: np.zeros_like(getattr(params, n)) for n in PARAM_NAMES}
    g = np.concatenate([res.grad_query[None], res.grad_positives, res.grad_negatives])
    grads = netvlad_backward(cache, g)
    return res.loss, grads.params()


@dataclass
class TrainResult:
    best_params: NetVladParams
    best_epoch: int
    init_params: NetVladParams
    checkpoints: list
    history: list
    step_losses: list
    diverged: bool = False
    init_sample_hash: str = ""

    def metrics_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.history)

    def write_metrics(self, path: str | Path) -> Path:
        p = Path(path)
        p.write_text(self.metrics_lines())
        return p


def _seed_streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("kmeans", "init", "mining", "shuffle")
    children = np.random.SeedSequence([seed, 1]).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}


def initial_params(train: DescriptorDataset, cfg: TrainConfig, streams=None) -> tuple[NetVladParams, str]:
    streams = streams or _seed_streams(cfg.seed)
    x = l2_normalize_rows(train.descriptors.reshape(-1, train.d).astype(np.float64))
    if len(x) > cfg.init_sample:
        x = x[np.sort(streams["init"].choice(len(x), size=cfg.init_sample, replace=False))]
    params = init_netvlad(x, cfg.clusters, cfg.target_ratio, seed=streams["kmeans"], precision=cfg.precision)
    return params, array_hash([x])


def _val_record(val: DescriptorDataset | None, params: NetVladParams) -> dict:
    if val is None:
        return {}
    curve = evaluate(val, NetVladEncoder(params), n_values=(1, 5, 10)).curve
    return {f"recall@{n}": r for n, r in zip(curve.n_values, curve.recall)}


def train(
    train_split: DescriptorDataset,
    val_split: DescriptorDataset | None,
    cfg: TrainConfig = TrainConfig(),
    tuples: list[TrainingTuple] | None = None,
    init: NetVladParams | None = None,
) -> TrainResult:
    """Train NetVLAD on ``train_split``; pick the epoch with the best validation recall@5.

    Every image of the training split acts as a query; tuples come from
    :func:`build_tuples` unless given. A batch averages the per-tuple losses.
    """
    streams = _seed_streams(cfg.seed)
    if init is None:
        params, sample_hash = initial_params(train_split, cfg, streams)
    else:
        params, sample_hash = init.astype(cfg.precision), ""
    init_params = params
    if tuples is None:
        tuples = build_tuples(train_split, min_days=cfg.min_days)
    if not tuples:
        raise ValidationError("no training tuples")

    index = {i: n for n, i in enumerate(train_split.ids)}
    normed = l2_normalize_rows(train_split.descriptors.astype(params.dtype))
    loss_cfg = LossConfig(cfg.margin)
    mining = MiningState(cfg.keep)
    state = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay, decay=cfg.decay)

    cache = recompute_cache(train_split, params)
    history = [{"epoch": 0, "loss": None, "lr": None, "cache_rebuilds": cache.rebuilds, **_val_record(val_split, params)}]
    checkpoints = [params]
    step_losses: list[float] = []
    best_epoch, best_r5 = 0, -math.inf
    diverged = False

    for epoch in range(cfg.epochs):
        state.learning_rate = lr_schedule(cfg.lr, epoch, cfg.lr_period)
        state.epoch = epoch
        interval = recompute_interval(cfg.recompute_interval, epoch, cfg.lr_period)
        order = streams["shuffle"].permutation(len(tuples))
        epoch_losses = []
        try:
            for start in range(0, len(order), cfg.batch_size):
                batch = [tuples[i] for i in order[start : start + cfg.batch_size]]
                acc = {n: np.zeros_like(getattr(params, n)) for n in PARAM_NAMES}
                batch_loss = 0.0
                for t in batch:
                    if cache.staleness >= interval:
                        cache = recompute_cache(train_split, params, cache)
                    negs = mine_negatives(t.query_id, t.negative_ids, cache, mining,
                                          cfg.pool_size, cfg.keep, streams["mining"])
                    ids = [t.query_id, *t.positive_ids, *negs]
                    maps = normed[[index[i] for i in ids]]
                    loss, grads = tuple_loss_and_grads(params, maps, len(t.positive_ids), loss_cfg)
                    cache.staleness += 1
                    if not math.isfinite(loss):
                        raise DivergenceError("non-finite loss")
                    batch_loss += loss
                    for n in PARAM_NAMES:
                        acc[n] += grads[n]
                scale = 1.0 / len(batch)
                params, state = sgd_step(params, {n: acc[n] * scale for n in PARAM_NAMES}, state)
                step_losses.append(batch_loss * scale)
                epoch_losses.append(batch_loss * scale)
        except DivergenceError as exc:
            log.error("training diverged in epoch %d: %s", epoch + 1, exc)
            diverged = True
            params = checkpoints[-1]
            break

        record = {
            "epoch": epoch + 1,
            "loss": float(np.mean(epoch_losses)),
            "lr": state.learning_rate,
            "cache_rebuilds": cache.rebuilds,
            **_val_record(val_split, params),
        }
        history.append(record)
        checkpoints.append(params)
        r5 = record.get("recall@5", epoch)  # no validation split: keep the last epoch
        if r5 > best_r5:
            best_r5, best_epoch = r5, epoch + 1
        log.info("epoch %d loss %.4f val r@5 %s", epoch + 1, record["loss"], record.get("recall@5"))

    return TrainResult(
        best_params=checkpoints[best_epoch], best_epoch=best_epoch, init_params=init_params,
        checkpoints=checkpoints, history=history, step_losses=step_losses,
        diverged=diverged, init_sample_hash=sample_hash,
    )
