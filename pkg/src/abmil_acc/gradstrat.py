"""Full-bag and accumulated gradients, subsampling baseline, Adam, training loop."""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import graphcore as gc
from .graphcore import LeafKind, Tape
from .model import (
    EncoderParams,
    ModelConfig,
    Mode,
    ParamSet,
    PoolerParams,
    attention_pool,
    bce_loss,
    encode,
    forward,
    init_params,
)
from .seeding import substream

ENCODER_SCOPE = "encoder"
# Phase-A cache uses running BN statistics; stateless and tape-free.
CACHE_MODE = Mode.INFER


class Strategy(str, enum.Enum):
    FULL_BAG = "full_bag"
    ACCUMULATE = "accumulate"
    SAMPLE_TRAIN = "sample_train"


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 1e-3
    epochs: int = 300
    alpha_percent: float = 25.0
    selection_window: int = 15
    seed: int = 0
    bn_enabled: bool = False
    strategy: Strategy = Strategy.ACCUMULATE
    sample_percent: float = 100.0
    hidden: tuple[int, ...] = (64, 32)
    attn_dim: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.alpha_percent > 0 or self.alpha_percent > 100:
            raise ValueError(f"alpha_percent must be in (0, 100], got {self.alpha_percent}")
        if not 0 < self.sample_percent <= 100:
            raise ValueError(f"sample_percent must be in (0, 100], got {self.sample_percent}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.selection_window < 1:
            raise ValueError(f"selection_window must be >= 1, got {self.selection_window}")

    def model_config(self, input_dim: int) -> ModelConfig:
        return ModelConfig(input_dim, self.hidden, self.attn_dim, self.bn_enabled)

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["strategy"] = self.strategy.value
        return out


@dataclass
class GradSet:
    theta: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]
    count: int = 0

    @classmethod
    def zeros_like(cls, theta: EncoderParams, phi: PoolerParams) -> GradSet:
        return cls({k: np.zeros_like(v) for k, v in theta.named_tensors().items()},
                   {k: np.zeros_like(v) for k, v in phi.named_tensors().items()})

    def all(self) -> dict[str, np.ndarray]:
        return {**self.theta, **self.phi}

    def rel_diff(self, other: GradSet, group: str = "all") -> float:
        """Relative L2 difference of the flattened group against ``other``."""
        a = getattr(self, group)() if group == "all" else getattr(self, group)
        b = getattr(other, group)() if group == "all" else getattr(other, group)
        return rel_l2(np.concatenate([a[k].ravel() for k in a]),
                      np.concatenate([b[k].ravel() for k in a]))


def rel_l2(x: np.ndarray, ref: np.ndarray) -> float:
    denom = np.linalg.norm(ref)
    diff = np.linalg.norm(np.asarray(x) - np.asarray(ref))
    return float(diff / denom) if denom > 0 else float(diff)


@dataclass
class StepReport:
    loss: float
    forward_count: int
    peak_scalars: int
    encoder_peak_scalars: int
    wall_s: float
    chunk_losses: list[float] = field(default_factory=list)
    attention_weights: np.ndarray | None = field(default=None, repr=False)


def _instances(bag) -> np.ndarray:
    X = bag.instances if hasattr(bag, "instances") else bag
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("bag must hold a non-empty [n, input_dim] instance matrix")
    return X


def _named_grads(tape: Tape, grads: dict, names) -> dict[str, np.ndarray]:
    return {k: grads[tape.bindings[k]] for k in names}


def full_bag_grad(theta: EncoderParams, phi: PoolerParams, bag) -> tuple[GradSet, StepReport]:
    """Conventional pass: every instance's activations on one tape."""
    t0 = time.perf_counter()
    X = _instances(bag)
    tape = Tape()
    with tape.scope(ENCODER_SCOPE):
        Z = encode(theta, X, Mode.TRAIN, tape)
    res = attention_pool(phi, Z, tape)
    loss = bce_loss(res, bag.bag_label)
    grads = gc.backward(tape, loss)
    gs = GradSet(_named_grads(tape, grads, theta.named_tensors()),
                 _named_grads(tape, grads, phi.named_tensors()), count=1)
    report = StepReport(float(loss.value), X.shape[0], tape.peak, tape.peak_in_scope(ENCODER_SCOPE),
                        time.perf_counter() - t0, attention_weights=res.attention_weights)
    return gs, report


def chunk_bounds(n: int, chunk_size: int) -> list[tuple[int, int]]:
    return [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]


def alpha_to_chunk(n: int, alpha_percent: float) -> int:
    return max(1, round(n * alpha_percent / 100))


def accum_grad(theta: EncoderParams, phi: PoolerParams, bag, chunk_size: int,
               order: Sequence[int] | None = None) -> tuple[GradSet, StepReport]:
    """Memory-bounded gradient: encoder gradient summed over chunk passes.

    Phase A encodes every instance without a tape to build a feature cache.
    Phase B forwards the cache through the pooler as a constant and yields
    the exact pooler gradient and the reported loss. Phase C re-encodes one
    contiguous chunk at a time on a fresh tape, splices it into the cache
    (all other rows constant) and back-propagates into the encoder only.
    ``order`` permutes the chunk processing sequence.
    """
    t0 = time.perf_counter()
    X = _instances(bag)
    n = X.shape[0]
    if not 1 <= chunk_size <= n:
        raise ValueError(f"chunk_size must be in [1, {n}], got {chunk_size}")

    cache = encode(theta, X, CACHE_MODE).value

    tape_b = Tape()
    res = attention_pool(phi, tape_b.constant(cache), tape_b)
    loss_b = bce_loss(res, bag.bag_label)
    grads_b = gc.backward(tape_b, loss_b)
    gs = GradSet.zeros_like(theta, phi)
    gs.phi = _named_grads(tape_b, grads_b, phi.named_tensors())
    peak, enc_peak = tape_b.peak, 0

    chunks = chunk_bounds(n, chunk_size)
    if order is not None:
        if sorted(order) != list(range(len(chunks))):
            raise ValueError(f"order must permute range({len(chunks)})")
        chunks = [chunks[i] for i in order]
    chunk_losses = []
    for s, e in chunks:
        tape = Tape()
        with tape.scope(ENCODER_SCOPE):
            zc = encode(theta, X[s:e], Mode.TRAIN, tape)
        parts = [p for p in (cache[:s], zc, cache[e:]) if isinstance(p, gc.Var) or p.shape[0]]
        Z = gc.concat(parts, axis=0)
        out = attention_pool(phi, Z, tape, kind=LeafKind.CONSTANT)
        loss = bce_loss(out, bag.bag_label)
        grads = gc.backward(tape, loss)
        for k in gs.theta:
            gs.theta[k] = gs.theta[k] + grads[tape.bindings[k]]
        chunk_losses.append(float(loss.value))
        peak = max(peak, tape.peak)
        enc_peak = max(enc_peak, tape.peak_in_scope(ENCODER_SCOPE))
    gs.count = len(chunks)
    report = StepReport(float(loss_b.value), 2 * n, peak, enc_peak, time.perf_counter() - t0,
                        chunk_losses, attention_weights=res.attention_weights)
    return gs, report


def sample_indices(n: int, sample_percent: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted uniform subset of ceil(n * pct / 100) indices, without replacement."""
    if not 0 < sample_percent <= 100:
        raise ValueError(f"sample_percent must be in (0, 100], got {sample_percent}")
    m = min(n, math.ceil(n * sample_percent / 100))
    return np.sort(rng.choice(n, size=m, replace=False))


@dataclass
class _SubBag:
    instances: np.ndarray
    bag_label: int


def sample_train_grad(theta: EncoderParams, phi: PoolerParams, bag, sample_percent: float,
                      rng: np.random.Generator) -> tuple[GradSet, StepReport]:
    X = _instances(bag)
    idx = sample_indices(X.shape[0], sample_percent, rng)
    return full_bag_grad(theta, phi, _SubBag(X[idx], bag.bag_label))


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], config: TrainConfig,
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """Adam with decoupled weight decay (p <- p - lr*wd*p before the Adam delta)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2 = config.beta1, config.beta2
    step = state.step + 1
    new_m, new_v, out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        p = p - lr * wd * p
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        new_m[name], new_v[name] = m, v
    return out, AdamState(new_m, new_v, step)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_error: float
    wall_ms: float
    fwd_count: int
    peak_scalars: int

    CSV_FIELDS = ("epoch", "train_loss", "val_loss", "val_error", "wall_ms", "fwd_count",
                  "peak_scalars")

    def row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


@dataclass
class TrainResult:
    best_params: ParamSet
    best_epoch: int
    history: list[EpochRecord]
    step_reports: list[list[StepReport]]
    config: TrainConfig
    snapshots: list[ParamSet] = field(default_factory=list, repr=False)

    @property
    def train_wall_s(self) -> float:
        return float(np.sum([r.wall_ms for r in self.history])) / 1000.0


def validation_metrics(params: ParamSet, bags) -> tuple[float, float]:
    """Mean BCE and misclassification rate at threshold 0.5, Infer mode."""
    losses, wrong = [], 0
    for bag in bags:
        res = forward(params, bag.instances, Mode.INFER)
        losses.append(float(bce_loss(res.bag_score, bag.bag_label).value))
        wrong += int((res.bag_score >= 0.5) != bool(bag.bag_label))
    return float(np.mean(losses)), wrong / len(bags)


def select_epoch(val_errors: Sequence[float], window: int) -> int:
    """Index of the lowest-error epoch inside the best moving-average window.

    Ties go to the earliest window, then the earliest epoch. A window
    longer than the history shrinks to the history length.
    """
    errors = np.asarray(val_errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no validation history")
    w = min(window, errors.size)
    sums = np.convolve(errors, np.ones(w), mode="valid")
    start = int(np.argmin(sums))
    return start + int(np.argmin(errors[start:start + w]))


def compute_grad(strategy: Strategy, params: ParamSet, bag, config: TrainConfig,
                 rng: np.random.Generator) -> tuple[GradSet, StepReport]:
    if strategy is Strategy.FULL_BAG:
        return full_bag_grad(params.encoder, params.pooler, bag)
    if strategy is Strategy.ACCUMULATE:
        chunk = alpha_to_chunk(len(bag.instances), config.alpha_percent)
        return accum_grad(params.encoder, params.pooler, bag, chunk)
    return sample_train_grad(params.encoder, params.pooler, bag, config.sample_percent, rng)


def apply_step(params: ParamSet, gs: GradSet, config: TrainConfig,
               state: AdamState) -> tuple[ParamSet, AdamState]:
    new, state = adam_step(params.named_tensors(), gs.all(), config, state)
    return ParamSet(params.encoder.replace(new), params.pooler.replace(new)), state


def train(dataset, config: TrainConfig, init: ParamSet | None = None,
          on_step: Callable[[int, int, ParamSet, object], None] | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """One Adam step per bag, seeded shuffle per epoch, window-based selection.

    ``on_step(epoch, position, params, bag)`` is called before each update.
    """
    if not dataset.train or not dataset.val:
        raise ValueError("train and validation splits must be non-empty")
    input_dim = dataset.train[0].instances.shape[1]
    params = init.copy() if init is not None else init_params(
        config.model_config(input_dim), substream(config.seed, "init"))
    shuffle_rng = substream(config.seed, "shuffle")
    sample_rng = substream(config.seed, "sampling")
    state = AdamState()
    history, reports, snapshots = [], [], []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        epoch_reports = []
        for pos, i in enumerate(shuffle_rng.permutation(len(dataset.train))):
            bag = dataset.train[i]
            if on_step is not None:
                on_step(epoch, pos, params, bag)
            gs, rep = compute_grad(config.strategy, params, bag, config, sample_rng)
            rep.attention_weights = None
            params, state = apply_step(params, gs, config, state)
            epoch_reports.append(rep)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        val_loss, val_error = validation_metrics(params, dataset.val)
        record = EpochRecord(
            epoch,
            float(np.mean([r.loss for r in epoch_reports])),
            val_loss,
            val_error,
            wall_ms,
            max(r.forward_count for r in epoch_reports),
            max(r.peak_scalars for r in epoch_reports),
        )
        history.append(record)
        reports.append(epoch_reports)
        snapshots.append(params.copy())
        if log is not None:
            log(f"epoch {epoch}: train_loss={record.train_loss:.5f} "
                f"val_loss={val_loss:.5f} val_error={val_error:.3f}")
    best = select_epoch([h.val_error for h in history], config.selection_window)
    return TrainResult(snapshots[best], best + 1, history, reports, config, snapshots)
