"""Executable property checks: gradient equivalence, memory scaling, AUC oracle.

Each check returns a :class:`Check` with the measured value and the bound it
was held to. Oracles here (finite differences, literal per-instance chain
rule products, pairwise AUC counting) do not reuse the code paths they test.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import graphcore as gc
from .bagdata import BagSpec, make_synthetic_dataset
from .evalbench import roc_auc
from .gradstrat import (
    GradSet,
    Strategy,
    TrainConfig,
    accum_grad,
    alpha_to_chunk,
    full_bag_grad,
    rel_l2,
    train,
)
from .graphcore import LeafKind, Tape
from .model import ModelConfig, Mode, ParamSet, attention_pool, bce_loss, encode, init_params
from .seeding import substream


@dataclass
class Check:
    name: str
    passed: bool
    measured: str
    bound: str
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  [{self.note}]" if self.note else ""
        return f"{status}  {self.name}: measured {self.measured}; required {self.bound}{extra}"


@dataclass
class _Bag:
    instances: np.ndarray
    bag_label: int


SCALES = {
    "smoke": dict(equiv_epochs=2, decomp_pairs=30, auc_cases=200, path_epochs=20, timing_bags=10),
    "full": dict(equiv_epochs=10, decomp_pairs=100, auc_cases=1000, path_epochs=60, timing_bags=20),
}


def random_model_and_bag(rng: np.random.Generator, max_n: int = 16, batch_norm: bool = False):
    input_dim = int(rng.integers(2, 6))
    hidden = (int(rng.integers(2, 7)), int(rng.integers(2, 6)))
    cfg = ModelConfig(input_dim, hidden, int(rng.integers(2, 5)), batch_norm)
    params = init_params(cfg, rng)
    n = int(rng.integers(1, max_n + 1))
    bag = _Bag(rng.normal(size=(n, input_dim)) * 2.0, int(rng.integers(0, 2)))
    return params, bag


# ---------------------------------------------------------------- oracles


def loss_of(params: ParamSet, bag) -> float:
    """Untaped full-bag training-mode loss (no running-stat side effects)."""
    p = params.copy()
    Z = encode(p.encoder, bag.instances, Mode.TRAIN)
    return float(bce_loss(attention_pool(p.pooler, Z), bag.bag_label).value)


def finite_difference_grads(params: ParamSet, bag, eps: float = 1e-6) -> dict[str, np.ndarray]:
    """Central differences for every trainable scalar."""
    base = params.named_tensors()
    out = {}
    for name, t in base.items():
        g = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            vals = []
            for sign in (1.0, -1.0):
                bumped = t.copy()
                bumped[idx] += sign * eps
                probe = ParamSet(params.encoder.replace({name: bumped}),
                                 params.pooler.replace({name: bumped}))
                vals.append(loss_of(probe, bag))
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        out[name] = g
    return out


def instance_terms(params: ParamSet, bag) -> list[dict[str, np.ndarray]]:
    """Per-instance encoder gradient terms as the literal chain-rule product.

    For each instance i: dL/dz_i from a pooler pass over the full feature
    matrix taken as a differentiable input, then the vector-Jacobian product
    (dL/dz_i)^T dz_i/dtheta from a separate single-instance encoder pass.
    """
    enc = params.copy().encoder
    X = np.asarray(bag.instances, dtype=np.float64)
    Z = encode(enc, X, Mode.TRAIN).value
    tape = Tape()
    z_leaf = tape.input(Z)
    loss = bce_loss(attention_pool(params.pooler, z_leaf, tape, LeafKind.CONSTANT), bag.bag_label)
    dZ = gc.backward(tape, loss)[z_leaf]
    terms = []
    for i in range(X.shape[0]):
        t = Tape()
        zi = encode(enc, X[i:i + 1], Mode.TRAIN, t)
        probe = gc.sum(gc.mul(zi, dZ[i:i + 1]))
        grads = gc.backward(t, probe)
        terms.append({k: grads[t.bindings[k]] for k in enc.named_tensors()})
    return terms


def pairwise_auc(scores, labels) -> float:
    scores, labels = np.asarray(scores), np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return wins / (len(pos) * len(neg))


# ---------------------------------------------------------------- checks


def check_finite_differences(seed: int = 0, max_params: int = 100) -> Check:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(3, (4, 3), 3)
    params = init_params(cfg, rng)
    assert params.n_parameters() <= max_params
    bag = _Bag(rng.normal(size=(5, 3)), 1)
    analytic, _ = full_bag_grad(params.copy().encoder, params.pooler, bag)
    fd = finite_difference_grads(params, bag)
    worst_rel, worst_abs, ok = 0.0, 0.0, True
    for name, g in analytic.all().items():
        for a, f in zip(g.ravel(), fd[name].ravel()):
            if abs(f) < 1e-2:
                worst_abs = max(worst_abs, abs(a - f))
                ok &= abs(a - f) < 1e-8
            else:
                worst_rel = max(worst_rel, abs(a - f) / abs(f))
                ok &= abs(a - f) / abs(f) < 1e-6
    return Check(f"finite-difference oracle ({params.n_parameters()} params, eps=1e-6)", ok,
                 f"max rel {worst_rel:.2e}, max abs (|g|<1e-2) {worst_abs:.2e}",
                 "rel < 1e-6, abs < 1e-8")


def check_instance_decomposition(n_pairs: int = 100, seed: int = 1) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        params, bag = random_model_and_bag(rng)
        full, _ = full_bag_grad(params.copy().encoder, params.pooler, bag)
        terms = instance_terms(params, bag)
        total = {k: np.sum([t[k] for t in terms], axis=0) for k in full.theta}
        worst = max(worst, GradSet(total, {}).rel_diff(GradSet(full.theta, {}), "theta"))
    return Check(f"per-instance decomposition sums to full-bag encoder gradient ({n_pairs} pairs)",
                 worst < 1e-10, f"max rel L2 {worst:.2e}", "< 1e-10")


def paired_gradient_trace(dataset, config: TrainConfig, epochs: int) -> tuple[float, float]:
    """Train with the accumulation strategy; at each step compare against full-bag."""
    worst = [0.0, 0.0]
    chunk_of = lambda bag: alpha_to_chunk(len(bag.instances), config.alpha_percent)  # noqa: E731

    def on_step(epoch, pos, params, bag):
        full, _ = full_bag_grad(params.copy().encoder, params.pooler, bag)
        acc, _ = accum_grad(params.copy().encoder, params.pooler, bag, chunk_of(bag))
        worst[0] = max(worst[0], acc.rel_diff(full, "theta"))
        worst[1] = max(worst[1], acc.rel_diff(full, "phi"))

    train(dataset, replace(config, epochs=epochs, strategy=Strategy.ACCUMULATE,
                           selection_window=min(config.selection_window, epochs)), on_step=on_step)
    return worst[0], worst[1]


def check_gradient_equivalence(epochs: int = 10, seed: int = 0) -> Check:
    dataset = make_synthetic_dataset(BagSpec(seed=seed))
    cfg = TrainConfig(seed=seed, alpha_percent=25.0, bn_enabled=False)
    d_theta, d_phi = paired_gradient_trace(dataset, cfg, epochs)
    return Check(f"accumulated (alpha=25%) vs full-bag gradients, BN off, {epochs} epochs",
                 d_theta < 1e-10 and d_phi < 1e-10,
                 f"max rel L2 dtheta {d_theta:.2e}, dphi {d_phi:.2e}", "< 1e-10 per step")


def bn_discrepancy_bag(n: int = 32, input_dim: int = 4, seed: int = 0) -> _Bag:
    """Bag whose contiguous quarters have very different feature statistics."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, input_dim))
    X += np.repeat(np.linspace(-3.0, 3.0, 4), n // 4)[:, None]
    return _Bag(X, 1)


def bn_gradient_gap(batch_norm: bool, seed: int = 0) -> float:
    bag = bn_discrepancy_bag(seed=seed)
    params = init_params(ModelConfig(4, (8, 6), 4, batch_norm), np.random.default_rng(seed))
    full, _ = full_bag_grad(params.copy().encoder, params.pooler, bag)
    acc, _ = accum_grad(params.copy().encoder, params.pooler, bag, len(bag.instances) // 4)
    return acc.rel_diff(full, "theta")


def check_bn_discrepancy(seed: int = 0) -> list[Check]:
    on = bn_gradient_gap(True, seed)
    off = bn_gradient_gap(False, seed)
    return [
        Check("BN on, chunk n/4: accumulated dtheta departs from full-bag", on > 1e-3,
              f"rel L2 {on:.2e}", "> 1e-3",
              "discrepancy confirmed" if on > 1e-3 else "no discrepancy"),
        Check("BN off, same bag: accumulated dtheta equals full-bag", off < 1e-10,
              f"rel L2 {off:.2e}", "< 1e-10"),
    ]


def memory_profile(sizes=(8, 32, 128), chunk: int = 8, input_dim: int = 16, seed: int = 0):
    params = init_params(ModelConfig(input_dim), np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    acc, full = {}, {}
    for n in sizes:
        bag = _Bag(rng.normal(size=(n, input_dim)), 1)
        acc[n] = accum_grad(params.encoder, params.pooler, bag, chunk)[1].encoder_peak_scalars
        full[n] = full_bag_grad(params.encoder, params.pooler, bag)[1].encoder_peak_scalars
    return acc, full


def check_memory_scaling() -> list[Check]:
    sizes = (8, 32, 128)
    acc, full = memory_profile(sizes)
    worst = max(abs((full[n] / full[sizes[0]]) / (n / sizes[0]) - 1.0) for n in sizes)
    monotone = [accum_grad_peak(k) for k in (1, 2, 4, 8, 16)]
    return [
        Check("accumulate k=8: encoder peak retained scalars constant over n in {8,32,128}",
              len(set(acc.values())) == 1, str(acc), "identical"),
        Check("full bag: encoder peak retained scalars proportional to n",
              worst <= 0.05, f"{full}, worst ratio deviation {worst:.3%}", "within 5% of n ratio"),
        Check("accumulate: encoder peak non-decreasing in chunk size",
              all(a <= b for a, b in zip(monotone, monotone[1:])), str(monotone), "monotone"),
    ]


def accum_grad_peak(chunk: int, n: int = 32, input_dim: int = 16, seed: int = 0) -> int:
    params = init_params(ModelConfig(input_dim), np.random.default_rng(seed))
    bag = _Bag(np.random.default_rng(seed + 1).normal(size=(n, input_dim)), 1)
    return accum_grad(params.encoder, params.pooler, bag, chunk)[1].encoder_peak_scalars


def time_strategies(n_bags: int = 20, seed: int = 0, rounds: int = 3) -> tuple[float, float, int, int, int]:
    """Best-of-``rounds`` wall time of full-bag vs alpha=25% over the same bags."""
    dataset = make_synthetic_dataset(BagSpec(seed=seed))
    bags = dataset.train[:n_bags]
    params = init_params(ModelConfig(dataset.input_dim), substream(seed, "init"))
    t_full, t_acc = np.inf, np.inf
    for _ in range(rounds):
        t0 = time.perf_counter()
        fwd_full = [full_bag_grad(params.encoder, params.pooler, b)[1].forward_count for b in bags]
        t_full = min(t_full, time.perf_counter() - t0)
        t0 = time.perf_counter()
        fwd_acc = [accum_grad(params.encoder, params.pooler, b, alpha_to_chunk(len(b), 25))[1].forward_count
                   for b in bags]
        t_acc = min(t_acc, time.perf_counter() - t0)
    n = len(bags[0])
    return t_full, t_acc, n, max(fwd_full), max(fwd_acc)


def check_overhead(n_bags: int = 20) -> list[Check]:
    t_full, t_acc, n, fwd_full, fwd_acc = time_strategies(n_bags)
    return [
        Check("forward counts: accumulate 2n, full bag n", fwd_acc == 2 * n and fwd_full == n,
              f"n={n}: accumulate {fwd_acc}, full {fwd_full}", f"{2 * n} and {n}"),
        Check("wall time: alpha=25% slower than full bag", t_acc > t_full,
              f"{t_acc:.3f}s vs {t_full:.3f}s", "accumulate > full"),
    ]


def alpha100_histories(epochs: int, seed: int = 0):
    dataset = make_synthetic_dataset(BagSpec(seed=seed))
    base = TrainConfig(seed=seed, epochs=epochs, selection_window=min(15, epochs))
    full = train(dataset, replace(base, strategy=Strategy.FULL_BAG))
    acc = train(dataset, replace(base, strategy=Strategy.ACCUMULATE, alpha_percent=100.0))
    return full, acc


def check_alpha100_path(epochs: int = 60, seed: int = 0) -> Check:
    full, acc = alpha100_histories(epochs, seed)
    worst = max(max(abs(a.train_loss - f.train_loss) / abs(f.train_loss),
                    abs(a.val_loss - f.val_loss) / abs(f.val_loss))
                for a, f in zip(acc.history, full.history))
    same = acc.best_epoch == full.best_epoch
    return Check(f"alpha=100 accumulate vs full bag, {epochs} epochs", worst < 1e-9 and same,
                 f"max rel loss diff {worst:.2e}; best epoch {acc.best_epoch} vs {full.best_epoch}",
                 "< 1e-9 and same best epoch")


def check_auc_oracle(n_cases: int = 1000, seed: int = 2) -> Check:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n_cases):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        # Coarse grid forces ties.
        scores = rng.integers(0, max(2, n // 4), size=n) / 7.0
        mismatches += roc_auc(scores, labels) != pairwise_auc(scores, labels)
    return Check(f"midrank AUC equals pairwise oracle ({n_cases} cases, n <= 200)", mismatches == 0,
                 f"{mismatches} mismatches", "exact equality")


def run_suite(scale: str = "smoke", emit: Callable[[str], None] = print) -> list[Check]:
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {sorted(SCALES)}, got {scale!r}")
    s = SCALES[scale]
    suite = [
        lambda: [check_finite_differences()],
        lambda: [check_instance_decomposition(s["decomp_pairs"])],
        lambda: [check_gradient_equivalence(s["equiv_epochs"])],
        check_bn_discrepancy,
        check_memory_scaling,
        lambda: check_overhead(s["timing_bags"]),
        lambda: [check_alpha100_path(s["path_epochs"])],
        lambda: [check_auc_oracle(s["auc_cases"])],
    ]
    results = []
    for fn in suite:
        for check in fn():
            emit(check.line())
            results.append(check)
    return results
