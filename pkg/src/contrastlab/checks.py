"""Verification suites: finite-difference gradient checks over every loss
variant, the maximum-likelihood equivalence of the softmax-aggregated
losses, and the reduction of the single-head constant-temperature case to
the plain ntxent baseline.

Losses containing stop-gradient are checked against frozen target copies:
the numeric probe must hold the stop-gradient branch fixed, because that
is exactly the function whose gradient the backward pass computes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import losses as L
from .augment import AugPipeline, SyntheticSpec, generate_dataset
from .losses import LossConfig
from .nets import Mlp, MlpSpec, TempBounds
from .rng import SplitMix64, derive
from .tensor import Tensor, backward, finite_diff_check, grad_of, zero_grads
from .train import ModelConfig, TrainConfig, reduction_check

GRADCHECK_TOL = 1e-4
EQUIV_TOL = 1e-8


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _rand(stream: SplitMix64, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return ((2.0 * stream.floats(n) - 1.0) * 2.0).reshape(shape)


def _instance(seed: int, heads: int, d_prime: int = 8, n_neg: int = 6):
    """Random per-head anchor/positive/negative leaves plus a temperature
    net, all as probe-able parameters."""
    stream = SplitMix64(seed)
    pairs, negatives = [], []
    for _ in range(heads):
        pairs.append((Tensor(_rand(stream, (d_prime,))), Tensor(_rand(stream, (d_prime,)))))
        negatives.append(Tensor(_rand(stream, (n_neg, d_prime))))
    temp_net = Mlp.init(MlpSpec((d_prime, d_prime)), derive(seed, "phi"))
    return pairs, negatives, temp_net


def gradcheck_suite(seed: int = 2024, d_prime: int = 8, n_neg: int = 6) -> list[CheckResult]:
    """Finite-difference check of every loss variant at the configured
    grid: both aggregation modes, adaptive and constant temperatures,
    heads in {1, 3}, kappa in {1, 3}."""
    bounds = TempBounds(1e-5, 2.0)
    results: list[CheckResult] = []

    def run(name, loss_fn, params):
        results.append(CheckResult(name, finite_diff_check(loss_fn, params), GRADCHECK_TOL))

    # Table of single-head baselines at a constant temperature.
    pairs, negatives, _ = _instance(derive(seed, "base"), 1)
    (anchor, positive), negs = pairs[0], negatives[0]
    run("baseline/ntxent", lambda: L.ntxent_loss(anchor, positive, negs, 0.5),
        [anchor, positive, negs])
    run("baseline/infonce", lambda: L.infonce_loss(anchor, positive, negs, 0.5),
        [anchor, positive, negs])

    stream = SplitMix64(derive(seed, "simsiam-base"))
    live_a, live_b = Tensor(_rand(stream, (d_prime,))), Tensor(_rand(stream, (d_prime,)))
    tgt_a, tgt_b = Tensor(_rand(stream, (d_prime,))), Tensor(_rand(stream, (d_prime,)))
    run("baseline/simsiam", lambda: L.negcos_loss(live_a, live_b, tgt_a, tgt_b),
        [live_a, live_b])

    stream = SplitMix64(derive(seed, "barlow-base"))
    raw_a, raw_b = Tensor(_rand(stream, (n_neg, d_prime))), Tensor(_rand(stream, (n_neg, d_prime)))
    run("baseline/barlow",
        lambda: L.cross_corr_loss(L.batch_standardize(raw_a), L.batch_standardize(raw_b), 0.5),
        [raw_a, raw_b])

    # Multi-head ntxent / infonce over the full grid.
    for variant in ("ntxent", "infonce"):
        loss_op = L.multihead_ntxent if variant == "ntxent" else L.multihead_infonce
        for heads in (1, 3):
            pairs, negatives, temp_net = _instance(derive(seed, variant, heads), heads,
                                                   d_prime, n_neg)
            flat = [t for pair in pairs for t in pair] + negatives
            for temp_mode in ("constant", "adaptive"):
                for agg, kappa in (("topk", 1), ("topk", 3), ("softmax", 1)):
                    cfg = LossConfig(variant=variant, heads=heads, beta=0.7,
                                     temp_mode=temp_mode, tau0=0.5, neg_agg=agg,
                                     kappa=kappa, bounds=bounds)
                    params = flat + (temp_net.params if temp_mode == "adaptive" else [])

                    def loss_fn(cfg=cfg, pairs=pairs, negatives=negatives, temp_net=temp_net):
                        net = temp_net if cfg.temp_mode == "adaptive" else None
                        return loss_op(cfg, pairs, negatives, temp_net=net).total()

                    label = f"multihead/{variant}/C{heads}/{temp_mode}/{agg}{kappa if agg == 'topk' else ''}"
                    run(label, loss_fn, params)

    # Multi-head negative cosine: probe the live branches, the predictor,
    # and the temperature net against frozen stop-gradient targets.
    for heads in (1, 3):
        stream = SplitMix64(derive(seed, "simsiam", heads))
        predictor = Mlp.init(MlpSpec((d_prime, d_prime, d_prime)), derive(seed, "pred", heads))
        temp_net = Mlp.init(MlpSpec((d_prime, d_prime)), derive(seed, "phi", heads))
        raws = [(Tensor(_rand(stream, (d_prime,))), Tensor(_rand(stream, (d_prime,))))
                for _ in range(heads)]
        frozen = [(Tensor(b.data.copy()), Tensor(a.data.copy())) for a, b in raws]
        flat = [t for pair in raws for t in pair]
        for temp_mode in ("constant", "adaptive"):
            cfg = LossConfig(variant="simsiam", heads=heads, beta=0.7,
                             temp_mode=temp_mode, tau0=0.5, bounds=bounds)
            params = flat + predictor.params + (temp_net.params if temp_mode == "adaptive" else [])

            def loss_fn(cfg=cfg, raws=raws, frozen=frozen, predictor=predictor, temp_net=temp_net):
                branches = [(predictor(a), predictor(b), tgt_a, tgt_b)
                            for (a, b), (tgt_b, tgt_a) in zip(raws, frozen)]
                net = temp_net if cfg.temp_mode == "adaptive" else None
                return L.multihead_negcos(cfg, branches, temp_net=net, tau=0.5).total()

            run(f"multihead/simsiam/C{heads}/{temp_mode}", loss_fn, params)

    # Multi-head cross-correlation, standardization included in the chain.
    for heads in (1, 3):
        stream = SplitMix64(derive(seed, "barlow", heads))
        temp_bt = Mlp.init(MlpSpec((n_neg, n_neg)), derive(seed, "phi-bt", heads))
        raws = [(Tensor(_rand(stream, (n_neg, d_prime))), Tensor(_rand(stream, (n_neg, d_prime))))
                for _ in range(heads)]
        flat = [t for pair in raws for t in pair]
        for temp_mode in ("constant", "adaptive"):
            cfg = LossConfig(variant="barlow", heads=heads, beta=0.7, lambd=0.5,
                             temp_mode=temp_mode, tau0=0.5, bounds=bounds)
            params = flat + (temp_bt.params if temp_mode == "adaptive" else [])

            def loss_fn(cfg=cfg, raws=raws, temp_bt=temp_bt):
                pairs = [(L.batch_standardize(a), L.batch_standardize(b)) for a, b in raws]
                net = temp_bt if cfg.temp_mode == "adaptive" else None
                return L.multihead_cross_corr(cfg, pairs, temp_net_bt=net).total()

            run(f"multihead/barlow/C{heads}/{temp_mode}", loss_fn, params)

    return results


def mle_equivalence_suite(n_instances: int = 100, seed: int = 515,
                          d_prime: int = 8, n_neg: int = 6) -> list[CheckResult]:
    """Value and gradient agreement between the softmax-aggregated losses
    (beta = 1) and the direct Gaussian-ratio computation, up to the
    derived (d'/2) log(2 pi) constant per head."""
    bounds = TempBounds(1e-5, 2.0)
    results: list[CheckResult] = []
    for variant in ("ntxent", "infonce"):
        max_val = 0.0
        max_grad = 0.0
        for i in range(n_instances):
            heads = 1 + (i % 2) * 2
            pairs, negatives, temp_net = _instance(derive(seed, variant, i), heads,
                                                   d_prime, n_neg)
            cfg = LossConfig(variant=variant, heads=heads, beta=1.0,
                             temp_mode="adaptive", neg_agg="softmax", bounds=bounds)
            loss_op = L.multihead_ntxent if variant == "ntxent" else L.multihead_infonce
            leaves = [t for pair in pairs for t in pair] + negatives + temp_net.params

            loss = loss_op(cfg, pairs, negatives, temp_net=temp_net).total()
            zero_grads(leaves)
            backward(loss)
            grads_loss = [grad_of(p).copy() for p in leaves]

            temps = [L.pair_temperatures(a, p, n, temp_net, bounds)
                     for (a, p), n in zip(pairs, negatives)]
            oracle = L.gaussian_ratio_loss(variant, pairs, negatives, temps, d_prime)
            zero_grads(leaves)
            backward(oracle)
            grads_oracle = [grad_of(p).copy() for p in leaves]

            expected = loss.item() + heads * (d_prime / 2.0) * math.log(2.0 * math.pi)
            max_val = max(max_val, abs(oracle.item() - expected) / max(1.0, abs(oracle.item())))
            for gl, go in zip(grads_loss, grads_oracle):
                rel = np.max(np.abs(gl - go) / np.maximum(1.0, np.abs(gl)))
                max_grad = max(max_grad, float(rel))
        results.append(CheckResult(f"mle/{variant}/value", max_val, EQUIV_TOL))
        results.append(CheckResult(f"mle/{variant}/grad", max_grad, EQUIV_TOL))
    return results


def reduction_suite(steps: int = 50, seed: int = 11) -> list[CheckResult]:
    """Single-head constant-temperature softmax run against the baseline
    implementation, comparing per-step gradients and constant-corrected
    loss values."""
    dataset = generate_dataset(SyntheticSpec(classes=4, per_class=40, size=8,
                                             channels=1, seed=derive(seed, "data")))
    report = reduction_check(
        dataset,
        ModelConfig(d=16, d_prime=8),
        TrainConfig(epochs=1, batch_size=16, lr=0.05, run_seed=seed),
        AugPipeline.prefix(2),
        steps=steps,
    )
    return [
        CheckResult("reduce/grad", report["max_grad_rel"], EQUIV_TOL),
        CheckResult("reduce/value", report["max_value_err"], EQUIV_TOL),
    ]
