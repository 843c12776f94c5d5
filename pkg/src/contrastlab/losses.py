"""Contrastive losses: four single-head baselines and their multi-head
variants with pair-adaptive temperatures.

Each multi-head loss is a sum of per-head terms. A head's term couples a
temperature-weighted positive similarity, an aggregate over the hardest
(top-k) or all (softmax) negative similarities, and a temperature penalty
that keeps the learned variances away from degenerate values.

Similarity/temperature inputs are shape-polymorphic: per-anchor scalars
or leading-batch vectors flow through the same expressions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation, DomainError
from .nets import Mlp, TempBounds, adaptive_temperature, bounded_sigmoid
from .tensor import Tensor

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class LossConfig:
    """Knobs shared by every loss variant.

    ``family`` picks the plain single-head implementation or the
    multi-head adaptive one; the two coincide in gradient (not value) for
    heads=1, constant temperature, softmax aggregation.
    """

    variant: str = "ntxent"          # ntxent | simsiam | barlow | infonce
    family: str = "multihead"        # baseline | multihead
    heads: int = 3
    beta: float = 1.0
    kappa: int = 16
    lambd: float = 5e-3
    temp_mode: str = "adaptive"      # constant | cosine | adaptive
    tau0: float = 0.2
    tau_min: float = 0.05
    tau_max: float = 1.0
    tau_period: float = 60.0
    bounds: TempBounds = TempBounds()
    neg_agg: str = "softmax"         # topk | softmax
    dim_factor_in_set_penalty: bool = True

    def __post_init__(self):
        if self.variant not in ("ntxent", "simsiam", "barlow", "infonce"):
            raise ContractViolation(f"unknown loss variant {self.variant!r}")
        if self.family not in ("baseline", "multihead"):
            raise ContractViolation(f"unknown loss family {self.family!r}")
        if self.heads < 1:
            raise ContractViolation("heads must be >= 1")
        if self.beta < 0:
            raise ContractViolation("beta must be >= 0")
        if self.kappa < 1:
            raise ContractViolation("kappa must be >= 1")
        if self.lambd < 0:
            raise ContractViolation("lambda must be >= 0")
        if self.temp_mode not in ("constant", "cosine", "adaptive"):
            raise ContractViolation(f"unknown temp_mode {self.temp_mode!r}")
        if self.neg_agg not in ("topk", "softmax"):
            raise ContractViolation(f"unknown neg_agg {self.neg_agg!r}")
        if self.family == "baseline" and self.heads != 1:
            raise ContractViolation("baseline family is single-head")
        if self.family == "baseline" and self.temp_mode == "adaptive":
            raise ContractViolation("baseline family uses a constant temperature")


@dataclass(frozen=True)
class LossTerms:
    """Per-anchor decomposition: positive-pair, negative-pair, penalty."""

    pos: Tensor
    neg: Tensor
    omega: Tensor

    def total(self) -> Tensor:
        return self.pos + self.neg + self.omega

    def __add__(self, other: "LossTerms") -> "LossTerms":
        return LossTerms(self.pos + other.pos, self.neg + other.neg,
                         self.omega + other.omega)


def _zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape))


# -- similarity ------------------------------------------------------------

def cosine_sim(u, v) -> Tensor:
    """<u, v> / (|u| |v|) along the last axis; for unit vectors this obeys
    |u - v|^2 = 2 - 2 sim(u, v)."""
    return T.sum_(T.mul(T.l2_normalize(u), T.l2_normalize(v)), axis=-1)


def cosine_matrix(u_rows, v_rows) -> Tensor:
    """All-pairs cosine similarities between two row stacks."""
    return T.matmul(T.l2_normalize(u_rows), T.transpose(T.l2_normalize(v_rows)))


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis, ties broken
    by lowest index (stable sort keeps the original order of equals)."""
    if k < 1 or k > values.shape[-1]:
        raise ContractViolation(f"kappa={k} outside 1..{values.shape[-1]}")
    return np.argsort(-values, axis=-1, kind="stable")[..., :k]


# -- temperature penalty ----------------------------------------------------

def temp_penalty(tau, d_prime: int) -> Tensor:
    """(d'/2) log(tau) + 1/tau, elementwise; unique minimum at tau = 2/d'."""
    tau = T.as_tensor(tau)
    if np.any(tau.data <= 0.0):
        raise DomainError("temperature penalty needs tau > 0")
    return (d_prime / 2.0) * T.log(tau) + 1.0 / tau


# -- baseline losses (single head, constant temperature) -------------------

def ntxent_terms(s_pos: Tensor, s_neg: Tensor, tau: float) -> LossTerms:
    """-log[ exp(s+/tau) / sum_n exp(s-_n/tau) ]; denominator holds the
    negatives only."""
    pos = -(s_pos / tau)
    neg = T.log(T.sum_(T.exp(s_neg / tau), axis=-1))
    return LossTerms(pos, neg, _zeros_like(pos))


def infonce_terms(s_pos: Tensor, s_neg: Tensor, tau: float) -> LossTerms:
    """Like ntxent but the denominator also includes the positive term."""
    pos = -(s_pos / tau)
    neg = T.log(T.exp(s_pos / tau) + T.sum_(T.exp(s_neg / tau), axis=-1))
    return LossTerms(pos, neg, _zeros_like(pos))


def _check_negatives(negatives: Tensor) -> None:
    if negatives.data.ndim < 1 or negatives.shape[0] < 1:
        raise ContractViolation("need at least one negative sample")


def ntxent_loss(anchor: Tensor, positive: Tensor, negatives: Tensor, tau: float) -> Tensor:
    """Single-anchor form: anchor and positive are (d,) vectors,
    negatives is an (N, d) stack."""
    _check_negatives(negatives)
    s_pos = cosine_sim(anchor, positive)
    s_neg = T.matmul(T.l2_normalize(negatives), T.l2_normalize(anchor))
    return ntxent_terms(s_pos, s_neg, tau).total()


def infonce_loss(anchor: Tensor, positive: Tensor, negatives: Tensor, tau: float) -> Tensor:
    _check_negatives(negatives)
    s_pos = cosine_sim(anchor, positive)
    s_neg = T.matmul(T.l2_normalize(negatives), T.l2_normalize(anchor))
    return infonce_terms(s_pos, s_neg, tau).total()


def negcos_loss(z_a: Tensor, z_b: Tensor, target_a: Tensor, target_b: Tensor) -> Tensor:
    """Symmetric negative cosine with stop-gradient on the targets."""
    sg_a = T.stop_gradient(target_a)
    sg_b = T.stop_gradient(target_b)
    return -0.5 * cosine_sim(z_a, sg_b) - 0.5 * cosine_sim(z_b, sg_a)


def batch_standardize(z: Tensor) -> Tensor:
    """Per-channel zero mean and unit population std over the batch axis."""
    centered = z - T.mean(z, axis=0)
    var = T.mean(T.mul(centered, centered), axis=0)
    return centered / T.sqrt(var)


def check_standardized(data: np.ndarray, tol: float = 1e-6) -> None:
    mu = data.mean(axis=0)
    std = data.std(axis=0)
    if np.any(np.abs(mu) > tol) or np.any(np.abs(std - 1.0) > tol):
        raise ContractViolation(
            "projections are not batch-standardized "
            f"(max |mean|={np.abs(mu).max():.3g}, max |std-1|={np.abs(std - 1).max():.3g})"
        )


def cross_correlation(z_a: Tensor, z_b: Tensor) -> Tensor:
    """Channel cross-correlation of two standardized (N, d') view
    projections: C = z_a^T z_b / N, so C_ll = 1 when z_a = z_b."""
    n = z_a.shape[0]
    return T.matmul(T.transpose(z_a), z_b) / float(n)


def cross_corr_loss(z_a: Tensor, z_b: Tensor, lambd: float) -> Tensor:
    """Drive the cross-correlation toward identity: squared deviation of
    the diagonal from one plus lambda-weighted squared off-diagonals."""
    if z_a.shape != z_b.shape or z_a.data.ndim != 2:
        raise ContractViolation(f"expected matching (N, d') matrices, got {z_a.shape}, {z_b.shape}")
    if z_a.shape[0] < 2:
        raise ContractViolation("batch size must be >= 2")
    check_standardized(z_a.data)
    check_standardized(z_b.data)
    c = cross_correlation(z_a, z_b)
    d_prime = z_a.shape[1]
    eye = Tensor(np.eye(d_prime))
    off = Tensor(1.0 - np.eye(d_prime))
    diag = T.sum_(T.mul(c, eye), axis=-1)
    on_term = T.sum_(T.pow_const(1.0 - diag, 2.0))
    off_term = lambd * T.sum_(T.mul(T.mul(c, c), off))
    return on_term + off_term


def baseline_loss(cfg: LossConfig, *args, tau: float | None = None) -> Tensor:
    """Dispatch on ``cfg.variant``; see the per-variant functions for the
    expected positional inputs."""
    tau = cfg.tau0 if tau is None else tau
    if cfg.variant == "ntxent":
        return ntxent_loss(*args, tau=tau)
    if cfg.variant == "infonce":
        return infonce_loss(*args, tau=tau)
    if cfg.variant == "simsiam":
        return negcos_loss(*args)
    return cross_corr_loss(*args, lambd=cfg.lambd)


# -- negative aggregation and the multi-head losses -------------------------

def softmax_negatives(s: Tensor, tau: Tensor, d_prime: int) -> Tensor:
    """log sum_n (2 pi tau_n)^(-d'/2) exp((s_n - 1)/tau_n) over the last
    axis: the exact log-sum whose top-1 approximation is the hardest-
    negative term, with the temperature penalty absorbed into the sum."""
    tau = T.as_tensor(tau)
    if np.any(tau.data <= 0.0):
        raise DomainError("softmax aggregation needs tau > 0")
    dens = T.mul(T.pow_const(TWO_PI * tau, -d_prime / 2.0), T.exp((s - 1.0) / tau))
    return T.log(T.sum_(dens, axis=-1))


def nce_head_terms(s_pos: Tensor, tau_pos: Tensor, s_cand: Tensor, tau_cand: Tensor,
                   *, d_prime: int, beta: float, neg_agg: str, kappa: int,
                   dim_factor_in_set_penalty: bool = True) -> LossTerms:
    """One head's ntxent/infonce-style terms from precomputed similarities
    and temperatures. ``s_cand`` holds the negative candidates (plus the
    positive as the last entry for the infonce variant)."""
    pos = -(s_pos / tau_pos)
    if neg_agg == "topk":
        idx = topk_indices(s_cand.data, kappa)
        s_sel = T.gather(s_cand, idx)
        t_sel = T.gather(tau_cand, idx)
        neg = T.sum_(s_sel / t_sel, axis=-1) / float(kappa)
        if dim_factor_in_set_penalty:
            set_pen = T.sum_(temp_penalty(t_sel, d_prime), axis=-1)
        else:
            set_pen = T.sum_(T.log(t_sel) + 1.0 / t_sel, axis=-1)
        omega = beta * (temp_penalty(tau_pos, d_prime) - set_pen)
    elif neg_agg == "softmax":
        neg = softmax_negatives(s_cand, tau_cand, d_prime)
        omega = beta * temp_penalty(tau_pos, d_prime)
    else:
        raise ContractViolation(f"unknown neg_agg {neg_agg!r}")
    return LossTerms(pos, neg, omega)


def pair_temperatures(anchor: Tensor, positive: Tensor, negatives: Tensor,
                      temp_net: Mlp, bounds: TempBounds) -> tuple[Tensor, Tensor]:
    """Adaptive positive/negative temperatures for one anchor; inputs are
    l2-normalized before entering the temperature net."""
    an = T.l2_normalize(anchor)
    tau_pos = adaptive_temperature(an, T.l2_normalize(positive), temp_net, bounds)
    tau_neg = adaptive_temperature(T.l2_normalize(negatives), an, temp_net, bounds)
    return tau_pos, tau_neg


def _constant_temps(tau: float, n_cand: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.float64(tau)), Tensor(np.full(n_cand, tau))


def _resolve_tau(cfg: LossConfig, tau: float | None) -> float:
    if tau is not None:
        return tau
    if cfg.temp_mode == "constant":
        return cfg.tau0
    raise ContractViolation("non-constant temp_mode needs an explicit tau or a temperature net")


def _nce_multihead(cfg: LossConfig, pairs, negatives, temp_net, tau,
                   include_positive_candidate: bool) -> LossTerms:
    if len(pairs) != cfg.heads or len(negatives) != cfg.heads:
        raise ContractViolation(f"expected {cfg.heads} per-head inputs")
    total: LossTerms | None = None
    for (anchor, positive), negs in zip(pairs, negatives):
        _check_negatives(negs)
        d_prime = anchor.shape[-1]
        an = T.l2_normalize(anchor)
        s_pos = T.sum_(T.mul(an, T.l2_normalize(positive)), axis=-1)
        s_neg = T.matmul(T.l2_normalize(negs), an)
        if cfg.temp_mode == "adaptive":
            if temp_net is None:
                raise ContractViolation("adaptive temp_mode needs a temperature net")
            tau_pos, tau_neg = pair_temperatures(anchor, positive, negs, temp_net, cfg.bounds)
        else:
            tau_pos, tau_neg = _constant_temps(_resolve_tau(cfg, tau), negs.shape[0])
        if include_positive_candidate:
            s_cand = T.concat([s_neg, T.reshape(s_pos, (1,))], axis=0)
            tau_cand = T.concat([tau_neg, T.reshape(tau_pos, (1,))], axis=0)
        else:
            s_cand, tau_cand = s_neg, tau_neg
        terms = nce_head_terms(
            s_pos, tau_pos, s_cand, tau_cand,
            d_prime=d_prime, beta=cfg.beta, neg_agg=cfg.neg_agg, kappa=cfg.kappa,
            dim_factor_in_set_penalty=cfg.dim_factor_in_set_penalty,
        )
        total = terms if total is None else total + terms
    return total


def multihead_ntxent(cfg: LossConfig, pairs, negatives, temp_net: Mlp | None = None,
                     tau: float | None = None) -> LossTerms:
    """Multi-head ntxent: per head, a temperature-weighted positive term,
    the top-k (or softmax) aggregate over negatives, and the penalty
    +beta*Omega(tau+) - beta*Omega({selected tau-}).

    ``pairs`` is a per-head list of (anchor, positive) (d,) vectors and
    ``negatives`` a per-head list of (N, d) stacks.
    """
    return _nce_multihead(cfg, pairs, negatives, temp_net, tau,
                          include_positive_candidate=False)


def multihead_infonce(cfg: LossConfig, pairs, negatives, temp_net: Mlp | None = None,
                      tau: float | None = None) -> LossTerms:
    """Same structure as multihead_ntxent, but the candidate set for the
    aggregation is the N negatives plus the positive itself (index N+1)."""
    return _nce_multihead(cfg, pairs, negatives, temp_net, tau,
                          include_positive_candidate=True)


def multihead_negcos(cfg: LossConfig, branches, temp_net: Mlp | None = None,
                     tau: float | None = None) -> LossTerms:
    """Multi-head symmetric negative cosine with stop-gradient targets.

    ``branches`` is a per-head list of (live_a, live_b, target_a, target_b):
    live vectors are predictor outputs, targets are the opposite branch's
    projector outputs (stop-gradient is applied here). Both temperature
    penalties enter with positive sign since both pairs are positive pairs.
    Accepts single (d,) vectors or (B, d) row stacks.
    """
    if len(branches) != cfg.heads:
        raise ContractViolation(f"expected {cfg.heads} per-head inputs")
    total: LossTerms | None = None
    for live_a, live_b, target_a, target_b in branches:
        d_prime = live_a.shape[-1]
        sg_a = T.stop_gradient(target_a)
        sg_b = T.stop_gradient(target_b)
        s_a = cosine_sim(live_a, sg_b)
        s_b = cosine_sim(live_b, sg_a)
        if cfg.temp_mode == "adaptive":
            if temp_net is None:
                raise ContractViolation("adaptive temp_mode needs a temperature net")
            tau_a = adaptive_temperature(T.l2_normalize(live_a), T.l2_normalize(sg_b),
                                         temp_net, cfg.bounds)
            tau_b = adaptive_temperature(T.l2_normalize(live_b), T.l2_normalize(sg_a),
                                         temp_net, cfg.bounds)
        else:
            t = _resolve_tau(cfg, tau)
            tau_a = Tensor(np.float64(t))
            tau_b = Tensor(np.float64(t))
        pos = -0.5 * (s_a / tau_a) - 0.5 * (s_b / tau_b)
        omega = cfg.beta * (temp_penalty(tau_a, d_prime) + temp_penalty(tau_b, d_prime))
        terms = LossTerms(pos, _zeros_like(pos), omega + _zeros_like(pos))
        total = terms if total is None else total + terms
    return total


def multihead_cross_corr(cfg: LossConfig, pairs, temp_net_bt: Mlp | None = None,
                         tau: float | None = None) -> LossTerms:
    """Multi-head cross-correlation loss with per-channel temperatures.

    ``pairs`` is a per-head list of batch-standardized (N, d') projection
    matrices. Temperatures come from batch-dimension channel vectors
    pushed through the batch-width temperature net.
    """
    if len(pairs) != cfg.heads:
        raise ContractViolation(f"expected {cfg.heads} per-head inputs")
    total: LossTerms | None = None
    for z_a, z_b in pairs:
        if z_a.shape != z_b.shape or z_a.data.ndim != 2:
            raise ContractViolation(f"expected matching (N, d') matrices, got {z_a.shape}, {z_b.shape}")
        if z_a.shape[0] < 2:
            raise ContractViolation("batch size must be >= 2")
        check_standardized(z_a.data)
        check_standardized(z_b.data)
        n, d_prime = z_a.shape
        c = cross_correlation(z_a, z_b)
        eye = Tensor(np.eye(d_prime))
        off = Tensor(1.0 - np.eye(d_prime))
        if cfg.temp_mode == "adaptive":
            if temp_net_bt is None:
                raise ContractViolation("adaptive temp_mode needs the batch-width temperature net")
            if temp_net_bt.spec.widths[0] != n:
                raise ContractViolation(
                    f"batch-width temperature net expects batches of {temp_net_bt.spec.widths[0]}, got {n}"
                )
            phi_a = temp_net_bt(T.l2_normalize(T.transpose(z_a)))
            phi_b = temp_net_bt(T.l2_normalize(T.transpose(z_b)))
            t_mat = bounded_sigmoid(T.matmul(phi_a, T.transpose(phi_b)), cfg.bounds)
        else:
            t_mat = Tensor(np.full((d_prime, d_prime), _resolve_tau(cfg, tau)))
        diag_c = T.sum_(T.mul(c, eye), axis=-1)
        diag_t = T.sum_(T.mul(t_mat, eye), axis=-1)
        pos = T.sum_(T.pow_const(1.0 - diag_c / diag_t, 2.0))
        neg = cfg.lambd * T.sum_(T.mul(T.mul(T.mul(c, c), off), 1.0 / t_mat))
        omega = cfg.beta * (T.sum_(temp_penalty(diag_t, d_prime))
                            - T.sum_(T.mul(temp_penalty(t_mat, d_prime), off)))
        terms = LossTerms(pos, neg, omega)
        total = terms if total is None else total + terms
    return total


# -- maximum-likelihood oracle ----------------------------------------------

def gaussian_density(s: Tensor, tau: Tensor, d_prime: int) -> Tensor:
    """Isotropic Gaussian density at squared distance 2 - 2s (unit
    vectors): (2 pi tau)^(-d'/2) exp(-(2 - 2s) / (2 tau))."""
    tau = T.as_tensor(tau)
    if np.any(tau.data <= 0.0):
        raise DomainError("gaussian density needs tau > 0")
    return T.mul(T.pow_const(TWO_PI * tau, -d_prime / 2.0),
                 T.exp(-((2.0 - 2.0 * s) / (2.0 * tau))))


def gaussian_ratio_loss(variant: str, pairs, negatives, temps, d_prime: int) -> Tensor:
    """Independent ground truth for the softmax-aggregated losses: the
    negative log of the Gaussian ratio, summed over heads.

    ``temps`` is a per-head list of (tau_pos, tau_neg) tensors. For the
    ntxent variant the denominator holds the negatives' densities; for
    infonce it additionally holds the positive's density.
    """
    if variant not in ("ntxent", "infonce"):
        raise ContractViolation(f"oracle covers ntxent/infonce, got {variant!r}")
    total: Tensor | None = None
    for (anchor, positive), negs, (tau_pos, tau_neg) in zip(pairs, negatives, temps):
        an = T.l2_normalize(anchor)
        s_pos = T.sum_(T.mul(an, T.l2_normalize(positive)), axis=-1)
        s_neg = T.matmul(T.l2_normalize(negs), an)
        numerator = gaussian_density(s_pos, tau_pos, d_prime)
        denominator = T.sum_(gaussian_density(s_neg, tau_neg, d_prime), axis=-1)
        if variant == "infonce":
            denominator = denominator + numerator
        head_loss = T.log(denominator) - T.log(numerator)
        total = head_loss if total is None else total + head_loss
    return total
