"""Pretraining loop, optimizer, temperature schedule, and the two
frozen-feature evaluation protocols (nearest-neighbor and linear probe).

Each step builds a two-view batch, pushes both views through the encoder
and every projection head, evaluates the configured loss over in-batch
negatives (all views of the other images, N = 2(B-1)), and applies one
SGD-with-momentum update. Both symmetric anchor/positive directions are
averaged for the ntxent/infonce variants. Identical config and seed give
byte-identical logs.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .augment import AugPipeline, Dataset, Image, augment_view, make_two_views, stratified_split
from .errors import ContractViolation, EvaluationError
from .losses import LossConfig, LossTerms
from .metrics import separability_report, temperature_stats
from .nets import ModelBundle, adaptive_temperature, bounded_sigmoid, save_bundle
from .rng import SplitMix64, derive
from .tensor import Tensor, backward, grad_of, zero_grads

TRAIN_LOG_HEADER = "epoch,step,loss,pos_term,neg_term,omega_term,tau_min,tau_mean,tau_max,tau_var_heads"
EVAL_LOG_HEADER = "epoch,knn_acc,probe_acc,overlap"


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    d_prime: int = 16

    def __post_init__(self):
        if self.d < 1 or self.d_prime < 1:
            raise ContractViolation("model widths must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    temp_lr_scale: float = 0.01
    run_seed: int = 1
    eval_every: int = 0          # 0: evaluate after the final epoch only
    test_fraction: float = 0.2
    probe_per_class: int = 50

    def __post_init__(self):
        if self.batch_size < 4:
            raise ContractViolation("batch_size must be >= 4 (in-batch negatives)")
        if self.epochs < 1:
            raise ContractViolation("epochs must be >= 1")
        if self.temp_lr_scale <= 0:
            raise ContractViolation("temp_lr_scale must be > 0")


@dataclass(frozen=True)
class EvalConfig:
    knn_k: int = 20
    probe_sizes: tuple[int, ...] = (10, 20, 50)
    pair_count: int = 500
    pair_seed: int = 99


def temperature_for_step(cfg: LossConfig, epoch: int, total_epochs: int):
    """Scheduled temperature for this epoch, or the marker "adaptive"."""
    if cfg.temp_mode == "constant":
        return cfg.tau0
    if cfg.temp_mode == "cosine":
        return cfg.tau_min + 0.5 * (cfg.tau_max - cfg.tau_min) * (
            1.0 + math.cos(2.0 * math.pi * epoch / cfg.tau_period))
    return "adaptive"


class SgdMomentum:
    """Classic SGD with momentum and L2 weight decay folded into the
    gradient; parameters are leaves mutated in place between graphs.

    ``lr_scales`` applies a per-parameter learning-rate multiplier; the
    temperature net runs at a fraction of the base rate because its
    objective is much stiffer (curvature ~ 1/tau^3) than the encoder's.
    """

    def __init__(self, params: list[Tensor], momentum: float, weight_decay: float,
                 lr_scales: list[float] | None = None):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_scales = lr_scales if lr_scales is not None else [1.0] * len(params)
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        for p, v, scale in zip(self.params, self.velocity, self.lr_scales):
            g = grad_of(p) + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * scale * v


def _drop_diag_indices(batch: int) -> np.ndarray:
    """Per row i, the column indices 0..batch-1 with i removed. Row i of a
    same-branch similarity matrix gathered this way excludes the anchor
    itself; of a cross-branch matrix, it excludes the positive partner."""
    cols = np.tile(np.arange(batch), (batch, 1))
    keep = ~np.eye(batch, dtype=bool)
    return cols[keep].reshape(batch, batch - 1)


@dataclass
class StepTemps:
    """Temperatures observed in one step: every emitted value, plus the
    positive-pair temperatures arranged (samples, heads)."""

    all_values: np.ndarray
    positive: np.ndarray


def _batch_loss(bundle: ModelBundle, cfg: LossConfig, xa: Tensor, xb: Tensor,
                tau_step) -> tuple[LossTerms, StepTemps]:
    """Batch-averaged loss terms for one two-view batch; ``tau_step`` is
    the scheduled temperature or the marker "adaptive"."""
    if cfg.variant in ("ntxent", "infonce"):
        return _batch_nce(bundle, cfg, xa, xb, tau_step)
    if cfg.variant == "simsiam":
        return _batch_negcos(bundle, cfg, xa, xb, tau_step)
    return _batch_cross_corr(bundle, cfg, xa, xb, tau_step)


def _mean_terms(terms: LossTerms) -> LossTerms:
    return LossTerms(T.mean(terms.pos), T.mean(terms.neg), T.mean(terms.omega))


def _accumulate(total: LossTerms | None, terms: LossTerms) -> LossTerms:
    return terms if total is None else total + terms


def _diag_vector(matrix: Tensor) -> Tensor:
    n = matrix.shape[0]
    return T.reshape(T.gather(matrix, np.arange(n)[:, None]), (n,))


def _batch_nce(bundle, cfg: LossConfig, xa, xb, tau_step):
    """Both anchor directions of the ntxent/infonce batch loss.

    Each direction is assembled from its own-branch and cross-branch
    similarity blocks, with negatives ordered own-branch first; the two
    direction means are combined commutatively, which makes the symmetric
    loss exactly invariant to swapping the anchor and positive roles.
    """
    batch = xa.shape[0]
    neg_idx = _drop_diag_indices(batch)
    ha = T.l2_normalize(bundle.encoder(xa))
    hb = T.l2_normalize(bundle.encoder(xb))
    total = None
    tau_all: list[np.ndarray] = []
    tau_pos_heads: list[np.ndarray] = []
    for head in bundle.heads:
        za = T.l2_normalize(head(ha))
        zb = T.l2_normalize(head(hb))
        s_own = {0: T.matmul(za, T.transpose(za)), 1: T.matmul(zb, T.transpose(zb))}
        s_cross = {0: T.matmul(za, T.transpose(zb)), 1: T.matmul(zb, T.transpose(za))}
        if cfg.family == "multihead" and cfg.temp_mode == "adaptive":
            phi_a = bundle.temp_net(za)
            phi_b = bundle.temp_net(zb)
            r_own = {0: T.matmul(phi_a, T.transpose(phi_a)), 1: T.matmul(phi_b, T.transpose(phi_b))}
            r_cross = {0: T.matmul(phi_a, T.transpose(phi_b)), 1: T.matmul(phi_b, T.transpose(phi_a))}
        head_terms = None
        pos_tau_dirs = []
        for direction in (0, 1):
            s_pos = _diag_vector(s_cross[direction])
            s_neg = T.concat([T.gather(s_own[direction], neg_idx),
                              T.gather(s_cross[direction], neg_idx)], axis=1)
            if cfg.family == "baseline":
                make = L.ntxent_terms if cfg.variant == "ntxent" else L.infonce_terms
                terms = make(s_pos, s_neg, tau_step)
                pos_tau_dirs.append(np.full(batch, tau_step))
            else:
                if cfg.temp_mode == "adaptive":
                    tau_pos = bounded_sigmoid(_diag_vector(r_cross[direction]), cfg.bounds)
                    tau_neg = bounded_sigmoid(
                        T.concat([T.gather(r_own[direction], neg_idx),
                                  T.gather(r_cross[direction], neg_idx)], axis=1), cfg.bounds)
                else:
                    tau_pos = Tensor(np.full(batch, tau_step))
                    tau_neg = Tensor(np.full((batch, 2 * batch - 2), tau_step))
                if cfg.variant == "infonce":
                    s_cand = T.concat([s_neg, T.reshape(s_pos, (batch, 1))], axis=1)
                    tau_cand = T.concat([tau_neg, T.reshape(tau_pos, (batch, 1))], axis=1)
                else:
                    s_cand, tau_cand = s_neg, tau_neg
                terms = L.nce_head_terms(
                    s_pos, tau_pos, s_cand, tau_cand,
                    d_prime=za.shape[-1], beta=cfg.beta, neg_agg=cfg.neg_agg,
                    kappa=cfg.kappa, dim_factor_in_set_penalty=cfg.dim_factor_in_set_penalty,
                )
                pos_tau_dirs.append(tau_pos.data.copy())
                if cfg.neg_agg == "topk":
                    sel = L.topk_indices(s_cand.data, cfg.kappa)
                    tau_all.append(np.take_along_axis(tau_cand.data, sel, axis=-1).ravel())
                else:
                    tau_all.append(tau_cand.data.ravel().copy())
            direction_mean = _mean_terms(terms)
            head_terms = direction_mean if head_terms is None else head_terms + direction_mean
        head_terms = LossTerms(0.5 * head_terms.pos, 0.5 * head_terms.neg, 0.5 * head_terms.omega)
        if cfg.family == "baseline":
            tau_all.append(np.array([tau_step]))
        else:
            tau_all.append(np.concatenate(pos_tau_dirs))
        tau_pos_heads.append(np.concatenate(pos_tau_dirs))
        total = _accumulate(total, head_terms)
    temps = StepTemps(np.concatenate(tau_all), np.stack(tau_pos_heads, axis=1))
    return total, temps


def _batch_negcos(bundle, cfg: LossConfig, xa, xb, tau_step):
    if bundle.predictor is None:
        raise ContractViolation("the negative-cosine variant needs a predictor")
    batch = xa.shape[0]
    ha = T.l2_normalize(bundle.encoder(xa))
    hb = T.l2_normalize(bundle.encoder(xb))
    total = None
    tau_all: list[np.ndarray] = []
    tau_pos_heads: list[np.ndarray] = []
    for head in bundle.heads:
        za = T.l2_normalize(head(ha))
        zb = T.l2_normalize(head(hb))
        pa = bundle.predictor(za)
        pb = bundle.predictor(zb)
        if cfg.family == "baseline":
            value = L.negcos_loss(pa, pb, za, zb)
            terms = LossTerms(T.mean(value), Tensor(0.0), Tensor(0.0))
            pos_taus = np.full(2 * batch, tau_step)
        else:
            one_head = dataclasses.replace(cfg, heads=1)
            raw = L.multihead_negcos(one_head, [(pa, pb, za, zb)],
                                     temp_net=bundle.temp_net,
                                     tau=None if cfg.temp_mode == "adaptive" else tau_step)
            terms = _mean_terms(raw)
            if cfg.temp_mode == "adaptive":
                tau_a = adaptive_temperature(T.l2_normalize(pa),
                                             T.l2_normalize(T.stop_gradient(zb)),
                                             bundle.temp_net, cfg.bounds)
                tau_b = adaptive_temperature(T.l2_normalize(pb),
                                             T.l2_normalize(T.stop_gradient(za)),
                                             bundle.temp_net, cfg.bounds)
                pos_taus = np.concatenate([tau_a.data, tau_b.data])
            else:
                pos_taus = np.full(2 * batch, tau_step)
        tau_pos_heads.append(pos_taus)
        tau_all.append(pos_taus)
        total = _accumulate(total, terms)
    temps = StepTemps(np.concatenate(tau_all), np.stack(tau_pos_heads, axis=1))
    return total, temps


def _batch_cross_corr(bundle, cfg: LossConfig, xa, xb, tau_step):
    ha = T.l2_normalize(bundle.encoder(xa))
    hb = T.l2_normalize(bundle.encoder(xb))
    total = None
    tau_all: list[np.ndarray] = []
    tau_pos_heads: list[np.ndarray] = []
    for head in bundle.heads:
        ya = L.batch_standardize(head(ha))
        yb = L.batch_standardize(head(hb))
        d_prime = ya.shape[1]
        if cfg.family == "baseline":
            value = L.cross_corr_loss(ya, yb, cfg.lambd)
            terms = LossTerms(value, Tensor(0.0), Tensor(0.0))
            tau_pos_heads.append(np.full(d_prime, tau_step))
            tau_all.append(np.array([tau_step]))
        else:
            one_head = dataclasses.replace(cfg, heads=1)
            terms = L.multihead_cross_corr(one_head, [(ya, yb)],
                                           temp_net_bt=bundle.temp_net_bt,
                                           tau=None if cfg.temp_mode == "adaptive" else tau_step)
            if cfg.temp_mode == "adaptive":
                phi_a = bundle.temp_net_bt(T.l2_normalize(T.transpose(ya)))
                phi_b = bundle.temp_net_bt(T.l2_normalize(T.transpose(yb)))
                t_mat = bounded_sigmoid(T.matmul(phi_a, T.transpose(phi_b)), cfg.bounds).data
                tau_pos_heads.append(np.diag(t_mat).copy())
                tau_all.append(t_mat.ravel().copy())
            else:
                tau_pos_heads.append(np.full(d_prime, tau_step))
                tau_all.append(np.array([tau_step]))
        total = _accumulate(total, terms)
    temps = StepTemps(np.concatenate(tau_all), np.stack(tau_pos_heads, axis=1))
    return total, temps


# -- pretraining ---------------------------------------------------------

@dataclass
class RunResult:
    bundle: ModelBundle
    train_rows: list[str]
    eval_rows: list[str]
    train_indices: np.ndarray
    test_indices: np.ndarray


def _lr_scales(bundle: ModelBundle, params: list[Tensor],
               train_cfg: TrainConfig) -> list[float]:
    temp_ids = {id(p) for p in bundle.temperature_parameters()}
    return [train_cfg.temp_lr_scale if id(p) in temp_ids else 1.0 for p in params]


def build_bundle(dataset: Dataset, model_cfg: ModelConfig, loss_cfg: LossConfig,
                 train_cfg: TrainConfig) -> ModelBundle:
    d_in = dataset.images[0].flat().size
    needs_bt = loss_cfg.variant == "barlow" and loss_cfg.temp_mode == "adaptive"
    return ModelBundle.build(
        d_in, model_cfg.d, model_cfg.d_prime, loss_cfg.heads,
        seed=derive(train_cfg.run_seed, "init"),
        with_predictor=loss_cfg.variant == "simsiam",
        bt_width=train_cfg.batch_size if needs_bt else None,
    )


def _stack(views: list[Image]) -> np.ndarray:
    return np.stack([v.flat() for v in views])


def _fmt(x: float) -> str:
    return repr(float(x))


def encode_features(bundle: ModelBundle, images: list[Image]) -> np.ndarray:
    return bundle.encoder(Tensor(_stack(images))).data.copy()


def pretrain(dataset: Dataset, model_cfg: ModelConfig, loss_cfg: LossConfig,
             train_cfg: TrainConfig, pipeline: AugPipeline,
             eval_cfg: EvalConfig = EvalConfig(),
             out_dir: Path | None = None) -> RunResult:
    """Run the full pretraining schedule and return the trained bundle
    plus formatted log rows (also written to disk when ``out_dir`` is
    given, along with a checkpoint)."""
    train_idx, test_idx = stratified_split(dataset.labels, train_cfg.test_fraction)
    if len(train_idx) < train_cfg.batch_size:
        raise ContractViolation(
            f"training split ({len(train_idx)}) smaller than batch size {train_cfg.batch_size}")
    bundle = build_bundle(dataset, model_cfg, loss_cfg, train_cfg)
    params = bundle.parameters()
    opt = SgdMomentum(params, train_cfg.momentum, train_cfg.weight_decay,
                      _lr_scales(bundle, params, train_cfg))
    n_batches = len(train_idx) // train_cfg.batch_size
    train_rows: list[str] = []
    eval_rows: list[str] = []
    for epoch in range(train_cfg.epochs):
        lr = train_cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / train_cfg.epochs))
        tau_step = temperature_for_step(loss_cfg, epoch, train_cfg.epochs)
        perm = SplitMix64(derive(train_cfg.run_seed, "shuffle", epoch)).permutation(len(train_idx))
        for step in range(n_batches):
            chosen = train_idx[perm[step * train_cfg.batch_size:(step + 1) * train_cfg.batch_size]]
            views_a, views_b = [], []
            for j in chosen:
                va, vb = make_two_views(dataset.images[j], pipeline, epoch, int(j),
                                        train_cfg.run_seed)
                views_a.append(va)
                views_b.append(vb)
            xa = Tensor(_stack(views_a))
            xb = Tensor(_stack(views_b))
            terms, temps = _batch_loss(bundle, loss_cfg, xa, xb, tau_step)
            loss = terms.total()
            value = loss.item()
            if not math.isfinite(value):
                raise EvaluationError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"pos={terms.pos.item()}, neg={terms.neg.item()}, omega={terms.omega.item()}")
            zero_grads(params)
            backward(loss)
            opt.step(lr)
            stats = temperature_stats(temps.positive)
            train_rows.append(",".join([
                str(epoch), str(step), _fmt(value),
                _fmt(terms.pos.item()), _fmt(terms.neg.item()), _fmt(terms.omega.item()),
                _fmt(temps.all_values.min()), _fmt(temps.all_values.mean()),
                _fmt(temps.all_values.max()), _fmt(stats.cross_head_variance),
            ]))
        last = epoch == train_cfg.epochs - 1
        due = train_cfg.eval_every > 0 and (epoch + 1) % train_cfg.eval_every == 0
        if last or due:
            knn_acc, probe_acc, overlap = evaluate(bundle, dataset, train_idx, test_idx,
                                                   train_cfg, eval_cfg, pipeline)
            eval_rows.append(",".join([str(epoch), _fmt(knn_acc), _fmt(probe_acc), _fmt(overlap)]))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rows(out_dir / "train_log.csv", TRAIN_LOG_HEADER, train_rows)
        write_rows(out_dir / "eval_log.csv", EVAL_LOG_HEADER, eval_rows)
        save_bundle(bundle, out_dir / "checkpoint.bin")
    return RunResult(bundle, train_rows, eval_rows, train_idx, test_idx)


def write_rows(path: Path, header: str, rows: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def evaluate(bundle: ModelBundle, dataset: Dataset, train_idx, test_idx,
             train_cfg: TrainConfig, eval_cfg: EvalConfig,
             pipeline: AugPipeline) -> tuple[float, float, float]:
    train_feats = encode_features(bundle, [dataset.images[i] for i in train_idx])
    test_feats = encode_features(bundle, [dataset.images[i] for i in test_idx])
    train_labels = dataset.labels[train_idx]
    test_labels = dataset.labels[test_idx]
    knn_acc = knn_eval(train_feats, train_labels, test_feats, test_labels, eval_cfg.knn_k)
    probe_acc = linear_probe(train_feats, train_labels, test_feats, test_labels,
                             train_cfg.probe_per_class, derive(train_cfg.run_seed, "probe"))
    pos_pairs, neg_pairs = build_eval_pairs([dataset.images[i] for i in test_idx],
                                            pipeline, eval_cfg.pair_seed, eval_cfg.pair_count)
    overlap = separability_report(bundle, pos_pairs, neg_pairs, "projected").overlap
    return knn_acc, probe_acc, overlap


def build_eval_pairs(images: list[Image], pipeline: AugPipeline, seed: int,
                     count: int) -> tuple[list, list]:
    """Fixed-seed evaluation pairs: positives are two fresh views of one
    held-out image, negatives are views of two distinct held-out images."""
    if len(images) < 2:
        raise ContractViolation("need at least two held-out images")
    stream = SplitMix64(derive(seed, "choose"))
    pos_pairs, neg_pairs = [], []
    for p in range(count):
        i = stream.next_index(len(images))
        va = augment_view(images[i], pipeline, derive(seed, "pos", p, 0))
        vb = augment_view(images[i], pipeline, derive(seed, "pos", p, 1))
        pos_pairs.append((va, vb))
    for p in range(count):
        i = stream.next_index(len(images))
        j = stream.next_index(len(images))
        while j == i:
            j = stream.next_index(len(images))
        va = augment_view(images[i], pipeline, derive(seed, "neg", p, 0))
        vb = augment_view(images[j], pipeline, derive(seed, "neg", p, 1))
        neg_pairs.append((va, vb))
    return pos_pairs, neg_pairs


# -- frozen-feature evaluation protocols ----------------------------------

def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ContractViolation("zero feature vector in nearest-neighbor evaluation")
    return x / norms


def knn_eval(train_feats: np.ndarray, train_labels: np.ndarray,
             test_feats: np.ndarray, test_labels: np.ndarray, k: int) -> float:
    """Majority vote among the k nearest neighbors under cosine distance;
    vote ties break by smaller summed distance, then lower class index."""
    if len(train_feats) == 0:
        raise ContractViolation("empty train set")
    if k > len(train_feats):
        raise ContractViolation(f"k={k} exceeds train set size {len(train_feats)}")
    dist = 1.0 - _normalize_rows(test_feats) @ _normalize_rows(train_feats).T
    correct = 0
    for row, true_label in zip(dist, test_labels):
        order = np.argsort(row, kind="stable")[:k]
        votes: dict[int, int] = {}
        sums: dict[int, float] = {}
        for idx in order:
            cls = int(train_labels[idx])
            votes[cls] = votes.get(cls, 0) + 1
            sums[cls] = sums.get(cls, 0.0) + float(row[idx])
        best = min(votes, key=lambda c: (-votes[c], sums[c], c))
        correct += int(best == int(true_label))
    return correct / len(test_labels)


def linear_probe(train_feats: np.ndarray, train_labels: np.ndarray,
                 test_feats: np.ndarray, test_labels: np.ndarray,
                 per_class: int, seed: int) -> float:
    """Multinomial logistic regression on a stratified seeded subset of
    the frozen features: full-batch gradient descent, 500 iterations,
    learning rate 0.1, L2 penalty 1e-4 on the weights.

    Features are scaled to unit norm first (matching the cosine geometry
    of the nearest-neighbor protocol), which keeps the fixed step size
    well-conditioned whatever scale the encoder settled at.
    """
    train_feats = _normalize_rows(train_feats)
    test_feats = _normalize_rows(test_feats)
    classes = np.unique(train_labels)
    subset: list[int] = []
    stream = SplitMix64(derive(seed, "subset"))
    for cls in classes:
        members = np.flatnonzero(train_labels == cls)
        if len(members) < per_class:
            raise ContractViolation(
                f"class {cls} has {len(members)} examples, need {per_class}")
        perm = stream.permutation(len(members))
        subset.extend(members[perm[:per_class]])
    subset_arr = np.asarray(sorted(subset))
    x = train_feats[subset_arr]
    y = train_labels[subset_arr]
    n_classes = int(classes.max()) + 1
    onehot = np.zeros((len(y), n_classes))
    onehot[np.arange(len(y)), y] = 1.0
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(500):
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        delta = (probs - onehot) / len(y)
        w -= 0.1 * (x.T @ delta + 1e-4 * w)
        b -= 0.1 * delta.sum(axis=0)
    pred = np.argmax(test_feats @ w + b, axis=1)
    return float(np.mean(pred == test_labels))


# -- reduction check --------------------------------------------------------

def reduction_check(dataset: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    pipeline: AugPipeline, steps: int = 50, tau: float = 0.2,
                    beta: float = 0.0) -> dict:
    """Train for ``steps`` steps updating from the baseline ntxent loss
    while, at every step, also evaluating the single-head constant-
    temperature softmax-aggregated loss on the same batch and comparing
    gradients (they must agree; the values differ by a derived constant).
    """
    multi = LossConfig(variant="ntxent", family="multihead", heads=1, beta=beta,
                       temp_mode="constant", tau0=tau, neg_agg="softmax")
    base = LossConfig(variant="ntxent", family="baseline", heads=1,
                      temp_mode="constant", tau0=tau)
    bundle = build_bundle(dataset, model_cfg, multi, train_cfg)
    params = bundle.parameters()
    opt = SgdMomentum(params, train_cfg.momentum, train_cfg.weight_decay,
                      _lr_scales(bundle, params, train_cfg))
    train_idx, _ = stratified_split(dataset.labels, train_cfg.test_fraction)
    n_batches = max(1, len(train_idx) // train_cfg.batch_size)
    d_prime = model_cfg.d_prime
    # Per head and anchor the two losses differ by this input-independent
    # constant (softmax density normalization plus the constant penalty).
    offset = -(d_prime / 2.0) * math.log(2.0 * math.pi * tau) - 1.0 / tau \
        + beta * ((d_prime / 2.0) * math.log(tau) + 1.0 / tau)
    max_grad_rel = 0.0
    max_value_err = 0.0
    done = 0
    epoch = 0
    while done < steps:
        perm = SplitMix64(derive(train_cfg.run_seed, "shuffle", epoch)).permutation(len(train_idx))
        for step in range(n_batches):
            if done >= steps:
                break
            chosen = train_idx[perm[step * train_cfg.batch_size:(step + 1) * train_cfg.batch_size]]
            views_a, views_b = [], []
            for j in chosen:
                va, vb = make_two_views(dataset.images[j], pipeline, epoch, int(j),
                                        train_cfg.run_seed)
                views_a.append(va)
                views_b.append(vb)
            xa = Tensor(_stack(views_a))
            xb = Tensor(_stack(views_b))
            loss_m, _ = _batch_loss(bundle, multi, xa, xb, tau)
            zero_grads(params)
            backward(loss_m.total())
            grads_m = [grad_of(p).copy() for p in params]
            loss_b, _ = _batch_loss(bundle, base, xa, xb, tau)
            zero_grads(params)
            backward(loss_b.total())
            grads_b = [grad_of(p).copy() for p in params]
            for gm, gb in zip(grads_m, grads_b):
                rel = np.max(np.abs(gm - gb) / np.maximum(1.0, np.abs(gm)))
                max_grad_rel = max(max_grad_rel, float(rel))
            value_err = abs(loss_m.total().item() - (loss_b.total().item() + offset))
            max_value_err = max(max_value_err, value_err)
            opt.step(train_cfg.lr)
            done += 1
        epoch += 1
    return {"steps": done, "max_grad_rel": max_grad_rel, "max_value_err": max_value_err}
