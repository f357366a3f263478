"""Dual-model debiasing with hybrid bias-conflicting samples.

A biased model M_B is trained with GCE so that it latches onto the shortcut.
The target model M_D is trained with cross-entropy reweighted by each
sample's relative difficulty for M_B.  Within each batch the samples with the
highest reweighting factors are treated as likely bias-conflicting; each one
is blended with a same-class likely bias-aligned sample and the resulting
hybrids enter M_D's loss with their own reweighting factors.

``train`` also provides the two baselines: ``vanilla`` (plain CE on one
model) and ``reweight`` (the dual-model scheme without hybrids).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import losses
from .datagen import LabeledDataset
from .nncore import AdamState, Mlp, adam_step, backward, default_dims, forward, softmax

METHODS = ("vanilla", "reweight", "hybrid")
SELECTION_MODES = ("top_ratio", "mean_threshold", "fixed_threshold")
REDUCTIONS = ("mean", "sum")


@dataclass
class DebiasConfig:
    alpha: float = 0.9
    beta: float = 1.0
    t_bc: float = 0.95
    selection_mode: str = "top_ratio"
    threshold: float = 0.5  # only used by fixed_threshold
    loss_reduction: str = "mean"
    q: float = 0.7
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    hidden: tuple = (100, 100, 100)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if not 0.0 <= self.t_bc < 1.0:
            raise ValueError(f"t_bc must lie in [0, 1), got {self.t_bc}")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"unknown selection_mode {self.selection_mode!r}")
        if self.loss_reduction not in REDUCTIONS:
            raise ValueError(f"unknown loss_reduction {self.loss_reduction!r}")
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must lie in (0, 1], got {self.q}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def num_selected(n: int, t_bc: float) -> int:
    """max(1, floor(n * (1 - t_bc))), robust to float error in 1 - t_bc."""
    return max(1, int(math.floor(n * (1.0 - t_bc) + 1e-9)))


def select_conflicting(reweights, cfg: DebiasConfig) -> tuple[np.ndarray, np.ndarray]:
    """Split batch positions into (likely conflicting, likely aligned).

    ``reweights`` is a ReweightVector or a plain array of factors.
    """
    r = np.asarray(getattr(reweights, "r", reweights), dtype=np.float64)
    n = len(r)
    if n == 0:
        raise ValueError("cannot select from an empty batch")
    if cfg.selection_mode == "top_ratio":
        order = np.argsort(-r, kind="stable")  # ties keep the lower index first
        bc = np.sort(order[:num_selected(n, cfg.t_bc)])
    elif cfg.selection_mode == "mean_threshold":
        bc = np.flatnonzero(r > r.mean())
    else:
        bc = np.flatnonzero(r > cfg.threshold)
    mask = np.zeros(n, dtype=bool)
    mask[bc] = True
    return bc, np.flatnonzero(~mask)


@dataclass
class HybridBatch:
    features: np.ndarray
    labels: np.ndarray
    bc_idx: np.ndarray
    ba_idx: np.ndarray
    skipped: int = 0
    reweights: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)


def synthesize_hybrids(x, y, bc_indices, ba_indices, alpha: float, rng: np.random.Generator) -> HybridBatch:
    """Blend every likely-conflicting sample with a random same-class
    likely-aligned partner: x_h = alpha * x_bc + (1 - alpha) * x_ba."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    bc_indices = np.asarray(bc_indices, dtype=np.int64)
    ba_indices = np.asarray(ba_indices, dtype=np.int64)
    if np.intersect1d(bc_indices, ba_indices).size:
        raise ValueError("bc and ba indices must be disjoint")
    pairs_bc, pairs_ba = [], []
    skipped = 0
    for i in bc_indices:
        partners = ba_indices[y[ba_indices] == y[i]]
        if partners.size == 0:
            skipped += 1
            continue
        pairs_bc.append(i)
        pairs_ba.append(partners[rng.integers(partners.size)])
    bc_idx = np.asarray(pairs_bc, dtype=np.int64)
    ba_idx = np.asarray(pairs_ba, dtype=np.int64)
    a, b = x[bc_idx], x[ba_idx]
    xh = alpha * a + (1.0 - alpha) * b
    # rounding can leave the blend an ulp outside its parents
    xh = np.clip(xh, np.minimum(a, b), np.maximum(a, b))
    return HybridBatch(xh.reshape(len(bc_idx), x.shape[1]), y[bc_idx], bc_idx, ba_idx, skipped)


def _ce_per_sample(model: Mlp, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    logits, acts = forward(model, x, return_activations=True)
    return softmax(logits), logits, acts


def hybrid_reweights(model_b: Mlp, model_d: Mlp, hybrids: HybridBatch, rw_eps: float = losses.DEFAULT.rw_eps) -> HybridBatch:
    """Fill ``hybrids.reweights`` with R(x_h) from the CE of both models."""
    if len(hybrids) == 0:
        hybrids.reweights = np.empty(0)
        return hybrids
    lb = losses.cross_entropy(softmax(forward(model_b, hybrids.features)), hybrids.labels)
    ld = losses.cross_entropy(softmax(forward(model_d, hybrids.features)), hybrids.labels)
    hybrids.reweights = np.atleast_1d(losses.reweighting_factor(lb, ld, rw_eps))
    return hybrids


def _reduce(v: np.ndarray, reduction: str) -> float:
    if v.size == 0:
        return 0.0
    return float(v.sum() if reduction == "sum" else v.mean())


def biased_loss(probs_b, labels, q: float = 0.7, reduction: str = "mean") -> float:
    """GCE of the biased model reduced over the regular batch."""
    return _reduce(np.atleast_1d(losses.gce(probs_b, labels, q)), reduction)


def debiased_loss(ce, r, ce_h, r_h, beta: float, reduction: str = "mean") -> float:
    """sum(ce * r) + beta * sum(ce_h * r_h); the hybrid term is 0 without hybrids.

    ``mean`` divides the whole expression by the number of regular samples,
    so a hybrid carries the same per-sample scale as a regular sample.
    """
    ce, r, ce_h, r_h = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (ce, r, ce_h, r_h))
    if len(ce) != len(r) or len(ce_h) != len(r_h):
        raise ValueError("loss and weight vectors must have matching lengths")
    total = float(np.sum(ce * r)) + beta * float(np.sum(ce_h * r_h))
    return total * _reduction_scale(len(ce), reduction)


def _reduction_scale(n: int, reduction: str) -> float:
    return 1.0 if reduction == "sum" or n == 0 else 1.0 / n


@dataclass
class StepStats:
    loss_b: float
    loss_d: float
    n_selected: int = 0
    n_hybrids: int = 0
    n_skipped: int = 0
    mean_r_aligned: Optional[float] = None
    mean_r_conflicting: Optional[float] = None
    # per-sample diagnostics for this batch (pre-update)
    lb: Optional[np.ndarray] = field(default=None, repr=False)
    ld: Optional[np.ndarray] = field(default=None, repr=False)
    selected: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class Trainer:
    """Owns M_B, M_D and their optimizer state for the dual-model methods."""
    model_b: Mlp
    model_d: Mlp
    opt_b: AdamState
    opt_d: AdamState
    cfg: DebiasConfig
    rng: np.random.Generator  # only used for hybrid partner draws
    use_hybrids: bool = True


def train_step(tr: Trainer, x, y, aligned=None) -> StepStats:
    """One update of both models on a regular batch.

    R and the hybrid reweights are computed from the pre-update models and act
    as constants; M_B sees only the regular batch.
    """
    cfg = tr.cfg
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty batch")

    # (1) per-sample CE of both models and R(x)
    probs_b, _, acts_b = _ce_per_sample(tr.model_b, x)
    probs_d, _, acts_d = _ce_per_sample(tr.model_d, x)
    rv = losses.ReweightVector.from_losses(losses.cross_entropy(probs_b, y), losses.cross_entropy(probs_d, y))

    stats = StepStats(loss_b=0.0, loss_d=0.0, lb=rv.lb, ld=rv.ld)
    hybrids = None
    if tr.use_hybrids:
        # (2)-(4) selection, synthesis, hybrid reweights
        bc, ba = select_conflicting(rv, cfg)
        hybrids = hybrid_reweights(tr.model_b, tr.model_d, synthesize_hybrids(x, y, bc, ba, cfg.alpha, tr.rng))
        stats.n_selected, stats.n_hybrids, stats.n_skipped = len(bc), len(hybrids), hybrids.skipped
        stats.selected = bc
    if aligned is not None:
        aligned = np.asarray(aligned, dtype=bool)
        if aligned.any():
            stats.mean_r_aligned = float(rv.r[aligned].mean())
        if (~aligned).any():
            stats.mean_r_conflicting = float(rv.r[~aligned].mean())

    # (5) M_D on regular + hybrid samples
    n = len(y)
    g_d = rv.r[:, None] * losses.cross_entropy_logit_grad(probs_d, y) * _reduction_scale(n, cfg.loss_reduction)
    ce_h = r_h = np.empty(0)
    if hybrids is not None and len(hybrids) and cfg.beta > 0:
        probs_h, _, acts_h = _ce_per_sample(tr.model_d, hybrids.features)
        ce_h, r_h = losses.cross_entropy(probs_h, hybrids.labels), hybrids.reweights
        g_h = (cfg.beta * _reduction_scale(n, cfg.loss_reduction)) * r_h[:, None] \
            * losses.cross_entropy_logit_grad(probs_h, hybrids.labels)
        x_all = np.concatenate([x, hybrids.features])
        _, acts_all = forward(tr.model_d, x_all, return_activations=True)
        grads_d = backward(tr.model_d, x_all, np.concatenate([g_d, g_h]), acts_all)
    else:
        grads_d = backward(tr.model_d, x, g_d, acts_d)
    stats.loss_d = debiased_loss(rv.ld, rv.r, ce_h, r_h, cfg.beta, cfg.loss_reduction)
    adam_step(tr.model_d, grads_d, tr.opt_d)

    # (6) M_B with GCE on the regular batch only
    g_b = losses.gce_logit_grad(probs_b, y, cfg.q) * _reduction_scale(n, cfg.loss_reduction)
    stats.loss_b = biased_loss(probs_b, y, cfg.q, cfg.loss_reduction)
    adam_step(tr.model_b, backward(tr.model_b, x, g_b, acts_b), tr.opt_b)
    return stats


def vanilla_step(model: Mlp, opt: AdamState, x, y, reduction: str = "mean") -> float:
    probs, _, acts = _ce_per_sample(model, x)
    ce = losses.cross_entropy(probs, y)
    g = losses.cross_entropy_logit_grad(probs, y) * _reduction_scale(len(y), reduction)
    adam_step(model, backward(model, x, g, acts), opt)
    return _reduce(ce, reduction)


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(tag,)))


def _model_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(tag,)).generate_state(1)[0])


_SHUFFLE, _PAIRING, _INIT_B, _INIT_D = range(4)


def _group_means(values: np.ndarray, aligned: np.ndarray) -> tuple[Optional[float], Optional[float]]:
    a = float(values[aligned].mean()) if aligned.any() else None
    c = float(values[~aligned].mean()) if (~aligned).any() else None
    return a, c


@dataclass
class TrainResult:
    method: str
    model_d: Mlp
    model_b: Optional[Mlp]
    history: list[dict]


def train(method: str, train_ds: LabeledDataset, cfg: DebiasConfig, eval_ds: Optional[LabeledDataset] = None,
          log=None) -> TrainResult:
    """Train ``method`` on ``train_ds``; deterministic in ``cfg.seed``.

    The history holds one record per epoch with the mean per-sample CE of
    both models on ground-truth aligned / conflicting training samples, the
    selection false-positive rate, and accuracy snapshots.
    """
    from .evaluation import accuracy

    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if len(train_ds) == 0:
        raise ValueError("training dataset is empty")
    cfg.validate()
    dims = default_dims(train_ds.features.shape[1], train_ds.num_classes, cfg.hidden)
    model_d = Mlp.init(dims, _model_seed(cfg.seed, _INIT_D))
    opt_d = AdamState.for_model(model_d, lr=cfg.lr)
    tr = None
    if method != "vanilla":
        model_b = Mlp.init(dims, _model_seed(cfg.seed, _INIT_B))
        tr = Trainer(model_b, model_d, AdamState.for_model(model_b, lr=cfg.lr), opt_d, cfg,
                     _stream(cfg.seed, _PAIRING), use_hybrids=method == "hybrid")

    x_all = train_ds.features.astype(np.float64)
    y_all = train_ds.labels
    flags = train_ds.aligned_flags
    shuffle = _stream(cfg.seed, _SHUFFLE)
    history = []
    n = len(train_ds)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        lb_all = np.full(n, np.nan)
        ld_all = np.full(n, np.nan)
        fp = n_aligned_seen = 0
        sel = hyb = skip = 0
        losses_b, losses_d = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y, al = x_all[idx], y_all[idx], flags[idx]
            if tr is None:
                probs = softmax(forward(model_d, x))
                ld_all[idx] = losses.cross_entropy(probs, y)
                losses_d.append(vanilla_step(model_d, opt_d, x, y, cfg.loss_reduction))
                continue
            st = train_step(tr, x, y, al)
            lb_all[idx], ld_all[idx] = st.lb, st.ld
            losses_b.append(st.loss_b)
            losses_d.append(st.loss_d)
            sel, hyb, skip = sel + st.n_selected, hyb + st.n_hybrids, skip + st.n_skipped
            if st.selected is not None:
                fp += int(al[st.selected].sum())
                n_aligned_seen += int(al.sum())
        ld_a, ld_c = _group_means(ld_all, flags)
        rec = {"epoch": epoch, "loss_b_aligned": None, "loss_b_conflicting": None,
               "loss_d_aligned": ld_a, "loss_d_conflicting": ld_c, "fpr": None,
               "loss_d": float(np.mean(losses_d)), "loss_b": None,
               "n_selected": sel, "n_hybrids": hyb, "n_skipped": skip}
        if tr is not None:
            rec["loss_b_aligned"], rec["loss_b_conflicting"] = _group_means(lb_all, flags)
            rec["loss_b"] = float(np.mean(losses_b))
            if method == "hybrid":
                rec["fpr"] = fp / n_aligned_seen if n_aligned_seen else 0.0
        rec["train_acc"] = accuracy(model_d, train_ds).overall_acc
        if eval_ds is not None:
            rep = accuracy(model_d, eval_ds)
            rec["test_acc"], rec["test_conflicting_acc"] = rep.overall_acc, rep.conflicting_acc
        history.append(rec)
        if log is not None:
            log(rec)
    return TrainResult(method, model_d, tr.model_b if tr else None, history)
