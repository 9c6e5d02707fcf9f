"""Training objectives.

The default objective is KL divergence between the predicted routing
distribution and the softmax of true scores, plus a weighted query-query
contrastive term over projected embeddings. Cross-entropy against the
best-scoring LLM and a query-LLM contrastive loss over top/bottom-K sets
are kept for the ablation harness.

Every loss accepts either plain arrays (returns a float; handy for
property tests) or tape Tensors (returns a scalar Tensor that
backpropagates).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ValidationError
from .numcore import Tensor

TARGET_FLOOR = 1e-12  # clamp on q before log; guards dominated targets

ACTIVE_LOSSES = ("kl", "ce", "ql")


@dataclass
class LossConfig:
    weight_qq: float = 0.5       # contrastive weight in the combined objective
    out_group: int = 4           # H negatives per anchor
    top_k: int = 3               # K for the query-LLM contrastive ablation
    active_loss: str = "kl"
    ql_use_logits: bool = False  # experimental variant; default follows the
                                 # probability form exactly

    def __post_init__(self):
        if self.weight_qq < 0:
            raise ConfigError(f"contrastive weight must be >= 0, got {self.weight_qq}")
        if self.out_group < 1:
            raise ConfigError(f"need at least one out-group negative, got {self.out_group}")
        if self.active_loss not in ACTIVE_LOSSES:
            raise ConfigError(f"unknown loss {self.active_loss!r}")

    def validate_pool(self, n: int) -> None:
        # K only binds when the query-LLM contrastive loss is in use
        if self.active_loss == "ql" and 2 * self.top_k > n:
            raise ConfigError(f"2K={2 * self.top_k} exceeds pool size {n}")


def _dist_values(p) -> np.ndarray:
    v = (p.values if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64))
    return v.reshape(-1)


def _check_distribution(v: np.ndarray, name: str) -> None:
    if v.size == 0:
        raise ValidationError(f"{name} is empty")
    if (v < -1e-12).any():
        raise ValidationError(f"{name} has negative entries")
    if abs(v.sum() - 1.0) > 1e-6:
        raise ValidationError(f"{name} sums to {v.sum():.9f}, not 1")


def kl_loss(p, q):
    """D_KL(p || q) = sum_i p_i log(p_i / q_i), q clamped below at 1e-12."""
    pv, qv = _dist_values(p), _dist_values(q)
    if pv.shape != qv.shape:
        raise ValidationError(f"distribution sizes differ: {pv.size} vs {qv.size}")
    _check_distribution(pv, "p")
    _check_distribution(qv, "q")
    qc = np.maximum(qv, TARGET_FLOOR)
    if isinstance(p, Tensor):
        log_q = nc.constant(np.log(qc).reshape(1, -1))
        return nc.sum_all(nc.mul(p, nc.sub(nc.log(p), log_q)))
    mask = pv > 0  # 0 log 0 = 0
    return float(np.sum(pv[mask] * (np.log(pv[mask]) - np.log(qc[mask]))))


def qq_contrastive_loss(anchor, positive, negatives):
    """-log( e^{sim(a, +)} / (e^{sim(a, +)} + sum_t e^{sim(a, t-)}) ).

    sim is cosine similarity over projected query embeddings; scaling any
    vector leaves the loss unchanged.
    """
    if len(negatives) < 1:
        raise ValidationError("need at least one out-group negative")
    anchor = nc.as_tensor(anchor)
    positive = nc.as_tensor(positive)
    negatives = [nc.as_tensor(x) for x in negatives]
    sims = [nc.cosine_sim(anchor, positive)]
    sims += [nc.cosine_sim(anchor, neg) for neg in negatives]
    row = nc.concat_cols(sims)
    out = nc.scale(nc.pick(nc.log_softmax_row(row), 0), -1.0)
    if anchor.requires_grad or positive.requires_grad or \
            any(t.requires_grad for t in negatives):
        return out
    return out.item()


def combined_objective(kl, qq, weight_qq: float):
    """kl + weight_qq * qq."""
    if isinstance(kl, Tensor) or isinstance(qq, Tensor):
        return nc.add(nc.as_tensor(kl), nc.as_tensor(qq), alpha=float(weight_qq))
    return float(kl) + float(weight_qq) * float(qq)


def ce_loss(p, label: int):
    """-log p_label; the one-hot target sits on the best-true-score LLM."""
    pv = _dist_values(p)
    _check_distribution(pv, "p")
    if not (0 <= label < pv.size):
        raise IndexError(f"label {label} out of range for {pv.size} classes")
    if isinstance(p, Tensor):
        return nc.scale(nc.log(nc.pick(p, label)), -1.0)
    return float(-np.log(max(pv[label], TARGET_FLOOR)))


def best_label(true_scores) -> int:
    """Index of the highest true score; ties go to the lowest index."""
    return int(np.argmax(np.asarray(true_scores, dtype=np.float64)))


def top_bottom_indices(true_scores, k: int) -> tuple[list[int], list[int]]:
    """Top-K and bottom-K index sets, ties broken by lowest index."""
    s = np.asarray(true_scores, dtype=np.float64).reshape(-1)
    if 2 * k > s.size:
        raise ConfigError(f"2K={2 * k} exceeds pool size {s.size}")
    top = np.argsort(-s, kind="stable")[:k]
    bottom = np.argsort(s, kind="stable")[:k]
    return [int(i) for i in top], [int(i) for i in bottom]


def ql_contrastive_loss(p, true_scores, k: int, use_logits: bool = False,
                        logits=None):
    """sum_{i in top-K} -log( e^{p_i} / (e^{p_i} + sum_{j in bottom-K} e^{p_j}) ).

    The exponentials take routing probabilities as written; pass
    use_logits=True (with logits) for the experimental pre-softmax variant.
    """
    top, bottom = top_bottom_indices(true_scores, k)
    if use_logits:
        if logits is None:
            raise ConfigError("use_logits=True requires the logits argument")
        src = logits if isinstance(logits, Tensor) else nc.constant(
            np.asarray(logits, dtype=np.float64).reshape(1, -1))
    else:
        pv = _dist_values(p)
        _check_distribution(pv, "p")
        src = p if isinstance(p, Tensor) else None
    if src is not None:
        terms = []
        for i in top:
            row = nc.concat_cols([nc.pick(src, i)] +
                                 [nc.pick(src, j) for j in bottom])
            terms.append(nc.scale(nc.pick(nc.log_softmax_row(row), 0), -1.0))
        total = terms[0]
        for t in terms[1:]:
            total = nc.add(total, t)
        return total
    pv = _dist_values(p)
    total = 0.0
    for i in top:
        z = np.concatenate([[pv[i]], pv[bottom]])
        z = z - z.max()
        total += float(-np.log(np.exp(z[0]) / np.exp(z).sum()))
    return total
