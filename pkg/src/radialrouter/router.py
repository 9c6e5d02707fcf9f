"""Score prediction and LLM selection on top of the backbone.

A trainable affine adapter maps frozen external embeddings into the model
width (standing in for encoder fine-tuning), a two-layer MLP head turns
each final satellite state into a scalar score, softmax over the scores
gives the routing probability, and argmax picks the LLM. The same module
owns the ground-truth side: the performance/cost score and the target
distribution it induces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError, ValidationError
from .numcore import Tensor


@dataclass
class ProjectionAdapter:
    """Trainable affine map from encoder width d_enc to model width d."""
    matrix: Tensor  # (d_enc, d)
    bias: Tensor    # (1, d)

    @classmethod
    def init(cls, d_enc: int, d: int, rng: np.random.Generator) -> "ProjectionAdapter":
        bound = 1.0 / np.sqrt(d_enc)
        return cls(matrix=nc.parameter(rng.uniform(-bound, bound, (d_enc, d))),
                   bias=nc.parameter(np.zeros((1, d))))

    @classmethod
    def identity(cls, d: int) -> "ProjectionAdapter":
        return cls(matrix=nc.parameter(np.eye(d)),
                   bias=nc.parameter(np.zeros((1, d))))

    @property
    def d_enc(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("adapter.matrix", self.matrix), ("adapter.bias", self.bias)]


def project_embedding(raw, adapter: ProjectionAdapter) -> Tensor:
    raw = nc.as_tensor(raw)
    if raw.shape != (1, adapter.d_enc):
        raise DimensionError(
            f"raw embedding shape {raw.shape} != (1, {adapter.d_enc})")
    return nc.add(nc.matmul(raw, adapter.matrix), adapter.bias)


@dataclass
class RoutingHead:
    """Two-layer MLP d -> d_mlp -> 1 with ReLU, applied per satellite row."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d: int, d_mlp: int, rng: np.random.Generator) -> "RoutingHead":
        b1 = 1.0 / np.sqrt(d)
        b2 = 1.0 / np.sqrt(d_mlp)
        return cls(w1=nc.parameter(rng.uniform(-b1, b1, (d, d_mlp))),
                   b1=nc.parameter(np.zeros((1, d_mlp))),
                   w2=nc.parameter(rng.uniform(-b2, b2, (d_mlp, 1))),
                   b2=nc.parameter(np.zeros((1, 1))))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("head.w1", self.w1), ("head.b1", self.b1),
                ("head.w2", self.w2), ("head.b2", self.b2)]


def predict_scores(final_satellites: Tensor, head: RoutingHead) -> Tensor:
    """One scalar per satellite row, returned as a (1, n) row."""
    hidden = nc.relu(nc.add(nc.matmul(final_satellites, head.w1), head.b1))
    per_row = nc.add(nc.matmul(hidden, head.w2), head.b2)  # (n, 1)
    return nc.transpose(per_row)


def routing_probability(scores) -> Tensor:
    """Softmax over predicted scores."""
    return nc.softmax_row(nc.as_tensor(scores))


@dataclass
class RoutingDecision:
    predicted_scores: list[float]
    probabilities: list[float]
    chosen_index: int
    chosen_name: str

    def to_dict(self) -> dict:
        return {"chosen_name": self.chosen_name,
                "chosen_index": self.chosen_index,
                "probabilities": self.probabilities,
                "predicted_scores": self.predicted_scores}


def select(probabilities, catalog, predicted_scores=None) -> RoutingDecision:
    """Argmax selection; exact ties resolve to the lowest catalog index."""
    p = probabilities.values if isinstance(probabilities, Tensor) else \
        np.asarray(probabilities, dtype=np.float64)
    p = p.reshape(-1)
    if p.size == 0:
        raise ConfigError("cannot select from an empty candidate pool")
    if len(catalog) != p.size:
        raise ConfigError(
            f"{p.size} probabilities for a catalog of {len(catalog)} LLMs")
    idx = int(np.argmax(p))  # argmax returns the first maximum
    scores = [] if predicted_scores is None else \
        [float(v) for v in np.asarray(
            predicted_scores.values if isinstance(predicted_scores, Tensor)
            else predicted_scores).reshape(-1)]
    return RoutingDecision(predicted_scores=scores,
                           probabilities=[float(v) for v in p],
                           chosen_index=idx,
                           chosen_name=catalog.entries[idx].name)


def true_score(performance: float, cost: float, alpha: float) -> float:
    """performance - alpha * cost; the per-query, per-LLM ground truth."""
    if cost < 0:
        raise ValidationError(f"cost must be non-negative, got {cost}")
    if alpha < 0:
        raise ValidationError(f"alpha must be non-negative, got {alpha}")
    return float(performance) - float(alpha) * float(cost)


def target_distribution(scores_for_query) -> np.ndarray:
    """Softmax of the true-score vector: the supervision target."""
    s = np.asarray(scores_for_query, dtype=np.float64).reshape(-1)
    if not np.isfinite(s).all():
        raise ValidationError("true scores must be finite")
    e = np.exp(s - s.max())
    return e / e.sum()
