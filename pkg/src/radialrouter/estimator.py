"""Scikit-learn style estimator facade.

RadialRouter wraps the full pipeline (projection adapter, relay/satellite
backbone, scoring head, KL + contrastive training) behind fit/predict so
it composes with the wider ecosystem: cloning, grid search, and pipelines
all work through get_params/set_params.

X is a (m, d_enc) array of precomputed query embeddings; Y is a (m, n)
array of per-candidate performance values in [0, 1].
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import numcore as nc
from .clustering import semantic_groups, SemanticGroups
from .data import EmbeddingTable, LLMCatalog, QueryRecord
from .errors import ValidationError
from .training import TrainConfig, train


def check_embedding_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValidationError(f"X must be a non-empty 2-D array, got {X.shape}")
    if not np.isfinite(X).all():
        raise ValidationError("X contains non-finite values")
    return X


def check_performance_matrix(Y, n_rows: int) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != n_rows:
        raise ValidationError(
            f"Y must be 2-D with {n_rows} rows, got {Y.shape}")
    if Y.shape[1] < 1:
        raise ValidationError("Y needs at least one candidate column")
    if not np.isfinite(Y).all():
        raise ValidationError("Y contains non-finite values")
    if (Y < -1e-9).any() or (Y > 1 + 1e-9).any():
        raise ValidationError("performance values must lie in [0, 1]")
    return np.clip(Y, 0.0, 1.0)


class RadialRouter(BaseEstimator):
    """Cost-aware router over a fixed candidate pool.

    Parameters mirror the training configuration; `costs` gives the
    per-candidate average cost (defaults to zero cost, i.e. a pure
    performance router) and `alpha` sets the performance-cost trade-off.
    """

    def __init__(self, costs=None, llm_names=None, alpha=0.0, hidden_dim=32,
                 layers=3, heads=4, mlp_hidden=128, weight_qq=0.5,
                 out_group=4, n_groups=None, batch_size=64, max_epochs=200,
                 learning_rate=1e-3, weight_decay=0.01, patience=25,
                 loss="kl", backbone="radialformer", val_fraction=0.1,
                 seed=0):
        self.costs = costs
        self.llm_names = llm_names
        self.alpha = alpha
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.heads = heads
        self.mlp_hidden = mlp_hidden
        self.weight_qq = weight_qq
        self.out_group = out_group
        self.n_groups = n_groups
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.patience = patience
        self.loss = loss
        self.backbone = backbone
        self.val_fraction = val_fraction
        self.seed = seed

    # -- fitting ---------------------------------------------------------

    def _catalog(self, n: int) -> LLMCatalog:
        names = list(self.llm_names) if self.llm_names is not None else \
            [f"llm{i}" for i in range(n)]
        if len(names) != n:
            raise ValidationError(f"{len(names)} names for {n} candidates")
        costs = np.zeros(n) if self.costs is None else \
            np.asarray(self.costs, dtype=np.float64)
        if costs.shape != (n,):
            raise ValidationError(f"costs must have shape ({n},)")
        return LLMCatalog.from_pairs(list(zip(names, costs)))

    def fit(self, X, Y, groups=None):
        """Train on embeddings X and per-candidate performance Y.

        groups: optional per-query group labels for the contrastive term;
        derived via t-SNE + k-means when omitted.
        """
        X = check_embedding_matrix(X)
        Y = check_performance_matrix(Y, X.shape[0])
        catalog = self._catalog(Y.shape[1])
        ids = [f"q{i:06d}" for i in range(X.shape[0])]
        records = [QueryRecord(id=ids[i], dataset_tag="fit",
                               perf={name: float(Y[i, j]) for j, name
                                     in enumerate(catalog.names)},
                               embedding_ref=i)
                   for i in range(X.shape[0])]
        table = EmbeddingTable(header={"encoder_name": "caller-supplied",
                                       "d_enc": X.shape[1],
                                       "count": X.shape[0], "dtype": "f64"},
                               rows=X, ids=ids)

        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(records))
        n_val = max(1, int(round(self.val_fraction * len(records)))) \
            if self.val_fraction > 0 and len(records) >= 10 else 0
        val_idx = set(order[:n_val].tolist())
        train_records = [records[i] for i in range(len(records))
                         if i not in val_idx]
        val_records = [records[i] for i in sorted(val_idx)]

        sem: SemanticGroups | None = None
        if self.weight_qq > 0:
            if groups is not None:
                labels = np.asarray(groups)
                if labels.shape[0] != X.shape[0]:
                    raise ValidationError("groups must align with X rows")
                uniq = {g: k + 1 for k, g in enumerate(dict.fromkeys(labels))}
                sem = SemanticGroups(
                    assignment={ids[i]: uniq[labels[i]] for i in range(len(ids))},
                    centroids=np.zeros((len(uniq), 2)), n_groups=len(uniq),
                    metadata={"source": "caller"})
            else:
                train_ids = [r.id for r in train_records]
                emb = np.vstack([table.row(i) for i in train_ids])
                n_groups = self.n_groups or max(2, min(8, len(train_ids) // 10))
                sem = semantic_groups(train_ids, emb, n_groups=n_groups,
                                      seed=self.seed)
                # queries outside the training split never sample pairs
                for qid in ids:
                    sem.assignment.setdefault(qid, 0)

        config = TrainConfig(
            d=self.hidden_dim, layers=self.layers, heads=self.heads,
            d_mlp=self.mlp_hidden, backbone=self.backbone,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            alpha=self.alpha, weight_qq=self.weight_qq,
            out_group=self.out_group, loss=self.loss, seed=self.seed,
            patience=self.patience)
        result = train(train_records, val_records, catalog, table, config,
                       groups=sem)
        self.params_ = result.params
        self.catalog_ = catalog
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = X.shape[1]
        return self

    # -- inference -------------------------------------------------------

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise ValidationError("estimator is not fitted; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        """Routing probabilities, one row per query."""
        self._check_fitted()
        X = check_embedding_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(
                f"X has {X.shape[1]} features, fitted with {self.n_features_in_}")
        out = np.empty((X.shape[0], len(self.catalog_)))
        for i in range(X.shape[0]):
            probs = self.params_.probabilities(nc.constant(X[i].reshape(1, -1)))
            out[i] = probs.values.reshape(-1)
        return out

    def predict(self, X) -> np.ndarray:
        """Chosen candidate index per query (argmax routing probability)."""
        return self.predict_proba(X).argmax(axis=1)

    def route(self, embedding):
        """Full decision (names, probabilities) for a single embedding."""
        self._check_fitted()
        return self.params_.decide(np.asarray(embedding, dtype=np.float64)
                                   .reshape(1, -1), self.catalog_)

    def score(self, X, Y) -> float:
        """Mean achieved true score (performance - alpha * cost) of the
        routed choices; higher is better."""
        self._check_fitted()
        X = check_embedding_matrix(X)
        Y = check_performance_matrix(Y, X.shape[0])
        choices = self.predict(X)
        perf = Y[np.arange(len(choices)), choices]
        cost = self.catalog_.costs[choices]
        return float(np.mean(perf - self.alpha * cost))
