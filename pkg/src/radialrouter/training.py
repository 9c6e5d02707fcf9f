"""Training loop: scoring, mini-batch sampling, loss assembly, AdamW.

One router is trained per trade-off scenario (the score definition, and
hence the supervision target, depends on alpha). Early stopping tracks the
validation score with a patience window; the best-validation parameters
are returned. Runs are deterministic for a fixed config seed.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from . import radialformer as rf
from . import router as rt
from .clustering import SemanticGroups, sample_contrastive_pair
from .data import EmbeddingTable, LLMCatalog, QueryRecord, perf_matrix
from .errors import (CatalogMismatchError, ConfigError, FormatError,
                     IngestionError, TrainingError)
from .losses import LossConfig, best_label, ce_loss, combined_objective, \
    kl_loss, ql_contrastive_loss, qq_contrastive_loss
from .numcore import Tensor

log = logging.getLogger("radialrouter.training")

CHECKPOINT_FORMAT = "radialrouter-checkpoint-v1"


@dataclass
class TrainConfig:
    d: int = 32
    layers: int = 3
    heads: int = 4
    d_mlp: int = 128
    backbone: str = "radialformer"
    share_layer_weights: bool = False

    batch_size: int = 64
    max_epochs: int = 1000
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    alpha: float = 0.0
    weight_qq: float = 0.5
    out_group: int = 4          # H
    top_k: int = 3              # K, query-LLM contrastive ablation only
    n_groups: int | None = None  # default: number of dataset tags
    loss: str = "kl"
    seed: int = 0
    patience: int = 50
    eval_every: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 2 and self.weight_qq > 0:
            raise ConfigError("contrastive sampling needs batch_size >= 2")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")

    def loss_config(self) -> LossConfig:
        return LossConfig(weight_qq=self.weight_qq, out_group=self.out_group,
                          top_k=self.top_k, active_loss=self.loss)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class RouterParams:
    """Everything the router learns: adapter, backbone, and scoring head."""
    adapter: rt.ProjectionAdapter
    formers: rf.RadialFormerParams
    head: rt.RoutingHead

    @classmethod
    def init(cls, d_enc: int, config: TrainConfig, n: int,
             rng: np.random.Generator) -> "RouterParams":
        former_cfg = rf.RadialFormerConfig(
            n=n, d=config.d, layers=config.layers, heads=config.heads,
            share_layer_weights=config.share_layer_weights,
            backbone=config.backbone)
        return cls(adapter=rt.ProjectionAdapter.init(d_enc, config.d, rng),
                   formers=rf.RadialFormerParams.init(former_cfg, rng),
                   head=rt.RoutingHead.init(config.d, config.d_mlp, rng))

    @property
    def d_enc(self) -> int:
        return self.adapter.d_enc

    @property
    def n(self) -> int:
        return self.formers.config.n

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return (self.adapter.named_parameters()
                + self.formers.named_parameters()
                + self.head.named_parameters())

    def probabilities(self, raw_embedding, projected: Tensor | None = None) -> Tensor:
        q = projected if projected is not None else \
            rt.project_embedding(raw_embedding, self.adapter)
        state = rf.forward(q, self.formers)
        scores = rt.predict_scores(state.satellite_matrix(), self.head)
        return rt.routing_probability(scores)

    def _fast_scores(self, raw_row: np.ndarray) -> np.ndarray:
        """Gradient-free scoring over plain arrays (serving path)."""
        q = raw_row.reshape(1, -1) @ self.adapter.matrix.values \
            + self.adapter.bias.values
        satellites, _ = rf.forward_values(q, self.formers)
        hidden = np.maximum(satellites @ self.head.w1.values
                            + self.head.b1.values, 0.0)
        return (hidden @ self.head.w2.values + self.head.b2.values).reshape(1, -1)

    def decide(self, raw_embedding, catalog: LLMCatalog) -> rt.RoutingDecision:
        if nc.active_record() is None:
            raw = raw_embedding.values if isinstance(raw_embedding, Tensor) \
                else np.asarray(raw_embedding, dtype=np.float64)
            scores = self._fast_scores(raw)
            probs = rt.routing_probability(scores)
            return rt.select(probs, catalog, predicted_scores=scores)
        q = rt.project_embedding(nc.as_tensor(raw_embedding), self.adapter)
        state = rf.forward(q, self.formers)
        scores = rt.predict_scores(state.satellite_matrix(), self.head)
        probs = rt.routing_probability(scores)
        return rt.select(probs, catalog, predicted_scores=scores)

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name, t in self.named_parameters():
            digest.update(name.encode())
            digest.update(t.values.astype("<f8").tobytes())
        return digest.hexdigest()

    def clone_values(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_parameters()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            t.values[...] = values[name]


def precompute_scores(records: list[QueryRecord], catalog: LLMCatalog,
                      alpha: float) -> np.ndarray:
    """(m, n) true scores: performance minus alpha * catalog cost."""
    perf = perf_matrix(records, catalog)
    return perf - alpha * catalog.costs[None, :]


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(named_params: list[tuple[str, Tensor]], state: OptimizerState,
               learning_rate: float, weight_decay: float) -> None:
    """Bias-corrected Adam plus decoupled weight decay applied straight to
    the weights (never through the moment estimates)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in named_params:
        g = t.grad if t.grad is not None else np.zeros_like(t.values)
        if name not in state.m:
            state.m[name] = np.zeros_like(t.values)
            state.v[name] = np.zeros_like(t.values)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        if weight_decay:
            t.values *= 1.0 - learning_rate * weight_decay
        t.values -= learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: RouterParams
    optimizer: OptimizerState
    history: list[dict]
    counters: dict[str, int]
    best_epoch: int
    best_val_score: float


def _validation_metrics(params: RouterParams, records, catalog, embeddings,
                        alpha: float) -> dict[str, float]:
    from .evaluation import Scenario, evaluate_router  # cycle-free at call time
    report = evaluate_router(
        lambda rec: params.decide(embeddings.row(rec.id), catalog).chosen_index,
        records, catalog, Scenario.custom(alpha), router_name="validation")
    return {"performance": report.performance, "cost": report.cost,
            "score": report.score}


def train(train_records: list[QueryRecord], val_records: list[QueryRecord],
          catalog: LLMCatalog, embeddings: EmbeddingTable, config: TrainConfig,
          groups: SemanticGroups | None = None,
          init_params: RouterParams | None = None,
          optimizer: OptimizerState | None = None,
          start_epoch: int = 0) -> TrainResult:
    if not train_records:
        raise IngestionError("training set is empty")
    config.loss_config().validate_pool(len(catalog))
    use_qq = config.weight_qq > 0
    if use_qq:
        if groups is None:
            raise ConfigError("contrastive training needs semantic groups; "
                              "run clustering first or set weight_qq=0")
        tags = {groups.group(rec.id) for rec in train_records}
        if len(tags) < 2:
            log.warning("all training queries fall in one group; "
                        "contrastive term will be inert")

    rng = np.random.default_rng(config.seed)
    params = init_params or RouterParams.init(
        embeddings.d_enc, config, len(catalog), rng)
    opt = optimizer or OptimizerState()
    targets = np.apply_along_axis(
        rt.target_distribution, 1, precompute_scores(train_records, catalog,
                                                     config.alpha))
    scores_per_query = precompute_scores(train_records, catalog, config.alpha)
    labels = [best_label(scores_per_query[i]) for i in range(len(train_records))]

    named = params.named_parameters()
    tensors = [t for _, t in named]
    counters = {"qq_sampled": 0, "qq_skipped": 0, "aborted_steps": 0}
    history: list[dict] = []
    best_val = -np.inf
    best_fit = np.inf
    best_values = params.clone_values()
    best_epoch = start_epoch
    bad_epochs = 0
    consecutive_aborts = 0
    order = np.arange(len(train_records))

    for epoch in range(start_epoch, start_epoch + config.max_epochs):
        t0 = time.perf_counter()
        rng.shuffle(order)
        epoch_loss = epoch_kl = epoch_qq = 0.0
        batches = 0
        for at in range(0, len(order), config.batch_size):
            batch_idx = order[at:at + config.batch_size]
            batch = [train_records[i] for i in batch_idx]
            batch_ids = [rec.id for rec in batch]
            nc.zero_grads(tensors)
            with nc.record() as tape:
                projected = {rec.id: rt.project_embedding(
                    nc.constant(embeddings.row(rec.id)), params.adapter)
                    for rec in batch}
                terms = []
                kl_total = qq_total = 0.0
                for rec, idx in zip(batch, batch_idx):
                    p = params.probabilities(None, projected=projected[rec.id])
                    if config.loss == "kl":
                        fit = kl_loss(p, targets[idx])
                    elif config.loss == "ce":
                        fit = ce_loss(p, labels[idx])
                    else:
                        fit = ql_contrastive_loss(p, scores_per_query[idx],
                                                  config.top_k)
                    kl_total += fit.item()
                    term = fit
                    if use_qq:
                        pair = sample_contrastive_pair(
                            batch_ids, groups, rec.id, config.out_group, rng)
                        if pair is None:
                            counters["qq_skipped"] += 1
                        else:
                            pos, negs = pair
                            counters["qq_sampled"] += 1
                            qq = qq_contrastive_loss(
                                projected[rec.id], projected[pos],
                                [projected[nid] for nid in negs])
                            qq_total += qq.item()
                            term = combined_objective(fit, qq, config.weight_qq)
                    terms.append(term)
                total = terms[0]
                for t in terms[1:]:
                    total = nc.add(total, t)
                total = nc.scale(total, 1.0 / len(terms))
            nc.backward(tape, total)

            finite = all(t.grad is None or np.isfinite(t.grad).all()
                         for t in tensors)
            if not finite:
                counters["aborted_steps"] += 1
                consecutive_aborts += 1
                log.warning("non-finite gradient; step aborted (%d consecutive)",
                            consecutive_aborts)
                if consecutive_aborts >= 3:
                    raise TrainingError("three consecutive non-finite gradients")
                continue
            consecutive_aborts = 0
            adamw_step(named, opt, config.learning_rate, config.weight_decay)
            epoch_loss += total.item()
            epoch_kl += kl_total / len(batch)
            epoch_qq += qq_total / len(batch)
            batches += 1

        entry = {"epoch": epoch,
                 "train_loss": epoch_loss / max(batches, 1),
                 "fit_loss": epoch_kl / max(batches, 1),
                 "qq_loss": epoch_qq / max(batches, 1),
                 "elapsed_s": round(time.perf_counter() - t0, 4)}
        if val_records and (epoch % config.eval_every == 0):
            metrics = _validation_metrics(params, val_records, catalog,
                                          embeddings, config.alpha)
            entry.update({f"val_{k}": v for k, v in metrics.items()})
            fit = entry["fit_loss"]
            if metrics["score"] > best_val + 1e-12:
                best_val = metrics["score"]
                best_fit = fit
                best_values = params.clone_values()
                best_epoch = epoch
                bad_epochs = 0
            else:
                # a saturated validation set ties often; among equal-score
                # checkpoints keep the one with the lower training loss
                if metrics["score"] >= best_val - 1e-12 and fit < best_fit:
                    best_fit = fit
                    best_values = params.clone_values()
                    best_epoch = epoch
                bad_epochs += config.eval_every
        history.append(entry)
        if val_records and bad_epochs >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    if val_records:
        params.load_values(best_values)
    else:
        best_epoch = start_epoch + config.max_epochs - 1
        best_val = float("nan")
    return TrainResult(params=params, optimizer=opt, history=history,
                       counters=counters, best_epoch=best_epoch,
                       best_val_score=best_val)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _encode_array(a: np.ndarray, dtype: str) -> dict:
    blob = a.astype("<f4" if dtype == "f32" else "<f8").tobytes(order="C")
    return {"shape": list(a.shape), "dtype": dtype,
            "data": base64.b64encode(blob).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    blob = base64.b64decode(obj["data"])
    dt = "<f4" if obj["dtype"] == "f32" else "<f8"
    return np.frombuffer(blob, dtype=dt).reshape(obj["shape"]).astype(np.float64)


def save_checkpoint(path, params: RouterParams, config: TrainConfig,
                    catalog: LLMCatalog, epoch: int = 0,
                    optimizer: OptimizerState | None = None,
                    dtype: str = "f64") -> None:
    tensors = {name: _encode_array(t.values, dtype)
               for name, t in params.named_parameters()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "d_enc": params.d_enc,
        "catalog": [{"name": e.name, "cost": e.cost} for e in catalog.entries],
        "catalog_hash": catalog.content_hash(),
        "epoch": epoch,
        "params": tensors,
        "param_hash": params.parameter_hash(),
    }
    if optimizer is not None:
        payload["optimizer"] = {
            "step": optimizer.step,
            "beta1": optimizer.beta1, "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "m": {k: _encode_array(v, dtype) for k, v in optimizer.m.items()},
            "v": {k: _encode_array(v, dtype) for k, v in optimizer.v.items()},
        }
    Path(path).write_text(json.dumps(payload, sort_keys=True,
                                     separators=(",", ":")) + "\n")


@dataclass
class Checkpoint:
    params: RouterParams
    config: TrainConfig
    catalog: LLMCatalog
    epoch: int
    optimizer: OptimizerState | None


def load_checkpoint(path, active_catalog: LLMCatalog | None = None) -> Checkpoint:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"checkpoint {path} is not valid JSON: {e}") from e
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"checkpoint {path} has format "
                          f"{payload.get('format')!r}, expected {CHECKPOINT_FORMAT}")
    catalog = LLMCatalog.from_pairs(
        [(e["name"], e["cost"]) for e in payload["catalog"]])
    if catalog.content_hash() != payload["catalog_hash"]:
        raise FormatError(f"checkpoint {path} catalog hash mismatch (corrupt?)")
    if active_catalog is not None and \
            active_catalog.content_hash() != payload["catalog_hash"]:
        raise CatalogMismatchError(
            "checkpoint catalog differs from the active catalog; routing "
            "indices would silently misalign")
    config = TrainConfig.from_dict(payload["config"])
    rng = np.random.default_rng(config.seed)
    params = RouterParams.init(int(payload["d_enc"]), config, len(catalog), rng)
    stored = payload["params"]
    for name, t in params.named_parameters():
        if name not in stored:
            raise FormatError(f"checkpoint {path} missing tensor {name!r}")
        t.values[...] = _decode_array(stored[name])
    optimizer = None
    if "optimizer" in payload:
        o = payload["optimizer"]
        optimizer = OptimizerState(
            beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
            m={k: _decode_array(v) for k, v in o["m"].items()},
            v={k: _decode_array(v) for k, v in o["v"].items()})
    return Checkpoint(params=params, config=config, catalog=catalog,
                      epoch=int(payload["epoch"]), optimizer=optimizer)
