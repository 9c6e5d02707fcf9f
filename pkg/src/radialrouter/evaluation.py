"""Metrics, baselines, sweeps, and report emission.

Performance is the mean per-query accuracy of the chosen LLMs, Cost the
mean dollar cost of the chosen LLMs, Score their alpha-weighted
combination. Headline numbers are macro-averaged: metrics are computed per
source dataset first, then averaged across datasets. Micro (per-query)
variants are emitted alongside.

Every evaluation asserts oracle dominance: no router may beat the
per-query true-score maximum on the same data and alpha.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .data import (EmbeddingTable, LLMCatalog, POOL_GROWTH_ORDER, QueryRecord,
                   perf_matrix)
from .errors import ConfigError, ValidationError
from .losses import best_label
from .training import (OptimizerState, RouterParams, TrainConfig, adamw_step,
                       precompute_scores, train)

NAMED_ALPHAS = {"performance_first": 0.0, "balance": 0.02, "cost_first": 0.1}

ABLATION_VARIANTS = ("full", "backbone_star_transformer",
                     "backbone_full_attention", "backbone_mlp_only",
                     "loss_ce", "loss_ql", "no_qq")


@dataclass(frozen=True)
class Scenario:
    name: str
    alpha: float

    def __post_init__(self):
        if self.name in NAMED_ALPHAS and self.alpha != NAMED_ALPHAS[self.name]:
            raise ConfigError(
                f"scenario {self.name!r} pins alpha={NAMED_ALPHAS[self.name]}, "
                f"got {self.alpha}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")

    @classmethod
    def performance_first(cls) -> "Scenario":
        return cls("performance_first", 0.0)

    @classmethod
    def balance(cls) -> "Scenario":
        return cls("balance", 0.02)

    @classmethod
    def cost_first(cls) -> "Scenario":
        return cls("cost_first", 0.1)

    @classmethod
    def custom(cls, alpha: float) -> "Scenario":
        return cls("custom", float(alpha))

    @classmethod
    def from_name(cls, name: str, alpha: float | None = None) -> "Scenario":
        if name in NAMED_ALPHAS:
            return cls(name, NAMED_ALPHAS[name])
        if name == "custom":
            if alpha is None:
                raise ConfigError("custom scenario needs an alpha")
            return cls.custom(alpha)
        raise ConfigError(f"unknown scenario {name!r}")


def named_scenarios() -> list[Scenario]:
    return [Scenario.performance_first(), Scenario.balance(), Scenario.cost_first()]


@dataclass
class EvalReport:
    router_name: str
    scenario_name: str
    alpha: float
    performance: float
    cost: float
    score: float
    micro_performance: float
    micro_cost: float
    micro_score: float
    per_dataset: dict[str, dict] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        identity_gap = abs(self.score - (self.performance - self.alpha * self.cost))
        if identity_gap > 1e-9:
            raise ValidationError(
                f"score identity violated by {identity_gap:.3e}")

    def to_dict(self) -> dict:
        return {"router_name": self.router_name,
                "scenario_name": self.scenario_name, "alpha": self.alpha,
                "performance": self.performance, "cost": self.cost,
                "score": self.score,
                "micro_performance": self.micro_performance,
                "micro_cost": self.micro_cost, "micro_score": self.micro_score,
                "per_dataset": self.per_dataset, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _oracle_indices(scores: np.ndarray, costs: np.ndarray) -> np.ndarray:
    """Per-query argmax of true score; ties go to the cheaper LLM, then to
    the lower index."""
    out = np.empty(scores.shape[0], dtype=int)
    for i, row in enumerate(scores):
        best = row.max()
        tied = np.flatnonzero(row == best)
        if len(tied) > 1:
            tied = tied[costs[tied] == costs[tied].min()]
        out[i] = tied[0]
    return out


def _aggregate(records, choices, catalog, scenario, router_name,
               metadata=None, check_dominance=True) -> EvalReport:
    perf = perf_matrix(records, catalog)
    costs = catalog.costs
    chosen_idx = np.asarray(choices, dtype=int)
    if ((chosen_idx < 0) | (chosen_idx >= len(catalog))).any():
        raise ValidationError(f"router {router_name!r} chose an out-of-range index")
    q_perf = perf[np.arange(len(records)), chosen_idx]
    q_cost = costs[chosen_idx]

    tags: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        tags.setdefault(rec.dataset_tag, []).append(i)
    per_dataset = {}
    for tag in sorted(tags):
        idx = tags[tag]
        p = float(q_perf[idx].mean())
        c = float(q_cost[idx].mean())
        per_dataset[tag] = {"performance": p, "cost": c,
                            "score": p - scenario.alpha * c, "count": len(idx)}
    macro_perf = float(np.mean([v["performance"] for v in per_dataset.values()]))
    macro_cost = float(np.mean([v["cost"] for v in per_dataset.values()]))
    micro_perf = float(q_perf.mean())
    micro_cost = float(q_cost.mean())

    meta = dict(metadata or {})
    meta.setdefault("catalog_hash", catalog.content_hash())
    report = EvalReport(
        router_name=router_name, scenario_name=scenario.name,
        alpha=scenario.alpha,
        performance=macro_perf, cost=macro_cost,
        score=macro_perf - scenario.alpha * macro_cost,
        micro_performance=micro_perf, micro_cost=micro_cost,
        micro_score=micro_perf - scenario.alpha * micro_cost,
        per_dataset=per_dataset, metadata=meta)

    if check_dominance:
        scores = perf - scenario.alpha * costs[None, :]
        oracle_choice = _oracle_indices(scores, costs)
        oracle = _aggregate(records, oracle_choice, catalog, scenario,
                            "oracle", check_dominance=False)
        if report.score > oracle.score + 1e-9:
            raise ValidationError(
                f"oracle dominance violated: {router_name} scored "
                f"{report.score:.6f} > oracle {oracle.score:.6f}")
        report.metadata["oracle_score"] = oracle.score
    return report


def evaluate_router(route_fn, records: list[QueryRecord], catalog: LLMCatalog,
                    scenario: Scenario, router_name: str = "router",
                    metadata: dict | None = None) -> EvalReport:
    """route_fn maps a QueryRecord to a catalog index."""
    if not records:
        raise ValidationError("cannot evaluate on an empty dataset")
    choices = [route_fn(rec) for rec in records]
    return _aggregate(records, choices, catalog, scenario, router_name, metadata)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def baseline_best_candidate(records, catalog, scenario) -> EvalReport:
    """The single fixed LLM with the highest aggregate score."""
    best_report, best_idx = None, -1
    for i, entry in enumerate(catalog.entries):
        rep = _aggregate(records, [i] * len(records), catalog, scenario,
                         f"best_candidate:{entry.name}", check_dominance=False)
        if best_report is None or rep.score > best_report.score:
            best_report, best_idx = rep, i
    best_report.metadata["best_index"] = best_idx
    best_report.metadata["catalog_hash"] = catalog.content_hash()
    return best_report


def baseline_oracle(records, catalog, scenario) -> EvalReport:
    scores = precompute_scores(records, catalog, scenario.alpha)
    choices = _oracle_indices(scores, catalog.costs)
    return _aggregate(records, choices, catalog, scenario, "oracle")


def baseline_random(records, catalog, scenario, trials: int = 50,
                    seed: int = 0) -> tuple[EvalReport, EvalReport]:
    """Mean over `trials` uniform selections, plus the closed-form
    expectation (the mean over constant routers)."""
    rng = np.random.default_rng(seed)
    sums = {"performance": 0.0, "cost": 0.0}
    for _ in range(trials):
        choices = rng.integers(0, len(catalog), size=len(records))
        rep = _aggregate(records, choices, catalog, scenario, "random",
                         check_dominance=False)
        sums["performance"] += rep.performance
        sums["cost"] += rep.cost
    perf = sums["performance"] / trials
    cost = sums["cost"] / trials
    sampled = EvalReport(
        router_name="random", scenario_name=scenario.name, alpha=scenario.alpha,
        performance=perf, cost=cost, score=perf - scenario.alpha * cost,
        micro_performance=perf, micro_cost=cost,
        micro_score=perf - scenario.alpha * cost,
        metadata={"trials": trials, "seed": seed,
                  "catalog_hash": catalog.content_hash()})

    consts = [_aggregate(records, [i] * len(records), catalog, scenario,
                         "const", check_dominance=False)
              for i in range(len(catalog))]
    e_perf = float(np.mean([r.performance for r in consts]))
    e_cost = float(np.mean([r.cost for r in consts]))
    expectation = EvalReport(
        router_name="random_expectation", scenario_name=scenario.name,
        alpha=scenario.alpha, performance=e_perf, cost=e_cost,
        score=e_perf - scenario.alpha * e_cost,
        micro_performance=e_perf, micro_cost=e_cost,
        micro_score=e_perf - scenario.alpha * e_cost,
        metadata={"catalog_hash": catalog.content_hash()})
    return sampled, expectation


@dataclass
class CosinePrototypes:
    vectors: list[nc.Tensor]   # one prototype per LLM, encoder width

    def route(self, embedding: np.ndarray) -> int:
        e = embedding.reshape(-1)
        ne = np.linalg.norm(e)
        sims = []
        for proto in self.vectors:
            v = proto.values.reshape(-1)
            nv = np.linalg.norm(v)
            sims.append(0.0 if nv == 0 or ne == 0 else float(e @ v) / (ne * nv))
        return int(np.argmax(sims))


def baseline_cosine_classifier(train_records, test_records, catalog, scenario,
                               embeddings: EmbeddingTable,
                               learning_rate: float = 0.05, epochs: int = 200,
                               seed: int = 0) -> EvalReport:
    """Multi-class cosine classifier over query embeddings; labels are the
    per-query best-true-score LLMs, training reuses the AdamW module."""
    import warnings as _warnings
    scores = precompute_scores(train_records, catalog, scenario.alpha)
    labels = [best_label(scores[i]) for i in range(len(train_records))]
    seen = set(labels)
    missing = [name for i, name in enumerate(catalog.names) if i not in seen]
    if missing:
        _warnings.warn(f"classes never labelled in training: {missing}; "
                       f"their prototypes stay at initialization")
    rng = np.random.default_rng(seed)
    d_enc = embeddings.d_enc
    protos = [nc.parameter(rng.standard_normal((1, d_enc)) * 0.1)
              for _ in range(len(catalog))]
    named = [(f"proto.{i}", p) for i, p in enumerate(protos)]
    opt = OptimizerState()
    for _ in range(epochs):
        nc.zero_grads(p for _, p in named)
        with nc.record() as tape:
            terms = []
            for rec, label in zip(train_records, labels):
                anchor = nc.constant(embeddings.row(rec.id))
                sims = nc.concat_cols([nc.cosine_sim(anchor, p) for p in protos])
                terms.append(nc.scale(
                    nc.pick(nc.log_softmax_row(sims), label), -1.0))
            total = terms[0]
            for t in terms[1:]:
                total = nc.add(total, t)
            total = nc.scale(total, 1.0 / len(terms))
        nc.backward(tape, total)
        adamw_step(named, opt, learning_rate, weight_decay=0.0)

    clf = CosinePrototypes(vectors=protos)
    report = evaluate_router(
        lambda rec: clf.route(embeddings.row(rec.id)), test_records, catalog,
        scenario, router_name="cosine_classifier",
        metadata={"epochs": epochs, "seed": seed})
    report.metadata["train_accuracy"] = float(np.mean(
        [clf.route(embeddings.row(r.id)) == l
         for r, l in zip(train_records, labels)]))
    return report


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def alpha_sweep(router_factories: dict, records, catalog,
                alphas=(0.0, 0.01, 0.02, 0.05, 0.1)) -> list[EvalReport]:
    """One evaluation per (alpha, router). Factories receive the scenario
    and return a route function (training or loading as they see fit)."""
    reports = []
    for alpha in alphas:
        scenario = Scenario.custom(float(alpha))
        for name, factory in router_factories.items():
            route_fn = factory(scenario)
            reports.append(evaluate_router(route_fn, records, catalog,
                                           scenario, router_name=name))
    return reports


def pool_growth(records, catalog, scenario, order=None,
                router_factories: dict | None = None) -> list[dict]:
    """Re-evaluate on nested candidate pools of size 1..n.

    Always reports the oracle and best-candidate baselines; extra factories
    receive (pool_catalog, scenario) and return a route function over pool
    indices."""
    order = list(order or POOL_GROWTH_ORDER)
    rows = []
    for size in range(1, len(order) + 1):
        pool = catalog.subset(order[:size])
        entries = {"oracle": baseline_oracle(records, pool, scenario),
                   "best_candidate": baseline_best_candidate(records, pool,
                                                             scenario)}
        for name, factory in (router_factories or {}).items():
            route_fn = factory(pool, scenario)
            entries[name] = evaluate_router(route_fn, records, pool, scenario,
                                            router_name=name)
        for name, rep in entries.items():
            rows.append({"pool_size": size, "added": order[size - 1],
                         "router": name, "performance": rep.performance,
                         "cost": rep.cost, "score": rep.score})
    return rows


def measure_routing_time(params: RouterParams, embeddings: EmbeddingTable,
                         batch_size: int = 64, repeats: int = 5) -> float:
    """Median wall-clock milliseconds to route one batch on the serving
    path (encoder time is out of scope: embeddings arrive precomputed)."""
    rows = [embeddings.rows[i % embeddings.count] for i in range(batch_size)]
    timings = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for row in rows:
            scores = params._fast_scores(row)
            int(np.argmax(scores))
        timings.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(timings))


def _variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    cfg = TrainConfig.from_dict(base.to_dict())
    if variant == "full":
        return cfg
    if variant.startswith("backbone_"):
        cfg.backbone = variant.removeprefix("backbone_")
        return cfg
    if variant == "loss_ce":
        cfg.loss = "ce"
        return cfg
    if variant == "loss_ql":
        cfg.loss = "ql"
        return cfg
    if variant == "no_qq":
        cfg.weight_qq = 0.0
        return cfg
    raise ConfigError(f"unknown ablation variant {variant!r}; "
                      f"choose from {ABLATION_VARIANTS}")


def ablation_run(train_records, val_records, test_records, catalog,
                 embeddings: EmbeddingTable, scenario: Scenario,
                 variant: str, base_config: TrainConfig,
                 groups=None) -> dict:
    """Train and evaluate one ablation variant. Backbone variants also
    report routing time per batch; loss-only variants report None there."""
    cfg = _variant_config(base_config, variant)
    cfg.alpha = scenario.alpha
    result = train(train_records, val_records, catalog, embeddings, cfg,
                   groups=groups)
    report = evaluate_router(
        lambda rec: result.params.decide(embeddings.row(rec.id),
                                         catalog).chosen_index,
        test_records, catalog, scenario, router_name=f"ablation:{variant}")
    timed = variant == "full" or variant.startswith("backbone_")
    time_ms = measure_routing_time(result.params, embeddings) if timed else None
    return {"variant": variant, "report": report, "time_ms": time_ms,
            "counters": result.counters, "history": result.history,
            "params": result.params}


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("router", "scenario", "alpha", "performance", "cost", "score",
                  "micro_performance", "micro_cost", "micro_score")


def emit_report(reports: list[EvalReport], out_dir, basename: str = "report",
                pool_rows: list[dict] | None = None) -> dict[str, Path]:
    """Write CSV + JSON renderings and plot-source TSVs (no rendering)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    csv_path = out_dir / f"{basename}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.router_name, r.scenario_name, r.alpha,
                        f"{r.performance:.6f}", f"{r.cost:.6f}",
                        f"{r.score:.6f}", f"{r.micro_performance:.6f}",
                        f"{r.micro_cost:.6f}", f"{r.micro_score:.6f}"])
    written["csv"] = csv_path

    json_path = out_dir / f"{basename}.json"
    json_path.write_text(json.dumps([r.to_dict() for r in reports],
                                    sort_keys=True, indent=2) + "\n")
    written["json"] = json_path

    score_tsv = out_dir / f"{basename}_score_vs_alpha.tsv"
    with open(score_tsv, "w") as fh:
        fh.write("alpha\trouter\tscore\n")
        for r in sorted(reports, key=lambda r: (r.alpha, r.router_name)):
            fh.write(f"{r.alpha}\t{r.router_name}\t{r.score:.6f}\n")
    written["score_vs_alpha"] = score_tsv

    tradeoff_tsv = out_dir / f"{basename}_performance_vs_cost.tsv"
    with open(tradeoff_tsv, "w") as fh:
        fh.write("router\talpha\tcost\tperformance\n")
        for r in sorted(reports, key=lambda r: (r.router_name, r.alpha)):
            fh.write(f"{r.router_name}\t{r.alpha}\t{r.cost:.6f}\t"
                     f"{r.performance:.6f}\n")
    written["performance_vs_cost"] = tradeoff_tsv

    if pool_rows:
        pool_tsv = out_dir / f"{basename}_pool_growth.tsv"
        with open(pool_tsv, "w") as fh:
            fh.write("pool_size\tadded\trouter\tperformance\tcost\tscore\n")
            for row in pool_rows:
                fh.write(f"{row['pool_size']}\t{row['added']}\t{row['router']}\t"
                         f"{row['performance']:.6f}\t{row['cost']:.6f}\t"
                         f"{row['score']:.6f}\n")
        written["pool_growth"] = pool_tsv
    return written
