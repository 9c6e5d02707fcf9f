"""Datasets, catalogs, embedding files, and the synthetic benchmark.

On-disk formats (all little-endian, UTF-8 JSON):
  catalog.json    array of {"name": str, "cost": float}
  dataset.jsonl   one query record per line
  embeddings.bin  64-byte preamble (magic "RRE1", uint32 header length,
                  zero padding) + JSON header + raw float block
  manifest.txt    one query id per line, order-significant

Catalog order is the single source of candidate indexing; its hash travels
with every checkpoint and report. Loaders reject inconsistent inputs
instead of repairing them.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IngestionError, ValidationError

EMBEDDINGS_MAGIC = b"RRE1"
PREAMBLE_BYTES = 64

# Average accuracy (over the six benchmark datasets) and average dollar
# cost per query for the 11 reference candidate LLMs, plus the per-dataset
# accuracy breakdown. Shipped for metric cross-checks.
REFERENCE_DATASET_TAGS = ("GSM8K", "Hellaswag", "MBPP", "MMLU", "winograde", "ARC")

REFERENCE_LLM_STATS: dict[str, dict] = {
    "WizardLM-13B-V1.2": {
        "cost": 0.166,
        "per_dataset": (0.5054, 0.6004, 0.3906, 0.5253, 0.5289, 0.6476)},
    "claude-instant-v1": {
        "cost": 0.514,
        "per_dataset": (0.6281, 0.7690, 0.6250, 0.4529, 0.5211, 0.8421)},
    "claude-v1": {
        "cost": 4.486,
        "per_dataset": (0.6520, 0.8187, 0.6094, 0.5281, 0.5711, 0.9199)},
    "claude-v2": {
        "cost": 5.336,
        "per_dataset": (0.6671, 0.3130, 0.6406, 0.5652, 0.4763, 0.6247)},
    "gpt-3.5-turbo-1106": {
        "cost": 0.562,
        "per_dataset": (0.6094, 0.7843, 0.6875, 0.6667, 0.6632, 0.8444)},
    "gpt-4-1106-preview": {
        "cost": 7.185,
        "per_dataset": (0.6589, 0.9057, 0.6875, 0.8162, 0.8552, 0.9565)},
    "code-llama-34b-chat": {
        "cost": 0.407,
        "per_dataset": (0.4548, 0.5194, 0.5156, 0.5284, 0.5921, 0.6636)},
    "llama-2-70b-chat": {
        "cost": 0.490,
        "per_dataset": (0.5252, 0.7046, 0.3750, 0.6034, 0.4974, 0.8169)},
    "mistral-7b-chat": {
        "cost": 0.107,
        "per_dataset": (0.4151, 0.5410, 0.3828, 0.5198, 0.5737, 0.6705)},
    "mixtral-8x7b-chat": {
        "cost": 0.324,
        "per_dataset": (0.5214, 0.6960, 0.5391, 0.6822, 0.6842, 0.8627)},
    "Yi-34B-Chat": {
        "cost": 0.439,
        "per_dataset": (0.5517, 0.8782, 0.4141, 0.7187, 0.7421, 0.9176)},
}

# Insertion order used by the growing-pool experiment.
POOL_GROWTH_ORDER = (
    "WizardLM-13B-V1.2", "code-llama-34b-chat", "llama-2-70b-chat",
    "claude-v2", "claude-v1", "claude-instant-v1", "mistral-7b-chat",
    "mixtral-8x7b-chat", "Yi-34B-Chat", "gpt-3.5-turbo-1106",
    "gpt-4-1106-preview",
)


@dataclass(frozen=True)
class LLMEntry:
    name: str
    cost: float


class LLMCatalog:
    """Ordered candidate pool; position defines the satellite index."""

    def __init__(self, entries: list[LLMEntry]):
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise ValidationError("catalog names must be unique")
        for e in entries:
            if e.cost < 0:
                raise ValidationError(f"negative cost for {e.name}")
        self.entries = list(entries)

    @classmethod
    def from_pairs(cls, pairs) -> "LLMCatalog":
        return cls([LLMEntry(name=str(n), cost=float(c)) for n, c in pairs])

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    @property
    def costs(self) -> np.ndarray:
        return np.array([e.cost for e in self.entries], dtype=np.float64)

    def index(self, name: str) -> int:
        for i, e in enumerate(self.entries):
            if e.name == name:
                return i
        raise KeyError(name)

    def subset(self, names) -> "LLMCatalog":
        return LLMCatalog([self.entries[self.index(n)] for n in names])

    def to_json(self) -> str:
        return json.dumps([{"name": e.name, "cost": e.cost} for e in self.entries],
                          sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(
            [{"name": e.name, "cost": e.cost} for e in self.entries], indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "LLMCatalog":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"catalog {path} is not valid JSON: {e}") from e
        if not isinstance(raw, list):
            raise FormatError(f"catalog {path} must be a JSON array")
        try:
            return cls.from_pairs([(item["name"], item["cost"]) for item in raw])
        except (KeyError, TypeError) as e:
            raise FormatError(f"catalog {path} entries need name and cost") from e


def reference_catalog() -> LLMCatalog:
    """The 11-LLM benchmark catalog with average per-query costs."""
    return LLMCatalog.from_pairs(
        [(name, stats["cost"]) for name, stats in REFERENCE_LLM_STATS.items()])


@dataclass
class QueryRecord:
    id: str
    dataset_tag: str
    perf: dict[str, float]
    text: str | None = None
    embedding_ref: int = -1

    def to_json_line(self) -> str:
        obj = {"id": self.id, "dataset_tag": self.dataset_tag, "perf": self.perf}
        if self.text is not None:
            obj["text"] = self.text
        return json.dumps(obj, sort_keys=True)


def validate_record(rec: QueryRecord, catalog: LLMCatalog, where: str = "") -> None:
    for name in catalog.names:
        if name not in rec.perf:
            raise IngestionError(
                f"query {rec.id!r}{where}: missing performance for LLM {name!r}")
    for name, v in rec.perf.items():
        if not (-1e-9 <= v <= 1.0 + 1e-9):
            raise IngestionError(
                f"query {rec.id!r}{where}: performance {v} for {name!r} "
                f"outside [0, 1]")


def perf_matrix(records: list[QueryRecord], catalog: LLMCatalog) -> np.ndarray:
    """(m, n) performance values in catalog order."""
    out = np.empty((len(records), len(catalog)))
    for i, rec in enumerate(records):
        for j, name in enumerate(catalog.names):
            try:
                out[i, j] = rec.perf[name]
            except KeyError:
                raise IngestionError(
                    f"query {rec.id!r}: missing performance for LLM {name!r}")
    return out


def save_dataset(records: list[QueryRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json_line() + "\n")


def load_dataset(path, catalog: LLMCatalog) -> list[QueryRecord]:
    """Read and validate a JSONL dataset; records come back sorted by id."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestionError(f"{path}:{lineno}: malformed JSON: {e}") from e
            try:
                rec = QueryRecord(id=str(obj["id"]),
                                  dataset_tag=str(obj["dataset_tag"]),
                                  perf={str(k): float(v)
                                        for k, v in obj["perf"].items()},
                                  text=obj.get("text"))
            except (KeyError, TypeError, ValueError) as e:
                raise IngestionError(f"{path}:{lineno}: bad record: {e}") from e
            validate_record(rec, catalog, where=f" (line {lineno})")
            unknown = set(rec.perf) - set(catalog.names)
            if unknown:
                raise IngestionError(
                    f"{path}:{lineno}: unknown LLM names {sorted(unknown)}")
            records.append(rec)
    if not records:
        warnings.warn(f"dataset {path} is empty")
    records.sort(key=lambda r: r.id)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise IngestionError(f"dataset {path} has duplicate query ids")
    return records


# ---------------------------------------------------------------------------
# Embedding table
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    header: dict
    rows: np.ndarray              # (count, d_enc) float64 in memory
    ids: list[str] = field(default_factory=list)
    _index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.ids and not self._index:
            self._index = {qid: i for i, qid in enumerate(self.ids)}

    @property
    def d_enc(self) -> int:
        return self.rows.shape[1]

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    def row(self, ref) -> np.ndarray:
        if isinstance(ref, str):
            try:
                ref = self._index[ref]
            except KeyError:
                raise IngestionError(f"query id {ref!r} not in embedding manifest")
        return self.rows[ref].reshape(1, -1)


def write_embeddings(path, rows: np.ndarray, header: dict | None = None,
                     dtype: str = "f64") -> None:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValidationError("embedding block must be 2-D")
    if dtype not in ("f32", "f64"):
        raise ValidationError(f"dtype must be f32 or f64, got {dtype}")
    head = dict(header or {})
    head.update({"d_enc": int(rows.shape[1]), "count": int(rows.shape[0]),
                 "dtype": dtype})
    head.setdefault("encoder_name", "unspecified")
    head_bytes = json.dumps(head, sort_keys=True).encode()
    preamble = EMBEDDINGS_MAGIC + struct.pack("<I", len(head_bytes))
    preamble += b"\x00" * (PREAMBLE_BYTES - len(preamble))
    block = rows.astype("<f4" if dtype == "f32" else "<f8").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(preamble)
        fh.write(head_bytes)
        fh.write(block)


def load_manifest(path) -> list[str]:
    ids = [line.strip() for line in Path(path).read_text().splitlines()
           if line.strip()]
    if len(set(ids)) != len(ids):
        raise FormatError(f"manifest {path} has duplicate ids")
    return ids


def load_embeddings(path, manifest=None) -> EmbeddingTable:
    """Parse an embeddings file; f32 blocks are upcast to f64 in memory."""
    blob = Path(path).read_bytes()
    if len(blob) < PREAMBLE_BYTES or blob[:4] != EMBEDDINGS_MAGIC:
        raise FormatError(f"{path}: missing {EMBEDDINGS_MAGIC!r} magic")
    (head_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < PREAMBLE_BYTES + head_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[PREAMBLE_BYTES:PREAMBLE_BYTES + head_len])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: header is not valid JSON: {e}") from e
    for key in ("d_enc", "count", "dtype"):
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}")
    dtype = header["dtype"]
    if dtype not in ("f32", "f64"):
        raise FormatError(f"{path}: unsupported dtype {dtype!r}")
    count, d_enc = int(header["count"]), int(header["d_enc"])
    itemsize = 4 if dtype == "f32" else 8
    block = blob[PREAMBLE_BYTES + head_len:]
    expected = count * d_enc * itemsize
    if len(block) != expected:
        raise FormatError(
            f"{path}: float block is {len(block)} bytes, expected {expected}")
    rows = np.frombuffer(block, dtype="<f4" if dtype == "f32" else "<f8")
    rows = rows.reshape(count, d_enc).astype(np.float64)
    ids: list[str] = []
    if manifest is not None:
        ids = manifest if isinstance(manifest, list) else load_manifest(manifest)
        if len(ids) != count:
            raise FormatError(
                f"manifest lists {len(ids)} ids but file holds {count} rows")
    return EmbeddingTable(header=header, rows=rows, ids=ids)


# ---------------------------------------------------------------------------
# Benchmark export adapter
# ---------------------------------------------------------------------------

def routerbench_adapt(raw_path, out_dir) -> tuple[Path, Path]:
    """Convert a wide per-query benchmark export into dataset + catalog files.

    Expected input: JSONL where each line carries "sample_id", "eval_name",
    optional "prompt", and one performance value per LLM keyed by the LLM
    name (optionally "<name>|total_cost" per-query costs, averaged into the
    catalog). LLMs beyond the 11 reference names are kept with a warning;
    costs default to the reference catalog where known.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    known = set(REFERENCE_LLM_STATS)
    rows = []
    with open(raw_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestionError(f"{raw_path}:{lineno}: malformed JSON: {e}") from e
            if "sample_id" not in obj or "eval_name" not in obj:
                raise IngestionError(
                    f"{raw_path}:{lineno}: expected sample_id and eval_name columns")
            rows.append((lineno, obj))
    if not rows:
        raise IngestionError(f"{raw_path}: no rows to adapt")

    llm_names: list[str] = []
    cost_sums: dict[str, list[float]] = {}
    for _, obj in rows:
        for key, value in obj.items():
            if key in ("sample_id", "eval_name", "prompt") or "|" in key:
                continue
            if isinstance(value, (int, float)) and key not in llm_names:
                llm_names.append(key)
    extra = [n for n in llm_names if n not in known]
    if extra:
        warnings.warn(f"retaining non-reference LLM columns: {extra}")
    if not llm_names:
        raise IngestionError(f"{raw_path}: found no per-LLM performance columns")

    records = []
    for lineno, obj in rows:
        perf = {}
        for name in llm_names:
            if name not in obj:
                raise IngestionError(
                    f"{raw_path}:{lineno}: missing performance for {name!r}")
            perf[name] = float(obj[name])
            cost_key = f"{name}|total_cost"
            if cost_key in obj:
                cost_sums.setdefault(name, []).append(float(obj[cost_key]))
        records.append(QueryRecord(id=str(obj["sample_id"]),
                                   dataset_tag=str(obj["eval_name"]),
                                   perf=perf, text=obj.get("prompt")))

    def cost_for(name: str) -> float:
        if name in cost_sums:
            return float(np.mean(cost_sums[name]))
        if name in REFERENCE_LLM_STATS:
            return REFERENCE_LLM_STATS[name]["cost"]
        raise IngestionError(f"no cost information for LLM {name!r}")

    catalog = LLMCatalog.from_pairs([(n, cost_for(n)) for n in llm_names])
    for rec in records:
        validate_record(rec, catalog)
    dataset_path = out_dir / "dataset.jsonl"
    catalog_path = out_dir / "catalog.json"
    save_dataset(records, dataset_path)
    catalog.save(catalog_path)
    return dataset_path, catalog_path


def reference_records() -> list[QueryRecord]:
    """One record per benchmark dataset built from the shipped per-LLM
    accuracy table; macro metrics over these reproduce the reference
    aggregate columns."""
    records = []
    for ti, tag in enumerate(REFERENCE_DATASET_TAGS):
        perf = {name: stats["per_dataset"][ti]
                for name, stats in REFERENCE_LLM_STATS.items()}
        records.append(QueryRecord(id=f"ref_{tag}", dataset_tag=tag, perf=perf))
    return records


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------

@dataclass
class SyntheticData:
    records: list[QueryRecord]
    catalog: LLMCatalog
    embeddings: EmbeddingTable
    designated: dict[str, int]      # query id -> index of its best LLM
    group_of: dict[str, int]        # query id -> generating group
    oracle_performance: float       # closed-form mean designated performance


def synth_generate(n_llms: int, n_groups: int, queries_per_group: int,
                   d_enc: int, noise: float, seed: int,
                   out_dir=None) -> SyntheticData:
    """Gaussian query groups, each with one designated-best LLM.

    The designated LLM scores 0.9, all others 0.4 (plus clipped Gaussian
    noise); costs are log-uniform over [0.1, 7.2]. With noise=0 the oracle
    routing equals the designated mapping by construction.
    """
    if n_llms < 2:
        raise ValidationError("need at least two candidate LLMs")
    if n_groups < 2:
        raise ValidationError("need at least two groups")
    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((n_groups, d_enc)) * 4.0
    costs = np.exp(rng.uniform(math.log(0.1), math.log(7.2), size=n_llms))
    catalog = LLMCatalog.from_pairs(
        [(f"synth-llm-{i}", round(float(costs[i]), 4)) for i in range(n_llms)])

    records, ids, rows = [], [], []
    designated, group_of = {}, {}
    for g in range(n_groups):
        best = g % n_llms
        for j in range(queries_per_group):
            qid = f"g{g:02d}q{j:03d}"
            emb = centroids[g] + rng.standard_normal(d_enc)
            perf = {}
            for i, name in enumerate(catalog.names):
                base = 0.9 if i == best else 0.4
                value = base + (rng.normal(0.0, noise) if noise > 0 else 0.0)
                perf[name] = float(np.clip(value, 0.0, 1.0))
            records.append(QueryRecord(id=qid, dataset_tag=f"group{g}",
                                       perf=perf, embedding_ref=len(ids)))
            designated[qid] = best
            group_of[qid] = g
            ids.append(qid)
            rows.append(emb)

    table = EmbeddingTable(
        header={"encoder_name": "synthetic-gaussian", "d_enc": d_enc,
                "count": len(ids), "dtype": "f64", "seed": seed},
        rows=np.vstack(rows), ids=ids)
    oracle_perf = float(np.mean([rec.perf[catalog.names[designated[rec.id]]]
                                 for rec in records]))
    data = SyntheticData(records=records, catalog=catalog, embeddings=table,
                         designated=designated, group_of=group_of,
                         oracle_performance=oracle_perf)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        catalog.save(out_dir / "catalog.json")
        save_dataset(records, out_dir / "dataset.jsonl")
        write_embeddings(out_dir / "embeddings.bin", table.rows,
                         header=table.header)
        (out_dir / "manifest.txt").write_text("\n".join(ids) + "\n")
    return data


def split_records(records: list[QueryRecord], seed: int,
                  fractions=(0.7, 0.1, 0.2)) -> tuple[list, list, list]:
    """70/10/20 split by query, stratified by dataset tag."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    by_tag: dict[str, list[QueryRecord]] = {}
    for rec in records:
        by_tag.setdefault(rec.dataset_tag, []).append(rec)
    train, val, test = [], [], []
    for tag in sorted(by_tag):
        group = sorted(by_tag[tag], key=lambda r: r.id)
        order = rng.permutation(len(group))
        n_train = int(round(fractions[0] * len(group)))
        n_val = int(round(fractions[1] * len(group)))
        for pos, idx in enumerate(order):
            if pos < n_train:
                train.append(group[idx])
            elif pos < n_train + n_val:
                val.append(group[idx])
            else:
                test.append(group[idx])
    return train, val, test
