"""Command-line entry points.

    radialrouter synth   --out DIR [--seed N ...]
    radialrouter adapt   --raw FILE --out DIR
    radialrouter cluster --dataset F --embeddings F --manifest F --out DIR
    radialrouter train   --dataset F --embeddings F --manifest F --catalog F --out DIR
    radialrouter eval    --checkpoint F --dataset F --embeddings F --manifest F --out DIR
    radialrouter route   --checkpoint F (--embedding JSON | --embedding-file F | --text S --encoder-cmd CMD)
    radialrouter serve   --checkpoint F --bind HOST:PORT

Exit codes: 0 success, 1 internal error, 2 usage or validation error.
Every file-producing command writes a run manifest next to its outputs.
Set RADIALROUTER_LOG to control logging verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, clustering, data, evaluation, training
from .errors import (CatalogMismatchError, ConfigError, FormatError,
                     IngestionError, RadialRouterError, ValidationError)
from .service import Server

log = logging.getLogger("radialrouter.cli")

USAGE_ERRORS = (ConfigError, ValidationError, IngestionError, FormatError,
                CatalogMismatchError, FileNotFoundError)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict,
                   inputs: dict, outputs: list, seed) -> Path:
    """Atomic run manifest: enough to reproduce the run."""
    manifest = {
        "command": command,
        "artifact_version": __version__,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs.values() if p},
        "outputs": [str(o) for o in outputs],
        "seed": seed,
        "written_utc": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / f"{command}_manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, path)
    return path


def _load_config_file(path) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return cfg


def _train_config(args, file_cfg: dict) -> training.TrainConfig:
    cfg = dict(file_cfg.get("train", {}))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.alpha is not None:
        cfg["alpha"] = args.alpha
    if getattr(args, "scenario", None):
        cfg["alpha"] = evaluation.Scenario.from_name(
            args.scenario, cfg.get("alpha")).alpha
    return training.TrainConfig.from_dict(cfg)


def _load_inputs(args, need_catalog=True):
    catalog = data.LLMCatalog.load(args.catalog) if need_catalog else None
    records = data.load_dataset(args.dataset, catalog) if args.dataset else None
    table = None
    if args.embeddings:
        table = data.load_embeddings(args.embeddings, args.manifest)
    return catalog, records, table


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    seed = args.seed if args.seed is not None else 0
    data.synth_generate(n_llms=args.n_llms, n_groups=args.n_groups,
                        queries_per_group=args.queries_per_group,
                        d_enc=args.d_enc, noise=args.noise, seed=seed,
                        out_dir=out_dir)
    outputs = [out_dir / f for f in ("catalog.json", "dataset.jsonl",
                                     "embeddings.bin", "manifest.txt")]
    write_manifest(out_dir, "synth", {"n_llms": args.n_llms,
                                      "n_groups": args.n_groups,
                                      "queries_per_group": args.queries_per_group,
                                      "d_enc": args.d_enc, "noise": args.noise},
                   {}, outputs, seed)
    print(json.dumps({"out": str(out_dir), "queries":
                      args.n_groups * args.queries_per_group}))
    return 0


def cmd_adapt(args) -> int:
    out_dir = Path(args.out)
    ds, cat = data.routerbench_adapt(args.raw, out_dir)
    write_manifest(out_dir, "adapt", {}, {"raw": args.raw}, [ds, cat],
                   args.seed)
    print(json.dumps({"dataset": str(ds), "catalog": str(cat)}))
    return 0


def cmd_cluster(args) -> int:
    file_cfg = _load_config_file(args.config)
    ccfg = dict(file_cfg.get("cluster", {}))
    seed = args.seed if args.seed is not None else ccfg.get("seed", 0)
    catalog, records, table = _load_inputs(args)
    train_recs, _, _ = data.split_records(records, seed=seed)
    ids = [r.id for r in train_recs]
    emb = np.vstack([table.row(i) for i in ids])
    n_groups = ccfg.get("n_groups") or len({r.dataset_tag for r in records})
    groups = clustering.semantic_groups(
        ids, emb, n_groups=n_groups,
        perplexity=ccfg.get("perplexity", 30.0),
        iterations=ccfg.get("iterations", 1000), seed=seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups_path = out_dir / "groups.json"
    groups.save(groups_path)
    write_manifest(out_dir, "cluster",
                   {"n_groups": n_groups, **ccfg},
                   {"dataset": args.dataset, "embeddings": args.embeddings,
                    "catalog": args.catalog}, [groups_path], seed)
    print(json.dumps({"groups": str(groups_path), "n_groups": n_groups}))
    return 0


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    config = _train_config(args, file_cfg)
    catalog, records, table = _load_inputs(args)
    train_recs, val_recs, _ = data.split_records(records, seed=config.seed)
    groups = None
    if config.weight_qq > 0:
        if not args.groups:
            raise ConfigError("contrastive training needs --groups "
                              "(run `radialrouter cluster` first) or weight_qq=0")
        groups = clustering.SemanticGroups.load(args.groups)
    init_params = optimizer = None
    start_epoch = 0
    if args.resume:
        ck = training.load_checkpoint(args.resume, active_catalog=catalog)
        init_params, optimizer = ck.params, ck.optimizer
        start_epoch = ck.epoch + 1
    result = training.train(train_recs, val_recs, catalog, table, config,
                            groups=groups, init_params=init_params,
                            optimizer=optimizer, start_epoch=start_epoch)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ck_path = out_dir / "checkpoint.json"
    training.save_checkpoint(ck_path, result.params, config, catalog,
                             epoch=result.best_epoch,
                             optimizer=result.optimizer)
    history_path = out_dir / "history.jsonl"
    with open(history_path, "w") as fh:
        for entry in result.history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    write_manifest(out_dir, "train", config.to_dict(),
                   {"dataset": args.dataset, "embeddings": args.embeddings,
                    "catalog": args.catalog, "groups": args.groups},
                   [ck_path, history_path], config.seed)
    print(json.dumps({"checkpoint": str(ck_path),
                      "best_epoch": result.best_epoch,
                      "best_val_score": result.best_val_score,
                      "epochs_run": len(result.history),
                      "counters": result.counters}))
    return 0


def cmd_eval(args) -> int:
    catalog, records, table = _load_inputs(args)
    ck = training.load_checkpoint(args.checkpoint, active_catalog=catalog)
    seed = args.seed if args.seed is not None else ck.config.seed
    _, _, test_recs = data.split_records(records, seed=seed)
    if args.split == "all":
        test_recs = records
    scenarios = [evaluation.Scenario.from_name(args.scenario, args.alpha)] \
        if args.scenario else evaluation.named_scenarios()

    reports = []
    for scenario in scenarios:
        sampled, expectation = evaluation.baseline_random(
            test_recs, catalog, scenario, seed=seed)
        reports.extend([
            evaluation.evaluate_router(
                lambda rec: ck.params.decide(table.row(rec.id),
                                             catalog).chosen_index,
                test_recs, catalog, scenario, router_name="radialrouter",
                metadata={"checkpoint": str(args.checkpoint)}),
            evaluation.baseline_best_candidate(test_recs, catalog, scenario),
            sampled, expectation,
            evaluation.baseline_oracle(test_recs, catalog, scenario),
        ])
    out_dir = Path(args.out)
    written = evaluation.emit_report(reports, out_dir)
    write_manifest(out_dir, "eval", {"scenarios": [s.name for s in scenarios]},
                   {"dataset": args.dataset, "embeddings": args.embeddings,
                    "catalog": args.catalog, "checkpoint": args.checkpoint},
                   list(written.values()), seed)
    print(json.dumps({k: str(v) for k, v in written.items()}))
    return 0


def _embedding_from_args(args, d_enc: int) -> np.ndarray:
    if args.text is not None:
        if not args.encoder_cmd:
            raise ConfigError("--text needs --encoder-cmd to produce an embedding")
        proc = subprocess.run(args.encoder_cmd, shell=True,
                              input=args.text.encode(),
                              capture_output=True, check=False)
        if proc.returncode != 0:
            raise ValidationError(
                f"encoder command failed: {proc.stderr.decode()[:200]}")
        vec = json.loads(proc.stdout)
    elif args.embedding is not None:
        vec = json.loads(args.embedding)
    elif args.embedding_file:
        vec = json.loads(Path(args.embedding_file).read_text())
    else:
        vec = json.load(sys.stdin)
    arr = np.asarray(vec, dtype=np.float64).reshape(1, -1)
    if arr.shape[1] != d_enc:
        raise ValidationError(f"embedding has dimension {arr.shape[1]}, "
                              f"checkpoint expects {d_enc}")
    return arr


def cmd_route(args) -> int:
    ck = training.load_checkpoint(args.checkpoint)
    arr = _embedding_from_args(args, ck.params.d_enc)
    decision = ck.params.decide(arr, ck.catalog)
    print(json.dumps(decision.to_dict()))
    return 0


def cmd_serve(args) -> int:
    ck = training.load_checkpoint(args.checkpoint)
    host, _, port = args.bind.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"--bind must be HOST:PORT, got {args.bind!r}")
    server = Server(ck, host=host, port=int(port))
    actual_host, actual_port = server.address
    print(json.dumps({"serving": f"http://{actual_host}:{actual_port}",
                      "catalog_hash": server.service.catalog_hash}),
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radialrouter",
        description="Cost-aware LLM routing over precomputed query embeddings")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, catalog=False, dataset=False, embeddings=False,
               checkpoint=False, out=False):
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--seed", type=int, default=None)
        if catalog:
            p.add_argument("--catalog", required=True)
        if dataset:
            p.add_argument("--dataset", required=True)
        if embeddings:
            p.add_argument("--embeddings", required=True)
            p.add_argument("--manifest", required=True)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate the synthetic benchmark")
    common(p, out=True)
    p.add_argument("--n-llms", type=int, default=4)
    p.add_argument("--n-groups", type=int, default=6)
    p.add_argument("--queries-per-group", type=int, default=40)
    p.add_argument("--d-enc", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("adapt", help="adapt a benchmark export")
    common(p, out=True)
    p.add_argument("--raw", required=True)
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("cluster", help="group training queries")
    common(p, catalog=True, dataset=True, embeddings=True, out=True)
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("train", help="train a router")
    common(p, catalog=True, dataset=True, embeddings=True, out=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--scenario", default=None,
                   choices=sorted(evaluation.NAMED_ALPHAS))
    p.add_argument("--groups", default=None, help="groups.json from cluster")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint plus baselines")
    common(p, catalog=True, dataset=True, embeddings=True, checkpoint=True,
           out=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--scenario", default=None,
                   choices=sorted(evaluation.NAMED_ALPHAS) + ["custom"])
    p.add_argument("--split", default="test", choices=["test", "all"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("route", help="route one embedding")
    common(p, checkpoint=True)
    p.add_argument("--embedding", help="inline JSON array")
    p.add_argument("--embedding-file", help="file holding a JSON array")
    p.add_argument("--text", help="raw text; needs --encoder-cmd")
    p.add_argument("--encoder-cmd",
                   help="shell command turning stdin text into a JSON array")
    p.set_defaults(fn=cmd_route)

    p = sub.add_parser("serve", help="run the routing HTTP service")
    common(p, checkpoint=True)
    p.add_argument("--bind", default="127.0.0.1:8711")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("RADIALROUTER_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as e:
        print(f"error: bad JSON input: {e}", file=sys.stderr)
        return 2
    except RadialRouterError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - contract: unexpected -> exit 1
        log.exception("unhandled failure")
        print(f"internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
