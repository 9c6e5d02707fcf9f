#!/usr/bin/env node
/**
 * encoder-export: encode dataset texts, write embeddings.bin + manifest.txt.
 *
 *   encoder-export --dataset dataset.jsonl --out-dir out/ \
 *       [--encoder hash-256] [--pooling first_token|mean] \
 *       [--batch-size 32] [--dtype f32|f64] [--revision main]
 *
 * Exit codes: 0 ok, 1 internal/encoder failure, 2 usage error.
 */

import { mkdirSync } from "node:fs";
import { join } from "node:path";
import { exit, argv, stderr, stdout } from "node:process";

import { loadQueryTexts } from "./dataset.js";
import { DEFAULT_ENCODER, loadEncoder, Pooling } from "./encoders.js";
import { FloatDtype, writeEmbeddings, writeManifest } from "./format.js";

interface Args {
  dataset: string;
  outDir: string;
  encoder: string;
  pooling: Pooling;
  batchSize: number;
  dtype: FloatDtype;
  revision: string;
}

class UsageError extends Error {}

function parseArgs(raw: string[]): Args {
  const values = new Map<string, string>();
  for (let i = 0; i < raw.length; i += 2) {
    const key = raw[i];
    if (!key.startsWith("--")) {
      throw new UsageError(`unexpected argument ${key}`);
    }
    const value = raw[i + 1];
    if (value === undefined) {
      throw new UsageError(`flag ${key} needs a value`);
    }
    values.set(key.slice(2), value);
  }
  const required = (name: string): string => {
    const v = values.get(name);
    if (!v) throw new UsageError(`--${name} is required`);
    return v;
  };
  const pooling = (values.get("pooling") ?? "first_token") as Pooling;
  if (pooling !== "first_token" && pooling !== "mean") {
    throw new UsageError(`--pooling must be first_token or mean, got ${pooling}`);
  }
  const dtype = (values.get("dtype") ?? "f32") as FloatDtype;
  if (dtype !== "f32" && dtype !== "f64") {
    throw new UsageError(`--dtype must be f32 or f64, got ${dtype}`);
  }
  const batchSize = parseInt(values.get("batch-size") ?? "32", 10);
  if (!Number.isInteger(batchSize) || batchSize < 1) {
    throw new UsageError(`--batch-size must be a positive integer`);
  }
  return {
    dataset: required("dataset"),
    outDir: required("out-dir"),
    encoder: values.get("encoder") ?? DEFAULT_ENCODER,
    pooling,
    batchSize,
    dtype,
    revision: values.get("revision") ?? "main",
  };
}

export async function run(args: Args): Promise<{ count: number; dim: number }> {
  const queries = loadQueryTexts(args.dataset);
  const encoder = await loadEncoder(args.encoder, args.pooling, {
    revision: args.revision,
  });
  const rows: number[][] = [];
  for (let at = 0; at < queries.length; at += args.batchSize) {
    const batch = queries.slice(at, at + args.batchSize);
    const encoded = await encoder.encode(batch.map((q) => q.text));
    rows.push(...encoded);
  }
  mkdirSync(args.outDir, { recursive: true });
  const binPath = join(args.outDir, "embeddings.bin");
  // encoder identity and pooling travel in the header for provenance
  writeEmbeddings(binPath, rows, {
    encoder_name: encoder.name,
    encoder_revision: encoder.revision,
    pooling: encoder.pooling,
    dtype: args.dtype,
  });
  writeManifest(join(args.outDir, "manifest.txt"), queries.map((q) => q.id));
  return { count: rows.length, dim: rows[0].length };
}

async function main(): Promise<number> {
  let args: Args;
  try {
    args = parseArgs(argv.slice(2));
  } catch (e) {
    stderr.write(`error: ${(e as Error).message}\n`);
    return 2;
  }
  try {
    const summary = await run(args);
    stdout.write(
      JSON.stringify({
        out_dir: args.outDir,
        encoder: args.encoder,
        pooling: args.pooling,
        ...summary,
      }) + "\n",
    );
    return 0;
  } catch (e) {
    const message = (e as Error).message ?? String(e);
    stderr.write(`error: ${message}\n`);
    // broken inputs are usage errors; encoder/load problems are internal
    return /no text|no queries|malformed|duplicate|no id/.test(message) ? 2 : 1;
  }
}

main().then(exit);
