/**
 * Cross-component contract: files written here must load in the primary
 * routing artifact through its public embeddings format, with matching
 * counts, dimensions, and row norms (f32 round-trip tolerance).
 */

import assert from "node:assert/strict";
import { execFileSync } from "node:child_process";
import { createHash } from "node:crypto";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, dirname } from "node:path";
import { test } from "node:test";
import { fileURLToPath } from "node:url";

const here = dirname(fileURLToPath(import.meta.url));
const cliPath = join(here, "..", "src", "cli.js");

const TEXTS = [
  { id: "q0", text: "what is the capital of France?", dataset_tag: "qa" },
  { id: "q1", text: "solve 12*(3+4)", dataset_tag: "math" },
  { id: "q2", text: "write a python function reversing a list", dataset_tag: "code" },
  { id: "q3", text: "what is the capital of France?", dataset_tag: "qa" },
];

function makeDataset(dir: string): string {
  const path = join(dir, "dataset.jsonl");
  writeFileSync(path, TEXTS.map((t) => JSON.stringify(t)).join("\n") + "\n");
  return path;
}

function runCli(args: string[]): string {
  return execFileSync("node", [cliPath, ...args], { encoding: "utf-8" });
}

function sha256(path: string): string {
  return createHash("sha256").update(readFileSync(path)).digest("hex");
}

function pythonAvailable(): boolean {
  try {
    execFileSync("python3", ["-c", "import radialrouter"], { stdio: "pipe" });
    return true;
  } catch {
    return false;
  }
}

test("cli writes files and reports the summary", () => {
  const dir = mkdtempSync(join(tmpdir(), "exp-"));
  const out = runCli([
    "--dataset", makeDataset(dir),
    "--out-dir", join(dir, "out"),
    "--encoder", "hash-64",
    "--pooling", "mean",
  ]);
  const summary = JSON.parse(out);
  assert.equal(summary.count, 4);
  assert.equal(summary.dim, 64);
  const manifest = readFileSync(join(dir, "out", "manifest.txt"), "utf-8");
  assert.deepEqual(
    manifest.trim().split("\n"),
    TEXTS.map((t) => t.id),
  );
});

test("re-export reproduces identical file hashes", () => {
  const dir = mkdtempSync(join(tmpdir(), "exp-"));
  const dataset = makeDataset(dir);
  const common = ["--dataset", dataset, "--encoder", "hash-128"];
  runCli([...common, "--out-dir", join(dir, "a")]);
  runCli([...common, "--out-dir", join(dir, "b")]);
  assert.equal(
    sha256(join(dir, "a", "embeddings.bin")),
    sha256(join(dir, "b", "embeddings.bin")),
  );
  assert.equal(
    sha256(join(dir, "a", "manifest.txt")),
    sha256(join(dir, "b", "manifest.txt")),
  );
});

test("missing text exits with a usage error naming the query", () => {
  const dir = mkdtempSync(join(tmpdir(), "exp-"));
  const path = join(dir, "broken.jsonl");
  writeFileSync(path, JSON.stringify({ id: "q-missing" }) + "\n");
  let code = 0;
  let stderrText = "";
  try {
    execFileSync("node", [cliPath, "--dataset", path, "--out-dir", dir,
                          "--encoder", "hash-32"],
                 { encoding: "utf-8", stdio: "pipe" });
  } catch (e: any) {
    code = e.status;
    stderrText = String(e.stderr);
  }
  assert.equal(code, 2);
  assert.match(stderrText, /q-missing/);
});

test("primary artifact loads the export and norms agree within 1e-6", (t) => {
  if (!pythonAvailable()) {
    t.skip("primary artifact not importable in this environment");
    return;
  }
  const dir = mkdtempSync(join(tmpdir(), "exp-"));
  const outDir = join(dir, "out");
  runCli([
    "--dataset", makeDataset(dir),
    "--out-dir", outDir,
    "--encoder", "hash-256",
    "--pooling", "first_token",
  ]);
  const script = [
    "import json, sys",
    "import numpy as np",
    "from radialrouter.data import load_embeddings",
    "table = load_embeddings(sys.argv[1], sys.argv[2])",
    "norms = np.linalg.norm(table.rows, axis=1).tolist()",
    "a = table.row('q0').reshape(-1); b = table.row('q3').reshape(-1)",
    "cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))",
    "print(json.dumps({'count': table.count, 'd_enc': table.d_enc,",
    "                  'norms': norms, 'dup_cosine': cos,",
    "                  'encoder': table.header['encoder_name'],",
    "                  'pooling': table.header.get('pooling')}))",
  ].join("\n");
  const loaded = JSON.parse(
    execFileSync(
      "python3",
      ["-c", script, join(outDir, "embeddings.bin"), join(outDir, "manifest.txt")],
      { encoding: "utf-8" },
    ),
  );
  assert.equal(loaded.count, 4);
  assert.equal(loaded.d_enc, 256);
  assert.equal(loaded.encoder, "hash-256");
  assert.equal(loaded.pooling, "first_token");
  // rows are unit-norm before the f32 write; the primary sees them within 1e-6
  for (const norm of loaded.norms) {
    assert.ok(Math.abs(norm - 1) < 1e-6, `norm ${norm}`);
  }
  // identical texts encode to identical rows: cosine exactly 1 after load
  assert.ok(Math.abs(loaded.dup_cosine - 1) < 1e-12);
});
