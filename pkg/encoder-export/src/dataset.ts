/** Reader for the dataset.jsonl format (id + text are all we need here). */

import { readFileSync } from "node:fs";

export interface QueryText {
  id: string;
  text: string;
}

export function loadQueryTexts(path: string): QueryText[] {
  const lines = readFileSync(path, "utf-8").split("\n");
  const out: QueryText[] = [];
  const seen = new Set<string>();
  lines.forEach((line, index) => {
    const trimmed = line.trim();
    if (!trimmed) return;
    let obj: Record<string, unknown>;
    try {
      obj = JSON.parse(trimmed);
    } catch (e) {
      throw new Error(`${path}:${index + 1}: malformed JSON: ${e}`);
    }
    const id = obj["id"];
    if (typeof id !== "string" || !id) {
      throw new Error(`${path}:${index + 1}: record has no id`);
    }
    if (seen.has(id)) {
      throw new Error(`${path}:${index + 1}: duplicate query id ${id}`);
    }
    seen.add(id);
    const text = obj["text"];
    if (typeof text !== "string" || text.length === 0) {
      throw new Error(`query ${id} has no text to encode`);
    }
    out.push({ id, text });
  });
  if (out.length === 0) {
    throw new Error(`${path}: no queries to encode`);
  }
  return out;
}
