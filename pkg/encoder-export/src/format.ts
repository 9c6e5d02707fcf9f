/**
 * Embeddings file format ("RRE1").
 *
 * Layout, little-endian throughout:
 *   bytes 0..3    magic "RRE1"
 *   bytes 4..7    uint32 header length
 *   bytes 8..63   zero padding
 *   then          UTF-8 JSON header (count, d_enc, dtype, encoder_name, ...)
 *   then          count * d_enc floats (f32 or f64), row-major
 */

import { readFileSync, writeFileSync } from "node:fs";

export const MAGIC = "RRE1";
export const PREAMBLE_BYTES = 64;

export type FloatDtype = "f32" | "f64";

export interface EmbeddingsHeader {
  count: number;
  d_enc: number;
  dtype: FloatDtype;
  encoder_name: string;
  [extra: string]: unknown;
}

/** Stable stringify: keys sorted so identical inputs give identical bytes. */
function stableStringify(obj: Record<string, unknown>): string {
  const sorted: Record<string, unknown> = {};
  for (const key of Object.keys(obj).sort()) {
    sorted[key] = obj[key];
  }
  return JSON.stringify(sorted);
}

export interface HeaderFields {
  encoder_name: string;
  dtype?: FloatDtype;
  [extra: string]: unknown;
}

export function encodeEmbeddings(rows: number[][], header: HeaderFields): Buffer {
  if (rows.length === 0) {
    throw new Error("refusing to write an empty embedding table");
  }
  const dEnc = rows[0].length;
  for (const row of rows) {
    if (row.length !== dEnc) {
      throw new Error(`ragged rows: ${row.length} != ${dEnc}`);
    }
  }
  const dtype: FloatDtype = header.dtype ?? "f32";
  const full: EmbeddingsHeader = {
    ...header,
    count: rows.length,
    d_enc: dEnc,
    dtype,
  };
  const headerBytes = Buffer.from(stableStringify(full), "utf-8");
  const preamble = Buffer.alloc(PREAMBLE_BYTES);
  preamble.write(MAGIC, 0, "ascii");
  preamble.writeUInt32LE(headerBytes.length, 4);

  const itemSize = dtype === "f32" ? 4 : 8;
  const block = Buffer.alloc(rows.length * dEnc * itemSize);
  let at = 0;
  for (const row of rows) {
    for (const value of row) {
      if (dtype === "f32") {
        block.writeFloatLE(Math.fround(value), at);
      } else {
        block.writeDoubleLE(value, at);
      }
      at += itemSize;
    }
  }
  return Buffer.concat([preamble, headerBytes, block]);
}

export function writeEmbeddings(
  path: string,
  rows: number[][],
  header: HeaderFields,
): void {
  writeFileSync(path, encodeEmbeddings(rows, header));
}

export function readEmbeddings(path: string): {
  header: EmbeddingsHeader;
  rows: number[][];
} {
  const blob = readFileSync(path);
  if (blob.length < PREAMBLE_BYTES || blob.toString("ascii", 0, 4) !== MAGIC) {
    throw new Error(`${path}: missing ${MAGIC} magic`);
  }
  const headerLength = blob.readUInt32LE(4);
  if (blob.length < PREAMBLE_BYTES + headerLength) {
    throw new Error(`${path}: truncated header`);
  }
  const header = JSON.parse(
    blob.toString("utf-8", PREAMBLE_BYTES, PREAMBLE_BYTES + headerLength),
  ) as EmbeddingsHeader;
  for (const key of ["count", "d_enc", "dtype"]) {
    if (!(key in header)) {
      throw new Error(`${path}: header missing ${key}`);
    }
  }
  const itemSize = header.dtype === "f32" ? 4 : 8;
  const block = blob.subarray(PREAMBLE_BYTES + headerLength);
  const expected = header.count * header.d_enc * itemSize;
  if (block.length !== expected) {
    throw new Error(
      `${path}: float block is ${block.length} bytes, expected ${expected}`,
    );
  }
  const rows: number[][] = [];
  let at = 0;
  for (let i = 0; i < header.count; i++) {
    const row: number[] = new Array(header.d_enc);
    for (let j = 0; j < header.d_enc; j++) {
      row[j] =
        header.dtype === "f32" ? block.readFloatLE(at) : block.readDoubleLE(at);
      at += itemSize;
    }
    rows.push(row);
  }
  return { header, rows };
}

export function writeManifest(path: string, ids: string[]): void {
  writeFileSync(path, ids.join("\n") + "\n");
}
