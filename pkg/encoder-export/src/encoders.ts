/**
 * Text encoders.
 *
 * The default identifier points at a pretrained sentence encoder loaded
 * through transformers.js (fetched by pinned identifier; weights are never
 * shipped). The "hash-<dim>" family is a fully offline, deterministic
 * fallback built on character n-gram feature hashing: not semantically
 * meaningful, but byte-reproducible, which is what the format and
 * round-trip tests need.
 */

export type Pooling = "first_token" | "mean";

export interface Encoder {
  readonly name: string;
  readonly revision: string;
  readonly dim: number;
  readonly pooling: Pooling;
  encode(texts: string[]): Promise<number[][]>;
}

export const DEFAULT_ENCODER = "Xenova/mdeberta-v3-base";

/** FNV-1a, 32-bit. */
function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

function l2Normalize(vector: Float64Array): void {
  let norm = 0;
  for (const v of vector) norm += v * v;
  if (norm === 0) {
    vector[0] = 1;
    return;
  }
  norm = Math.sqrt(norm);
  for (let i = 0; i < vector.length; i++) vector[i] /= norm;
}

export class HashEncoder implements Encoder {
  readonly name: string;
  readonly revision = "fnv1a32-trigram-v1";
  readonly dim: number;
  readonly pooling: Pooling;

  constructor(dim: number, pooling: Pooling) {
    if (!Number.isInteger(dim) || dim < 8) {
      throw new Error(`hash encoder dimension must be an integer >= 8, got ${dim}`);
    }
    this.dim = dim;
    this.pooling = pooling;
    this.name = `hash-${dim}`;
  }

  private tokenVector(token: string): Float64Array {
    const vector = new Float64Array(this.dim);
    const padded = `^${token}$`;
    for (let i = 0; i + 3 <= padded.length; i++) {
      const hash = fnv1a(padded.slice(i, i + 3));
      const bucket = hash % this.dim;
      const sign = (hash & 0x80000000) !== 0 ? -1 : 1;
      vector[bucket] += sign;
    }
    l2Normalize(vector);
    return vector;
  }

  encodeOne(text: string): number[] {
    const tokens = text.normalize("NFC").toLowerCase().split(/\s+/).filter(Boolean);
    if (tokens.length === 0) {
      throw new Error("cannot encode whitespace-only text");
    }
    const pooled = new Float64Array(this.dim);
    if (this.pooling === "first_token") {
      pooled.set(this.tokenVector(tokens[0]));
    } else {
      for (const token of tokens) {
        const tv = this.tokenVector(token);
        for (let i = 0; i < this.dim; i++) pooled[i] += tv[i];
      }
      for (let i = 0; i < this.dim; i++) pooled[i] /= tokens.length;
    }
    l2Normalize(pooled);
    return Array.from(pooled);
  }

  async encode(texts: string[]): Promise<number[][]> {
    return texts.map((t) => this.encodeOne(t));
  }
}

class TransformersJsEncoder implements Encoder {
  readonly name: string;
  readonly revision: string;
  readonly dim: number;
  readonly pooling: Pooling;
  private readonly pipe: (texts: string[]) => Promise<number[][]>;

  constructor(name: string, revision: string, dim: number, pooling: Pooling,
              pipe: (texts: string[]) => Promise<number[][]>) {
    this.name = name;
    this.revision = revision;
    this.dim = dim;
    this.pooling = pooling;
    this.pipe = pipe;
  }

  async encode(texts: string[]): Promise<number[][]> {
    return this.pipe(texts);
  }
}

async function loadTransformersEncoder(
  id: string,
  pooling: Pooling,
  revision: string,
): Promise<Encoder> {
  let transformers: any;
  try {
    transformers = await import("@xenova/transformers" as string);
  } catch {
    throw new Error(
      `encoder ${id} needs the optional dependency @xenova/transformers ` +
      `(npm install @xenova/transformers), or use an offline hash-<dim> encoder`,
    );
  }
  const extractor = await transformers.pipeline("feature-extraction", id, {
    revision,
  });
  const probe = await extractor("probe", { pooling: "none" });
  const dim = probe.dims[probe.dims.length - 1];
  const pipe = async (texts: string[]): Promise<number[][]> => {
    const rows: number[][] = [];
    for (const text of texts) {
      const output = await extractor(text, { pooling: "none" });
      const [, tokens, width] = output.dims;
      const data = output.data as Float32Array;
      const row = new Float64Array(width);
      if (pooling === "first_token") {
        for (let j = 0; j < width; j++) row[j] = data[j];
      } else {
        for (let t = 0; t < tokens; t++) {
          for (let j = 0; j < width; j++) row[j] += data[t * width + j];
        }
        for (let j = 0; j < width; j++) row[j] /= tokens;
      }
      rows.push(Array.from(row));
    }
    return rows;
  };
  return new TransformersJsEncoder(id, revision, dim, pooling, pipe);
}

export async function loadEncoder(
  id: string,
  pooling: Pooling,
  options: { revision?: string } = {},
): Promise<Encoder> {
  const hashMatch = /^hash-(\d+)$/.exec(id);
  if (hashMatch) {
    return new HashEncoder(parseInt(hashMatch[1], 10), pooling);
  }
  return loadTransformersEncoder(id, pooling, options.revision ?? "main");
}
