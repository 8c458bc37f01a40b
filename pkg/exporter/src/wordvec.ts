/**
 * Word-vector table access and per-class neighborhood export.
 *
 * Tables use the classic binary format: an ASCII header "<count> <dim>\n",
 * then per entry the word (space-terminated bytes) followed by dim float32
 * little-endian values.  Class names resolve after lowercasing and
 * space-to-underscore normalization; multiword names fall back to the
 * average of their token vectors.
 */

import { openSync, readFileSync, writeSync, closeSync } from "fs";

import { FvecData, writeFvec } from "./fvec";

export interface WordTable {
  dim: number;
  words: string[];
  /** count x dim, row-major */
  vectors: Float32Array;
  index: Map<string, number>;
}

export function readWordTable(path: string): WordTable {
  const raw = readFileSync(path);
  const headerEnd = raw.indexOf(0x0a); // \n
  if (headerEnd < 0) throw new Error(`missing header in word table ${path}`);
  const [countStr, dimStr] = raw.toString("ascii", 0, headerEnd).trim().split(/\s+/);
  const count = parseInt(countStr, 10);
  const dim = parseInt(dimStr, 10);
  if (!Number.isFinite(count) || !Number.isFinite(dim)) {
    throw new Error(`bad word-table header: ${raw.toString("ascii", 0, headerEnd)}`);
  }
  const words: string[] = [];
  const vectors = new Float32Array(count * dim);
  let offset = headerEnd + 1;
  for (let i = 0; i < count; i++) {
    const space = raw.indexOf(0x20, offset);
    if (space < 0) throw new Error(`truncated word table at entry ${i}`);
    words.push(raw.toString("utf8", offset, space));
    offset = space + 1;
    for (let j = 0; j < dim; j++) {
      vectors[i * dim + j] = raw.readFloatLE(offset);
      offset += 4;
    }
    if (raw[offset] === 0x0a) offset += 1; // optional newline separator
  }
  const index = new Map(words.map((w, i) => [w, i]));
  return { dim, words, vectors, index };
}

/** Test and fixture helper; mirrors readWordTable's expectations. */
export function writeWordTable(
  path: string,
  words: string[],
  vectors: Float32Array,
  dim: number,
): void {
  const fd = openSync(path, "w");
  try {
    writeSync(fd, `${words.length} ${dim}\n`);
    const row = Buffer.alloc(4 * dim);
    for (let i = 0; i < words.length; i++) {
      writeSync(fd, `${words[i]} `);
      for (let j = 0; j < dim; j++) row.writeFloatLE(vectors[i * dim + j], 4 * j);
      writeSync(fd, row);
      writeSync(fd, "\n");
    }
  } finally {
    closeSync(fd);
  }
}

export function normalizeClassName(name: string): string {
  return name.toLowerCase().replace(/[\s]+/g, "_");
}

function cosine(table: WordTable, i: number, q: Float32Array, qNorm: number): number {
  let dot = 0;
  let norm = 0;
  const base = i * table.dim;
  for (let j = 0; j < table.dim; j++) {
    const v = table.vectors[base + j];
    dot += v * q[j];
    norm += v * v;
  }
  if (norm === 0 || qNorm === 0) return -Infinity;
  return dot / (Math.sqrt(norm) * qNorm);
}

export interface Resolution {
  vector: Float32Array;
  /** table row when resolved verbatim; -1 for a token-average fallback */
  row: number;
  tokens: string[];
}

export function resolveClassVector(table: WordTable, className: string): Resolution | null {
  const key = normalizeClassName(className);
  const direct = table.index.get(key);
  if (direct !== undefined) {
    return {
      vector: table.vectors.slice(direct * table.dim, (direct + 1) * table.dim),
      row: direct,
      tokens: [key],
    };
  }
  const tokens = key.split("_").filter((t) => t.length > 0);
  if (tokens.length < 2) return null;
  const rows = tokens.map((t) => table.index.get(t));
  if (rows.some((r) => r === undefined)) return null;
  const mean = new Float32Array(table.dim);
  for (const r of rows as number[]) {
    for (let j = 0; j < table.dim; j++) mean[j] += table.vectors[r * table.dim + j];
  }
  for (let j = 0; j < table.dim; j++) mean[j] /= tokens.length;
  return { vector: mean, row: -1, tokens };
}

/** Indices of the k nearest table entries by cosine, excluding `exclude` rows. */
export function nearestNeighbors(
  table: WordTable,
  query: Float32Array,
  k: number,
  exclude: Set<number>,
): number[] {
  let qNorm = 0;
  for (let j = 0; j < table.dim; j++) qNorm += query[j] * query[j];
  qNorm = Math.sqrt(qNorm);
  const scored: Array<[number, number]> = [];
  for (let i = 0; i < table.words.length; i++) {
    if (exclude.has(i)) continue;
    scored.push([cosine(table, i, query, qNorm), i]);
  }
  scored.sort((a, b) => (b[0] - a[0]) || (a[1] - b[1]));
  return scored.slice(0, k).map(([, i]) => i);
}

export interface WordExportResult {
  classNames: string[];
  fallbacks: Map<string, string[]>;
  neighborWords: string[][];
}

export function exportWordVectors(
  classNames: string[],
  tablePath: string,
  outVectors: string,
  outAlternates: string,
  k = 10,
  warn: (msg: string) => void = (msg) => console.warn(msg),
): WordExportResult {
  const table = readWordTable(tablePath);
  const misses: string[] = [];
  const resolutions: Resolution[] = [];
  for (const name of classNames) {
    const res = resolveClassVector(table, name);
    if (res === null) {
      misses.push(name);
    } else {
      if (res.row < 0) {
        warn(`class "${name}" not in table; averaging tokens ${res.tokens.join("+")}`);
      }
      resolutions.push(res);
    }
  }
  if (misses.length > 0) {
    throw new Error(`unresolvable class names: ${misses.join(", ")}`);
  }

  const c = classNames.length;
  const mainVectors = new Float32Array(c * table.dim);
  const altVectors = new Float32Array(c * k * table.dim);
  const neighborWords: string[][] = [];
  const fallbacks = new Map<string, string[]>();

  resolutions.forEach((res, ci) => {
    mainVectors.set(res.vector, ci * table.dim);
    if (res.row < 0) fallbacks.set(classNames[ci], res.tokens);
    const exclude = new Set<number>(res.row >= 0 ? [res.row] : []);
    for (const t of res.tokens) {
      const r = table.index.get(t);
      if (r !== undefined) exclude.add(r);
    }
    const neighbors = nearestNeighbors(table, res.vector, k, exclude);
    if (neighbors.length < k) {
      throw new Error(`table too small: ${neighbors.length} < ${k} neighbors`);
    }
    neighborWords.push(neighbors.map((i) => table.words[i]));
    neighbors.forEach((row, ni) => {
      altVectors.set(
        table.vectors.subarray(row * table.dim, (row + 1) * table.dim),
        (ci * k + ni) * table.dim,
      );
    });
  });

  const names = classNames.map(normalizeClassName);
  const main: FvecData = {
    dim: table.dim,
    vectors: mainVectors,
    labels: [...Array(c).keys()],
    domains: new Array(c).fill("word"),
    classNames: names,
  };
  writeFvec(outVectors, main);
  const alternates: FvecData = {
    dim: table.dim,
    vectors: altVectors,
    labels: Array.from({ length: c * k }, (_, i) => Math.floor(i / k)),
    domains: new Array(c * k).fill("word"),
    classNames: names,
  };
  writeFvec(outAlternates, alternates);
  return { classNames: names, fallbacks, neighborWords };
}
