/**
 * The fvec container written by (and validated against) the anchoralign core:
 *
 *   bytes 0..7     magic "FVEC0001"
 *   bytes 8..11    u32 little-endian manifest byte length L
 *   bytes 12..12+L UTF-8 JSON manifest
 *   remainder      row-major float32 little-endian data, count x dim
 *
 * Manifest fields: format_version, dim, count, dtype ("f32le"), class_names,
 * labels (one per row), domain (one per row or a single shared string),
 * checksum (CRC-32 of the blob).
 */

import { readFileSync, writeFileSync } from "fs";
import { crc32 } from "zlib";

export const MAGIC = "FVEC0001";
export const FORMAT_VERSION = 1;

export interface FvecData {
  dim: number;
  /** count x dim values, row-major */
  vectors: Float32Array;
  labels: number[];
  /** one tag per row; written as a single string when uniform */
  domains: string[];
  classNames: string[];
  /** extra manifest fields (e.g. skipped-image counts); core readers ignore them */
  extra?: Record<string, unknown>;
}

export function writeFvec(path: string, data: FvecData): void {
  const count = data.labels.length;
  if (data.vectors.length !== count * data.dim) {
    throw new Error(
      `vector buffer holds ${data.vectors.length} values, expected ${count}x${data.dim}`,
    );
  }
  if (data.domains.length !== count) {
    throw new Error(`expected ${count} domain tags, got ${data.domains.length}`);
  }
  const blob = Buffer.alloc(4 * count * data.dim);
  for (let i = 0; i < data.vectors.length; i++) {
    blob.writeFloatLE(data.vectors[i], 4 * i);
  }
  const uniform = data.domains.every((d) => d === data.domains[0]);
  const manifest = {
    format_version: FORMAT_VERSION,
    dim: data.dim,
    count,
    dtype: "f32le",
    class_names: data.classNames,
    labels: data.labels,
    domain: uniform && count > 0 ? data.domains[0] : data.domains,
    checksum: crc32(blob),
    ...(data.extra ?? {}),
  };
  const payload = Buffer.from(JSON.stringify(manifest), "utf8");
  const header = Buffer.alloc(MAGIC.length + 4);
  header.write(MAGIC, 0, "ascii");
  header.writeUInt32LE(payload.length, MAGIC.length);
  writeFileSync(path, Buffer.concat([header, payload, blob]));
}

export interface FvecFile extends FvecData {
  count: number;
  manifest: Record<string, unknown>;
}

export function readFvec(path: string): FvecFile {
  const raw = readFileSync(path);
  if (raw.length < MAGIC.length + 4 || raw.toString("ascii", 0, MAGIC.length) !== MAGIC) {
    throw new Error(`not an fvec container: ${path}`);
  }
  const mlen = raw.readUInt32LE(MAGIC.length);
  const headerEnd = MAGIC.length + 4 + mlen;
  const manifest = JSON.parse(raw.toString("utf8", MAGIC.length + 4, headerEnd));
  const { dim, count } = manifest;
  const blob = raw.subarray(headerEnd);
  if (blob.length !== 4 * count * dim) {
    throw new Error(`blob holds ${blob.length} bytes, expected ${4 * count * dim}`);
  }
  if (crc32(blob) !== manifest.checksum) {
    throw new Error("CRC-32 mismatch");
  }
  const vectors = new Float32Array(count * dim);
  for (let i = 0; i < vectors.length; i++) {
    vectors[i] = blob.readFloatLE(4 * i);
  }
  const domains =
    typeof manifest.domain === "string"
      ? new Array(count).fill(manifest.domain)
      : [...manifest.domain];
  return {
    dim,
    count,
    vectors,
    labels: [...manifest.labels],
    domains,
    classNames: [...manifest.class_names],
    manifest,
  };
}
