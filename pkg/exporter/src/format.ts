/**
 * Little-endian feature-file formats consumed by the ctxood engine.
 *
 * Layout (24-byte header):
 *   magic 4 bytes | version u32 = 1 | dim u32 | count u64 | num_categories u32
 * followed by count*dim float32 rows and count u32 labels
 * (0xFFFFFFFF marks an unlabeled row).
 *
 * CTXF carries sample features; CTXE is the same layout under a different
 * magic, used for auxiliary embeddings (class tokens, descriptions).
 */

import { readFileSync, writeFileSync } from "node:fs";

export const FEATURE_MAGIC = "CTXF";
export const AUX_MAGIC = "CTXE";
export const FORMAT_VERSION = 1;
export const UNLABELED = 0xffffffff;

const HEADER_BYTES = 24;

export interface FeatureSet {
  dim: number;
  numCategories: number;
  /** row-major, length count*dim, every row unit-norm */
  features: Float32Array;
  /** length count, UNLABELED for out-of-category rows */
  labels: Uint32Array;
}

export function rowCount(set: FeatureSet): number {
  return set.labels.length;
}

export function encodeFeatureFile(set: FeatureSet, magic: string = FEATURE_MAGIC): Buffer {
  const count = set.labels.length;
  if (set.features.length !== count * set.dim) {
    throw new Error(`feature buffer holds ${set.features.length} floats, expected ${count * set.dim}`);
  }
  const buf = Buffer.alloc(HEADER_BYTES + 4 * count * set.dim + 4 * count);
  buf.write(magic, 0, 4, "ascii");
  buf.writeUInt32LE(FORMAT_VERSION, 4);
  buf.writeUInt32LE(set.dim, 8);
  buf.writeBigUInt64LE(BigInt(count), 12);
  buf.writeUInt32LE(set.numCategories, 20);
  let offset = HEADER_BYTES;
  for (let i = 0; i < set.features.length; i++) {
    buf.writeFloatLE(set.features[i], offset);
    offset += 4;
  }
  for (let i = 0; i < count; i++) {
    buf.writeUInt32LE(set.labels[i], offset);
    offset += 4;
  }
  return buf;
}

export function writeFeatureFile(path: string, set: FeatureSet, magic: string = FEATURE_MAGIC): void {
  writeFileSync(path, encodeFeatureFile(set, magic));
}

/** Reader used for self-validation; the engine's reader is authoritative. */
export function readFeatureFile(path: string, magic: string = FEATURE_MAGIC): FeatureSet {
  const buf = readFileSync(path);
  if (buf.length < HEADER_BYTES) {
    throw new Error(`${path}: too short for a header (${buf.length} bytes)`);
  }
  const gotMagic = buf.toString("ascii", 0, 4);
  if (gotMagic !== magic) {
    throw new Error(`${path}: magic ${JSON.stringify(gotMagic)}, expected ${magic}`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== FORMAT_VERSION) {
    throw new Error(`${path}: unsupported version ${version}`);
  }
  const dim = buf.readUInt32LE(8);
  const count = Number(buf.readBigUInt64LE(12));
  const numCategories = buf.readUInt32LE(20);
  const expected = HEADER_BYTES + 4 * count * dim + 4 * count;
  if (buf.length !== expected) {
    throw new Error(`${path}: expected ${expected} bytes, got ${buf.length}`);
  }
  const features = new Float32Array(count * dim);
  let offset = HEADER_BYTES;
  for (let i = 0; i < features.length; i++) {
    features[i] = buf.readFloatLE(offset);
    offset += 4;
  }
  const labels = new Uint32Array(count);
  for (let i = 0; i < count; i++) {
    labels[i] = buf.readUInt32LE(offset);
    offset += 4;
    if (labels[i] !== UNLABELED && labels[i] >= numCategories) {
      throw new Error(`${path}: row ${i} label ${labels[i]} outside [0, ${numCategories})`);
    }
  }
  return { dim, numCategories, features, labels };
}

/** Worst |row norm - 1| over all rows; exporters must stay within 1e-3. */
export function maxNormDeviation(set: FeatureSet): number {
  const count = set.labels.length;
  let worst = 0;
  for (let i = 0; i < count; i++) {
    let sq = 0;
    for (let j = 0; j < set.dim; j++) {
      const v = set.features[i * set.dim + j];
      sq += v * v;
    }
    worst = Math.max(worst, Math.abs(Math.sqrt(sq) - 1));
  }
  return worst;
}

export function stackRows(rows: Float32Array[], dim: number): Float32Array {
  const out = new Float32Array(rows.length * dim);
  rows.forEach((row, i) => {
    if (row.length !== dim) {
      throw new Error(`row ${i} has dim ${row.length}, expected ${dim}`);
    }
    out.set(row, i * dim);
  });
  return out;
}
