/**
 * Feature encoders behind one interface.
 *
 * `mock:<dim>` is a deterministic offline encoder: every input is hashed and
 * the hash seeds a Gaussian unit vector, so exports are a pure function of
 * (inputs, model name) and reproduce byte-for-byte. `clip:<model-id>` loads a
 * real checkpoint through @huggingface/transformers when that package (and
 * its weights) are available.
 */

import { createHash } from "node:crypto";

export interface FeatureEncoder {
  readonly name: string;
  /** width of image/text feature vectors */
  readonly dim: number;
  /** width of class-token embeddings (token-embedding space) */
  readonly tokenDim: number;
  encodeImage(data: Buffer): Promise<Float32Array>;
  encodeText(text: string): Promise<Float32Array>;
  encodeClassToken(name: string): Promise<Float32Array>;
}

/** splitmix64 stream seeded from a SHA-256 digest. */
class HashRng {
  private state: bigint;
  private spare: number | null = null;

  constructor(digest: Buffer) {
    this.state = digest.readBigUInt64LE(0);
  }

  private nextU64(): bigint {
    this.state = (this.state + 0x9e3779b97f4a7c15n) & 0xffffffffffffffffn;
    let z = this.state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & 0xffffffffffffffffn;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & 0xffffffffffffffffn;
    return z ^ (z >> 31n);
  }

  /** uniform in (0, 1) */
  private nextUniform(): number {
    return (Number(this.nextU64() >> 11n) + 1) / (2 ** 53 + 1);
  }

  nextGaussian(): number {
    if (this.spare !== null) {
      const v = this.spare;
      this.spare = null;
      return v;
    }
    const u1 = this.nextUniform();
    const u2 = this.nextUniform();
    const radius = Math.sqrt(-2 * Math.log(u1));
    this.spare = radius * Math.sin(2 * Math.PI * u2);
    return radius * Math.cos(2 * Math.PI * u2);
  }
}

function unitGaussianVector(digest: Buffer, dim: number): Float32Array {
  const rng = new HashRng(digest);
  const out = new Float32Array(dim);
  let sq = 0;
  for (let i = 0; i < dim; i++) {
    out[i] = rng.nextGaussian();
    sq += out[i] * out[i];
  }
  const norm = Math.sqrt(sq);
  for (let i = 0; i < dim; i++) {
    out[i] = Math.fround(out[i] / norm);
  }
  return out;
}

export class MockEncoder implements FeatureEncoder {
  readonly name: string;
  readonly dim: number;
  readonly tokenDim: number;

  constructor(dim = 512) {
    if (!Number.isInteger(dim) || dim < 2) {
      throw new Error(`mock encoder dim must be an integer >= 2, got ${dim}`);
    }
    this.name = `mock:${dim}`;
    this.dim = dim;
    this.tokenDim = dim;
  }

  private digest(kind: string, payload: Buffer | string): Buffer {
    return createHash("sha256").update(this.name).update(kind).update(payload).digest();
  }

  async encodeImage(data: Buffer): Promise<Float32Array> {
    return unitGaussianVector(this.digest("image", data), this.dim);
  }

  async encodeText(text: string): Promise<Float32Array> {
    return unitGaussianVector(this.digest("text", text), this.dim);
  }

  async encodeClassToken(name: string): Promise<Float32Array> {
    return unitGaussianVector(this.digest("token", name), this.tokenDim);
  }
}

/** Bridge to @huggingface/transformers CLIP-class checkpoints. */
export class ClipEncoder implements FeatureEncoder {
  readonly name: string;
  readonly dim: number;
  readonly tokenDim: number;
  private readonly imagePipe: (input: unknown) => Promise<unknown>;
  private readonly textPipe: (input: string) => Promise<unknown>;

  private constructor(
    name: string,
    dim: number,
    imagePipe: (input: unknown) => Promise<unknown>,
    textPipe: (input: string) => Promise<unknown>,
  ) {
    this.name = name;
    this.dim = dim;
    this.tokenDim = dim;
    this.imagePipe = imagePipe;
    this.textPipe = textPipe;
  }

  static async load(modelId: string): Promise<ClipEncoder> {
    let transformers: any;
    try {
      const optionalModule = "@huggingface/transformers";
      transformers = await import(optionalModule);
    } catch {
      throw new Error(
        "the clip: backend needs the optional @huggingface/transformers package " +
          "and a reachable checkpoint; use mock:<dim> for offline runs",
      );
    }
    const imagePipe = await transformers.pipeline("image-feature-extraction", modelId);
    const textPipe = await transformers.pipeline("feature-extraction", modelId);
    const probe = await textPipe("probe");
    const dim = probe.dims[probe.dims.length - 1];
    return new ClipEncoder(`clip:${modelId}`, dim, imagePipe, textPipe);
  }

  private static toUnit(tensor: any, dim: number): Float32Array {
    const data = Float32Array.from(tensor.data.slice(-dim));
    let sq = 0;
    for (const v of data) sq += v * v;
    const norm = Math.sqrt(sq);
    for (let i = 0; i < dim; i++) data[i] = Math.fround(data[i] / norm);
    return data;
  }

  async encodeImage(data: Buffer): Promise<Float32Array> {
    const out = await this.imagePipe(new Blob([data]));
    return ClipEncoder.toUnit(out, this.dim);
  }

  async encodeText(text: string): Promise<Float32Array> {
    return ClipEncoder.toUnit(await this.textPipe(text), this.dim);
  }

  async encodeClassToken(name: string): Promise<Float32Array> {
    // checkpoint token-embedding matrices are not exposed through the
    // pipeline API; the bare name's text feature stands in, same width
    return this.encodeText(name);
  }
}

export async function loadEncoder(model: string): Promise<FeatureEncoder> {
  if (model.startsWith("mock:")) {
    return new MockEncoder(Number(model.slice("mock:".length)));
  }
  if (model === "mock") {
    return new MockEncoder();
  }
  if (model.startsWith("clip:")) {
    return ClipEncoder.load(model.slice("clip:".length));
  }
  throw new Error(`unknown model ${JSON.stringify(model)}; expected mock[:dim] or clip:<model-id>`);
}
