/**
 * The three export operations. Each is a pure function of its inputs and the
 * encoder, writes a CTXF/CTXE file, and returns a small summary.
 */

import { readFileSync } from "node:fs";

import { listImages, readDescriptions } from "./dataset.js";
import { FeatureEncoder } from "./encoder.js";
import { AUX_MAGIC, FEATURE_MAGIC, FeatureSet, UNLABELED, stackRows, writeFeatureFile } from "./format.js";

export interface ExportSummary {
  rows: number;
  dim: number;
  skipped: number;
  out: string;
}

export async function exportFeatures(
  input: string,
  encoder: FeatureEncoder,
  out: string,
): Promise<ExportSummary> {
  const listing = listImages(input);
  const rows: Float32Array[] = [];
  const labels: number[] = [];
  let skipped = 0;
  for (const entry of listing.entries) {
    let data: Buffer;
    try {
      data = readFileSync(entry.path);
    } catch {
      skipped += 1;
      continue;
    }
    rows.push(await encoder.encodeImage(data));
    labels.push(entry.label);
  }
  const set: FeatureSet = {
    dim: encoder.dim,
    numCategories: listing.numCategories,
    features: stackRows(rows, encoder.dim),
    labels: Uint32Array.from(labels),
  };
  writeFeatureFile(out, set, FEATURE_MAGIC);
  return { rows: rows.length, dim: encoder.dim, skipped, out };
}

export async function exportClassEmbeddings(
  classNames: string[],
  encoder: FeatureEncoder,
  out: string,
  template?: string,
  templateOut?: string,
): Promise<ExportSummary> {
  if (classNames.length === 0) {
    throw new Error("need at least one class name");
  }
  const tokenRows: Float32Array[] = [];
  for (const name of classNames) {
    tokenRows.push(await encoder.encodeClassToken(name));
  }
  const labels = Uint32Array.from(classNames.map((_, i) => i));
  writeFeatureFile(
    out,
    {
      dim: encoder.tokenDim,
      numCategories: classNames.length,
      features: stackRows(tokenRows, encoder.tokenDim),
      labels,
    },
    AUX_MAGIC,
  );
  if (template !== undefined && templateOut !== undefined) {
    const textRows: Float32Array[] = [];
    for (const name of classNames) {
      textRows.push(await encoder.encodeText(template.replace("{}", name)));
    }
    writeFeatureFile(
      templateOut,
      {
        dim: encoder.dim,
        numCategories: classNames.length,
        features: stackRows(textRows, encoder.dim),
        labels,
      },
      AUX_MAGIC,
    );
  }
  return { rows: classNames.length, dim: encoder.tokenDim, skipped: 0, out };
}

export async function exportDescriptions(
  descriptionsPath: string,
  encoder: FeatureEncoder,
  outDescriptions: string,
  outPerturbed: string,
): Promise<ExportSummary & { variantsPerClass: number }> {
  const entries = readDescriptions(descriptionsPath);
  const c = entries.length;
  const k = entries[0].variants.length;

  const descRows: Float32Array[] = [];
  for (const e of entries) {
    descRows.push(await encoder.encodeText(e.description));
  }
  writeFeatureFile(
    outDescriptions,
    {
      dim: encoder.dim,
      numCategories: c,
      features: stackRows(descRows, encoder.dim),
      labels: Uint32Array.from(entries.map((_, i) => i)),
    },
    FEATURE_MAGIC,
  );

  const pertRows: Float32Array[] = [];
  const pertLabels: number[] = [];
  for (let i = 0; i < c; i++) {
    for (const variant of entries[i].variants) {
      pertRows.push(await encoder.encodeText(variant));
      pertLabels.push(i);
    }
  }
  writeFeatureFile(
    outPerturbed,
    {
      dim: encoder.dim,
      numCategories: c,
      features: stackRows(pertRows, encoder.dim),
      labels: Uint32Array.from(pertLabels),
    },
    FEATURE_MAGIC,
  );
  return { rows: c, dim: encoder.dim, skipped: 0, out: outDescriptions, variantsPerClass: k };
}

export { UNLABELED };
