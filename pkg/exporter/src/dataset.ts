/**
 * Input resolution for the export commands.
 *
 * Image sources are either a directory whose immediate subdirectories are
 * categories (sorted names define label indices; loose files are unlabeled)
 * or a manifest: a text file of `path[<tab>label]` lines. Description sets
 * are JSON: [{ "name": str, "description": str, "variants": [str, ...] }].
 */

import { readFileSync, readdirSync, statSync } from "node:fs";
import { join, dirname, resolve } from "node:path";

import { UNLABELED } from "./format.js";

export interface ImageEntry {
  path: string;
  label: number; // UNLABELED for uncategorized rows
}

export interface ImageListing {
  entries: ImageEntry[];
  numCategories: number;
}

export function listImages(input: string): ImageListing {
  const st = statSync(input);
  if (st.isDirectory()) {
    return listImageDirectory(input);
  }
  return parseManifest(input);
}

function isDirectory(path: string): boolean {
  try {
    return statSync(path).isDirectory();
  } catch {
    return false; // unreadable entries are attempted and counted as skipped
  }
}

function listImageDirectory(root: string): ImageListing {
  const names = readdirSync(root).sort();
  const subdirs = names.filter((n) => isDirectory(join(root, n)));
  const loose = names.filter((n) => !isDirectory(join(root, n)));
  const entries: ImageEntry[] = [];
  subdirs.forEach((dir, label) => {
    for (const file of readdirSync(join(root, dir)).sort()) {
      const path = join(root, dir, file);
      if (!isDirectory(path)) {
        entries.push({ path, label });
      }
    }
  });
  for (const file of loose) {
    entries.push({ path: join(root, file), label: UNLABELED });
  }
  return { entries, numCategories: subdirs.length };
}

function parseManifest(path: string): ImageListing {
  const base = dirname(resolve(path));
  const entries: ImageEntry[] = [];
  let maxLabel = -1;
  const lines = readFileSync(path, "utf-8").split("\n");
  lines.forEach((raw, i) => {
    const line = raw.trim();
    if (!line || line.startsWith("#")) return;
    const parts = line.split(/\s+/);
    if (parts.length > 2) {
      throw new Error(`${path}:${i + 1}: expected "path [label]", got ${JSON.stringify(raw)}`);
    }
    let label = UNLABELED;
    if (parts.length === 2) {
      label = Number(parts[1]);
      if (!Number.isInteger(label) || label < 0) {
        throw new Error(`${path}:${i + 1}: label must be a non-negative integer`);
      }
      maxLabel = Math.max(maxLabel, label);
    }
    entries.push({ path: resolve(base, parts[0]), label });
  });
  return { entries, numCategories: maxLabel + 1 };
}

export interface DescriptionEntry {
  name: string;
  description: string;
  variants: string[];
}

export function readDescriptions(path: string): DescriptionEntry[] {
  const payload = JSON.parse(readFileSync(path, "utf-8"));
  if (!Array.isArray(payload) || payload.length === 0) {
    throw new Error(`${path}: expected a non-empty JSON array of description entries`);
  }
  const entries: DescriptionEntry[] = payload.map((item, i) => {
    if (typeof item?.name !== "string" || typeof item?.description !== "string") {
      throw new Error(`${path}: entry ${i} needs string "name" and "description"`);
    }
    const variants = item.variants;
    if (!Array.isArray(variants) || variants.some((v: unknown) => typeof v !== "string")) {
      throw new Error(`${path}: entry ${i} needs a "variants" array of strings`);
    }
    return { name: item.name, description: item.description, variants };
  });
  const k = entries[0].variants.length;
  if (k < 1) {
    throw new Error(`${path}: every entry needs at least one variant`);
  }
  for (const e of entries) {
    if (e.variants.length !== k) {
      throw new Error(`${path}: all entries must carry the same variant count (got ${e.variants.length} vs ${k})`);
    }
  }
  return entries;
}
