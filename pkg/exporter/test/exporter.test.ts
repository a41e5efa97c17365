import { execFileSync } from "node:child_process";
import { mkdirSync, mkdtempSync, readFileSync, symlinkSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { beforeAll, describe, expect, it } from "vitest";

import { MockEncoder, loadEncoder } from "../src/encoder.js";
import { exportClassEmbeddings, exportDescriptions, exportFeatures } from "../src/export.js";
import { AUX_MAGIC, UNLABELED, maxNormDeviation, readFeatureFile } from "../src/format.js";
import { cli } from "../src/cli.js";

function tempDir(): string {
  return mkdtempSync(join(tmpdir(), "ctxood-exp-"));
}

/** Fake image tree: 3 categories x 3 files plus one loose unlabeled file. */
function makeImageTree(root: string): void {
  const classes = ["apple", "cat", "dog"];
  classes.forEach((cls, c) => {
    mkdirSync(join(root, cls), { recursive: true });
    for (let i = 0; i < 3; i++) {
      writeFileSync(join(root, cls, `img_${i}.bin`), Buffer.from(`payload ${cls} ${c} ${i}`));
    }
  });
  writeFileSync(join(root, "stray.bin"), Buffer.from("unlabeled payload"));
}

describe("mock encoder", () => {
  it("is deterministic and unit-norm", async () => {
    const enc = new MockEncoder(64);
    const a = await enc.encodeImage(Buffer.from("hello"));
    const b = await enc.encodeImage(Buffer.from("hello"));
    const c = await enc.encodeImage(Buffer.from("other"));
    expect(Array.from(a)).toEqual(Array.from(b));
    expect(Array.from(a)).not.toEqual(Array.from(c));
    let sq = 0;
    for (const v of a) sq += v * v;
    expect(Math.abs(Math.sqrt(sq) - 1)).toBeLessThan(1e-6);
  });

  it("defaults to the checkpoint embedding width", async () => {
    const enc = await loadEncoder("mock");
    expect(enc.dim).toBe(512);
    expect((await enc.encodeText("a")).length).toBe(512);
  });

  it("rejects unknown model ids", async () => {
    await expect(loadEncoder("vit-b16")).rejects.toThrow(/unknown model/);
  });
});

describe("export-features", () => {
  it("writes one row per readable image with directory labels", async () => {
    const root = tempDir();
    makeImageTree(root);
    const out = join(root, "feats.ctxf");
    const summary = await exportFeatures(root, new MockEncoder(32), out);
    expect(summary.rows).toBe(10);
    const set = readFeatureFile(out);
    expect(set.dim).toBe(32);
    expect(set.numCategories).toBe(3);
    expect(Array.from(set.labels)).toEqual([0, 0, 0, 1, 1, 1, 2, 2, 2, UNLABELED]);
    expect(maxNormDeviation(set)).toBeLessThan(1e-3);
  });

  it("re-exports byte-identically", async () => {
    const root = tempDir();
    const images = join(root, "images");
    mkdirSync(images);
    makeImageTree(images);
    const a = join(root, "a.ctxf");
    const b = join(root, "b.ctxf");
    await exportFeatures(images, new MockEncoder(48), a);
    await exportFeatures(images, new MockEncoder(48), b);
    expect(readFileSync(a).equals(readFileSync(b))).toBe(true);
  });

  it("skips unreadable entries with a count", async () => {
    const root = tempDir();
    makeImageTree(root);
    symlinkSync(join(root, "missing-target"), join(root, "apple", "broken.bin"));
    const summary = await exportFeatures(root, new MockEncoder(16), join(root, "f.ctxf"));
    expect(summary.skipped).toBe(1);
    expect(summary.rows).toBe(10);
  });

  it("supports manifest files with explicit labels", async () => {
    const root = tempDir();
    makeImageTree(root);
    const manifest = join(root, "list.txt");
    writeFileSync(
      manifest,
      ["# manifest", `${join(root, "apple", "img_0.bin")} 1`, `${join(root, "stray.bin")}`].join("\n"),
    );
    await exportFeatures(manifest, new MockEncoder(16), join(root, "m.ctxf"));
    const set = readFeatureFile(join(root, "m.ctxf"));
    expect(set.numCategories).toBe(2);
    expect(Array.from(set.labels)).toEqual([1, UNLABELED]);
  });
});

describe("export-class-emb", () => {
  it("keeps duplicates and order", async () => {
    const root = tempDir();
    const out = join(root, "cls.ctxe");
    await exportClassEmbeddings(["cat", "dog", "cat"], new MockEncoder(24), out);
    const set = readFeatureFile(out, AUX_MAGIC);
    expect(set.labels.length).toBe(3);
    const row = (i: number) => Array.from(set.features.slice(i * 24, (i + 1) * 24));
    expect(row(0)).toEqual(row(2));
    expect(row(0)).not.toEqual(row(1));
  });

  it("rejects an empty name list", async () => {
    await expect(exportClassEmbeddings([], new MockEncoder(8), "unused.ctxe")).rejects.toThrow(
      /at least one/,
    );
  });

  it("writes template text features alongside", async () => {
    const root = tempDir();
    const out = join(root, "cls.ctxe");
    const tmplOut = join(root, "tmpl.ctxe");
    await exportClassEmbeddings(["cat", "dog"], new MockEncoder(24), out, "a photo of a {}", tmplOut);
    const tokens = readFeatureFile(out, AUX_MAGIC);
    const texts = readFeatureFile(tmplOut, AUX_MAGIC);
    expect(tokens.labels.length).toBe(2);
    expect(texts.labels.length).toBe(2);
    expect(maxNormDeviation(texts)).toBeLessThan(1e-3);
  });
});

describe("export-desc", () => {
  function writeDescriptions(root: string): string {
    const path = join(root, "desc.json");
    writeFileSync(
      path,
      JSON.stringify([
        { name: "goldfish", description: "a yellow fish", variants: ["a [MASK] fish", "a yellow [MASK]"] },
        { name: "panther", description: "a big dark cat", variants: ["a [MASK] dark cat", "a big [MASK] cat"] },
      ]),
    );
    return path;
  }

  it("writes one description row and K variant rows per class", async () => {
    const root = tempDir();
    const descPath = writeDescriptions(root);
    const outDesc = join(root, "d.ctxf");
    const outPert = join(root, "p.ctxf");
    const summary = await exportDescriptions(descPath, new MockEncoder(16), outDesc, outPert);
    expect(summary.variantsPerClass).toBe(2);
    const desc = readFeatureFile(outDesc);
    const pert = readFeatureFile(outPert);
    expect(Array.from(desc.labels)).toEqual([0, 1]);
    expect(Array.from(pert.labels)).toEqual([0, 0, 1, 1]);
    expect(maxNormDeviation(desc)).toBeLessThan(1e-3);
    expect(maxNormDeviation(pert)).toBeLessThan(1e-3);
  });

  it("identical description and variant produce identical rows", async () => {
    const root = tempDir();
    const path = join(root, "desc.json");
    writeFileSync(path, JSON.stringify([{ name: "x", description: "same text", variants: ["same text"] }]));
    const outDesc = join(root, "d.ctxf");
    const outPert = join(root, "p.ctxf");
    await exportDescriptions(path, new MockEncoder(16), outDesc, outPert);
    const d = readFeatureFile(outDesc);
    const p = readFeatureFile(outPert);
    expect(Array.from(d.features)).toEqual(Array.from(p.features));
  });

  it("rejects ragged variant counts", async () => {
    const root = tempDir();
    const path = join(root, "desc.json");
    writeFileSync(
      path,
      JSON.stringify([
        { name: "a", description: "d", variants: ["v1"] },
        { name: "b", description: "d", variants: ["v1", "v2"] },
      ]),
    );
    await expect(
      exportDescriptions(path, new MockEncoder(8), join(root, "d.ctxf"), join(root, "p.ctxf")),
    ).rejects.toThrow(/variant count/);
  });
});

describe("cli", () => {
  it("exports via the command surface", async () => {
    const root = tempDir();
    makeImageTree(root);
    const out = join(root, "cli.ctxf");
    const code = await cli(["export-features", "--input", root, "--model", "mock:32", "--out", out]);
    expect(code).toBe(0);
    expect(readFeatureFile(out).labels.length).toBe(10);
  });

  it("returns 2 on usage errors", async () => {
    expect(await cli(["export-features", "--model", "mock:8"])).toBe(2);
    expect(await cli(["export-class-emb", "--model", "mock:8", "--out", "x.ctxe"])).toBe(2);
    expect(await cli(["frobnicate"])).toBe(2);
  });

  it("returns 1 on data errors", async () => {
    const root = tempDir();
    expect(
      await cli(["export-features", "--input", join(root, "missing"), "--model", "mock:8", "--out", join(root, "o.ctxf")]),
    ).toBe(1);
  });
});

describe("primary-engine conformance", () => {
  let pythonAvailable = false;

  beforeAll(() => {
    try {
      execFileSync("python3", ["-c", "import ctxood"], { stdio: "pipe" });
      pythonAvailable = true;
    } catch {
      pythonAvailable = false;
    }
  });

  const VALIDATE = `
import sys
from ctxood.io_formats import read_features_with_stats, FEATURE_MAGIC, AUX_MAGIC
path, kind = sys.argv[1], sys.argv[2]
magic = FEATURE_MAGIC if kind == "ctxf" else AUX_MAGIC
fset, deviation = read_features_with_stats(path, magic)
assert deviation <= 1e-3, f"norm deviation {deviation}"
print(f"ok n={fset.n} dim={fset.dim} c={fset.num_categories} dev={deviation:.2e}")
`;

  function validate(path: string, kind: "ctxf" | "ctxe"): string {
    return execFileSync("python3", ["-c", VALIDATE, path, kind], { encoding: "utf-8" });
  }

  it("exported files pass the engine's readers", async () => {
    if (!pythonAvailable) {
      console.warn("python3/ctxood not importable; skipping conformance check");
      return;
    }
    const root = tempDir();
    makeImageTree(root);
    const feats = join(root, "feats.ctxf");
    await exportFeatures(root, new MockEncoder(32), feats);
    expect(validate(feats, "ctxf")).toContain("ok n=10 dim=32 c=3");

    const cls = join(root, "cls.ctxe");
    await exportClassEmbeddings(["a", "b", "c"], new MockEncoder(64), cls);
    expect(validate(cls, "ctxe")).toContain("ok n=3 dim=64 c=3");

    const descJson = join(root, "desc.json");
    writeFileSync(
      descJson,
      JSON.stringify([
        { name: "goldfish", description: "a yellow fish", variants: ["a [MASK] fish", "a [MASK] [MASK]"] },
        { name: "panther", description: "a big dark cat", variants: ["a [MASK] cat", "a big [MASK]"] },
      ]),
    );
    const outDesc = join(root, "d.ctxf");
    const outPert = join(root, "p.ctxf");
    await exportDescriptions(descJson, new MockEncoder(32), outDesc, outPert);
    expect(validate(outDesc, "ctxf")).toContain("ok n=2 dim=32 c=2");
    expect(validate(outPert, "ctxf")).toContain("ok n=4 dim=32 c=2");
  });

  it("the engine's zero-shot pipeline consumes exporter output end-to-end", async () => {
    if (!pythonAvailable) {
      console.warn("python3/ctxood not importable; skipping pipeline check");
      return;
    }
    const root = tempDir();
    const descJson = join(root, "desc.json");
    writeFileSync(
      descJson,
      JSON.stringify([
        { name: "goldfish", description: "a yellow fish", variants: ["a [MASK] fish"] },
        { name: "panther", description: "a big dark cat", variants: ["a [MASK] cat"] },
      ]),
    );
    const outDesc = join(root, "d.ctxf");
    const outPert = join(root, "p.ctxf");
    const enc = new MockEncoder(32);
    await exportDescriptions(descJson, enc, outDesc, outPert);
    // "samples": text features of the descriptions themselves, labeled
    const root2 = join(root, "samples");
    mkdirSync(join(root2, "goldfish"), { recursive: true });
    mkdirSync(join(root2, "panther"), { recursive: true });
    writeFileSync(join(root2, "goldfish", "s.bin"), Buffer.from("gold sample"));
    writeFileSync(join(root2, "panther", "s.bin"), Buffer.from("panther sample"));
    const samples = join(root, "x.ctxf");
    await exportFeatures(root2, enc, samples);
    const report = join(root, "zs.json");
    const out = execFileSync(
      "python3",
      [
        "-m",
        "ctxood.cli",
        "zero-shot",
        "--descriptions",
        outDesc,
        "--perturbed",
        outPert,
        "--features",
        samples,
        "--report",
        report,
      ],
      { encoding: "utf-8" },
    );
    expect(out).toContain("wrote report");
    const payload = JSON.parse(readFileSync(report, "utf-8"));
    expect(payload.num_categories).toBe(2);
    expect(payload.num_samples).toBe(2);
  });
});
