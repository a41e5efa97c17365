/**
 * CLI: export-features, export-class-emb, export-desc.
 * Exit codes mirror the engine: 0 success, 2 usage error, 1 data error.
 */

import { parseArgs } from "node:util";
import { readFileSync } from "node:fs";
import { resolve } from "node:path";
import { fileURLToPath } from "node:url";

import { loadEncoder } from "./encoder.js";
import { exportClassEmbeddings, exportDescriptions, exportFeatures } from "./export.js";

const USAGE = `usage:
  ctxood-export export-features --input <dir|manifest> --model <mock[:dim]|clip:id> --out <file.ctxf>
  ctxood-export export-class-emb --names <a,b,c> | --names-file <file> --model <...> --out <file.ctxe>
                                 [--template "a photo of a {}" --template-out <file.ctxe>]
  ctxood-export export-desc --descriptions <file.json> --model <...> --out-desc <file.ctxf> --out-perturbed <file.ctxf>`;

class UsageError extends Error {}

function parse(
  argv: string[],
  options: Record<string, { type: "string" | "boolean" }>,
  required: string[],
): Record<string, string> {
  let values: Record<string, unknown>;
  try {
    ({ values } = parseArgs({ args: argv, options, allowPositionals: false }));
  } catch (err) {
    throw new UsageError((err as Error).message);
  }
  for (const key of required) {
    if (values[key] === undefined) {
      throw new UsageError(`missing required flag --${key}`);
    }
  }
  return values as Record<string, string>;
}

async function cmdExportFeatures(argv: string[]): Promise<number> {
  const args = parse(
    argv,
    { input: { type: "string" }, model: { type: "string" }, out: { type: "string" } },
    ["input", "model", "out"],
  );
  const encoder = await loadEncoder(args.model);
  const summary = await exportFeatures(args.input, encoder, args.out);
  console.log(
    `wrote ${summary.rows} rows (dim ${summary.dim}) to ${summary.out}` +
      (summary.skipped ? `; skipped ${summary.skipped} unreadable inputs` : ""),
  );
  return 0;
}

async function cmdExportClassEmb(argv: string[]): Promise<number> {
  const args = parse(
    argv,
    {
      names: { type: "string" },
      "names-file": { type: "string" },
      model: { type: "string" },
      out: { type: "string" },
      template: { type: "string" },
      "template-out": { type: "string" },
    },
    ["model", "out"],
  );
  let names: string[];
  if (args["names-file"] !== undefined) {
    names = readFileSync(args["names-file"], "utf-8")
      .split("\n")
      .map((l) => l.trim())
      .filter((l) => l.length > 0);
  } else if (args.names !== undefined) {
    names = args.names.split(",").map((n) => n.trim());
  } else {
    throw new UsageError("one of --names or --names-file is required");
  }
  if (names.length === 0 || names.some((n) => n.length === 0)) {
    throw new UsageError("class name list is empty or contains blank names");
  }
  if ((args.template === undefined) !== (args["template-out"] === undefined)) {
    throw new UsageError("--template and --template-out must be given together");
  }
  const encoder = await loadEncoder(args.model);
  const summary = await exportClassEmbeddings(names, encoder, args.out, args.template, args["template-out"]);
  console.log(`wrote ${summary.rows} class embeddings (dim ${summary.dim}) to ${summary.out}`);
  return 0;
}

async function cmdExportDesc(argv: string[]): Promise<number> {
  const args = parse(
    argv,
    {
      descriptions: { type: "string" },
      model: { type: "string" },
      "out-desc": { type: "string" },
      "out-perturbed": { type: "string" },
    },
    ["descriptions", "model", "out-desc", "out-perturbed"],
  );
  const encoder = await loadEncoder(args.model);
  const summary = await exportDescriptions(args.descriptions, encoder, args["out-desc"], args["out-perturbed"]);
  console.log(
    `wrote ${summary.rows} descriptions (+${summary.variantsPerClass} variants each) to ` +
      `${args["out-desc"]} and ${args["out-perturbed"]}`,
  );
  return 0;
}

export async function cli(argv: string[]): Promise<number> {
  const [command, ...rest] = argv;
  try {
    switch (command) {
      case "export-features":
        return await cmdExportFeatures(rest);
      case "export-class-emb":
        return await cmdExportClassEmb(rest);
      case "export-desc":
        return await cmdExportDesc(rest);
      case undefined:
      case "--help":
      case "-h":
        console.log(USAGE);
        return command === undefined ? 2 : 0;
      default:
        console.error(`unknown subcommand ${JSON.stringify(command)}\n${USAGE}`);
        return 2;
    }
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`error: ${err.message}\n${USAGE}`);
      return 2;
    }
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined && resolve(process.argv[1]) === fileURLToPath(import.meta.url);
if (invokedDirectly) {
  cli(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
