#!/usr/bin/env node
/** Command line entry point.
 *
 *   apfe-export export --images DIR --out DIR [--taps 5,8,final] [--variant NAME]
 *
 * Exit codes: 0 success; 1 finished but at least one image was skipped as
 * unreadable; 2 usage or argument error; 3 encoder weights unavailable.
 */

import { parseArgs } from "node:util";
import { pathToFileURL } from "node:url";
import * as fs from "node:fs";
import { DEFAULT_CONFIG, TapSpec } from "./encoder.js";
import { exportImages } from "./export.js";
import { MissingWeightsError, SEEDED_VARIANT, WeightFormatError } from "./weights.js";

export const EXIT_OK = 0;
export const EXIT_SKIPPED = 1;
export const EXIT_USAGE = 2;
export const EXIT_NO_WEIGHTS = 3;

export class UsageError extends Error {}

const USAGE = `usage: apfe-export export --images DIR --out DIR [options]

Runs the frozen image encoder over every netpbm image (.ppm/.pgm/.pnm) in
--images and writes one .apfe v1 feature file per image plus manifest.json
into --out.

options:
  --images DIR     directory of input images (required)
  --out DIR        output directory, created if missing (required)
  --taps SPEC      feature taps as "M1,M2,final" with 1 <= M1 < M2 <= ${DEFAULT_CONFIG.blocks}
                   (default "5,8,final")
  --variant NAME   "${SEEDED_VARIANT}" (default, self-contained) or
                   "pretrained:PATH" pointing at a .apfw weight pack
`;

/** Parses "5,8,final": two increasing 1-based block indices plus the literal
 * marker for the projected final level. */
export function parseTaps(text: string, blocks: number): TapSpec {
  const parts = text.split(",").map((p) => p.trim());
  if (parts.length !== 3 || parts[2] !== "final") {
    throw new UsageError(`--taps must look like "5,8,final", got ${JSON.stringify(text)}`);
  }
  const nums = parts.slice(0, 2).map((p) => {
    if (!/^\d+$/.test(p)) {
      throw new UsageError(`tap ${JSON.stringify(p)} is not a block index`);
    }
    return parseInt(p, 10);
  });
  const [mid1, mid2] = nums;
  if (mid1 < 1 || mid2 > blocks || mid1 >= mid2) {
    throw new UsageError(`taps ${mid1},${mid2} must satisfy 1 <= first < second <= ${blocks}`);
  }
  return { mid1, mid2 };
}

function runExport(args: string[]): number {
  const { values } = parseArgs({
    args,
    options: {
      images: { type: "string" },
      out: { type: "string" },
      taps: { type: "string", default: "5,8,final" },
      variant: { type: "string", default: SEEDED_VARIANT },
    },
    allowPositionals: false,
  });
  if (!values.images || !values.out) {
    throw new UsageError("--images and --out are both required");
  }
  if (!fs.existsSync(values.images) || !fs.statSync(values.images).isDirectory()) {
    throw new UsageError(`--images ${values.images} is not a directory`);
  }
  const taps = parseTaps(values.taps!, DEFAULT_CONFIG.blocks);
  const result = exportImages({
    imagesDir: values.images,
    outDir: values.out,
    variant: values.variant!,
    taps,
    log: (msg) => console.error(msg),
  });
  console.error(
    `wrote ${result.manifest.images.length} feature file(s) and ${result.manifestPath}`
    + (result.skippedCount ? `; skipped ${result.skippedCount} unreadable input(s)` : ""),
  );
  return result.skippedCount > 0 ? EXIT_SKIPPED : EXIT_OK;
}

/** Returns the process exit code instead of exiting, so tests can call it. */
export function main(argv: string[]): number {
  try {
    if (argv.length === 0 || argv[0] === "--help" || argv[0] === "-h") {
      console.error(USAGE);
      return argv.length === 0 ? EXIT_USAGE : EXIT_OK;
    }
    if (argv[0] !== "export") {
      throw new UsageError(`unknown command ${JSON.stringify(argv[0])}; only "export" is supported`);
    }
    return runExport(argv.slice(1));
  } catch (err) {
    if (err instanceof MissingWeightsError) {
      console.error(`error: ${err.message}`);
      return EXIT_NO_WEIGHTS;
    }
    if (err instanceof UsageError || err instanceof WeightFormatError) {
      console.error(`error: ${err.message}`);
      console.error(USAGE);
      return EXIT_USAGE;
    }
    if (err instanceof Error && (err as NodeJS.ErrnoException).code === "ERR_PARSE_ARGS_UNKNOWN_OPTION") {
      console.error(`error: ${err.message}`);
      console.error(USAGE);
      return EXIT_USAGE;
    }
    throw err;
  }
}

if (process.argv[1] && import.meta.url === pathToFileURL(process.argv[1]).href) {
  process.exit(main(process.argv.slice(2)));
}
