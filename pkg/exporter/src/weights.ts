/** Encoder parameter storage. Weights live in one flat float32 vector with a
 * fixed layout; they come either from a seeded generator (the self-contained
 * default) or from a weight-pack file supplied by the user. */

import * as fs from "node:fs";
import { EncoderConfig, paramCount, patchDim } from "./encoder.js";
import { fnv1a, mulberry32, uniformArray } from "./rng.js";

export const SEEDED_VARIANT = "seeded-lowrank-v1";
export const WEIGHT_MAGIC = "APFW";
export const WEIGHT_VERSION = 1;

export class MissingWeightsError extends Error {}
export class WeightFormatError extends Error {}

/** Deterministic weights derived from the variant name. Each slice is drawn
 * uniform in ±sqrt(3/fanIn) from a single seeded stream, so the full vector is
 * a pure function of (variant, config). */
export function buildSeededWeights(cfg: EncoderConfig, variant: string): Float32Array {
  const rand = mulberry32(fnv1a(variant));
  const parts: Float32Array[] = [];
  const dim = patchDim(cfg);
  parts.push(uniformArray(dim * cfg.embedRank, Math.sqrt(3 / dim), rand));
  parts.push(uniformArray(cfg.embedRank * cfg.tokenChannels, Math.sqrt(3 / cfg.embedRank), rand));
  parts.push(uniformArray(cfg.tokenChannels, 0.05, rand));
  for (let b = 0; b < cfg.blocks; b++) {
    parts.push(uniformArray(cfg.tokenChannels * cfg.blockRank, Math.sqrt(3 / cfg.tokenChannels), rand));
    parts.push(uniformArray(cfg.blockRank * cfg.tokenChannels, Math.sqrt(3 / cfg.blockRank), rand));
  }
  parts.push(uniformArray(cfg.tokenChannels * cfg.neckRank, Math.sqrt(3 / cfg.tokenChannels), rand));
  parts.push(uniformArray(cfg.neckRank * cfg.outputChannels, Math.sqrt(3 / cfg.neckRank), rand));
  parts.push(uniformArray(cfg.outputChannels, 0.05, rand));

  const flat = new Float32Array(paramCount(cfg));
  let at = 0;
  for (const p of parts) {
    flat.set(p, at);
    at += p.length;
  }
  if (at !== flat.length) {
    throw new Error(`weight layout mismatch: filled ${at} of ${flat.length}`);
  }
  return flat;
}

/** Writes a weight pack: magic, u32 version, u32 count, float32 LE payload. */
export function writeWeightFile(path: string, weights: Float32Array): void {
  const header = Buffer.alloc(12);
  header.write(WEIGHT_MAGIC, 0, "ascii");
  header.writeUInt32LE(WEIGHT_VERSION, 4);
  header.writeUInt32LE(weights.length, 8);
  const payload = Buffer.alloc(4 * weights.length);
  for (let i = 0; i < weights.length; i++) {
    payload.writeFloatLE(weights[i], 4 * i);
  }
  fs.writeFileSync(path, Buffer.concat([header, payload]));
}

/** Reads a weight pack and checks it matches the configured parameter count. */
export function loadWeightFile(path: string, expectedCount: number): Float32Array {
  const raw = fs.readFileSync(path);
  if (raw.length < 12 || raw.toString("ascii", 0, 4) !== WEIGHT_MAGIC) {
    throw new WeightFormatError(`${path}: not a weight pack (bad magic)`);
  }
  const version = raw.readUInt32LE(4);
  if (version !== WEIGHT_VERSION) {
    throw new WeightFormatError(`${path}: unsupported weight pack version ${version}`);
  }
  const count = raw.readUInt32LE(8);
  if (count !== expectedCount) {
    throw new WeightFormatError(
      `${path}: weight pack holds ${count} values, encoder config needs ${expectedCount}`,
    );
  }
  if (raw.length !== 12 + 4 * count) {
    throw new WeightFormatError(`${path}: payload size does not match declared count ${count}`);
  }
  const weights = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    weights[i] = raw.readFloatLE(12 + 4 * i);
  }
  return weights;
}

/** Resolves a --variant string to a weight vector.
 *
 * "seeded-lowrank-v1"    — generated in-process, nothing to download.
 * "pretrained:<path>"    — weight pack file; a missing file raises
 *                          MissingWeightsError with instructions.
 */
export function resolveWeights(cfg: EncoderConfig, variant: string): Float32Array {
  if (variant === SEEDED_VARIANT) {
    return buildSeededWeights(cfg, variant);
  }
  if (variant.startsWith("pretrained:")) {
    const path = variant.slice("pretrained:".length);
    if (!path) {
      throw new MissingWeightsError("pretrained variant needs a path: --variant pretrained:/path/to/pack.apfw");
    }
    if (!fs.existsSync(path)) {
      throw new MissingWeightsError(
        `weight pack not found: ${path}\n`
        + "Pretrained foundation-encoder weights are not bundled with this tool.\n"
        + "Download a weight pack (.apfw) from your model registry, place it at the\n"
        + `path above (or anywhere), and re-run with --variant pretrained:<path>.\n`
        + `Alternatively use --variant ${SEEDED_VARIANT} for self-contained seeded weights.`,
      );
    }
    return loadWeightFile(path, paramCount(cfg));
  }
  throw new MissingWeightsError(
    `unknown encoder variant ${JSON.stringify(variant)}; use ${SEEDED_VARIANT} or pretrained:<path>`,
  );
}
