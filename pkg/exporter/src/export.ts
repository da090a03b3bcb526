/** Directory export: decode every image, run the encoder, write one .apfe per
 * image plus a manifest. Unreadable images are skipped with a warning and
 * reported in the manifest and the result. */

import * as fs from "node:fs";
import * as path from "node:path";
import { encodeApfe, levelSha256, sha256Hex } from "./apfe.js";
import { DEFAULT_CONFIG, EncoderConfig, TapSpec, encodeImage } from "./encoder.js";
import { prepareInput } from "./image.js";
import { ExportManifest, ManifestImage, SkippedImage, manifestJson } from "./manifest.js";
import { ImageDecodeError, parsePnm } from "./ppm.js";
import { resolveWeights } from "./weights.js";

export const MANIFEST_NAME = "manifest.json";
const IMAGE_EXTENSIONS = new Set([".ppm", ".pgm", ".pnm"]);
/** Filesystem failures that mean "this input, not the tool" — skip and go on. */
const READ_ERROR_CODES = new Set(["ENOENT", "EACCES", "EPERM", "EISDIR", "ELOOP"]);

export interface ExportOptions {
  imagesDir: string;
  outDir: string;
  variant: string;
  taps: TapSpec;
  config?: EncoderConfig;
  /** Progress / warning sink; defaults to silent. */
  log?: (message: string) => void;
}

export interface ExportResult {
  manifest: ExportManifest;
  manifestPath: string;
  /** Number of inputs that could not be decoded. */
  skippedCount: number;
}

/** Sorted netpbm files directly inside the input directory. */
export function listImageFiles(imagesDir: string): string[] {
  const entries = fs.readdirSync(imagesDir, { withFileTypes: true });
  return entries
    .filter((e) => e.isFile() && IMAGE_EXTENSIONS.has(path.extname(e.name).toLowerCase()))
    .map((e) => e.name)
    .sort();
}

function imageIdFor(fileName: string): string {
  return path.basename(fileName, path.extname(fileName));
}

/** Exports every readable image in `imagesDir` and writes the manifest.
 * Throws MissingWeightsError before touching any image if the variant cannot
 * be resolved. */
export function exportImages(opts: ExportOptions): ExportResult {
  const cfg = opts.config ?? DEFAULT_CONFIG;
  const log = opts.log ?? (() => {});
  const weights = resolveWeights(cfg, opts.variant);
  const names = listImageFiles(opts.imagesDir);
  fs.mkdirSync(opts.outDir, { recursive: true });

  const images: ManifestImage[] = [];
  const skipped: SkippedImage[] = [];
  const seenIds = new Set<string>();
  for (const name of names) {
    const source = path.join(opts.imagesDir, name);
    const skip = (reason: string) => {
      log(`warning: skipping ${source}: ${reason}`);
      skipped.push({ source, reason });
    };
    const imageId = imageIdFor(name);
    if (seenIds.has(imageId)) {
      skip(`duplicate image id ${JSON.stringify(imageId)}`);
      continue;
    }
    let decoded;
    try {
      decoded = parsePnm(fs.readFileSync(source));
    } catch (err) {
      const code = (err as NodeJS.ErrnoException).code;
      if (err instanceof ImageDecodeError || READ_ERROR_CODES.has(code ?? "")) {
        skip(err instanceof Error ? err.message : String(err));
        continue;
      }
      throw err;
    }
    seenIds.add(imageId);
    const prepared = prepareInput(decoded, cfg.inputSize);
    const levels = encodeImage(prepared.pixels, prepared.size, cfg, weights, opts.taps);
    const outName = `${imageId}.apfe`;
    const bytes = encodeApfe(imageId, levels);
    fs.writeFileSync(path.join(opts.outDir, outName), bytes);
    images.push({
      source,
      imageId,
      output: outName,
      originalWidth: prepared.originalWidth,
      originalHeight: prepared.originalHeight,
      padRight: prepared.padRight,
      padBottom: prepared.padBottom,
      levels: levels.map((lv, i) => ({
        id: i + 1,
        channels: lv.channels,
        height: lv.height,
        width: lv.width,
        sha256: levelSha256(lv),
      })),
      fileSha256: sha256Hex(bytes),
    });
    log(`exported ${source} -> ${outName}`);
  }

  const manifest: ExportManifest = {
    tool: "apfe-export",
    formatVersion: 1,
    encoderVariant: opts.variant,
    blocks: cfg.blocks,
    taps: { mid1: opts.taps.mid1, mid2: opts.taps.mid2, level3: "final" },
    resize: {
      mode: "pad-to-square",
      padValue: 0,
      target: cfg.inputSize,
      pixelRange: "0..1",
    },
    images,
    skipped,
  };
  const manifestPath = path.join(opts.outDir, MANIFEST_NAME);
  fs.writeFileSync(manifestPath, manifestJson(manifest));
  return { manifest, manifestPath, skippedCount: skipped.length };
}
