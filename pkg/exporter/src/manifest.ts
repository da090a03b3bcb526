/** Export manifest: one JSON document per run recording the encoder variant,
 * tap points, resize policy, and per-image outputs with checksums. */

export interface ManifestLevel {
  id: number;
  channels: number;
  height: number;
  width: number;
  sha256: string;
}

export interface ManifestImage {
  source: string;
  imageId: string;
  /** Output filename relative to the export directory. */
  output: string;
  originalWidth: number;
  originalHeight: number;
  padRight: number;
  padBottom: number;
  levels: ManifestLevel[];
  fileSha256: string;
}

export interface SkippedImage {
  source: string;
  reason: string;
}

export interface ExportManifest {
  tool: string;
  formatVersion: number;
  encoderVariant: string;
  blocks: number;
  taps: { mid1: number; mid2: number; level3: "final" };
  resize: {
    mode: "pad-to-square";
    padValue: number;
    target: number;
    pixelRange: "0..1";
  };
  images: ManifestImage[];
  skipped: SkippedImage[];
}

/** Stable, human-diffable serialization (2-space indent, fixed key order from
 * the object literals above). */
export function manifestJson(manifest: ExportManifest): string {
  return JSON.stringify(manifest, null, 2) + "\n";
}
