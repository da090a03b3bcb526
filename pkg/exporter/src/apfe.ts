/** Writer for .apfe v1 multi-level feature files.
 *
 * Layout (all integers little-endian u32):
 *   "APFE" | version=1 | imageId (u32 byte length + utf-8)
 *   | levelCount=3 | per level: id, channels, height, width
 *   | float32 LE payloads, channel-major, in level order.
 */

import { createHash } from "node:crypto";
import { LevelFeatures } from "./encoder.js";

export const APFE_MAGIC = "APFE";
export const APFE_VERSION = 1;
export const LEVEL_IDS = [1, 2, 3] as const;

export function sha256Hex(bytes: Uint8Array): string {
  return createHash("sha256").update(bytes).digest("hex");
}

/** Serializes one level's data as its on-disk float32 LE payload. */
export function levelPayload(level: LevelFeatures): Buffer {
  const n = level.channels * level.height * level.width;
  if (level.data.length !== n) {
    throw new Error(`level data length ${level.data.length} does not match shape ${level.channels}x${level.height}x${level.width}`);
  }
  const buf = Buffer.alloc(4 * n);
  for (let i = 0; i < n; i++) {
    buf.writeFloatLE(level.data[i], 4 * i);
  }
  return buf;
}

/** Hex sha256 of a level's payload bytes, as stored in the file. */
export function levelSha256(level: LevelFeatures): string {
  return sha256Hex(levelPayload(level));
}

/** Builds the complete v1 file for exactly three levels. */
export function encodeApfe(imageId: string, levels: LevelFeatures[]): Buffer {
  if (levels.length !== LEVEL_IDS.length) {
    throw new Error(`expected ${LEVEL_IDS.length} levels, got ${levels.length}`);
  }
  const idBytes = Buffer.from(imageId, "utf-8");
  const header = Buffer.alloc(4 + 4 + 4 + idBytes.length + 4 + 16 * levels.length);
  let at = 0;
  header.write(APFE_MAGIC, at, "ascii"); at += 4;
  header.writeUInt32LE(APFE_VERSION, at); at += 4;
  header.writeUInt32LE(idBytes.length, at); at += 4;
  idBytes.copy(header, at); at += idBytes.length;
  header.writeUInt32LE(levels.length, at); at += 4;
  for (let i = 0; i < levels.length; i++) {
    const lv = levels[i];
    if (lv.channels <= 0 || lv.height <= 0 || lv.width <= 0) {
      throw new Error(`level ${LEVEL_IDS[i]} has empty shape ${lv.channels}x${lv.height}x${lv.width}`);
    }
    header.writeUInt32LE(LEVEL_IDS[i], at); at += 4;
    header.writeUInt32LE(lv.channels, at); at += 4;
    header.writeUInt32LE(lv.height, at); at += 4;
    header.writeUInt32LE(lv.width, at); at += 4;
  }
  return Buffer.concat([header, ...levels.map(levelPayload)]);
}
