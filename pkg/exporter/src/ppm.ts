/** Binary netpbm decoding (P6 color, P5 grayscale) and a small P6 writer used
 * to build fixtures. Raster values are scaled by maxval into [0, 1] floats in
 * planar layout, which is what the encoder consumes. */

export interface RawImage {
  width: number;
  height: number;
  /** Planar RGB in [0, 1]: plane 0 = R, 1 = G, 2 = B, each height*width row-major. */
  pixels: Float32Array;
}

export class ImageDecodeError extends Error {}

const WHITESPACE = new Set([0x20, 0x09, 0x0a, 0x0b, 0x0c, 0x0d]);

/** Reads the next whitespace-delimited header token, skipping `#` comments. */
function nextToken(bytes: Uint8Array, pos: number): { token: string; pos: number } {
  let i = pos;
  for (;;) {
    while (i < bytes.length && WHITESPACE.has(bytes[i])) i++;
    if (i < bytes.length && bytes[i] === 0x23) {
      while (i < bytes.length && bytes[i] !== 0x0a) i++;
      continue;
    }
    break;
  }
  const start = i;
  while (i < bytes.length && !WHITESPACE.has(bytes[i]) && bytes[i] !== 0x23) i++;
  if (i === start) {
    throw new ImageDecodeError("truncated header");
  }
  return { token: String.fromCharCode(...bytes.subarray(start, i)), pos: i };
}

function headerInt(bytes: Uint8Array, pos: number, what: string): { value: number; pos: number } {
  const { token, pos: next } = nextToken(bytes, pos);
  if (!/^\d+$/.test(token)) {
    throw new ImageDecodeError(`${what} is not a number: ${JSON.stringify(token)}`);
  }
  return { value: parseInt(token, 10), pos: next };
}

/** Decodes P6 (RGB) or P5 (grayscale, replicated to RGB). Throws ImageDecodeError. */
export function parsePnm(bytes: Uint8Array): RawImage {
  if (bytes.length < 2) {
    throw new ImageDecodeError("file too short for a netpbm header");
  }
  const magic = String.fromCharCode(bytes[0], bytes[1]);
  if (magic !== "P6" && magic !== "P5") {
    throw new ImageDecodeError(`unsupported magic ${JSON.stringify(magic)} (want P6 or P5)`);
  }
  let pos = 2;
  let width: number, height: number, maxval: number;
  ({ value: width, pos } = headerInt(bytes, pos, "width"));
  ({ value: height, pos } = headerInt(bytes, pos, "height"));
  ({ value: maxval, pos } = headerInt(bytes, pos, "maxval"));
  if (width <= 0 || height <= 0) {
    throw new ImageDecodeError(`empty image ${width}x${height}`);
  }
  if (maxval <= 0 || maxval > 65535) {
    throw new ImageDecodeError(`maxval ${maxval} out of range [1, 65535]`);
  }
  if (pos >= bytes.length || !WHITESPACE.has(bytes[pos])) {
    throw new ImageDecodeError("missing whitespace before raster");
  }
  pos += 1;

  const channels = magic === "P6" ? 3 : 1;
  const wide = maxval > 255;
  const sampleBytes = wide ? 2 : 1;
  const count = width * height * channels;
  if (bytes.length - pos < count * sampleBytes) {
    throw new ImageDecodeError(
      `truncated raster: need ${count * sampleBytes} bytes, have ${bytes.length - pos}`,
    );
  }

  const plane = width * height;
  const pixels = new Float32Array(3 * plane);
  const scale = 1 / maxval;
  for (let p = 0; p < plane; p++) {
    for (let c = 0; c < channels; c++) {
      const at = pos + (p * channels + c) * sampleBytes;
      const v = wide ? (bytes[at] << 8) | bytes[at + 1] : bytes[at];
      if (channels === 3) {
        pixels[c * plane + p] = v * scale;
      } else {
        pixels[p] = pixels[plane + p] = pixels[2 * plane + p] = v * scale;
      }
    }
  }
  return { width, height, pixels };
}

/** Writes an 8-bit P6 file from interleaved RGB bytes (length 3*width*height). */
export function encodePpm(width: number, height: number, rgb: Uint8Array): Buffer {
  if (rgb.length !== 3 * width * height) {
    throw new Error(`rgb length ${rgb.length} does not match ${width}x${height}`);
  }
  const header = Buffer.from(`P6\n${width} ${height}\n255\n`, "ascii");
  return Buffer.concat([header, Buffer.from(rgb)]);
}
