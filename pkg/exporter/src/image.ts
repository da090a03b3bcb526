/** Geometry preprocessing: aspect-preserving pad-to-square (pad value 0 on the
 * right/bottom edges), then bilinear resize to the encoder's input size. */

import { RawImage } from "./ppm.js";

export interface PreparedInput {
  /** Planar RGB [3, size, size] in [0, 1]. */
  pixels: Float32Array;
  size: number;
  originalWidth: number;
  originalHeight: number;
  /** Zero-padding applied before the resize, in original pixel units. */
  padRight: number;
  padBottom: number;
}

/** Pads the short side with zeros so the image becomes square. No-op copy for
 * square inputs. */
export function padToSquare(img: RawImage): { image: RawImage; padRight: number; padBottom: number } {
  const side = Math.max(img.width, img.height);
  const padRight = side - img.width;
  const padBottom = side - img.height;
  if (padRight === 0 && padBottom === 0) {
    return { image: img, padRight, padBottom };
  }
  const srcPlane = img.width * img.height;
  const dstPlane = side * side;
  const pixels = new Float32Array(3 * dstPlane);
  for (let c = 0; c < 3; c++) {
    for (let y = 0; y < img.height; y++) {
      const srcRow = c * srcPlane + y * img.width;
      const dstRow = c * dstPlane + y * side;
      for (let x = 0; x < img.width; x++) {
        pixels[dstRow + x] = img.pixels[srcRow + x];
      }
    }
  }
  return { image: { width: side, height: side, pixels }, padRight, padBottom };
}

/** Bilinear resample with half-pixel centers. Resizing to the same size
 * reproduces the input exactly. */
export function bilinearResize(img: RawImage, outWidth: number, outHeight: number): RawImage {
  if (outWidth === img.width && outHeight === img.height) {
    return { width: outWidth, height: outHeight, pixels: img.pixels.slice() };
  }
  const sx = img.width / outWidth;
  const sy = img.height / outHeight;
  const srcPlane = img.width * img.height;
  const dstPlane = outWidth * outHeight;
  const pixels = new Float32Array(3 * dstPlane);
  for (let dy = 0; dy < outHeight; dy++) {
    const fy = Math.min(Math.max((dy + 0.5) * sy - 0.5, 0), img.height - 1);
    const y0 = Math.floor(fy);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const wy = fy - y0;
    for (let dx = 0; dx < outWidth; dx++) {
      const fx = Math.min(Math.max((dx + 0.5) * sx - 0.5, 0), img.width - 1);
      const x0 = Math.floor(fx);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const wx = fx - x0;
      for (let c = 0; c < 3; c++) {
        const base = c * srcPlane;
        const top = img.pixels[base + y0 * img.width + x0] * (1 - wx)
          + img.pixels[base + y0 * img.width + x1] * wx;
        const bot = img.pixels[base + y1 * img.width + x0] * (1 - wx)
          + img.pixels[base + y1 * img.width + x1] * wx;
        pixels[c * dstPlane + dy * outWidth + dx] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return { width: outWidth, height: outHeight, pixels };
}

/** Pad-to-square then resize to `size`, recording the applied padding. */
export function prepareInput(img: RawImage, size: number): PreparedInput {
  const { image: square, padRight, padBottom } = padToSquare(img);
  const resized = bilinearResize(square, size, size);
  return {
    pixels: resized.pixels,
    size,
    originalWidth: img.width,
    originalHeight: img.height,
    padRight,
    padBottom,
  };
}
