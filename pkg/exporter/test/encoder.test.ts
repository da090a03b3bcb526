import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import {
  DEFAULT_CONFIG,
  EncoderConfig,
  encodeImage,
  gridSize,
  paramCount,
  patchDim,
} from "../src/encoder.js";
import { mulberry32 } from "../src/rng.js";
import {
  MissingWeightsError,
  SEEDED_VARIANT,
  WeightFormatError,
  buildSeededWeights,
  loadWeightFile,
  resolveWeights,
  writeWeightFile,
} from "../src/weights.js";

const SMALL: EncoderConfig = {
  inputSize: 64,
  patchSize: 16,
  tokenChannels: 24,
  outputChannels: 12,
  blocks: 6,
  embedRank: 4,
  blockRank: 2,
  neckRank: 3,
};

function randomPixels(size: number, seed: number): Float32Array {
  const rand = mulberry32(seed);
  const out = new Float32Array(3 * size * size);
  for (let i = 0; i < out.length; i++) out[i] = rand();
  return out;
}

describe("parameter layout", () => {
  it("counts the full-scale default exactly", () => {
    expect(patchDim(DEFAULT_CONFIG)).toBe(768);
    expect(paramCount(DEFAULT_CONFIG)).toBe(95232);
  });

  it("seeded weights fill the whole vector", () => {
    const w = buildSeededWeights(SMALL, SEEDED_VARIANT);
    expect(w.length).toBe(paramCount(SMALL));
    expect(w.some((v) => v !== 0)).toBe(true);
  });

  it("different variant names give different weights", () => {
    const a = buildSeededWeights(SMALL, "seeded-lowrank-v1");
    const b = buildSeededWeights(SMALL, "seeded-lowrank-v2");
    expect(a.length).toBe(b.length);
    expect([...a]).not.toEqual([...b]);
  });
});

describe("encodeImage", () => {
  const weights = buildSeededWeights(SMALL, SEEDED_VARIANT);
  const pixels = randomPixels(SMALL.inputSize, 11);

  it("emits the three levels on the patch grid", () => {
    const [f1, f2, f3] = encodeImage(pixels, SMALL.inputSize, SMALL, weights, { mid1: 2, mid2: 4 });
    const grid = gridSize(SMALL, SMALL.inputSize);
    for (const f of [f1, f2]) {
      expect(f.channels).toBe(SMALL.tokenChannels);
      expect(f.height).toBe(grid);
      expect(f.width).toBe(grid);
      expect(f.data.length).toBe(SMALL.tokenChannels * grid * grid);
    }
    expect(f3.channels).toBe(SMALL.outputChannels);
    expect(f3.height).toBe(grid);
    expect(f3.width).toBe(grid);
  });

  it("is deterministic across repeated calls", () => {
    const a = encodeImage(pixels, SMALL.inputSize, SMALL, weights, { mid1: 2, mid2: 4 });
    const b = encodeImage(pixels, SMALL.inputSize, SMALL, weights, { mid1: 2, mid2: 4 });
    for (let i = 0; i < 3; i++) {
      expect(Buffer.from(a[i].data.buffer).equals(Buffer.from(b[i].data.buffer))).toBe(true);
    }
  });

  it("moving a tap changes that level but not the final one", () => {
    const a = encodeImage(pixels, SMALL.inputSize, SMALL, weights, { mid1: 2, mid2: 4 });
    const b = encodeImage(pixels, SMALL.inputSize, SMALL, weights, { mid1: 3, mid2: 4 });
    expect([...a[0].data]).not.toEqual([...b[0].data]);
    expect([...a[1].data]).toEqual([...b[1].data]);
    expect([...a[2].data]).toEqual([...b[2].data]);
  });

  it("stays finite on an all-zero image", () => {
    const zero = new Float32Array(3 * SMALL.inputSize * SMALL.inputSize);
    const levels = encodeImage(zero, SMALL.inputSize, SMALL, weights, { mid1: 1, mid2: 2 });
    for (const f of levels) {
      expect(f.data.every((v) => Number.isFinite(v))).toBe(true);
    }
  });

  it("bounds the final level by the squashing nonlinearity", () => {
    const [, , f3] = encodeImage(pixels, SMALL.inputSize, SMALL, weights, { mid1: 2, mid2: 4 });
    expect(f3.data.every((v) => v > -1 && v < 1)).toBe(true);
  });

  it("validates taps and buffer sizes", () => {
    expect(() => encodeImage(pixels, SMALL.inputSize, SMALL, weights, { mid1: 4, mid2: 2 })).toThrow(/increasing/);
    expect(() => encodeImage(pixels, SMALL.inputSize, SMALL, weights, { mid1: 0, mid2: 2 })).toThrow(/block range/);
    expect(() => encodeImage(pixels, SMALL.inputSize, SMALL, weights, { mid1: 1, mid2: 99 })).toThrow(/block range/);
    expect(() => encodeImage(pixels.subarray(1), SMALL.inputSize, SMALL, weights)).toThrow(/buffer length/);
    expect(() => encodeImage(pixels, 60, SMALL, weights, { mid1: 2, mid2: 4 })).toThrow(/divisible/);
    expect(() => encodeImage(pixels, SMALL.inputSize, SMALL, weights.subarray(1), { mid1: 2, mid2: 4 })).toThrow(/weight vector/);
  });
});

describe("weight packs", () => {
  let dir: string;
  beforeAll(() => {
    dir = fs.mkdtempSync(path.join(os.tmpdir(), "apfw-"));
  });
  afterAll(() => {
    fs.rmSync(dir, { recursive: true, force: true });
  });

  it("round-trips through a file", () => {
    const original = buildSeededWeights(SMALL, "pack-roundtrip");
    const file = path.join(dir, "pack.apfw");
    writeWeightFile(file, original);
    const loaded = loadWeightFile(file, original.length);
    expect(Buffer.from(loaded.buffer).equals(Buffer.from(original.buffer))).toBe(true);
  });

  it("resolveWeights reads a pretrained pack", () => {
    const original = buildSeededWeights(SMALL, "pack-resolve");
    const file = path.join(dir, "pack2.apfw");
    writeWeightFile(file, original);
    const resolved = resolveWeights(SMALL, `pretrained:${file}`);
    expect([...resolved]).toEqual([...original]);
    expect([...resolved]).not.toEqual([...buildSeededWeights(SMALL, SEEDED_VARIANT)]);
  });

  it("rejects a pack whose size disagrees with the config", () => {
    const file = path.join(dir, "short.apfw");
    writeWeightFile(file, new Float32Array(7));
    expect(() => loadWeightFile(file, paramCount(SMALL))).toThrow(WeightFormatError);
  });

  it("rejects a corrupt pack", () => {
    const file = path.join(dir, "garbage.apfw");
    fs.writeFileSync(file, Buffer.from("not a weight pack"));
    expect(() => loadWeightFile(file, 4)).toThrow(/bad magic/);
  });

  it("missing pretrained file explains how to obtain weights", () => {
    const missing = path.join(dir, "nowhere.apfw");
    try {
      resolveWeights(SMALL, `pretrained:${missing}`);
      expect.unreachable("should have thrown");
    } catch (err) {
      expect(err).toBeInstanceOf(MissingWeightsError);
      expect((err as Error).message).toContain("Download");
      expect((err as Error).message).toContain(missing);
    }
  });

  it("unknown variants are rejected", () => {
    expect(() => resolveWeights(SMALL, "mystery-v9")).toThrow(MissingWeightsError);
  });
});
