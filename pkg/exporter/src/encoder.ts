/** Deterministic multi-block image encoder, desk-scaled.
 *
 * The image is cut into non-overlapping patches, each patch is embedded into a
 * token, and a stack of blocks refines the token grid. Every block applies a
 * local 4-neighbour diffusion step followed by a low-rank bounded channel-mix
 * residual. Two mid-stack taps plus a projected final output give three
 * feature levels on the same spatial grid.
 *
 * Low-rank mixing keeps a full-resolution run to a few hundred million
 * multiply-adds, so exporting is fast in plain JS while preserving the level
 * shapes of the full-scale encoder (768/768/256 channels on a 64x64 grid for a
 * 1024 input with 16-pixel patches). All arithmetic is straight-line over
 * typed arrays: same input, same weights, same bytes out.
 */

export interface EncoderConfig {
  inputSize: number;
  patchSize: number;
  tokenChannels: number;
  outputChannels: number;
  blocks: number;
  embedRank: number;
  blockRank: number;
  neckRank: number;
}

export const DEFAULT_CONFIG: EncoderConfig = {
  inputSize: 1024,
  patchSize: 16,
  tokenChannels: 768,
  outputChannels: 256,
  blocks: 12,
  embedRank: 8,
  blockRank: 4,
  neckRank: 8,
};

export interface TapSpec {
  /** 1-based block indices whose post-block output becomes levels 1 and 2. */
  mid1: number;
  mid2: number;
}

export const DEFAULT_TAPS: TapSpec = { mid1: 5, mid2: 8 };

export interface LevelFeatures {
  channels: number;
  height: number;
  width: number;
  /** Channel-major float32 payload, length channels*height*width. */
  data: Float32Array;
}

/** Flattened patch length: 3 colour planes of patchSize^2 pixels. */
export function patchDim(cfg: EncoderConfig): number {
  return 3 * cfg.patchSize * cfg.patchSize;
}

/** Total number of weights in the flat parameter vector. */
export function paramCount(cfg: EncoderConfig): number {
  const c = cfg.tokenChannels;
  return (
    patchDim(cfg) * cfg.embedRank + cfg.embedRank * c + c
    + cfg.blocks * (c * cfg.blockRank + cfg.blockRank * c)
    + c * cfg.neckRank + cfg.neckRank * cfg.outputChannels + cfg.outputChannels
  );
}

interface EncoderWeights {
  embedDown: Float32Array;
  embedUp: Float32Array;
  embedBias: Float32Array;
  blocks: { mixDown: Float32Array; mixUp: Float32Array }[];
  neckDown: Float32Array;
  neckUp: Float32Array;
  neckBias: Float32Array;
}

function sliceWeights(cfg: EncoderConfig, flat: Float32Array): EncoderWeights {
  if (flat.length !== paramCount(cfg)) {
    throw new Error(`weight vector has ${flat.length} values, config needs ${paramCount(cfg)}`);
  }
  let at = 0;
  const take = (n: number) => {
    const view = flat.subarray(at, at + n);
    at += n;
    return view;
  };
  const c = cfg.tokenChannels;
  const out: EncoderWeights = {
    embedDown: take(patchDim(cfg) * cfg.embedRank),
    embedUp: take(cfg.embedRank * c),
    embedBias: take(c),
    blocks: [],
    neckDown: new Float32Array(0),
    neckUp: new Float32Array(0),
    neckBias: new Float32Array(0),
  };
  for (let b = 0; b < cfg.blocks; b++) {
    out.blocks.push({ mixDown: take(c * cfg.blockRank), mixUp: take(cfg.blockRank * c) });
  }
  out.neckDown = take(c * cfg.neckRank);
  out.neckUp = take(cfg.neckRank * cfg.outputChannels);
  out.neckBias = take(cfg.outputChannels);
  return out;
}

/** Bounded nonlinearity x/(1+|x|); cheap and saturating like tanh. */
function softsign(x: number): number {
  return x / (1 + Math.abs(x));
}

/** Tokens per side of the patch grid for a square input of `size` pixels. */
export function gridSize(cfg: EncoderConfig, size: number): number {
  if (size % cfg.patchSize !== 0) {
    throw new Error(`input size ${size} not divisible by patch size ${cfg.patchSize}`);
  }
  return size / cfg.patchSize;
}

/** Copies the token-major stream into a channel-major float32 level. */
function snapshotLevel(tokens: Float64Array, grid: number, channels: number): LevelFeatures {
  const plane = grid * grid;
  const data = new Float32Array(channels * plane);
  for (let t = 0; t < plane; t++) {
    const row = t * channels;
    for (let c = 0; c < channels; c++) {
      data[c * plane + t] = tokens[row + c];
    }
  }
  return { channels, height: grid, width: grid, data };
}

/** Runs the encoder over planar RGB pixels [3, size, size] in [0, 1] and
 * returns the three feature levels (mid tap 1, mid tap 2, projected final). */
export function encodeImage(
  pixels: Float32Array,
  size: number,
  cfg: EncoderConfig,
  flatWeights: Float32Array,
  taps: TapSpec = DEFAULT_TAPS,
): [LevelFeatures, LevelFeatures, LevelFeatures] {
  const grid = gridSize(cfg, size);
  if (pixels.length !== 3 * size * size) {
    throw new Error(`pixel buffer length ${pixels.length} does not match size ${size}`);
  }
  for (const tap of [taps.mid1, taps.mid2]) {
    if (!Number.isInteger(tap) || tap < 1 || tap > cfg.blocks) {
      throw new Error(`tap ${tap} outside block range 1..${cfg.blocks}`);
    }
  }
  if (taps.mid1 >= taps.mid2) {
    throw new Error(`taps must be increasing, got ${taps.mid1},${taps.mid2}`);
  }
  const w = sliceWeights(cfg, flatWeights);
  const s = cfg.patchSize;
  const c = cfg.tokenChannels;
  const dim = patchDim(cfg);
  const rEmbed = cfg.embedRank;
  const tokensN = grid * grid;
  const plane = size * size;

  // Patch embedding: gather (colour, py, px), low-rank project, bias, squash.
  const stream = new Float64Array(tokensN * c);
  const patch = new Float64Array(dim);
  const hidden = new Float64Array(Math.max(rEmbed, cfg.blockRank, cfg.neckRank));
  for (let gy = 0; gy < grid; gy++) {
    for (let gx = 0; gx < grid; gx++) {
      let k = 0;
      for (let ch = 0; ch < 3; ch++) {
        const base = ch * plane + gy * s * size + gx * s;
        for (let py = 0; py < s; py++) {
          const row = base + py * size;
          for (let px = 0; px < s; px++) {
            patch[k++] = pixels[row + px];
          }
        }
      }
      hidden.fill(0, 0, rEmbed);
      for (let i = 0; i < dim; i++) {
        const v = patch[i];
        if (v === 0) continue;
        const wrow = i * rEmbed;
        for (let j = 0; j < rEmbed; j++) {
          hidden[j] += v * w.embedDown[wrow + j];
        }
      }
      const out = (gy * grid + gx) * c;
      for (let o = 0; o < c; o++) {
        let acc = w.embedBias[o];
        for (let j = 0; j < rEmbed; j++) {
          acc += hidden[j] * w.embedUp[j * c + o];
        }
        stream[out + o] = softsign(acc);
      }
    }
  }

  // Replicate-edge 4-neighbour indices for the diffusion step.
  const up = new Int32Array(tokensN);
  const down = new Int32Array(tokensN);
  const left = new Int32Array(tokensN);
  const right = new Int32Array(tokensN);
  for (let gy = 0; gy < grid; gy++) {
    for (let gx = 0; gx < grid; gx++) {
      const t = gy * grid + gx;
      up[t] = (gy > 0 ? gy - 1 : 0) * grid + gx;
      down[t] = (gy < grid - 1 ? gy + 1 : gy) * grid + gx;
      left[t] = gy * grid + (gx > 0 ? gx - 1 : 0);
      right[t] = gy * grid + (gx < grid - 1 ? gx + 1 : gx);
    }
  }

  const rBlock = cfg.blockRank;
  const scratch = new Float64Array(tokensN * c);
  let levels1: LevelFeatures | null = null;
  let levels2: LevelFeatures | null = null;

  for (let b = 0; b < cfg.blocks; b++) {
    // Diffusion: pull each token a quarter of the way toward its 4-neighbour mean.
    for (let t = 0; t < tokensN; t++) {
      const row = t * c;
      const ru = up[t] * c, rd = down[t] * c, rl = left[t] * c, rr = right[t] * c;
      for (let o = 0; o < c; o++) {
        scratch[row + o] = 0.75 * stream[row + o]
          + 0.0625 * (stream[ru + o] + stream[rd + o] + stream[rl + o] + stream[rr + o]);
      }
    }
    // Low-rank channel mix with a bounded residual update.
    const { mixDown, mixUp } = w.blocks[b];
    for (let t = 0; t < tokensN; t++) {
      const row = t * c;
      hidden.fill(0, 0, rBlock);
      for (let i = 0; i < c; i++) {
        const v = scratch[row + i];
        const wrow = i * rBlock;
        for (let j = 0; j < rBlock; j++) {
          hidden[j] += v * mixDown[wrow + j];
        }
      }
      for (let o = 0; o < c; o++) {
        let acc = 0;
        for (let j = 0; j < rBlock; j++) {
          acc += hidden[j] * mixUp[j * c + o];
        }
        stream[row + o] = scratch[row + o] + softsign(acc);
      }
    }
    if (b + 1 === taps.mid1) levels1 = snapshotLevel(stream, grid, c);
    if (b + 1 === taps.mid2) levels2 = snapshotLevel(stream, grid, c);
  }

  // Neck: low-rank projection of the final stream down to the output channels.
  const co = cfg.outputChannels;
  const rNeck = cfg.neckRank;
  const final = new Float32Array(co * tokensN);
  for (let t = 0; t < tokensN; t++) {
    const row = t * c;
    hidden.fill(0, 0, rNeck);
    for (let i = 0; i < c; i++) {
      const v = stream[row + i];
      const wrow = i * rNeck;
      for (let j = 0; j < rNeck; j++) {
        hidden[j] += v * w.neckDown[wrow + j];
      }
    }
    for (let o = 0; o < co; o++) {
      let acc = w.neckBias[o];
      for (let j = 0; j < rNeck; j++) {
        acc += hidden[j] * w.neckUp[j * co + o];
      }
      final[o * tokensN + t] = softsign(acc);
    }
  }

  if (!levels1 || !levels2) {
    throw new Error(`taps ${taps.mid1},${taps.mid2} were never reached over ${cfg.blocks} blocks`);
  }
  return [levels1, levels2, { channels: co, height: grid, width: grid, data: final }];
}
