/**
 * Deterministic random GPT-2-shaped safetensors sources for testing the
 * converter without network access. Presets mirror the public checkpoint's
 * tensor names, shapes, buffers, and config.json fields.
 */

import { SourceConfig } from "./gpt2.js";
import { TensorEntry, TensorMap } from "./safetensors.js";

export const PRESETS: Record<string, SourceConfig> = {
  tiny: { n_layer: 2, n_head: 4, n_embd: 32, vocab_size: 128, n_positions: 64 },
  gpt2: { n_layer: 12, n_head: 12, n_embd: 768, vocab_size: 50257, n_positions: 1024 },
};

/** xorshift128+ with Box-Muller; bit-stable across platforms. */
export class Rng {
  private s0: bigint;
  private s1: bigint;
  private spare: number | null = null;

  constructor(seed: number) {
    this.s0 = BigInt(seed) * 2685821657736338717n + 1n;
    this.s1 = (BigInt(seed) ^ 0x9e3779b97f4a7c15n) * 0x2545f4914f6cdd1dn + 1n;
    for (let i = 0; i < 8; i++) this.nextU64();
  }

  nextU64(): bigint {
    let x = this.s0;
    const y = this.s1;
    this.s0 = y;
    x ^= (x << 23n) & 0xffffffffffffffffn;
    x ^= x >> 17n;
    x ^= y ^ (y >> 26n);
    this.s1 = x;
    return (x + y) & 0xffffffffffffffffn;
  }

  uniform(): number {
    // 53 random bits -> [0, 1)
    return Number(this.nextU64() >> 11n) / 2 ** 53;
  }

  normal(): number {
    if (this.spare !== null) {
      const v = this.spare;
      this.spare = null;
      return v;
    }
    let u = 0;
    while (u === 0) u = this.uniform();
    const r = Math.sqrt(-2 * Math.log(u));
    const theta = 2 * Math.PI * this.uniform();
    this.spare = r * Math.sin(theta);
    return r * Math.cos(theta);
  }
}

function randn(rng: Rng, shape: number[], scale: number): TensorEntry {
  const n = shape.reduce((a, b) => a * b, 1);
  const data = new Float32Array(n);
  for (let i = 0; i < n; i++) data[i] = rng.normal() * scale;
  return { dtype: "F32", shape, data };
}

function fill(shape: number[], value: number): TensorEntry {
  const n = shape.reduce((a, b) => a * b, 1);
  return { dtype: "F32", shape, data: new Float32Array(n).fill(value) };
}

function tril(n: number): TensorEntry {
  // the public checkpoint ships the causal mask buffer as [1, 1, n, n]
  const data = new Float32Array(n * n);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j <= i; j++) data[i * n + j] = 1;
  }
  return { dtype: "F32", shape: [1, 1, n, n], data };
}

export function makeSource(
  cfg: SourceConfig,
  seed: number,
  opts: { untiedHead?: boolean; maskBuffers?: boolean } = {}
): TensorMap {
  const rng = new Rng(seed);
  const d = cfg.n_embd;
  const tensors: TensorMap = new Map();
  tensors.set("wte.weight", randn(rng, [cfg.vocab_size, d], 0.02));
  tensors.set("wpe.weight", randn(rng, [cfg.n_positions, d], 0.01));
  for (let i = 0; i < cfg.n_layer; i++) {
    const p = `h.${i}.`;
    tensors.set(p + "ln_1.weight", fill([d], 1));
    tensors.set(p + "ln_1.bias", fill([d], 0));
    tensors.set(p + "attn.c_attn.weight", randn(rng, [d, 3 * d], 0.02));
    tensors.set(p + "attn.c_attn.bias", fill([3 * d], 0));
    tensors.set(p + "attn.c_proj.weight", randn(rng, [d, d], 0.02));
    tensors.set(p + "attn.c_proj.bias", fill([d], 0));
    tensors.set(p + "ln_2.weight", fill([d], 1));
    tensors.set(p + "ln_2.bias", fill([d], 0));
    tensors.set(p + "mlp.c_fc.weight", randn(rng, [d, 4 * d], 0.02));
    tensors.set(p + "mlp.c_fc.bias", fill([4 * d], 0));
    tensors.set(p + "mlp.c_proj.weight", randn(rng, [4 * d, d], 0.02));
    tensors.set(p + "mlp.c_proj.bias", fill([d], 0));
    if (opts.maskBuffers) {
      tensors.set(p + "attn.bias", tril(cfg.n_positions));
      tensors.set(p + "attn.masked_bias", fill([], -1e4));
    }
  }
  tensors.set("ln_f.weight", fill([d], 1));
  tensors.set("ln_f.bias", fill([d], 0));
  if (opts.untiedHead) {
    tensors.set("lm_head.weight", randn(rng, [cfg.vocab_size, d], 0.02));
  }
  return tensors;
}
