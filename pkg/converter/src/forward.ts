/**
 * Reference GPT-2 forward pass over converted tensors.
 *
 * Used by --verify to record hidden states on a pinned input at conversion
 * time; the consumer re-runs its own forward on the container and checks
 * elementwise agreement. Matches the container semantics: per-key binary
 * mask plus causality, tanh GELU, hidden state 0 is the embedding sum and
 * the final entry is post-ln_f.
 */

import { ModelConfig } from "./container.js";
import { TensorEntry } from "./safetensors.js";

type Tensors = Map<string, TensorEntry>;

function rows(t: TensorEntry): number {
  return t.shape[0];
}

function cols(t: TensorEntry): number {
  return t.shape.length > 1 ? t.shape[1] : 1;
}

/** out[T, n] = x[T, m] @ W[m, n] + b[n] */
function matmulBias(x: Float64Array, T: number, m: number, W: TensorEntry, b: TensorEntry): Float64Array {
  const n = cols(W);
  const out = new Float64Array(T * n);
  const w = W.data;
  for (let t = 0; t < T; t++) {
    for (let j = 0; j < n; j++) out[t * n + j] = b.data[j];
    for (let k = 0; k < m; k++) {
      const xv = x[t * m + k];
      if (xv === 0) continue;
      const base = k * n;
      for (let j = 0; j < n; j++) out[t * n + j] += xv * w[base + j];
    }
  }
  return out;
}

function layerNorm(x: Float64Array, T: number, d: number, gamma: TensorEntry, beta: TensorEntry, eps: number): Float64Array {
  const out = new Float64Array(T * d);
  for (let t = 0; t < T; t++) {
    let mean = 0;
    for (let j = 0; j < d; j++) mean += x[t * d + j];
    mean /= d;
    let varsum = 0;
    for (let j = 0; j < d; j++) {
      const c = x[t * d + j] - mean;
      varsum += c * c;
    }
    const inv = 1 / Math.sqrt(varsum / d + eps);
    for (let j = 0; j < d; j++) {
      out[t * d + j] = (x[t * d + j] - mean) * inv * gamma.data[j] + beta.data[j];
    }
  }
  return out;
}

const GELU_C = Math.sqrt(2 / Math.PI);

function geluTanh(x: Float64Array): Float64Array {
  const out = new Float64Array(x.length);
  for (let i = 0; i < x.length; i++) {
    const v = x[i];
    out[i] = 0.5 * v * (1 + Math.tanh(GELU_C * (v + 0.044715 * v * v * v)));
  }
  return out;
}

export function referenceForward(
  tensors: Tensors,
  config: ModelConfig,
  inputIds: number[],
  positions: number[],
  keyMask?: number[]
): number[][][] {
  const T = inputIds.length;
  const d = config.d_model;
  const H = config.n_heads;
  const dh = d / H;
  const eps = config.layernorm_epsilon;
  const mask = keyMask ?? new Array(T).fill(1);

  const wte = tensors.get("token_embedding")!;
  const wpe = tensors.get("position_embedding")!;
  let x = new Float64Array(T * d);
  for (let t = 0; t < T; t++) {
    for (let j = 0; j < d; j++) {
      x[t * d + j] = wte.data[inputIds[t] * d + j] + wpe.data[positions[t] * d + j];
    }
  }
  const states: Float64Array[] = [x.slice()];

  for (let li = 0; li < config.n_layers; li++) {
    const g = (name: string) => tensors.get(`layers.${li}.${name}`)!;
    const h1 = layerNorm(x, T, d, g("ln1_gamma"), g("ln1_beta"), eps);
    const qkv = matmulBias(h1, T, d, g("attn_qkv_weight"), g("attn_qkv_bias"));
    const ctx = new Float64Array(T * d);
    for (let head = 0; head < H; head++) {
      for (let qi = 0; qi < T; qi++) {
        const scores = new Float64Array(T).fill(-Infinity);
        let max = -Infinity;
        for (let kj = 0; kj <= qi; kj++) {
          if (!mask[kj]) continue;
          let s = 0;
          for (let e = 0; e < dh; e++) {
            s += qkv[qi * 3 * d + head * dh + e] * qkv[kj * 3 * d + d + head * dh + e];
          }
          s /= Math.sqrt(dh);
          scores[kj] = s;
          if (s > max) max = s;
        }
        if (max === -Infinity) continue; // fully masked row: never read
        let denom = 0;
        for (let kj = 0; kj <= qi; kj++) {
          if (scores[kj] === -Infinity) continue;
          denom += Math.exp(scores[kj] - max);
        }
        for (let kj = 0; kj <= qi; kj++) {
          if (scores[kj] === -Infinity) continue;
          const w = Math.exp(scores[kj] - max) / denom;
          for (let e = 0; e < dh; e++) {
            ctx[qi * d + head * dh + e] += w * qkv[kj * 3 * d + 2 * d + head * dh + e];
          }
        }
      }
    }
    const attnOut = matmulBias(ctx, T, d, g("attn_out_weight"), g("attn_out_bias"));
    for (let i = 0; i < T * d; i++) x[i] += attnOut[i];

    const h2 = layerNorm(x, T, d, g("ln2_gamma"), g("ln2_beta"), eps);
    const inner = geluTanh(matmulBias(h2, T, d, g("mlp_in_weight"), g("mlp_in_bias")));
    const mlpOut = matmulBias(inner, T, 4 * d, g("mlp_out_weight"), g("mlp_out_bias"));
    for (let i = 0; i < T * d; i++) x[i] += mlpOut[i];
    states.push(x.slice());
  }
  states[states.length - 1] = layerNorm(
    states[states.length - 1], T, d,
    tensors.get("lnf_gamma")!, tensors.get("lnf_beta")!, eps
  );

  return states.map((s) => {
    const layer: number[][] = [];
    for (let t = 0; t < T; t++) {
      layer.push(Array.from(s.subarray(t * d, (t + 1) * d)));
    }
    return layer;
  });
}
