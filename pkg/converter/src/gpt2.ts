/**
 * GPT-2 checkpoint conversion: HF-style safetensors -> CTXPW001.
 *
 * The source follows the public gpt2 layout: top-level `wte.weight`,
 * `wpe.weight`, `ln_f.{weight,bias}`, and per-layer `h.N.*` with fused
 * Conv1D projections. Conv1D stores linear weights [in, out] row-major,
 * which is exactly the container convention, so payloads transfer without
 * transposition; the fused qkv columns are already ordered q, k, v.
 * Attention mask buffers (`attn.bias`, `attn.masked_bias`) and a separate
 * `lm_head.weight` (untied checkpoints) are dropped.
 */

import { createHash } from "node:crypto";

import { ModelConfig } from "./container.js";
import { TensorEntry, TensorMap } from "./safetensors.js";

export interface SourceConfig {
  n_layer: number;
  n_head: number;
  n_embd: number;
  vocab_size: number;
  n_positions: number;
  layer_norm_epsilon?: number;
}

export interface ConversionReport {
  config: ModelConfig;
  tensors: { name: string; source: string; shape: number[]; sha256: string }[];
  dropped: string[];
}

const TOP_LEVEL: [string, string][] = [
  ["wte.weight", "token_embedding"],
  ["wpe.weight", "position_embedding"],
  ["ln_f.weight", "lnf_gamma"],
  ["ln_f.bias", "lnf_beta"],
];

const PER_LAYER: [string, string][] = [
  ["ln_1.weight", "ln1_gamma"],
  ["ln_1.bias", "ln1_beta"],
  ["attn.c_attn.weight", "attn_qkv_weight"],
  ["attn.c_attn.bias", "attn_qkv_bias"],
  ["attn.c_proj.weight", "attn_out_weight"],
  ["attn.c_proj.bias", "attn_out_bias"],
  ["ln_2.weight", "ln2_gamma"],
  ["ln_2.bias", "ln2_beta"],
  ["mlp.c_fc.weight", "mlp_in_weight"],
  ["mlp.c_fc.bias", "mlp_in_bias"],
  ["mlp.c_proj.weight", "mlp_out_weight"],
  ["mlp.c_proj.bias", "mlp_out_bias"],
];

/** Shapes implied by the config, keyed by container tensor name. */
export function expectedShapes(cfg: ModelConfig): Map<string, number[]> {
  const d = cfg.d_model;
  const shapes = new Map<string, number[]>();
  shapes.set("token_embedding", [cfg.vocab_size, d]);
  shapes.set("position_embedding", [cfg.max_positions, d]);
  shapes.set("lnf_gamma", [d]);
  shapes.set("lnf_beta", [d]);
  for (let i = 0; i < cfg.n_layers; i++) {
    const p = `layers.${i}.`;
    shapes.set(p + "attn_qkv_weight", [d, 3 * d]);
    shapes.set(p + "attn_qkv_bias", [3 * d]);
    shapes.set(p + "attn_out_weight", [d, d]);
    shapes.set(p + "attn_out_bias", [d]);
    shapes.set(p + "mlp_in_weight", [d, 4 * d]);
    shapes.set(p + "mlp_in_bias", [4 * d]);
    shapes.set(p + "mlp_out_weight", [4 * d, d]);
    shapes.set(p + "mlp_out_bias", [d]);
    shapes.set(p + "ln1_gamma", [d]);
    shapes.set(p + "ln1_beta", [d]);
    shapes.set(p + "ln2_gamma", [d]);
    shapes.set(p + "ln2_beta", [d]);
  }
  return shapes;
}

function stripPrefix(name: string): string {
  // some exports carry a "transformer." prefix
  return name.startsWith("transformer.") ? name.slice("transformer.".length) : name;
}

function sha256Of(t: TensorEntry): string {
  return createHash("sha256")
    .update(Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength))
    .digest("hex");
}

export function convertGpt2(
  source: TensorMap,
  sourceConfig: SourceConfig
): { tensors: TensorMap; config: ModelConfig; report: ConversionReport } {
  const cfg: ModelConfig = {
    n_layers: sourceConfig.n_layer,
    n_heads: sourceConfig.n_head,
    d_model: sourceConfig.n_embd,
    vocab_size: sourceConfig.vocab_size,
    max_positions: sourceConfig.n_positions,
    layernorm_epsilon: sourceConfig.layer_norm_epsilon ?? 1e-5,
  };
  if (cfg.d_model % cfg.n_heads !== 0) {
    throw new Error(
      `unsupported model: d_model ${cfg.d_model} not divisible by n_head ${cfg.n_heads}`
    );
  }

  const byName = new Map<string, TensorEntry>();
  for (const [name, t] of source) byName.set(stripPrefix(name), t);

  const mapping: [string, string][] = [...TOP_LEVEL];
  for (let i = 0; i < cfg.n_layers; i++) {
    for (const [src, dst] of PER_LAYER) {
      mapping.push([`h.${i}.${src}`, `layers.${i}.${dst}`]);
    }
  }

  const shapes = expectedShapes(cfg);
  const out: TensorMap = new Map();
  const entries: ConversionReport["tensors"] = [];
  const used = new Set<string>();
  for (const [src, dst] of mapping) {
    const t = byName.get(src);
    if (!t) {
      throw new Error(`conversion error: source tensor ${src} missing`);
    }
    used.add(src);
    const want = shapes.get(dst)!;
    if (t.shape.length !== want.length || t.shape.some((v, i) => v !== want[i])) {
      throw new Error(
        `conversion error: ${src} has shape [${t.shape}], expected [${want}] for ${dst}`
      );
    }
    out.set(dst, t);
    entries.push({ name: dst, source: src, shape: t.shape, sha256: sha256Of(t) });
  }

  const dropped: string[] = [];
  for (const name of byName.keys()) {
    if (!used.has(name)) {
      if (/\.attn\.(bias|masked_bias)$/.test(name) || name === "lm_head.weight") {
        dropped.push(name); // buffers / tied-or-untied head: not model weights
      } else {
        throw new Error(`unsupported model: unexpected source tensor ${name}`);
      }
    }
  }

  return { tensors: out, config: cfg, report: { config: cfg, tensors: entries, dropped } };
}
