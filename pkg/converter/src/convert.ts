/**
 * CLI: convert a GPT-2 safetensors checkpoint into a CTXPW001 container.
 *
 * Usage:
 *   node dist/convert.js convert --source <dir-or-model.safetensors> --dest out.ctxpw [--verify]
 *   node dist/convert.js make-source --preset tiny|gpt2 --out <dir> [--seed N] [--untied]
 *
 * `--source` accepts a directory holding model.safetensors + config.json
 * (the huggingface.co/gpt2 layout) or a .safetensors path with the config
 * next to it. `--verify` runs the reference forward on a pinned 8-token
 * input and writes <dest>.verify.json with the recorded hidden states; the
 * conversion report always lands at <dest>.report.json.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { writeContainer } from "./container.js";
import { referenceForward } from "./forward.js";
import { ConversionReport, SourceConfig, convertGpt2 } from "./gpt2.js";
import { PRESETS, makeSource } from "./makesource.js";
import { readSafetensors, writeSafetensors } from "./safetensors.js";

export const PINNED_INPUT_IDS = [0, 1, 2, 3, 5, 8, 13, 21];

interface Args {
  [key: string]: string | boolean;
}

function parseArgs(argv: string[]): { command: string; args: Args } {
  const command = argv[0];
  const args: Args = {};
  for (let i = 1; i < argv.length; i++) {
    const a = argv[i];
    if (!a.startsWith("--")) throw new Error(`unexpected argument ${a}`);
    const key = a.slice(2);
    if (i + 1 < argv.length && !argv[i + 1].startsWith("--")) {
      args[key] = argv[++i];
    } else {
      args[key] = true;
    }
  }
  return { command, args };
}

function resolveSource(source: string): { weights: string; config: string } {
  const st = fs.statSync(source, { throwIfNoEntry: false });
  if (st?.isDirectory()) {
    return {
      weights: path.join(source, "model.safetensors"),
      config: path.join(source, "config.json"),
    };
  }
  if (source.endsWith(".safetensors")) {
    return { weights: source, config: path.join(path.dirname(source), "config.json") };
  }
  throw new Error(
    `--source must be a checkpoint directory or a .safetensors file, got ${source}`
  );
}

export function runConvert(source: string, dest: string, verify: boolean): ConversionReport {
  const { weights, config } = resolveSource(source);
  if (!fs.existsSync(weights)) throw new Error(`source weights not found: ${weights}`);
  if (!fs.existsSync(config)) throw new Error(`source config.json not found: ${config}`);
  const sourceTensors = readSafetensors(fs.readFileSync(weights));
  const sourceConfig = JSON.parse(fs.readFileSync(config, "utf-8")) as SourceConfig;
  for (const field of ["n_layer", "n_head", "n_embd", "vocab_size", "n_positions"]) {
    if (typeof (sourceConfig as any)[field] !== "number") {
      throw new Error(`unsupported model: config.json missing ${field}`);
    }
  }
  const { tensors, config: cfg, report } = convertGpt2(sourceTensors, sourceConfig);
  fs.writeFileSync(dest, writeContainer(tensors, cfg));
  fs.writeFileSync(dest + ".report.json", JSON.stringify(report, null, 1));
  if (verify) {
    const positions = PINNED_INPUT_IDS.map((_, i) => i);
    const hidden = referenceForward(tensors, cfg, PINNED_INPUT_IDS, positions);
    const payload = {
      input_ids: PINNED_INPUT_IDS,
      positions,
      tolerance: 1e-4,
      hidden_states: hidden,
    };
    fs.writeFileSync(dest + ".verify.json", JSON.stringify(payload));
  }
  return report;
}

export function runMakeSource(preset: string, out: string, seed: number, untied: boolean): void {
  const cfg = PRESETS[preset];
  if (!cfg) throw new Error(`unknown preset ${preset}; use ${Object.keys(PRESETS).join("|")}`);
  fs.mkdirSync(out, { recursive: true });
  const tensors = makeSource(cfg, seed, { untiedHead: untied, maskBuffers: true });
  fs.writeFileSync(path.join(out, "model.safetensors"), writeSafetensors(tensors));
  const configJson = {
    architectures: ["GPT2LMHeadModel"],
    model_type: "gpt2",
    n_layer: cfg.n_layer,
    n_head: cfg.n_head,
    n_embd: cfg.n_embd,
    vocab_size: cfg.vocab_size,
    n_positions: cfg.n_positions,
    layer_norm_epsilon: 1e-5,
  };
  fs.writeFileSync(path.join(out, "config.json"), JSON.stringify(configJson, null, 1));
}

function main(): number {
  const { command, args } = parseArgs(process.argv.slice(2));
  if (command === "convert") {
    const source = args["source"];
    const dest = args["dest"];
    if (typeof source !== "string" || typeof dest !== "string") {
      console.error("convert requires --source and --dest");
      return 2;
    }
    const report = runConvert(source, dest, Boolean(args["verify"]));
    console.log(
      `converted ${report.tensors.length} tensors ` +
        `(${report.config.n_layers} layers, d_model=${report.config.d_model}) -> ${dest}`
    );
    if (report.dropped.length) {
      console.log(`dropped non-weight tensors: ${report.dropped.length}`);
    }
    return 0;
  }
  if (command === "make-source") {
    const preset = typeof args["preset"] === "string" ? (args["preset"] as string) : "tiny";
    const out = args["out"];
    if (typeof out !== "string") {
      console.error("make-source requires --out");
      return 2;
    }
    const seed = typeof args["seed"] === "string" ? Number(args["seed"]) : 0;
    runMakeSource(preset, out, seed, Boolean(args["untied"]));
    console.log(`wrote ${preset} source checkpoint to ${out}`);
    return 0;
  }
  console.error("usage: convert.js convert|make-source [options]");
  return 2;
}

if (process.argv[1] && path.basename(process.argv[1]).startsWith("convert")) {
  try {
    process.exitCode = main();
  } catch (e) {
    console.error(`error: ${(e as Error).message}`);
    process.exitCode = 1;
  }
}
