import { createHash } from "node:crypto";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { describe, expect, it } from "vitest";

import { readContainer, writeContainer } from "../src/container.js";
import { referenceForward } from "../src/forward.js";
import { convertGpt2, expectedShapes } from "../src/gpt2.js";
import { PRESETS, makeSource } from "../src/makesource.js";
import { readSafetensors, writeSafetensors } from "../src/safetensors.js";
import { PINNED_INPUT_IDS, runConvert, runMakeSource } from "../src/convert.js";

const TINY = PRESETS.tiny;

function tmpdir(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), "ctxpw-"));
}

describe("safetensors round trip", () => {
  it("reads back what it writes", () => {
    const tensors = makeSource(TINY, 7);
    const buf = writeSafetensors(tensors);
    const back = readSafetensors(buf);
    expect(back.size).toBe(tensors.size);
    const wte = back.get("wte.weight")!;
    expect(wte.shape).toEqual([TINY.vocab_size, TINY.n_embd]);
    expect(wte.data).toEqual(tensors.get("wte.weight")!.data);
  });

  it("rejects non-f32 sources", () => {
    const tensors = makeSource(TINY, 7);
    const buf = writeSafetensors(tensors);
    const headerLen = Number(buf.readBigUInt64LE(0));
    const header = JSON.parse(buf.subarray(8, 8 + headerLen).toString("utf-8"));
    const name = Object.keys(header)[0];
    header[name].dtype = "BF16";
    const newHeader = Buffer.from(JSON.stringify(header), "utf-8");
    const lenBuf = Buffer.alloc(8);
    lenBuf.writeBigUInt64LE(BigInt(newHeader.length));
    const corrupted = Buffer.concat([lenBuf, newHeader, buf.subarray(8 + headerLen)]);
    expect(() => readSafetensors(corrupted)).toThrow(/only F32/);
  });
});

describe("conversion", () => {
  it("produces the full container schema with matching checksums", () => {
    const source = makeSource(TINY, 7, { maskBuffers: true });
    const { tensors, config, report } = convertGpt2(source, TINY);
    const shapes = expectedShapes(config);
    expect(new Set(tensors.keys())).toEqual(new Set(shapes.keys()));
    for (const [name, shape] of shapes) {
      expect(tensors.get(name)!.shape).toEqual(shape);
    }
    // lossless: container payload bytes hash to the reported source hashes
    for (const entry of report.tensors) {
      const t = tensors.get(entry.name)!;
      const digest = createHash("sha256")
        .update(Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength))
        .digest("hex");
      expect(digest).toBe(entry.sha256);
    }
    expect(report.dropped.length).toBe(2 * TINY.n_layer); // mask buffers
  });

  it("handles untied heads by dropping lm_head", () => {
    const source = makeSource(TINY, 7, { untiedHead: true });
    const { report } = convertGpt2(source, TINY);
    expect(report.dropped).toContain("lm_head.weight");
  });

  it("errors on a missing tensor, naming it", () => {
    const source = makeSource(TINY, 7);
    source.delete("h.1.attn.c_proj.weight");
    expect(() => convertGpt2(source, TINY)).toThrow(/h\.1\.attn\.c_proj\.weight missing/);
  });

  it("errors on a shape surprise, naming the tensor", () => {
    const source = makeSource(TINY, 7);
    const bad = source.get("h.0.mlp.c_fc.weight")!;
    source.set("h.0.mlp.c_fc.weight", { ...bad, shape: [TINY.n_embd, TINY.n_embd] });
    expect(() => convertGpt2(source, TINY)).toThrow(/expected/);
  });

  it("errors on unknown extra tensors", () => {
    const source = makeSource(TINY, 7);
    source.set("mystery.weight", { dtype: "F32", shape: [2], data: new Float32Array(2) });
    expect(() => convertGpt2(source, TINY)).toThrow(/unexpected source tensor/);
  });
});

describe("container round trip", () => {
  it("reads back tensors and config bit-exactly", () => {
    const { tensors, config } = convertGpt2(makeSource(TINY, 3), TINY);
    const buf = writeContainer(tensors, config);
    expect(buf.subarray(0, 8).toString("ascii")).toBe("CTXPW001");
    const back = readContainer(buf);
    expect(back.config).toEqual(config);
    for (const [name, t] of tensors) {
      expect(back.tensors.get(name)!.data).toEqual(t.data);
    }
  });

  it("is byte-deterministic", () => {
    const { tensors, config } = convertGpt2(makeSource(TINY, 3), TINY);
    const a = writeContainer(tensors, config);
    const b = writeContainer(tensors, config);
    expect(a.equals(b)).toBe(true);
  });
});

describe("reference forward", () => {
  it("produces n_layers+1 finite hidden states of the right shape", () => {
    const { tensors, config } = convertGpt2(makeSource(TINY, 11), TINY);
    const positions = PINNED_INPUT_IDS.map((_, i) => i);
    const hidden = referenceForward(tensors, config, PINNED_INPUT_IDS, positions);
    expect(hidden.length).toBe(config.n_layers + 1);
    for (const layer of hidden) {
      expect(layer.length).toBe(PINNED_INPUT_IDS.length);
      expect(layer[0].length).toBe(config.d_model);
      for (const row of layer) {
        for (const v of row) expect(Number.isFinite(v)).toBe(true);
      }
    }
    // layer 0 is the embedding sum
    const wte = tensors.get("token_embedding")!;
    const wpe = tensors.get("position_embedding")!;
    const d = config.d_model;
    for (let j = 0; j < d; j++) {
      expect(hidden[0][2][j]).toBeCloseTo(
        wte.data[PINNED_INPUT_IDS[2] * d + j] + wpe.data[2 * d + j],
        6
      );
    }
    // final layer rows are layer-normalized before the affine (gamma=1, beta=0)
    const last = hidden[hidden.length - 1];
    for (const row of last) {
      const mean = row.reduce((a, b) => a + b, 0) / row.length;
      expect(Math.abs(mean)).toBeLessThan(1e-6);
    }
  });

  it("respects the key mask: out-of-window tokens cannot move the target", () => {
    const { tensors, config } = convertGpt2(makeSource(TINY, 11), TINY);
    const positions = PINNED_INPUT_IDS.map((_, i) => i);
    const mask = [0, 0, 0, 1, 1, 1, 1, 1];
    const base = referenceForward(tensors, config, PINNED_INPUT_IDS, positions, mask);
    const mutated = [...PINNED_INPUT_IDS];
    mutated[0] = 99;
    mutated[2] = 77;
    const alt = referenceForward(tensors, config, mutated, positions, mask);
    const L = config.n_layers;
    for (let t = 3; t < 8; t++) {
      for (let j = 0; j < config.d_model; j++) {
        expect(alt[L][t][j]).toBe(base[L][t][j]);
      }
    }
  });
});

describe("end-to-end CLI flows", () => {
  it("make-source + convert --verify writes container, report, activations", () => {
    const dir = tmpdir();
    runMakeSource("tiny", path.join(dir, "src"), 5, true);
    const dest = path.join(dir, "tiny.ctxpw");
    const report = runConvert(path.join(dir, "src"), dest, true);
    expect(report.config.n_layers).toBe(2);
    expect(fs.existsSync(dest)).toBe(true);
    expect(fs.existsSync(dest + ".report.json")).toBe(true);
    const verify = JSON.parse(fs.readFileSync(dest + ".verify.json", "utf-8"));
    expect(verify.input_ids).toEqual(PINNED_INPUT_IDS);
    expect(verify.hidden_states.length).toBe(3);

    const container = readContainer(fs.readFileSync(dest));
    expect(container.config.d_model).toBe(TINY.n_embd);
  });

  it(
    "full-size preset matches the published 12-layer 768-dim configuration",
    { timeout: 120_000 },
    () => {
      if (!process.env.CONVERTER_FULL) {
        return; // ~1 GB of artifacts; enable with CONVERTER_FULL=1
      }
      const dir = tmpdir();
      runMakeSource("gpt2", path.join(dir, "src"), 5, false);
      const dest = path.join(dir, "gpt2.ctxpw");
      const report = runConvert(path.join(dir, "src"), dest, true);
      expect(report.config).toMatchObject({
        n_layers: 12,
        n_heads: 12,
        d_model: 768,
        vocab_size: 50257,
        max_positions: 1024,
      });
      fs.rmSync(dir, { recursive: true, force: true });
    }
  );
});
