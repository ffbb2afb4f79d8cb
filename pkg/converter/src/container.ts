/**
 * CTXPW001 weight container writer/reader.
 *
 * bytes 0-7: magic "CTXPW001"; bytes 8-15: LE u64 header length H;
 * bytes 16..16+H: JSON header mapping tensor name -> {dtype: "f32", shape,
 * offset, length} plus a "config" object; remainder: raw LE float32 data,
 * row-major, offsets relative to the data section. The header is written
 * with sorted keys and compact separators so identical content gives
 * identical bytes.
 */

import { TensorEntry } from "./safetensors.js";

export const MAGIC = "CTXPW001";

export interface ModelConfig {
  n_layers: number;
  n_heads: number;
  d_model: number;
  vocab_size: number;
  max_positions: number;
  layernorm_epsilon: number;
}

function sortedJson(value: unknown): string {
  if (Array.isArray(value)) {
    return `[${value.map(sortedJson).join(",")}]`;
  }
  if (value !== null && typeof value === "object") {
    const keys = Object.keys(value as object).sort();
    const body = keys.map(
      (k) => `${JSON.stringify(k)}:${sortedJson((value as Record<string, unknown>)[k])}`
    );
    return `{${body.join(",")}}`;
  }
  return JSON.stringify(value);
}

export function writeContainer(
  tensors: Map<string, TensorEntry>,
  config: ModelConfig
): Buffer {
  const names = [...tensors.keys()].sort();
  const header: Record<string, unknown> = {};
  const blobs: Buffer[] = [];
  let offset = 0;
  for (const name of names) {
    const t = tensors.get(name)!;
    const blob = Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength);
    header[name] = { dtype: "f32", shape: t.shape, offset, length: blob.length };
    blobs.push(blob);
    offset += blob.length;
  }
  header["config"] = config;
  const headerBytes = Buffer.from(sortedJson(header), "utf-8");
  const magic = Buffer.from(MAGIC, "ascii");
  const lenBuf = Buffer.alloc(8);
  lenBuf.writeBigUInt64LE(BigInt(headerBytes.length));
  return Buffer.concat([magic, lenBuf, headerBytes, ...blobs]);
}

export function readContainer(buf: Buffer): {
  tensors: Map<string, TensorEntry>;
  config: ModelConfig;
} {
  if (buf.subarray(0, 8).toString("ascii") !== MAGIC) {
    throw new Error(`container: bad magic ${buf.subarray(0, 8).toString("ascii")}`);
  }
  const headerLen = Number(buf.readBigUInt64LE(8));
  const header = JSON.parse(buf.subarray(16, 16 + headerLen).toString("utf-8"));
  const config = header.config as ModelConfig;
  delete header.config;
  const dataStart = 16 + headerLen;
  const tensors = new Map<string, TensorEntry>();
  for (const [name, meta] of Object.entries<any>(header)) {
    const { dtype, shape, offset, length } = meta;
    if (dtype !== "f32") throw new Error(`container: tensor ${name} dtype ${dtype}`);
    const bytes = buf.subarray(dataStart + offset, dataStart + offset + length);
    const data = new Float32Array(
      bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.length)
    );
    tensors.set(name, { dtype: "F32", shape, data });
  }
  return { tensors, config };
}
