/**
 * Minimal safetensors reader/writer (float32 only).
 *
 * Layout: 8-byte little-endian u64 header length, JSON header mapping
 * tensor name -> { dtype, shape, data_offsets: [begin, end] } (offsets
 * relative to the byte after the header), then the raw payload.
 */

export interface TensorEntry {
  dtype: string;
  shape: number[];
  data: Float32Array;
}

export type TensorMap = Map<string, TensorEntry>;

export function readSafetensors(buf: Buffer): TensorMap {
  if (buf.length < 8) {
    throw new Error(`safetensors: truncated file (${buf.length} bytes)`);
  }
  const headerLen = Number(buf.readBigUInt64LE(0));
  if (8 + headerLen > buf.length) {
    throw new Error(`safetensors: header length ${headerLen} overruns file`);
  }
  const header = JSON.parse(buf.subarray(8, 8 + headerLen).toString("utf-8"));
  const dataStart = 8 + headerLen;
  const tensors: TensorMap = new Map();
  for (const [name, meta] of Object.entries<any>(header)) {
    if (name === "__metadata__") continue;
    const { dtype, shape, data_offsets } = meta;
    if (dtype !== "F32") {
      throw new Error(
        `safetensors: tensor ${name} has dtype ${dtype}; only F32 sources are supported`
      );
    }
    const [begin, end] = data_offsets;
    const nElem = shape.reduce((a: number, b: number) => a * b, 1);
    if (end - begin !== 4 * nElem) {
      throw new Error(`safetensors: tensor ${name} length mismatch`);
    }
    const bytes = buf.subarray(dataStart + begin, dataStart + end);
    // copy so the Float32Array is aligned and detached from the file buffer
    const data = new Float32Array(nElem);
    data.set(new Float32Array(bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.length)));
    tensors.set(name, { dtype: "F32", shape, data });
  }
  return tensors;
}

export function writeSafetensors(tensors: TensorMap): Buffer {
  const names = [...tensors.keys()].sort();
  const header: Record<string, unknown> = {};
  let offset = 0;
  const blobs: Buffer[] = [];
  for (const name of names) {
    const t = tensors.get(name)!;
    const blob = Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength);
    header[name] = {
      dtype: "F32",
      shape: t.shape,
      data_offsets: [offset, offset + blob.length],
    };
    blobs.push(blob);
    offset += blob.length;
  }
  const headerBytes = Buffer.from(JSON.stringify(header), "utf-8");
  const lenBuf = Buffer.alloc(8);
  lenBuf.writeBigUInt64LE(BigInt(headerBytes.length));
  return Buffer.concat([lenBuf, headerBytes, ...blobs]);
}
