/**
 * The .fmb feature-map container (little-endian, f32 payload).
 *
 * Layout: magic "MODEFMB1", then u32 version, count, H, W, E, then u32
 * class count, then per map an i32 label followed by H*W*E f32 values
 * (row-major, channel fastest), then u32 metadata entry count with
 * length-prefixed UTF-8 key/value pairs.
 */

export const FMB_MAGIC = "MODEFMB1";
export const FMB_VERSION = 1;

export interface FeatureMap {
  /** H*W*E values, row-major with channels fastest. */
  values: Float32Array;
  label: number;
}

export interface FeatureDataset {
  maps: FeatureMap[];
  classCount: number;
  height: number;
  width: number;
  channels: number;
  metadata: Record<string, string>;
}

export class FmbFormatError extends Error {}

export function encodeFmb(ds: FeatureDataset): Buffer {
  const { height: h, width: w, channels: e } = ds;
  const mapBytes = 4 + 4 * h * w * e;
  const metaEntries = Object.entries(ds.metadata).map(([k, v]) => ({
    key: Buffer.from(k, "utf-8"),
    value: Buffer.from(String(v), "utf-8"),
  }));
  const metaBytes = metaEntries.reduce((n, m) => n + 8 + m.key.length + m.value.length, 4);
  const buf = Buffer.alloc(8 + 24 + ds.maps.length * mapBytes + metaBytes);
  let off = buf.write(FMB_MAGIC, 0, "ascii");
  for (const v of [FMB_VERSION, ds.maps.length, h, w, e, ds.classCount]) {
    off = buf.writeUInt32LE(v, off);
  }
  for (const m of ds.maps) {
    if (m.values.length !== h * w * e) {
      throw new FmbFormatError(
        `map payload has ${m.values.length} values, header implies ${h * w * e}`);
    }
    for (const v of m.values) {
      if (!Number.isFinite(v)) throw new FmbFormatError("non-finite feature value");
    }
    off = buf.writeInt32LE(m.label, off);
    Buffer.from(m.values.buffer, m.values.byteOffset, 4 * m.values.length).copy(buf, off);
    off += 4 * m.values.length;
  }
  off = buf.writeUInt32LE(metaEntries.length, off);
  for (const m of metaEntries) {
    off = buf.writeUInt32LE(m.key.length, off);
    off += m.key.copy(buf, off);
    off = buf.writeUInt32LE(m.value.length, off);
    off += m.value.copy(buf, off);
  }
  return buf;
}

class Reader {
  off = 0;
  constructor(private buf: Buffer) {}

  take(n: number): Buffer {
    if (this.off + n > this.buf.length) {
      throw new FmbFormatError(`truncated at byte ${this.off} (need ${n} more)`);
    }
    const out = this.buf.subarray(this.off, this.off + n);
    this.off += n;
    return out;
  }

  u32(): number {
    return this.take(4).readUInt32LE(0);
  }

  i32(): number {
    return this.take(4).readInt32LE(0);
  }
}

export function decodeFmb(buf: Buffer): FeatureDataset {
  const r = new Reader(buf);
  if (r.take(8).toString("ascii") !== FMB_MAGIC) {
    throw new FmbFormatError("bad magic, not a .fmb file");
  }
  const version = r.u32();
  if (version !== FMB_VERSION) {
    throw new FmbFormatError(`unsupported version ${version}`);
  }
  const count = r.u32();
  const h = r.u32();
  const w = r.u32();
  const e = r.u32();
  if (h < 1 || w < 1 || e < 1) throw new FmbFormatError(`invalid shape ${h}x${w}x${e}`);
  const classCount = r.u32();
  const maps: FeatureMap[] = [];
  for (let i = 0; i < count; i++) {
    const label = r.i32();
    const raw = r.take(4 * h * w * e);
    const values = new Float32Array(h * w * e);
    for (let j = 0; j < values.length; j++) {
      values[j] = raw.readFloatLE(4 * j);
      if (!Number.isFinite(values[j])) {
        throw new FmbFormatError(`non-finite value in map ${i}`);
      }
    }
    maps.push({ values, label });
  }
  const metadata: Record<string, string> = {};
  const metaCount = r.u32();
  for (let i = 0; i < metaCount; i++) {
    const key = r.take(r.u32()).toString("utf-8");
    metadata[key] = r.take(r.u32()).toString("utf-8");
  }
  return { maps, classCount, height: h, width: w, channels: e, metadata };
}

/** Channel-wise mean over all positions (the engine's global pooling). */
export function globalPool(map: FeatureMap, h: number, w: number, e: number): Float64Array {
  const out = new Float64Array(e);
  const positions = h * w;
  for (let p = 0; p < positions; p++) {
    for (let c = 0; c < e; c++) out[c] += map.values[p * e + c];
  }
  for (let c = 0; c < e; c++) out[c] /= positions;
  return out;
}
