/**
 * Raw image container used as exporter input, plus a synthetic image
 * generator for environments without a downloadable dataset.
 *
 * Layout: magic "MODEIMG1", u32 version, count, H, W, C, then per image
 * an i32 label (-1 for unlabeled) followed by H*W*C u8 pixels.
 */
import { makeRng, randInt } from "./prng.js";

export const IMG_MAGIC = "MODEIMG1";
export const IMG_VERSION = 1;

export interface RawImage {
  pixels: Uint8Array;
  label: number;
}

export interface ImageDataset {
  images: RawImage[];
  height: number;
  width: number;
  channels: number;
}

export class ImageFormatError extends Error {}

export function encodeImages(ds: ImageDataset): Buffer {
  const { height: h, width: w, channels: c } = ds;
  const buf = Buffer.alloc(8 + 20 + ds.images.length * (4 + h * w * c));
  let off = buf.write(IMG_MAGIC, 0, "ascii");
  for (const v of [IMG_VERSION, ds.images.length, h, w, c]) {
    off = buf.writeUInt32LE(v, off);
  }
  for (const img of ds.images) {
    if (img.pixels.length !== h * w * c) {
      throw new ImageFormatError("image payload does not match header shape");
    }
    off = buf.writeInt32LE(img.label, off);
    Buffer.from(img.pixels).copy(buf, off);
    off += img.pixels.length;
  }
  return buf;
}

export function decodeImages(buf: Buffer): ImageDataset {
  if (buf.length < 28 || buf.subarray(0, 8).toString("ascii") !== IMG_MAGIC) {
    throw new ImageFormatError("bad magic, not a raw image container");
  }
  const version = buf.readUInt32LE(8);
  if (version !== IMG_VERSION) throw new ImageFormatError(`unsupported version ${version}`);
  const count = buf.readUInt32LE(12);
  const h = buf.readUInt32LE(16);
  const w = buf.readUInt32LE(20);
  const c = buf.readUInt32LE(24);
  const stride = 4 + h * w * c;
  if (28 + count * stride > buf.length) {
    throw new ImageFormatError("truncated image payload");
  }
  const images: RawImage[] = [];
  for (let i = 0; i < count; i++) {
    const base = 28 + i * stride;
    images.push({
      label: buf.readInt32LE(base),
      pixels: Uint8Array.from(buf.subarray(base + 4, base + stride)),
    });
  }
  return { images, height: h, width: w, channels: c };
}

export interface SynthImageSpec {
  count: number;
  height: number;
  width: number;
  channels: number;
  classes: number;
  /** negative labels throughout (an "OOD" split) when true */
  unlabeled: boolean;
  seed: number;
}

/**
 * Class-tinted noise images: each class gets a color bias in one image
 * quadrant, the rest is uniform noise. Deterministic per seed.
 */
export function genSynthImages(spec: SynthImageSpec): ImageDataset {
  const rng = makeRng(spec.seed);
  const { height: h, width: w, channels: c } = spec;
  const tints: number[][] = [];
  for (let k = 0; k < spec.classes; k++) {
    tints.push(Array.from({ length: c }, () => randInt(rng, 156)));
  }
  const images: RawImage[] = [];
  for (let i = 0; i < spec.count; i++) {
    const cls = i % spec.classes;
    const pixels = new Uint8Array(h * w * c);
    for (let j = 0; j < pixels.length; j++) pixels[j] = randInt(rng, 256);
    const quad = randInt(rng, 4);
    const r0 = quad < 2 ? 0 : h >> 1;
    const c0 = quad % 2 === 0 ? 0 : w >> 1;
    for (let r = r0; r < r0 + (h >> 1); r++) {
      for (let col = c0; col < c0 + (w >> 1); col++) {
        for (let ch = 0; ch < c; ch++) {
          const idx = (r * w + col) * c + ch;
          pixels[idx] = Math.min(255, (pixels[idx] >> 1) + tints[cls][ch] + 50);
        }
      }
    }
    images.push({ pixels, label: spec.unlabeled ? -1 : cls });
  }
  return { images, height: h, width: w, channels: c };
}
