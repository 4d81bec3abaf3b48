/**
 * Export pipeline: raw image container -> backbone -> .fmb feature maps.
 */
import * as fs from "node:fs";

import { Backbone, buildBackbone, runBackbone } from "./backbone.js";
import { FeatureDataset, encodeFmb } from "./fmb.js";
import { ImageDataset, decodeImages } from "./images.js";

export interface ExportSpec {
  /** raw image container path */
  datasetPath: string;
  /** backbone identifier; doubles as the weight seed ("seeded-cnn-<n>") */
  backbone: string;
  channelsOut: number;
  batchSize: number;
  outPath: string;
  /** force every label to -1 (OOD splits) */
  unlabeled: boolean;
  log: (msg: string) => void;
}

export class ExportError extends Error {}

export function backboneSeed(backbone: string): number {
  const m = /^seeded-cnn-(\d+)$/.exec(backbone);
  if (!m) {
    throw new ExportError(
      `unknown backbone ${JSON.stringify(backbone)}; available: seeded-cnn-<seed>`);
  }
  return parseInt(m[1], 10);
}

/** Largest even-output crop: output grids (H/8) must have even sides. */
function cropTo(ds: ImageDataset, log: (msg: string) => void): ImageDataset {
  const unit = 16; // stride-2 x3 => /8, and the /8 result must stay even
  const h = Math.max(unit, Math.floor(ds.height / unit) * unit);
  const w = Math.max(unit, Math.floor(ds.width / unit) * unit);
  if (h === ds.height && w === ds.width) return ds;
  if (ds.height < unit || ds.width < unit) {
    throw new ExportError(`images must be at least ${unit}x${unit}, got ${ds.height}x${ds.width}`);
  }
  log(`cropping ${ds.height}x${ds.width} center to ${h}x${w} for an even output grid`);
  const r0 = (ds.height - h) >> 1;
  const c0 = (ds.width - w) >> 1;
  const c = ds.channels;
  const images = ds.images.map((img) => {
    const pixels = new Uint8Array(h * w * c);
    for (let r = 0; r < h; r++) {
      const src = ((r0 + r) * ds.width + c0) * c;
      pixels.set(img.pixels.subarray(src, src + w * c), r * w * c);
    }
    return { pixels, label: img.label };
  });
  return { images, height: h, width: w, channels: c };
}

export interface ExportResult {
  fmb: Buffer;
  dataset: FeatureDataset;
  /** the backbone's own pooled vectors, one per image, in export order */
  pooled: Float32Array[];
}

export async function exportFeatures(spec: ExportSpec): Promise<ExportResult> {
  if (!fs.existsSync(spec.datasetPath)) {
    throw new ExportError(
      `dataset not found: ${spec.datasetPath} (generate one with 'fmb-exporter synth-images')`);
  }
  const seed = backboneSeed(spec.backbone);
  const raw = decodeImages(fs.readFileSync(spec.datasetPath));
  const images = cropTo(raw, spec.log);
  const backbone: Backbone = buildBackbone({
    inputHeight: images.height,
    inputWidth: images.width,
    inputChannels: images.channels,
    channelsOut: spec.channelsOut,
    seed,
  });
  const out = await runBackbone(
    backbone,
    images.images.map((i) => i.pixels),
    images.height,
    images.width,
    images.channels,
    spec.batchSize,
  );
  const labels = images.images.map((i) => (spec.unlabeled ? -1 : i.label));
  const labeled = labels.filter((l) => l >= 0);
  const dataset: FeatureDataset = {
    maps: out.spatial.map((values, i) => ({ values, label: labels[i] })),
    classCount: labeled.length ? Math.max(...labeled) + 1 : 1,
    height: out.height,
    width: out.width,
    channels: out.channels,
    metadata: {
      source: spec.datasetPath,
      backbone: spec.backbone,
      input_shape: `${images.height}x${images.width}x${images.channels}`,
    },
  };
  spec.log(
    `exported ${dataset.maps.length} maps (${out.height}x${out.width}x${out.channels})`);
  return { fmb: encodeFmb(dataset), dataset, pooled: out.pooled };
}
