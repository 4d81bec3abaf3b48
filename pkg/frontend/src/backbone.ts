/**
 * Deterministic convolutional backbone (pure-JS tfjs, CPU).
 *
 * Three stride-2 conv stages shrink H and W by 8x; the model exposes
 * both the pre-pooling spatial activations and its own global-average-
 * pooled vector, so exports can be checked against the pooled output.
 * Weights come from a seeded PRNG instead of a download, keeping runs
 * byte-reproducible in offline environments.
 */
import * as tf from "@tensorflow/tfjs";

import { makeRng, uniformArray } from "./prng.js";

export interface Backbone {
  /** predicts [spatial (N,H',W',E), pooled (N,E)] */
  model: tf.LayersModel;
  channelsOut: number;
  reduction: number;
}

export interface BackboneSpec {
  inputHeight: number;
  inputWidth: number;
  inputChannels: number;
  channelsOut: number;
  seed: number;
}

export function buildBackbone(spec: BackboneSpec): Backbone {
  const input = tf.input({
    shape: [spec.inputHeight, spec.inputWidth, spec.inputChannels],
  });
  const widths = [16, 24, spec.channelsOut];
  let x = input as tf.SymbolicTensor;
  for (const filters of widths) {
    x = tf.layers
      .conv2d({ filters, kernelSize: 3, strides: 2, padding: "same", activation: "relu" })
      .apply(x) as tf.SymbolicTensor;
  }
  const pooled = tf.layers.globalAveragePooling2d({}).apply(x) as tf.SymbolicTensor;
  const model = tf.model({ inputs: input, outputs: [x, pooled] });

  const rng = makeRng(spec.seed);
  const seeded = model.getWeights().map((wt) => {
    const n = wt.size;
    const scale = 1.0 / Math.sqrt(n / (wt.shape[wt.shape.length - 1] ?? 1));
    return tf.tensor(uniformArray(rng, n, -scale, scale), wt.shape);
  });
  model.setWeights(seeded);
  seeded.forEach((t) => t.dispose());
  return { model, channelsOut: spec.channelsOut, reduction: 8 };
}

export interface BackboneOutput {
  /** per image, H'*W'*E row-major channel-fastest */
  spatial: Float32Array[];
  /** per image, the model's own pooled E-vector */
  pooled: Float32Array[];
  height: number;
  width: number;
  channels: number;
}

/**
 * Run the backbone over u8 pixel batches (scaled to [0, 1]) in a fixed
 * order. Inference only, no augmentation.
 */
export async function runBackbone(
  backbone: Backbone,
  images: Uint8Array[],
  height: number,
  width: number,
  channels: number,
  batchSize: number,
): Promise<BackboneOutput> {
  const spatial: Float32Array[] = [];
  const pooled: Float32Array[] = [];
  let outH = 0;
  let outW = 0;
  for (let start = 0; start < images.length; start += batchSize) {
    const batch = images.slice(start, start + batchSize);
    const flat = new Float32Array(batch.length * height * width * channels);
    batch.forEach((img, i) => {
      const base = i * height * width * channels;
      for (let j = 0; j < img.length; j++) flat[base + j] = img[j] / 255.0;
    });
    const [spatialT, pooledT] = tf.tidy(() => {
      const x = tf.tensor4d(flat, [batch.length, height, width, channels]);
      return backbone.model.predict(x) as tf.Tensor[];
    });
    outH = spatialT.shape[1] as number;
    outW = spatialT.shape[2] as number;
    const spatialData = (await spatialT.data()) as Float32Array;
    const pooledData = (await pooledT.data()) as Float32Array;
    const mapLen = outH * outW * backbone.channelsOut;
    for (let i = 0; i < batch.length; i++) {
      spatial.push(spatialData.slice(i * mapLen, (i + 1) * mapLen));
      pooled.push(pooledData.slice(i * backbone.channelsOut, (i + 1) * backbone.channelsOut));
    }
    spatialT.dispose();
    pooledT.dispose();
  }
  return { spatial, pooled, height: outH, width: outW, channels: backbone.channelsOut };
}
