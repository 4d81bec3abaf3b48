import { describe, expect, it } from "vitest";

import {
  FeatureDataset,
  FmbFormatError,
  decodeFmb,
  encodeFmb,
  globalPool,
} from "../src/fmb.js";

function sampleDataset(): FeatureDataset {
  const maps = [0, 1, 2].map((label) => ({
    values: Float32Array.from({ length: 2 * 2 * 3 }, (_, i) => (i + label) * 0.25),
    label,
  }));
  return {
    maps,
    classCount: 3,
    height: 2,
    width: 2,
    channels: 3,
    metadata: { source: "test", split: "train" },
  };
}

describe("fmb container", () => {
  it("round-trips exactly", () => {
    const ds = sampleDataset();
    const back = decodeFmb(encodeFmb(ds));
    expect(back.classCount).toBe(3);
    expect(back.height).toBe(2);
    expect(back.width).toBe(2);
    expect(back.channels).toBe(3);
    expect(back.metadata).toEqual(ds.metadata);
    back.maps.forEach((m, i) => {
      expect(m.label).toBe(ds.maps[i].label);
      expect(Array.from(m.values)).toEqual(Array.from(ds.maps[i].values));
    });
  });

  it("encodes deterministically", () => {
    const ds = sampleDataset();
    expect(encodeFmb(ds).equals(encodeFmb(ds))).toBe(true);
  });

  it("rejects bad magic", () => {
    const buf = encodeFmb(sampleDataset());
    buf.write("XXXXXXXX", 0, "ascii");
    expect(() => decodeFmb(buf)).toThrow(FmbFormatError);
  });

  it("rejects truncation", () => {
    const buf = encodeFmb(sampleDataset());
    expect(() => decodeFmb(buf.subarray(0, buf.length - 5))).toThrow(/truncated/);
  });

  it("rejects non-finite payloads on write", () => {
    const ds = sampleDataset();
    ds.maps[0].values[0] = Number.NaN;
    expect(() => encodeFmb(ds)).toThrow(/non-finite/);
  });

  it("rejects shape-mismatched payloads on write", () => {
    const ds = sampleDataset();
    ds.maps[1] = { values: new Float32Array(5), label: 0 };
    expect(() => encodeFmb(ds)).toThrow(/header implies/);
  });
});

describe("globalPool", () => {
  it("averages channel-wise over positions", () => {
    // 2 positions x 2 channels: [1,2] and [3,4] -> [2,3]
    const map = { values: Float32Array.from([1, 2, 3, 4]), label: 0 };
    const pooled = globalPool(map, 1, 2, 2);
    expect(Array.from(pooled)).toEqual([2, 3]);
  });
});
