import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ExportError, ExportResult, backboneSeed, exportFeatures } from "../src/export.js";
import { decodeFmb, globalPool } from "../src/fmb.js";
import { encodeImages, genSynthImages } from "../src/images.js";

let tmp: string;

beforeAll(() => {
  tmp = fs.mkdtempSync(path.join(os.tmpdir(), "fmb-exporter-"));
});

afterAll(() => {
  fs.rmSync(tmp, { recursive: true, force: true });
});

function writeImages(name: string, count = 100, height = 32, width = 32): string {
  const p = path.join(tmp, name);
  fs.writeFileSync(
    p,
    encodeImages(
      genSynthImages({
        count,
        height,
        width,
        channels: 3,
        classes: 4,
        unlabeled: false,
        seed: 1,
      }),
    ),
  );
  return p;
}

function runExport(datasetPath: string, overrides: Record<string, unknown> = {}): Promise<ExportResult> {
  return exportFeatures({
    datasetPath,
    backbone: "seeded-cnn-7",
    channelsOut: 16,
    batchSize: 32,
    outPath: path.join(tmp, "out.fmb"),
    unlabeled: false,
    log: () => {},
    ...overrides,
  });
}

describe("export contract", () => {
  it("header matches payload and labels survive a round trip", async () => {
    const dataset = writeImages("a.bin", 20);
    const result = await runExport(dataset);
    const back = decodeFmb(result.fmb);
    expect(back.maps.length).toBe(20);
    expect(back.height).toBe(4);
    expect(back.width).toBe(4);
    expect(back.channels).toBe(16);
    expect(back.classCount).toBe(4);
    back.maps.forEach((m, i) => {
      expect(m.values.length).toBe(4 * 4 * 16);
      expect(m.label).toBe(i % 4);
      for (const v of m.values) expect(Number.isFinite(v)).toBe(true);
    });
  });

  it("is byte-deterministic for the same spec", async () => {
    const dataset = writeImages("b.bin", 12);
    const a = await runExport(dataset);
    const b = await runExport(dataset);
    expect(a.fmb.equals(b.fmb)).toBe(true);
  });

  it("pooled agreement: exported global pooling matches the backbone's own "
     + "pooled output within 1e-4 on 100 images", async () => {
    const dataset = writeImages("c.bin", 100);
    const result = await runExport(dataset);
    const back = decodeFmb(result.fmb);
    let worst = 0;
    back.maps.forEach((m, i) => {
      const pooled = globalPool(m, back.height, back.width, back.channels);
      const own = result.pooled[i];
      for (let c = 0; c < back.channels; c++) {
        worst = Math.max(worst, Math.abs(pooled[c] - own[c]));
      }
    });
    expect(result.pooled.length).toBe(100);
    expect(worst).toBeLessThan(1e-4);
  });

  it("marks OOD splits with label -1", async () => {
    const dataset = writeImages("d.bin", 8);
    const result = await runExport(dataset, { unlabeled: true });
    const back = decodeFmb(result.fmb);
    expect(back.maps.every((m) => m.label === -1)).toBe(true);
  });

  it("crops odd-grid inputs to an even output grid", async () => {
    const dataset = writeImages("e.bin", 4, 40, 40); // 40 -> crop to 32
    const logs: string[] = [];
    const result = await runExport(dataset, { log: (m: string) => logs.push(m) });
    const back = decodeFmb(result.fmb);
    expect(back.height).toBe(4);
    expect(back.width).toBe(4);
    expect(logs.some((m) => m.includes("cropping"))).toBe(true);
  });

  it("gives a descriptive error for a missing dataset", async () => {
    await expect(runExport(path.join(tmp, "absent.bin"))).rejects.toThrow(
      /dataset not found/);
  });

  it("rejects unknown backbones", () => {
    expect(() => backboneSeed("resnet-18")).toThrow(ExportError);
    expect(backboneSeed("seeded-cnn-42")).toBe(42);
  });

  it("different backbone seeds give different features", async () => {
    const dataset = writeImages("f.bin", 4);
    const a = await runExport(dataset, { backbone: "seeded-cnn-1" });
    const b = await runExport(dataset, { backbone: "seeded-cnn-2" });
    expect(a.fmb.equals(b.fmb)).toBe(false);
  });
});
