import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { describe, expect, it } from "vitest";

import { exportFeatures } from "../src/export.js";
import { encodeImages, genSynthImages } from "../src/images.js";

function pythonWithEngine(): string | null {
  try {
    execFileSync("python3", ["-c", "import mode_ood"], { stdio: "ignore" });
    return "python3";
  } catch {
    return null;
  }
}

const py = pythonWithEngine();

describe.skipIf(py === null)("engine interop", () => {
  it("an exported .fmb loads in the engine with matching shapes and pooling", async () => {
    const tmp = fs.mkdtempSync(path.join(os.tmpdir(), "fmb-interop-"));
    try {
      const datasetPath = path.join(tmp, "imgs.bin");
      fs.writeFileSync(
        datasetPath,
        encodeImages(
          genSynthImages({
            count: 16,
            height: 32,
            width: 32,
            channels: 3,
            classes: 4,
            unlabeled: false,
            seed: 3,
          }),
        ),
      );
      const outPath = path.join(tmp, "feats.fmb");
      const result = await exportFeatures({
        datasetPath,
        backbone: "seeded-cnn-7",
        channelsOut: 16,
        batchSize: 8,
        outPath,
        unlabeled: false,
        log: () => {},
      });
      fs.writeFileSync(outPath, result.fmb);
      const script = [
        "import sys, numpy as np",
        "from mode_ood.features import load_features, global_pool",
        "ds = load_features(sys.argv[1])",
        "pooled = np.asarray([global_pool(m) for m in ds.maps])",
        "labels = [m.label for m in ds.maps]",
        "print(len(ds.maps), ds.maps[0].height, ds.maps[0].width, ds.maps[0].channels)",
        "print(' '.join(str(l) for l in labels))",
        "np.save(sys.argv[2], pooled)",
      ].join("\n");
      const pooledPath = path.join(tmp, "pooled.npy");
      const out = execFileSync(py!, ["-c", script, outPath, pooledPath], {
        encoding: "utf8",
      });
      const [shapeLine, labelLine] = out.trim().split("\n");
      expect(shapeLine).toBe("16 4 4 16");
      expect(labelLine.split(" ").map(Number)).toEqual(
        result.dataset.maps.map((m) => m.label),
      );
      // .npy v1 header: 10-byte preamble, then a python dict literal padded
      // to 64 bytes; payload is little-endian f64, C order.
      const npy = fs.readFileSync(pooledPath);
      const headerLen = npy.readUInt16LE(8);
      const header = npy.subarray(10, 10 + headerLen).toString("ascii");
      expect(header).toContain("'<f8'");
      const data = new Float64Array(
        npy.buffer,
        npy.byteOffset + 10 + headerLen,
        16 * 16,
      );
      let worst = 0;
      for (let i = 0; i < 16; i++) {
        for (let c = 0; c < 16; c++) {
          worst = Math.max(worst, Math.abs(data[i * 16 + c] - result.pooled[i][c]));
        }
      }
      expect(worst).toBeLessThan(1e-4);
    } finally {
      fs.rmSync(tmp, { recursive: true, force: true });
    }
  });
});
