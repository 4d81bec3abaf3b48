#!/usr/bin/env node
/**
 * fmb-exporter: write backbone feature maps into .fmb containers.
 *
 *   fmb-exporter synth-images --out images.bin --count 100
 *   fmb-exporter export --dataset images.bin --out features.fmb
 */
import * as fs from "node:fs";

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { ExportError, exportFeatures } from "./export.js";
import { ImageFormatError, encodeImages, genSynthImages } from "./images.js";
import { FmbFormatError } from "./fmb.js";

export async function main(argv: string[]): Promise<number> {
  try {
    await yargs(argv)
      .scriptName("fmb-exporter")
      .command(
        "synth-images",
        "generate a deterministic raw image container",
        (y) =>
          y
            .option("out", { type: "string", demandOption: true })
            .option("count", { type: "number", default: 100 })
            .option("height", { type: "number", default: 32 })
            .option("width", { type: "number", default: 32 })
            .option("channels", { type: "number", default: 3 })
            .option("classes", { type: "number", default: 4 })
            .option("unlabeled", { type: "boolean", default: false })
            .option("seed", { type: "number", default: 0 }),
        (args) => {
          const ds = genSynthImages({
            count: args.count,
            height: args.height,
            width: args.width,
            channels: args.channels,
            classes: args.classes,
            unlabeled: args.unlabeled,
            seed: args.seed,
          });
          fs.writeFileSync(args.out, encodeImages(ds));
          console.log(`synth-images: wrote ${ds.images.length} images to ${args.out}`);
        },
      )
      .command(
        "export",
        "run the backbone and write a .fmb feature container",
        (y) =>
          y
            .option("dataset", { type: "string", demandOption: true })
            .option("out", { type: "string", demandOption: true })
            .option("backbone", { type: "string", default: "seeded-cnn-7" })
            .option("channels-out", { type: "number", default: 16 })
            .option("batch-size", { type: "number", default: 32 })
            .option("unlabeled", { type: "boolean", default: false }),
        async (args) => {
          const result = await exportFeatures({
            datasetPath: args.dataset,
            backbone: args.backbone,
            channelsOut: args.channelsOut,
            batchSize: args.batchSize,
            outPath: args.out,
            unlabeled: args.unlabeled,
            log: (msg) => console.error(`export: ${msg}`),
          });
          fs.writeFileSync(args.out, result.fmb);
          console.log(`export: wrote ${result.dataset.maps.length} maps to ${args.out}`);
        },
      )
      .demandCommand(1)
      .strict()
      .fail((msg, err) => {
        throw err ?? new ExportError(msg);
      })
      .parseAsync();
    return 0;
  } catch (err) {
    if (err instanceof ExportError || err instanceof ImageFormatError
        || err instanceof FmbFormatError) {
      console.error(`error: ${err.message}`);
      return 1;
    }
    throw err;
  }
}

const invokedDirectly =
  process.argv[1] && import.meta.url.endsWith(process.argv[1].split("/").pop() ?? "");
if (invokedDirectly) {
  main(hideBin(process.argv)).then((code) => {
    process.exitCode = code;
  });
}
