#!/usr/bin/env node
/** Command-line entry points for the exporter. */

import { readdirSync, statSync } from "fs";
import { join } from "path";

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { exportImageFeatures, loadBackbone } from "./imagefeat";
import { exportWordVectors } from "./wordvec";

async function main(): Promise<number> {
  const argv = yargs(hideBin(process.argv))
    .command(
      "export-image-features",
      "encode a class-per-subdirectory image tree into an fvec container",
      (y) =>
        y
          .option("input-dir", { type: "string", demandOption: true })
          .option("model", {
            type: "string",
            demandOption: true,
            describe: "path to a tfjs layers model.json",
          })
          .option("domain", {
            choices: ["sketch", "image"] as const,
            default: "image" as const,
          })
          .option("out", { type: "string", demandOption: true }),
    )
    .command(
      "export-word-vectors",
      "export per-class word vectors plus their nearest neighbors",
      (y) =>
        y
          .option("table", { type: "string", demandOption: true })
          .option("classes", {
            type: "string",
            describe: "comma-separated class names",
          })
          .option("from-image-dir", {
            type: "string",
            describe: "derive class names from subdirectory names",
          })
          .option("out-vectors", { type: "string", demandOption: true })
          .option("out-alternates", { type: "string", demandOption: true })
          .option("neighbors", { type: "number", default: 10 }),
    )
    .demandCommand(1)
    .strict()
    .parseSync();

  const command = argv._[0];
  if (command === "export-image-features") {
    const backbone = await loadBackbone(argv.model as string);
    const result = await exportImageFeatures(
      {
        inputDir: argv["input-dir"] as string,
        domain: argv.domain as "sketch" | "image",
        outPath: argv.out as string,
      },
      backbone,
    );
    console.log(
      `wrote ${result.count} features (${result.classNames.length} classes, ` +
        `${result.skipped} skipped) to ${argv.out}`,
    );
    return 0;
  }

  if (command === "export-word-vectors") {
    let classNames: string[];
    if (argv.classes) {
      classNames = (argv.classes as string).split(",").map((s) => s.trim());
    } else if (argv["from-image-dir"]) {
      const dir = argv["from-image-dir"] as string;
      classNames = readdirSync(dir)
        .filter((d) => statSync(join(dir, d)).isDirectory())
        .sort();
    } else {
      console.error("pass --classes or --from-image-dir");
      return 2;
    }
    const result = exportWordVectors(
      classNames,
      argv.table as string,
      argv["out-vectors"] as string,
      argv["out-alternates"] as string,
      argv.neighbors as number,
    );
    console.log(
      `wrote ${result.classNames.length} class vectors ` +
        `(+${argv.neighbors} neighbors each) to ${argv["out-vectors"]}`,
    );
    return 0;
  }
  return 2;
}

main().then(
  (code) => process.exit(code),
  (err) => {
    console.error(`error: ${err.message}`);
    process.exit(1);
  },
);
