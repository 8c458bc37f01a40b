/**
 * Image feature extraction: walk a class-per-subdirectory tree, decode
 * PNG/JPEG files, run each image through a backbone, and write one fvec
 * feature row per image.  Undecodable files are skipped with a warning and
 * counted in the manifest.
 */

import { readFileSync, readdirSync, statSync } from "fs";
import { join } from "path";

import * as tf from "@tensorflow/tfjs";
import * as jpeg from "jpeg-js";
import { PNG } from "pngjs";

import { FvecData, writeFvec } from "./fvec";
import { normalizeClassName } from "./wordvec";

export interface DecodedImage {
  width: number;
  height: number;
  /** RGBA bytes, width * height * 4 */
  data: Uint8Array;
}

export function decodeImage(path: string): DecodedImage | null {
  const raw = readFileSync(path);
  try {
    if (raw.length >= 8 && raw.readUInt32BE(0) === 0x89504e47) {
      const png = PNG.sync.read(raw);
      return { width: png.width, height: png.height, data: new Uint8Array(png.data) };
    }
    if (raw.length >= 2 && raw[0] === 0xff && raw[1] === 0xd8) {
      const img = jpeg.decode(raw, { useTArray: true, formatAsRGBA: true });
      return { width: img.width, height: img.height, data: img.data };
    }
  } catch {
    return null;
  }
  return null;
}

export interface Backbone {
  featureDim: number;
  embed(image: DecodedImage): Promise<Float32Array>;
}

/** Wraps a tfjs layers model: resize to its input, scale to [0,1], predict. */
export class TfjsBackbone implements Backbone {
  readonly featureDim: number;
  private readonly size: number;

  constructor(private readonly model: tf.LayersModel) {
    const inShape = model.inputs[0].shape;
    const outShape = model.outputs[0].shape;
    this.size = inShape[1] as number;
    this.featureDim = outShape[outShape.length - 1] as number;
  }

  async embed(image: DecodedImage): Promise<Float32Array> {
    const out = tf.tidy(() => {
      const rgba = tf.tensor3d(image.data, [image.height, image.width, 4], "int32");
      const rgb = rgba.slice([0, 0, 0], [image.height, image.width, 3]).toFloat();
      const resized = tf.image.resizeBilinear(rgb, [this.size, this.size]);
      const batch = resized.div(255).expandDims(0);
      return (this.model.predict(batch) as tf.Tensor).reshape([this.featureDim]);
    });
    const values = (await out.data()) as Float32Array;
    out.dispose();
    return values;
  }
}

/**
 * Loads a layers model saved as model.json + weights.bin next to it.
 * Pure-JS tfjs has no filesystem handler, so provide a minimal one.
 */
export async function loadBackbone(modelJsonPath: string): Promise<TfjsBackbone> {
  const dir = modelJsonPath.slice(0, modelJsonPath.lastIndexOf("/") + 1);
  const spec = JSON.parse(readFileSync(modelJsonPath, "utf8"));
  const handler: tf.io.IOHandler = {
    load: async () => {
      const weightData = new Uint8Array(
        readFileSync(join(dir, spec.weightsManifest[0].paths[0])),
      ).buffer;
      return {
        modelTopology: spec.modelTopology,
        weightSpecs: spec.weightsManifest[0].weights,
        weightData,
      };
    },
  };
  const model = await tf.loadLayersModel(handler);
  return new TfjsBackbone(model);
}

/** Saves a layers model in the layout loadBackbone expects (test fixtures). */
export async function saveBackbone(model: tf.LayersModel, dir: string): Promise<void> {
  const { writeFileSync, mkdirSync } = await import("fs");
  mkdirSync(dir, { recursive: true });
  await model.save({
    save: async (artifacts) => {
      writeFileSync(join(dir, "weights.bin"), Buffer.from(artifacts.weightData as ArrayBuffer));
      writeFileSync(
        join(dir, "model.json"),
        JSON.stringify({
          modelTopology: artifacts.modelTopology,
          weightsManifest: [{ paths: ["weights.bin"], weights: artifacts.weightSpecs }],
        }),
      );
      return { modelArtifactsInfo: { dateSaved: new Date(), modelTopologyType: "JSON" } };
    },
  });
}

export interface ImageExportJob {
  inputDir: string;
  domain: "sketch" | "image";
  outPath: string;
}

export interface ImageExportResult {
  classNames: string[];
  count: number;
  skipped: number;
}

const IMAGE_EXTENSIONS = new Set([".png", ".jpg", ".jpeg"]);

function imageFiles(dir: string): string[] {
  return readdirSync(dir)
    .filter((f) => {
      const dot = f.lastIndexOf(".");
      return dot >= 0 && IMAGE_EXTENSIONS.has(f.slice(dot).toLowerCase());
    })
    .sort();
}

export async function exportImageFeatures(
  job: ImageExportJob,
  backbone: Backbone,
  warn: (msg: string) => void = (msg) => console.warn(msg),
): Promise<ImageExportResult> {
  const classDirs = readdirSync(job.inputDir)
    .filter((d) => statSync(join(job.inputDir, d)).isDirectory())
    .sort();
  const classNames = classDirs.map(normalizeClassName);

  const rows: Float32Array[] = [];
  const labels: number[] = [];
  let skipped = 0;
  for (let ci = 0; ci < classDirs.length; ci++) {
    const dir = join(job.inputDir, classDirs[ci]);
    for (const file of imageFiles(dir)) {
      const image = decodeImage(join(dir, file));
      if (image === null) {
        warn(`skipping undecodable image ${join(dir, file)}`);
        skipped += 1;
        continue;
      }
      rows.push(await backbone.embed(image));
      labels.push(ci);
    }
  }

  const vectors = new Float32Array(rows.length * backbone.featureDim);
  rows.forEach((row, i) => vectors.set(row, i * backbone.featureDim));
  const data: FvecData = {
    dim: backbone.featureDim,
    vectors,
    labels,
    domains: new Array(rows.length).fill(job.domain),
    classNames,
    extra: { skipped },
  };
  writeFvec(job.outPath, data);
  return { classNames, count: rows.length, skipped };
}
