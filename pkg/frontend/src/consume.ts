#!/usr/bin/env node
/**
 * sc-consume: attach to a staging endpoint, pull one field per step,
 * print slice statistics, and render a grayscale heatmap per step.
 *
 *   sc-consume --endpoint host:port --field T --k 0 --out-dir imgs/
 *
 * Endpoint falls back to STAGECOACH_ENDPOINT. Only the requested field's
 * blocks are fetched; each step is released as soon as it is processed.
 */

import * as fs from "fs";
import * as path from "path";
import { DTypeCode } from "./container";
import { encodeGrayPng, rasterize } from "./png";
import { Box, typedView } from "./scatter";
import { SliceStats, computeStats, statsLine } from "./stats";
import { AnnouncedStep, StagingClient } from "./wire";

export interface ConsumeOptions {
  endpoint: string;
  field?: string;
  k: number;
  outDir?: string;
  onStats?: (s: SliceStats) => void;
}

function sliceSelection(shape: number[], k: number): { sel: Box | null; dims: [number, number] } {
  if (shape.length === 3) {
    const [nz, ny, nx] = shape;
    return {
      sel: { start: [Math.min(k, nz - 1), 0, 0], count: [1, ny, nx] },
      dims: [ny, nx],
    };
  }
  if (shape.length === 2) {
    return { sel: null, dims: [shape[0], shape[1]] };
  }
  return { sel: null, dims: [1, Math.max(1, shape[0] ?? 1)] };
}

function pickField(step: AnnouncedStep, available: string[], wanted?: string): string {
  if (wanted) {
    if (!available.includes(wanted)) {
      throw new Error(`field ${wanted} not present; have ${available.join(",")}`);
    }
    return wanted;
  }
  return available.find((n) => n !== "XTIME") ?? available[0];
}

export async function consume(opts: ConsumeOptions): Promise<SliceStats[]> {
  const client = await StagingClient.connect(opts.endpoint);
  const collected: SliceStats[] = [];
  try {
    for (;;) {
      const step = await client.nextStep();
      if (step === null) break;
      const name = pickField(step, client.availableVariables(), opts.field);
      const variable = step.variables.get(name)!;
      const { sel, dims } = sliceSelection(variable.shape, opts.k);
      const payload = await client.get(name, sel);
      const stats = computeStats(step.step, name, variable.dtype, payload);
      collected.push(stats);
      console.log(statsLine(stats));
      opts.onStats?.(stats);
      if (opts.outDir) {
        const view = typedView(variable.dtype, payload);
        if (variable.dtype === DTypeCode.f32 || variable.dtype === DTypeCode.f64) {
          const png = encodeGrayPng(
            rasterize(view as Float32Array | Float64Array, dims[1], dims[0]),
            dims[1],
            dims[0],
          );
          fs.writeFileSync(path.join(opts.outDir, `step_${step.step}.png`), png);
        }
      }
      client.release();
    }
  } finally {
    client.close();
  }
  return collected;
}

function parseArgs(argv: string[]): ConsumeOptions {
  let endpoint = process.env.STAGECOACH_ENDPOINT;
  let field: string | undefined;
  let k = 0;
  let outDir: string | undefined;
  for (let i = 0; i < argv.length; i++) {
    switch (argv[i]) {
      case "--endpoint":
        endpoint = argv[++i];
        break;
      case "--field":
        field = argv[++i];
        break;
      case "--k":
        k = parseInt(argv[++i], 10);
        break;
      case "--out-dir":
        outDir = argv[++i];
        break;
      default:
        throw new Error(`unknown argument ${argv[i]}`);
    }
  }
  if (!endpoint) {
    throw new Error("usage: sc-consume --endpoint host:port [--field T] [--k 0] [--out-dir imgs/]");
  }
  return { endpoint, field, k, outDir };
}

export async function main(argv = process.argv.slice(2)): Promise<number> {
  try {
    const opts = parseArgs(argv);
    if (opts.outDir) fs.mkdirSync(opts.outDir, { recursive: true });
    const stats = await consume(opts);
    console.error(`processed ${stats.length} steps`);
    return 0;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

if (require.main === module) {
  main().then((rc) => process.exit(rc));
}
