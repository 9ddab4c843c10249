#!/usr/bin/env node
/**
 * sc-convert: turn a published stagecoach index into a classic NetCDF file
 * with time as the leading unlimited dimension.
 *
 *   sc-convert --in <md.idx | index dir> --out file.nc
 *              [--vars A,B] [--steps a:b] [--data-dir DIR]...
 */

import * as fs from "fs";
import * as path from "path";
import { VariableDef } from "./container";
import { NetCDFWriter, UnsupportedDType } from "./netcdf";
import { ContainerReader } from "./reader";

export interface ConversionJob {
  indexDir: string;
  outPath: string;
  dataDirs?: string[];
  vars?: string[];
  steps?: [number, number]; // half-open, python-slice style
}

export class IncompleteStep extends Error {}

export function convert(job: ConversionJob): { steps: number[]; variables: string[] } {
  const dataDirs = job.dataDirs?.length
    ? [job.indexDir, ...job.dataDirs]
    : [job.indexDir];
  const reader = new ContainerReader(job.indexDir, dataDirs);
  try {
    const complete = reader.steps();
    let steps: number[];
    if (job.steps) {
      const [a, b] = job.steps;
      steps = [];
      for (let s = a; s < b; s++) {
        if (!complete.includes(s)) {
          throw new IncompleteStep(`step ${s} is not published as complete`);
        }
        steps.push(s);
      }
    } else {
      steps = complete;
    }

    let variables: VariableDef[] = [...reader.index.variables].sort(
      (x, y) => x.varId - y.varId,
    );
    if (job.vars) {
      const want = new Set(job.vars);
      for (const name of want) {
        if (!reader.index.byName.has(name)) {
          throw new Error(`variable ${name} not in index`);
        }
      }
      variables = variables.filter((v) => want.has(v.name));
    }
    if (variables.length === 0) {
      throw new Error("no variables selected");
    }

    const writer = new NetCDFWriter(
      job.outPath,
      variables.map((v) => ({ name: v.name, dtype: v.dtype, shape: v.shape })),
      steps.length,
    );
    for (const step of steps) {
      writer.writeRecord(variables.map((v) => reader.readStep(step, v.name)));
    }
    writer.close();
    return { steps, variables: variables.map((v) => v.name) };
  } finally {
    reader.close();
  }
}

function parseArgs(argv: string[]): ConversionJob {
  let input: string | undefined;
  let out: string | undefined;
  let vars: string[] | undefined;
  let steps: [number, number] | undefined;
  const dataDirs: string[] = [];
  for (let i = 0; i < argv.length; i++) {
    switch (argv[i]) {
      case "--in":
        input = argv[++i];
        break;
      case "--out":
        out = argv[++i];
        break;
      case "--vars":
        vars = argv[++i].split(",").filter(Boolean);
        break;
      case "--steps": {
        const [a, b] = argv[++i].split(":");
        steps = [parseInt(a, 10), parseInt(b, 10)];
        break;
      }
      case "--data-dir":
        dataDirs.push(argv[++i]);
        break;
      default:
        throw new Error(`unknown argument ${argv[i]}`);
    }
  }
  if (!input || !out) {
    throw new Error("usage: sc-convert --in <md.idx|dir> --out file.nc " +
      "[--vars A,B] [--steps a:b] [--data-dir DIR]");
  }
  const indexDir = input.endsWith("md.idx") ? path.dirname(input) : input;
  return { indexDir, outPath: out, vars, steps, dataDirs };
}

export function main(argv = process.argv.slice(2)): number {
  try {
    const job = parseArgs(argv);
    const { steps, variables } = convert(job);
    const size = fs.statSync(job.outPath).size;
    console.log(
      `wrote ${job.outPath}: ${steps.length} time records, ` +
      `${variables.length} variables (${variables.join(", ")}), ${size} bytes`,
    );
    return 0;
  } catch (err) {
    if (err instanceof UnsupportedDType || err instanceof IncompleteStep) {
      console.error(`error: ${err.message}`);
      return 2;
    }
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

if (require.main === module) {
  process.exit(main());
}
