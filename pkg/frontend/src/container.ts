/**
 * Readers for the stagecoach on-disk container: the variable table
 * (md.idx), per-step indices (md.step.<s>), and block records inside
 * data.<m> sub-files. All integers little-endian.
 */

import * as fs from "fs";
import * as path from "path";
import * as zlib from "zlib";
import { decodePayload } from "./codecs";

export const BLOCK_MAGIC = "SCBK";
export const INDEX_MAGIC = "SCIX";
export const STEP_MAGIC = "SCSP";
export const HEADER_SIZE = 100;
export const FORMAT_VERSION = 1;

export enum DTypeCode {
  f32 = 1,
  f64 = 2,
  i32 = 3,
  i64 = 4,
  u8 = 5,
}

export const DTYPE_SIZE: Record<DTypeCode, number> = {
  [DTypeCode.f32]: 4,
  [DTypeCode.f64]: 8,
  [DTypeCode.i32]: 4,
  [DTypeCode.i64]: 8,
  [DTypeCode.u8]: 1,
};

export interface VariableDef {
  varId: number;
  name: string;
  dtype: DTypeCode;
  shape: number[]; // [] for scalars
}

export interface IndexEntry {
  varId: number;
  step: number;
  subfileId: number;
  byteOffset: number;
  storedLen: number;
  rawLen: number;
  start: number[];
  count: number[];
  codecId: number;
  shuffle: boolean;
  crc32: number;
}

export interface StepIndex {
  step: number;
  complete: boolean;
  nWriters: number;
  entries: IndexEntry[];
}

export interface GlobalIndex {
  variables: VariableDef[];
  byName: Map<string, VariableDef>;
  byId: Map<number, VariableDef>;
  steps: Map<number, StepIndex>;
}

function u64(view: DataView, off: number): number {
  const v = view.getBigUint64(off, true);
  if (v > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new Error(`u64 value ${v} exceeds safe integer range`);
  }
  return Number(v);
}

function* records(buf: Buffer, offset: number, n: number): Generator<Buffer> {
  for (let i = 0; i < n; i++) {
    const len = buf.readUInt32LE(offset);
    offset += 4;
    yield buf.subarray(offset, offset + len);
    offset += len;
  }
}

function parseVariableTable(buf: Buffer): VariableDef[] {
  if (buf.subarray(0, 4).toString("latin1") !== INDEX_MAGIC) {
    throw new Error("bad magic in md.idx");
  }
  const version = buf.readUInt16LE(4);
  if (version !== FORMAT_VERSION) {
    throw new Error(`unsupported index format version ${version}`);
  }
  const count = buf.readUInt32LE(6);
  const out: VariableDef[] = [];
  for (const rec of records(buf, 10, count)) {
    const view = new DataView(rec.buffer, rec.byteOffset, rec.byteLength);
    const varId = view.getUint32(0, true);
    const dtype = view.getUint8(4) as DTypeCode;
    const ndim = view.getUint8(5);
    const shape: number[] = [];
    for (let d = 0; d < ndim; d++) {
      shape.push(u64(view, 6 + 8 * d));
    }
    const name = rec.subarray(6 + 8 * ndim).toString("utf8");
    out.push({ varId, name, dtype, shape });
  }
  return out;
}

function parseStepFile(buf: Buffer): StepIndex {
  if (buf.subarray(0, 4).toString("latin1") !== STEP_MAGIC) {
    throw new Error("bad magic in step index");
  }
  const step = buf.readUInt32LE(6);
  const complete = buf.readUInt8(10) !== 0;
  const nWriters = buf.readUInt32LE(11);
  const count = buf.readUInt32LE(15);
  const entries: IndexEntry[] = [];
  for (const rec of records(buf, 19, count)) {
    const view = new DataView(rec.buffer, rec.byteOffset, rec.byteLength);
    const varId = view.getUint32(0, true);
    const subfileId = view.getUint32(4, true);
    const byteOffset = u64(view, 8);
    const ndim = view.getUint8(16);
    const start: number[] = [];
    const countBox: number[] = [];
    for (let d = 0; d < ndim; d++) {
      start.push(u64(view, 17 + 8 * d));
      countBox.push(u64(view, 49 + 8 * d));
    }
    const codecId = view.getUint8(81);
    const shuffle = view.getUint8(82) !== 0;
    const rawLen = u64(view, 83);
    const storedLen = u64(view, 91);
    const crc32 = view.getUint32(99, true);
    entries.push({
      varId, step, subfileId, byteOffset, storedLen, rawLen,
      start, count: countBox, codecId, shuffle, crc32,
    });
  }
  return { step, complete, nWriters, entries };
}

export function loadIndex(indexDir: string): GlobalIndex {
  const idxPath = path.join(indexDir, "md.idx");
  const variables = parseVariableTable(fs.readFileSync(idxPath));
  const steps = new Map<number, StepIndex>();
  for (const name of fs.readdirSync(indexDir)) {
    const m = /^md\.step\.(\d+)$/.exec(name);
    if (!m) continue;
    const si = parseStepFile(fs.readFileSync(path.join(indexDir, name)));
    steps.set(si.step, si);
  }
  return {
    variables,
    byName: new Map(variables.map((v) => [v.name, v])),
    byId: new Map(variables.map((v) => [v.varId, v])),
    steps,
  };
}

export function completeSteps(index: GlobalIndex): number[] {
  return [...index.steps.values()]
    .filter((s) => s.complete)
    .map((s) => s.step)
    .sort((a, b) => a - b);
}

/** Locate data.<m> across one or more directories (burst-buffer layouts). */
export function subfilePath(dataDirs: string[], subfileId: number): string {
  for (const dir of dataDirs) {
    const p = path.join(dir, `data.${subfileId}`);
    if (fs.existsSync(p)) return p;
  }
  throw new Error(`data.${subfileId} not found under ${dataDirs.join(", ")}`);
}

/** Read one block through its index entry; verifies magic and checksum. */
export function readBlockPayload(
  fd: number,
  entry: IndexEntry,
  elemSize: number,
): Buffer {
  const header = Buffer.alloc(HEADER_SIZE);
  fs.readSync(fd, header, 0, HEADER_SIZE, entry.byteOffset);
  if (header.subarray(0, 4).toString("latin1") !== BLOCK_MAGIC) {
    throw new Error(`bad block magic at offset ${entry.byteOffset}`);
  }
  const stored = Buffer.alloc(entry.storedLen);
  fs.readSync(fd, stored, 0, entry.storedLen, entry.byteOffset + HEADER_SIZE);
  const crc = zlib.crc32(stored) >>> 0;
  if (crc !== entry.crc32) {
    throw new Error(`checksum mismatch in subfile ${entry.subfileId} at ${entry.byteOffset}`);
  }
  return decodePayload(stored, entry.codecId, entry.shuffle, entry.rawLen, elemSize);
}
