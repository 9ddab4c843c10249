/**
 * Minimal classic-format NetCDF writer (CDF-1, or CDF-2 when offsets
 * outgrow 31 bits). Every variable rides the unlimited "time" dimension,
 * one record per container step; data is big-endian per the classic spec.
 */

import * as fs from "fs";
import { DTYPE_SIZE, DTypeCode } from "./container";

const NC_DIMENSION = 0x0a;
const NC_VARIABLE = 0x0b;

const NC_BYTE = 1;
const NC_INT = 4;
const NC_FLOAT = 5;
const NC_DOUBLE = 6;

export class UnsupportedDType extends Error {}

const NC_TYPE: Partial<Record<DTypeCode, number>> = {
  [DTypeCode.u8]: NC_BYTE, // bit pattern preserved; classic has no unsigned byte
  [DTypeCode.i32]: NC_INT,
  [DTypeCode.f32]: NC_FLOAT,
  [DTypeCode.f64]: NC_DOUBLE,
};

export interface NcVariable {
  name: string;
  dtype: DTypeCode;
  shape: number[]; // spatial shape; the record dimension is implicit
}

function pad4(n: number): number {
  return (n + 3) & ~3;
}

function nameBytes(name: string): Buffer {
  const raw = Buffer.from(name, "utf8");
  const out = Buffer.alloc(4 + pad4(raw.length));
  out.writeUInt32BE(raw.length, 0);
  raw.copy(out, 4);
  return out;
}

function toBigEndian(payload: Buffer, elemSize: number): Buffer {
  const out = Buffer.from(payload); // copy; caller may reuse
  if (elemSize === 4) out.swap32();
  else if (elemSize === 8) out.swap64();
  else if (elemSize === 2) out.swap16();
  return out;
}

interface DimSpec {
  name: string;
  length: number; // 0 marks the record dimension
}

/**
 * Streamed writer: fix the header from the variable list, then append one
 * record per step with `writeRecord`.
 */
export class NetCDFWriter {
  private fd: number;
  private dims: DimSpec[] = [{ name: "time", length: 0 }];
  private dimIds = new Map<string, number>();
  private vsize: number[] = [];
  private begin: number[] = [];
  private recSize = 0;
  private headerLen = 0;
  private records = 0;
  private version: 1 | 2;

  constructor(
    readonly path: string,
    readonly variables: NcVariable[],
    expectedRecords: number,
  ) {
    for (const v of variables) {
      if (NC_TYPE[v.dtype] === undefined) {
        throw new UnsupportedDType(
          `variable ${v.name}: dtype code ${v.dtype} has no classic NetCDF type`,
        );
      }
    }
    // spatial dimensions shared by extent
    for (const v of variables) {
      for (const extent of v.shape) {
        const key = `n${extent}`;
        if (!this.dimIds.has(key)) {
          this.dimIds.set(key, this.dims.length);
          this.dims.push({ name: key, length: extent });
        }
      }
    }
    const single = variables.length === 1;
    for (const v of variables) {
      const raw = v.shape.reduce((a, c) => a * c, 1) * DTYPE_SIZE[v.dtype];
      this.vsize.push(single ? raw : pad4(raw));
    }
    this.recSize = this.vsize.reduce((a, b) => a + b, 0);

    // header length is identical for both versions except the begin width
    const tryVersion = (version: 1 | 2): number => {
      let len = 4 + 4; // magic + numrecs
      len += 8; // dim_list tag + count
      for (const d of this.dims) len += nameBytes(d.name).length + 4;
      len += 8; // absent gatt_list
      len += 8; // var_list tag + count
      for (const v of this.variables) {
        len += nameBytes(v.name).length;
        len += 4 + 4 * (v.shape.length + 1); // ndims + dimids
        len += 8; // absent vatt_list
        len += 4 + 4; // nc_type + vsize
        len += version === 1 ? 4 : 8; // begin
      }
      return pad4(len);
    };
    let headerLen = tryVersion(1);
    let version: 1 | 2 = 1;
    const lastBegin = headerLen + this.recSize - (this.vsize.at(-1) ?? 0);
    if (lastBegin > 0x7fffffff) {
      version = 2;
      headerLen = tryVersion(2);
    }
    this.version = version;
    this.headerLen = headerLen;
    let offset = headerLen;
    for (const size of this.vsize) {
      this.begin.push(offset);
      offset += size;
    }

    this.fd = fs.openSync(path, "w");
    this.writeHeader(expectedRecords);
  }

  private writeHeader(numrecs: number): void {
    const parts: Buffer[] = [];
    const u32 = (v: number) => {
      const b = Buffer.alloc(4);
      b.writeUInt32BE(v, 0);
      return b;
    };
    parts.push(Buffer.from([0x43, 0x44, 0x46, this.version])); // 'CDF' v
    parts.push(u32(numrecs));
    parts.push(u32(NC_DIMENSION), u32(this.dims.length));
    for (const d of this.dims) {
      parts.push(nameBytes(d.name), u32(d.length));
    }
    parts.push(u32(0), u32(0)); // no global attributes
    parts.push(u32(NC_VARIABLE), u32(this.variables.length));
    this.variables.forEach((v, i) => {
      parts.push(nameBytes(v.name));
      const dimids = [0, ...v.shape.map((extent) => this.dimIds.get(`n${extent}`)!)];
      parts.push(u32(dimids.length));
      for (const id of dimids) parts.push(u32(id));
      parts.push(u32(0), u32(0)); // no variable attributes
      parts.push(u32(NC_TYPE[v.dtype]!));
      parts.push(u32(this.vsize[i]));
      if (this.version === 1) {
        parts.push(u32(this.begin[i]));
      } else {
        const b = Buffer.alloc(8);
        b.writeBigUInt64BE(BigInt(this.begin[i]), 0);
        parts.push(b);
      }
    });
    let header = Buffer.concat(parts);
    if (header.length < this.headerLen) {
      header = Buffer.concat([header, Buffer.alloc(this.headerLen - header.length)]);
    }
    fs.writeSync(this.fd, header, 0, header.length, 0);
  }

  /** Append one record; payloads are the little-endian container buffers. */
  writeRecord(payloads: Buffer[]): void {
    if (payloads.length !== this.variables.length) {
      throw new Error("one payload per variable per record");
    }
    const offset = this.headerLen + this.records * this.recSize;
    const slabs: Buffer[] = [];
    this.variables.forEach((v, i) => {
      const be = toBigEndian(payloads[i], DTYPE_SIZE[v.dtype]);
      if (be.length > this.vsize[i]) {
        throw new Error(`record payload for ${v.name} exceeds vsize`);
      }
      slabs.push(
        be.length === this.vsize[i]
          ? be
          : Buffer.concat([be, Buffer.alloc(this.vsize[i] - be.length)]),
      );
    });
    const rec = Buffer.concat(slabs);
    fs.writeSync(this.fd, rec, 0, rec.length, offset);
    this.records += 1;
  }

  close(): void {
    // refresh numrecs in case fewer records arrived than expected
    const b = Buffer.alloc(4);
    b.writeUInt32BE(this.records, 0);
    fs.writeSync(this.fd, b, 0, 4, 4);
    fs.closeSync(this.fd);
  }
}
