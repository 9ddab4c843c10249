/** Hyperslab intersection and row-major scatter of block payloads. */

import { DTYPE_SIZE, DTypeCode, IndexEntry, VariableDef } from "./container";

export interface Box {
  start: number[];
  count: number[];
}

export function intersect(a: Box, b: Box): Box | null {
  if (a.start.length !== b.start.length) {
    throw new Error("box ranks differ");
  }
  const start: number[] = [];
  const count: number[] = [];
  for (let d = 0; d < a.start.length; d++) {
    const lo = Math.max(a.start[d], b.start[d]);
    const hi = Math.min(a.start[d] + a.count[d], b.start[d] + b.count[d]);
    if (hi <= lo) return null;
    start.push(lo);
    count.push(hi - lo);
  }
  return { start, count };
}

export function volume(count: number[]): number {
  return count.reduce((a, c) => a * c, 1);
}

function strides(count: number[], elemSize: number): number[] {
  const out = new Array(count.length).fill(elemSize);
  for (let d = count.length - 2; d >= 0; d--) {
    out[d] = out[d + 1] * count[d + 1];
  }
  return out;
}

/**
 * Copy one block's overlap with the request box into the output buffer.
 * Both buffers are row-major with the last dimension contiguous, so each
 * innermost run is a single copy.
 */
function scatterOne(
  out: Buffer,
  req: Box,
  payload: Buffer,
  blockBox: Box,
  overlap: Box,
  elemSize: number,
): void {
  const nd = req.start.length;
  const outStr = strides(req.count, elemSize);
  const srcStr = strides(blockBox.count, elemSize);
  const rowBytes = overlap.count[nd - 1] * elemSize;
  const iter = overlap.count.slice(0, nd - 1);
  const idx = new Array(iter.length).fill(0);
  for (;;) {
    let dst = 0;
    let src = 0;
    for (let d = 0; d < nd - 1; d++) {
      dst += (overlap.start[d] - req.start[d] + idx[d]) * outStr[d];
      src += (overlap.start[d] - blockBox.start[d] + idx[d]) * srcStr[d];
    }
    dst += (overlap.start[nd - 1] - req.start[nd - 1]) * elemSize;
    src += (overlap.start[nd - 1] - blockBox.start[nd - 1]) * elemSize;
    payload.copy(out, dst, src, src + rowBytes);
    let d = iter.length - 1;
    for (; d >= 0; d--) {
      if (++idx[d] < iter[d]) break;
      idx[d] = 0;
    }
    if (d < 0) break;
  }
}

/** Assemble the requested region from (entry, decoded payload) pairs. */
export function assemble(
  variable: VariableDef,
  selection: Box | null,
  blocks: Array<{ entry: IndexEntry; payload: Buffer }>,
): Buffer {
  const elemSize = DTYPE_SIZE[variable.dtype];
  if (variable.shape.length === 0) {
    return blocks[0].payload;
  }
  const req: Box = selection ?? {
    start: variable.shape.map(() => 0),
    count: [...variable.shape],
  };
  const out = Buffer.alloc(volume(req.count) * elemSize);
  for (const { entry, payload } of blocks) {
    const blockBox: Box = { start: entry.start, count: entry.count };
    const overlap = intersect(req, blockBox);
    if (overlap === null) continue;
    scatterOne(out, req, payload, blockBox, overlap, elemSize);
  }
  return out;
}

/** Typed-array view over a little-endian payload buffer. */
export function typedView(
  dtype: DTypeCode,
  payload: Buffer,
): Float32Array | Float64Array | Int32Array | BigInt64Array | Uint8Array {
  const ab = payload.buffer.slice(
    payload.byteOffset,
    payload.byteOffset + payload.byteLength,
  );
  switch (dtype) {
    case DTypeCode.f32:
      return new Float32Array(ab);
    case DTypeCode.f64:
      return new Float64Array(ab);
    case DTypeCode.i32:
      return new Int32Array(ab);
    case DTypeCode.i64:
      return new BigInt64Array(ab);
    case DTypeCode.u8:
      return new Uint8Array(ab);
  }
}
