/**
 * Decoders for the stagecoach block operators: byte unshuffle plus the
 * codec registry (0 none, 1 lz4 block, 2 deflate/zlib, 3 zstd).
 */

import * as zlib from "zlib";
import { decompress as zstdDecompress } from "fzstd";

export const CODEC_NONE = 0;
export const CODEC_LZ4 = 1;
export const CODEC_DEFLATE = 2;
export const CODEC_ZSTD = 3;

/** Inverse of the shuffle: input groups byte j of every element together. */
export function unshuffle(data: Buffer, elemSize: number): Buffer {
  if (elemSize === 1) return data;
  if (data.length % elemSize !== 0) {
    throw new Error(`payload ${data.length} not a multiple of element size ${elemSize}`);
  }
  const n = data.length / elemSize;
  const out = Buffer.alloc(data.length);
  for (let j = 0; j < elemSize; j++) {
    const base = j * n;
    for (let i = 0; i < n; i++) {
      out[i * elemSize + j] = data[base + i];
    }
  }
  return out;
}

/** Raw LZ4 block decoder (no frame header; output size known in advance). */
export function lz4BlockDecode(src: Buffer, rawLen: number): Buffer {
  const out = Buffer.alloc(rawLen);
  let i = 0;
  let o = 0;
  while (i < src.length) {
    const token = src[i++];
    let litLen = token >> 4;
    if (litLen === 15) {
      let b;
      do {
        b = src[i++];
        litLen += b;
      } while (b === 255);
    }
    src.copy(out, o, i, i + litLen);
    i += litLen;
    o += litLen;
    if (i >= src.length) break; // last sequence carries no match
    const offset = src.readUInt16LE(i);
    i += 2;
    if (offset === 0) throw new Error("corrupt lz4 block: zero match offset");
    let matchLen = (token & 0x0f) + 4;
    if ((token & 0x0f) === 15) {
      let b;
      do {
        b = src[i++];
        matchLen += b;
      } while (b === 255);
    }
    let m = o - offset;
    if (m < 0) throw new Error("corrupt lz4 block: match before start");
    for (let k = 0; k < matchLen; k++) {
      out[o++] = out[m++]; // may overlap; byte-by-byte is the contract
    }
  }
  if (o !== rawLen) {
    throw new Error(`lz4 block decoded to ${o} bytes, expected ${rawLen}`);
  }
  return out;
}

export function decodePayload(
  stored: Buffer,
  codecId: number,
  shuffle: boolean,
  rawLen: number,
  elemSize: number,
): Buffer {
  let data: Buffer;
  switch (codecId) {
    case CODEC_NONE:
      if (stored.length !== rawLen) {
        throw new Error(`raw block is ${stored.length} bytes, header says ${rawLen}`);
      }
      return stored;
    case CODEC_LZ4:
      data = lz4BlockDecode(stored, rawLen);
      break;
    case CODEC_DEFLATE:
      data = zlib.inflateSync(stored);
      break;
    case CODEC_ZSTD:
      data = Buffer.from(zstdDecompress(new Uint8Array(stored)));
      break;
    default:
      throw new Error(`unknown codec ${codecId}`);
  }
  if (data.length !== rawLen) {
    throw new Error(`codec ${codecId} produced ${data.length} bytes, expected ${rawLen}`);
  }
  return shuffle ? unshuffle(data, elemSize) : data;
}
