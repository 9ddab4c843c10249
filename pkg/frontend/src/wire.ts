/**
 * Client for the stagecoach staging protocol (magic SCST, version 1).
 * Frames: u32 LE length covering one type byte plus the body.
 */

import * as net from "net";
import * as zlib from "zlib";
import { DTYPE_SIZE, DTypeCode, IndexEntry, VariableDef } from "./container";
import { decodePayload } from "./codecs";
import { Box, assemble } from "./scatter";

export const MSG_HELLO = 1;
export const MSG_HELLO_ACK = 2;
export const MSG_STEP_ANNOUNCE = 3;
export const MSG_BLOCK_REQUEST = 4;
export const MSG_BLOCK_DATA = 5;
export const MSG_STEP_RELEASE = 6;
export const MSG_END_OF_STREAM = 7;
export const MSG_ERROR = 8;

const MAGIC = "SCST";
const VERSION = 1;

export interface WireEntry {
  blockId: number;
  varId: number;
  start: number[];
  count: number[];
  codecId: number;
  shuffle: boolean;
  rawLen: number;
  storedLen: number;
  crc32: number;
}

export interface AnnouncedStep {
  step: number;
  variables: Map<string, VariableDef>;
  entries: WireEntry[];
}

export type LogRow = [dir: "send" | "recv", msgType: number, step: number];

class FrameReader {
  private chunks: Buffer = Buffer.alloc(0);
  private waiters: Array<() => void> = [];
  private closed = false;

  constructor(socket: net.Socket) {
    socket.on("data", (d) => {
      this.chunks = Buffer.concat([this.chunks, d]);
      this.wake();
    });
    socket.on("close", () => {
      this.closed = true;
      this.wake();
    });
    socket.on("error", () => {
      this.closed = true;
      this.wake();
    });
  }

  private wake(): void {
    const ws = this.waiters;
    this.waiters = [];
    for (const w of ws) w();
  }

  private async waitForBytes(n: number): Promise<void> {
    while (this.chunks.length < n) {
      if (this.closed) throw new Error("connection closed mid-frame");
      await new Promise<void>((resolve) => this.waiters.push(resolve));
    }
  }

  async readFrame(): Promise<{ msgType: number; body: Buffer }> {
    await this.waitForBytes(4);
    const length = this.chunks.readUInt32LE(0);
    await this.waitForBytes(4 + length);
    const msgType = this.chunks[4];
    const body = this.chunks.subarray(5, 4 + length);
    this.chunks = this.chunks.subarray(4 + length);
    return { msgType, body: Buffer.from(body) };
  }
}

function u64(view: DataView, off: number): number {
  return Number(view.getBigUint64(off, true));
}

function parseAnnounce(body: Buffer): AnnouncedStep {
  const view = new DataView(body.buffer, body.byteOffset, body.byteLength);
  const step = view.getUint32(0, true);
  const nVars = view.getUint32(4, true);
  let off = 8;
  const variables = new Map<string, VariableDef>();
  for (let i = 0; i < nVars; i++) {
    const varId = view.getUint32(off, true);
    const dtype = view.getUint8(off + 4) as DTypeCode;
    const ndim = view.getUint8(off + 5);
    const nameLen = view.getUint16(off + 6, true);
    off += 8;
    const shape: number[] = [];
    for (let d = 0; d < ndim; d++) {
      shape.push(u64(view, off));
      off += 8;
    }
    const name = body.subarray(off, off + nameLen).toString("utf8");
    off += nameLen;
    variables.set(name, { varId, name, dtype, shape });
  }
  const nEntries = view.getUint32(off, true);
  off += 4;
  const entries: WireEntry[] = [];
  for (let i = 0; i < nEntries; i++) {
    const blockId = view.getUint32(off, true);
    const varId = view.getUint32(off + 4, true);
    const ndim = view.getUint8(off + 8);
    const start: number[] = [];
    const count: number[] = [];
    for (let d = 0; d < ndim; d++) {
      start.push(u64(view, off + 9 + 8 * d));
      count.push(u64(view, off + 41 + 8 * d));
    }
    const codecId = view.getUint8(off + 73);
    const shuffle = view.getUint8(off + 74) !== 0;
    const rawLen = u64(view, off + 75);
    const storedLen = u64(view, off + 83);
    const crc32 = view.getUint32(off + 91, true);
    off += 95;
    entries.push({ blockId, varId, start, count, codecId, shuffle, rawLen, storedLen, crc32 });
  }
  return { step, variables, entries };
}

export class StagingClient {
  readonly messageLog: LogRow[] = [];
  private current: AnnouncedStep | null = null;
  private ended = false;

  private constructor(
    private socket: net.Socket,
    private reader: FrameReader,
  ) {}

  static async connect(endpoint: string, timeoutMs = 10000): Promise<StagingClient> {
    const idx = endpoint.lastIndexOf(":");
    const host = endpoint.slice(0, idx) || "127.0.0.1";
    const port = parseInt(endpoint.slice(idx + 1), 10);
    const deadline = Date.now() + timeoutMs;
    let socket: net.Socket;
    for (;;) {
      try {
        socket = await new Promise<net.Socket>((resolve, reject) => {
          const s = net.createConnection({ host, port }, () => resolve(s));
          s.on("error", reject);
        });
        break;
      } catch (err) {
        if (Date.now() > deadline) throw err;
        await new Promise((r) => setTimeout(r, 50));
      }
    }
    socket.removeAllListeners("error");
    const reader = new FrameReader(socket);
    const client = new StagingClient(socket, reader);
    const hello = Buffer.alloc(6);
    hello.write(MAGIC, 0, "latin1");
    hello.writeUInt16LE(VERSION, 4);
    client.send(MSG_HELLO, hello, -1);
    const { msgType, body } = await client.recv();
    if (msgType === MSG_ERROR) {
      throw new Error(`server rejected handshake: ${body.subarray(2).toString()}`);
    }
    if (msgType !== MSG_HELLO_ACK) {
      throw new Error(`expected HELLO_ACK, got ${msgType}`);
    }
    if (body.subarray(0, 4).toString("latin1") !== MAGIC ||
        body.readUInt16LE(4) !== VERSION) {
      throw new Error("bad HELLO_ACK magic/version");
    }
    return client;
  }

  private send(msgType: number, body: Buffer, step: number): void {
    const frame = Buffer.alloc(5 + body.length);
    frame.writeUInt32LE(1 + body.length, 0);
    frame[4] = msgType;
    body.copy(frame, 5);
    this.socket.write(frame);
    this.messageLog.push(["send", msgType, step]);
  }

  private async recv(): Promise<{ msgType: number; body: Buffer }> {
    const frame = await this.reader.readFrame();
    let step = -1;
    if (
      frame.msgType === MSG_STEP_ANNOUNCE ||
      frame.msgType === MSG_BLOCK_DATA ||
      frame.msgType === MSG_STEP_RELEASE
    ) {
      step = frame.body.readUInt32LE(0);
    }
    this.messageLog.push(["recv", frame.msgType, step]);
    return frame;
  }

  /** Next announced step, or null once the producer signals end of stream. */
  async nextStep(): Promise<AnnouncedStep | null> {
    if (this.ended) return null;
    if (this.current !== null) throw new Error("previous step not released");
    const { msgType, body } = await this.recv();
    if (msgType === MSG_END_OF_STREAM) {
      this.ended = true;
      return null;
    }
    if (msgType === MSG_ERROR) {
      throw new Error(`server error: ${body.subarray(2).toString()}`);
    }
    if (msgType !== MSG_STEP_ANNOUNCE) {
      throw new Error(`expected STEP_ANNOUNCE, got ${msgType}`);
    }
    this.current = parseAnnounce(body);
    return this.current;
  }

  availableVariables(): string[] {
    if (!this.current) return [];
    const present = new Set(this.current.entries.map((e) => e.varId));
    return [...this.current.variables.values()]
      .filter((v) => present.has(v.varId))
      .map((v) => v.name)
      .sort();
  }

  /** Request one variable's blocks and assemble the selection. */
  async get(name: string, selection: Box | null = null): Promise<Buffer> {
    const step = this.current;
    if (!step) throw new Error("no step open");
    const variable = step.variables.get(name);
    if (!variable) throw new Error(`variable ${name} not in step ${step.step}`);
    const entries = step.entries.filter((e) => e.varId === variable.varId);
    if (entries.length === 0) {
      throw new Error(`variable ${name} has no blocks in step ${step.step}`);
    }
    const req = Buffer.alloc(8);
    req.writeUInt32LE(step.step, 0);
    req.writeUInt32LE(variable.varId, 4);
    this.send(MSG_BLOCK_REQUEST, req, step.step);

    const byId = new Map(entries.map((e) => [e.blockId, e]));
    const elemSize = DTYPE_SIZE[variable.dtype];
    const blocks: Array<{ entry: IndexEntry; payload: Buffer }> = [];
    while (blocks.length < entries.length) {
      const { msgType, body } = await this.recv();
      if (msgType !== MSG_BLOCK_DATA) {
        throw new Error(`expected BLOCK_DATA, got ${msgType}`);
      }
      const blockId = body.readUInt32LE(4);
      const stored = body.subarray(8);
      const e = byId.get(blockId);
      if (!e || body.readUInt32LE(0) !== step.step) {
        throw new Error(`unexpected block ${blockId}`);
      }
      if ((zlib.crc32(stored) >>> 0) !== e.crc32) {
        throw new Error(`block ${blockId} checksum mismatch on the wire`);
      }
      const payload = decodePayload(Buffer.from(stored), e.codecId, e.shuffle, e.rawLen, elemSize);
      blocks.push({
        entry: {
          varId: e.varId, step: step.step, subfileId: 0, byteOffset: 0,
          storedLen: e.storedLen, rawLen: e.rawLen,
          start: e.start, count: e.count,
          codecId: e.codecId, shuffle: e.shuffle, crc32: e.crc32,
        },
        payload,
      });
    }
    return assemble(variable, selection, blocks);
  }

  release(): void {
    if (!this.current) throw new Error("no step open");
    const body = Buffer.alloc(4);
    body.writeUInt32LE(this.current.step, 0);
    this.send(MSG_STEP_RELEASE, body, this.current.step);
    this.current = null;
  }

  close(): void {
    this.socket.destroy();
  }
}
