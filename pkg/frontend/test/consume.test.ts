/** Protocol conformance and in-situ/post-hoc stats agreement against the
 * primary staging producer. */

import { ChildProcess, execFileSync, spawn } from "child_process";
import * as fs from "fs";
import * as net from "net";
import * as os from "os";
import * as path from "path";
import { NetCDFReader } from "netcdfjs";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { DTypeCode } from "../src/container";
import { consume } from "../src/consume";
import { convert } from "../src/convert";
import { computeStats } from "../src/stats";
import {
  MSG_BLOCK_DATA,
  MSG_BLOCK_REQUEST,
  MSG_END_OF_STREAM,
  MSG_STEP_ANNOUNCE,
  MSG_STEP_RELEASE,
  StagingClient,
} from "../src/wire";

const tmp = fs.mkdtempSync(path.join(os.tmpdir(), "cons-"));
afterAll(() => fs.rmSync(tmp, { recursive: true, force: true }));

const STEPS = 4;
const NZ = 6;
const K = 2;

function cfgBody(engine: string, endpoint: string): string {
  return `[workload]
nx = 40
ny = 32
nz = ${NZ}
n_3d_fields = 2
n_2d_fields = 1
steps = ${STEPS}
px = 2
py = 2
nodes = 1
ranks_per_node = 4
generator = smooth
seed = 424

[engine]
engine = ${engine}
backend = agg
codec = lz4
shuffle = on
${endpoint ? `endpoint = ${endpoint}` : ""}

[shim]
pfs_rate_bytes_per_sec = None
bb_rate_bytes_per_sec = None
fabric_rate_bytes_per_sec = None
`;
}

async function freePort(): Promise<number> {
  return new Promise((resolve) => {
    const srv = net.createServer();
    srv.listen(0, "127.0.0.1", () => {
      const port = (srv.address() as net.AddressInfo).port;
      srv.close(() => resolve(port));
    });
  });
}

function spawnProducer(endpoint: string): ChildProcess {
  const cfgPath = path.join(tmp, "staging.cfg");
  fs.writeFileSync(cfgPath, cfgBody("staging", endpoint));
  return spawn("bench", ["run", "--config", cfgPath,
                         "--out-dir", path.join(tmp, "staging_out")],
               { stdio: "pipe" });
}

describe("sc-consume against the primary producer", () => {
  let producer: ChildProcess;
  let endpoint: string;
  let stats: Awaited<ReturnType<typeof consume>>;
  let log: StagingClient["messageLog"];

  beforeAll(async () => {
    const port = await freePort();
    endpoint = `127.0.0.1:${port}`;
    producer = spawnProducer(endpoint);
    const imgDir = path.join(tmp, "imgs");
    fs.mkdirSync(imgDir, { recursive: true });

    // run the consumer with a wire client we can inspect afterwards
    const client = await StagingClient.connect(endpoint);
    log = client.messageLog;
    stats = [];
    for (;;) {
      const step = await client.nextStep();
      if (step === null) break;
      const variable = step.variables.get("T")!;
      const payload = await client.get("T", {
        start: [K, 0, 0], count: [1, variable.shape[1], variable.shape[2]],
      });
      stats.push(computeStats(step.step, "T", variable.dtype, payload));
      client.release();
    }
    client.close();
    const rc = await new Promise<number>((resolve) => producer.on("exit", resolve));
    expect(rc).toBe(0);
  }, 120000);

  it("delivers every step exactly once, in order", () => {
    expect(stats.map((s) => s.step)).toEqual([...Array(STEPS).keys()]);
  });

  it("requests only the selected field and releases every step", () => {
    const announces = log.filter(([d, t]) => d === "recv" && t === MSG_STEP_ANNOUNCE);
    const requests = log.filter(([d, t]) => d === "send" && t === MSG_BLOCK_REQUEST);
    const releases = log.filter(([d, t]) => d === "send" && t === MSG_STEP_RELEASE);
    const data = log.filter(([d, t]) => d === "recv" && t === MSG_BLOCK_DATA);
    expect(announces.length).toBe(STEPS);
    expect(requests.length).toBe(STEPS); // one per step: only T, never P/T2/XTIME
    expect(releases.map((r) => r[2])).toEqual([...Array(STEPS).keys()]);
    expect(data.length).toBe(STEPS * 4); // 4 ranks contribute one T block each
    expect(log.filter(([d, t]) => d === "recv" && t === MSG_END_OF_STREAM).length).toBe(1);
  });

  it("matches post-hoc statistics from the converted file run", () => {
    // identical seed through the file engine, converted, sliced the same way
    const cfgPath = path.join(tmp, "file.cfg");
    fs.writeFileSync(cfgPath, cfgBody("file", ""));
    execFileSync("bench", ["run", "--config", cfgPath,
                           "--out-dir", path.join(tmp, "file_out"),
                           "--config-id", "posthoc"], { stdio: "pipe" });
    const indexDir = path.join(tmp, "file_out", "posthoc", "rep0", "pfs");
    const ncPath = path.join(tmp, "posthoc.nc");
    convert({ indexDir, outPath: ncPath, vars: ["T"] });
    const r = new NetCDFReader(fs.readFileSync(ncPath));
    const records = r.getDataVariable("T") as unknown as number[][];
    const sliceLen = 32 * 40;
    for (let step = 0; step < STEPS; step++) {
      const slice = records[step].slice(K * sliceLen, (K + 1) * sliceLen);
      const le = Buffer.from(new Float32Array(slice).buffer);
      const want = computeStats(step, "T", DTypeCode.f32, le);
      expect(stats[step].min).toBe(want.min);
      expect(stats[step].max).toBe(want.max);
      expect(stats[step].mean).toBe(want.mean);
    }
  });
});

describe("sc-consume on constant fields", () => {
  it("reports mean == min == max == the constant", async () => {
    const port = await freePort();
    const endpoint = `127.0.0.1:${port}`;
    const cfgPath = path.join(tmp, "const.cfg");
    fs.writeFileSync(cfgPath, cfgBody("staging", endpoint).replace(
      "generator = smooth", "generator = constant"));
    const producer = spawn("bench", ["run", "--config", cfgPath,
                                     "--out-dir", path.join(tmp, "const_out")],
                           { stdio: "pipe" });
    const got = await consume({ endpoint, field: "T", k: 0 });
    const rc = await new Promise<number>((resolve) => producer.on("exit", resolve));
    expect(rc).toBe(0);
    const c = Math.fround(287.15); // fields are f32
    for (const s of got) {
      expect(s.min).toBe(c);
      expect(s.max).toBe(c);
      expect(s.mean).toBe(c);
    }
  }, 120000);
});

describe("sc-consume end to end with images", () => {
  it("consumes a stream, writes one png per step, exits cleanly", async () => {
    const port = await freePort();
    const endpoint = `127.0.0.1:${port}`;
    const producer = spawnProducer(endpoint);
    const outDir = path.join(tmp, "imgs2");
    fs.mkdirSync(outDir, { recursive: true });
    const got = await consume({ endpoint, field: "T", k: K, outDir });
    const rc = await new Promise<number>((resolve) => producer.on("exit", resolve));
    expect(rc).toBe(0);
    expect(got.length).toBe(STEPS);
    for (let s = 0; s < STEPS; s++) {
      const png = fs.readFileSync(path.join(outDir, `step_${s}.png`));
      expect(png.subarray(0, 8)).toEqual(
        Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]));
    }
    // smooth temperature-like fields live near 287 K
    for (const s of got) {
      expect(s.min).toBeGreaterThan(270);
      expect(s.max).toBeLessThan(305);
    }
  }, 120000);
});
