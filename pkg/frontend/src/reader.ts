/** Read surface over a published index directory (mirrors the writer's layout). */

import * as fs from "fs";
import {
  DTYPE_SIZE,
  GlobalIndex,
  IndexEntry,
  VariableDef,
  completeSteps,
  loadIndex,
  readBlockPayload,
  subfilePath,
} from "./container";
import { Box, assemble } from "./scatter";

export class ContainerReader {
  readonly index: GlobalIndex;
  private fds = new Map<number, number>();

  constructor(
    readonly indexDir: string,
    readonly dataDirs: string[] = [indexDir],
  ) {
    this.index = loadIndex(indexDir);
  }

  steps(): number[] {
    return completeSteps(this.index);
  }

  variable(name: string): VariableDef {
    const v = this.index.byName.get(name);
    if (!v) throw new Error(`variable ${name} not in index`);
    return v;
  }

  private fd(subfileId: number): number {
    let fd = this.fds.get(subfileId);
    if (fd === undefined) {
      fd = fs.openSync(subfilePath(this.dataDirs, subfileId), "r");
      this.fds.set(subfileId, fd);
    }
    return fd;
  }

  readStep(step: number, name: string, selection: Box | null = null): Buffer {
    const variable = this.variable(name);
    const si = this.index.steps.get(step);
    if (!si) throw new Error(`step ${step} not published`);
    if (!si.complete) throw new Error(`step ${step} is incomplete`);
    const entries = si.entries.filter((e) => e.varId === variable.varId);
    if (entries.length === 0) {
      throw new Error(`variable ${name} not written in step ${step}`);
    }
    const elemSize = DTYPE_SIZE[variable.dtype];
    const blocks = entries.map((entry: IndexEntry) => ({
      entry,
      payload: readBlockPayload(this.fd(entry.subfileId), entry, elemSize),
    }));
    return assemble(variable, selection, blocks);
  }

  close(): void {
    for (const fd of this.fds.values()) fs.closeSync(fd);
    this.fds.clear();
  }
}
