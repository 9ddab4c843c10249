/** Slice statistics shared by the in-situ consumer and post-hoc checks. */

import { DTypeCode } from "./container";
import { typedView } from "./scatter";

export interface SliceStats {
  step: number;
  field: string;
  min: number;
  max: number;
  mean: number;
}

export function computeStats(
  step: number,
  field: string,
  dtype: DTypeCode,
  payload: Buffer,
): SliceStats {
  const view = typedView(dtype, payload);
  let min = Infinity;
  let max = -Infinity;
  let sum = 0;
  for (let i = 0; i < view.length; i++) {
    const v = Number(view[i]);
    if (v < min) min = v;
    if (v > max) max = v;
    sum += v;
  }
  return { step, field, min, max, mean: sum / view.length };
}

export function statsLine(s: SliceStats): string {
  return (
    `step=${s.step} field=${s.field} min=${s.min.toFixed(6)} ` +
    `max=${s.max.toFixed(6)} mean=${s.mean.toFixed(6)}`
  );
}
