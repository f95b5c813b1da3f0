/**
 * Codec for the .vvol container: "VVOL1\n", one JSON header line, then
 * nx*ny*nz little-endian float32 values in x-fastest order.
 */

import { ArrayView, Dims, Spacing, checkView } from "./arrayview.js";

export type VolumeKind = "SUV" | "CT_RAW" | "CT_NORM" | "MASK" | "PROB" | "LOGIT" | "WEIGHT";

const MAGIC = Buffer.from("VVOL1\n", "ascii");

export interface Volume extends ArrayView {
  data: Float32Array;
  spacing: Spacing;
  kind: VolumeKind;
}

export function encodeVvol(view: ArrayView, kind: VolumeKind): Buffer {
  checkView(view, "volume");
  const header = JSON.stringify({
    dims: view.dims,
    spacing: view.spacing ?? [1, 1, 1],
    kind,
    dtype: "f32",
  });
  const data = view.data instanceof Float32Array ? view.data : Float32Array.from(view.data);
  return Buffer.concat([
    MAGIC,
    Buffer.from(header + "\n", "utf8"),
    Buffer.from(data.buffer, data.byteOffset, data.byteLength),
  ]);
}

export function decodeVvol(buf: Buffer): Volume {
  if (buf.length < MAGIC.length || !buf.subarray(0, MAGIC.length).equals(MAGIC)) {
    throw new Error("bad magic: not a .vvol payload");
  }
  const nl = buf.indexOf(0x0a, MAGIC.length);
  if (nl < 0) {
    throw new Error("header line is not newline-terminated");
  }
  const header = JSON.parse(buf.subarray(MAGIC.length, nl).toString("utf8")) as {
    dims: number[];
    spacing: number[];
    kind: VolumeKind;
    dtype: string;
  };
  if (header.dtype !== "f32") {
    throw new Error(`unknown dtype ${header.dtype}`);
  }
  const dims = header.dims as unknown as Dims;
  const n = dims[0] * dims[1] * dims[2];
  const payload = buf.subarray(nl + 1);
  if (payload.length !== 4 * n) {
    throw new Error(`payload size mismatch: expected ${4 * n} bytes, got ${payload.length}`);
  }
  // copy so the Float32Array is aligned regardless of the buffer offset
  const data = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    data[i] = payload.readFloatLE(4 * i);
  }
  return { data, dims, spacing: header.spacing as unknown as Spacing, kind: header.kind };
}
