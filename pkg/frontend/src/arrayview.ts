/**
 * Array-level view of a dense 3D scalar field in x-fastest order
 * (flat index i = x + nx * (y + ny * z)), matching the backend layout.
 */

export type Dims = readonly [number, number, number];
export type Spacing = readonly [number, number, number];

export interface ArrayView {
  /** Contiguous buffer of 32- or 64-bit floats, length nx*ny*nz. */
  data: Float32Array | Float64Array;
  dims: Dims;
  /** Voxel spacing in millimeters; defaults to [1, 1, 1]. */
  spacing?: Spacing;
}

export class ShapeMismatchError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ShapeMismatchError";
  }
}

export class ServerError extends Error {
  readonly code: string;
  constructor(code: string, message: string) {
    super(message);
    this.name = "ServerError";
    this.code = code;
  }
}

export function checkView(view: ArrayView, name: string): void {
  const { data, dims } = view;
  if (!(data instanceof Float32Array) && !(data instanceof Float64Array)) {
    throw new ShapeMismatchError(`${name}: data must be a Float32Array or Float64Array`);
  }
  if (dims.length !== 3 || dims.some((d) => !Number.isInteger(d) || d < 1)) {
    throw new ShapeMismatchError(`${name}: dims must be 3 positive integers, got ${JSON.stringify(dims)}`);
  }
  const n = dims[0] * dims[1] * dims[2];
  if (data.length !== n) {
    throw new ShapeMismatchError(`${name}: data length ${data.length} != nx*ny*nz = ${n}`);
  }
}

export function checkSameGeometry(a: ArrayView, b: ArrayView, names: [string, string]): void {
  if (a.dims[0] !== b.dims[0] || a.dims[1] !== b.dims[1] || a.dims[2] !== b.dims[2]) {
    throw new ShapeMismatchError(
      `${names[0]} dims ${JSON.stringify(a.dims)} != ${names[1]} dims ${JSON.stringify(b.dims)}`,
    );
  }
  const sa = a.spacing ?? [1, 1, 1];
  const sb = b.spacing ?? [1, 1, 1];
  if (sa[0] !== sb[0] || sa[1] !== sb[1] || sa[2] !== sb[2]) {
    throw new ShapeMismatchError(
      `${names[0]} spacing ${JSON.stringify(sa)} != ${names[1]} spacing ${JSON.stringify(sb)}`,
    );
  }
}

export interface WireArrays {
  dtype: "f32" | "f64";
  /** base64 little-endian payloads, one per input view, in argument order */
  payloads: string[];
  /** true when a dtype conversion forced a copy of some input */
  copied: boolean;
}

/**
 * Serialize views for transport. Views already in a shared float dtype are
 * encoded from their underlying bytes without conversion; mixed dtypes are
 * upcast to float64 (flagged as copied).
 */
export function toWire(views: ArrayView[]): WireArrays {
  const allF32 = views.every((v) => v.data instanceof Float32Array);
  const allF64 = views.every((v) => v.data instanceof Float64Array);
  let copied = false;
  let arrays: (Float32Array | Float64Array)[];
  let dtype: "f32" | "f64";
  if (allF32) {
    dtype = "f32";
    arrays = views.map((v) => v.data);
  } else if (allF64) {
    dtype = "f64";
    arrays = views.map((v) => v.data);
  } else {
    dtype = "f64";
    copied = true;
    arrays = views.map((v) => (v.data instanceof Float64Array ? v.data : Float64Array.from(v.data)));
  }
  const payloads = arrays.map((a) =>
    Buffer.from(a.buffer, a.byteOffset, a.byteLength).toString("base64"),
  );
  return { dtype, payloads, copied };
}

export function decodeF64(b64: string): Float64Array {
  const buf = Buffer.from(b64, "base64");
  return new Float64Array(buf.buffer, buf.byteOffset, buf.byteLength / 8);
}

// the wire format is little-endian; refuse to run on big-endian hosts
const probe = new Uint8Array(new Uint16Array([1]).buffer);
if (probe[0] !== 1) {
  throw new Error("lesionkit-bindings requires a little-endian host");
}
