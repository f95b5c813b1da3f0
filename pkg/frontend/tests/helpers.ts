import { execFileSync } from "node:child_process";
import { mkdtempSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { ArrayView, Dims, Spacing } from "../src/arrayview.js";
import { encodeVvol, VolumeKind } from "../src/vvol.js";

/** Deterministic 32-bit PRNG (mulberry32); good enough for test corpora. */
export function makeRng(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function randomProbs(rng: () => number, n: number, lo = 0.02, hi = 0.98): Float32Array {
  const out = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    out[i] = lo + (hi - lo) * rng();
  }
  return out;
}

/** Probabilities kept >= margin away from residual-bin edges (0.05 + 0.1k). */
export function binSafeProbs(rng: () => number, n: number): Float32Array {
  const out = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    const k = 1 + Math.floor(rng() * 9); // centers 0.1 .. 0.9
    const jitter = (rng() - 0.5) * 0.04; // stay within +-0.02 of a center
    out[i] = Math.fround(0.1 * k + jitter);
  }
  return out;
}

export function randomMask(rng: () => number, n: number, frac = 0.3): Float32Array {
  const out = new Float32Array(n);
  for (let i = 0; i < n; i++) {
    out[i] = rng() < frac ? 1.0 : 0.0;
  }
  return out;
}

export function view(
  data: Float32Array | Float64Array,
  dims: Dims,
  spacing: Spacing = [1, 1, 1],
): ArrayView {
  return { data, dims, spacing };
}

export function tempDir(prefix: string): string {
  return mkdtempSync(join(tmpdir(), prefix));
}

export function writeVvol(
  dir: string,
  name: string,
  v: ArrayView,
  kind: VolumeKind,
): string {
  const path = join(dir, name);
  writeFileSync(path, encodeVvol(v, kind));
  return path;
}

export function runCli(args: string[]): string {
  return execFileSync(process.env.LESIONKIT_CMD ?? "lesionkit", args, {
    encoding: "utf8",
    maxBuffer: 64 * 1024 * 1024,
  });
}

export function parseCsv(text: string): Record<string, string>[] {
  const lines = text.trim().split("\n");
  const header = lines[0].split(",");
  return lines.slice(1).map((line) => {
    const cells = line.split(",");
    const row: Record<string, string> = {};
    header.forEach((h, i) => {
      row[h] = cells[i];
    });
    return row;
  });
}
